use super::Tensor;

/// Step size for central differences. In f64 this loses roughly h^2 = 1e-6
/// to truncation, comfortably inside every tolerance used by the tests.
const STEP: f64 = 1e-3;

/// Outcome of a finite-difference comparison. The check never panics; the
/// caller asserts on `passed()` so failing coordinates stay inspectable.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub n_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.n_checked > 0 && self.max_rel_err < self.tolerance
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compares `analytic` (the claimed gradient of `f` at `point`) against a
/// central difference in every coordinate.
pub fn grad_check<F>(
    mut f: F,
    point: &Tensor,
    analytic: &[f64],
    tolerance: f64,
) -> GradCheckReport
where
    F: FnMut(&Tensor) -> f64,
{
    assert_eq!(
        analytic.len(),
        point.data.len(),
        "analytic gradient length must match the point"
    );
    let mut probe = point.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        n_checked: point.data.len(),
        tolerance,
    };
    for i in 0..point.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + STEP;
        let hi = f(&probe);
        probe.data[i] = orig - STEP;
        let lo = f(&probe);
        probe.data[i] = orig;
        let numeric = (hi - lo) / (2.0 * STEP);
        let e = rel_err(analytic[i], numeric);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_index = i;
        }
    }
    report
}

/// Directional variant: compares the analytic derivative along `direction`
/// (a single dot product) against one central difference. Two evaluations
/// of `f` regardless of dimension, which keeps composite-network checks
/// affordable.
pub fn grad_check_directional<F>(
    mut f: F,
    point: &Tensor,
    analytic: &[f64],
    direction: &[f64],
    tolerance: f64,
) -> GradCheckReport
where
    F: FnMut(&Tensor) -> f64,
{
    assert_eq!(analytic.len(), point.data.len());
    assert_eq!(direction.len(), point.data.len());
    let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
    assert!(norm > 0.0, "direction must be nonzero");
    let mut probe = point.clone();
    for i in 0..probe.data.len() {
        probe.data[i] = point.data[i] + STEP * direction[i] / norm;
    }
    let hi = f(&probe);
    for i in 0..probe.data.len() {
        probe.data[i] = point.data[i] - STEP * direction[i] / norm;
    }
    let lo = f(&probe);
    let numeric = (hi - lo) / (2.0 * STEP);
    let analytic_dir = analytic
        .iter()
        .zip(direction)
        .map(|(a, d)| a * d / norm)
        .sum::<f64>();
    GradCheckReport {
        max_rel_err: rel_err(analytic_dir, numeric),
        worst_index: 0,
        n_checked: 1,
        tolerance,
    }
}
