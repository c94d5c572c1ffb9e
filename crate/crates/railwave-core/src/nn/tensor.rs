use super::NnError;

/// A dense row-major float tensor with an optional gradient buffer of the
/// same size.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(NnError::BadTensor(format!("zero dimension in {shape:?}")));
        }
        if numel != data.len() {
            return Err(NnError::BadTensor(format!(
                "shape {shape:?} wants {numel} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NnError::BadTensor("non-finite value".into()));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        self.grad.get_or_insert_with(|| vec![0.0; self.data.len()])
    }

    /// Drops accumulated gradients (keeps the buffer).
    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Snaps every value to the nearest f32. Parameters are kept on this
    /// grid so checkpoint round trips are bit-exact at any training step.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    /// Finiteness invariant, enforced after ops in debug and test builds.
    #[inline]
    pub(crate) fn debug_check_finite(&self, op: &str) {
        debug_assert!(
            self.data.iter().all(|v| v.is_finite()),
            "non-finite value after {op}"
        );
    }
}
