//! Morlet continuous wavelet transform and scalogram feature images.
//!
//! [`cwt`] evaluates W(a,b) = (1/sqrt(a)) * sum_t x[t] * conj(psi((t-b)/a))
//! over a log-spaced scale grid via FFT circular convolution with the
//! segment zero-padded past the widest wavelet's support. [`cwt_direct`] is
//! the O(n^2) reference evaluator the fast path is checked against.
//! [`scalogram_to_image`] turns coefficient magnitudes into the normalized
//! 64x64 images the classifier consumes.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::signal::{FaultClass, Segment, SignalError};

/// Kernel support half-width in units of scale: the Gaussian envelope at
/// |t| = 8 is exp(-32) ~ 1e-14, far below every comparison tolerance.
const SUPPORT_RADIUS: f64 = 8.0;

const RWIM_MAGIC: &[u8; 4] = b"RWIM";
const RWIM_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WaveletError {
    #[error("central frequency {0} too low: admissibility requires omega0 >= 5")]
    BadOmega(f64),
    #[error("bad frequency band [{f_min}, {f_max}] Hz")]
    BadBand { f_min: f64, f_max: f64 },
    #[error("band edge {f_max} Hz exceeds the Nyquist frequency {nyquist} Hz")]
    NyquistExceeded { f_max: f64, nyquist: f64 },
    #[error("need at least {min} scales, got {got}")]
    TooFewScales { min: usize, got: usize },
    #[error("invalid scale grid: {0}")]
    BadGrid(String),
    #[error("segment of {len} samples is too short (minimum {min})")]
    SegmentTooShort { len: usize, min: usize },
    #[error("segment contains a non-finite sample")]
    NonFiniteInput,
    #[error("plan built for {expected}-sample segments, got {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("empty scalogram")]
    EmptyScalogram,
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("malformed image file {path}: {reason}")]
    MalformedImage {
        path: std::path::PathBuf,
        reason: String,
    },
    #[error(transparent)]
    BadClass(#[from] SignalError),
}

/// Morlet mother wavelet parameters. The amplitude factor pi^(-1/4) is
/// fixed; only the central frequency varies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MorletParams {
    pub omega0: f64,
}

impl MorletParams {
    pub fn new(omega0: f64) -> Result<Self, WaveletError> {
        if !(omega0.is_finite() && omega0 >= 5.0) {
            return Err(WaveletError::BadOmega(omega0));
        }
        Ok(MorletParams { omega0 })
    }
}

impl Default for MorletParams {
    fn default() -> Self {
        MorletParams { omega0: 6.0 }
    }
}

/// psi(t) = pi^(-1/4) * exp(i*omega0*t) * exp(-t^2/2)
pub fn morlet_sample(t: f64, params: &MorletParams) -> Complex64 {
    let amplitude = PI.powf(-0.25) * (-0.5 * t * t).exp();
    Complex64::new(0.0, params.omega0 * t).exp() * amplitude
}

/// Strictly increasing wavelet scales, in units of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleGrid {
    pub scales: Vec<f64>,
}

impl ScaleGrid {
    pub fn n_scales(&self) -> usize {
        self.scales.len()
    }

    fn validate(&self) -> Result<(), WaveletError> {
        if self.scales.is_empty() {
            return Err(WaveletError::BadGrid("no scales".into()));
        }
        for w in self.scales.windows(2) {
            if !(w[0] < w[1]) {
                return Err(WaveletError::BadGrid(
                    "scales must be strictly increasing".into(),
                ));
            }
        }
        if self.scales.iter().any(|&a| !(a.is_finite() && a > 0.0)) {
            return Err(WaveletError::BadGrid("scales must be positive".into()));
        }
        Ok(())
    }
}

/// Oscillation frequency associated with a scale (in samples) at the given
/// sample rate: f = omega0 * rate / (2*pi*a).
pub fn pseudo_frequency_hz(scale: f64, rate_hz: f64, params: &MorletParams) -> f64 {
    params.omega0 * rate_hz / (2.0 * PI * scale)
}

/// Builds a grid of `n_scales` logarithmically spaced pseudo-frequencies
/// from `f_max_hz` down to `f_min_hz`, converted to scales (so scales come
/// out increasing).
pub fn make_scale_grid(
    f_min_hz: f64,
    f_max_hz: f64,
    n_scales: usize,
    rate_hz: f64,
    params: &MorletParams,
) -> Result<ScaleGrid, WaveletError> {
    if !(f_min_hz > 0.0 && f_min_hz < f_max_hz && rate_hz > 0.0) {
        return Err(WaveletError::BadBand {
            f_min: f_min_hz,
            f_max: f_max_hz,
        });
    }
    if f_max_hz > rate_hz / 2.0 {
        return Err(WaveletError::NyquistExceeded {
            f_max: f_max_hz,
            nyquist: rate_hz / 2.0,
        });
    }
    if n_scales < 2 {
        return Err(WaveletError::TooFewScales {
            min: 2,
            got: n_scales,
        });
    }
    let log_ratio = (f_min_hz / f_max_hz).ln();
    let scales = (0..n_scales)
        .map(|k| {
            let f = f_max_hz * (log_ratio * k as f64 / (n_scales - 1) as f64).exp();
            params.omega0 * rate_hz / (2.0 * PI * f)
        })
        .collect();
    let grid = ScaleGrid { scales };
    grid.validate()?;
    Ok(grid)
}

/// Complex CWT coefficients, rows indexing scale and columns translation.
#[derive(Debug, Clone)]
pub struct Scalogram {
    /// Row-major [n_scales x n_times].
    pub coefficients: Vec<Complex64>,
    pub n_times: usize,
    pub scales: ScaleGrid,
    pub sample_rate_hz: f64,
}

impl Scalogram {
    pub fn n_scales(&self) -> usize {
        self.scales.n_scales()
    }

    pub fn row(&self, scale_idx: usize) -> &[Complex64] {
        &self.coefficients[scale_idx * self.n_times..(scale_idx + 1) * self.n_times]
    }

    /// Coefficient magnitudes, row-major [n_scales x n_times].
    pub fn magnitude(&self) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.norm()).collect()
    }

    /// Index of the scale whose mean row magnitude is largest.
    pub fn argmax_row_by_mean_magnitude(&self) -> usize {
        let mut best = 0;
        let mut best_mean = f64::NEG_INFINITY;
        for s in 0..self.n_scales() {
            let mean: f64 =
                self.row(s).iter().map(|c| c.norm()).sum::<f64>() / self.n_times as f64;
            if mean > best_mean {
                best_mean = mean;
                best = s;
            }
        }
        best
    }
}

fn validate_segment(samples: &[f32], grid: &ScaleGrid) -> Result<(), WaveletError> {
    if samples.len() < 8 {
        return Err(WaveletError::SegmentTooShort {
            len: samples.len(),
            min: 8,
        });
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(WaveletError::NonFiniteInput);
    }
    grid.validate()
}

/// Truncated kernel half-width for a scale, capped at the segment length.
fn support_half_width(scale: f64, len: usize) -> usize {
    ((SUPPORT_RADIUS * scale).ceil() as usize).min(len - 1)
}

/// A reusable FFT plan for segments of one fixed length: the padded-length
/// transforms plus the spectrum of every scale's conjugated kernel.
/// Immutable after construction; safe to share across worker threads.
pub struct CwtPlan {
    len: usize,
    padded_len: usize,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    kernel_spectra: Vec<Vec<Complex64>>,
    grid: ScaleGrid,
}

impl CwtPlan {
    pub fn new(len: usize, grid: &ScaleGrid, params: &MorletParams) -> Result<Self, WaveletError> {
        if len < 8 {
            return Err(WaveletError::SegmentTooShort { len, min: 8 });
        }
        grid.validate()?;
        let widest = support_half_width(*grid.scales.last().unwrap(), len);
        let padded_len = (len + widest + 1).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(padded_len);
        let ifft = planner.plan_fft_inverse(padded_len);

        let mut kernel_spectra = Vec::with_capacity(grid.n_scales());
        for &a in &grid.scales {
            let half = support_half_width(a, len);
            let norm = 1.0 / a.sqrt();
            let mut ring = vec![Complex64::new(0.0, 0.0); padded_len];
            // Kernel k[l] = conj(psi(l/a))/sqrt(a) placed so that the
            // circular convolution below computes sum_l k[l] * x[b+l]:
            // ring[(-l) mod M] = k[l].
            for l in -(half as isize)..=(half as isize) {
                let k = morlet_sample(l as f64 / a, params).conj() * norm;
                let idx = (padded_len as isize - l) as usize % padded_len;
                ring[idx] = k;
            }
            fft.process(&mut ring);
            kernel_spectra.push(ring);
        }
        Ok(CwtPlan {
            len,
            padded_len,
            fft,
            ifft,
            kernel_spectra,
            grid: grid.clone(),
        })
    }

    pub fn apply(&self, segment: &Segment) -> Result<Scalogram, WaveletError> {
        validate_segment(&segment.samples, &self.grid)?;
        if segment.samples.len() != self.len {
            return Err(WaveletError::LengthMismatch {
                expected: self.len,
                found: segment.samples.len(),
            });
        }
        let mut spectrum = vec![Complex64::new(0.0, 0.0); self.padded_len];
        for (dst, &src) in spectrum.iter_mut().zip(&segment.samples) {
            dst.re = src as f64;
        }
        self.fft.process(&mut spectrum);

        let inv_m = 1.0 / self.padded_len as f64;
        let mut coefficients = Vec::with_capacity(self.grid.n_scales() * self.len);
        let mut work = vec![Complex64::new(0.0, 0.0); self.padded_len];
        for kernel in &self.kernel_spectra {
            for ((w, &x), &k) in work.iter_mut().zip(&spectrum).zip(kernel) {
                *w = x * k;
            }
            self.ifft.process(&mut work);
            coefficients.extend(work[..self.len].iter().map(|c| c * inv_m));
        }
        debug_assert!(coefficients.iter().all(|c| c.re.is_finite() && c.im.is_finite()));
        Ok(Scalogram {
            coefficients,
            n_times: self.len,
            scales: self.grid.clone(),
            sample_rate_hz: segment.sample_rate_hz,
        })
    }
}

/// FFT-based CWT of a segment over a scale grid. One-shot convenience over
/// [`CwtPlan`]; batch callers should build the plan once per segment length.
pub fn cwt(
    segment: &Segment,
    grid: &ScaleGrid,
    params: &MorletParams,
) -> Result<Scalogram, WaveletError> {
    CwtPlan::new(segment.samples.len(), grid, params)?.apply(segment)
}

/// Direct double-sum CWT evaluation, O(n_scales * len^2). The reference
/// the FFT path is verified against; no truncation, no transforms.
pub fn cwt_direct(
    segment: &Segment,
    grid: &ScaleGrid,
    params: &MorletParams,
) -> Result<Scalogram, WaveletError> {
    validate_segment(&segment.samples, grid)?;
    let len = segment.samples.len();
    let mut coefficients = Vec::with_capacity(grid.n_scales() * len);
    for &a in &grid.scales {
        let norm = 1.0 / a.sqrt();
        for b in 0..len {
            let mut acc = Complex64::new(0.0, 0.0);
            for (t, &x) in segment.samples.iter().enumerate() {
                let arg = (t as f64 - b as f64) / a;
                acc += morlet_sample(arg, params).conj() * (x as f64);
            }
            coefficients.push(acc * norm);
        }
    }
    Ok(Scalogram {
        coefficients,
        n_times: len,
        scales: grid.clone(),
        sample_rate_hz: segment.sample_rate_hz,
    })
}

/// A normalized scalogram image; pixel values lie in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    /// Row-major [height x width].
    pub pixels: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub source_label: FaultClass,
}

/// Per-output-index source ranges with fractional edge weights; the
/// rectangles tile the source axis, so total mass is conserved.
fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let step = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * step;
            let hi = (i + 1) as f64 * step;
            let mut weights = Vec::new();
            let mut r = lo.floor() as usize;
            while (r as f64) < hi && r < src {
                let w = hi.min((r + 1) as f64) - lo.max(r as f64);
                if w > 0.0 {
                    weights.push((r, w));
                }
                r += 1;
            }
            weights
        })
        .collect()
}

/// Area-averaging resize: each output pixel is the mean of its source
/// rectangle, fractional edges weighted by overlap.
pub fn resize_area(
    src: &[f64],
    src_h: usize,
    src_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    assert_eq!(src.len(), src_h * src_w, "source dimensions mismatch");
    assert!(out_h >= 1 && out_w >= 1);
    let rows = axis_weights(src_h, out_h);
    let cols = axis_weights(src_w, out_w);
    let cell_area = (src_h as f64 / out_h as f64) * (src_w as f64 / out_w as f64);
    let mut out = Vec::with_capacity(out_h * out_w);
    for row_w in &rows {
        for col_w in &cols {
            let mut acc = 0.0;
            for &(r, wr) in row_w {
                let base = r * src_w;
                for &(c, wc) in col_w {
                    acc += wr * wc * src[base + c];
                }
            }
            out.push(acc / cell_area);
        }
    }
    out
}

/// Renders coefficient magnitudes as an out_h x out_w image: area-average
/// resize, then per-image min-max normalization to [0, 1]. A constant
/// magnitude field maps to all zeros.
pub fn scalogram_to_image(
    s: &Scalogram,
    label: FaultClass,
    out_h: usize,
    out_w: usize,
) -> Result<FeatureImage, WaveletError> {
    if s.coefficients.is_empty() || s.n_times == 0 {
        return Err(WaveletError::EmptyScalogram);
    }
    let magnitude = s.magnitude();
    let resized = resize_area(&magnitude, s.n_scales(), s.n_times, out_h, out_w);
    let min = resized.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = resized.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pixels = if max > min {
        let inv = 1.0 / (max - min);
        resized.iter().map(|&v| ((v - min) * inv) as f32).collect()
    } else {
        vec![0.0f32; out_h * out_w]
    };
    Ok(FeatureImage {
        pixels,
        height: out_h,
        width: out_w,
        source_label: label,
    })
}

/// Writes a feature image in the binary image format.
pub fn save_feature_image(img: &FeatureImage, path: &Path) -> Result<(), WaveletError> {
    let file = fs::File::create(path).map_err(|source| WaveletError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    let io_err = |source| WaveletError::Io {
        path: path.to_path_buf(),
        source,
    };
    w.write_all(RWIM_MAGIC).map_err(io_err)?;
    w.write_all(&RWIM_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(img.height as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(img.width as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(img.source_label.id() as u32).to_le_bytes())
        .map_err(io_err)?;
    for &p in &img.pixels {
        w.write_all(&p.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn load_feature_image(path: &Path) -> Result<FeatureImage, WaveletError> {
    let bytes = fs::read(path).map_err(|source| WaveletError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let malformed = |reason: &str| WaveletError::MalformedImage {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 20 {
        return Err(malformed("file shorter than the 20-byte header"));
    }
    if &bytes[0..4] != RWIM_MAGIC {
        return Err(malformed("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != RWIM_VERSION {
        return Err(malformed(&format!("unsupported version {version}")));
    }
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let class_id = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
    let source_label = FaultClass::new(class_id as usize)?;
    if height == 0 || width == 0 {
        return Err(malformed("zero image dimension"));
    }
    if bytes.len() != 20 + height * width * 4 {
        return Err(malformed("payload size does not match declared dimensions"));
    }
    let mut pixels = Vec::with_capacity(height * width);
    for chunk in bytes[20..].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !(0.0..=1.0).contains(&v) {
            return Err(malformed("pixel outside [0, 1]"));
        }
        pixels.push(v);
    }
    Ok(FeatureImage {
        pixels,
        height,
        width,
        source_label,
    })
}

/// 8-bit PGM (P5) export for eyeballing feature images. Lossy; never read
/// back by the pipeline.
pub fn write_pgm(img: &FeatureImage, path: &Path) -> Result<(), WaveletError> {
    let mut out = Vec::with_capacity(img.pixels.len() + 32);
    out.extend_from_slice(format!("P5\n{} {}\n255\n", img.width, img.height).as_bytes());
    out.extend(
        img.pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, out).map_err(|source| WaveletError::Io {
        path: path.to_path_buf(),
        source,
    })
}
