//! Deterministic synthetic vibration dataset: 17 labeled fault signatures
//! built from harmonic stacks, decaying impulse trains, and amplitude
//! modulation, with Gaussian noise on top. The whole dataset is a pure
//! function of [`SynthConfig`], so regeneration is byte-for-byte stable.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::seed;
use crate::signal::{
    save_recording, split_dataset, DatasetManifest, FaultClass, Recording, Segment, SignalError,
    NUM_CLASSES,
};

/// Bump when any entry of [`signature_table`] changes; stored datasets are
/// only comparable within one table version.
pub const SIGNATURE_TABLE_VERSION: u32 = 1;

const MIN_SEGMENT_LENGTH: usize = 256;

/// Gear-mesh line as a multiple of the shaft frequency; the carrier for the
/// harmonic and modulation families.
const MESH_MULTIPLE: f64 = 32.0;

/// Impulse repetition rates for TYPE1..TYPE8 are log-spaced over this band.
const IMPULSE_RATE_LO_HZ: f64 = 37.0;
const IMPULSE_RATE_HI_HZ: f64 = 157.0;

/// Ring-down resonances for TYPE1..TYPE8 are log-spaced over this band so
/// each class lights up a different scalogram row.
const RESONANCE_LO_HZ: f64 = 3000.0;
const RESONANCE_HI_HZ: f64 = 8000.0;

const RING_TAU_S: f64 = 1.6e-3;

/// Per-burst amplitude at the center repetition rate; classes are scaled
/// to equal ring power, so slower trains get individually taller bursts.
const IMPULSE_AMPLITUDE: f64 = 4.0;

/// Resonance slot for each impulse class, walked with stride 3 so classes
/// with neighboring repetition rates land on well-separated scalogram rows.
const RESONANCE_ORDER: [usize; 8] = [0, 3, 6, 1, 4, 7, 2, 5];

/// Shaft speed the impulse repetition rates were designed against.
const NOMINAL_SHAFT_HZ: f64 = 20.0;

/// Low-frequency defect tone riding at the repetition rate of each impulse
/// class; anchors the class geometrically in the scalogram.
const IMPULSE_MARKER_AMPLITUDE: f64 = 0.62;

/// Marker tone frequency as a multiple of the impulse repetition rate.
const MARKER_RATE_MULTIPLE: f64 = 1.5;

/// Residual gear-mesh hum mixed under the impulse classes; keeps an
/// in-band tonal anchor so their scalograms normalize consistently.
const IMPULSE_MESH_AMPLITUDE: f64 = 0.3;

const MOD_RATES_HZ: [f64; 4] = [24.0, 60.0, 180.0, 375.0];
const MOD_DEPTH: f64 = 0.9;

/// Upper bound on |sample| of any noise-free signature after RMS
/// normalization. The worst crest factor over the table (the slowest
/// impulse train) stays below 9; the headroom keeps this a stable
/// regression bound, not a tight fit.
const CREST_LIMIT: f64 = 10.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bad synth config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub sample_rate_hz: f64,
    pub segment_length: usize,
    pub samples_per_class: usize,
    /// Standard deviation of the additive white Gaussian noise.
    pub noise_sigma: f64,
    /// Shaft rotation frequency; every tonal component is a multiple of it.
    pub base_freq_hz: f64,
    pub master_seed: u64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sample_rate_hz: 64_000.0,
            segment_length: 6400,
            samples_per_class: 30,
            noise_sigma: 0.2,
            base_freq_hz: 20.0,
            master_seed: 7,
            val_fraction: 0.2,
            test_fraction: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::BadConfig(msg));
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return bad(format!("sample rate {} Hz", self.sample_rate_hz));
        }
        if !(self.base_freq_hz.is_finite() && self.base_freq_hz > 0.0) {
            return bad(format!("base frequency {} Hz", self.base_freq_hz));
        }
        if self.segment_length < MIN_SEGMENT_LENGTH {
            return bad(format!(
                "segment length {} below minimum {MIN_SEGMENT_LENGTH}",
                self.segment_length
            ));
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be at least 1".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise sigma {}", self.noise_sigma));
        }
        let v = self.val_fraction;
        let t = self.test_fraction;
        if !(v.is_finite() && t.is_finite() && v >= 0.0 && t >= 0.0 && v + t < 1.0) {
            return bad(format!("split fractions val={v} test={t}"));
        }
        let nyquist = self.sample_rate_hz / 2.0;
        for sig in signature_table() {
            if let Some(f) = sig.max_frequency_hz(self.base_freq_hz) {
                if f >= nyquist {
                    return bad(format!(
                        "{} component at {f:.1} Hz reaches Nyquist {nyquist:.1} Hz",
                        sig.class
                    ));
                }
            }
        }
        Ok(())
    }

    /// Largest |sample| the generator can emit under this config: the crest
    /// bound of the normalized clean signal plus an 8-sigma noise allowance.
    pub fn amplitude_bound(&self) -> f64 {
        CREST_LIMIT + 8.0 * self.noise_sigma
    }
}

/// Repeating exponentially decaying resonance bursts, the classic rolling
///-element defect signature.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseTrain {
    pub rate_hz: f64,
    pub decay_tau_s: f64,
    pub resonance_hz: f64,
    pub amplitude: f64,
}

/// Sinusoidal amplitude modulation applied to the harmonic stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Modulation {
    pub rate_hz: f64,
    pub depth: f64,
}

/// Recipe for one fault class: tonal components as (multiple of the base
/// frequency, amplitude), plus optional impulse and modulation parts.
#[derive(Debug, Clone, PartialEq)]
pub struct FaultSignature {
    pub class: FaultClass,
    pub harmonics: Vec<(f64, f64)>,
    pub impulse: Option<ImpulseTrain>,
    pub modulation: Option<Modulation>,
}

impl FaultSignature {
    /// Highest frequency this signature places energy at, or None for an
    /// empty recipe. Sidebands of a modulated carrier sit at carrier + rate.
    pub fn max_frequency_hz(&self, base_freq_hz: f64) -> Option<f64> {
        let mod_rate = self.modulation.as_ref().map_or(0.0, |m| m.rate_hz);
        let tonal = self
            .harmonics
            .iter()
            .map(|&(mult, _)| mult * base_freq_hz + mod_rate)
            .fold(None, |acc: Option<f64>, f| Some(acc.map_or(f, |a| a.max(f))));
        let ring = self.impulse.as_ref().map(|i| i.resonance_hz);
        match (tonal, ring) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (Some(a), None) => Some(a),
            (None, Some(b)) => Some(b),
            (None, None) => None,
        }
    }
}

fn log_spaced(lo: f64, hi: f64, i: usize, n: usize) -> f64 {
    lo * (hi / lo).powf(i as f64 / (n - 1) as f64)
}

/// The frozen 17-class recipe table, indexed by class id.
///
/// TYPE0 is the healthy baseline (bare shaft tone). TYPE1..TYPE8 are impulse
/// trains whose repetition rate and ring resonance both step up a log grid.
/// TYPE9..TYPE12 are gear-mesh harmonic patterns (2x, 3x, 0.5x, mixed).
/// TYPE13..TYPE16 modulate the mesh line at four rates. Change nothing here
/// without bumping [`SIGNATURE_TABLE_VERSION`].
pub fn signature_table() -> Vec<FaultSignature> {
    let class = |id: usize| FaultClass::new(id).expect("table ids stay in range");
    let mut table = Vec::with_capacity(NUM_CLASSES);

    // Healthy: the shaft tone plus a weaker 11th-order line (a slot or
    // blade-pass harmonic), and nothing else. No mesh line, no impulses,
    // no modulation. The 11th order sits in a quiet spectral zone: above
    // the defect-tone ladder of the impulse classes, below the mesh line.
    table.push(FaultSignature {
        class: class(0),
        harmonics: vec![(1.0, 1.0), (21.0, 0.95)],
        impulse: None,
        modulation: None,
    });

    for i in 0..8 {
        let rate_hz = log_spaced(IMPULSE_RATE_LO_HZ, IMPULSE_RATE_HI_HZ, i, 8);
        table.push(FaultSignature {
            class: class(1 + i),
            harmonics: vec![
                (MESH_MULTIPLE, IMPULSE_MESH_AMPLITUDE),
                // Defect tone at the repetition rate, expressed as a shaft
                // order so it rides the same base frequency as everything
                // else (the rates equal these orders at the nominal 20 Hz
                // shaft speed).
                (MARKER_RATE_MULTIPLE * rate_hz / NOMINAL_SHAFT_HZ, IMPULSE_MARKER_AMPLITUDE),
            ],
            impulse: Some(ImpulseTrain {
                rate_hz,
                // sqrt(center/rate) equalizes amp^2 * rate across classes.
                amplitude: IMPULSE_AMPLITUDE
                    * ((IMPULSE_RATE_LO_HZ * IMPULSE_RATE_HI_HZ).sqrt() / rate_hz).sqrt(),
                decay_tau_s: RING_TAU_S,
                resonance_hz: log_spaced(
                    RESONANCE_LO_HZ,
                    RESONANCE_HI_HZ,
                    RESONANCE_ORDER[i],
                    8,
                ),
            }),
            modulation: None,
        });
    }

    let mesh = MESH_MULTIPLE;
    let harmonic_sets: [Vec<(f64, f64)>; 4] = [
        vec![(mesh, 1.0), (2.0 * mesh, 0.9)],
        vec![(mesh, 1.0), (3.0 * mesh, 0.8)],
        vec![(mesh, 1.0), (0.5 * mesh, 0.85)],
        vec![
            (mesh, 1.0),
            (0.5 * mesh, 0.45),
            (2.0 * mesh, 0.68),
            (3.0 * mesh, 0.58),
        ],
    ];
    for (i, harmonics) in harmonic_sets.into_iter().enumerate() {
        table.push(FaultSignature {
            class: class(9 + i),
            harmonics,
            impulse: None,
            modulation: None,
        });
    }

    for (i, &rate_hz) in MOD_RATES_HZ.iter().enumerate() {
        // The two slowest-modulation classes beat on two-line carrier
        // stacks, the rest on the bare mesh line.
        let carrier = match i {
            0 => vec![(mesh, 1.0), (2.0 * mesh, 0.75)],
            1 => vec![(mesh, 1.0), (4.0 * mesh, 0.6)],
            _ => vec![(mesh, 1.0)],
        };
        table.push(FaultSignature {
            class: class(13 + i),
            harmonics: carrier,
            impulse: None,
            modulation: Some(Modulation {
                rate_hz,
                depth: MOD_DEPTH,
            }),
        });
    }

    table
}

/// Generates one labeled segment, a pure function of (config, class, index).
///
/// The per-sample generator is seeded from (master_seed, class id, index),
/// so adding classes or samples never perturbs existing ones. Harmonic
/// phases are drawn first (one per component, in table order), then the
/// noise stream. The clean signal is RMS-normalized to 1 before noise.
pub fn generate_sample(class: FaultClass, index: usize, cfg: &SynthConfig) -> Segment {
    let table = signature_table();
    let sig = &table[class.id()];
    let sample_seed = seed::derive(&[cfg.master_seed, class.id() as u64, index as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let phases: Vec<f64> = sig
        .harmonics
        .iter()
        .map(|_| rng.random_range(0.0..TAU))
        .collect();

    let n = cfg.segment_length;
    let dt = 1.0 / cfg.sample_rate_hz;
    let mut x = vec![0.0f64; n];
    for (i, v) in x.iter_mut().enumerate() {
        let t = i as f64 * dt;
        let mut tone = 0.0;
        for (&(mult, amp), &phase) in sig.harmonics.iter().zip(&phases) {
            tone += amp * (TAU * mult * cfg.base_freq_hz * t + phase).sin();
        }
        if let Some(m) = &sig.modulation {
            // Modulator phase is fixed so beat patterns line up across
            // samples of a class; depth < 1 keeps the envelope positive.
            tone *= 1.0 + m.depth * (TAU * m.rate_hz * t).sin();
        }
        *v = tone;
    }

    if let Some(imp) = &sig.impulse {
        let period = 1.0 / imp.rate_hz;
        // e^-8 of the peak is below 4e-4, well under the noise floor.
        let ring_len = (8.0 * imp.decay_tau_s * cfg.sample_rate_hz).ceil() as usize;
        let mut k = 0usize;
        loop {
            let onset = k as f64 * period;
            let start = (onset * cfg.sample_rate_hz).ceil() as usize;
            if start >= n {
                break;
            }
            for (i, v) in x.iter_mut().enumerate().skip(start).take(ring_len) {
                let rel = i as f64 * dt - onset;
                *v += imp.amplitude
                    * (-rel / imp.decay_tau_s).exp()
                    * (TAU * imp.resonance_hz * rel).sin();
            }
            k += 1;
        }
    }

    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        for v in &mut x {
            *v /= rms;
        }
    }

    if cfg.noise_sigma > 0.0 {
        for v in &mut x {
            let z: f64 = rng.sample(StandardNormal);
            *v += cfg.noise_sigma * z;
        }
    }

    Segment {
        samples: x.iter().map(|&v| v as f32).collect(),
        sample_rate_hz: cfg.sample_rate_hz,
        label: class,
        segment_index: index,
    }
}

/// Writes the full dataset under `out_dir`: one single-channel signal file
/// per sample at `signals/type{c}_{i:04}.rwsg`, plus a stratified
/// `manifest.csv`. Regeneration with the same config rewrites identical
/// bytes.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest, SynthError> {
    cfg.validate()?;
    let signals_dir = out_dir.join("signals");
    fs::create_dir_all(&signals_dir).map_err(|source| SignalError::Io {
        path: signals_dir.clone(),
        source,
    })?;

    let mut entries: Vec<(PathBuf, FaultClass)> =
        Vec::with_capacity(NUM_CLASSES * cfg.samples_per_class);
    for class in FaultClass::all() {
        for index in 0..cfg.samples_per_class {
            let seg = generate_sample(class, index, cfg);
            let rel = PathBuf::from(format!("signals/type{}_{index:04}.rwsg", class.id()));
            let rec = Recording::new(
                vec![seg.samples],
                cfg.sample_rate_hz,
                rel.display().to_string(),
            )?;
            save_recording(&rec, &out_dir.join(&rel))?;
            entries.push((rel, class));
        }
    }

    let manifest = split_dataset(&entries, cfg.val_fraction, cfg.test_fraction, cfg.master_seed)?;
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
