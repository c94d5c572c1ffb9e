//! Declarative run configuration.
//!
//! One plain-text file drives every command. The grammar is a flat list of
//! dotted assignments, bit-exact:
//!
//! ```text
//! line    = blank | comment | binding
//! comment = "#" anything
//! binding = section "." key " = " value
//! ```
//!
//! Whitespace around the line and around `=` is ignored; values are taken
//! verbatim after trimming, so they may contain spaces but not leading or
//! trailing ones. Inline comments are not supported. Every key must be one
//! the program knows, and a key may be bound at most once. `render` emits
//! the canonical form (every key, fixed order), and `parse(render(c)) == c`
//! holds exactly.

use railwave_core::synth::SynthConfig;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// Dataset is produced by `railwave generate` from the signature table.
    Synthetic,
    /// Dataset directory is user-supplied: recordings plus a manifest.csv.
    External,
}

impl DatasetKind {
    fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::External => "external",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Dataset root: recordings, manifest.csv, and the images/ cache.
    pub dir: PathBuf,
    pub samples_per_class: usize,
    pub segment_length: usize,
    pub sample_rate_hz: f64,
    pub noise_sigma: f64,
    pub base_freq_hz: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Channel count every recording must declare.
    pub channels: usize,
    /// Channel index extraction reads.
    pub channel: usize,
    /// Segments sliced from each recording at extraction time.
    pub n_parts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveletSection {
    pub omega0: f64,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub n_scales: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    /// Architecture name: tiny, resnet18, resnet34, or resnet50.
    pub spec: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier applied at 60% and 80% of the run.
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSection {
    /// Where checkpoints, history CSVs, and evaluation reports land.
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub wavelet: WaveletSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSection {
                kind: DatasetKind::Synthetic,
                dir: PathBuf::from("data"),
                samples_per_class: 30,
                segment_length: 6400,
                sample_rate_hz: 64_000.0,
                noise_sigma: 0.2,
                base_freq_hz: 20.0,
                seed: 7,
                val_fraction: 0.2,
                test_fraction: 0.2,
                channels: 1,
                channel: 0,
                n_parts: 1,
            },
            wavelet: WaveletSection {
                omega0: 6.0,
                f_min_hz: 50.0,
                f_max_hz: 28_800.0,
                n_scales: 64,
            },
            model: ModelSection {
                spec: "tiny".to_string(),
                seed: 1,
            },
            training: TrainingSection {
                epochs: 20,
                batch_size: 16,
                lr: 0.05,
                lr_decay: 0.2,
                momentum: 0.9,
                weight_decay: 1e-4,
                seed: 1,
            },
            output: OutputSection {
                dir: PathBuf::from("runs/default"),
            },
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `section.key = value`, got {text:?}")]
    BadLine { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("key {0:?} bound more than once")]
    DuplicateKey(String),
    #[error("key {key:?}: cannot parse {value:?} as {wanted}")]
    BadValue {
        key: String,
        value: String,
        wanted: &'static str,
    },
    #[error("{0}")]
    Invalid(String),
}

fn parse_num<T: std::str::FromStr>(
    key: &str,
    value: &str,
    wanted: &'static str,
) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        wanted,
    })
}

impl RunConfig {
    /// Binds one dotted key. Both the config file parser and `--set` go
    /// through here, so overrides obey the same grammar as the file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "dataset.kind" => {
                self.dataset.kind = match value {
                    "synthetic" => DatasetKind::Synthetic,
                    "external" => DatasetKind::External,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            value: value.to_string(),
                            wanted: "synthetic or external",
                        })
                    }
                }
            }
            "dataset.dir" => self.dataset.dir = PathBuf::from(value),
            "dataset.samples_per_class" => {
                self.dataset.samples_per_class = parse_num(key, value, "a positive integer")?
            }
            "dataset.segment_length" => {
                self.dataset.segment_length = parse_num(key, value, "a positive integer")?
            }
            "dataset.sample_rate_hz" => {
                self.dataset.sample_rate_hz = parse_num(key, value, "a number")?
            }
            "dataset.noise_sigma" => self.dataset.noise_sigma = parse_num(key, value, "a number")?,
            "dataset.base_freq_hz" => {
                self.dataset.base_freq_hz = parse_num(key, value, "a number")?
            }
            "dataset.seed" => self.dataset.seed = parse_num(key, value, "an unsigned integer")?,
            "dataset.val_fraction" => {
                self.dataset.val_fraction = parse_num(key, value, "a number")?
            }
            "dataset.test_fraction" => {
                self.dataset.test_fraction = parse_num(key, value, "a number")?
            }
            "dataset.channels" => self.dataset.channels = parse_num(key, value, "an integer")?,
            "dataset.channel" => self.dataset.channel = parse_num(key, value, "an integer")?,
            "dataset.n_parts" => self.dataset.n_parts = parse_num(key, value, "an integer")?,
            "wavelet.omega0" => self.wavelet.omega0 = parse_num(key, value, "a number")?,
            "wavelet.f_min_hz" => self.wavelet.f_min_hz = parse_num(key, value, "a number")?,
            "wavelet.f_max_hz" => self.wavelet.f_max_hz = parse_num(key, value, "a number")?,
            "wavelet.n_scales" => {
                self.wavelet.n_scales = parse_num(key, value, "a positive integer")?
            }
            "model.spec" => self.model.spec = value.to_string(),
            "model.seed" => self.model.seed = parse_num(key, value, "an unsigned integer")?,
            "training.epochs" => self.training.epochs = parse_num(key, value, "an integer")?,
            "training.batch_size" => {
                self.training.batch_size = parse_num(key, value, "a positive integer")?
            }
            "training.lr" => self.training.lr = parse_num(key, value, "a number")?,
            "training.lr_decay" => self.training.lr_decay = parse_num(key, value, "a number")?,
            "training.momentum" => self.training.momentum = parse_num(key, value, "a number")?,
            "training.weight_decay" => {
                self.training.weight_decay = parse_num(key, value, "a number")?
            }
            "training.seed" => self.training.seed = parse_num(key, value, "an unsigned integer")?,
            "output.dir" => self.output.dir = PathBuf::from(value),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parses the canonical grammar; starts from defaults, so a file only
    /// needs the keys it changes.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let key = key.trim();
            let value = value.trim();
            if !key.contains('.') {
                return Err(ConfigError::BadLine {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey(key.to_string()));
            }
            config.set(key, value)?;
        }
        Ok(config)
    }

    /// Emits every key in canonical order. The output parses back to an
    /// equal config.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let d = &self.dataset;
        writeln!(out, "dataset.kind = {}", d.kind.as_str()).unwrap();
        writeln!(out, "dataset.dir = {}", d.dir.display()).unwrap();
        writeln!(out, "dataset.samples_per_class = {}", d.samples_per_class).unwrap();
        writeln!(out, "dataset.segment_length = {}", d.segment_length).unwrap();
        writeln!(out, "dataset.sample_rate_hz = {}", d.sample_rate_hz).unwrap();
        writeln!(out, "dataset.noise_sigma = {}", d.noise_sigma).unwrap();
        writeln!(out, "dataset.base_freq_hz = {}", d.base_freq_hz).unwrap();
        writeln!(out, "dataset.seed = {}", d.seed).unwrap();
        writeln!(out, "dataset.val_fraction = {}", d.val_fraction).unwrap();
        writeln!(out, "dataset.test_fraction = {}", d.test_fraction).unwrap();
        writeln!(out, "dataset.channels = {}", d.channels).unwrap();
        writeln!(out, "dataset.channel = {}", d.channel).unwrap();
        writeln!(out, "dataset.n_parts = {}", d.n_parts).unwrap();
        let w = &self.wavelet;
        writeln!(out, "wavelet.omega0 = {}", w.omega0).unwrap();
        writeln!(out, "wavelet.f_min_hz = {}", w.f_min_hz).unwrap();
        writeln!(out, "wavelet.f_max_hz = {}", w.f_max_hz).unwrap();
        writeln!(out, "wavelet.n_scales = {}", w.n_scales).unwrap();
        writeln!(out, "model.spec = {}", self.model.spec).unwrap();
        writeln!(out, "model.seed = {}", self.model.seed).unwrap();
        let t = &self.training;
        writeln!(out, "training.epochs = {}", t.epochs).unwrap();
        writeln!(out, "training.batch_size = {}", t.batch_size).unwrap();
        writeln!(out, "training.lr = {}", t.lr).unwrap();
        writeln!(out, "training.lr_decay = {}", t.lr_decay).unwrap();
        writeln!(out, "training.momentum = {}", t.momentum).unwrap();
        writeln!(out, "training.weight_decay = {}", t.weight_decay).unwrap();
        writeln!(out, "training.seed = {}", t.seed).unwrap();
        writeln!(out, "output.dir = {}", self.output.dir.display()).unwrap();
        out
    }

    /// One flag to pin every RNG stream: dataset split and synthesis,
    /// weight initialization, and the training shuffle.
    pub fn override_seeds(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.model.seed = seed;
        self.training.seed = seed;
    }

    /// Cross-field checks shared by every command. Domain modules validate
    /// their own inputs again; this catches what would otherwise surface
    /// deep inside a run.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        railwave_core::resnet::ResNetSpec::by_name(&self.model.spec)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let d = &self.dataset;
        if d.dir.as_os_str().is_empty() {
            return bad("dataset.dir must not be empty".into());
        }
        if self.output.dir.as_os_str().is_empty() {
            return bad("output.dir must not be empty".into());
        }
        if d.channels < 1 {
            return bad(format!("dataset.channels = {} must be at least 1", d.channels));
        }
        if d.channel >= d.channels {
            return bad(format!(
                "dataset.channel = {} out of range for {} channels",
                d.channel, d.channels
            ));
        }
        if d.n_parts < 1 {
            return bad(format!("dataset.n_parts = {} must be at least 1", d.n_parts));
        }
        let w = &self.wavelet;
        if !(w.omega0.is_finite() && w.omega0 > 0.0) {
            return bad(format!("wavelet.omega0 = {} must be a positive number", w.omega0));
        }
        if !(w.f_min_hz.is_finite() && w.f_max_hz.is_finite() && 0.0 < w.f_min_hz) {
            return bad(format!(
                "wavelet band [{}, {}] must be positive and finite",
                w.f_min_hz, w.f_max_hz
            ));
        }
        if w.f_min_hz >= w.f_max_hz {
            return bad(format!(
                "wavelet.f_min_hz = {} must be below wavelet.f_max_hz = {}",
                w.f_min_hz, w.f_max_hz
            ));
        }
        if w.f_max_hz > d.sample_rate_hz / 2.0 {
            return bad(format!(
                "wavelet.f_max_hz = {} exceeds the Nyquist frequency {}",
                w.f_max_hz,
                d.sample_rate_hz / 2.0
            ));
        }
        if w.n_scales < 2 {
            return bad(format!("wavelet.n_scales = {} must be at least 2", w.n_scales));
        }
        let t = &self.training;
        if t.batch_size < 1 {
            return bad("training.batch_size must be at least 1".into());
        }
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            return bad(format!("training.lr = {} must be a non-negative number", t.lr));
        }
        if !(t.lr_decay.is_finite() && t.lr_decay > 0.0) {
            return bad(format!("training.lr_decay = {} must be a positive number", t.lr_decay));
        }
        if !(t.momentum.is_finite() && (0.0..1.0).contains(&t.momentum)) {
            return bad(format!("training.momentum = {} must be in [0, 1)", t.momentum));
        }
        if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            return bad(format!(
                "training.weight_decay = {} must be a non-negative number",
                t.weight_decay
            ));
        }
        if self.dataset.kind == DatasetKind::Synthetic {
            self.synth_config()
                .validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    /// The generator settings for the synthetic dataset.
    pub fn synth_config(&self) -> SynthConfig {
        let d = &self.dataset;
        SynthConfig {
            sample_rate_hz: d.sample_rate_hz,
            segment_length: d.segment_length,
            samples_per_class: d.samples_per_class,
            noise_sigma: d.noise_sigma,
            base_freq_hz: d.base_freq_hz,
            master_seed: d.seed,
            val_fraction: d.val_fraction,
            test_fraction: d.test_fraction,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_render_and_parse() {
        let config = RunConfig::default();
        let parsed = RunConfig::parse(&config.render()).unwrap();
        assert_eq!(parsed, config);
    }

    #[test]
    fn modified_config_round_trips_bit_exactly() {
        let mut config = RunConfig::default();
        config.set("training.lr", "0.015625").unwrap();
        config.set("training.weight_decay", "3e-7").unwrap();
        config.set("dataset.noise_sigma", "0.30000000000000004").unwrap();
        config.set("dataset.dir", "some/nested dir/x").unwrap();
        config.set("model.spec", "resnet34").unwrap();
        let parsed = RunConfig::parse(&config.render()).unwrap();
        assert_eq!(parsed, config);
        assert_eq!(parsed.render(), config.render());
    }

    #[test]
    fn comments_blanks_and_spacing_are_tolerated() {
        let text = "\n# a comment\n  training.epochs=3\nwavelet.omega0   =   5.5\n\n";
        let config = RunConfig::parse(text).unwrap();
        assert_eq!(config.training.epochs, 3);
        assert_eq!(config.wavelet.omega0, 5.5);
    }

    #[test]
    fn unknown_duplicate_and_malformed_keys_are_rejected() {
        assert!(matches!(
            RunConfig::parse("nope.nope = 1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            RunConfig::parse("model.seed = 1\nmodel.seed = 2"),
            Err(ConfigError::DuplicateKey(_))
        ));
        assert!(matches!(
            RunConfig::parse("just words"),
            Err(ConfigError::BadLine { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse("training.epochs = soon"),
            Err(ConfigError::BadValue { .. })
        ));
    }

    #[test]
    fn seed_flag_pins_all_three_seeds() {
        let mut config = RunConfig::default();
        config.override_seeds(99);
        assert_eq!(
            (config.dataset.seed, config.model.seed, config.training.seed),
            (99, 99, 99)
        );
    }

    #[test]
    fn validate_rejects_out_of_range_fields() {
        let cases = [
            ("model.spec", "resnet101"),
            ("dataset.channel", "1"),
            ("wavelet.f_max_hz", "40000"),
            ("wavelet.f_min_hz", "0"),
            ("training.momentum", "1"),
            ("dataset.segment_length", "64"),
        ];
        for (key, value) in cases {
            let mut config = RunConfig::default();
            config.set(key, value).unwrap();
            assert!(config.validate().is_err(), "{key}={value} passed validation");
        }
        assert!(RunConfig::default().validate().is_ok());
    }
}
