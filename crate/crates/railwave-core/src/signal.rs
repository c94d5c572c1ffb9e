//! Raw vibration recordings: loading, validation, segmentation, and
//! train/validation/test manifests.
//!
//! A [`Recording`] holds one multi-channel capture. [`segment_recording`]
//! slices a single channel into equal contiguous parts, the unit consumed by
//! the feature extractor. [`split_dataset`] assigns stratified split tags,
//! and [`DatasetManifest`] round-trips the result through a small CSV.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::seed;

/// Number of fault classes in the classification task.
pub const NUM_CLASSES: usize = 17;

const RWSG_MAGIC: &[u8; 4] = b"RWSG";
const RWSG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("channel count mismatch in {path}: expected {expected}, found {found}")]
    ChannelCountMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("sample rate mismatch in {path}: expected {expected} Hz, found {found} Hz")]
    SampleRateMismatch {
        path: PathBuf,
        expected: f64,
        found: f64,
    },
    #[error("non-finite sample at channel {channel}, index {index}")]
    NonFiniteSample { channel: usize, index: usize },
    #[error("bad part count {n_parts} for recording of length {length}")]
    BadPartCount { n_parts: usize, length: usize },
    #[error("bad channel {channel}: recording has {channel_count} channels")]
    BadChannel {
        channel: usize,
        channel_count: usize,
    },
    #[error("class {0} has no entries")]
    EmptyClass(FaultClass),
    #[error("bad split fractions val={val} test={test}: both must be >= 0 and sum < 1")]
    BadFraction { val: f64, test: f64 },
    #[error("duplicate path in manifest: {0}")]
    DuplicatePath(PathBuf),
    #[error("fault class id {0} out of range (0..{NUM_CLASSES})")]
    BadClassId(u32),
    #[error("unrecognized fault class name {0:?}")]
    BadClassName(String),
    #[error("unrecognized split tag {0:?}")]
    BadSplitTag(String),
    #[error("malformed manifest {path} line {line}: {reason}")]
    MalformedManifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("invalid recording: {0}")]
    InvalidRecording(String),
}

/// One of the 17 fault classes, `TYPE0` (healthy) through `TYPE16`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FaultClass(u8);

impl FaultClass {
    pub fn new(id: usize) -> Result<Self, SignalError> {
        if id < NUM_CLASSES {
            Ok(FaultClass(id as u8))
        } else {
            Err(SignalError::BadClassId(id as u32))
        }
    }

    pub fn id(self) -> usize {
        self.0 as usize
    }

    /// All classes in ascending id order.
    pub fn all() -> impl Iterator<Item = FaultClass> {
        (0..NUM_CLASSES as u8).map(FaultClass)
    }
}

impl fmt::Display for FaultClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TYPE{}", self.0)
    }
}

impl FromStr for FaultClass {
    type Err = SignalError;

    /// Accepts both the `TYPE7` name form and a bare id like `7`.
    fn from_str(s: &str) -> Result<Self, SignalError> {
        let digits = s.strip_prefix("TYPE").unwrap_or(s);
        let id: u32 = digits
            .parse()
            .map_err(|_| SignalError::BadClassName(s.to_string()))?;
        FaultClass::new(id as usize)
    }
}

/// A multi-channel vibration capture at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    /// Per-channel sample rows, all the same length.
    pub samples: Vec<Vec<f32>>,
    pub sample_rate_hz: f64,
    pub source_id: String,
}

impl Recording {
    pub fn new(
        samples: Vec<Vec<f32>>,
        sample_rate_hz: f64,
        source_id: String,
    ) -> Result<Self, SignalError> {
        if samples.is_empty() {
            return Err(SignalError::InvalidRecording("no channels".into()));
        }
        let length = samples[0].len();
        if length == 0 {
            return Err(SignalError::InvalidRecording("empty channels".into()));
        }
        if samples.iter().any(|ch| ch.len() != length) {
            return Err(SignalError::InvalidRecording(
                "channels differ in length".into(),
            ));
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(SignalError::InvalidRecording(format!(
                "bad sample rate {sample_rate_hz}"
            )));
        }
        for (c, ch) in samples.iter().enumerate() {
            if let Some(i) = ch.iter().position(|v| !v.is_finite()) {
                return Err(SignalError::NonFiniteSample {
                    channel: c,
                    index: i,
                });
            }
        }
        Ok(Recording {
            samples,
            sample_rate_hz,
            source_id,
        })
    }

    pub fn channel_count(&self) -> usize {
        self.samples.len()
    }

    pub fn length(&self) -> usize {
        self.samples[0].len()
    }
}

/// A contiguous labeled slice of one channel; the unit fed to the wavelet
/// transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub samples: Vec<f32>,
    pub sample_rate_hz: f64,
    pub label: FaultClass,
    /// Position of this slice within its source recording.
    pub segment_index: usize,
}

/// Split assignment of a dataset entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = SignalError;

    fn from_str(s: &str) -> Result<Self, SignalError> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(SignalError::BadSplitTag(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path relative to the manifest's own directory.
    pub path: PathBuf,
    pub class: FaultClass,
    pub split: Split,
}

/// The dataset index: every entry with its class and split tag, plus the
/// seed the split was drawn from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
}

impl DatasetManifest {
    /// Entries restricted to one split, in manifest order.
    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Writes the manifest CSV: a `# seed=N` comment, a header line, then
    /// one `path,class_id,split` row per entry. Paths must not contain
    /// commas; the generated layouts never do.
    pub fn save(&self, path: &Path) -> Result<(), SignalError> {
        let file = fs::File::create(path).map_err(|source| SignalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut w = BufWriter::new(file);
        let io_err = |source| SignalError::Io {
            path: path.to_path_buf(),
            source,
        };
        writeln!(w, "# seed={}", self.seed).map_err(io_err)?;
        writeln!(w, "path,class_id,split").map_err(io_err)?;
        for e in &self.entries {
            writeln!(
                w,
                "{},{},{}",
                e.path.display(),
                e.class.id(),
                e.split.as_str()
            )
            .map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, SignalError> {
        let file = fs::File::open(path).map_err(|source| match source.kind() {
            std::io::ErrorKind::NotFound => SignalError::MissingFile(path.to_path_buf()),
            _ => SignalError::Io {
                path: path.to_path_buf(),
                source,
            },
        })?;
        let mut entries = Vec::new();
        let mut seed = 0u64;
        let mut seen = std::collections::HashSet::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| SignalError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("seed=") {
                    seed = v.trim().parse().unwrap_or(0);
                }
                continue;
            }
            if line == "path,class_id,split" {
                continue;
            }
            let mut fields = line.split(',');
            let malformed = |reason: &str| SignalError::MalformedManifest {
                path: path.to_path_buf(),
                line: lineno + 1,
                reason: reason.to_string(),
            };
            let p = fields.next().ok_or_else(|| malformed("missing path"))?;
            let class: FaultClass = fields
                .next()
                .ok_or_else(|| malformed("missing class id"))?
                .trim()
                .parse()?;
            let split: Split = fields
                .next()
                .ok_or_else(|| malformed("missing split tag"))?
                .trim()
                .parse()?;
            if fields.next().is_some() {
                return Err(malformed("too many fields"));
            }
            let p = PathBuf::from(p);
            if !seen.insert(p.clone()) {
                return Err(SignalError::DuplicatePath(p));
            }
            entries.push(ManifestEntry {
                path: p,
                class,
                split,
            });
        }
        Ok(DatasetManifest { entries, seed })
    }
}

fn io_error(path: &Path, source: std::io::Error) -> SignalError {
    match source.kind() {
        std::io::ErrorKind::NotFound => SignalError::MissingFile(path.to_path_buf()),
        _ => SignalError::Io {
            path: path.to_path_buf(),
            source,
        },
    }
}

/// Loads a recording, dispatching on extension: `.csv` for the text import
/// path, the binary signal format otherwise. The declared channel count and
/// sample rate must match the caller's expectation exactly.
pub fn load_recording(
    path: &Path,
    expected_channels: usize,
    expected_rate_hz: f64,
) -> Result<Recording, SignalError> {
    let is_csv = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("csv"))
        .unwrap_or(false);
    if is_csv {
        load_recording_csv(path, expected_channels, expected_rate_hz)
    } else {
        load_recording_binary(path, expected_channels, expected_rate_hz)
    }
}

fn load_recording_binary(
    path: &Path,
    expected_channels: usize,
    expected_rate_hz: f64,
) -> Result<Recording, SignalError> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    let header = |reason: &str| SignalError::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 32 {
        return Err(header("file shorter than the 32-byte header"));
    }
    if &bytes[0..4] != RWSG_MAGIC {
        return Err(header("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != RWSG_VERSION {
        return Err(header(&format!("unsupported version {version}")));
    }
    let channel_count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let sample_rate_hz = f64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let length = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    if bytes[28..32] != [0, 0, 0, 0] {
        return Err(header("reserved bytes not zero"));
    }
    if channel_count == 0 || length == 0 {
        return Err(header("zero channel count or length"));
    }
    if channel_count != expected_channels {
        return Err(SignalError::ChannelCountMismatch {
            path: path.to_path_buf(),
            expected: expected_channels,
            found: channel_count,
        });
    }
    if sample_rate_hz != expected_rate_hz {
        return Err(SignalError::SampleRateMismatch {
            path: path.to_path_buf(),
            expected: expected_rate_hz,
            found: sample_rate_hz,
        });
    }
    let expected_len = 32 + channel_count * length * 4;
    if bytes.len() != expected_len {
        return Err(header(&format!(
            "payload size {} does not match declared {} channels x {} samples",
            bytes.len() - 32,
            channel_count,
            length
        )));
    }
    let mut samples = Vec::with_capacity(channel_count);
    let mut offset = 32;
    for c in 0..channel_count {
        let mut channel = Vec::with_capacity(length);
        for i in 0..length {
            let v = f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(SignalError::NonFiniteSample {
                    channel: c,
                    index: i,
                });
            }
            channel.push(v);
            offset += 4;
        }
        samples.push(channel);
    }
    Recording::new(samples, sample_rate_hz, path.display().to_string())
}

fn load_recording_csv(
    path: &Path,
    expected_channels: usize,
    expected_rate_hz: f64,
) -> Result<Recording, SignalError> {
    let file = fs::File::open(path).map_err(|e| io_error(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header_err = |reason: String| SignalError::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    let header = lines
        .next()
        .ok_or_else(|| header_err("empty file".into()))?
        .map_err(|source| SignalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let names: Vec<&str> = header.trim().split(',').collect();
    for (i, name) in names.iter().enumerate() {
        if name.trim() != format!("ch{i}") {
            return Err(header_err(format!(
                "expected column header ch{i}, found {name:?}"
            )));
        }
    }
    let channel_count = names.len();
    if channel_count != expected_channels {
        return Err(SignalError::ChannelCountMismatch {
            path: path.to_path_buf(),
            expected: expected_channels,
            found: channel_count,
        });
    }
    let mut samples: Vec<Vec<f32>> = vec![Vec::new(); channel_count];
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|source| SignalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != channel_count {
            return Err(SignalError::MalformedManifest {
                path: path.to_path_buf(),
                line: lineno + 2,
                reason: format!(
                    "expected {channel_count} columns, found {}",
                    fields.len()
                ),
            });
        }
        for (c, field) in fields.iter().enumerate() {
            let v: f32 = field.trim().parse().map_err(|_| {
                SignalError::MalformedManifest {
                    path: path.to_path_buf(),
                    line: lineno + 2,
                    reason: format!("bad float {field:?}"),
                }
            })?;
            if !v.is_finite() {
                return Err(SignalError::NonFiniteSample {
                    channel: c,
                    index: samples[c].len(),
                });
            }
            samples[c].push(v);
        }
    }
    Recording::new(samples, expected_rate_hz, path.display().to_string())
}

/// Writes a recording in the binary signal format.
pub fn save_recording(rec: &Recording, path: &Path) -> Result<(), SignalError> {
    let file = fs::File::create(path).map_err(|source| SignalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    let io_err = |source| SignalError::Io {
        path: path.to_path_buf(),
        source,
    };
    w.write_all(RWSG_MAGIC).map_err(io_err)?;
    w.write_all(&RWSG_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(rec.channel_count() as u32).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&rec.sample_rate_hz.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(rec.length() as u64).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&[0u8; 4]).map_err(io_err)?;
    for channel in &rec.samples {
        for &v in channel {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Slices one channel into `n_parts` equal contiguous segments in temporal
/// order, dropping the remainder after `floor(length / n_parts) * n_parts`
/// samples. Every produced segment carries `label`.
pub fn segment_recording(
    rec: &Recording,
    channel: usize,
    label: FaultClass,
    n_parts: usize,
) -> Result<Vec<Segment>, SignalError> {
    let length = rec.length();
    if n_parts < 1 || n_parts > length {
        return Err(SignalError::BadPartCount { n_parts, length });
    }
    if channel >= rec.channel_count() {
        return Err(SignalError::BadChannel {
            channel,
            channel_count: rec.channel_count(),
        });
    }
    let seg_len = length / n_parts;
    let data = &rec.samples[channel];
    Ok((0..n_parts)
        .map(|i| Segment {
            samples: data[i * seg_len..(i + 1) * seg_len].to_vec(),
            sample_rate_hz: rec.sample_rate_hz,
            label,
            segment_index: i,
        })
        .collect())
}

/// Assigns split tags stratified per class: each class's entries are
/// shuffled with a generator seeded from (`seed`, class id) and cut at
/// `floor(test_fraction * n)` test, then `floor(val_fraction * n)` val,
/// remainder train. Every class must be represented. Entry order in the
/// returned manifest matches the input order.
pub fn split_dataset(
    all_entries: &[(PathBuf, FaultClass)],
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest, SignalError> {
    if !(val_fraction >= 0.0 && test_fraction >= 0.0 && val_fraction + test_fraction < 1.0) {
        return Err(SignalError::BadFraction {
            val: val_fraction,
            test: test_fraction,
        });
    }
    let mut seen = std::collections::HashSet::new();
    for (path, _) in all_entries {
        if !seen.insert(path.clone()) {
            return Err(SignalError::DuplicatePath(path.clone()));
        }
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, (_, class)) in all_entries.iter().enumerate() {
        by_class[class.id()].push(i);
    }
    if let Some(empty) = (0..NUM_CLASSES).find(|&c| by_class[c].is_empty()) {
        return Err(SignalError::EmptyClass(FaultClass(empty as u8)));
    }

    let mut tags: Vec<Option<Split>> = vec![None; all_entries.len()];
    for (class_id, indices) in by_class.iter().enumerate() {
        let mut shuffled = indices.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(&[seed, class_id as u64]));
        shuffled.shuffle(&mut rng);
        let n = shuffled.len();
        // The 1e-9 nudge keeps float dust in products like 0.2 * 30 from
        // flipping an exact boundary downward.
        let n_test = ((test_fraction * n as f64) + 1e-9).floor() as usize;
        let n_val = ((val_fraction * n as f64) + 1e-9).floor() as usize;
        for (pos, &entry_idx) in shuffled.iter().enumerate() {
            let split = if pos < n_test {
                Split::Test
            } else if pos < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            };
            tags[entry_idx] = Some(split);
        }
    }

    let entries = all_entries
        .iter()
        .zip(&tags)
        .map(|((path, class), tag)| ManifestEntry {
            path: path.clone(),
            class: *class,
            split: tag.expect("every entry belongs to a class"),
        })
        .collect();
    Ok(DatasetManifest { entries, seed })
}
