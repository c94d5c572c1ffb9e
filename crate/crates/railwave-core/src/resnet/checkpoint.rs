use super::model::{build_model, Model, ParamKind};
use super::spec::ResNetSpec;
use super::train::SgdBuffers;
use super::ResNetError;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"RWCK";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
/// Velocity blobs ride along under this prefix so optimizer state resumes
/// with the model.
const OPTIM_PREFIX: &str = "optim.v.";

/// Training progress stored beside the weights: the epoch counter and the
/// master seed the run was started with, which together determine the RNG
/// stream of every later epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainerState {
    pub epoch: u32,
    pub seed: u64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ResNetError + '_ {
    move |source| ResNetError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ResNetError> {
        if self.at + n > self.bytes.len() {
            return Err(ResNetError::CorruptBlob(format!(
                "unexpected end of file at byte {}",
                self.at
            )));
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, ResNetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, ResNetError> {
        Ok(self.take(1)?[0])
    }

    fn string(&mut self) -> Result<String, ResNetError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|e| ResNetError::CorruptBlob(format!("non-UTF-8 string: {e}")))
    }
}

fn collect_blobs(model: &mut Model, optim: &SgdBuffers) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut blobs = Vec::new();
    let mut trainables = Vec::new();
    model.for_each_param(&mut |name, kind, t| {
        let data: Vec<f32> = t.data.iter().map(|&v| v as f32).collect();
        blobs.push((name.to_string(), t.shape.clone(), data));
        if kind == ParamKind::Trainable {
            trainables.push((name.to_string(), t.data.len()));
        }
    });
    for (name, len) in trainables {
        let velocity = match optim.velocities.get(&name) {
            Some(v) => v.iter().map(|&x| x as f32).collect(),
            None => vec![0.0f32; len],
        };
        blobs.push((format!("{OPTIM_PREFIX}{name}"), vec![velocity.len()], velocity));
    }
    blobs
}

pub fn save_checkpoint(
    model: &mut Model,
    optim: &SgdBuffers,
    state: &TrainerState,
    path: &Path,
) -> Result<(), ResNetError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let text = format!(
        "{}epoch={}\nseed={}\n",
        model.spec.canonical_text(),
        state.epoch,
        state.seed
    );
    push_str(&mut buf, &text);

    let blobs = collect_blobs(model, optim);
    buf.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for (name, shape, data) in &blobs {
        push_str(&mut buf, name);
        buf.push(DTYPE_F32);
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let mut raw = Vec::with_capacity(data.len() * 4);
        for &v in data {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&raw);
        buf.extend_from_slice(&raw);
        buf.extend_from_slice(&crc.to_le_bytes());
    }
    let file_crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&file_crc.to_le_bytes());
    fs::write(path, buf).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, SgdBuffers, TrainerState), ResNetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 4 {
        return Err(ResNetError::CorruptBlob("file shorter than its checksum".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(ResNetError::CorruptBlob(
            "file checksum mismatch (truncated or corrupted)".into(),
        ));
    }

    let mut r = Reader { bytes: body, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(ResNetError::CorruptBlob("bad magic, not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ResNetError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let text = r.string()?;
    let mut spec_lines = String::new();
    let mut epoch = None;
    let mut seed = None;
    for line in text.lines() {
        if let Some(v) = line.strip_prefix("epoch=") {
            epoch = v.parse::<u32>().ok();
        } else if let Some(v) = line.strip_prefix("seed=") {
            seed = v.parse::<u64>().ok();
        } else {
            spec_lines.push_str(line);
            spec_lines.push('\n');
        }
    }
    let spec = ResNetSpec::parse(&spec_lines)?;
    let state = TrainerState {
        epoch: epoch
            .ok_or_else(|| ResNetError::CorruptBlob("missing or bad epoch counter".into()))?,
        seed: seed.ok_or_else(|| ResNetError::CorruptBlob("missing or bad seed".into()))?,
    };

    let n_blobs = r.u32()? as usize;
    let mut blobs: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    for _ in 0..n_blobs {
        let name = r.string()?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(ResNetError::CorruptBlob(format!(
                "unknown dtype tag {dtype} on {name}"
            )));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count * 4)?;
        let crc = r.u32()?;
        if crc32fast::hash(raw) != crc {
            return Err(ResNetError::CorruptBlob(format!("checksum mismatch on {name}")));
        }
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if blobs.insert(name.clone(), (shape, data)).is_some() {
            return Err(ResNetError::CorruptBlob(format!("duplicate blob {name}")));
        }
    }
    if r.at != body.len() {
        return Err(ResNetError::CorruptBlob("trailing bytes after last blob".into()));
    }

    // Rebuild the structure from the stored spec, then overwrite every
    // tensor by name. No silent reshapes: absent names and shape drift
    // are hard errors.
    let mut model = build_model(&spec, 0)?;
    let mut load_err = None;
    let mut used = 0usize;
    model.for_each_param(&mut |name, kind, t| {
        if load_err.is_some() {
            return;
        }
        match blobs.get(name) {
            None => load_err = Some(ResNetError::MissingParam(name.to_string())),
            Some((shape, data)) => {
                if *shape != t.shape {
                    load_err = Some(ResNetError::CorruptBlob(format!(
                        "shape {shape:?} stored for {name}, model expects {:?}",
                        t.shape
                    )));
                } else {
                    t.data.copy_from_slice(data);
                    t.grad = None;
                    used += 1;
                }
            }
        }
        if kind == ParamKind::Trainable && !blobs.contains_key(&format!("{OPTIM_PREFIX}{name}")) {
            load_err = Some(ResNetError::MissingParam(format!("{OPTIM_PREFIX}{name}")));
        }
    });
    if let Some(e) = load_err {
        return Err(e);
    }
    let mut optim = SgdBuffers::default();
    for (name, (_, data)) in &blobs {
        if let Some(param) = name.strip_prefix(OPTIM_PREFIX) {
            optim.velocities.insert(param.to_string(), data.clone());
            used += 1;
        }
    }
    if used != blobs.len() {
        return Err(ResNetError::CorruptBlob(format!(
            "{} blob(s) do not belong to this architecture",
            blobs.len() - used
        )));
    }
    Ok((model, optim, state))
}
