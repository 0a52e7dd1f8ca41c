//! Versioned checkpoint container: a text manifest (one tensor per line with
//! name, role, shape, byte offset and length, plus a config echo) followed by
//! little-endian payloads.
//!
//! ```text
//! MTNET-CKPT 1
//! dtype f32
//! kind joint
//! complete true
//! seed 7
//! step 1200
//! optimizer_steps 1200
//! config num_classes=10
//! meta batch_size=8
//! tensor param enc.fc1.w 128x1024 0 524288
//! end
//! <payload>
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{OptimizerSlot, ParameterStore, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &str = "MTNET-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    /// Audio autoencoder (phase 1).
    Audio,
    /// Encoder, head, mapper and generator (phase 2).
    Joint,
    /// Cached feature tables only.
    Features,
}

impl CheckpointKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Audio => "audio",
            Self::Joint => "joint",
            Self::Features => "features",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(Self::Audio),
            "joint" => Ok(Self::Joint),
            "features" => Ok(Self::Features),
            _ => Err(Error::Checkpoint(format!("unknown checkpoint kind `{s}`"))),
        }
    }
}

/// Element type a checkpoint file was written with, read from its header
/// without loading the payload.
pub fn stored_dtype(path: &Path) -> Result<String> {
    use std::io::{BufRead, BufReader};
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let mut line = || -> Result<String> {
        lines
            .next()
            .transpose()
            .map_err(|e| Error::io(path, e))?
            .ok_or_else(|| Error::Checkpoint(format!("{}: truncated header", path.display())))
    };
    let magic = line()?;
    if !magic.starts_with(CHECKPOINT_MAGIC) {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint", path.display())));
    }
    match line()?.strip_prefix("dtype ") {
        Some(d) => Ok(d.to_string()),
        None => Err(Error::Checkpoint(format!("{}: header lacks dtype", path.display()))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar = f32> {
    pub kind: CheckpointKind,
    /// False for periodic snapshots written mid-phase.
    pub complete: bool,
    pub seed: u64,
    /// Training steps taken in the phase this checkpoint belongs to.
    pub step: u64,
    pub config: ModelConfig,
    /// Free-form `key=value` echo, e.g. the training configuration.
    pub meta: IndexMap<String, String>,
    pub params: ParameterStore<T>,
    pub extras: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(kind: CheckpointKind, config: ModelConfig, params: ParameterStore<T>) -> Self {
        Self {
            kind,
            complete: false,
            seed: 0,
            step: 0,
            config,
            meta: IndexMap::new(),
            params,
            extras: IndexMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::new();
        let mut payload = Vec::new();
        head.push_str(&format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n"));
        head.push_str(&format!("dtype {}\n", T::DTYPE));
        head.push_str(&format!("kind {}\n", self.kind.as_str()));
        head.push_str(&format!("complete {}\n", self.complete));
        head.push_str(&format!("seed {}\n", self.seed));
        head.push_str(&format!("step {}\n", self.step));
        head.push_str(&format!("optimizer_steps {}\n", self.params.step_count()));
        for (k, v) in self.config.to_pairs() {
            head.push_str(&format!("config {k}={v}\n"));
        }
        for (k, v) in &self.meta {
            head.push_str(&format!("meta {k}={v}\n"));
        }
        let mut tensor = |role: &str, name: &str, shape: &[usize], data: &[T]| {
            let offset = payload.len();
            data.iter().for_each(|v| v.push_le(&mut payload));
            let dims = shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            head.push_str(&format!("tensor {role} {name} {dims} {offset} {}\n", payload.len() - offset));
        };
        for (name, e) in self.params.iter() {
            let role = if e.decay { "param" } else { "param-nodecay" };
            tensor(role, name, e.tensor.shape(), e.tensor.data());
            let slot = self.params.slot(name).expect("slot for every entry");
            tensor("ms", name, e.tensor.shape(), &slot.mean_square);
            tensor("mom", name, e.tensor.shape(), &slot.momentum);
        }
        for (name, t) in self.params.buffers() {
            tensor("buffer", name, t.shape(), t.data());
        }
        for (name, t) in &self.extras {
            tensor("extra", name, t.shape(), t.data());
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("manifest truncated before `end`".into()))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("manifest is not UTF-8".into()))
        };

        let first = next_line()?;
        let version = first
            .strip_prefix(CHECKPOINT_MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| bad("not an MT-Net checkpoint (bad magic)".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
            )));
        }

        let mut dtype = None;
        let mut kind = None;
        let (mut complete, mut seed, mut step, mut opt_steps) = (false, 0u64, 0u64, 0u64);
        let mut config_pairs = Vec::new();
        let mut meta = IndexMap::new();
        let mut tensors = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let (key, rest) = line.split_once(' ').ok_or_else(|| bad(format!("malformed manifest line `{line}`")))?;
            let num = |v: &str| v.parse::<u64>().map_err(|_| bad(format!("bad number in `{line}`")));
            match key {
                "dtype" => dtype = Some(rest.to_string()),
                "kind" => kind = Some(CheckpointKind::parse(rest)?),
                "complete" => complete = rest == "true",
                "seed" => seed = num(rest)?,
                "step" => step = num(rest)?,
                "optimizer_steps" => opt_steps = num(rest)?,
                "config" | "meta" => {
                    let (k, v) = rest.split_once('=').ok_or_else(|| bad(format!("malformed `{line}`")))?;
                    if key == "config" {
                        config_pairs.push((k.to_string(), v.to_string()));
                    } else {
                        meta.insert(k.to_string(), v.to_string());
                    }
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 5 {
                        return Err(bad(format!("malformed tensor line `{line}`")));
                    }
                    let shape = f[2]
                        .split('x')
                        .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad shape in `{line}`"))))
                        .collect::<Result<Vec<_>>>()?;
                    let (offset, len) = (num(f[3])? as usize, num(f[4])? as usize);
                    tensors.push((f[0].to_string(), f[1].to_string(), shape, offset, len));
                }
                _ => return Err(bad(format!("unknown manifest key `{key}`"))),
            }
        }
        let payload = &bytes[pos..];
        let dtype = dtype.ok_or_else(|| bad("manifest lacks dtype".into()))?;
        let width = match dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(bad(format!("unsupported dtype `{other}`"))),
        };
        let kind = kind.ok_or_else(|| bad("manifest lacks kind".into()))?;
        let config = ModelConfig::from_pairs(config_pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        let expected = tensors.iter().map(|t| t.3 + t.4).max().unwrap_or(0);
        if payload.len() < expected {
            return Err(bad(format!(
                "payload truncated: manifest needs {expected} bytes, file has {}",
                payload.len()
            )));
        }

        let read = |shape: &[usize], offset: usize, len: usize| -> Result<Vec<T>> {
            let n: usize = shape.iter().product();
            if n * width != len {
                return Err(bad(format!("tensor byte length {len} does not match shape {shape:?}")));
            }
            let raw = &payload[offset..offset + len];
            Ok(raw
                .chunks(width)
                .map(|c| {
                    if width == 4 {
                        T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    } else {
                        T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    }
                })
                .collect())
        };

        let mut params = ParameterStore::new();
        let mut slots: IndexMap<String, OptimizerSlot<T>> = IndexMap::new();
        let mut extras = IndexMap::new();
        for (role, name, shape, offset, len) in &tensors {
            let data = read(shape, *offset, *len)?;
            match role.as_str() {
                "param" | "param-nodecay" => {
                    params.insert(name, Tensor::new(shape.clone(), data)?, role == "param")?;
                }
                "ms" => slots.entry(name.clone()).or_insert_with(|| empty_slot()).mean_square = data,
                "mom" => slots.entry(name.clone()).or_insert_with(|| empty_slot()).momentum = data,
                "buffer" => params.insert_buffer(name, Tensor::new(shape.clone(), data)?)?,
                "extra" => {
                    extras.insert(name.clone(), Tensor::new(shape.clone(), data)?);
                }
                other => return Err(bad(format!("unknown tensor role `{other}`"))),
            }
        }
        for (name, slot) in slots {
            let n = params
                .get(&name)
                .map_err(|_| bad(format!("optimizer state for unknown parameter `{name}`")))?
                .numel();
            if slot.mean_square.len() != n || slot.momentum.len() != n {
                return Err(bad(format!("incomplete optimizer state for `{name}`")));
            }
            *params.slot_mut(&name).expect("slot exists") = slot;
        }
        params.set_step_count(opt_steps);
        Ok(Self {
            kind,
            complete,
            seed,
            step,
            config,
            meta,
            params,
            extras,
        })
    }

    /// Writes to a sibling temporary file and renames it into place, so a
    /// crash never leaves a half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn extra(&self, name: &str) -> Result<&Tensor<T>> {
        self.extras
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no `{name}` table")))
    }
}

fn empty_slot<T: Scalar>() -> OptimizerSlot<T> {
    OptimizerSlot {
        mean_square: Vec::new(),
        momentum: Vec::new(),
    }
}
