//! Binary tensor checkpoints.
//!
//! Layout: `b"FLXR"`, `u32` version, `u64` manifest length, the JSON
//! manifest, then every tensor as little-endian `f32` at the manifest's
//! byte offsets (relative to the payload start).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FlexModel;
use crate::nn::Parameters;
use crate::train::{AdamW, Phase, TrainConfig, TrainState};
use crate::train::optim::Moments;
use crate::workbench::dataset::write_atomic;

pub const MAGIC: [u8; 4] = *b"FLXR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    /// Fails unless every value is exactly representable as `f32`.
    pub fn from_f64(name: &str, shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        let mut out = Vec::with_capacity(data.len());
        for &v in data {
            let f = v as f32;
            if f as f64 != v && !(v.is_nan() && f.is_nan()) {
                return Err(Error::OutOfDomain(format!("{name} holds a value not representable as f32")));
            }
            out.push(f);
        }
        Ok(Self {
            name: name.to_string(),
            shape,
            data: out,
        })
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<Tensor>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::ShapeMismatch(format!("tensor {} shape does not match its data", t.name)));
            }
            let bytes = 4 * t.data.len() as u64;
            entries.push(TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: "f32".into(),
                offset,
                bytes,
            });
            offset += bytes;
        }
        let manifest = serde_json::to_vec(&Manifest {
            tensors: entries,
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + manifest.len() + offset as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 16 || bytes[..4] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let start = 16usize.checked_add(len).filter(|e| *e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..start])?;
        let payload = &bytes[start..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            if e.dtype != "f32" {
                return Err(bad(&format!("unsupported dtype {}", e.dtype)));
            }
            let n = e.shape.iter().product::<usize>();
            let (off, nb) = (e.offset as usize, e.bytes as usize);
            if nb != 4 * n || off.checked_add(nb).is_none_or(|end| end > payload.len()) {
                return Err(bad(&format!("tensor {} lies outside the payload", e.name)));
            }
            let data = payload[off..off + nb]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(Tensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Self {
            tensors,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    /// `u128` as a decimal string.
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainMeta {
    kind: String,
    phase: Phase,
    step: u64,
    optim_step: u64,
    rng: RngState,
    config: TrainConfig,
}

const TRAIN_KIND: &str = "train_state";

pub fn model_tensors(model: &impl Parameters, prefix: &str) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    let mut err = None;
    model.visit(&mut |p| match Tensor::from_f64(&format!("{prefix}{}", p.name), vec![p.rows, p.cols], &p.data) {
        Ok(t) => out.push(t),
        Err(e) => err = err.take().or(Some(e)),
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Overwrites every parameter of `model` from `prefix`-named tensors.
pub fn load_model_tensors(model: &mut impl Parameters, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
    let mut err = None;
    model.visit_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        match ckpt.tensor(&format!("{prefix}{}", p.name)) {
            Ok(t) if t.shape == [p.rows, p.cols] => p.data = t.to_f64(),
            Ok(_) => err = Some(Error::ShapeMismatch(format!("checkpoint shape differs for {}", p.name))),
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn train_state_checkpoint(state: &TrainState, cfg: &TrainConfig) -> Result<Checkpoint> {
    let mut tensors = model_tensors(&state.model, "model/")?;
    for m in &state.optim.moments {
        tensors.push(Tensor::from_f64(&format!("adam_m/{}", m.name), vec![m.m.len()], &m.m)?);
        tensors.push(Tensor::from_f64(&format!("adam_v/{}", m.name), vec![m.v.len()], &m.v)?);
    }
    let meta = TrainMeta {
        kind: TRAIN_KIND.into(),
        phase: state.phase,
        step: state.step,
        optim_step: state.optim.step,
        rng: RngState {
            seed: state.rng.get_seed().to_vec(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        config: cfg.clone(),
    };
    Ok(Checkpoint {
        tensors,
        meta: serde_json::to_value(meta)?,
    })
}

pub fn train_state_from_checkpoint(ckpt: &Checkpoint) -> Result<(TrainState, TrainConfig)> {
    let meta: TrainMeta = serde_json::from_value(ckpt.meta.clone())?;
    if meta.kind != TRAIN_KIND {
        return Err(Error::Format(format!("expected a {TRAIN_KIND} checkpoint, found {}", meta.kind)));
    }
    meta.config.validate()?;
    let mut model = FlexModel::new(meta.config.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    load_model_tensors(&mut model, ckpt, "model/")?;
    let mut moments = Vec::new();
    let mut err = None;
    model.visit(&mut |p| {
        let get = |k: &str| -> Result<Vec<f64>> {
            let t = ckpt.tensor(&format!("{k}/{}", p.name))?;
            if t.data.len() != p.len() {
                return Err(Error::ShapeMismatch(format!("optimizer state size differs for {}", p.name)));
            }
            Ok(t.to_f64())
        };
        match (get("adam_m"), get("adam_v")) {
            (Ok(m), Ok(v)) => moments.push(Moments {
                name: p.name.clone(),
                m,
                v,
            }),
            (Err(e), _) | (_, Err(e)) => err = err.take().or(Some(e)),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let seed: [u8; 32] = meta
        .rng
        .seed
        .as_slice()
        .try_into()
        .map_err(|_| Error::Format("rng seed must have 32 bytes".into()))?;
    let word_pos: u128 = meta
        .rng
        .word_pos
        .parse()
        .map_err(|_| Error::Format("rng word position is not an integer".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(meta.rng.stream);
    rng.set_word_pos(word_pos);
    let state = TrainState {
        model,
        optim: AdamW {
            step: meta.optim_step,
            moments,
        },
        step: meta.step,
        rng,
        phase: meta.phase,
    };
    Ok((state, meta.config))
}

pub fn save_train_state(path: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    train_state_checkpoint(state, cfg)?.save(path)
}

pub fn load_train_state(path: &Path) -> Result<(TrainState, TrainConfig)> {
    train_state_from_checkpoint(&Checkpoint::load(path)?)
}
