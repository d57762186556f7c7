//! Binary checkpoint format.
//!
//! ```text
//! "SEPTDACK"                      8 bytes
//! version                         u32
//! config text                     u32 length + UTF-8 `key = value` lines
//! parameter count                 u32
//! per parameter: name             u32 length + UTF-8
//!                shape            u32 rank + rank * u32
//!                values           f32 * numel
//! optimizer flag                  u8 (0 or 1)
//! if 1: step u64, lr/beta1/beta2/eps/weight_decay f64,
//!       then first and second moments per parameter, f32 * numel each
//! ```
//! Integers and floats are little-endian. Trailing bytes are rejected.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::septda::SepTda;
use crate::numerics::{AdamWConfig, OptimizerState, ParamStore, Real};

pub const MAGIC: &[u8; 8] = b"SEPTDACK";
pub const VERSION: u32 = 1;

/// A loaded model with its parameters and, if saved, the optimizer state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: SepTda,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_f32s<T: Real>(out: &mut Vec<u8>, values: &[T]) {
    for v in values {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
}

/// Serializes a model's parameters and optional optimizer state.
pub fn encode_checkpoint<T: Real>(
    config: &ModelConfig,
    params: &ParamStore<T>,
    optimizer: Option<&OptimizerState<T>>,
) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(params.num_scalars() * 4 + 4096);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &config.to_text())?;
    put_u32(&mut out, params.len())?;
    for (_, p) in params.iter() {
        put_str(&mut out, &p.name)?;
        put_u32(&mut out, p.value.shape().len())?;
        for &d in p.value.shape() {
            put_u32(&mut out, d)?;
        }
        put_f32s(&mut out, p.value.data());
    }
    match optimizer {
        None => out.push(0),
        Some(st) => {
            if st.first_moment.len() != params.len() || st.second_moment.len() != params.len() {
                return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
            }
            out.push(1);
            out.extend_from_slice(&st.step.to_le_bytes());
            let c = &st.config;
            for v in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for moments in [&st.first_moment, &st.second_moment] {
                for (m, (_, p)) in moments.iter().zip(params.iter()) {
                    if m.len() != p.value.numel() {
                        return Err(Error::Checkpoint(format!("optimizer moment size differs for `{}`", p.name)));
                    }
                    put_f32s(&mut out, m);
                }
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated file at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Parses a checkpoint and rebuilds the model it describes. Nothing is
/// returned unless the whole file validates.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let config = ModelConfig::parse(&r.string()?)?;
    let (model, mut params) = SepTda::new::<f32>(&config, 0)?;
    let count = r.u32()?;
    if count != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {count} parameters, the configured model has {}",
            params.len()
        )));
    }
    let mut seen = vec![false; params.len()];
    let mut order = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let id = params
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
        }
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if shape != params.value(id).shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {shape:?}, expected {:?}",
                params.value(id).shape()
            )));
        }
        let values = r.f32s(shape.iter().product())?;
        params.set_values(id, &values)?;
        order.push(id);
    }
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let config = AdamWConfig {
                lr: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
                weight_decay: r.f64()?,
            };
            let mut state = OptimizerState::new(&params, config)?;
            state.step = step;
            for moments in [&mut state.first_moment, &mut state.second_moment] {
                for &id in &order {
                    moments[id.index()] = r.f32s(params.value(id).numel())?;
                }
            }
            Some(state)
        }
        f => return Err(Error::Checkpoint(format!("invalid optimizer flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        model,
        params,
        optimizer,
    })
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    config: &ModelConfig,
    params: &ParamStore<T>,
    optimizer: Option<&OptimizerState<T>>,
) -> Result<()> {
    std::fs::write(path, encode_checkpoint(config, params, optimizer)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Loads a checkpoint and requires its config to equal `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() == Some(&MAGIC[..]) && r.u32().ok() == Some(VERSION as usize) {
        ModelConfig::parse(&r.string()?)?.ensure_matches(expected)?;
    }
    decode_checkpoint(&bytes)
}
