//! Single-file checkpoints.
//!
//! Layout: `PSEGCKPT`, u32 format version, u64 header length, JSON header,
//! raw little-endian tensor payload, SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::optim::{OptimConfig, Optimizer};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PlaneSegModel};

const MAGIC: &[u8; 8] = b"PSEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    /// Bytes per element: 4 (f32) or 8 (f64).
    width: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimHeader {
    cfg: OptimConfig,
    t: u64,
    /// Parameter name to slot tensor names.
    slots: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    progress: Progress,
    rng: Option<ChaCha8Rng>,
    params: Vec<TensorEntry>,
    optimizer: Option<OptimHeader>,
    extra: Vec<TensorEntry>,
}

/// Where a training run stands.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub step: u64,
    pub total_steps: u64,
    pub epoch: usize,
}

pub struct Checkpoint {
    pub model: PlaneSegModel,
    pub optimizer: Option<Optimizer>,
    pub train: Option<TrainConfig>,
    pub progress: Progress,
    pub rng: Option<ChaCha8Rng>,
}

fn push_tensor(payload: &mut Vec<u8>, name: String, t: &Tensor) -> Result<TensorEntry> {
    let offset = payload.len() as u64;
    let flat = t.flatten_all()?;
    let width = match t.dtype() {
        DType::F64 => {
            for v in flat.to_vec1::<f64>()? {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            8
        }
        _ => {
            for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            4
        }
    };
    Ok(TensorEntry {
        name,
        shape: t.dims().to_vec(),
        offset,
        width,
    })
}

fn read_tensor(payload: &[u8], e: &TensorEntry, dtype: DType) -> Result<Tensor> {
    let n: usize = e.shape.iter().product();
    let start = e.offset as usize;
    let end = start + n * e.width as usize;
    let bytes = payload
        .get(start..end)
        .ok_or_else(|| Error::Format(format!("tensor `{}` runs past the payload", e.name)))?;
    let dev = &candle_core::Device::Cpu;
    let t = match e.width {
        8 => {
            let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, e.shape.as_slice(), dev)?
        }
        4 => {
            let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, e.shape.as_slice(), dev)?
        }
        w => return Err(Error::Format(format!("tensor `{}` has element width {w}", e.name))),
    };
    Ok(t.to_dtype(dtype)?)
}

/// Writes atomically: the file appears under `path` only once complete.
pub fn save_checkpoint(
    path: &Path,
    model: &PlaneSegModel,
    optimizer: Option<&Optimizer>,
    train: Option<&TrainConfig>,
    progress: Progress,
    rng: Option<&ChaCha8Rng>,
) -> Result<()> {
    let mut payload = Vec::new();
    let mut params = Vec::new();
    for (name, var) in model.store.vars() {
        params.push(push_tensor(&mut payload, name.clone(), var.as_tensor())?);
    }
    let mut extra = Vec::new();
    let optimizer = match optimizer {
        Some(o) => {
            let mut slots = BTreeMap::new();
            for (name, ts) in &o.slots {
                let mut names = Vec::new();
                for (i, t) in ts.iter().enumerate() {
                    let key = format!("optim.{i}.{name}");
                    extra.push(push_tensor(&mut payload, key.clone(), t)?);
                    names.push(key);
                }
                slots.insert(name.clone(), names);
            }
            Some(OptimHeader {
                cfg: o.cfg.clone(),
                t: o.t,
                slots,
            })
        }
        None => None,
    };
    let header = Header {
        model: model.cfg.clone(),
        train: train.cloned(),
        progress,
        rng: rng.cloned(),
        params,
        optimizer,
        extra,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;

    let mut buf = Vec::with_capacity(payload.len() + header.len() + 64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&payload);
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let tmp = path.with_extension("partial");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::load(path, e))?;
    let fail = |m: &str| Error::load(path, m);
    if buf.len() < 12 || &buf[..8] != MAGIC {
        return Err(fail("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Incompatible(format!(
            "{}: format version {version}, this build reads {FORMAT_VERSION}",
            path.display()
        )));
    }
    if buf.len() < 20 + 32 {
        return Err(fail("truncated"));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(fail("checksum mismatch (truncated or corrupted)"));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let header_bytes = body.get(20..20 + hlen).ok_or_else(|| fail("header runs past the file"))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| fail(&format!("bad header: {e}")))?;
    let payload = &body[20 + hlen..];

    let dtype = match header.params.first().map(|e| e.width) {
        Some(8) => DType::F64,
        _ => DType::F32,
    };
    let model = PlaneSegModel::with_dtype(&header.model, 0, dtype)?;
    let stored: BTreeMap<&str, &TensorEntry> = header.params.iter().map(|e| (e.name.as_str(), e)).collect();
    let expected: Vec<&String> = model.store.names().collect();
    if expected.len() != stored.len() || expected.iter().any(|n| !stored.contains_key(n.as_str())) {
        return Err(Error::Incompatible(format!(
            "{}: parameter set does not match the stored model config",
            path.display()
        )));
    }
    for (name, var) in model.store.vars() {
        let e = stored[name.as_str()];
        if e.shape != var.dims() {
            return Err(Error::Incompatible(format!("{name}: stored shape {:?}, model {:?}", e.shape, var.dims())));
        }
        var.set(&read_tensor(payload, e, dtype)?)?;
    }

    let optimizer = match header.optimizer {
        Some(oh) => {
            let extra: BTreeMap<&str, &TensorEntry> = header.extra.iter().map(|e| (e.name.as_str(), e)).collect();
            let mut o = Optimizer::new(oh.cfg);
            o.t = oh.t;
            for (pname, keys) in oh.slots {
                let ts = keys
                    .iter()
                    .map(|k| {
                        let e = extra.get(k.as_str()).ok_or_else(|| fail(&format!("missing slot `{k}`")))?;
                        read_tensor(payload, e, dtype)
                    })
                    .collect::<Result<Vec<_>>>()?;
                o.slots.insert(pname, ts);
            }
            Some(o)
        }
        None => None,
    };
    Ok(Checkpoint {
        model,
        optimizer,
        train: header.train,
        progress: header.progress,
        rng: header.rng,
    })
}

/// Copy every parameter of `src` whose group is in `groups` into `dst`.
/// Returns the number of tensors copied.
pub fn transfer_groups(src: &PlaneSegModel, dst: &PlaneSegModel, groups: &[&str]) -> Result<usize> {
    let mut n = 0;
    for (name, var) in src.store.vars() {
        let g = super::config::group_of(name).unwrap_or("");
        if !groups.contains(&g) {
            continue;
        }
        let target = dst
            .store
            .var(name)
            .ok_or_else(|| Error::Incompatible(format!("`{name}` missing from the target model")))?;
        if target.dims() != var.dims() {
            return Err(Error::Incompatible(format!("`{name}`: shapes {:?} vs {:?}", var.dims(), target.dims())));
        }
        target.set(&var.as_tensor().to_dtype(target.dtype())?)?;
        n += 1;
    }
    Ok(n)
}
