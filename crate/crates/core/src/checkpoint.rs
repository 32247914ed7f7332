//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "ENSNETCK"
//! version      u32      currently 1
//! header_len   u64
//! header       JSON     run config (TOML text), epochs done, seed,
//!                       Adam step counts, metrics log
//! blob_count   u32
//! blob*        name_len u32, name (UTF-8), rank u32, dims u64 * rank,
//!              f32 data * product(dims)
//! trailer      4 bytes  "END!"
//! ```
//!
//! Blobs hold every model tensor (parameters and batch-norm running
//! statistics) under its [`EnsNet::named_tensors`] name, plus the Adam
//! moments as `adam.<group>.m.<param>` and `adam.<group>.v.<param>`.
//! Randomness is derived from `(seed, stream, epoch, batch, part)`, so the
//! seed and epoch counter are the complete generator state.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CheckpointError, Error, Result};
use crate::metrics::MetricsLog;
use crate::model::EnsNet;
use crate::optim::AdamState;
use crate::tensor::Tensor;
use crate::train::TrainState;

pub const MAGIC: &[u8; 8] = b"ENSNETCK";
pub const VERSION: u32 = 1;
const TRAILER: &[u8; 4] = b"END!";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config_toml: String,
    epochs_done: usize,
    seed: u64,
    adam_t_base: u64,
    adam_t_subnets: Vec<u64>,
    rng: String,
    metrics: MetricsLog,
}

/// A decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState<f32>,
}

fn adam_blobs<'s>(group: &str, names: &[String], opt: &'s AdamState<f32>) -> Vec<(String, &'s Tensor<f32>)> {
    let mut out = Vec::new();
    for (name, (m, v)) in names.iter().zip(opt.m.iter().zip(&opt.v)) {
        out.push((format!("adam.{group}.m.{name}"), m));
        out.push((format!("adam.{group}.v.{name}"), v));
    }
    out
}

fn all_blobs<'s>(state: &'s TrainState<f32>) -> Vec<(String, &'s Tensor<f32>)> {
    let mut blobs = state.model.named_tensors();
    blobs.extend(adam_blobs("base", &state.base_param_names(), &state.base_opt));
    for (i, (net, opt)) in state.model.subnets.iter().zip(&state.subnet_opts).enumerate() {
        let group = format!("subnet{i}");
        blobs.extend(adam_blobs(&group, &net.param_names(&group), opt));
    }
    blobs
}

/// Write atomically: the data goes to a sibling temporary file that is
/// renamed over `path` only once complete, so a failure leaves the last
/// good checkpoint intact.
pub fn save(path: &Path, config: &RunConfig, state: &TrainState<f32>) -> Result<()> {
    let header = Header {
        config_toml: config.to_toml(),
        epochs_done: state.epochs_done,
        seed: config.train.seed,
        adam_t_base: state.base_opt.t,
        adam_t_subnets: state.subnet_opts.iter().map(|o| o.t).collect(),
        rng: "counter-derived from seed and epoch".into(),
        metrics: state.metrics.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let blobs = all_blobs(state);

    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let io = |e| Error::io(&tmp, e);
    let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    w.write_all(&(blobs.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in &blobs {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(t.rank() as u32).to_le_bytes()).map_err(io)?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.write_all(TRAILER).map_err(io)?;
    let file = w.into_inner().map_err(|e| Error::io(&tmp, e.into_error()))?;
    file.sync_all().map_err(io)?;
    drop(file);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

fn corrupt(offset: usize, reason: impl Into<String>) -> Error {
    CheckpointError::Corrupt {
        offset,
        reason: reason.into(),
    }
    .into()
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        let rest = self.bytes.len() - self.pos;
        if n > rest {
            return Err(corrupt(
                self.pos,
                format!("truncated reading {what}: need {n} bytes, {rest} left"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.bytes.len())
            .ok_or_else(|| corrupt(at, format!("implausible {what} {v}")))
    }
}

/// Read and validate the fixed prefix. Returns the version-checked reader
/// positioned after the header, and the header.
fn read_header(bytes: &[u8]) -> Result<(Reader<'_>, Header)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: VERSION,
        }
        .into());
    }
    let n = r.len("header length")?;
    let at = r.pos;
    let header: Header =
        serde_json::from_slice(r.take(n, "header")?).map_err(|e| corrupt(at, format!("header: {e}")))?;
    Ok((r, header))
}

fn read_blobs(r: &mut Reader<'_>) -> Result<HashMap<String, (usize, Tensor<f32>)>> {
    let count = r.u32("blob count")?;
    let mut blobs = HashMap::new();
    for _ in 0..count {
        let at = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "blob name")?)
            .map_err(|_| corrupt(at, "blob name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(corrupt(at, format!("blob {name} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.len("dimension")).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| corrupt(at, format!("blob {name} shape {shape:?} overflows")))?;
        let data = r
            .take(bytes, &format!("blob {name}"))?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| corrupt(at, format!("blob {name}: {e}")))?;
        if blobs.insert(name.clone(), (at, t)).is_some() {
            return Err(corrupt(at, format!("duplicate blob {name}")));
        }
    }
    let at = r.pos;
    if r.take(TRAILER.len(), "trailer")? != TRAILER {
        return Err(corrupt(at, "bad trailer"));
    }
    if r.pos != r.bytes.len() {
        return Err(corrupt(r.pos, "trailing bytes after end marker"));
    }
    Ok(blobs)
}

/// Decode a checkpoint held in memory.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (mut r, header) = read_header(bytes)?;
    let mut blobs = read_blobs(&mut r)?;
    let end = r.pos;
    let config = RunConfig::from_toml(&header.config_toml).map_err(|e| corrupt(0, format!("embedded config: {e}")))?;
    config.validate()?;
    let model = EnsNet::build(&config.model, header.seed)?;
    let mut state = TrainState::new(model, config.optimizer);
    if header.adam_t_subnets.len() != state.subnet_opts.len() {
        return Err(corrupt(0, "Adam step counts do not match the subnet count"));
    }

    let names: Vec<String> = all_blobs(&state).into_iter().map(|(n, _)| n).collect();
    let mut fill = |name: &str, dst: &mut Tensor<f32>| -> Result<()> {
        let (at, t) = blobs
            .remove(name)
            .ok_or_else(|| corrupt(end, format!("missing blob {name}")))?;
        if t.shape() != dst.shape() {
            return Err(corrupt(at, format!("blob {name} has shape {:?}, model expects {:?}", t.shape(), dst.shape())));
        }
        *dst = t;
        Ok(())
    };
    let mut targets: Vec<&mut Tensor<f32>> = state.model.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
    targets.extend(state.base_opt.m.iter_mut().zip(state.base_opt.v.iter_mut()).flat_map(|(m, v)| [m, v]));
    for opt in &mut state.subnet_opts {
        targets.extend(opt.m.iter_mut().zip(opt.v.iter_mut()).flat_map(|(m, v)| [m, v]));
    }
    for (name, dst) in names.iter().zip(targets) {
        fill(name, dst)?;
    }
    if let Some((name, (at, _))) = blobs.iter().min_by_key(|(_, (at, _))| *at) {
        return Err(corrupt(*at, format!("unexpected blob {name}")));
    }

    state.base_opt.t = header.adam_t_base;
    for (opt, &t) in state.subnet_opts.iter_mut().zip(&header.adam_t_subnets) {
        opt.t = t;
    }
    state.epochs_done = header.epochs_done;
    state.metrics = header.metrics;
    if state.metrics.last_epoch() != state.epochs_done {
        return Err(corrupt(0, "metrics log does not end at the checkpoint epoch"));
    }
    Ok(Checkpoint { config, state })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
