//! Binary checkpoints of a whole system.
//!
//! Layout: the magic bytes `ZRTECKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then every tensor's
//! values in header order as little-endian floats of the header's dtype.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::Scalar;
use crate::codec::{TargetStyle, TripletOrder};
use crate::error::{Error, Result};
use crate::hyper::HyperConfig;
use crate::metric::MatchConfig;
use crate::model::ModelConfig;
use crate::system::{SystemSpec, TgmSystem, Variant};
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 8] = b"ZRTECKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    variant: Variant,
    order: TripletOrder,
    style: TargetStyle,
    model: ModelConfig,
    metric: MatchConfig,
    hyper: HyperConfig,
    vocab: Vocabulary,
    dtype: Dtype,
    tensors: Vec<TensorEntry>,
}

fn dtype_of<F: Scalar>() -> Dtype {
    if std::mem::size_of::<F>() == 4 {
        Dtype::F32
    } else {
        Dtype::F64
    }
}

/// Every tensor of the system with its namespaced name, in slot order.
fn named_tensors<F: Scalar>(system: &TgmSystem<F>) -> Vec<(String, &Array2<F>)> {
    let mut out: Vec<(String, &Array2<F>)> =
        system.model.params().iter().map(|(n, t)| (format!("model.{n}"), t)).collect();
    if let Some(m) = &system.matcher {
        out.extend(m.params().iter().map(|(n, t)| (format!("match.{n}"), t)));
    }
    if let Some(h) = &system.hyper {
        out.extend(h.params().iter().map(|(n, t)| (format!("hyper.{n}"), t)));
    }
    out
}

pub fn save_checkpoint<F: Scalar>(path: impl AsRef<Path>, system: &TgmSystem<F>) -> Result<()> {
    let path = path.as_ref();
    let tensors = named_tensors(system);
    let header = Header {
        variant: system.variant,
        order: system.order,
        style: system.style,
        model: system.model.config().clone(),
        metric: system.matcher.as_ref().map(|m| m.config().clone()).unwrap_or_default(),
        hyper: system.hyper.as_ref().map(|h| h.config().clone()).unwrap_or_default(),
        vocab: system.model.vocab().clone(),
        dtype: dtype_of::<F>(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                rows: t.nrows(),
                cols: t.ncols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for (_, t) in &tensors {
        for &x in t.iter() {
            match header.dtype {
                Dtype::F32 => w.write_all(&x.to_f32().unwrap().to_le_bytes()),
                Dtype::F64 => w.write_all(&x.to_f64().unwrap().to_le_bytes()),
            }
            .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint<F: Scalar>(path: impl AsRef<Path>) -> Result<TgmSystem<F>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let mut read = |buf: &mut [u8]| r.read_exact(buf).map_err(|e| bad(format!("truncated file ({e})")));

    let mut magic = [0u8; 8];
    read(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let mut word = [0u8; 4];
    read(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let mut long = [0u8; 8];
    read(&mut long)?;
    let len = usize::try_from(u64::from_le_bytes(long)).map_err(|_| bad("header too large".into()))?;
    let mut json = vec![0u8; len];
    read(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("bad header: {e}")))?;

    let spec = SystemSpec {
        variant: header.variant,
        model: header.model,
        metric: header.metric,
        hyper: header.hyper,
        order: header.order,
        style: header.style,
    };
    let mut system: TgmSystem<F> = TgmSystem::new(&spec, header.vocab)?;
    let expected: Vec<(String, (usize, usize))> =
        named_tensors(&system).into_iter().map(|(n, t)| (n, t.dim())).collect();
    if expected.len() != header.tensors.len() {
        return Err(bad(format!("{} tensors stored, {} expected", header.tensors.len(), expected.len())));
    }
    for ((name, dim), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || *dim != (entry.rows, entry.cols) {
            return Err(bad(format!(
                "tensor `{}` ({}x{}) does not match expected `{name}` ({}x{})",
                entry.name, entry.rows, entry.cols, dim.0, dim.1
            )));
        }
    }
    for t in system.tensors_mut() {
        for x in t.iter_mut() {
            *x = match header.dtype {
                Dtype::F32 => {
                    let mut b = [0u8; 4];
                    read(&mut b)?;
                    F::from_f64_lossy(f32::from_le_bytes(b) as f64)
                }
                Dtype::F64 => {
                    let mut b = [0u8; 8];
                    read(&mut b)?;
                    F::from_f64_lossy(f64::from_le_bytes(b))
                }
            };
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(bad("trailing bytes after tensor data".into()));
    }
    Ok(system)
}
