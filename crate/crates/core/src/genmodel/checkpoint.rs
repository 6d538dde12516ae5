//! Binary parameter checkpoints: magic `IUCL`, a `u32` format version, the
//! model configuration as `u32` fields, then every parameter tensor in
//! declaration order as a shape header followed by little-endian `f64`s.

use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IUCL";
pub const CHECKPOINT_VERSION: u32 = 1;

fn config_fields(c: &ModelConfig) -> [usize; 7] {
    [
        c.grid,
        c.feature_dim,
        c.query_dim,
        c.queries,
        c.encoder_hidden,
        c.class_hidden,
        c.box_hidden,
    ]
}

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    let put = |v: usize, out: &mut Vec<u8>| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let fields = config_fields(&params.config);
    put(fields.len(), &mut out);
    for f in fields {
        put(f, &mut out);
    }
    put(params.tensors.len(), &mut out);
    for t in &params.tensors {
        put(t.shape().len(), &mut out);
        for &d in t.shape() {
            put(d, &mut out);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n_fields = r.u32()?;
    if n_fields != 7 {
        return Err(Error::Checkpoint(format!("config block has {n_fields} fields, expected 7")));
    }
    let f: Vec<usize> = (0..7).map(|_| r.u32()).collect::<Result<_>>()?;
    let config = ModelConfig {
        grid: f[0],
        feature_dim: f[1],
        query_dim: f[2],
        queries: f[3],
        encoder_hidden: f[4],
        class_hidden: f[5],
        box_hidden: f[6],
    };
    config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n_tensors = r.u32()?;
    let expected = config.parameter_shapes();
    if n_tensors != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{n_tensors} tensors, expected {}",
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(n_tensors);
    for (name, shape) in expected {
        let ndim = r.u32()?;
        let got: Vec<usize> = (0..ndim).map(|_| r.u32()).collect::<Result<_>>()?;
        if got != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {got:?}, expected {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| r.f64()).collect::<Result<_>>()?;
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let params = ModelParams { config, tensors };
    params.check().map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    from_bytes(&fs::read(path)?)
}
