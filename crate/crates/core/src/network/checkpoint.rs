//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `DDCK`, `u32` version, `u32` config length,
//! config JSON, `u32` parameter count, then per parameter a `u32` name length,
//! UTF-8 name, `u32` rank, `u32` dims and `f32` values.

use std::io::{Read, Write};

use super::{Model, ModelConfig, NetworkError};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> Result<u32, NetworkError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>, NetworkError> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn write_checkpoint(model: &Model, w: &mut impl Write) -> Result<(), NetworkError> {
    let cfg = serde_json::to_vec(model.config())
        .map_err(|e| NetworkError::Checkpoint(e.to_string()))?;
    w.write_all(&CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    put_u32(w, cfg.len() as u32)?;
    w.write_all(&cfg)?;
    put_u32(w, model.params().len() as u32)?;
    for (_, name, t) in model.params().iter() {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.shape.len() as u32)?;
        for &d in &t.shape {
            put_u32(w, d as u32)?;
        }
        let mut buf = Vec::with_capacity(4 * t.data.len());
        for &v in &t.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Reads a checkpoint. With `expected` set, a different stored config is
/// rejected with [`NetworkError::ConfigMismatch`].
pub fn read_checkpoint(
    r: &mut impl Read,
    expected: Option<&ModelConfig>,
) -> Result<Model, NetworkError> {
    let bad = |m: &str| NetworkError::Checkpoint(m.to_string());
    if get_bytes(r, 4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(NetworkError::Checkpoint(format!("unsupported version {version}")));
    }
    let n = get_u32(r)? as usize;
    let cfg: ModelConfig = serde_json::from_slice(&get_bytes(r, n)?)
        .map_err(|e| NetworkError::Checkpoint(e.to_string()))?;
    if expected.is_some_and(|e| *e != cfg) {
        return Err(NetworkError::ConfigMismatch);
    }
    let mut model = Model::new(cfg)?;
    let count = get_u32(r)? as usize;
    if count != model.params().len() {
        return Err(bad("parameter count differs from the architecture"));
    }
    for _ in 0..count {
        let n = get_u32(r)? as usize;
        let name = String::from_utf8(get_bytes(r, n)?).map_err(|_| bad("name is not UTF-8"))?;
        let rank = get_u32(r)? as usize;
        let shape = (0..rank)
            .map(|_| get_u32(r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let id = model
            .params()
            .id(&name)
            .ok_or_else(|| NetworkError::Checkpoint(format!("unknown parameter {name}")))?;
        let t = model.params_mut().get_mut(id);
        if t.shape != shape {
            return Err(NetworkError::Checkpoint(format!("shape of {name} differs")));
        }
        let raw = get_bytes(r, 4 * t.data.len())?;
        for (v, c) in t.data.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
        }
    }
    Ok(model)
}

impl Model {
    pub fn save(&self, path: &std::path::Path) -> Result<(), NetworkError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(self, &mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path, expected: Option<&ModelConfig>) -> Result<Self, NetworkError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        read_checkpoint(&mut r, expected)
    }
}
