//! Checkpoint container.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes, b"BSEPNET1"
//! version          u32
//! config_len       u32, followed by config JSON (NetConfig)
//! config_hash      32 bytes, SHA-256 of the config JSON
//! n_arrays         u32
//! per array:
//!   name_len       u16, followed by UTF-8 name
//!   n_dims         u8
//!   dims           u32 each
//!   data           f32 little-endian, row-major
//! ```

use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelParams, NetConfig, TensorMut, TensorRef};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"BSEPNET1";
const VERSION: u32 = 1;

pub fn save_params(p: &ModelParams, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;

    let cfg_json = serde_json::to_vec(&p.cfg)?;
    w.write_all(&(cfg_json.len() as u32).to_le_bytes())?;
    w.write_all(&cfg_json)?;
    let hash = Sha256::digest(&cfg_json);
    w.write_all(&hash)?;

    let tensors = p.tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        match t {
            TensorRef::M(m) => {
                w.write_all(&[2u8])?;
                w.write_all(&(m.nrows() as u32).to_le_bytes())?;
                w.write_all(&(m.ncols() as u32).to_le_bytes())?;
                for &v in m.iter() {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
            TensorRef::V(v) => {
                w.write_all(&[1u8])?;
                w.write_all(&(v.len() as u32).to_le_bytes())?;
                for &x in v.iter() {
                    w.write_all(&(x as f32).to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic, not a checkpoint file",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }

    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg_json = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_json)?;
    let mut stored_hash = [0u8; 32];
    r.read_exact(&mut stored_hash)?;
    let hash = Sha256::digest(&cfg_json);
    if hash[..] != stored_hash[..] {
        return Err(Error::Checkpoint("config hash mismatch".into()));
    }
    let cfg: NetConfig = serde_json::from_slice(&cfg_json)?;

    // Build a zero-valued parameter set of the right shape, then fill it.
    let mut params = super::init_params(&cfg, 0)?;
    params.scale(0.0);

    let n_arrays = read_u32(&mut r)? as usize;
    let mut filled = std::collections::HashSet::new();
    for _ in 0..n_arrays {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Checkpoint("non-UTF8 array name".into()))?;
        let mut ndims = [0u8; 1];
        r.read_exact(&mut ndims)?;
        let mut dims = Vec::with_capacity(ndims[0] as usize);
        for _ in 0..ndims[0] {
            dims.push(read_u32(&mut r)? as usize);
        }
        let total: usize = dims.iter().product();
        let mut data = Vec::with_capacity(total);
        let mut buf = [0u8; 4];
        for _ in 0..total {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }

        let mut found = false;
        for (tname, t) in params.tensors_mut() {
            if tname != name {
                continue;
            }
            found = true;
            match t {
                TensorMut::M(m) => {
                    if dims != [m.nrows(), m.ncols()] {
                        return Err(Error::Checkpoint(format!(
                            "{name}: shape {dims:?} does not match expected {:?}",
                            [m.nrows(), m.ncols()]
                        )));
                    }
                    for (dst, src) in m.iter_mut().zip(&data) {
                        *dst = *src;
                    }
                }
                TensorMut::V(v) => {
                    if dims != [v.len()] {
                        return Err(Error::Checkpoint(format!(
                            "{name}: shape {dims:?} does not match expected [{}]",
                            v.len()
                        )));
                    }
                    for (dst, src) in v.iter_mut().zip(&data) {
                        *dst = *src;
                    }
                }
            }
            break;
        }
        if !found {
            return Err(Error::Checkpoint(format!("unexpected array {name}")));
        }
        filled.insert(name);
    }
    let expected: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    for name in expected {
        if !filled.contains(&name) {
            return Err(Error::Checkpoint(format!("missing array {name}")));
        }
    }
    Ok(params)
}

/// Loads a checkpoint and rejects it if the stored config differs from the
/// expected one (e.g. a model trained for a different fft_size).
pub fn load_params_compatible(path: &Path, expected: &NetConfig) -> Result<ModelParams> {
    let params = load_params(path)?;
    if &params.cfg != expected {
        return Err(Error::Checkpoint(format!(
            "config mismatch: checkpoint has {:?}, expected {:?}",
            params.cfg, expected
        )));
    }
    Ok(params)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}
