//! Checkpoint layout (little-endian): `b"SEQRECKP"`, u32 version, u32-length
//! model config JSON, u32-length training config echo, u32 tensor count,
//! then per tensor: u32-length name, u32 rows, u32 cols, f32 data.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::semantic::cache::Reader;
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"SEQRECKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub config_echo: String,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut Reader<'_>) -> Result<String> {
    let n = r.u32()? as usize;
    String::from_utf8(r.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(format!("bad utf-8: {e}")))
}

impl Checkpoint {
    pub fn to_bytes(model: &Model, config_echo: &str) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &serde_json::to_string(&model.config).expect("serialize model config"));
        put_str(&mut out, config_echo);
        out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
        for (_, name, m) in model.params.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for &v in m.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let short = |_| Error::Checkpoint("truncated checkpoint".into());
        if r.take(8).map_err(short)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32().map_err(short)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let config: ModelConfig = serde_json::from_str(&get_str(&mut r)?)
            .map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
        let config_echo = get_str(&mut r)?;
        let mut model = Model::new(config, 0)?;
        let count = r.u32().map_err(short)? as usize;
        if count != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {count} tensors, config implies {}",
                model.params.len()
            )));
        }
        for _ in 0..count {
            let name = get_str(&mut r)?;
            let rows = r.u32().map_err(short)? as usize;
            let cols = r.u32().map_err(short)? as usize;
            let id = model
                .params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            let expected = model.params.get(id).shape();
            if expected != (rows, cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} is {rows}x{cols}, config implies {}x{}",
                    expected.0, expected.1
                )));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f64::from(r.f32().map_err(short)?));
            }
            *model.params.get_mut(id) = Matrix::from_vec(rows, cols, data);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes in checkpoint".into()));
        }
        if !model.params.all_finite() {
            return Err(Error::Checkpoint("non-finite parameter values".into()));
        }
        Ok(Self { model, config_echo })
    }
}

pub fn save_checkpoint(model: &Model, config_echo: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, Checkpoint::to_bytes(model, config_echo)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    Checkpoint::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
