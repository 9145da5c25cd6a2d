//! Checkpoint container: magic, version, config text, named LTNS tensors,
//! trailing CRC32 over every preceding byte.

use std::path::Path;

use crate::tensor::ltns::{decode_ltns, encode_ltns, ByteReader, FormatError};
use crate::tensor::Scalar;

use super::{LamoModel, ModelConfig, ModelError};

pub const CKPT_MAGIC: &[u8; 4] = b"LCKP";
pub const CKPT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Scalar>(model: &LamoModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let text = model.config().to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_ltns(t, &mut out);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<LamoModel<T>, ModelError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            offset: 0,
            needed: 4 - bytes.len(),
        }
        .into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let mut r = ByteReader::new(body);
    r.magic(CKPT_MAGIC)?;
    r.version(CKPT_VERSION)?;
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed }.into());
    }
    let len = r.u32()? as usize;
    let at = r.offset();
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| FormatError::Invalid {
        offset: at,
        msg: "config text is not UTF-8".into(),
    })?;
    let config = ModelConfig::from_text(text)?;
    let mut model: LamoModel<T> = LamoModel::new(config, 0)?;
    let count = r.u32()? as usize;
    if count != model.params().len() {
        return Err(ModelError::Parameter(format!(
            "count {count} does not match the architecture ({})",
            model.params().len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let n = r.u16()? as usize;
        let at = r.offset();
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| FormatError::Invalid {
                offset: at,
                msg: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        let t = decode_ltns::<T>(&mut r)?;
        let i = model
            .params()
            .index_of(&name)
            .ok_or_else(|| ModelError::Parameter(format!("`{name}` is not part of the architecture")))?;
        if std::mem::replace(&mut seen[i], true) {
            return Err(ModelError::Parameter(format!("`{name}` appears twice")));
        }
        let slot = model.params_mut().get_mut(i);
        if slot.shape() != t.shape() {
            return Err(ModelError::Parameter(format!(
                "`{name}` has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    if r.remaining() != 0 {
        return Err(r.invalid("trailing bytes before checksum").into());
    }
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &LamoModel<T>, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, encode_checkpoint(model)).map_err(FormatError::Io)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<LamoModel<T>, ModelError> {
    let bytes = std::fs::read(path).map_err(FormatError::Io)?;
    decode_checkpoint(&bytes)
}
