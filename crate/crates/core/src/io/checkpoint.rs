//! Versioned binary checkpoint with named tensor records.
//!
//! Layout (all integers little-endian):
//!   magic "DRNCKPT1" | version u32 | meta_len u32 | meta bytes (UTF-8)
//!   | tensor_count u32 | records
//! Record: name_len u32 | name bytes | rank u8 | dims (rank x u32)
//!   | payload (numel x f32, bit-exact).

use std::io::{Read, Write};
use std::path::Path;

use crate::element::Element;
use crate::error::{DrnError, Result};
use crate::model::DrnModel;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DRNCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct TensorRecord {
    pub name: String,
    pub dims: [usize; 4],
    pub data: Vec<f32>,
}

#[derive(Debug)]
pub struct CheckpointFile {
    pub version: u32,
    pub meta: String,
    pub tensors: Vec<TensorRecord>,
}

/// Serializes every model parameter plus a metadata block (config echo,
/// seed, iteration). Atomic write: temp file then rename.
pub fn checkpoint_save<E: Element>(model: &DrnModel<E>, meta: &str, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let meta_bytes = meta.as_bytes();
    buf.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta_bytes);
    buf.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for param in model.store.iter() {
        let name = param.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(4u8);
        for d in param.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in param.value.data() {
            buf.extend_from_slice(&(v.to_f64_val() as f32).to_le_bytes());
        }
    }
    let tmp = path.with_extension("ckpt.tmp");
    let mut file = std::fs::File::create(&tmp).map_err(|e| DrnError::io(&tmp, e))?;
    file.write_all(&buf).map_err(|e| DrnError::io(&tmp, e))?;
    file.sync_all().map_err(|e| DrnError::io(&tmp, e))?;
    drop(file);
    std::fs::rename(&tmp, path).map_err(|e| DrnError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(DrnError::Format(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Parses a checkpoint file, rejecting bad magic, unknown versions, and
/// truncation.
pub fn checkpoint_read(path: &Path) -> Result<CheckpointFile> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| DrnError::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    let magic = r.take(8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(DrnError::Format(format!(
            "{}: bad checkpoint magic {:02x?}",
            path.display(),
            magic
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(DrnError::Format(format!(
            "{}: unsupported checkpoint version {version} (supported: {CHECKPOINT_VERSION})",
            path.display()
        )));
    }
    let meta_len = r.u32()? as usize;
    let meta = String::from_utf8(r.take(meta_len)?.to_vec())
        .map_err(|e| DrnError::Format(format!("{}: metadata is not UTF-8: {e}", path.display())))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| {
            DrnError::Format(format!("{}: tensor name is not UTF-8: {e}", path.display()))
        })?;
        let rank = r.u8()?;
        if rank != 4 {
            return Err(DrnError::Format(format!(
                "{}: tensor {name} has rank {rank}, expected 4",
                path.display()
            )));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let numel: usize = dims.iter().product();
        let payload = r.take(numel * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push(TensorRecord { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(DrnError::Format(format!(
            "{}: {} trailing bytes after the last record",
            path.display(),
            bytes.len() - r.pos
        )));
    }
    Ok(CheckpointFile {
        version,
        meta,
        tensors,
    })
}

/// Strict load: every model parameter must match a file record by name and
/// shape, and vice versa. On mismatch the error lists the first three
/// problems. Returns the metadata block.
pub fn checkpoint_load<E: Element>(path: &Path, model: &mut DrnModel<E>) -> Result<String> {
    let file = checkpoint_read(path)?;
    let mut mismatches: Vec<String> = Vec::new();

    let names: Vec<String> = model.store.iter().map(|p| p.name.clone()).collect();
    for record in &file.tensors {
        if !names.iter().any(|n| n == &record.name) {
            mismatches.push(format!("file tensor {} has no model parameter", record.name));
        }
    }
    let mut updates: Vec<(usize, Tensor<E>)> = Vec::new();
    for (idx, name) in names.iter().enumerate() {
        match file.tensors.iter().find(|r| &r.name == name) {
            None => mismatches.push(format!("model parameter {name} missing from file")),
            Some(record) => {
                let id = model.store.find(name).expect("name from store");
                let expect = model.store.value(id).shape();
                if record.dims != expect {
                    mismatches.push(format!(
                        "{name}: file shape {:?} does not match model shape {:?}",
                        record.dims, expect
                    ));
                } else {
                    let data: Vec<E> = record
                        .data
                        .iter()
                        .map(|&v| E::from_f64_val(v as f64))
                        .collect();
                    updates.push((idx, Tensor::new(record.dims, data).expect("shape checked")));
                }
            }
        }
    }
    if !mismatches.is_empty() {
        let shown: Vec<&String> = mismatches.iter().take(3).collect();
        return Err(DrnError::Format(format!(
            "{}: checkpoint does not match model ({} mismatches; first: {})",
            path.display(),
            mismatches.len(),
            shown
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join("; ")
        )));
    }
    for (idx, tensor) in updates {
        let id = model.store.find(&names[idx]).expect("name from store");
        let mut tensor = tensor;
        tensor.set_requires_grad(true);
        *model.store.value_mut(id) = tensor;
    }
    Ok(file.meta)
}
