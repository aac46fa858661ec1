//! `amg-ckpt-1` checkpoint files.
//!
//! Layout: one line of compact JSON (format tag, model spec, per-layer
//! original head ids, tensor manifest), a newline, then every tensor's
//! values as little-endian `f64` in manifest order. Identical models give
//! identical bytes.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{ModelSpec, VitModel};

pub const CHECKPOINT_FORMAT: &str = "amg-ckpt-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub spec: ModelSpec,
    pub head_ids: Vec<Vec<usize>>,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint(model: &VitModel, mut w: impl Write) -> Result<()> {
    model.check_shapes()?;
    let mut offset = 0;
    let tensors = model
        .params()
        .into_iter()
        .map(|(name, t)| {
            let e = TensorEntry { name, shape: t.shape().to_vec(), offset };
            offset += t.numel() * 8;
            e
        })
        .collect();
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        spec: model.spec.clone(),
        head_ids: model.blocks.iter().map(|b| b.head_ids.clone()).collect(),
        tensors,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(offset);
    for (_, t) in model.params() {
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl BufRead) -> Result<VitModel> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {:?}", header.format)));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    // Start from a correctly shaped model, then overwrite every tensor.
    let mut model = VitModel::init(header.spec.clone(), 0)?;
    if header.head_ids.len() != model.blocks.len() {
        return Err(Error::Checkpoint("head id table does not match layer count".into()));
    }
    for (b, ids) in model.blocks.iter_mut().zip(header.head_ids) {
        b.head_ids = ids;
    }
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    if names.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, spec needs {}",
            header.tensors.len(),
            names.len()
        )));
    }
    let mut end = 0;
    for ((slot, name), entry) in model.params_mut().into_iter().zip(&names).zip(&header.tensors) {
        if &entry.name != name {
            return Err(Error::Checkpoint(format!("expected tensor {name}, found {}", entry.name)));
        }
        let n: usize = entry.shape.iter().product();
        let bytes = payload
            .get(entry.offset..entry.offset + n * 8)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: payload truncated")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *slot = Tensor::new(entry.shape.clone(), data)?;
        end = end.max(entry.offset + n * 8);
    }
    if end != payload.len() {
        return Err(Error::Checkpoint(format!("{} trailing payload bytes", payload.len() - end)));
    }
    model.check_shapes()?;
    Ok(model)
}

pub fn save(model: &VitModel, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(model, &mut bytes)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<VitModel> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact_and_deterministic() {
        let mut m = VitModel::init(ModelSpec::toy(), 3).unwrap();
        m.remove_heads(1, &[0, 2]).unwrap();
        m.apply_kv_index(2, &[0, 3, 4, 9]).unwrap();
        let mut a = Vec::new();
        write_checkpoint(&m, &mut a).unwrap();
        let back = read_checkpoint(&a[..]).unwrap();
        assert_eq!(back, m);
        let mut b = Vec::new();
        write_checkpoint(&back, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let m = VitModel::init(ModelSpec::toy(), 1).unwrap();
        let mut a = Vec::new();
        write_checkpoint(&m, &mut a).unwrap();
        a.truncate(a.len() - 8);
        assert!(matches!(read_checkpoint(&a[..]), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn wrong_format_is_rejected() {
        let text = b"{\"format\":\"other\"}\n";
        assert!(read_checkpoint(&text[..]).is_err());
    }
}
