//! Self-describing binary checkpoints: magic, a JSON header (config plus
//! freeze flag), then length-prefixed named f64 arrays in parameter visit
//! order. Everything is little-endian and bit-exact, so save → load → save
//! reproduces identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Value;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"GKDM0001";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    frozen_embeddings: bool,
}

/// Writes `model` to `path`.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    let header = Header {
        config: model.config().clone(),
        frozen_embeddings: model.embeddings_frozen(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;

    let mut entries: Vec<(String, Vec<u8>)> = Vec::new();
    model.visit_params(&mut |name, v| {
        let mut bytes = Vec::with_capacity(4 + name.len() + 4 + v.shape().len() * 8 + v.numel() * 8);
        bytes.extend((name.len() as u32).to_le_bytes());
        bytes.extend(name.as_bytes());
        bytes.extend((v.shape().len() as u32).to_le_bytes());
        for &dim in v.shape() {
            bytes.extend((dim as u64).to_le_bytes());
        }
        for &x in v.data() {
            bytes.extend(x.to_le_bytes());
        }
        entries.push((name.to_string(), bytes));
    });
    out.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (_, bytes) in &entries {
        out.write_all(bytes)?;
    }
    out.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint("file truncated".into()))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4-byte read")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8-byte read")))
    }
}

/// Reads a model back; rejects unknown magic, malformed headers, parameter
/// names/shapes that disagree with the config, and trailing garbage.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut cur = Cursor { inner: std::io::BufReader::new(std::fs::File::open(path)?) };
    if cur.bytes(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let json_len = cur.u32()? as usize;
    let header: Header = serde_json::from_slice(&cur.bytes(json_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    header.config.validate().map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;

    // Start from a structurally correct model, then overwrite every value.
    let mut model = Model::random(header.config, 0)?;
    model.set_embeddings_frozen(header.frozen_embeddings);

    let n_params = cur.u32()? as usize;
    let expected = model.param_order();
    if n_params != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{} parameters on disk, model needs {}",
            n_params,
            expected.len()
        )));
    }
    let mut loaded: Vec<Value> = Vec::with_capacity(n_params);
    for want_name in &expected {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.bytes(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
        if &name != want_name {
            return Err(Error::Checkpoint(format!(
                "parameter order mismatch: found {name:?}, expected {want_name:?}"
            )));
        }
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.bytes(n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        loaded.push(Value::new(shape, data)?);
    }
    let mut trailing = [0u8; 1];
    if cur.inner.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }

    let mut it = loaded.into_iter();
    let mut shape_err = None;
    model.visit_params_mut(&mut |name, v| {
        let new = it.next().expect("counted above");
        if new.shape() != v.shape() {
            shape_err.get_or_insert(format!(
                "parameter {name} has shape {:?}, config implies {:?}",
                new.shape(),
                v.shape()
            ));
        } else {
            *v = new;
        }
    });
    if let Some(msg) = shape_err {
        return Err(Error::Checkpoint(msg));
    }
    Ok(model)
}
