//! Binary archives of named `f32` tensors with a JSON header.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic "AVSEPCK\0" | version | header_len | header JSON
//! count | { name_len | name | ndim | dims… | f32 data… } × count
//! SHA-256 of everything above
//! ```
//!
//! Model checkpoints use the header `{"kind":"model","config":{…}}`. Training
//! states reuse the container with their own header and tensor prefixes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AVSEPCK\0";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Decoded archive contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_archive<'a>(
    header: &serde_json::Value,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION as usize);
    let json = serde_json::to_vec(header).expect("header serializes");
    put_u32(&mut buf, json.len());
    buf.extend_from_slice(&json);
    let tensors: Vec<_> = tensors.into_iter().collect();
    put_u32(&mut buf, tensors.len());
    for (name, t) in tensors {
        put_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.ndim());
        for &d in t.shape() {
            put_u32(&mut buf, d);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of archive".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_archive(bytes: &[u8]) -> Result<Archive> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not an archive (bad magic)".into()));
    }
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(Error::Checkpoint(
            "checksum mismatch (file truncated)".into(),
        ));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let header_len = r.u32()?;
    let header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok(Archive { header, tensors })
}

pub fn write_archive<'a>(
    path: &Path,
    header: &serde_json::Value,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<()> {
    let bytes = encode_archive(header, tensors);
    // write then rename so a crash never leaves a half-written file
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_archive(&bytes)
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    kind: String,
    config: serde_json::Value,
}

/// Parse a config stored in a header, validating its invariants.
pub fn config_from_json(v: serde_json::Value) -> Result<ModelConfig> {
    let cfg: ModelConfig =
        serde_json::from_value(v).map_err(|e| Error::Config(format!("stored config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn model_header(cfg: &ModelConfig) -> serde_json::Value {
    serde_json::to_value(ModelHeader {
        kind: "model".into(),
        config: serde_json::to_value(cfg).expect("config serializes"),
    })
    .expect("header serializes")
}

pub fn save(model: &Model<f32>, path: &Path) -> Result<()> {
    write_archive(path, &model_header(&model.cfg), model.params.iter())
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    from_archive(read_archive(path)?)
}

pub fn from_archive(archive: Archive) -> Result<Model<f32>> {
    let header: ModelHeader = serde_json::from_value(archive.header)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.kind != "model" {
        return Err(Error::Checkpoint(format!(
            "archive holds a {:?}, not a model",
            header.kind
        )));
    }
    let cfg = config_from_json(header.config)?;
    let mut params = ParamStore::new();
    for (name, t) in archive.tensors {
        if params.contains(&name) {
            return Err(Error::Checkpoint(format!("duplicate tensor {name:?}")));
        }
        params.insert(name, t);
    }
    Model::from_params(cfg, params)
}
