//! Single-file checkpoint format.
//!
//! Layout: magic `CFLW`, version `u32` LE, config JSON (length-prefixed),
//! tensor manifest JSON (length-prefixed), then raw little-endian `f32`
//! blocks at the offsets recorded in the manifest. Saving a loaded
//! checkpoint reproduces the file byte for byte.

use std::path::Path;

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"CFLW";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    CodecPretrain,
    Fec,
    Finetune,
}

impl std::fmt::Display for StageTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StageTag::CodecPretrain => "codec_pretrain",
            StageTag::Fec => "fec",
            StageTag::Finetune => "finetune",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub stage: StageTag,
    pub step: u64,
    pub config: RunConfig,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

/// In-memory checkpoint: metadata plus named tensors in a stable order.
#[derive(Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config_json = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::format(format!("cannot serialize checkpoint meta: {e}")))?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: "f32".to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += (t.len() * 4) as u64;
        }
        let manifest_json = serde_json::to_vec(&entries)
            .map_err(|e| Error::format(format!("cannot serialize tensor manifest: {e}")))?;

        let mut out = Vec::with_capacity(
            4 + 4 + 8 + config_json.len() + 8 + manifest_json.len() + offset as usize,
        );
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&config_json);
        out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest_json);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 16 || bytes[0..4] != MAGIC {
            return Err(Error::format("not a CFLW checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut off = 8usize;
        let read_len = |off: &mut usize| -> Result<usize> {
            let v = bytes
                .get(*off..*off + 8)
                .map(|s| u64::from_le_bytes(s.try_into().unwrap()))
                .ok_or_else(|| Error::format("truncated checkpoint"))?;
            *off += 8;
            Ok(v as usize)
        };
        let config_len = read_len(&mut off)?;
        let config_json = bytes
            .get(off..off + config_len)
            .ok_or_else(|| Error::format("truncated checkpoint config"))?;
        off += config_len;
        let meta: CheckpointMeta = serde_json::from_slice(config_json)
            .map_err(|e| Error::format(format!("bad checkpoint meta: {e}")))?;

        let manifest_len = read_len(&mut off)?;
        let manifest_json = bytes
            .get(off..off + manifest_len)
            .ok_or_else(|| Error::format("truncated tensor manifest"))?;
        off += manifest_len;
        let entries: Vec<TensorEntry> = serde_json::from_slice(manifest_json)
            .map_err(|e| Error::format(format!("bad tensor manifest: {e}")))?;

        let blob = &bytes[off..];
        let mut tensors = Vec::with_capacity(entries.len());
        for e in entries {
            if e.dtype != "f32" {
                return Err(Error::format(format!(
                    "unsupported tensor dtype {} for {}",
                    e.dtype, e.name
                )));
            }
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + count * 4;
            let raw = blob
                .get(start..end)
                .ok_or_else(|| Error::format(format!("tensor {} exceeds blob", e.name)))?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name, Tensor::from_vec(e.shape, data)?));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let bytes = std::fs::read(path.as_ref())?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut rng = crate::rng::derive(1, "ckpt-test", 0);
        Checkpoint {
            meta: CheckpointMeta {
                stage: StageTag::CodecPretrain,
                step: 123,
                config: RunConfig::default(),
            },
            tensors: vec![
                ("a.weight".into(), Tensor::randn(vec![3, 4], &mut rng)),
                ("b.bias".into(), Tensor::randn(vec![7], &mut rng)),
            ],
        }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        let again = loaded.to_bytes().unwrap();
        assert_eq!(bytes, again);
        assert_eq!(loaded.meta.step, 123);
        assert_eq!(loaded.tensor("a.weight").unwrap().shape(), &[3, 4]);
    }

    #[test]
    fn magic_and_version_are_enforced() {
        let ck = sample();
        let mut bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[0..4], b"CFLW");
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let mut bytes2 = ck.to_bytes().unwrap();
        bytes2[4] = 99;
        assert!(Checkpoint::from_bytes(&bytes2).is_err());
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 5]).is_err());
    }
}
