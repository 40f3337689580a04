//! Binary checkpoint format.
//!
//! Layout: magic `FVT1`, format version (u32 LE), a length-prefixed UTF-8
//! metadata block (the key/value text format), then parameters in
//! lexicographic name order, each as name-length (u32 LE), name bytes,
//! rank (u32 LE), dims (u32 LE each), and the values as little-endian
//! 32-bit floats. Writing the same state twice produces identical bytes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kvtext::KvDoc;
use crate::numerics::{ParamSet, Tensor};

pub const MAGIC: [u8; 4] = *b"FVT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub metadata: KvDoc,
    params: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(metadata: KvDoc) -> Self {
        Checkpoint {
            metadata,
            params: BTreeMap::new(),
        }
    }

    /// Add every parameter of a set, names taken verbatim.
    pub fn add_params(&mut self, set: &ParamSet<f32>) -> Result<()> {
        for (name, t) in set.iter() {
            if self.params.contains_key(name) {
                return Err(Error::Contract(format!(
                    "checkpoint already holds parameter `{name}`"
                )));
            }
            self.params.insert(name.to_string(), t.clone());
        }
        Ok(())
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name)
    }

    /// Subset of parameters whose names start with `prefix`, names kept.
    pub fn params_with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor<f32>> {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Copy checkpoint values into a parameter set. The name sets must
    /// match exactly and every shape must agree; trainable flags on the
    /// target are preserved.
    pub fn apply_exact(&self, set: &mut ParamSet<f32>) -> Result<()> {
        for name in self.params.keys() {
            if !set.contains(name) {
                return Err(Error::CheckpointUnknownParam(name.clone()));
            }
        }
        let missing: Vec<String> = set
            .names()
            .filter(|n| !self.params.contains_key(*n))
            .map(|s| s.to_string())
            .collect();
        if let Some(name) = missing.first() {
            return Err(Error::Data(format!(
                "checkpoint missing parameter `{name}` required by the model"
            )));
        }
        for (name, src) in &self.params {
            let dst = set.get_mut(name)?;
            if dst.shape() != src.shape() {
                return Err(Error::CheckpointShape {
                    name: name.clone(),
                    file: src.shape().to_vec(),
                    model: dst.shape().to_vec(),
                });
            }
            let trainable = dst.trainable();
            *dst = src.clone().with_trainable(trainable);
        }
        Ok(())
    }

    /// Rebuild a full parameter set from the stored tensors.
    pub fn to_param_set(&self) -> ParamSet<f32> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = self.metadata.render();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode();
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::CheckpointMagic(format!(
                "expected {:?}, found {:?}",
                MAGIC, magic
            )));
        }
        let version = cur.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion(version));
        }
        let meta_len = cur.u32("metadata length")? as usize;
        let meta_bytes = cur.take(meta_len, "metadata block")?;
        let meta_text = std::str::from_utf8(meta_bytes)
            .map_err(|_| Error::Data("checkpoint metadata is not UTF-8".into()))?;
        let metadata = KvDoc::parse(meta_text)?;

        let mut params = BTreeMap::new();
        while !cur.done() {
            let name_len = cur.u32("parameter name length")? as usize;
            let name = std::str::from_utf8(cur.take(name_len, "parameter name")?)
                .map_err(|_| Error::Data("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = cur.u32(&format!("rank of `{name}`"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32(&format!("dims of `{name}`"))? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = cur.take(n * 4, &format!("values of `{name}`"))?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data)?;
            if params.insert(name.clone(), t).is_some() {
                return Err(Error::Data(format!(
                    "checkpoint holds parameter `{name}` twice"
                )));
            }
        }
        Ok(Checkpoint { metadata, params })
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::decode(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointTruncated(format!(
                "file ends inside {what} (need {n} bytes at offset {})",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
