//! A named-tensor container with a `key=value` header, used for model
//! checkpoints. Each entry embeds a complete VTEN record.
//!
//! Layout, little-endian: magic `VCKP`, version `u32 = 1`, header length
//! `u32` and that many UTF-8 bytes of `key=value` lines, entry count `u32`,
//! then per entry a name length `u32`, the UTF-8 name and a VTEN record.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::vten::{self, Cursor};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub header: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.header.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("checkpoint header has no '{key}'")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| Error::Config(format!("checkpoint header '{key}={raw}' is malformed")))
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Config(format!("checkpoint has no tensor '{name}'")))
    }

    /// Store every parameter value under `prefix + name`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (_, p) in store.iter() {
            self.push(format!("{prefix}{}", p.name), (*p.value).clone());
        }
    }

    /// Overwrite every parameter of `store` from `prefix + name`; shapes
    /// must match.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", store.get(id).name);
            let t = self.tensor(&name)?;
            if t.shape() != store.value(id).shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor '{name}' has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            store.set_value(id, t.clone())?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header: String = self.header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&vten::encode(t));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(bytes, 0);
        if c.take(4, "magic")? != MAGIC {
            return Err(c.err(0, "bad magic: expected \"VCKP\""));
        }
        let at = c.pos;
        let version = c.u32("version")?;
        if version != VERSION {
            return Err(c.err(at, format!("unsupported checkpoint version {version}")));
        }
        let len = c.u32("header length")? as usize;
        let at = c.pos;
        let text = std::str::from_utf8(c.take(len, "header")?).map_err(|_| c.err(at, "header is not UTF-8"))?;
        let mut header = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| c.err(at, format!("header line '{line}' lacks '='")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count = c.u32("entry count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = c.u32("name length")? as usize;
            let at = c.pos;
            let name = std::str::from_utf8(c.take(n, "name")?).map_err(|_| c.err(at, "tensor name is not UTF-8"))?;
            let t = vten::decode_at(&mut c)?;
            tensors.push((name.to_string(), t));
        }
        if c.pos != bytes.len() {
            return Err(c.err(c.pos, "trailing bytes after last entry"));
        }
        Ok(Self { header, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_lookup() {
        let mut ck = Checkpoint::new();
        ck.set("kind", "diffusion");
        ck.set("step", 12);
        ck.push("a.weight", Tensor::from_vec(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
        ck.push("b", Tensor::scalar(7.0));
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.parse::<usize>("step").unwrap(), 12);
        assert!(back.tensor("missing").is_err());
        let bytes = ck.encode();
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
    }
}
