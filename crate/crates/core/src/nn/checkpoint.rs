//! Checkpoint container: a text manifest followed by raw little-endian arrays.
//!
//! ```text
//! evtrack-checkpoint 1
//! config_hash <hex>
//! meta <key> <value>
//! tensor <name> <group> <f32|f64> <d0>x<d1>... <byte offset> <byte length>
//! end
//! <payload>
//! ```
//!
//! Offsets are relative to the first payload byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::param::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{cast, Real};

const MAGIC: &str = "evtrack-checkpoint";
const VERSION: u32 = 1;
const MAX_HEADER: usize = 16 << 20;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub group: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl TensorEntry {
    fn elem_size(dtype: &str) -> Option<usize> {
        match dtype {
            "f32" => Some(4),
            "f64" => Some(8),
            _ => None,
        }
    }

    pub fn values<T: Real>(&self) -> Vec<T> {
        match self.dtype.as_str() {
            "f32" => self
                .bytes
                .chunks_exact(4)
                .map(|c| cast::<T>(f32::read_le(c) as f64))
                .collect(),
            _ => self
                .bytes
                .chunks_exact(8)
                .map(|c| cast::<T>(f64::read_le(c)))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn check_token(s: &str, what: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace()) {
        return Err(bad(format!("{what} `{s}` must be a non-empty token without whitespace")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(config_hash: &str) -> Self {
        Checkpoint {
            config_hash: config_hash.to_string(),
            ..Default::default()
        }
    }

    pub fn add<T: Real>(&mut self, name: &str, group: &str, shape: &[usize], data: &[T]) {
        let mut bytes = Vec::with_capacity(data.len() * T::BYTES);
        for &v in data {
            v.write_le(&mut bytes);
        }
        self.tensors.push(TensorEntry {
            name: name.to_string(),
            group: group.to_string(),
            dtype: T::DTYPE.to_string(),
            shape: shape.to_vec(),
            bytes,
        });
    }

    pub fn add_store<T: Real>(&mut self, store: &ParamStore<T>) {
        for (_, p) in store.iter() {
            self.add(&p.name, &p.group, &p.shape, &p.data);
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        check_token(&self.config_hash, "config hash")?;
        let mut head = format!("{MAGIC} {VERSION}\nconfig_hash {}\n", self.config_hash);
        for (k, v) in &self.meta {
            check_token(k, "meta key")?;
            check_token(v, "meta value")?;
            let _ = writeln!(head, "meta {k} {v}");
        }
        let mut offset = 0usize;
        for t in &self.tensors {
            check_token(&t.name, "tensor name")?;
            check_token(&t.group, "tensor group")?;
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            let dims = if dims.is_empty() { "scalar".to_string() } else { dims.join("x") };
            let _ = writeln!(
                head,
                "tensor {} {} {} {} {} {}",
                t.name,
                t.group,
                t.dtype,
                dims,
                offset,
                t.bytes.len()
            );
            offset += t.bytes.len();
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for t in &self.tensors {
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }

    /// Parses and structurally validates a checkpoint image.
    pub fn parse(bytes: &[u8]) -> Result<Checkpoint> {
        let search = &bytes[..bytes.len().min(MAX_HEADER)];
        let end_pos = find_subslice(search, b"\nend\n").ok_or_else(|| bad("manifest terminator not found"))?;
        let header = std::str::from_utf8(&bytes[..end_pos]).map_err(|_| bad("manifest is not UTF-8"))?;
        let payload = &bytes[end_pos + 5..];
        let mut lines = header.lines();
        let first = lines.next().ok_or_else(|| bad("empty manifest"))?;
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad("not a checkpoint file"))?;
        if version != VERSION.to_string() {
            return Err(bad(format!("unsupported version `{version}`")));
        }
        let mut ck = Checkpoint::default();
        let mut seen_hash = false;
        let mut expected_offset = 0usize;
        for line in lines {
            let parts: Vec<&str> = line.split(' ').collect();
            match parts.as_slice() {
                ["config_hash", h] => {
                    ck.config_hash = h.to_string();
                    seen_hash = true;
                }
                ["meta", k, v] => {
                    ck.meta.insert(k.to_string(), v.to_string());
                }
                ["tensor", name, group, dtype, dims, off, len] => {
                    let elem = TensorEntry::elem_size(dtype).ok_or_else(|| bad(format!("unknown dtype `{dtype}`")))?;
                    let shape: Vec<usize> = if *dims == "scalar" {
                        Vec::new()
                    } else {
                        dims.split('x')
                            .map(|d| d.parse::<usize>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| bad(format!("bad shape `{dims}`")))?
                    };
                    let off: usize = off.parse().map_err(|_| bad(format!("bad offset `{off}`")))?;
                    let len: usize = len.parse().map_err(|_| bad(format!("bad length `{len}`")))?;
                    let count = shape
                        .iter()
                        .try_fold(1usize, |a, &d| a.checked_mul(d))
                        .and_then(|c| c.checked_mul(elem))
                        .ok_or_else(|| bad("shape overflows"))?;
                    if count != len {
                        return Err(bad(format!("tensor `{name}`: {len} bytes for shape {dims}")));
                    }
                    if off != expected_offset {
                        return Err(bad(format!("tensor `{name}`: non-contiguous offset {off}")));
                    }
                    let end = off.checked_add(len).ok_or_else(|| bad("offset overflows"))?;
                    if end > payload.len() {
                        return Err(bad(format!("tensor `{name}` extends past end of file")));
                    }
                    expected_offset = end;
                    ck.tensors.push(TensorEntry {
                        name: name.to_string(),
                        group: group.to_string(),
                        dtype: dtype.to_string(),
                        shape,
                        bytes: payload[off..end].to_vec(),
                    });
                }
                _ => return Err(bad(format!("unrecognized manifest line `{line}`"))),
            }
        }
        if !seen_hash {
            return Err(bad("missing config_hash"));
        }
        if expected_offset != payload.len() {
            return Err(bad("trailing bytes after last tensor"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::parse(&fs::read(path)?)
    }

    /// Copies every parameter of `store` from this checkpoint after checking
    /// the config hash and each shape.
    pub fn restore_store<T: Real>(&self, store: &mut ParamStore<T>, expected_hash: &str) -> Result<()> {
        if self.config_hash != expected_hash {
            return Err(bad(format!(
                "config hash mismatch: checkpoint {} vs current {}",
                self.config_hash, expected_hash
            )));
        }
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = store.param(id);
            let t = self
                .tensor(&p.name)
                .ok_or_else(|| bad(format!("missing parameter `{}`", p.name)))?;
            if t.shape != p.shape {
                return Err(bad(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name, t.shape, p.shape
                )));
            }
            let vals = t.values::<T>();
            store.get_mut(id).copy_from_slice(&vals);
        }
        Ok(())
    }
}

fn find_subslice(h: &[u8], needle: &[u8]) -> Option<usize> {
    h.windows(needle.len()).position(|w| w == needle)
}

/// Short stable digest of a configuration string.
pub fn config_hash(canonical: &str) -> String {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(canonical.as_bytes());
    super::param::hex_string(&d[..8])
}
