//! File formats: key/value documents, delimiter-separated datasets, and the
//! float payload encoding shared by checkpoints.
//!
//! Floats are written with Rust's shortest round-trip formatting, so
//! write → read → write is byte-identical. Parameter payloads are base64 of
//! little-endian f64 bytes, which reloads bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;

use crate::error::{Error, Result};

/// An ordered key/value document with a first-line magic marker.
#[derive(Debug, Clone, PartialEq)]
pub struct KvDoc {
    magic: String,
    pairs: Vec<(String, String)>,
}

impl KvDoc {
    pub fn new(magic: &str) -> Self {
        Self {
            magic: magic.to_string(),
            pairs: Vec::new(),
        }
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.pairs.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn req(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Format(format!("missing key `{key}`")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.req(key)?
            .parse()
            .map_err(|_| Error::Format(format!("unparsable value for `{key}`")))
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.magic);
        for (k, v) in &self.pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn parse_str(s: &str, expected_magic: &str) -> Result<Self> {
        let mut lines = s.lines();
        let magic = lines
            .next()
            .ok_or_else(|| Error::Format("empty document".into()))?;
        if magic.trim() != expected_magic {
            return Err(Error::Format(format!(
                "expected `{expected_magic}` document, found `{}`",
                magic.trim()
            )));
        }
        let mut doc = Self::new(expected_magic);
        for (i, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected `key = value`", i + 2)))?;
            doc.pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(doc)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }

    pub fn read(path: &Path, expected_magic: &str) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse_str(&s, expected_magic)
    }
}

pub fn floats_to_base64(v: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(v.len() * 8);
    for x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn base64_to_floats(s: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(s.trim())
        .map_err(|e| Error::Format(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format("payload length not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// A delimiter-separated dataset: `d` embedding columns then `k` raw
/// attribute columns, with a header row declaring the dimensions by
/// column naming (`emb_0..emb_{d-1},attr_0..attr_{k-1}`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d: usize,
    pub k: usize,
    pub embeddings: Vec<Vec<f64>>,
    pub attributes: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(d: usize, k: usize) -> Self {
        Self {
            d,
            k,
            embeddings: Vec::new(),
            attributes: Vec::new(),
        }
    }

    pub fn push(&mut self, emb: Vec<f64>, attr: Vec<f64>) {
        debug_assert_eq!(emb.len(), self.d);
        debug_assert_eq!(attr.len(), self.k);
        self.embeddings.push(emb);
        self.attributes.push(attr);
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let mut cols = Vec::with_capacity(self.d + self.k);
        for i in 0..self.d {
            cols.push(format!("emb_{i}"));
        }
        for j in 0..self.k {
            cols.push(format!("attr_{j}"));
        }
        let _ = writeln!(out, "{}", cols.join(","));
        for (e, a) in self.embeddings.iter().zip(&self.attributes) {
            let row: Vec<String> = e.iter().chain(a).map(|x| x.to_string()).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn from_csv_str(s: &str) -> Result<Self> {
        let mut lines = s.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty dataset file".into()))?;
        let mut d = 0usize;
        let mut k = 0usize;
        for col in header.split(',') {
            let col = col.trim();
            if col.starts_with("emb_") {
                d += 1;
            } else if col.starts_with("attr_") {
                k += 1;
            } else {
                return Err(Error::Format(format!(
                    "unexpected column `{col}` (want emb_*/attr_*)"
                )));
            }
        }
        if d == 0 {
            return Err(Error::Format("dataset has no embedding columns".into()));
        }
        let mut ds = Self::new(d, k);
        for (i, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|tok| {
                    tok.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Format(format!("row {}: bad number `{tok}`", i + 2)))
                })
                .collect::<Result<_>>()?;
            if vals.len() != d + k {
                return Err(Error::Format(format!(
                    "row {}: expected {} columns, got {}",
                    i + 2,
                    d + k,
                    vals.len()
                )));
            }
            ds.embeddings.push(vals[..d].to_vec());
            ds.attributes.push(vals[d..].to_vec());
        }
        Ok(ds)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_csv_str(&s)
    }
}
