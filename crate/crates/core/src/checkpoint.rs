//! Text checkpoints: a kind/version line, `key value...` header lines,
//! then named tensors. Floats are written in shortest round-trip form so
//! a load reproduces every bit.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub header: Vec<(String, Vec<String>)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn cerr(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            header: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, values: Vec<String>) {
        self.header.push((key.to_string(), values));
    }

    pub fn push_tensor(&mut self, name: &str, t: Tensor) {
        self.tensors.push((name.to_string(), t));
    }

    pub fn values(&self, key: &str) -> Result<&[String]> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| cerr(format!("{} checkpoint has no {key} entry", self.kind)))
    }

    pub fn value(&self, key: &str) -> Result<&str> {
        match self.values(key)? {
            [v] => Ok(v),
            other => Err(cerr(format!("{key} expects one value, found {}", other.len()))),
        }
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.value(key)?;
        v.parse().map_err(|_| cerr(format!("cannot parse {key} from {v:?}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| cerr(format!("{} checkpoint has no tensor {name}", self.kind)))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} v{VERSION}\n", self.kind);
        for (k, vs) in &self.header {
            out.push_str(k);
            for v in vs {
                out.push('\t');
                out.push_str(v);
            }
            out.push('\n');
        }
        for (name, t) in &self.tensors {
            write_tensor(&mut out, name, t);
        }
        out
    }

    pub fn from_text(text: &str, kind: &str) -> Result<Checkpoint> {
        let mut lines = text.lines().enumerate().peekable();
        let (_, first) = lines.next().ok_or_else(|| cerr("empty checkpoint"))?;
        let want = format!("{kind} v{VERSION}");
        if first.trim() != want {
            return Err(cerr(format!("expected header {want:?}, found {:?}", first.trim())));
        }
        let mut ck = Checkpoint::new(kind);
        while let Some((no, line)) = lines.next() {
            let mut fields = line.split('\t');
            let key = fields.next().unwrap_or_default();
            if key.is_empty() {
                continue;
            }
            if key != "tensor" {
                ck.set(key, fields.map(str::to_string).collect());
                continue;
            }
            let parts: Vec<&str> = fields.collect();
            let [name, rows, cols] = parts[..] else {
                return Err(cerr(format!("line {}: malformed tensor header", no + 1)));
            };
            let rows: usize = rows
                .parse()
                .map_err(|_| cerr(format!("line {}: bad row count", no + 1)))?;
            let cols: usize = cols
                .parse()
                .map_err(|_| cerr(format!("line {}: bad column count", no + 1)))?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (no, row) = lines.next().ok_or_else(|| cerr(format!("tensor {name} truncated")))?;
                let before = data.len();
                for v in row.split('\t').filter(|s| !s.is_empty()) {
                    let x: f64 = v
                        .parse()
                        .map_err(|_| cerr(format!("line {}: bad value {v:?}", no + 1)))?;
                    data.push(x);
                }
                if data.len() - before != cols {
                    return Err(cerr(format!("line {}: tensor {name} row has wrong length", no + 1)));
                }
            }
            let t = Tensor::from_vec(rows, cols, data).map_err(|e| cerr(e.to_string()))?;
            if !t.is_finite() {
                return Err(cerr(format!("tensor {name} holds non-finite values")));
            }
            ck.push_tensor(name, t);
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path, kind: &str) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| cerr(format!("cannot read {}: {e}", path.display())))?;
        Checkpoint::from_text(&text, kind)
    }
}

fn write_tensor(out: &mut String, name: &str, t: &Tensor) {
    writeln!(out, "tensor\t{name}\t{}\t{}", t.rows(), t.cols()).unwrap();
    for r in 0..t.rows() {
        for (c, v) in t.row(r).iter().enumerate() {
            if c > 0 {
                out.push('\t');
            }
            write!(out, "{v:e}").unwrap();
        }
        out.push('\n');
    }
}

/// SHA-256 over names, shapes, and the exact bit patterns of every value.
pub fn tensors_hash<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.rows() as u64).to_le_bytes());
        h.update((t.cols() as u64).to_le_bytes());
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
