//! Manifest + blob tensor container shared by checkpoints, pools and datasets.
//!
//! Layout: a UTF-8 manifest of whitespace-separated key/value lines ending in
//! a line `end`, followed by raw little-endian float32 data. Each tensor line
//! records name, dtype, shape, byte offset into the blob, byte length and the
//! SHA-256 of its bytes.
//!
//! ```text
//! invmix-tensors 1
//! meta seed 7
//! tensor layer0.weight f32le 256x256 0 262144 9f86d0...
//! blob 262144
//! end
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &str = "invmix-tensors 1";
const DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, data: impl IntoIterator<Item = f64>) -> Self {
        Self::new(name, shape, data.into_iter().map(|v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

impl TensorFile {
    pub fn push(&mut self, t: NamedTensor) {
        self.tensors.push(t);
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Container(format!("missing meta key `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::Container(format!("meta key `{key}` is not parseable")))
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Container(format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = String::new();
        manifest.push_str(MAGIC);
        manifest.push('\n');
        for (k, v) in &self.meta {
            check_token(k)?;
            if v.contains('\n') {
                return Err(Error::Container(format!("meta value for `{k}` spans lines")));
            }
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        let mut blob = Vec::new();
        for t in &self.tensors {
            check_token(&t.name)?;
            let expected: usize = t.shape.iter().product();
            if expected != t.data.len() {
                return Err(Error::Container(format!(
                    "tensor `{}` has {} values for shape {:?}",
                    t.name,
                    t.data.len(),
                    t.shape
                )));
            }
            let offset = blob.len();
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            let bytes = &blob[offset..];
            manifest.push_str(&format!(
                "tensor {} {DTYPE} {} {offset} {} {}\n",
                t.name,
                format_shape(&t.shape),
                bytes.len(),
                hex::encode(Sha256::digest(bytes))
            ));
        }
        manifest.push_str(&format!("blob {}\nend\n", blob.len()));
        let mut out = manifest.into_bytes();
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Container("manifest is not terminated".into()))?;
            let line = std::str::from_utf8(&rest[..nl])
                .map_err(|_| Error::Container("manifest is not UTF-8".into()))?;
            pos += nl + 1;
            if line == "end" {
                break;
            }
            lines.push(line.to_string());
        }
        let blob = &bytes[pos..];
        if lines.first().map(String::as_str) != Some(MAGIC) {
            return Err(Error::Container("bad magic line".into()));
        }
        let mut file = TensorFile::default();
        let mut blob_len = None;
        for line in &lines[1..] {
            let mut parts = line.splitn(3, ' ');
            match parts.next() {
                Some("meta") => {
                    let k = parts.next().ok_or_else(|| bad_line(line))?;
                    file.meta.insert(k.to_string(), parts.next().unwrap_or("").to_string());
                }
                Some("blob") => {
                    blob_len = Some(parse_usize(parts.next(), line)?);
                }
                Some("tensor") => {
                    let fields: Vec<&str> = line.split(' ').collect();
                    if fields.len() != 7 {
                        return Err(bad_line(line));
                    }
                    let (name, dtype) = (fields[1], fields[2]);
                    if dtype != DTYPE {
                        return Err(Error::Container(format!("unknown dtype `{dtype}` for `{name}`")));
                    }
                    let shape = parse_shape(fields[3]).ok_or_else(|| bad_line(line))?;
                    let offset = parse_usize(Some(fields[4]), line)?;
                    let len = parse_usize(Some(fields[5]), line)?;
                    let count: usize = shape.iter().product();
                    if len != count * 4 {
                        return Err(Error::Container(format!("length of `{name}` disagrees with its shape")));
                    }
                    let end = offset
                        .checked_add(len)
                        .filter(|&e| e <= blob.len())
                        .ok_or_else(|| Error::Container(format!("truncated blob while reading `{name}`")))?;
                    let bytes = &blob[offset..end];
                    if hex::encode(Sha256::digest(bytes)) != fields[6] {
                        return Err(Error::HashMismatch { name: name.to_string() });
                    }
                    let data = bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    file.tensors.push(NamedTensor::new(name, shape, data));
                }
                _ => return Err(bad_line(line)),
            }
        }
        match blob_len {
            Some(n) if n == blob.len() => Ok(file),
            Some(n) if n > blob.len() => Err(Error::Container(format!(
                "truncated blob: {} of {n} bytes",
                blob.len()
            ))),
            Some(n) => Err(Error::Container(format!(
                "trailing bytes after blob of {n} bytes"
            ))),
            None => Err(Error::Container("manifest lacks blob length".into())),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn check_token(s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        Err(Error::Container(format!("`{s}` is not a valid manifest token")))
    } else {
        Ok(())
    }
}

fn bad_line(line: &str) -> Error {
    Error::Container(format!("malformed manifest line `{line}`"))
}

fn parse_usize(field: Option<&str>, line: &str) -> Result<usize> {
    field
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| bad_line(line))
}

fn format_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".into()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s == "scalar" {
        return Some(Vec::new());
    }
    s.split('x').map(|d| d.parse().ok()).collect()
}
