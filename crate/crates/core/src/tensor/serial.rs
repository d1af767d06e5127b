//! Named tensors packed into one little-endian `f32` blob, indexed by
//! plain-text lines of the form `tensor <name> <d0,d1,...> <byte-offset>`.

use super::Tensor;
use crate::{Error, Real, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl IndexEntry {
    pub fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * 4
    }

    pub fn to_line(&self) -> String {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        format!("tensor {} {} {}", self.name, dims.join(","), self.offset)
    }

    /// Parses the fields after the leading `tensor` keyword.
    pub fn parse_fields(fields: &[&str]) -> Result<Self> {
        let [name, dims, offset] = fields else {
            return Err(Error::format("tensor index", format!("expected 3 fields, got {fields:?}")));
        };
        let shape = dims
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format("tensor index", format!("shape {dims:?}: {e}")))?;
        let offset = offset
            .parse()
            .map_err(|e| Error::format("tensor index", format!("offset {offset:?}: {e}")))?;
        Ok(IndexEntry {
            name: name.to_string(),
            shape,
            offset,
        })
    }
}

pub fn pack<'a, T: Real>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> (Vec<u8>, Vec<IndexEntry>) {
    let mut blob = Vec::new();
    let mut index = Vec::new();
    for (name, t) in tensors {
        index.push(IndexEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for &x in t.data() {
            blob.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    (blob, index)
}

pub fn unpack<T: Real>(blob: &[u8], entry: &IndexEntry) -> Result<Tensor<T>> {
    let end = entry.offset + entry.byte_len();
    let bytes = blob.get(entry.offset..end).ok_or_else(|| {
        Error::format(
            "tensor blob",
            format!("{} needs bytes {}..{end}, blob has {}", entry.name, entry.offset, blob.len()),
        )
    })?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(entry.shape.clone(), data)
}
