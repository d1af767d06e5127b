//! Model files: a plain-text manifest at the given path and a
//! little-endian `f32` parameter blob next to it (`<path>.bin`).
//!
//! ```text
//! gfcnn-model 1
//! arch C(16)-P(2)-G(10)-F(100)*
//! input 50 20
//! classes 20
//! seed 7
//! precision f32
//! dropout 0.5
//! init he-uniform
//! blob model.gfm.bin
//! blob-bytes 1435560
//! blob-crc32 1a2b3c4d
//! tensor conv1.weight 16,1,3,3 0
//! ...
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::model::{ArchSpec, Model};
use crate::layers::Mode;
use crate::tensor::serial::{self, IndexEntry};
use crate::{Error, Real, Result};

pub const MODEL_MAGIC: &str = "gfcnn-model 1";

fn blob_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".bin");
    PathBuf::from(name)
}

pub fn save_model<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let names = model.network().param_names();
    let (blob, index) = serial::pack(names.iter().map(String::as_str).zip(model.params()));
    let blob_file = blob_path(path);
    let arch = model.arch();

    let mut text = String::new();
    text.push_str(MODEL_MAGIC);
    text.push('\n');
    let blob_name = blob_file
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::invalid(format!("bad model path {}", path.display())))?;
    for (key, value) in [
        ("arch", arch.arch_string()),
        ("input", format!("{} {}", arch.input.0, arch.input.1)),
        ("classes", arch.classes.to_string()),
        ("seed", model.seed().to_string()),
        ("precision", T::NAME.to_string()),
        ("dropout", model.dropout_rate().to_string()),
        ("init", "he-uniform".to_string()),
        ("blob", blob_name.to_string()),
        ("blob-bytes", blob.len().to_string()),
        ("blob-crc32", format!("{:08x}", crc32fast::hash(&blob))),
    ] {
        text.push_str(&format!("{key} {value}\n"));
    }
    for entry in &index {
        text.push_str(&entry.to_line());
        text.push('\n');
    }
    fs::write(&blob_file, &blob)?;
    fs::write(path, text)?;
    Ok(())
}

/// Loads a model saved by [`save_model`], at precision `T`, in eval mode.
pub fn load_model<T: Real>(path: &Path) -> Result<Model<T>> {
    let text = fs::read_to_string(path)?;
    let bad = |reason: String| Error::format("model manifest", format!("{}: {reason}", path.display()));
    let mut lines = text.lines();
    if lines.next() != Some(MODEL_MAGIC) {
        return Err(bad(format!("missing {MODEL_MAGIC:?} header")));
    }

    let mut fields = std::collections::HashMap::new();
    let mut index = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let (key, rest) = line.split_once(' ').ok_or_else(|| bad(format!("bad line {line:?}")))?;
        if key == "tensor" {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            index.push(IndexEntry::parse_fields(&parts)?);
        } else {
            fields.insert(key.to_string(), rest.trim().to_string());
        }
    }
    let get = |k: &str| fields.get(k).ok_or_else(|| bad(format!("missing {k:?}")));
    let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| bad(format!("{k} is not an integer"))) };

    let input: Vec<usize> = get("input")?
        .split_whitespace()
        .map(|d| d.parse().map_err(|_| bad("input must be two integers".into())))
        .collect::<Result<_>>()?;
    let [rows, cols] = input[..] else {
        return Err(bad("input must be two integers".into()));
    };
    let arch = ArchSpec::parse(get("arch")?, (rows, cols), num("classes")? as usize)?;
    let dropout: f64 = get("dropout")?.parse().map_err(|_| bad("dropout is not a number".into()))?;

    let blob_file = path.with_file_name(get("blob")?);
    let blob = fs::read(&blob_file)?;
    if blob.len() as u64 != num("blob-bytes")? {
        return Err(Error::format(
            "model blob",
            format!("{} has {} bytes, manifest says {}", blob_file.display(), blob.len(), get("blob-bytes")?),
        ));
    }
    let crc = format!("{:08x}", crc32fast::hash(&blob));
    if &crc != get("blob-crc32")? {
        return Err(Error::format("model blob", format!("checksum {crc} does not match manifest")));
    }

    let names = {
        let probe = super::model::Network::compile(&arch)?;
        probe.param_names().to_vec()
    };
    if index.len() != names.len() {
        return Err(bad(format!("{} tensors indexed, architecture needs {}", index.len(), names.len())));
    }
    let mut params = Vec::with_capacity(index.len());
    let mut expected_offset = 0;
    for (entry, name) in index.iter().zip(&names) {
        if &entry.name != name || entry.offset != expected_offset {
            return Err(bad(format!("tensor {} at offset {} does not match layout", entry.name, entry.offset)));
        }
        expected_offset += entry.byte_len();
        params.push(serial::unpack::<T>(&blob, entry)?);
    }
    if expected_offset != blob.len() {
        return Err(bad("blob has trailing bytes".into()));
    }
    let mut model = Model::from_params(&arch, params, num("seed")?)?;
    model.set_dropout_rate(dropout)?;
    model.set_mode(Mode::Eval);
    Ok(model)
}
