//! Binary embedding files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! u32 class_id
//! u32 rows      (K sub-descriptions, or N regions)
//! u32 dim       (D)
//! f64 × rows·dim, row-major
//! ```
//!
//! A sub-description file `foo.emb` may have a sidecar `foo.txt` listing the
//! `K` sub-description strings, one per line, in row order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::textfusion::SubDescriptionSet;

const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub class_id: u32,
    pub matrix: Matrix,
}

pub fn encode(class_id: u32, m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.as_slice().len());
    out.extend_from_slice(&class_id.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<EmbeddingFile> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::validation(format!(
            "embedding file is {} bytes, shorter than its {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let (class_id, rows, dim) = (word(0), word(1) as usize, word(2) as usize);
    let body = &bytes[HEADER_LEN..];
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::validation("embedding header dimensions overflow"))?;
    if body.len() != expected {
        return Err(Error::validation(format!(
            "embedding header declares {rows}x{dim} values ({expected} bytes) but body has {} bytes",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(EmbeddingFile {
        class_id,
        matrix: Matrix::new(rows, dim, data)?,
    })
}

pub fn read(path: &Path) -> Result<EmbeddingFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Validation(m) => Error::validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write(path: &Path, class_id: u32, m: &Matrix) -> Result<()> {
    crate::dataset::write_atomic(path, &encode(class_id, m))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("txt")
}

/// Loads a sub-description set, picking up the sidecar labels when present.
pub fn read_sub_descriptions(path: &Path) -> Result<SubDescriptionSet> {
    let file = read(path)?;
    let side = sidecar_path(path);
    let labels = if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        text.lines().map(str::to_owned).collect()
    } else {
        Vec::new()
    };
    SubDescriptionSet::new(file.class_id, labels, file.matrix)
}

pub fn write_sub_descriptions(path: &Path, set: &SubDescriptionSet) -> Result<()> {
    write(path, set.class_id, set.embeddings())?;
    if !set.labels.is_empty() {
        let mut text = Vec::new();
        for l in &set.labels {
            writeln!(text, "{l}").expect("writing to a Vec cannot fail");
        }
        crate::dataset::write_atomic(&sidecar_path(path), &text)?;
    }
    Ok(())
}
