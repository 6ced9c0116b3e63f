//! `EMB1` embedding files.
//!
//! Layout: `b"EMB1"`, little-endian `u32` count, `u32` dim, then
//! `count * dim` little-endian `f32` values, row-major. Row ids live in a
//! companion text file (`<path>.ids`), one id per line.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::scalar::Scalar;

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    dim: usize,
    rows: Vec<f32>,
    index: HashMap<String, usize>,
}

/// Path of the id list that accompanies an embedding file.
pub fn ids_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

/// Writes one `EMB1` block (header and data) to `w`.
pub fn write_block<W: Write>(w: &mut W, count: usize, dim: usize, data: &[f32]) -> Result<()> {
    assert_eq!(data.len(), count * dim);
    w.write_all(EMB_MAGIC)?;
    w.write_all(&(count as u32).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads one `EMB1` block; short reads and bad magic are `CorruptFile`.
pub fn read_block<R: Read>(r: &mut R) -> Result<(usize, usize, Vec<f32>)> {
    let corrupt = |e: std::io::Error| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::CorruptFile("truncated tensor block".into()),
        _ => Error::Io(e),
    };
    let mut head = [0u8; 12];
    r.read_exact(&mut head).map_err(corrupt)?;
    if &head[..4] != EMB_MAGIC {
        return Err(Error::CorruptFile("bad EMB1 magic".into()));
    }
    let count = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let n = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::CorruptFile("tensor block size overflows".into()))?;
    let mut bytes = vec![0u8; n];
    r.read_exact(&mut bytes).map_err(corrupt)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((count, dim, data))
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, dim: usize, rows: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("embedding dim must be positive".into()));
        }
        if rows.len() != ids.len() * dim {
            return Err(Error::Shape(format!(
                "{} ids with dim {dim} need {} values, got {}",
                ids.len(),
                ids.len() * dim,
                rows.len()
            )));
        }
        if rows.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(Self { ids, dim, rows, index })
    }

    pub fn from_rows<T: Scalar>(entries: Vec<(String, Vec<T>)>) -> Result<Self> {
        let dim = entries.first().map(|e| e.1.len()).unwrap_or(0);
        let mut ids = Vec::with_capacity(entries.len());
        let mut rows = Vec::with_capacity(entries.len() * dim);
        for (id, v) in entries {
            if v.len() != dim {
                return Err(Error::DimMismatch { expected: dim, got: v.len() });
            }
            ids.push(id);
            rows.extend(v.into_iter().map(Scalar::to_f32_lossy));
        }
        Self::new(ids, dim, rows)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        let (count, dim, data) = read_block(&mut bytes.as_slice())?;
        if bytes.len() != 12 + count * dim * 4 {
            return Err(Error::CorruptFile(format!("{}: trailing bytes after data", path.display())));
        }
        let ids_text = std::fs::read_to_string(ids_path(path))?;
        let ids: Vec<String> = ids_text.lines().map(str::to_string).collect();
        if ids.len() != count {
            return Err(Error::CorruptFile(format!(
                "{}: header says {count} rows but id file lists {}",
                path.display(),
                ids.len()
            )));
        }
        Self::new(ids, dim, data)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(12 + self.rows.len() * 4);
        write_block(&mut buf, self.ids.len(), self.dim, &self.rows)?;
        std::fs::write(path, buf)?;
        let mut ids = self.ids.join("\n");
        ids.push('\n');
        std::fs::write(ids_path(path), ids)?;
        Ok(())
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn vector<T: Scalar>(&self, id: &str) -> Result<Vec<T>> {
        self.get(id)
            .map(|r| r.iter().map(|&x| T::of(x as f64)).collect())
            .ok_or_else(|| Error::MissingEmbedding(id.to_string()))
    }

    /// Gathers the named rows, in order, into a matrix.
    pub fn tensor_for<T: Scalar, S: AsRef<str>>(&self, ids: &[S]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            let id = id.as_ref();
            let row = self.get(id).ok_or_else(|| Error::MissingEmbedding(id.to_string()))?;
            data.extend(row.iter().map(|&x| T::of(x as f64)));
        }
        Tensor::matrix(ids.len(), self.dim, data)
    }
}
