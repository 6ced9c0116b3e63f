//! `MTCK` checkpoint files.
//!
//! Layout: `b"MTCK"`, `u32` version, `u32` tensor count, then per tensor a
//! `u32` name length, the UTF-8 name and one `EMB1` block (rows as count,
//! columns as dim). After the tensors: a `u32`-length-prefixed config text
//! and the `u64` optimizer step counter. All integers little-endian.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use crate::config::TrainConfig;
use crate::data::embedding::{read_block, write_block};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::MassTool;
use crate::numeric::{ParamSet, Tensor};
use crate::scalar::Scalar;
use crate::trainer::SplitQueries;

pub const CKPT_MAGIC: &[u8; 4] = b"MTCK";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet<f32>,
    pub config: TrainConfig,
    pub steps: u64,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Shape(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn take<const N: usize>(r: &mut Cursor<&[u8]>) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|_| Error::CorruptFile("truncated checkpoint".into()))?;
    Ok(b)
}

fn take_u32(r: &mut Cursor<&[u8]>) -> Result<usize> {
    Ok(u32::from_le_bytes(take::<4>(r)?) as usize)
}

fn take_bytes(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<u8>> {
    let left = r.get_ref().len() - r.position() as usize;
    if n > left {
        return Err(Error::CorruptFile("truncated checkpoint".into()));
    }
    let mut v = vec![0u8; n];
    r.read_exact(&mut v)?;
    Ok(v)
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &MassTool<T>) -> Self {
        let mut params = ParamSet::new();
        for (name, t) in model.params().iter() {
            params.insert(name.clone(), t.cast::<f32>());
        }
        Self { params, config: model.config().clone(), steps: model.steps() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        put_u32(&mut buf, self.params.len())?;
        for (name, t) in self.params.iter() {
            put_u32(&mut buf, name.len())?;
            buf.extend_from_slice(name.as_bytes());
            write_block(&mut buf, t.rows(), t.cols(), t.data())?;
        }
        let text = self.config.to_text();
        put_u32(&mut buf, text.len())?;
        buf.extend_from_slice(text.as_bytes());
        buf.extend_from_slice(&self.steps.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        if &take::<4>(&mut r)? != CKPT_MAGIC {
            return Err(Error::CorruptFile("bad MTCK magic".into()));
        }
        let version = u32::from_le_bytes(take::<4>(&mut r)?);
        if version != CKPT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: CKPT_VERSION });
        }
        let count = take_u32(&mut r)?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let len = take_u32(&mut r)?;
            let name = String::from_utf8(take_bytes(&mut r, len)?)
                .map_err(|_| Error::CorruptFile("parameter name is not UTF-8".into()))?;
            let (rows, cols, data) = read_block(&mut r)?;
            let t = Tensor::matrix(rows, cols, data).map_err(|_| Error::CorruptFile(format!("bad shape for `{name}`")))?;
            if params.contains(&name) {
                return Err(Error::CorruptFile(format!("duplicate parameter `{name}`")));
            }
            params.insert(name, t);
        }
        let len = take_u32(&mut r)?;
        let text = String::from_utf8(take_bytes(&mut r, len)?)
            .map_err(|_| Error::CorruptFile("config snapshot is not UTF-8".into()))?;
        let config = TrainConfig::parse(&text)?;
        let steps = u64::from_le_bytes(take::<8>(&mut r)?);
        if (r.position() as usize) != bytes.len() {
            return Err(Error::CorruptFile("trailing bytes after checkpoint".into()));
        }
        Ok(Self { params, config, steps })
    }

    /// Writes atomically: a temporary sibling file is renamed into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds the model over `dataset`. When `expected` is given, its
    /// architecture settings must match the snapshot.
    pub fn into_model<T: Scalar>(self, dataset: &Dataset, expected: Option<&TrainConfig>) -> Result<MassTool<T>> {
        if let Some(e) = expected {
            if e.architecture() != self.config.architecture() {
                return Err(Error::Config(format!(
                    "checkpoint architecture `{}` does not match `{}`",
                    self.config.architecture(),
                    e.architecture()
                )));
            }
        }
        let split = SplitQueries::new(&dataset.corpus, self.config.seed)?;
        let mut params = ParamSet::new();
        for (name, t) in self.params.iter() {
            params.insert(name.clone(), t.cast::<T>());
        }
        MassTool::from_params(self.config, dataset, &split.train_retrieval(), params, self.steps)
    }
}

pub fn save_checkpoint<T: Scalar>(model: &MassTool<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>, dataset: &Dataset, expected: Option<&TrainConfig>) -> Result<MassTool<T>> {
    Checkpoint::load(path)?.into_model(dataset, expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamSet::new();
        params.insert("a.weight", Tensor::matrix(2, 3, vec![0.1f32, -2.5, 3.0, 1e-7, f32::MAX, -0.0]).unwrap());
        params.insert("b", Tensor::matrix(1, 1, vec![7.0f32]).unwrap());
        Checkpoint { params, config: TrainConfig { seed: 4, ..Default::default() }, steps: 42 }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.config, c.config);
        assert_eq!(back.steps, 42);
        for (name, t) in c.params.iter() {
            let b = back.params.get(name).unwrap();
            assert_eq!(b.shape(), t.shape());
            let bits: Vec<u32> = b.data().iter().map(|x| x.to_bits()).collect();
            let want: Vec<u32> = t.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits, want);
        }
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 3, 8, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CorruptFile(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::CorruptFile(_))));
        let mut v2 = bytes.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::VersionMismatch { found: 2, expected: 1 })));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn atomic_save() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        sample().save(&p).unwrap();
        assert!(!dir.path().join("m.ckpt.tmp").exists());
        assert_eq!(Checkpoint::load(&p).unwrap().steps, 42);
    }
}
