//! Binary feature tensors, label files and dataset manifests.
//!
//! Tensor file layout, all integers little-endian:
//!
//! | offset | size      | field                         |
//! |--------|-----------|-------------------------------|
//! | 0      | 4         | magic `b"OODF"`               |
//! | 4      | 4         | format version (`u32`, = 1)   |
//! | 8      | 4         | rank `r` (`u32`)              |
//! | 12     | 8·r       | dimension sizes (`u64` each)  |
//! | 12+8r  | 4·Πshape  | values (`f32`, row-major)     |
//!
//! Label files are a bare sequence of little-endian `u32` class indices.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub const MAGIC: [u8; 4] = *b"OODF";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_FIXED: usize = 12;

/// An n-dimensional `f32` array in row-major order.
///
/// Every dimension is at least 1, the element count equals the product of
/// the shape, and all values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        ensure!(!shape.is_empty(), Error::Shape("tensor rank must be ≥ 1".into()));
        ensure!(
            shape.iter().all(|&d| d >= 1),
            Error::Shape(format!("zero-sized dimension in shape {shape:?}"))
        );
        let expected: usize = shape.iter().product();
        ensure!(
            expected == data.len(),
            Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            ))
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            Error::NonFinite("tensor data".into())
        );
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    /// Builds a tensor from `f64` values, rounding to `f32`.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f32>) {
        (self.shape, self.data)
    }

    /// Size of the leading (batch) dimension.
    pub fn batch_len(&self) -> usize {
        self.shape[0]
    }

    /// Shape of one sample when the leading dimension is the batch.
    pub fn sample_shape(&self) -> &[usize] {
        &self.shape[1..]
    }

    fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Values of sample `i` along the leading dimension.
    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Sample `i` as a tensor with a leading batch dimension of 1.
    pub fn sample_tensor(&self, i: usize) -> FeatureTensor {
        let mut shape = self.shape.clone();
        shape[0] = 1;
        FeatureTensor {
            shape,
            data: self.sample(i).to_vec(),
        }
    }

    /// Rows of the leading dimension, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<FeatureTensor> {
        ensure!(
            !indices.is_empty(),
            Error::InvalidArgument("cannot select zero samples".into())
        );
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            ensure!(
                i < self.batch_len(),
                Error::InvalidArgument(format!("sample index {i} out of range"))
            );
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(FeatureTensor { shape, data })
    }

    /// Concatenates tensors along the leading dimension.
    pub fn concat(parts: &[FeatureTensor]) -> Result<FeatureTensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut batch = 0;
        for p in parts {
            ensure!(
                p.sample_shape() == first.sample_shape(),
                Error::Shape(format!(
                    "sample shape {:?} differs from {:?}",
                    p.sample_shape(),
                    first.sample_shape()
                ))
            );
            batch += p.batch_len();
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = batch;
        Ok(FeatureTensor { shape, data })
    }
}

pub fn write_tensor(path: impl AsRef<Path>, t: &FeatureTensor) -> Result<()> {
    let path = path.as_ref();
    ensure!(
        t.data.iter().all(|v| v.is_finite()),
        Error::NonFinite(path.display().to_string())
    );
    let file = fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io_at(path, e);
    w.write_all(&MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(t.rank() as u32).to_le_bytes()).map_err(io)?;
    for &d in &t.shape {
        w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
    }
    for v in &t.data {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<FeatureTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    decode_tensor(&bytes)
}

/// Parses an in-memory OODF buffer.
pub fn decode_tensor(bytes: &[u8]) -> Result<FeatureTensor> {
    ensure!(
        bytes.len() >= HEADER_FIXED,
        Error::Truncated {
            expected: HEADER_FIXED,
            found: bytes.len()
        }
    );
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    ensure!(magic == MAGIC, Error::BadMagic { found: magic });
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    ensure!(
        version == FORMAT_VERSION,
        Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION
        }
    );
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    ensure!(rank >= 1, Error::Malformed("rank 0 tensor".into()));
    let header = HEADER_FIXED + 8 * rank;
    ensure!(
        bytes.len() >= header,
        Error::Truncated {
            expected: header,
            found: bytes.len()
        }
    );
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for k in 0..rank {
        let off = HEADER_FIXED + 8 * k;
        let d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let d = usize::try_from(d)
            .map_err(|_| Error::Malformed(format!("dimension {d} does not fit in memory")))?;
        ensure!(d >= 1, Error::Malformed(format!("zero-sized dimension {k}")));
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::Malformed("shape overflows".into()))?;
        shape.push(d);
    }
    let expected = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| Error::Malformed("shape overflows".into()))?;
    ensure!(
        bytes.len() >= expected,
        Error::Truncated {
            expected,
            found: bytes.len()
        }
    );
    ensure!(
        bytes.len() == expected,
        Error::Malformed(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        ))
    );
    let data: Vec<f32> = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ensure!(
        data.iter().all(|v| v.is_finite()),
        Error::NonFinite("tensor payload".into())
    );
    Ok(FeatureTensor { shape, data })
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[u32]) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io_at(path, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    ensure!(
        bytes.len() % 4 == 0,
        Error::Malformed(format!(
            "label file {} has {} bytes, not a multiple of 4",
            path.display(),
            bytes.len()
        ))
    );
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    IdTest,
    OodTest,
}

/// JSON description of one dataset split stored as OODF tensors.
///
/// Relative paths are resolved against the directory holding the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub role: Role,
    pub tensors: Vec<PathBuf>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    pub count: usize,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf);
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io_at(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Reads every tensor listed in the manifest and concatenates them.
    pub fn load_dataset(&self) -> Result<Dataset> {
        ensure!(
            !self.tensors.is_empty(),
            Error::InvalidArgument(format!("manifest {} lists no tensors", self.name))
        );
        let parts = self
            .tensors
            .iter()
            .map(|p| read_tensor(self.resolve(p)))
            .collect::<Result<Vec<_>>>()?;
        let inputs = FeatureTensor::concat(&parts)?;
        ensure!(
            inputs.batch_len() == self.count,
            Error::Malformed(format!(
                "manifest {} declares {} samples, tensors hold {}",
                self.name,
                self.count,
                inputs.batch_len()
            ))
        );
        let labels = match &self.labels {
            Some(p) => {
                let labels = read_labels(self.resolve(p))?;
                ensure!(
                    labels.len() == self.count,
                    Error::Malformed(format!(
                        "manifest {} declares {} samples, label file holds {}",
                        self.name,
                        self.count,
                        labels.len()
                    ))
                );
                Some(labels)
            }
            None => None,
        };
        ensure!(
            self.role != Role::Train || labels.is_some(),
            Error::InvalidArgument(format!("training manifest {} has no labels", self.name))
        );
        Ok(Dataset {
            name: self.name.clone(),
            role: self.role,
            inputs,
            labels,
        })
    }
}

/// A loaded dataset split: inputs batched along the leading dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub role: Role,
    pub inputs: FeatureTensor,
    pub labels: Option<Vec<u32>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.batch_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        if let Some(labels) = &self.labels {
            if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
                return Err(Error::InvalidArgument(format!(
                    "label {bad} in {} out of range for {num_classes} classes",
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            name: self.name.clone(),
            role: self.role,
            inputs: self.inputs.select(indices)?,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        })
    }

    /// Writes `<stem>.oodf` (plus `<stem>.labels`) and `<stem>.json` into
    /// `dir` and returns the manifest path.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
        let tensor_file = PathBuf::from(format!("{stem}.oodf"));
        write_tensor(dir.join(&tensor_file), &self.inputs)?;
        let labels = match &self.labels {
            Some(l) => {
                let f = PathBuf::from(format!("{stem}.labels"));
                write_labels(dir.join(&f), l)?;
                Some(f)
            }
            None => None,
        };
        let manifest = DatasetManifest {
            name: self.name.clone(),
            role: self.role,
            tensors: vec![tensor_file],
            labels,
            count: self.len(),
            base_dir: None,
        };
        let path = dir.join(format!("{stem}.json"));
        manifest.save(&path)?;
        Ok(path)
    }
}

/// Index sets that equalise two collections of sizes `n_id` and `n_ood`.
///
/// The larger side is subsampled without replacement (indices returned in
/// ascending order); the smaller side is returned whole.
pub fn balance_indices(n_id: usize, n_ood: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    ensure!(
        n_id > 0 && n_ood > 0,
        Error::InvalidArgument("cannot balance an empty collection".into())
    );
    let k = n_id.min(n_ood);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |n: usize| -> Vec<usize> {
        if n == k {
            (0..n).collect()
        } else {
            let mut v = index::sample(&mut rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
    };
    let id = pick(n_id);
    let ood = pick(n_ood);
    Ok((id, ood))
}

/// Subsamples the larger of two collections to the size of the smaller.
pub fn balance_pair<T: Clone>(id: &[T], ood: &[T], seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let (ii, oi) = balance_indices(id.len(), ood.len(), seed)?;
    Ok((
        ii.iter().map(|&i| id[i].clone()).collect(),
        oi.iter().map(|&i| ood[i].clone()).collect(),
    ))
}

/// Seeded split of `0..n` into a `fraction` part and the remainder, both in
/// ascending order. The chosen part holds at least one index.
pub fn split_fraction(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    ensure!(n > 0, Error::InvalidArgument("cannot split an empty set".into()));
    ensure!(
        fraction > 0.0 && fraction <= 1.0,
        Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]"))
    );
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = index::sample(&mut rng, n, k).into_vec();
    chosen.sort_unstable();
    let mut mask = vec![false; n];
    chosen.iter().for_each(|&i| mask[i] = true);
    let rest = (0..n).filter(|&i| !mask[i]).collect();
    Ok((chosen, rest))
}
