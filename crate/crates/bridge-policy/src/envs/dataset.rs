//! Demonstration dataset container.
//!
//! Layout: magic `BPDS`, u32 version, u64 manifest length, manifest JSON,
//! u64 array count, then named arrays. Each array is
//! `u16 name_len | name | u8 dtype | u8 ndim | u64 dims... | payload` with
//! little-endian 64-bit floats (dtype 0) or integers (dtype 1). A fixed seed
//! produces a byte-identical file.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use super::{rollout_expert, EnvError, Task};

const MAGIC: &[u8; 4] = b"BPDS";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}; this build reads {VERSION}")]
    Version(u32),
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error("dataset missing array {0}")]
    MissingArray(&'static str),
}

/// Per-dimension action bounds plus the fixed cloud normalization, stored so
/// training and inference agree on units.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub action_min: Vec<f64>,
    pub action_max: Vec<f64>,
    pub cloud_center: [f64; 3],
    pub cloud_scale: f64,
}

impl NormStats {
    /// Map actions to [-1, 1] per dimension; constant dimensions map to 0.
    pub fn normalize_action(&self, a: &mut [f64]) {
        for (j, v) in a.iter_mut().enumerate() {
            let (lo, hi) = (self.action_min[j], self.action_max[j]);
            *v = if hi > lo { 2.0 * (*v - lo) / (hi - lo) - 1.0 } else { 0.0 };
        }
    }

    pub fn denormalize_action(&self, a: &mut [f64]) {
        for (j, v) in a.iter_mut().enumerate() {
            let (lo, hi) = (self.action_min[j], self.action_max[j]);
            *v = if hi > lo {
                lo + (*v + 1.0) * 0.5 * (hi - lo)
            } else {
                lo
            };
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub task: Task,
    pub seed: u64,
    pub episodes_requested: usize,
    pub episodes_kept: usize,
    pub episodes_failed: usize,
    pub total_steps: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub n_points: usize,
    pub normalization: NormStats,
}

/// In-memory dataset: flat per-step arrays plus episode offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// total_steps x state_dim
    pub states: Array2<f64>,
    /// total_steps x (n_points * 3), row-major points
    pub clouds: Array2<f64>,
    /// total_steps x action_dim, raw (unnormalized) units
    pub actions: Array2<f64>,
    /// episodes + 1 boundaries into the step arrays
    pub offsets: Vec<usize>,
}

impl Dataset {
    pub fn n_episodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn episode_range(&self, e: usize) -> std::ops::Range<usize> {
        self.offsets[e]..self.offsets[e + 1]
    }
}

/// Roll the scripted expert and collect successful episodes. Failures are
/// excluded from the arrays and counted in the manifest.
pub fn generate_dataset(
    task: Task,
    n_episodes: usize,
    rng_seed: u64,
    n_points: usize,
    n_raw: usize,
) -> Result<Dataset, DatasetError> {
    let mut episodes = Vec::new();
    let mut failed = 0usize;
    for e in 0..n_episodes {
        let ep_seed = rng_seed
            .wrapping_mul(0x100_0000_01B3)
            .wrapping_add(e as u64);
        let rec = rollout_expert(task, ep_seed, n_raw, n_points, true)?;
        if rec.success {
            episodes.push(rec);
        } else {
            failed += 1;
        }
    }
    let total_steps: usize = episodes.iter().map(|e| e.states.len()).sum();
    let state_dim = 2;
    let action_dim = 2;
    let mut states = Array2::zeros((total_steps, state_dim));
    let mut clouds = Array2::zeros((total_steps, n_points * 3));
    let mut actions = Array2::zeros((total_steps, action_dim));
    let mut offsets = vec![0usize];
    let mut row = 0;
    for ep in &episodes {
        for k in 0..ep.states.len() {
            states[(row, 0)] = ep.states[k][0];
            states[(row, 1)] = ep.states[k][1];
            actions[(row, 0)] = ep.actions[k][0];
            actions[(row, 1)] = ep.actions[k][1];
            for (i, v) in ep.clouds[k].iter().enumerate() {
                clouds[(row, i)] = *v;
            }
            row += 1;
        }
        offsets.push(row);
    }
    let mut action_min = vec![f64::INFINITY; action_dim];
    let mut action_max = vec![f64::NEG_INFINITY; action_dim];
    for r in actions.rows() {
        for j in 0..action_dim {
            action_min[j] = action_min[j].min(r[j]);
            action_max[j] = action_max[j].max(r[j]);
        }
    }
    if total_steps == 0 {
        action_min = vec![0.0; action_dim];
        action_max = vec![0.0; action_dim];
    }
    let manifest = DatasetManifest {
        task,
        seed: rng_seed,
        episodes_requested: n_episodes,
        episodes_kept: episodes.len(),
        episodes_failed: failed,
        total_steps,
        state_dim,
        action_dim,
        n_points,
        normalization: NormStats {
            action_min,
            action_max,
            cloud_center: [0.0, 0.0, 0.0],
            cloud_scale: 1.0,
        },
    };
    Ok(Dataset {
        manifest,
        states,
        clouds,
        actions,
        offsets,
    })
}

fn write_array(w: &mut impl Write, name: &str, dims: &[u64], f64_data: Option<&[f64]>, i64_data: Option<&[i64]>) -> Result<(), DatasetError> {
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[u8::from(f64_data.is_none())])?;
    w.write_all(&[dims.len() as u8])?;
    for d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    if let Some(data) = f64_data {
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    } else if let Some(data) = i64_data {
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let mut buf = Vec::new();
    buf.write_all(MAGIC)?;
    buf.write_all(&VERSION.to_le_bytes())?;
    let manifest = serde_json::to_vec(&ds.manifest)?;
    buf.write_all(&(manifest.len() as u64).to_le_bytes())?;
    buf.write_all(&manifest)?;
    buf.write_all(&4u64.to_le_bytes())?;
    let dims = |a: &Array2<f64>| vec![a.nrows() as u64, a.ncols() as u64];
    write_array(&mut buf, "states", &dims(&ds.states), ds.states.as_slice(), None)?;
    write_array(&mut buf, "clouds", &dims(&ds.clouds), ds.clouds.as_slice(), None)?;
    write_array(&mut buf, "actions", &dims(&ds.actions), ds.actions.as_slice(), None)?;
    let offsets: Vec<i64> = ds.offsets.iter().map(|&o| o as i64).collect();
    write_array(
        &mut buf,
        "episode_offsets",
        &[offsets.len() as u64],
        None,
        Some(&offsets),
    )?;
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        if self.pos + n > self.buf.len() {
            return Err(DatasetError::Corrupt(format!(
                "truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, DatasetError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DatasetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(DatasetError::Version(version));
    }
    let mlen = r.u64()? as usize;
    let manifest: DatasetManifest = serde_json::from_slice(r.take(mlen)?)?;
    let n_arrays = r.u64()?;
    let mut states = None;
    let mut clouds = None;
    let mut actions = None;
    let mut offsets = None;
    for _ in 0..n_arrays {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| DatasetError::Corrupt("array name not utf-8".into()))?;
        let dtype = r.take(1)?[0];
        let ndim = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u64()? as usize);
        }
        let count: usize = dims.iter().product();
        let payload = r.take(count * 8)?;
        match (name.as_str(), dtype) {
            ("episode_offsets", 1) => {
                offsets = Some(
                    payload
                        .chunks_exact(8)
                        .map(|c| i64::from_le_bytes(c.try_into().unwrap()) as usize)
                        .collect::<Vec<_>>(),
                );
            }
            (_, 0) => {
                if dims.len() != 2 {
                    return Err(DatasetError::Corrupt(format!("{name} must be 2-d")));
                }
                let data: Vec<f64> = payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let arr = Array2::from_shape_vec((dims[0], dims[1]), data)
                    .map_err(|e| DatasetError::Corrupt(e.to_string()))?;
                match name.as_str() {
                    "states" => states = Some(arr),
                    "clouds" => clouds = Some(arr),
                    "actions" => actions = Some(arr),
                    other => {
                        return Err(DatasetError::Corrupt(format!("unknown array {other}")))
                    }
                }
            }
            _ => return Err(DatasetError::Corrupt(format!("bad dtype for {name}"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(DatasetError::Corrupt("trailing bytes".into()));
    }
    let ds = Dataset {
        manifest,
        states: states.ok_or(DatasetError::MissingArray("states"))?,
        clouds: clouds.ok_or(DatasetError::MissingArray("clouds"))?,
        actions: actions.ok_or(DatasetError::MissingArray("actions"))?,
        offsets: offsets.ok_or(DatasetError::MissingArray("episode_offsets"))?,
    };
    let m = &ds.manifest;
    if ds.states.dim() != (m.total_steps, m.state_dim)
        || ds.actions.dim() != (m.total_steps, m.action_dim)
        || ds.clouds.dim() != (m.total_steps, m.n_points * 3)
        || ds.offsets.last().copied() != Some(m.total_steps)
    {
        return Err(DatasetError::Corrupt(
            "array shapes disagree with manifest".into(),
        ));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dataset_roundtrips() {
        let ds = generate_dataset(Task::Reach, 0, 1, 16, 64).unwrap();
        assert_eq!(ds.manifest.episodes_kept, 0);
        assert_eq!(ds.offsets, vec![0]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bpds");
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bpds");
        let p2 = dir.path().join("b.bpds");
        let d1 = generate_dataset(Task::Reach, 3, 9, 16, 64).unwrap();
        let d2 = generate_dataset(Task::Reach, 3, 9, 16, 64).unwrap();
        write_dataset(&d1, &p1).unwrap();
        write_dataset(&d2, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn reach_action_mean_is_centered() {
        let ds = generate_dataset(Task::Reach, 100, 2024, 8, 32).unwrap();
        assert_eq!(ds.manifest.episodes_kept, 100);
        for j in 0..2 {
            let mean = ds.actions.column(j).mean().unwrap();
            assert!(mean.abs() < 0.1, "action mean {mean} in dim {j}");
        }
    }

    #[test]
    fn truncated_file_is_rejected_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bpds");
        let ds = generate_dataset(Task::Reach, 2, 5, 8, 32).unwrap();
        write_dataset(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            read_dataset(&path),
            Err(DatasetError::Corrupt(_))
        ));
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(read_dataset(&path), Err(DatasetError::BadMagic)));
    }

    #[test]
    fn normalization_roundtrip() {
        let stats = NormStats {
            action_min: vec![-0.5, 0.0],
            action_max: vec![1.5, 0.0],
            cloud_center: [0.0; 3],
            cloud_scale: 1.0,
        };
        let mut a = [1.0, 0.0];
        stats.normalize_action(&mut a);
        assert_eq!(a, [0.5, 0.0]);
        stats.denormalize_action(&mut a);
        assert_eq!(a, [1.0, 0.0]);
    }
}
