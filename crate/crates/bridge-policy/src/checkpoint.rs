//! Checkpoint persistence: magic, format version, the run-config snapshot,
//! normalization stats, then `name → (shape, little-endian f64 data)` for
//! every tensor. Round-trips are byte-exact.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::config::RunConfig;
use crate::envs::dataset::NormStats;
use crate::net::model::ModelParams;
use crate::policy::Policy;

const MAGIC: &[u8; 4] = b"BPCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("metadata: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}; this build reads {VERSION}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint tensors disagree with the config: {0}")]
    ShapeMismatch(String),
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub norm: NormStats,
    pub tensors: BTreeMap<String, Array2<f64>>,
}

impl Checkpoint {
    pub fn from_policy(policy: &Policy, config: &RunConfig) -> Self {
        Self {
            config: config.clone(),
            norm: policy.norm.clone(),
            tensors: policy.params.tensors.clone(),
        }
    }

    /// Rebuild the policy, validating tensor shapes against the config.
    pub fn into_policy(self) -> Result<(Policy, RunConfig), CheckpointError> {
        let model = self.config.model_config();
        let params = ModelParams {
            tensors: self.tensors,
        };
        params
            .check_shapes(&model)
            .map_err(|e| CheckpointError::ShapeMismatch(e.to_string()))?;
        let policy = Policy {
            model,
            params,
            norm: self.norm,
            action_steps: self.config.env.action_steps,
        };
        Ok((policy, self.config))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.write_all(MAGIC)?;
    buf.write_all(&VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(&ckpt.config)?;
    buf.write_all(&(config.len() as u64).to_le_bytes())?;
    buf.write_all(&config)?;
    let norm = serde_json::to_vec(&ckpt.norm)?;
    buf.write_all(&(norm.len() as u64).to_le_bytes())?;
    buf.write_all(&norm)?;
    buf.write_all(&(ckpt.tensors.len() as u64).to_le_bytes())?;
    for (name, t) in &ckpt.tensors {
        buf.write_all(&(name.len() as u16).to_le_bytes())?;
        buf.write_all(name.as_bytes())?;
        buf.write_all(&(t.nrows() as u64).to_le_bytes())?;
        buf.write_all(&(t.ncols() as u64).to_le_bytes())?;
        for v in t.iter() {
            buf.write_all(&v.to_le_bytes())?;
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *pos + n > bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "truncated at byte {pos} (need {n} more)",
                pos = *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let clen = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let config: RunConfig = serde_json::from_slice(take(&mut pos, clen)?)?;
    let nlen = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let norm: NormStats = serde_json::from_slice(take(&mut pos, nlen)?)?;
    let n_tensors = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let mut tensors = BTreeMap::new();
    for _ in 0..n_tensors {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("tensor name not utf-8".into()))?;
        let rows = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let data: Vec<f64> = take(&mut pos, rows * cols * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        tensors.insert(name, t);
    }
    if pos != bytes.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok(Checkpoint {
        config,
        norm,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::model::ModelConfig;

    fn sample() -> (Policy, RunConfig) {
        let mut config = RunConfig::default();
        config.env.n_points = 16;
        config.model.denoiser_hidden = vec![8];
        config.model.state_hidden = 8;
        config.model.point_hidden = [4, 4];
        let model: ModelConfig = config.model_config();
        let norm = NormStats {
            action_min: vec![-1.0, -1.0],
            action_max: vec![1.0, 1.0],
            cloud_center: [0.0; 3],
            cloud_scale: 1.0,
        };
        (
            Policy::init(model, norm, config.env.action_steps, 5),
            config,
        )
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (policy, config) = sample();
        let ckpt = Checkpoint::from_policy(&policy, &config);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bpck");
        let p2 = dir.path().join("b.bpck");
        save_checkpoint(&ckpt, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let (policy2, config2) = loaded.into_policy().unwrap();
        assert_eq!(policy.params, policy2.params);
        assert_eq!(config, config2);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let (policy, config) = sample();
        let ckpt = Checkpoint::from_policy(&policy, &config);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bpck");
        save_checkpoint(&ckpt, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Corrupt(_))
        ));
    }

    #[test]
    fn wrong_magic_and_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bpck");
        std::fs::write(&path, b"WHAT....rest").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic)
        ));
        let (policy, config) = sample();
        let ckpt = Checkpoint::from_policy(&policy, &config);
        save_checkpoint(&ckpt, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9; // bump version field
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Version(9))
        ));
    }

    #[test]
    fn shape_mismatch_against_config_rejected() {
        let (policy, mut config) = sample();
        config.model.denoiser_hidden = vec![32]; // disagrees with the tensors
        let ckpt = Checkpoint::from_policy(&policy, &config);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bpck");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(matches!(
            loaded.into_policy(),
            Err(CheckpointError::ShapeMismatch(_))
        ));
    }
}
