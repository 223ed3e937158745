//! Parameter registry and forward builders for the policy networks: the
//! state encoder, the point-cloud encoder with max-pooling, the
//! cross-attention fusion producing the observation latent, and the
//! data-prediction denoiser MLP.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NetError, NodeId};

/// Architecture hyperparameters; every width is configurable, the defaults
/// are the desk-scale operating point.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Action-chunk horizon H.
    pub horizon: usize,
    /// Action dimension D_a.
    pub action_dim: usize,
    /// Robot-state dimension D_s per observation step.
    pub state_dim: usize,
    /// Observation history length T_o.
    pub obs_steps: usize,
    /// Point-cloud budget N after farthest point sampling.
    pub n_points: usize,
    /// Width d_s of each state token entering the attention.
    pub token_dim: usize,
    /// Hidden width of the state encoder.
    pub state_hidden: usize,
    /// Per-point MLP widths of the point-cloud encoder.
    pub point_hidden: [usize; 2],
    /// Hidden widths of the denoiser MLP.
    pub denoiser_hidden: Vec<usize>,
    /// Sinusoidal time-embedding size (even).
    pub time_embed_dim: usize,
    /// CLIP temperature.
    pub tau: f64,
    /// Ablation switch: feed the observation latent to the reconstruction
    /// loss as data, so only the alignment loss updates the encoders.
    pub detach_obs_in_db: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            action_dim: 2,
            state_dim: 2,
            obs_steps: 2,
            n_points: 512,
            token_dim: 16,
            state_hidden: 64,
            point_hidden: [32, 32],
            denoiser_hidden: vec![256, 256],
            time_embed_dim: 64,
            tau: 0.07,
            detach_obs_in_db: false,
        }
    }
}

impl ModelConfig {
    /// Flattened action-chunk length H·D_a.
    pub fn chunk_len(&self) -> usize {
        self.horizon * self.action_dim
    }

    /// Denoiser input width: 2·H·D_a + time-embedding size.
    pub fn denoiser_in(&self) -> usize {
        2 * self.chunk_len() + self.time_embed_dim
    }

    /// Name → shape of every trainable tensor.
    pub fn tensor_shapes(&self) -> BTreeMap<String, (usize, usize)> {
        let mut m = BTreeMap::new();
        let state_in = self.obs_steps * self.state_dim;
        let tokens = self.horizon * self.token_dim;
        let chunk = self.chunk_len();
        let [p0, p1] = self.point_hidden;
        m.insert("phi1.l0.w".into(), (state_in, self.state_hidden));
        m.insert("phi1.l0.b".into(), (1, self.state_hidden));
        m.insert("phi1.ln.g".into(), (1, self.state_hidden));
        m.insert("phi1.ln.b".into(), (1, self.state_hidden));
        m.insert("phi1.l1.w".into(), (self.state_hidden, tokens));
        m.insert("phi1.l1.b".into(), (1, tokens));
        m.insert("phi2.l0.w".into(), (3, p0));
        m.insert("phi2.l0.b".into(), (1, p0));
        m.insert("phi2.ln0.g".into(), (1, p0));
        m.insert("phi2.ln0.b".into(), (1, p0));
        m.insert("phi2.l1.w".into(), (p0, p1));
        m.insert("phi2.l1.b".into(), (1, p1));
        m.insert("phi2.ln1.g".into(), (1, p1));
        m.insert("phi2.ln1.b".into(), (1, p1));
        m.insert("phi2.proj.w".into(), (p1, chunk));
        m.insert("phi2.proj.b".into(), (1, chunk));
        let mut prev = self.denoiser_in();
        for (i, &h) in self.denoiser_hidden.iter().enumerate() {
            m.insert(format!("den.l{i}.w"), (prev, h));
            m.insert(format!("den.l{i}.b"), (1, h));
            prev = h;
        }
        m.insert("den.out.w".into(), (prev, chunk));
        m.insert("den.out.b".into(), (1, chunk));
        m
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let positive = [
            ("horizon", self.horizon),
            ("action_dim", self.action_dim),
            ("state_dim", self.state_dim),
            ("obs_steps", self.obs_steps),
            ("n_points", self.n_points),
            ("token_dim", self.token_dim),
            ("state_hidden", self.state_hidden),
            ("point_hidden[0]", self.point_hidden[0]),
            ("point_hidden[1]", self.point_hidden[1]),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(NetError::ShapeMismatch {
                    op: "model_config",
                    detail: format!("{name} must be positive"),
                });
            }
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(NetError::ShapeMismatch {
                op: "model_config",
                detail: "time_embed_dim must be even and >= 2".into(),
            });
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(NetError::BadScalar {
                what: "tau",
                value: self.tau,
            });
        }
        Ok(())
    }
}

/// All trainable tensors, addressable by name; the map order is the
/// deterministic iteration order used everywhere (init, optimizer, disk).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Array2<f64>>,
}

impl ModelParams {
    /// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases, unit
    /// layer-norm gains; one seeded stream drawn in name order.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, (rows, cols)) in config.tensor_shapes() {
            let t = if name.ends_with(".w") {
                let bound = 1.0 / (rows as f64).sqrt();
                Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
            } else if name.ends_with(".g") {
                Array2::ones((rows, cols))
            } else {
                Array2::zeros((rows, cols))
            };
            tensors.insert(name, t);
        }
        Self { tensors }
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<(), NetError> {
        let want = config.tensor_shapes();
        if want.len() != self.tensors.len() {
            return Err(NetError::ShapeMismatch {
                op: "model_params",
                detail: format!("{} tensors, expected {}", self.tensors.len(), want.len()),
            });
        }
        for (name, shape) in want {
            match self.tensors.get(&name) {
                Some(t) if t.dim() == shape => {}
                Some(t) => {
                    return Err(NetError::ShapeMismatch {
                        op: "model_params",
                        detail: format!("{name}: {:?}, expected {:?}", t.dim(), shape),
                    })
                }
                None => return Err(NetError::UnknownParam(name)),
            }
        }
        Ok(())
    }
}

/// Node handles of every registered parameter in one graph.
pub struct ParamNodes {
    ids: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn register(g: &mut Graph, params: &ModelParams) -> Self {
        let mut ids = BTreeMap::new();
        for (name, t) in &params.tensors {
            ids.insert(name.clone(), g.param(name, t.clone()));
        }
        Self { ids }
    }

    /// Wrap already-registered nodes (used by the gradient sweeps, which
    /// register parameters themselves).
    pub fn from_ids(ids: BTreeMap<String, NodeId>) -> Self {
        Self { ids }
    }

    pub fn get(&self, name: &str) -> NodeId {
        self.ids[name]
    }
}

const LN_EPS: f64 = 1e-10;

/// Observation encoder: state MLP to H tokens, per-point MLP with max-pool
/// and projection to H tokens, cross-attention fusion. Returns the flattened
/// latent of shape `(batch, H·D_a)`, the exact shape of an action chunk.
pub fn encoder_forward(
    g: &mut Graph,
    p: &ParamNodes,
    cfg: &ModelConfig,
    state_flat: Array2<f64>,
    points: Array2<f64>,
) -> Result<NodeId, NetError> {
    let batch = state_flat.nrows();
    if state_flat.ncols() != cfg.obs_steps * cfg.state_dim {
        return Err(NetError::ShapeMismatch {
            op: "encoder_forward",
            detail: format!(
                "state width {} != obs_steps*state_dim {}",
                state_flat.ncols(),
                cfg.obs_steps * cfg.state_dim
            ),
        });
    }
    if points.dim() != (batch * cfg.n_points, 3) {
        return Err(NetError::ShapeMismatch {
            op: "encoder_forward",
            detail: format!(
                "points {:?}, expected ({}, 3)",
                points.dim(),
                batch * cfg.n_points
            ),
        });
    }

    // state branch: H tokens of width d_s from one linear map, reshaped
    let s_in = g.constant(state_flat);
    let s0 = g.linear(s_in, p.get("phi1.l0.w"), p.get("phi1.l0.b"))?;
    let s1 = g.layer_norm(s0, p.get("phi1.ln.g"), p.get("phi1.ln.b"), LN_EPS)?;
    let s2 = g.silu(s1);
    let s3 = g.linear(s2, p.get("phi1.l1.w"), p.get("phi1.l1.b"))?;
    let s_tokens = g.reshape(s3, batch * cfg.horizon, cfg.token_dim)?;

    // point branch: shared per-point MLP, max-pool over each cloud, project
    let pc_in = g.constant(points);
    let c0 = g.linear(pc_in, p.get("phi2.l0.w"), p.get("phi2.l0.b"))?;
    let c1 = g.layer_norm(c0, p.get("phi2.ln0.g"), p.get("phi2.ln0.b"), LN_EPS)?;
    let c2 = g.silu(c1);
    let c3 = g.linear(c2, p.get("phi2.l1.w"), p.get("phi2.l1.b"))?;
    let c4 = g.layer_norm(c3, p.get("phi2.ln1.g"), p.get("phi2.ln1.b"), LN_EPS)?;
    let c5 = g.silu(c4);
    let pooled = g.segment_max(c5, cfg.n_points)?;
    let projected = g.linear(pooled, p.get("phi2.proj.w"), p.get("phi2.proj.b"))?;
    let pc_tokens = g.reshape(projected, batch * cfg.horizon, cfg.action_dim)?;

    let fused = g.cross_attention_fuse(s_tokens, pc_tokens, cfg.horizon)?;
    let latent = g.reshape(fused, batch, cfg.chunk_len())?;
    debug_assert_eq!(g.value(latent).dim(), (batch, cfg.chunk_len()));
    Ok(latent)
}

/// Data-prediction MLP on `concat(a_t, a_T, time_embedding)`.
pub fn denoiser_forward(
    g: &mut Graph,
    p: &ParamNodes,
    cfg: &ModelConfig,
    a_t: NodeId,
    a_terminal: NodeId,
    time_embed: NodeId,
) -> Result<NodeId, NetError> {
    let mut x = g.concat_cols(&[a_t, a_terminal, time_embed])?;
    if g.value(x).ncols() != cfg.denoiser_in() {
        return Err(NetError::ShapeMismatch {
            op: "denoiser_forward",
            detail: format!(
                "input width {} != expected {}",
                g.value(x).ncols(),
                cfg.denoiser_in()
            ),
        });
    }
    for i in 0..cfg.denoiser_hidden.len() {
        let lin = g.linear(x, p.get(&format!("den.l{i}.w")), p.get(&format!("den.l{i}.b")))?;
        x = g.silu(lin);
    }
    g.linear(x, p.get("den.out.w"), p.get("den.out.b"))
}
