//! Minimal differentiable building blocks with analytically coded gradients:
//! a record-and-replay graph over 64-bit matrices, the three losses, a
//! finite-difference gradient checker and an AdamW optimizer.
//!
//! Everything is f64 end to end so the gradient and coefficient checks stay
//! tight; the sizes involved make throughput a non-issue.

mod gradcheck;
mod graph;
pub mod model;
mod optim;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{Gradients, Graph, NetError, NodeId};
pub use optim::AdamW;

use ndarray::Array2;

/// Sinusoidal time embedding: `dim/2` frequency pairs geometric in [1, 1e4],
/// `[sin(ω_k t), cos(ω_k t)]`. Constant with respect to parameters.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let pairs = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..pairs {
        let expo = if pairs == 1 {
            0.0
        } else {
            4.0 * k as f64 / (pairs - 1) as f64
        };
        let omega = 10f64.powf(expo);
        out.push((omega * t).sin());
        out.push((omega * t).cos());
    }
    out
}

/// Mean absolute error over all entries (the reconstruction objective).
pub fn loss_db(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64, NetError> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let loss = g.l1_loss(p, target.clone())?;
    Ok(g.value(loss)[(0, 0)])
}

/// Symmetric CLIP alignment loss between two batches of flattened embeddings
/// (rows are L2-normalized inside, with 1e-12 added to the norms).
pub fn loss_align(
    actions: &Array2<f64>,
    obs_latents: &Array2<f64>,
    tau: f64,
) -> Result<f64, NetError> {
    let mut g = Graph::new();
    let x = g.constant(actions.clone());
    let y = g.constant(obs_latents.clone());
    let loss = g.clip_align_loss(x, y, tau)?;
    Ok(g.value(loss)[(0, 0)])
}

/// Total objective `L = L_DB + α·L_align`.
pub fn loss_total(l_db: f64, l_align: f64, alpha: f64) -> Result<f64, NetError> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(NetError::BadScalar {
            what: "alpha",
            value: alpha,
        });
    }
    Ok(l_db + alpha * l_align)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn time_embedding_shape_and_range() {
        let e = time_embedding(0.37, 64);
        assert_eq!(e.len(), 64);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        // lowest frequency is 1, highest is 1e4
        assert_abs_diff_eq!(e[0], 0.37f64.sin());
        assert_abs_diff_eq!(e[63], (1e4 * 0.37f64).cos(), epsilon = 1e-9);
    }

    #[test]
    fn loss_db_examples() {
        let a = array![[0.0, 1.0]];
        let b = array![[1.0, 3.0]];
        assert_abs_diff_eq!(loss_db(&a, &b).unwrap(), 1.5);
        assert_abs_diff_eq!(loss_db(&a, &a).unwrap(), 0.0);
        let c = array![[0.25, 1.25]];
        assert_abs_diff_eq!(loss_db(&a, &c).unwrap(), 0.25);
        assert!(loss_db(&a, &array![[1.0]]).is_err());
    }

    #[test]
    fn loss_total_examples() {
        assert_abs_diff_eq!(loss_total(1.0, 0.5, 0.3).unwrap(), 1.15);
        assert_abs_diff_eq!(loss_total(0.7, 123.0, 0.0).unwrap(), 0.7);
        assert!(loss_total(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn loss_align_single_pair_is_zero() {
        let x = array![[1.0, 0.0, 0.0]];
        let y = array![[0.5, 0.5, 0.0]];
        assert_abs_diff_eq!(loss_align(&x, &y, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn loss_align_orthogonal_pair_frozen_value() {
        // x1=y1, x2=y2 orthogonal unit vectors, tau=1: 2*ln(1+e^{-1}).
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let v = loss_align(&x, &x, 1.0).unwrap();
        assert_abs_diff_eq!(v, 0.6265233750364456681, epsilon = 1e-9);
    }

    #[test]
    fn loss_align_joint_permutation_invariant() {
        let x = array![[0.3, -1.0, 0.2], [1.1, 0.4, -0.6], [-0.2, 0.8, 0.5]];
        let y = array![[0.9, 0.1, -0.3], [0.2, -0.7, 1.0], [0.4, 0.4, 0.4]];
        let base = loss_align(&x, &y, 0.07).unwrap();
        let perm = [2usize, 0, 1];
        let xp = ndarray::stack(
            ndarray::Axis(0),
            &perm.iter().map(|&i| x.row(i)).collect::<Vec<_>>(),
        )
        .unwrap();
        let yp = ndarray::stack(
            ndarray::Axis(0),
            &perm.iter().map(|&i| y.row(i)).collect::<Vec<_>>(),
        )
        .unwrap();
        let permuted = loss_align(&xp, &yp, 0.07).unwrap();
        assert_abs_diff_eq!(base, permuted, epsilon = 1e-12);
    }

    #[test]
    fn loss_align_nonnegative_and_zero_norm_guard() {
        let x = array![[0.0, 0.0], [1.0, 0.0]];
        let y = array![[0.0, 1.0], [0.0, 0.0]];
        let v = loss_align(&x, &y, 0.07).unwrap();
        assert!(v.is_finite() && v >= 0.0);
    }
}
