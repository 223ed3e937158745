//! AdamW with decoupled weight decay and bias-corrected moments.

use std::collections::BTreeMap;

use ndarray::Array2;

use super::graph::NetError;

/// Optimizer state: first/second moments per parameter plus the step count.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self::with_betas(lr, weight_decay, 0.9, 0.999)
    }

    pub fn with_betas(lr: f64, weight_decay: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update: `p ← p − lr·wd·p − lr·m̂/(√v̂ + ε)`. Iteration order is the
    /// sorted parameter name order, so repeated runs are bit-identical.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Array2<f64>>,
        grads: &BTreeMap<String, Array2<f64>>,
    ) -> Result<(), NetError> {
        self.step += 1;
        let (beta1, beta2, lr, wd, eps) = (self.beta1, self.beta2, self.lr, self.weight_decay, self.eps);
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.dim() != p.dim() {
                return Err(NetError::ShapeMismatch {
                    op: "optimizer_step",
                    detail: format!("{name}: param {:?} vs grad {:?}", p.dim(), g.dim()),
                });
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(p.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(p.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * wd * *p;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn zero_gradient_zero_decay_leaves_params() {
        let mut params = BTreeMap::from([("w".to_string(), array![[1.0, -2.0]])]);
        let grads = BTreeMap::from([("w".to_string(), array![[0.0, 0.0]])]);
        let mut opt = AdamW::new(1e-3, 0.0);
        for _ in 0..5 {
            opt.step(&mut params, &grads).unwrap();
        }
        assert_eq!(params["w"], array![[1.0, -2.0]]);
    }

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        // bias-corrected first step: update = -lr * g / (|g| + eps')
        let mut params = BTreeMap::from([("w".to_string(), array![[0.0, 0.0]])]);
        let grads = BTreeMap::from([("w".to_string(), array![[3.0, -0.25]])]);
        let mut opt = AdamW::new(1e-2, 0.0);
        opt.step(&mut params, &grads).unwrap();
        assert_abs_diff_eq!(params["w"][(0, 0)], -1e-2, epsilon = 1e-9);
        assert_abs_diff_eq!(params["w"][(0, 1)], 1e-2, epsilon = 1e-9);
    }

    #[test]
    fn decoupled_decay_shrinks_params_without_gradient_coupling() {
        let mut params = BTreeMap::from([("w".to_string(), array![[10.0]])]);
        let grads = BTreeMap::from([("w".to_string(), array![[0.0]])]);
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut params, &grads).unwrap();
        assert_abs_diff_eq!(params["w"][(0, 0)], 10.0 * (1.0 - 0.1 * 0.5));
    }

    #[test]
    fn repeated_runs_bit_identical() {
        let run = || {
            let mut params = BTreeMap::from([
                ("a".to_string(), array![[0.5, -0.5]]),
                ("b".to_string(), array![[1.5]]),
            ]);
            let mut opt = AdamW::new(1e-4, 1e-6);
            for k in 0..100u64 {
                let grads = BTreeMap::from([
                    ("a".to_string(), array![[(k as f64).sin(), 0.3]]),
                    ("b".to_string(), array![[-0.7]]),
                ]);
                opt.step(&mut params, &grads).unwrap();
            }
            params
        };
        let (p1, p2) = (run(), run());
        for (k, v) in &p1 {
            for (x, y) in v.iter().zip(p2[k].iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = BTreeMap::from([("w".to_string(), array![[1.0, 2.0]])]);
        let grads = BTreeMap::from([("w".to_string(), array![[1.0]])]);
        assert!(AdamW::new(1e-3, 0.0).step(&mut params, &grads).is_err());
    }
}
