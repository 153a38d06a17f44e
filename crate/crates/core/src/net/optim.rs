//! Parameter updates: AdaDelta (default, learning-rate free) and a
//! plain scaled-gradient step, plus global-norm clipping.

use super::ParamSlices;

/// Decay/epsilon settings for AdaDelta.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaDeltaParams {
    pub rho: f64,
    pub eps: f64,
}

impl Default for AdaDeltaParams {
    fn default() -> Self {
        Self { rho: 0.9, eps: 1e-6 }
    }
}

/// Optimizer with per-parameter state allocated lazily on first use.
#[derive(Debug, Clone)]
pub enum Optimizer {
    AdaDelta {
        params: AdaDeltaParams,
        /// Running averages of squared gradients and squared deltas,
        /// one flat vec per parameter slice.
        grad_sq: Vec<Vec<f64>>,
        delta_sq: Vec<Vec<f64>>,
    },
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn adadelta(params: AdaDeltaParams) -> Self {
        Self::AdaDelta { params, grad_sq: Vec::new(), delta_sq: Vec::new() }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::Sgd { lr }
    }

    /// Applies one update from `grads` to `model`. Slice counts and
    /// lengths must match between the two (they do for `zeros_like`
    /// twins).
    pub fn step(&mut self, model: &mut impl ParamSlices, grads: &impl ParamSlices) {
        let mut params = model.param_slices_mut();
        let gs = grads.param_slices();
        assert_eq!(params.len(), gs.len(), "parameter structure mismatch");
        match self {
            Self::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(gs) {
                    for (x, &dg) in p.iter_mut().zip(g.iter()) {
                        *x -= *lr * dg;
                    }
                }
            }
            Self::AdaDelta { params: hp, grad_sq, delta_sq } => {
                if grad_sq.is_empty() {
                    for g in &gs {
                        grad_sq.push(vec![0.0; g.len()]);
                        delta_sq.push(vec![0.0; g.len()]);
                    }
                }
                for (slot, (p, g)) in params.iter_mut().zip(&gs).enumerate() {
                    let eg = &mut grad_sq[slot];
                    let ed = &mut delta_sq[slot];
                    for i in 0..g.len() {
                        let grad = g[i];
                        eg[i] = hp.rho * eg[i] + (1.0 - hp.rho) * grad * grad;
                        let delta = -((ed[i] + hp.eps).sqrt() / (eg[i] + hp.eps).sqrt()) * grad;
                        ed[i] = hp.rho * ed[i] + (1.0 - hp.rho) * delta * delta;
                        p[i] += delta;
                    }
                }
            }
        }
    }
}

/// L2 norm over all gradient slices.
pub fn global_norm(grads: &impl ParamSlices) -> f64 {
    grads
        .param_slices()
        .iter()
        .map(|s| s.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients in place when their global norm exceeds
/// `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut impl ParamSlices, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for slice in grads.param_slices_mut() {
            for v in slice {
                *v *= factor;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    /// Minimal one-slice parameter holder for optimizer tests.
    struct Flat(Array1<f64>);

    impl ParamSlices for Flat {
        fn param_slices(&self) -> Vec<&[f64]> {
            vec![self.0.as_slice().unwrap()]
        }
        fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
            vec![self.0.as_slice_mut().unwrap()]
        }
        fn param_names(&self, prefix: &str) -> Vec<String> {
            vec![prefix.to_string()]
        }
    }

    #[test]
    fn zero_gradient_means_zero_update() {
        let mut model = Flat(Array1::from(vec![1.0, -2.0, 3.0]));
        let grads = Flat(Array1::zeros(3));
        let mut opt = Optimizer::adadelta(AdaDeltaParams::default());
        opt.step(&mut model, &grads);
        assert_eq!(model.0.to_vec(), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn constant_gradient_steps_stay_bounded_and_oppose_gradient() {
        let mut model = Flat(Array1::from(vec![0.0]));
        let grads = Flat(Array1::from(vec![2.5]));
        let mut opt = Optimizer::adadelta(AdaDeltaParams::default());
        let mut prev = 0.0;
        for step in 0..500 {
            opt.step(&mut model, &grads);
            let delta = model.0[0] - prev;
            assert!(delta < 0.0, "step {step} moved with the gradient");
            assert!(delta.abs() < 1.0, "step {step} unbounded: {delta}");
            prev = model.0[0];
        }
    }

    #[test]
    fn adadelta_descends_a_quadratic() {
        // f(x) = 0.5 * ||x - target||^2, gradient x - target.
        let target = [3.0, -1.0, 0.5, 2.0];
        let mut model = Flat(Array1::zeros(4));
        let mut opt = Optimizer::adadelta(AdaDeltaParams::default());
        let loss = |x: &Array1<f64>| -> f64 {
            x.iter()
                .zip(target.iter())
                .map(|(a, b)| 0.5 * (a - b) * (a - b))
                .sum()
        };
        let mut losses = Vec::new();
        for _ in 0..100 {
            let g: Vec<f64> = model
                .0
                .iter()
                .zip(target.iter())
                .map(|(a, b)| a - b)
                .collect();
            let grads = Flat(Array1::from(g));
            opt.step(&mut model, &grads);
            losses.push(loss(&model.0));
        }
        // Monotone decrease after a short warmup.
        for w in losses[5..].windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss rose: {} -> {}", w[0], w[1]);
        }
        assert!(losses.last().unwrap() < &losses[5]);
    }

    #[test]
    fn sgd_step_is_scaled_gradient() {
        let mut model = Flat(Array1::from(vec![1.0, 1.0]));
        let grads = Flat(Array1::from(vec![0.5, -0.5]));
        let mut opt = Optimizer::sgd(0.1);
        opt.step(&mut model, &grads);
        assert!((model.0[0] - 0.95).abs() < 1e-15);
        assert!((model.0[1] - 1.05).abs() < 1e-15);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut grads = Flat(Array1::from(vec![3.0, 4.0]));
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-12);
        // Under the cap nothing changes.
        let mut small = Flat(Array1::from(vec![0.3, 0.4]));
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small.0.to_vec(), vec![0.3, 0.4]);
    }
}
