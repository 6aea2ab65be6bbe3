//! Objective, schedule, optimizer, training loop, evaluation and the
//! finite-difference gradient audit.

mod fit;
mod gradcheck;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Pose};
use crate::metrics::MetricsError;
use crate::model::{ModelError, ParamStore};
use crate::scalar::{lit, Scalar};

pub use fit::{
    evaluate, evaluate_with_predictions, load_samples, train, EpochRecord, HistoryRecord, RecipeRecord, SampleSet,
    TrainHistory, TrainOptions, TrainOutcome, HISTORY_FILE,
};
pub use gradcheck::{
    finite_difference_audit, grad_check, grad_check_network, CorruptedGradient, GradCheckReport, GradCheckTarget,
    LinearProbe, NetworkProbe,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Validation every this many epochs; 0 disables periodic evaluation
    /// (the last epoch is still evaluated when a validation set is given).
    pub eval_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning-rate floor of the cosine schedule.
    pub min_lr: f64,
    /// Apply weight decay to normalization gains and biases too.
    pub decay_norms: bool,
    /// Fix the network's output offset to the mean training pose before
    /// the first step.
    pub mean_pose_offset: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 3e-4,
            weight_decay: 0.02,
            epochs: 50,
            batch_size: 256,
            seed: 0,
            eval_every: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            min_lr: 1e-7,
            decay_norms: false,
            mean_pose_offset: true,
        }
    }
}

impl TrainConfig {
    /// Single-CPU preset for the synthetic corpus.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            ..Self::default()
        }
    }

    /// `epochs = 0` is accepted and leaves the model untouched.
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(TrainError::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(TrainError::Config("invalid optimizer moments".into()));
        }
        Ok(())
    }
}

/// Mean over joints of squared Euclidean error: `(1/J)·Σ_j ‖Ŷ_j − Y_j‖²`.
pub fn mse_loss(pred: &Pose, gt: &Pose) -> f64 {
    assert_eq!(pred.num_joints(), gt.num_joints(), "joint count mismatch");
    let j = pred.num_joints().max(1) as f64;
    crate::metrics::squared_residual(pred, gt) / j
}

/// Mean of [`mse_loss`] over a batch.
pub fn batch_mse(preds: &[Pose], gts: &[Pose]) -> f64 {
    assert_eq!(preds.len(), gts.len());
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().zip(gts).map(|(p, g)| mse_loss(p, g)).sum::<f64>() / preds.len() as f64
}

/// Loss and `dL/dŶ` for flat `(J, 3)` tensors.
pub fn mse_loss_grad<T: Scalar>(pred: &[T], target: &[T]) -> (T, Vec<T>) {
    let j: T = lit((pred.len() / 3).max(1) as f64);
    let two: T = lit(2.0);
    let mut loss = T::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            loss += d * d;
            two * d / j
        })
        .collect();
    (loss / j, grad)
}

/// Cosine decay from `lr0` to zero over `total_steps`, floored at `min_lr`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let frac = if total_steps == 0 {
        1.0
    } else {
        (step.min(total_steps) as f64) / total_steps as f64
    };
    (cfg.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())).max(cfg.min_lr)
}

/// Adaptive moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    decay_norms: bool,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            decay_norms: cfg.decay_norms,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `θ ← θ(1 − lr·wd) − lr·m̂/(√v̂ + ε)`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &crate::model::Grads<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let (b1t, b2t): (T, T) = (lit(b1), lit(b2));
        let (one_b1, one_b2): (T, T) = (lit(1.0 - b1), lit(1.0 - b2));
        let step_size: T = lit(lr / bc1);
        let inv_bc2_sqrt: T = lit(1.0 / bc2.sqrt());
        let eps: T = lit(self.eps);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let decays = params.param(id).kind.decays() || self.decay_norms;
            let shrink: T = if decays { lit(1.0 - lr * self.weight_decay) } else { T::one() };
            let g = grads.get(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, x) in params.get_mut(id).iter_mut().enumerate() {
                m[k] = b1t * m[k] + one_b1 * g[k];
                v[k] = b2t * v[k] + one_b2 * g[k] * g[k];
                *x = *x * shrink - step_size * m[k] / (v[k].sqrt() * inv_bc2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamKind;

    #[test]
    fn mse_examples() {
        let p = Pose::new(vec![[3.0, 4.0, 0.0]]);
        let g = Pose::new(vec![[0.0, 0.0, 0.0]]);
        assert_eq!(mse_loss(&p, &g), 25.0);
        assert_eq!(mse_loss(&g, &g), 0.0);
        let (l, d) = mse_loss_grad(&[3.0f64, 4.0, 0.0], &[0.0, 0.0, 0.0]);
        assert_eq!(l, 25.0);
        assert_eq!(d, vec![6.0, 8.0, 0.0]);
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, 1000, &cfg), 3e-4);
        assert!(lr_at(1000, 1000, &cfg) <= 1e-6);
        assert!((lr_at(500, 1000, &cfg) - 1.5e-4).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 0..=1000 {
            let lr = lr_at(s, 1000, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn quadratic_toy_converges() {
        // f(x) = (x - 3)^2, minimum at 3
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", &[1], ParamKind::Weight { fan_in: 1 });
        let cfg = TrainConfig {
            lr0: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&store, &cfg);
        let mut g = store.zeros_like();
        for step in 0..500 {
            g.zero();
            g.get_mut(id)[0] = 2.0 * (store.get(id)[0] - 3.0);
            opt.step(&mut store, &g, lr_at(step, 500, &cfg));
        }
        assert!((store.get(id)[0] - 3.0).abs() < 1e-3, "{}", store.get(id)[0]);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", &[4], ParamKind::Weight { fan_in: 4 });
        let gain = store.add("n.gain", &[2], ParamKind::NormGain);
        store.get_mut(w).copy_from_slice(&[1.0, -2.0, 0.5, 4.0]);
        store.get_mut(gain).copy_from_slice(&[1.0, 1.0]);
        let cfg = TrainConfig {
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&store, &cfg);
        let g = store.zeros_like();
        let lr = 1e-3;
        for _ in 0..10 {
            opt.step(&mut store, &g, lr);
        }
        let f = (1.0 - lr * 0.1f64).powi(10);
        for (x, x0) in store.get(w).iter().zip([1.0, -2.0, 0.5, 4.0]) {
            assert!((x - x0 * f).abs() < 1e-15);
        }
        assert_eq!(store.get(gain), &[1.0, 1.0]);
    }
}
