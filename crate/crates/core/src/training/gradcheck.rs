use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::model::{Grads, ModelConfig, Network, ParamId, ParamKind, ParamStore};
use crate::skeleton::SkeletonGraph;
use crate::training::mse_loss_grad;

/// Tensors larger than this are audited on a random subset of entries.
pub const FULL_CHECK_LIMIT: usize = 1000;
const SAMPLED_ENTRIES: usize = 64;

/// Anything with parameters, a scalar loss and an analytic gradient.
pub trait GradCheckTarget {
    fn params(&self) -> &ParamStore<f64>;
    fn params_mut(&mut self) -> &mut ParamStore<f64>;
    fn loss(&self) -> f64;
    fn analytic(&self) -> Grads<f64>;
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and entry where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
    /// Per-tensor maximum relative error.
    pub per_tensor: Vec<(String, f64)>,
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences with step `h` on every entry of small tensors and a
/// seeded sample of larger ones.
pub fn finite_difference_audit<G: GradCheckTarget>(target: &mut G, h: f64, seed: u64) -> GradCheckReport {
    let analytic = target.analytic();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = target.params().ids().collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
        per_tensor: Vec::new(),
    };
    for id in ids {
        let len = target.params().get(id).len();
        let entries: Vec<usize> = if len > FULL_CHECK_LIMIT {
            (0..SAMPLED_ENTRIES).map(|_| rng.random_range(0..len)).collect()
        } else {
            (0..len).collect()
        };
        let mut tensor_max = 0.0f64;
        for k in entries {
            let orig = target.params().get(id)[k];
            target.params_mut().get_mut(id)[k] = orig + h;
            let plus = target.loss();
            target.params_mut().get_mut(id)[k] = orig - h;
            let minus = target.loss();
            target.params_mut().get_mut(id)[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic.get(id)[k], numeric);
            report.entries_checked += 1;
            tensor_max = tensor_max.max(err);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((target.params().param(id).name.clone(), k));
            }
        }
        report.per_tensor.push((target.params().param(id).name.clone(), tensor_max));
    }
    report
}

/// The full network on a few random inputs, summed MSE loss.
pub struct NetworkProbe {
    pub net: Network<f64>,
    pub inputs: Vec<(Vec<f64>, Vec<f64>)>,
}

impl NetworkProbe {
    pub fn new(net: Network<f64>, samples: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let n_in = net.input_len();
        let n_out = net.config().joints * 3;
        let inputs = (0..samples)
            .map(|_| {
                let z: Vec<f64> = (0..n_in).map(|_| StandardNormal.sample(&mut rng)).collect();
                let y: Vec<f64> = (0..n_out).map(|_| 300.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
                (z, y)
            })
            .collect();
        Self { net, inputs }
    }
}

impl GradCheckTarget for NetworkProbe {
    fn params(&self) -> &ParamStore<f64> {
        self.net.params()
    }

    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        self.net.params_mut()
    }

    fn loss(&self) -> f64 {
        self.inputs
            .iter()
            .map(|(z, y)| {
                let pred = self.net.forward(z).expect("probe input shape");
                let t = self.net.target_units(y).expect("probe target shape");
                mse_loss_grad(&pred, &t).0
            })
            .sum()
    }

    fn analytic(&self) -> Grads<f64> {
        let mut g = self.net.params().zeros_like();
        for (z, y) in &self.inputs {
            self.net.loss_and_grad(z, y, &mut g).expect("probe shapes");
        }
        g
    }
}

/// `y = x·W + b` under MSE; an affine model with a closed-form gradient.
pub struct LinearProbe {
    store: ParamStore<f64>,
    w: ParamId,
    b: ParamId,
    x: Vec<f64>,
    y: Vec<f64>,
    rows: usize,
    fan_in: usize,
    fan_out: usize,
}

impl LinearProbe {
    pub fn new(rows: usize, fan_in: usize, fan_out: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let w = store.add("w", &[fan_in, fan_out], ParamKind::Weight { fan_in });
        let b = store.add("b", &[fan_out], ParamKind::Weight { fan_in: 1 });
        store.initialize(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let x = (0..rows * fan_in).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y = (0..rows * fan_out).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self {
            store,
            w,
            b,
            x,
            y,
            rows,
            fan_in,
            fan_out,
        }
    }

    fn residual(&self) -> Vec<f64> {
        let (w, b) = (self.store.get(self.w), self.store.get(self.b));
        let mut r = vec![0.0; self.rows * self.fan_out];
        for i in 0..self.rows {
            for o in 0..self.fan_out {
                let mut s = b[o];
                for k in 0..self.fan_in {
                    s += self.x[i * self.fan_in + k] * w[k * self.fan_out + o];
                }
                r[i * self.fan_out + o] = s - self.y[i * self.fan_out + o];
            }
        }
        r
    }
}

impl GradCheckTarget for LinearProbe {
    fn params(&self) -> &ParamStore<f64> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.store
    }

    fn loss(&self) -> f64 {
        self.residual().iter().map(|r| r * r).sum::<f64>() / self.rows as f64
    }

    fn analytic(&self) -> Grads<f64> {
        let r = self.residual();
        let mut g = self.store.zeros_like();
        let scale = 2.0 / self.rows as f64;
        for i in 0..self.rows {
            for o in 0..self.fan_out {
                let d = scale * r[i * self.fan_out + o];
                g.get_mut(self.b)[o] += d;
                for k in 0..self.fan_in {
                    g.get_mut(self.w)[k * self.fan_out + o] += d * self.x[i * self.fan_in + k];
                }
            }
        }
        g
    }
}

/// Wraps a target and perturbs one analytic gradient entry; the audit must
/// notice.
pub struct CorruptedGradient<G> {
    pub inner: G,
    pub factor: f64,
}

impl<G: GradCheckTarget> GradCheckTarget for CorruptedGradient<G> {
    fn params(&self) -> &ParamStore<f64> {
        self.inner.params()
    }

    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        self.inner.params_mut()
    }

    fn loss(&self) -> f64 {
        self.inner.loss()
    }

    fn analytic(&self) -> Grads<f64> {
        let mut g = self.inner.analytic();
        let first = self.inner.params().ids().next().expect("at least one parameter");
        let v = &mut g.get_mut(first)[0];
        *v = *v * self.factor + 1e-3;
        g
    }
}

/// Audit of the full network in `config` with the default 17-joint skeleton
/// when it fits, otherwise a chain over `config.joints` joints.
pub fn grad_check_network(config: ModelConfig, seed: u64, h: f64) -> Result<GradCheckReport, crate::model::ModelError> {
    let graph = if config.joints == crate::skeleton::DEFAULT_EDGES.len() + 1 {
        SkeletonGraph::default_skeleton()
    } else {
        let edges: Vec<_> = (1..config.joints).map(|j| (j - 1, j)).collect();
        SkeletonGraph::new(config.joints, &edges)?
    };
    let net = Network::<f64>::new(config, graph, seed)?;
    let mut probe = NetworkProbe::new(net, 2, seed);
    Ok(finite_difference_audit(&mut probe, h, seed))
}

/// Maximum relative error of the tiny configuration at `h = 1e-5`.
pub fn grad_check(seed: u64) -> f64 {
    grad_check_network(ModelConfig::tiny(), seed, 1e-5)
        .expect("tiny config is valid")
        .max_rel_error
}
