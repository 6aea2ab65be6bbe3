use super::aggregate::{gap_backward, gap_forward, FusedDims, Ltsa, LtsaCache, PjMhsa, PjMhsaCache};
use super::config::{Aggregator, HeadKind, ModelConfig};
use super::encoder::{Encoder, EncoderCache};
use super::head::{GraphHead, GraphHeadCache, MlpHead, MlpHeadCache};
use super::layers::{LayerNorm, Linear, NormCache};
use super::params::{Grads, ParamStore};
use super::ModelError;
use crate::scalar::{lit, Scalar};
use crate::skeleton::SkeletonGraph;
use crate::tensor::transpose;

/// Keeps initial predictions near pose scale rather than meters away.
pub const OUTPUT_INIT_GAIN: f64 = 0.01;

#[derive(Debug, Clone)]
pub enum AggregatorLayer {
    Ltsa(Ltsa),
    Gap,
    PjMhsa(PjMhsa),
}

#[derive(Debug, Clone)]
pub enum Head {
    Graph(GraphHead),
    Mlp(MlpHead),
}

impl Head {
    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, basis: &[Vec<T>], f3: &[T]) -> (Vec<T>, HeadCache<T>) {
        match self {
            Head::Graph(h) => {
                let (y, c) = h.forward(p, basis, f3);
                (y, HeadCache::Graph(c))
            }
            Head::Mlp(h) => {
                let (y, c) = h.forward(p, f3);
                (y, HeadCache::Mlp(c))
            }
        }
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        basis: &[Vec<T>],
        cache: &HeadCache<T>,
        dy: &[T],
        g: &mut Grads<T>,
    ) -> Vec<T> {
        match (self, cache) {
            (Head::Graph(h), HeadCache::Graph(c)) => h.backward(p, basis, c, dy, g),
            (Head::Mlp(h), HeadCache::Mlp(c)) => h.backward(p, c, dy, g),
            _ => unreachable!("head cache mismatch"),
        }
    }

    pub fn cheb_applications(&self) -> usize {
        match self {
            Head::Graph(h) => h.cheb_applications(),
            Head::Mlp(_) => 0,
        }
    }
}

#[derive(Debug, Clone)]
pub enum HeadCache<T> {
    Graph(GraphHeadCache<T>),
    Mlp(MlpHeadCache<T>),
}

#[derive(Debug, Clone)]
enum AggCache<T> {
    Ltsa(LtsaCache<T>),
    Gap,
    PjMhsa(PjMhsaCache<T>),
}

/// Intermediate tensors of one forward pass, row-major in the listed shapes.
#[derive(Debug, Clone)]
pub struct ActivationTrace<T> {
    /// `(A, D1, J, W)`: encoder output per antenna.
    pub fa: Vec<T>,
    /// `(D2, J, A, W)`
    pub f1: Vec<T>,
    /// `(J, A, W)`, LTSA only.
    pub alpha: Option<Vec<T>>,
    /// `(D2, J, A)`, LTSA only.
    pub ft: Option<Vec<T>>,
    /// `(J, A)`, LTSA only.
    pub beta: Option<Vec<T>>,
    /// `(D2, J)`
    pub f2: Vec<T>,
    /// `(J, D2)`
    pub f3: Vec<T>,
    /// Graph-head latents `(J, D3)`: input of every block and the final one.
    pub block_states: Vec<Vec<T>>,
    /// `(J, 3)` in network units.
    pub output: Vec<T>,
    pub cheb_applications: usize,
}

/// Everything needed for a backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    encoder: EncoderCache<T>,
    /// Fusion input rows `(A·J·W, D1)`.
    fuse_in: Vec<T>,
    agg: AggCache<T>,
    f2: Vec<T>,
    embed: NormCache<T>,
    f3: Vec<T>,
    head: HeadCache<T>,
}

/// The complete pose network with its parameters.
#[derive(Debug, Clone)]
pub struct Network<T> {
    config: ModelConfig,
    graph: SkeletonGraph,
    basis: Vec<Vec<T>>,
    store: ParamStore<T>,
    encoder: Encoder,
    fuse: Linear,
    aggregator: AggregatorLayer,
    embed: LayerNorm,
    head: Head,
    /// Added to every prediction, `(J, 3)` in millimeters; not trained.
    output_offset_mm: Vec<f64>,
}

impl<T: Scalar> Network<T> {
    /// Builds and initializes the network from `seed`. The final regression
    /// layer is drawn at [`OUTPUT_INIT_GAIN`] of its Kaiming scale.
    pub fn new(config: ModelConfig, graph: SkeletonGraph, seed: u64) -> Result<Self, ModelError> {
        let mut net = Self::build(config, graph)?;
        net.store.initialize(seed);
        let out = match &net.head {
            Head::Graph(h) => h.output.theta,
            Head::Mlp(h) => h.output.weight,
        };
        let gain: T = lit(OUTPUT_INIT_GAIN);
        net.store.get_mut(out).iter_mut().for_each(|w| *w *= gain);
        Ok(net)
    }

    /// Builds the architecture with all parameters zero.
    pub fn build(config: ModelConfig, graph: SkeletonGraph) -> Result<Self, ModelError> {
        config.validate()?;
        if graph.joints() != config.joints {
            return Err(ModelError::Config(format!(
                "skeleton has {} joints but the model expects {}",
                graph.joints(),
                config.joints
            )));
        }
        let basis = graph.cheb_basis(config.cheb_order)?.to_scalar();
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config);
        let fuse = Linear::new(&mut store, "fuse", config.encoder_channels, config.fused_channels);
        let aggregator = match config.aggregator {
            Aggregator::Ltsa => AggregatorLayer::Ltsa(Ltsa::new(&mut store)),
            Aggregator::Gap => AggregatorLayer::Gap,
            Aggregator::PjMhsa => AggregatorLayer::PjMhsa(PjMhsa::new(&mut store, config.fused_channels, config.heads)),
        };
        let embed = LayerNorm::new(&mut store, "embed", config.fused_channels);
        let head = match config.head {
            HeadKind::Graph => Head::Graph(Self::graph_head(&mut store, &config)),
            HeadKind::Mlp => {
                let hidden = config.mlp_hidden.unwrap_or_else(|| {
                    let target = graph_head_param_count(&config);
                    MlpHead::width_for(target, config.joints, config.fused_channels)
                });
                Head::Mlp(MlpHead::new(&mut store, config.joints, config.fused_channels, hidden))
            }
        };
        let output_offset_mm = vec![0.0; config.joints * 3];
        Ok(Self {
            config,
            graph,
            basis,
            store,
            encoder,
            fuse,
            aggregator,
            embed,
            head,
            output_offset_mm,
        })
    }

    fn graph_head(store: &mut ParamStore<T>, c: &ModelConfig) -> GraphHead {
        GraphHead::new(
            store,
            c.cheb_order,
            c.fused_channels,
            c.graph_channels,
            c.blocks,
            c.heads,
            c.cheb_bias,
        )
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> &SkeletonGraph {
        &self.graph
    }

    /// Row-major `(J, J)` Chebyshev polynomials of the rescaled Laplacian.
    pub fn basis(&self) -> &[Vec<T>] {
        &self.basis
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn aggregator(&self) -> &AggregatorLayer {
        &self.aggregator
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn fuse_layer(&self) -> &Linear {
        &self.fuse
    }

    pub fn output_offset_mm(&self) -> &[f64] {
        &self.output_offset_mm
    }

    /// Sets the fixed pose added to every prediction, usually the mean
    /// training pose, so the network regresses residuals.
    pub fn set_output_offset_mm(&mut self, offset: Vec<f64>) -> Result<(), ModelError> {
        if offset.len() != self.config.joints * 3 || offset.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Shape {
                expected: vec![self.config.joints, 3],
                got: offset.len(),
            });
        }
        self.output_offset_mm = offset;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn head_param_count(&self) -> usize {
        self.store.count_prefix("head.")
    }

    /// Architecture identity: model config plus skeleton edges.
    pub fn digest(&self) -> String {
        architecture_digest(&self.config, self.graph.edges())
    }

    pub fn input_len(&self) -> usize {
        self.config.antennas * self.config.subcarriers * self.config.frames
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            graph: self.graph.clone(),
            basis: self
                .graph
                .cheb_basis(self.config.cheb_order)
                .expect("basis was built once already")
                .to_scalar(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            fuse: self.fuse.clone(),
            aggregator: self.aggregator.clone(),
            embed: self.embed.clone(),
            head: self.head.clone(),
            output_offset_mm: self.output_offset_mm.clone(),
        }
    }

    fn fused_dims(&self) -> FusedDims {
        FusedDims {
            channels: self.config.fused_channels,
            joints: self.config.joints,
            antennas: self.config.antennas,
            steps: self.config.compressed_frames,
        }
    }

    /// Shared encoder applied to every antenna plane of `z (A, S, T)`;
    /// returns `(D1, A, J, W)`.
    pub fn encode(&self, z: &[T]) -> Result<Vec<T>, ModelError> {
        self.check_input(z)?;
        Ok(self.encoder.forward(&self.store, z, self.config.antennas).0)
    }

    /// Point-wise `D1 → D2` map of encoder features `(D1, A, J, W)` into
    /// `F1 (D2, J, A, W)`.
    pub fn fuse_antennas(&self, enc: &[T]) -> Vec<T> {
        let rows = self.config.antennas * self.config.joints * self.config.compressed_frames;
        let x = transpose(self.config.encoder_channels, rows, enc);
        self.fuse_rows(&x)
    }

    fn fuse_rows(&self, rows_in: &[T]) -> Vec<T> {
        let c = &self.config;
        let y = self.fuse.forward(&self.store, rows_in);
        // y: (A, J, W, D2) → (D2, J, A, W)
        let dims = self.fused_dims();
        let mut f1 = vec![T::zero(); dims.len()];
        for a in 0..c.antennas {
            for j in 0..c.joints {
                for w in 0..c.compressed_frames {
                    let r = (a * c.joints + j) * c.compressed_frames + w;
                    for d in 0..c.fused_channels {
                        f1[dims.at(d, j, a, w)] = y[r * c.fused_channels + d];
                    }
                }
            }
        }
        f1
    }

    /// Graph or MLP head on `F3 (J, D2)` with an explicit basis.
    pub fn head_forward(&self, basis: &[Vec<T>], f3: &[T]) -> Vec<T> {
        self.head.forward(&self.store, basis, f3).0
    }

    fn check_input(&self, z: &[T]) -> Result<(), ModelError> {
        if z.len() != self.input_len() {
            return Err(ModelError::Shape {
                expected: vec![self.config.antennas, self.config.subcarriers, self.config.frames],
                got: z.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, z: &[T]) -> Result<Vec<T>, ModelError> {
        Ok(self.forward_cached(z)?.0)
    }

    /// Prediction in millimeters as `(J, 3)`.
    pub fn predict_mm(&self, z: &[T]) -> Result<Vec<f64>, ModelError> {
        let unit = self.config.output_unit_mm;
        Ok(self
            .forward(z)?
            .into_iter()
            .zip(&self.output_offset_mm)
            .map(|(v, o)| crate::scalar::to_f64(v) * unit + o)
            .collect())
    }

    pub fn forward_trace(&self, z: &[T]) -> Result<(Vec<T>, ActivationTrace<T>), ModelError> {
        let (y, cache) = self.forward_cached(z)?;
        let c = &self.config;
        let rows = c.antennas * c.joints * c.compressed_frames;
        let fa_rows = &cache.fuse_in;
        // (A·J·W, D1) → (A, D1, J·W)
        let mut fa = vec![T::zero(); fa_rows.len()];
        let jw = c.joints * c.compressed_frames;
        for r in 0..rows {
            let (a, s) = (r / jw, r % jw);
            for d in 0..c.encoder_channels {
                fa[(a * c.encoder_channels + d) * jw + s] = fa_rows[r * c.encoder_channels + d];
            }
        }
        let f1 = self.fuse_rows(&cache.fuse_in);
        let (alpha, ft, beta) = match &cache.agg {
            AggCache::Ltsa(l) => (Some(l.alpha.clone()), Some(l.ft.clone()), Some(l.beta.clone())),
            _ => (None, None, None),
        };
        let block_states = match &cache.head {
            HeadCache::Graph(g) => g.states.clone(),
            HeadCache::Mlp(_) => Vec::new(),
        };
        let trace = ActivationTrace {
            fa,
            f1,
            alpha,
            ft,
            beta,
            f2: cache.f2.clone(),
            f3: cache.f3.clone(),
            block_states,
            output: y.clone(),
            cheb_applications: self.head.cheb_applications(),
        };
        Ok((y, trace))
    }

    pub fn forward_cached(&self, z: &[T]) -> Result<(Vec<T>, ForwardCache<T>), ModelError> {
        self.check_input(z)?;
        let c = &self.config;
        let p = &self.store;
        let (enc, encoder) = self.encoder.forward(p, z, c.antennas);
        let rows = c.antennas * c.joints * c.compressed_frames;
        let fuse_in = transpose(c.encoder_channels, rows, &enc);
        let f1 = self.fuse_rows(&fuse_in);
        let dims = self.fused_dims();
        let (f2, agg) = match &self.aggregator {
            AggregatorLayer::Ltsa(l) => {
                let (f2, cache) = l.forward(p, &f1, dims);
                (f2, AggCache::Ltsa(cache))
            }
            AggregatorLayer::Gap => (gap_forward(&f1, dims), AggCache::Gap),
            AggregatorLayer::PjMhsa(m) => {
                let (f2, cache) = m.forward(p, &f1, dims);
                (f2, AggCache::PjMhsa(cache))
            }
        };
        let (f3, embed) = self.embed.forward(p, &transpose(c.fused_channels, c.joints, &f2));
        let (y, head) = self.head.forward(p, &self.basis, &f3);
        Ok((
            y,
            ForwardCache {
                encoder,
                fuse_in,
                agg,
                f2,
                embed,
                f3,
                head,
            },
        ))
    }

    /// Accumulates parameter gradients for `dL/dŶ` into `g`; returns
    /// `dL/dz`.
    pub fn backward(&self, cache: &ForwardCache<T>, dy: &[T], g: &mut Grads<T>) -> Vec<T> {
        let c = &self.config;
        let p = &self.store;
        let dims = self.fused_dims();
        let df3 = self.head.backward(p, &self.basis, &cache.head, dy, g);
        let dt = self.embed.backward(p, &cache.embed, &df3, g);
        let df2 = transpose(c.joints, c.fused_channels, &dt);
        let df1 = match (&self.aggregator, &cache.agg) {
            (AggregatorLayer::Ltsa(l), AggCache::Ltsa(lc)) => l.backward(p, lc, dims, &df2, g),
            (AggregatorLayer::Gap, AggCache::Gap) => gap_backward(&df2, dims),
            (AggregatorLayer::PjMhsa(m), AggCache::PjMhsa(mc)) => m.backward(p, mc, dims, &df2, g),
            _ => unreachable!("aggregator cache mismatch"),
        };
        let rows = c.antennas * c.joints * c.compressed_frames;
        let mut dy_rows = vec![T::zero(); rows * c.fused_channels];
        for a in 0..c.antennas {
            for j in 0..c.joints {
                for w in 0..c.compressed_frames {
                    let r = (a * c.joints + j) * c.compressed_frames + w;
                    for d in 0..c.fused_channels {
                        dy_rows[r * c.fused_channels + d] = df1[dims.at(d, j, a, w)];
                    }
                }
            }
        }
        let drows = self.fuse.backward(p, &cache.fuse_in, &dy_rows, g);
        let denc = transpose(rows, c.encoder_channels, &drows);
        self.encoder.backward(p, &cache.encoder, &denc, g)
    }

    /// MSE in network units against a target in millimeters; accumulates
    /// gradients into `g` and returns the loss.
    pub fn loss_and_grad(&self, z: &[T], target_mm: &[f64], g: &mut Grads<T>) -> Result<T, ModelError> {
        let (y, cache) = self.forward_cached(z)?;
        let target = self.target_units(target_mm)?;
        let (loss, dy) = crate::training::mse_loss_grad(&y, &target);
        self.backward(&cache, &dy, g);
        Ok(loss)
    }

    /// Converts a `(J, 3)` millimeter target into network units.
    pub fn target_units(&self, target_mm: &[f64]) -> Result<Vec<T>, ModelError> {
        if target_mm.len() != self.config.joints * 3 {
            return Err(ModelError::Shape {
                expected: vec![self.config.joints, 3],
                got: target_mm.len(),
            });
        }
        let inv = 1.0 / self.config.output_unit_mm;
        Ok(target_mm
            .iter()
            .zip(&self.output_offset_mm)
            .map(|(&v, o)| lit((v - o) * inv))
            .collect())
    }
}

/// Parameter count of the graph head for `config`, regardless of its `head`.
pub fn graph_head_param_count(config: &ModelConfig) -> usize {
    let mut store = ParamStore::<f32>::new();
    GraphHead::new(
        &mut store,
        config.cheb_order,
        config.fused_channels,
        config.graph_channels,
        config.blocks.max(1),
        config.heads,
        config.cheb_bias,
    );
    store.count()
}

pub fn architecture_digest(config: &ModelConfig, edges: &[(usize, usize)]) -> String {
    let doc = serde_json::json!({ "model": config, "edges": edges });
    super::config::hex_digest(doc.to_string().as_bytes())
}
