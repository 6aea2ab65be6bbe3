//! Shared per-antenna residual CNN over the (subcarrier, time) plane.

use super::config::ModelConfig;
use super::layers::{
    adaptive_pool_backward, adaptive_pool_forward, gelu_backward, gelu_forward, Conv2d, ConvCache, GroupNorm,
    NormCache,
};
use super::params::{Grads, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::add_assign;

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub norm1: GroupNorm,
    pub conv2: Conv2d,
    pub norm2: GroupNorm,
    /// 1×1 strided projection when the shape changes.
    pub proj: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct ResBlockCache<T> {
    conv1: ConvCache<T>,
    norm1: NormCache<T>,
    pre_act1: Vec<T>,
    conv2: ConvCache<T>,
    norm2: NormCache<T>,
    proj: Option<ConvCache<T>>,
    pre_act_out: Vec<T>,
}

impl ResBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, stride: (usize, usize)) -> Self {
        let proj = (cin != cout || stride != (1, 1))
            .then(|| Conv2d::new(store, &format!("{name}.proj"), cin, cout, (1, 1), stride, (0, 0)));
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, (3, 3), stride, (1, 1)),
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cout),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, (3, 3), (1, 1), (1, 1)),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout),
            proj,
        }
    }

    fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &[T], n: usize, h: usize, w: usize) -> (Vec<T>, ResBlockCache<T>) {
        let (ho, wo) = self.conv1.out_dims(h, w);
        let (h1, conv1) = self.conv1.forward(p, x, n, h, w);
        let (pre_act1, norm1) = self.norm1.forward(p, &h1, n);
        let a1 = gelu_forward(&pre_act1);
        let (h2, conv2) = self.conv2.forward(p, &a1, n, ho, wo);
        let (mut pre_act_out, norm2) = self.norm2.forward(p, &h2, n);
        let proj = match &self.proj {
            Some(pc) => {
                let (s, c) = pc.forward(p, x, n, h, w);
                add_assign(&mut pre_act_out, &s);
                Some(c)
            }
            None => {
                add_assign(&mut pre_act_out, x);
                None
            }
        };
        let out = gelu_forward(&pre_act_out);
        (
            out,
            ResBlockCache {
                conv1,
                norm1,
                pre_act1,
                conv2,
                norm2,
                proj,
                pre_act_out,
            },
        )
    }

    fn backward<T: Scalar>(&self, p: &ParamStore<T>, cache: &ResBlockCache<T>, dy: &[T], g: &mut Grads<T>) -> Vec<T> {
        let ds = gelu_backward(&cache.pre_act_out, dy);
        let dh2 = self.norm2.backward(p, &cache.norm2, &ds, g);
        let da1 = self.conv2.backward(p, &cache.conv2, &dh2, g);
        let dn1 = gelu_backward(&cache.pre_act1, &da1);
        let dh1 = self.norm1.backward(p, &cache.norm1, &dn1, g);
        let mut dx = self.conv1.backward(p, &cache.conv1, &dh1, g);
        match (&self.proj, &cache.proj) {
            (Some(pc), Some(c)) => add_assign(&mut dx, &pc.backward(p, c, &ds, g)),
            _ => add_assign(&mut dx, &ds),
        }
        dx
    }
}

/// Stem conv, three residual blocks, then adaptive average pooling to
/// `(joints, compressed_frames)`. Stride 2 is applied along an axis while
/// the halved length still covers the pooled target.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub stem: Conv2d,
    pub stem_norm: GroupNorm,
    pub blocks: Vec<ResBlock>,
    /// Spatial size entering each block and after the last one.
    pub dims: Vec<(usize, usize)>,
    pub out_channels: usize,
    pub out_rows: usize,
    pub out_cols: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    stem: ConvCache<T>,
    stem_norm: NormCache<T>,
    stem_pre_act: Vec<T>,
    blocks: Vec<ResBlockCache<T>>,
    n: usize,
}

impl Encoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &ModelConfig) -> Self {
        let widths = config.encoder_widths();
        let stem = Conv2d::new(store, "encoder.stem", 1, widths[0], (3, 3), (1, 1), (1, 1));
        let stem_norm = GroupNorm::new(store, "encoder.stem_norm", widths[0]);
        let (mut h, mut w) = (config.subcarriers, config.frames);
        let mut dims = vec![(h, w)];
        let mut blocks = Vec::with_capacity(3);
        for b in 0..3 {
            let sh = if h.div_ceil(2) >= config.joints { 2 } else { 1 };
            let sw = if w.div_ceil(2) >= config.compressed_frames { 2 } else { 1 };
            blocks.push(ResBlock::new(
                store,
                &format!("encoder.block{b}"),
                widths[b],
                widths[b + 1],
                (sh, sw),
            ));
            h = h.div_ceil(sh);
            w = w.div_ceil(sw);
            dims.push((h, w));
        }
        Self {
            stem,
            stem_norm,
            blocks,
            dims,
            out_channels: widths[3],
            out_rows: config.joints,
            out_cols: config.compressed_frames,
        }
    }

    /// `x` holds `n` single-channel `(h, w)` planes; output is
    /// `(D1, n, J, W)`.
    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &[T], n: usize) -> (Vec<T>, EncoderCache<T>) {
        let (h, w) = self.dims[0];
        let (s, stem) = self.stem.forward(p, x, n, h, w);
        let (stem_pre_act, stem_norm) = self.stem_norm.forward(p, &s, n);
        let mut act = gelu_forward(&stem_pre_act);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate() {
            let (bh, bw) = self.dims[b];
            let (y, c) = block.forward(p, &act, n, bh, bw);
            act = y;
            caches.push(c);
        }
        let (fh, fw) = *self.dims.last().expect("dims");
        let out = adaptive_pool_forward(&act, self.out_channels * n, fh, fw, self.out_rows, self.out_cols);
        (
            out,
            EncoderCache {
                stem,
                stem_norm,
                stem_pre_act,
                blocks: caches,
                n,
            },
        )
    }

    pub fn backward<T: Scalar>(&self, p: &ParamStore<T>, cache: &EncoderCache<T>, dy: &[T], g: &mut Grads<T>) -> Vec<T> {
        let (fh, fw) = *self.dims.last().expect("dims");
        let mut d = adaptive_pool_backward(dy, self.out_channels * cache.n, fh, fw, self.out_rows, self.out_cols);
        for (block, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            d = block.backward(p, c, &d, g);
        }
        let d = gelu_backward(&cache.stem_pre_act, &d);
        let d = self.stem_norm.backward(p, &cache.stem_norm, &d, g);
        self.stem.backward(p, &cache.stem, &d, g)
    }
}
