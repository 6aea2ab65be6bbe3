//! Pose regression heads operating on joint features `F3 (J, D2)`.

use super::layers::{gelu_backward, gelu_forward, ChebCache, ChebConv, LayerNorm, Linear, Mhsa, MhsaCache, NormCache};
use super::params::{Grads, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::add_assign;

/// Pre-norm residual block: two Chebyshev convolutions then self-attention
/// over joints.
#[derive(Debug, Clone)]
pub struct GraphBlock {
    pub norm1: LayerNorm,
    pub cheb1: ChebConv,
    pub norm2: LayerNorm,
    pub cheb2: ChebConv,
    pub norm3: LayerNorm,
    pub attn: Mhsa,
}

#[derive(Debug, Clone)]
pub struct GraphBlockCache<T> {
    n1: NormCache<T>,
    c1: ChebCache<T>,
    pre1: Vec<T>,
    n2: NormCache<T>,
    c2: ChebCache<T>,
    pre2: Vec<T>,
    n3: NormCache<T>,
    attn: MhsaCache<T>,
}

impl<T> GraphBlockCache<T> {
    pub fn attention(&self) -> &MhsaCache<T> {
        &self.attn
    }
}

impl GraphBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, order: usize, width: usize, heads: usize, bias: bool) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width),
            cheb1: ChebConv::new(store, &format!("{name}.cheb1"), order, width, width, bias),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width),
            cheb2: ChebConv::new(store, &format!("{name}.cheb2"), order, width, width, bias),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), width),
            attn: Mhsa::new(store, &format!("{name}.attn"), width, heads),
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, basis: &[Vec<T>], x: &[T]) -> (Vec<T>, GraphBlockCache<T>) {
        let (h, n1) = self.norm1.forward(p, x);
        let (pre1, c1) = self.cheb1.forward(p, basis, &h);
        let mut x1 = gelu_forward(&pre1);
        add_assign(&mut x1, x);

        let (h, n2) = self.norm2.forward(p, &x1);
        let (pre2, c2) = self.cheb2.forward(p, basis, &h);
        let mut x2 = gelu_forward(&pre2);
        add_assign(&mut x2, &x1);

        let (h, n3) = self.norm3.forward(p, &x2);
        let (mut x3, attn) = self.attn.branch_forward(p, &h);
        add_assign(&mut x3, &x2);
        (
            x3,
            GraphBlockCache {
                n1,
                c1,
                pre1,
                n2,
                c2,
                pre2,
                n3,
                attn,
            },
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        basis: &[Vec<T>],
        cache: &GraphBlockCache<T>,
        dy: &[T],
        g: &mut Grads<T>,
    ) -> Vec<T> {
        let dh = self.attn.branch_backward(p, &cache.attn, dy, g);
        let mut dx2 = self.norm3.backward(p, &cache.n3, &dh, g);
        add_assign(&mut dx2, dy);

        let d = gelu_backward(&cache.pre2, &dx2);
        let d = self.cheb2.backward(p, basis, &cache.c2, &d, g);
        let mut dx1 = self.norm2.backward(p, &cache.n2, &d, g);
        add_assign(&mut dx1, &dx2);

        let d = gelu_backward(&cache.pre1, &dx1);
        let d = self.cheb1.backward(p, basis, &cache.c1, &d, g);
        let mut dx = self.norm1.backward(p, &cache.n1, &d, g);
        add_assign(&mut dx, &dx1);
        dx
    }
}

/// Input Chebyshev convolution, `N` blocks, output Chebyshev convolution.
#[derive(Debug, Clone)]
pub struct GraphHead {
    pub input: ChebConv,
    pub blocks: Vec<GraphBlock>,
    pub output: ChebConv,
}

#[derive(Debug, Clone)]
pub struct GraphHeadCache<T> {
    input: ChebCache<T>,
    /// Block inputs followed by the last block's output, each `(J, D3)`.
    pub states: Vec<Vec<T>>,
    pub blocks: Vec<GraphBlockCache<T>>,
    output: ChebCache<T>,
}

impl GraphHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        order: usize,
        cin: usize,
        width: usize,
        blocks: usize,
        heads: usize,
        bias: bool,
    ) -> Self {
        Self {
            input: ChebConv::new(store, "head.input", order, cin, width, bias),
            blocks: (0..blocks)
                .map(|b| GraphBlock::new(store, &format!("head.block{b}"), order, width, heads, bias))
                .collect(),
            output: ChebConv::new(store, "head.output", order, width, 3, bias),
        }
    }

    /// Number of Chebyshev convolutions evaluated per forward pass.
    pub fn cheb_applications(&self) -> usize {
        2 * self.blocks.len() + 2
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, basis: &[Vec<T>], f3: &[T]) -> (Vec<T>, GraphHeadCache<T>) {
        let (mut x, input) = self.input.forward(p, basis, f3);
        let mut states = Vec::with_capacity(self.blocks.len() + 1);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(p, basis, &x);
            states.push(std::mem::replace(&mut x, y));
            caches.push(c);
        }
        let (y, output) = self.output.forward(p, basis, &x);
        states.push(x);
        (
            y,
            GraphHeadCache {
                input,
                states,
                blocks: caches,
                output,
            },
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        basis: &[Vec<T>],
        cache: &GraphHeadCache<T>,
        dy: &[T],
        g: &mut Grads<T>,
    ) -> Vec<T> {
        let mut d = self.output.backward(p, basis, &cache.output, dy, g);
        for (block, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            d = block.backward(p, basis, c, &d, g);
        }
        self.input.backward(p, basis, &cache.input, &d, g)
    }
}

/// Flatten, one GELU hidden layer, linear map to `J·3`.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub hidden: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpHeadCache<T> {
    x: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
}

impl MlpHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, joints: usize, cin: usize, hidden: usize) -> Self {
        Self {
            hidden: Linear::new(store, "head.hidden", joints * cin, hidden),
            output: Linear::new(store, "head.output", hidden, joints * 3),
        }
    }

    /// Hidden width whose parameter count is closest to `target`.
    pub fn width_for(target: usize, joints: usize, cin: usize) -> usize {
        let fixed = 3 * joints;
        let per_unit = joints * cin + 1 + 3 * joints;
        let h = (target.saturating_sub(fixed) as f64 / per_unit as f64).round() as usize;
        h.max(1)
    }

    pub fn param_count(&self) -> usize {
        self.hidden.param_count() + self.output.param_count()
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, f3: &[T]) -> (Vec<T>, MlpHeadCache<T>) {
        let pre = self.hidden.forward(p, f3);
        let act = gelu_forward(&pre);
        let y = self.output.forward(p, &act);
        (
            y,
            MlpHeadCache {
                x: f3.to_vec(),
                pre,
                act,
            },
        )
    }

    pub fn backward<T: Scalar>(&self, p: &ParamStore<T>, cache: &MlpHeadCache<T>, dy: &[T], g: &mut Grads<T>) -> Vec<T> {
        let da = self.output.backward(p, &cache.act, dy, g);
        let dpre = gelu_backward(&cache.pre, &da);
        self.hidden.backward(p, &cache.x, &dpre, g)
    }
}
