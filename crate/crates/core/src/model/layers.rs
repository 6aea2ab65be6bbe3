//! Differentiable building blocks. Every layer exposes `forward`, returning
//! its output and a cache, and `backward`, which consumes the cache,
//! accumulates parameter gradients and returns the input gradient.

use super::params::{Grads, ParamId, ParamKind, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::{gemm, Op};

pub const NORM_EPS: f64 = 1e-5;

// ── elementwise ──────────────────────────────────────────────────────────

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c: T = lit(0.797_884_560_802_865_4);
    let a: T = lit(0.044_715);
    let half: T = lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c: T = lit(0.797_884_560_802_865_4);
    let a: T = lit(0.044_715);
    let half: T = lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + lit::<T>(3.0) * a * x * x)
}

pub fn gelu_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| gelu(v)).collect()
}

/// `dy ⊙ gelu'(x)`.
pub fn gelu_backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter().zip(dy).map(|(&v, &d)| d * gelu_grad(v)).collect()
}

/// In-place numerically stable softmax.
pub fn softmax_in_place<T: Scalar>(x: &mut [T]) {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Gradient of a softmax given its output `p` and `dL/dp`.
pub fn softmax_backward<T: Scalar>(p: &[T], dp: &[T]) -> Vec<T> {
    let dot: T = p.iter().zip(dp).map(|(&a, &b)| a * b).sum();
    p.iter().zip(dp).map(|(&a, &b)| a * (b - dot)).collect()
}

// ── convolution ──────────────────────────────────────────────────────────

/// 2D convolution over `(C, N, H, W)` activations via im2col.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    n: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Self {
        let fan_in = cin * kernel.0 * kernel.1;
        Self {
            weight: store.add(
                format!("{name}.weight"),
                &[cout, cin, kernel.0, kernel.1],
                ParamKind::Weight { fan_in },
            ),
            bias: store.add(format!("{name}.bias"), &[cout], ParamKind::Bias),
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad.0 - self.kernel.0) / self.stride.0 + 1,
            (w + 2 * self.pad.1 - self.kernel.1) / self.stride.1 + 1,
        )
    }

    fn im2col<T: Scalar>(&self, x: &[T], n: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<T> {
        let (kh, kw) = self.kernel;
        let cols_n = n * ho * wo;
        let mut cols = vec![T::zero(); self.cin * kh * kw * cols_n];
        for c in 0..self.cin {
            for i in 0..kh {
                for j in 0..kw {
                    let row = ((c * kh + i) * kw + j) * cols_n;
                    for b in 0..n {
                        let plane = &x[(c * n + b) * h * w..(c * n + b + 1) * h * w];
                        for oh in 0..ho {
                            let ih = (oh * self.stride.0 + i) as isize - self.pad.0 as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                            let dst = &mut cols[row + (b * ho + oh) * wo..row + (b * ho + oh + 1) * wo];
                            for (ow, d) in dst.iter_mut().enumerate() {
                                let iw = (ow * self.stride.1 + j) as isize - self.pad.1 as isize;
                                if iw >= 0 && iw < w as isize {
                                    *d = src[iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T], cache: &ConvCache<T>) -> Vec<T> {
        let (kh, kw) = self.kernel;
        let (n, h, w, ho, wo) = (cache.n, cache.h, cache.w, cache.ho, cache.wo);
        let cols_n = n * ho * wo;
        let mut x = vec![T::zero(); self.cin * n * h * w];
        for c in 0..self.cin {
            for i in 0..kh {
                for j in 0..kw {
                    let row = ((c * kh + i) * kw + j) * cols_n;
                    for b in 0..n {
                        let base = (c * n + b) * h * w;
                        for oh in 0..ho {
                            let ih = (oh * self.stride.0 + i) as isize - self.pad.0 as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let src = &cols[row + (b * ho + oh) * wo..row + (b * ho + oh + 1) * wo];
                            for (ow, &v) in src.iter().enumerate() {
                                let iw = (ow * self.stride.1 + j) as isize - self.pad.1 as isize;
                                if iw >= 0 && iw < w as isize {
                                    x[base + ih as usize * w + iw as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// `x` is `(cin, n, h, w)`; output is `(cout, n, ho, wo)`.
    pub fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: &[T],
        n: usize,
        h: usize,
        w: usize,
    ) -> (Vec<T>, ConvCache<T>) {
        assert_eq!(x.len(), self.cin * n * h * w, "conv input shape");
        let (ho, wo) = self.out_dims(h, w);
        let cols = self.im2col(x, n, h, w, ho, wo);
        let ckk = self.cin * self.kernel.0 * self.kernel.1;
        let m = n * ho * wo;
        let bias = p.get(self.bias);
        let mut y = vec![T::zero(); self.cout * m];
        for (o, row) in y.chunks_exact_mut(m).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[o]);
        }
        gemm(self.cout, ckk, m, p.get(self.weight), Op::N, &cols, Op::N, &mut y, true);
        (y, ConvCache { cols, n, h, w, ho, wo })
    }

    pub fn backward<T: Scalar>(&self, p: &ParamStore<T>, cache: &ConvCache<T>, dy: &[T], g: &mut Grads<T>) -> Vec<T> {
        let ckk = self.cin * self.kernel.0 * self.kernel.1;
        let m = cache.n * cache.ho * cache.wo;
        gemm(self.cout, m, ckk, dy, Op::N, &cache.cols, Op::T, g.get_mut(self.weight), true);
        for (gb, row) in g.get_mut(self.bias).iter_mut().zip(dy.chunks_exact(m)) {
            *gb += row.iter().copied().sum();
        }
        let mut dcols = vec![T::zero(); ckk * m];
        gemm(ckk, self.cout, m, p.get(self.weight), Op::T, dy, Op::N, &mut dcols, false);
        self.col2im(&dcols, cache)
    }
}

// ── normalization ────────────────────────────────────────────────────────

/// Single-group GroupNorm over `(C, N, L)` activations: each sample is
/// normalized over all of its channels and positions, with a per-channel
/// affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), &[channels], ParamKind::NormGain),
            bias: store.add(format!("{name}.bias"), &[channels], ParamKind::NormBias),
            channels,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &[T], n: usize) -> (Vec<T>, NormCache<T>) {
        let c = self.channels;
        let l = x.len() / (c * n);
        let cnt: T = lit((c * l) as f64);
        let eps: T = lit(NORM_EPS);
        let (gain, bias) = (p.get(self.gain), p.get(self.bias));
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(n);
        for b in 0..n {
            let mut mean = T::zero();
            for ch in 0..c {
                mean += x[(ch * n + b) * l..(ch * n + b + 1) * l].iter().copied().sum::<T>();
            }
            mean /= cnt;
            let mut var = T::zero();
            for ch in 0..c {
                for &v in &x[(ch * n + b) * l..(ch * n + b + 1) * l] {
                    var += (v - mean) * (v - mean);
                }
            }
            let is = T::one() / (var / cnt + eps).sqrt();
            inv_std.push(is);
            for ch in 0..c {
                let r = (ch * n + b) * l..(ch * n + b + 1) * l;
                for k in r {
                    let xh = (x[k] - mean) * is;
                    xhat[k] = xh;
                    y[k] = xh * gain[ch] + bias[ch];
                }
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward<T: Scalar>(&self, p: &ParamStore<T>, cache: &NormCache<T>, dy: &[T], g: &mut Grads<T>) -> Vec<T> {
        let c = self.channels;
        let n = cache.inv_std.len();
        let l = dy.len() / (c * n);
        let cnt: T = lit((c * l) as f64);
        let gain = p.get(self.gain);
        {
            let gg = g.get_mut(self.gain);
            for ch in 0..c {
                for b in 0..n {
                    let r = (ch * n + b) * l..(ch * n + b + 1) * l;
                    gg[ch] += r.map(|k| dy[k] * cache.xhat[k]).sum::<T>();
                }
            }
        }
        {
            let gb = g.get_mut(self.bias);
            for ch in 0..c {
                gb[ch] += dy[ch * n * l..(ch + 1) * n * l].iter().copied().sum::<T>();
            }
        }
        let mut dx = vec![T::zero(); dy.len()];
        for b in 0..n {
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for ch in 0..c {
                for k in (ch * n + b) * l..(ch * n + b + 1) * l {
                    let d = dy[k] * gain[ch];
                    mean_d += d;
                    mean_dx += d * cache.xhat[k];
                }
            }
            mean_d /= cnt;
            mean_dx /= cnt;
            let is = cache.inv_std[b];
            for ch in 0..c {
                for k in (ch * n + b) * l..(ch * n + b + 1) * l {
                    let d = dy[k] * gain[ch];
                    dx[k] = is * (d - mean_d - cache.xhat[k] * mean_dx);
                }
            }
        }
        dx
    }
}

/// LayerNorm over the last axis of a `(rows, width)` matrix.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub width: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), &[width], ParamKind::NormGain),
            bias: store.add(format!("{name}.bias"), &[width], ParamKind::NormBias),
            width,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &[T]) -> (Vec<T>, NormCache<T>) {
        let c = self.width;
        let cnt: T = lit(c as f64);
        let eps: T = lit(NORM_EPS);
        let (gain, bias) = (p.get(self.gain), p.get(self.bias));
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(x.len() / c);
        for (r, row) in x.chunks_exact(c).enumerate() {
            let mean = row.iter().copied().sum::<T>() / cnt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cnt;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for k in 0..c {
                let xh = (row[k] - mean) * is;
                xhat[r * c + k] = xh;
                y[r * c + k] = xh * gain[k] + bias[k];
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward<T: Scalar>(&self, p: &ParamStore<T>, cache: &NormCache<T>, dy: &[T], g: &mut Grads<T>) -> Vec<T> {
        let c = self.width;
        let cnt: T = lit(c as f64);
        let gain = p.get(self.gain);
        {
            let gg = g.get_mut(self.gain);
            for (drow, xrow) in dy.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
                for k in 0..c {
                    gg[k] += drow[k] * xrow[k];
                }
            }
        }
        {
            let gb = g.get_mut(self.bias);
            for drow in dy.chunks_exact(c) {
                for k in 0..c {
                    gb[k] += drow[k];
                }
            }
        }
        let mut dx = vec![T::zero(); dy.len()];
        for (r, (drow, xrow)) in dy.chunks_exact(c).zip(cache.xhat.chunks_exact(c)).enumerate() {
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for k in 0..c {
                let d = drow[k] * gain[k];
                mean_d += d;
                mean_dx += d * xrow[k];
            }
            mean_d /= cnt;
            mean_dx /= cnt;
            let is = cache.inv_std[r];
            for k in 0..c {
                dx[r * c + k] = is * (drow[k] * gain[k] - mean_d - xrow[k] * mean_dx);
            }
        }
        dx
    }
}

// ── dense ────────────────────────────────────────────────────────────────

/// `y = x·W + b` on `(rows, fan_in)` inputs, `W` stored `(fan_in, fan_out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), &[fan_in, fan_out], ParamKind::Weight { fan_in }),
            bias: store.add(format!("{name}.bias"), &[fan_out], ParamKind::Bias),
            fan_in,
            fan_out,
        }
    }

    pub fn param_count(&self) -> usize {
        (self.fan_in + 1) * self.fan_out
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let rows = x.len() / self.fan_in;
        let bias = p.get(self.bias);
        let mut y: Vec<T> = (0..rows).flat_map(|_| bias.iter().copied()).collect();
        gemm(rows, self.fan_in, self.fan_out, x, Op::N, p.get(self.weight), Op::N, &mut y, true);
        y
    }

    /// `x` is the forward input.
    pub fn backward<T: Scalar>(&self, p: &ParamStore<T>, x: &[T], dy: &[T], g: &mut Grads<T>) -> Vec<T> {
        let rows = x.len() / self.fan_in;
        gemm(self.fan_in, rows, self.fan_out, x, Op::T, dy, Op::N, g.get_mut(self.weight), true);
        {
            let gb = g.get_mut(self.bias);
            for row in dy.chunks_exact(self.fan_out) {
                for (b, &d) in gb.iter_mut().zip(row) {
                    *b += d;
                }
            }
        }
        let mut dx = vec![T::zero(); x.len()];
        gemm(rows, self.fan_out, self.fan_in, dy, Op::N, p.get(self.weight), Op::T, &mut dx, false);
        dx
    }
}

// ── pooling ──────────────────────────────────────────────────────────────

/// Adaptive average pooling bins: `[floor(i·n/m), ceil((i+1)·n/m))`.
pub fn adaptive_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| ((i * input) / output, ((i + 1) * input).div_ceil(output)))
        .collect()
}

/// Adaptive average pooling of `(P, H, W)` planes to `(P, oh, ow)`.
pub fn adaptive_pool_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let (rb, cb) = (adaptive_bins(h, oh), adaptive_bins(w, ow));
    let mut y = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for &(r0, r1) in &rb {
            for &(c0, c1) in &cb {
                let mut s = T::zero();
                for r in r0..r1 {
                    for c in c0..c1 {
                        s += plane[r * w + c];
                    }
                }
                y.push(s / lit(((r1 - r0) * (c1 - c0)) as f64));
            }
        }
    }
    y
}

pub fn adaptive_pool_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let (rb, cb) = (adaptive_bins(h, oh), adaptive_bins(w, ow));
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for (i, &(r0, r1)) in rb.iter().enumerate() {
            for (j, &(c0, c1)) in cb.iter().enumerate() {
                let d = dy[(p * oh + i) * ow + j] / lit(((r1 - r0) * (c1 - c0)) as f64);
                for r in r0..r1 {
                    for c in c0..c1 {
                        dx[(p * h + r) * w + c] += d;
                    }
                }
            }
        }
    }
    dx
}

// ── graph convolution ────────────────────────────────────────────────────

/// Chebyshev graph convolution `Y = Σ_k T_k(L̃)·X·Θ_k (+ b)` on `(J, C)`
/// node features.
#[derive(Debug, Clone)]
pub struct ChebConv {
    pub theta: ParamId,
    pub bias: Option<ParamId>,
    pub order: usize,
    pub cin: usize,
    pub cout: usize,
}

#[derive(Debug, Clone)]
pub struct ChebCache<T> {
    /// `T_k·X` for every k (k = 0 is `X` itself).
    propagated: Vec<Vec<T>>,
}

impl ChebConv {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, order: usize, cin: usize, cout: usize, bias: bool) -> Self {
        Self {
            theta: store.add(
                format!("{name}.theta"),
                &[order, cin, cout],
                ParamKind::Weight { fan_in: order * cin },
            ),
            bias: bias.then(|| store.add(format!("{name}.bias"), &[cout], ParamKind::Bias)),
            order,
            cin,
            cout,
        }
    }

    pub fn param_count(&self) -> usize {
        self.order * self.cin * self.cout + if self.bias.is_some() { self.cout } else { 0 }
    }

    /// `basis[k]` is the row-major `(J, J)` polynomial `T_k`.
    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, basis: &[Vec<T>], x: &[T]) -> (Vec<T>, ChebCache<T>) {
        assert_eq!(basis.len(), self.order, "Chebyshev basis order mismatch");
        let j = x.len() / self.cin;
        assert_eq!(j * self.cin, x.len(), "ChebConv input width");
        let theta = p.get(self.theta);
        let mut y = match self.bias {
            Some(b) => (0..j).flat_map(|_| p.get(b).iter().copied()).collect(),
            None => vec![T::zero(); j * self.cout],
        };
        let mut propagated = Vec::with_capacity(self.order);
        for (k, poly) in basis.iter().enumerate() {
            let z = if k == 0 {
                x.to_vec()
            } else {
                crate::tensor::matmul(j, j, self.cin, poly, x)
            };
            let tk = &theta[k * self.cin * self.cout..(k + 1) * self.cin * self.cout];
            gemm(j, self.cin, self.cout, &z, Op::N, tk, Op::N, &mut y, true);
            propagated.push(z);
        }
        (y, ChebCache { propagated })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        basis: &[Vec<T>],
        cache: &ChebCache<T>,
        dy: &[T],
        g: &mut Grads<T>,
    ) -> Vec<T> {
        let j = dy.len() / self.cout;
        let theta = p.get(self.theta);
        if let Some(b) = self.bias {
            let gb = g.get_mut(b);
            for row in dy.chunks_exact(self.cout) {
                for (x, &d) in gb.iter_mut().zip(row) {
                    *x += d;
                }
            }
        }
        let block = self.cin * self.cout;
        let mut dx = vec![T::zero(); j * self.cin];
        for (k, poly) in basis.iter().enumerate() {
            let z = &cache.propagated[k];
            gemm(
                self.cin,
                j,
                self.cout,
                z,
                Op::T,
                dy,
                Op::N,
                &mut g.get_mut(self.theta)[k * block..(k + 1) * block],
                true,
            );
            let mut dz = vec![T::zero(); j * self.cin];
            gemm(j, self.cout, self.cin, dy, Op::N, &theta[k * block..(k + 1) * block], Op::T, &mut dz, false);
            if k == 0 {
                crate::tensor::add_assign(&mut dx, &dz);
            } else {
                gemm(j, j, self.cin, poly, Op::T, &dz, Op::N, &mut dx, true);
            }
        }
        dx
    }
}

// ── attention ────────────────────────────────────────────────────────────

/// Multi-head scaled dot-product self-attention over `(tokens, C)` inputs,
/// without positional encodings.
#[derive(Debug, Clone)]
pub struct Mhsa {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct MhsaCache<T> {
    x: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Per-head `(tokens, tokens)` attention rows.
    attn: Vec<Vec<T>>,
    concat: Vec<T>,
}

impl<T> MhsaCache<T> {
    pub fn attention(&self) -> &[Vec<T>] {
        &self.attn
    }
}

fn head_slice<T: Scalar>(x: &[T], rows: usize, width: usize, h: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * dh);
    for r in 0..rows {
        out.extend_from_slice(&x[r * width + h * dh..r * width + (h + 1) * dh]);
    }
    out
}

fn scatter_head<T: Scalar>(dst: &mut [T], src: &[T], rows: usize, width: usize, h: usize, dh: usize) {
    for r in 0..rows {
        for d in 0..dh {
            dst[r * width + h * dh + d] += src[r * dh + d];
        }
    }
}

impl Mhsa {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, heads: usize) -> Self {
        assert!(heads > 0 && width % heads == 0, "width {width} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), width, width),
            k: Linear::new(store, &format!("{name}.k"), width, width),
            v: Linear::new(store, &format!("{name}.v"), width, width),
            o: Linear::new(store, &format!("{name}.o"), width, width),
            heads,
            width,
        }
    }

    pub fn param_count(&self) -> usize {
        4 * self.q.param_count()
    }

    /// Attention branch only: `concat_h(softmax(Q_h K_hᵀ/√d_h) V_h)·W_o + b_o`.
    pub fn branch_forward<T: Scalar>(&self, p: &ParamStore<T>, x: &[T]) -> (Vec<T>, MhsaCache<T>) {
        let c = self.width;
        let n = x.len() / c;
        let dh = c / self.heads;
        let scale: T = T::one() / lit::<T>(dh as f64).sqrt();
        let q = self.q.forward(p, x);
        let k = self.k.forward(p, x);
        let v = self.v.forward(p, x);
        let mut concat = vec![T::zero(); n * c];
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (
                head_slice(&q, n, c, h, dh),
                head_slice(&k, n, c, h, dh),
                head_slice(&v, n, c, h, dh),
            );
            let mut s = vec![T::zero(); n * n];
            gemm(n, dh, n, &qh, Op::N, &kh, Op::T, &mut s, false);
            for row in s.chunks_exact_mut(n) {
                row.iter_mut().for_each(|x| *x *= scale);
                softmax_in_place(row);
            }
            let mut oh = vec![T::zero(); n * dh];
            gemm(n, n, dh, &s, Op::N, &vh, Op::N, &mut oh, false);
            scatter_head(&mut concat, &oh, n, c, h, dh);
            attn.push(s);
        }
        let out = self.o.forward(p, &concat);
        (
            out,
            MhsaCache {
                x: x.to_vec(),
                q,
                k,
                v,
                attn,
                concat,
            },
        )
    }

    pub fn branch_backward<T: Scalar>(&self, p: &ParamStore<T>, cache: &MhsaCache<T>, dy: &[T], g: &mut Grads<T>) -> Vec<T> {
        let c = self.width;
        let n = cache.x.len() / c;
        let dh = c / self.heads;
        let scale: T = T::one() / lit::<T>(dh as f64).sqrt();
        let dconcat = self.o.backward(p, &cache.concat, dy, g);
        let mut dq = vec![T::zero(); n * c];
        let mut dk = vec![T::zero(); n * c];
        let mut dv = vec![T::zero(); n * c];
        for h in 0..self.heads {
            let (qh, kh, vh) = (
                head_slice(&cache.q, n, c, h, dh),
                head_slice(&cache.k, n, c, h, dh),
                head_slice(&cache.v, n, c, h, dh),
            );
            let doh = head_slice(&dconcat, n, c, h, dh);
            let pm = &cache.attn[h];
            let mut dp = vec![T::zero(); n * n];
            gemm(n, dh, n, &doh, Op::N, &vh, Op::T, &mut dp, false);
            let mut dvh = vec![T::zero(); n * dh];
            gemm(n, n, dh, pm, Op::T, &doh, Op::N, &mut dvh, false);
            let mut ds = vec![T::zero(); n * n];
            for r in 0..n {
                let row = softmax_backward(&pm[r * n..(r + 1) * n], &dp[r * n..(r + 1) * n]);
                for (d, v) in ds[r * n..(r + 1) * n].iter_mut().zip(row) {
                    *d = v * scale;
                }
            }
            let mut dqh = vec![T::zero(); n * dh];
            gemm(n, n, dh, &ds, Op::N, &kh, Op::N, &mut dqh, false);
            let mut dkh = vec![T::zero(); n * dh];
            gemm(n, n, dh, &ds, Op::T, &qh, Op::N, &mut dkh, false);
            scatter_head(&mut dq, &dqh, n, c, h, dh);
            scatter_head(&mut dk, &dkh, n, c, h, dh);
            scatter_head(&mut dv, &dvh, n, c, h, dh);
        }
        let mut dx = self.q.backward(p, &cache.x, &dq, g);
        crate::tensor::add_assign(&mut dx, &self.k.backward(p, &cache.x, &dk, g));
        crate::tensor::add_assign(&mut dx, &self.v.backward(p, &cache.x, &dv, g));
        dx
    }

    /// Residual self-attention `x + branch(x)`.
    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &[T]) -> (Vec<T>, MhsaCache<T>) {
        let (mut y, cache) = self.branch_forward(p, x);
        crate::tensor::add_assign(&mut y, x);
        (y, cache)
    }

    pub fn backward<T: Scalar>(&self, p: &ParamStore<T>, cache: &MhsaCache<T>, dy: &[T], g: &mut Grads<T>) -> Vec<T> {
        let mut dx = self.branch_backward(p, cache, dy, g);
        crate::tensor::add_assign(&mut dx, dy);
        dx
    }
}
