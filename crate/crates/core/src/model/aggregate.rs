//! Pooling of fused features `F1 (D2, J, A, W)` into per-joint vectors
//! `F2 (D2, J)`.

use super::layers::{softmax_backward, softmax_in_place, Mhsa, MhsaCache};
use super::params::{Grads, ParamId, ParamKind, ParamStore};
use crate::scalar::{lit, Scalar};

/// Shape of `F1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusedDims {
    pub channels: usize,
    pub joints: usize,
    pub antennas: usize,
    pub steps: usize,
}

impl FusedDims {
    #[inline]
    pub fn at(&self, d: usize, j: usize, a: usize, w: usize) -> usize {
        ((d * self.joints + j) * self.antennas + a) * self.steps + w
    }

    pub fn len(&self) -> usize {
        self.channels * self.joints * self.antennas * self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Temporal then antenna softmax attention. Each attention map is a scalar
/// point-wise convolution of the channel mean followed by a softmax.
#[derive(Debug, Clone)]
pub struct Ltsa {
    pub temporal_weight: ParamId,
    pub temporal_bias: ParamId,
    pub spatial_weight: ParamId,
    pub spatial_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct LtsaCache<T> {
    pub f1: Vec<T>,
    pub temporal_mean: Vec<T>,
    /// `(J, A, W)`
    pub alpha: Vec<T>,
    /// `(D2, J, A)`
    pub ft: Vec<T>,
    pub spatial_mean: Vec<T>,
    /// `(J, A)`
    pub beta: Vec<T>,
}

impl Ltsa {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>) -> Self {
        Self {
            temporal_weight: store.add("ltsa.temporal.weight", &[1], ParamKind::Weight { fan_in: 1 }),
            temporal_bias: store.add("ltsa.temporal.bias", &[1], ParamKind::Bias),
            spatial_weight: store.add("ltsa.spatial.weight", &[1], ParamKind::Weight { fan_in: 1 }),
            spatial_bias: store.add("ltsa.spatial.bias", &[1], ParamKind::Bias),
        }
    }

    /// Temporal attention: `α = softmax_W(c·mean_D(F1) + b)`,
    /// `Ft(:,j,a) = Σ_w α_{j,a,w} F1(:,j,a,w)`.
    pub fn temporal<T: Scalar>(&self, p: &ParamStore<T>, f1: &[T], dims: FusedDims) -> (Vec<T>, Vec<T>, Vec<T>) {
        let FusedDims {
            channels: dc,
            joints: nj,
            antennas: na,
            steps: nw,
        } = dims;
        let (cw, cb) = (p.get(self.temporal_weight)[0], p.get(self.temporal_bias)[0]);
        let inv_d: T = T::one() / lit(dc as f64);
        let mut mean = vec![T::zero(); nj * na * nw];
        for d in 0..dc {
            for j in 0..nj {
                for a in 0..na {
                    for w in 0..nw {
                        mean[(j * na + a) * nw + w] += f1[dims.at(d, j, a, w)];
                    }
                }
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_d);
        let mut alpha: Vec<T> = mean.iter().map(|&m| cw * m + cb).collect();
        for row in alpha.chunks_exact_mut(nw) {
            softmax_in_place(row);
        }
        let mut ft = vec![T::zero(); dc * nj * na];
        for d in 0..dc {
            for j in 0..nj {
                for a in 0..na {
                    let mut s = T::zero();
                    for w in 0..nw {
                        s += alpha[(j * na + a) * nw + w] * f1[dims.at(d, j, a, w)];
                    }
                    ft[(d * nj + j) * na + a] = s;
                }
            }
        }
        (ft, alpha, mean)
    }

    /// Antenna attention: `β = softmax_A(c·mean_D(Ft) + b)`,
    /// `F2(:,j) = Σ_a β_{j,a} Ft(:,j,a)`.
    pub fn spatial<T: Scalar>(&self, p: &ParamStore<T>, ft: &[T], dc: usize, nj: usize, na: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (cw, cb) = (p.get(self.spatial_weight)[0], p.get(self.spatial_bias)[0]);
        let inv_d: T = T::one() / lit(dc as f64);
        let mut mean = vec![T::zero(); nj * na];
        for d in 0..dc {
            for (m, &v) in mean.iter_mut().zip(&ft[d * nj * na..(d + 1) * nj * na]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_d);
        let mut beta: Vec<T> = mean.iter().map(|&m| cw * m + cb).collect();
        for row in beta.chunks_exact_mut(na) {
            softmax_in_place(row);
        }
        let mut f2 = vec![T::zero(); dc * nj];
        for d in 0..dc {
            for j in 0..nj {
                f2[d * nj + j] = (0..na).map(|a| beta[j * na + a] * ft[(d * nj + j) * na + a]).sum();
            }
        }
        (f2, beta, mean)
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, f1: &[T], dims: FusedDims) -> (Vec<T>, LtsaCache<T>) {
        let (ft, alpha, temporal_mean) = self.temporal(p, f1, dims);
        let (f2, beta, spatial_mean) = self.spatial(p, &ft, dims.channels, dims.joints, dims.antennas);
        (
            f2,
            LtsaCache {
                f1: f1.to_vec(),
                temporal_mean,
                alpha,
                ft,
                spatial_mean,
                beta,
            },
        )
    }

    pub fn backward<T: Scalar>(&self, p: &ParamStore<T>, cache: &LtsaCache<T>, dims: FusedDims, df2: &[T], g: &mut Grads<T>) -> Vec<T> {
        let FusedDims {
            channels: dc,
            joints: nj,
            antennas: na,
            steps: nw,
        } = dims;
        let inv_d: T = T::one() / lit(dc as f64);

        // spatial stage
        let mut dbeta = vec![T::zero(); nj * na];
        let mut dft = vec![T::zero(); dc * nj * na];
        for d in 0..dc {
            for j in 0..nj {
                let g2 = df2[d * nj + j];
                for a in 0..na {
                    let idx = (d * nj + j) * na + a;
                    dbeta[j * na + a] += g2 * cache.ft[idx];
                    dft[idx] += cache.beta[j * na + a] * g2;
                }
            }
        }
        let sw = p.get(self.spatial_weight)[0];
        let mut dsw = T::zero();
        let mut dsb = T::zero();
        let mut dmean_s = vec![T::zero(); nj * na];
        for j in 0..nj {
            let r = j * na..(j + 1) * na;
            let dl = softmax_backward(&cache.beta[r.clone()], &dbeta[r.clone()]);
            for (a, &v) in dl.iter().enumerate() {
                dsw += v * cache.spatial_mean[j * na + a];
                dsb += v;
                dmean_s[j * na + a] = sw * v * inv_d;
            }
        }
        g.get_mut(self.spatial_weight)[0] += dsw;
        g.get_mut(self.spatial_bias)[0] += dsb;
        for d in 0..dc {
            for (x, &m) in dft[d * nj * na..(d + 1) * nj * na].iter_mut().zip(&dmean_s) {
                *x += m;
            }
        }

        // temporal stage
        let mut dalpha = vec![T::zero(); nj * na * nw];
        let mut df1 = vec![T::zero(); dims.len()];
        for d in 0..dc {
            for j in 0..nj {
                for a in 0..na {
                    let gt = dft[(d * nj + j) * na + a];
                    for w in 0..nw {
                        let i = dims.at(d, j, a, w);
                        let k = (j * na + a) * nw + w;
                        dalpha[k] += gt * cache.f1[i];
                        df1[i] += cache.alpha[k] * gt;
                    }
                }
            }
        }
        let tw = p.get(self.temporal_weight)[0];
        let mut dtw = T::zero();
        let mut dtb = T::zero();
        let mut dmean_t = vec![T::zero(); nj * na * nw];
        for r in 0..nj * na {
            let range = r * nw..(r + 1) * nw;
            let dl = softmax_backward(&cache.alpha[range.clone()], &dalpha[range]);
            for (w, &v) in dl.iter().enumerate() {
                dtw += v * cache.temporal_mean[r * nw + w];
                dtb += v;
                dmean_t[r * nw + w] = tw * v * inv_d;
            }
        }
        g.get_mut(self.temporal_weight)[0] += dtw;
        g.get_mut(self.temporal_bias)[0] += dtb;
        for d in 0..dc {
            for j in 0..nj {
                for a in 0..na {
                    for w in 0..nw {
                        df1[dims.at(d, j, a, w)] += dmean_t[(j * na + a) * nw + w];
                    }
                }
            }
        }
        df1
    }
}

/// Uniform mean over time then antennas.
pub fn gap_forward<T: Scalar>(f1: &[T], dims: FusedDims) -> Vec<T> {
    let inv: T = T::one() / lit((dims.antennas * dims.steps) as f64);
    let group = dims.antennas * dims.steps;
    f1.chunks_exact(group).map(|c| c.iter().copied().sum::<T>() * inv).collect()
}

pub fn gap_backward<T: Scalar>(df2: &[T], dims: FusedDims) -> Vec<T> {
    let group = dims.antennas * dims.steps;
    let inv: T = T::one() / lit(group as f64);
    df2.iter().flat_map(|&d| std::iter::repeat_n(d * inv, group)).collect()
}

/// Per-joint self-attention over the `A·W` antenna-time tokens, followed by
/// mean pooling of the tokens.
#[derive(Debug, Clone)]
pub struct PjMhsa {
    pub attn: Mhsa,
}

#[derive(Debug, Clone)]
pub struct PjMhsaCache<T> {
    per_joint: Vec<MhsaCache<T>>,
}

impl<T> PjMhsaCache<T> {
    pub fn per_joint(&self) -> &[MhsaCache<T>] {
        &self.per_joint
    }
}

impl PjMhsa {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, width: usize, heads: usize) -> Self {
        Self {
            attn: Mhsa::new(store, "pj_mhsa", width, heads),
        }
    }

    /// Tokens of joint `j` as `(A·W, D2)` rows.
    pub fn tokens<T: Scalar>(f1: &[T], dims: FusedDims, j: usize) -> Vec<T> {
        let n = dims.antennas * dims.steps;
        let mut x = vec![T::zero(); n * dims.channels];
        for d in 0..dims.channels {
            for a in 0..dims.antennas {
                for w in 0..dims.steps {
                    x[(a * dims.steps + w) * dims.channels + d] = f1[dims.at(d, j, a, w)];
                }
            }
        }
        x
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, f1: &[T], dims: FusedDims) -> (Vec<T>, PjMhsaCache<T>) {
        let n = dims.antennas * dims.steps;
        let inv: T = T::one() / lit(n as f64);
        let mut f2 = vec![T::zero(); dims.channels * dims.joints];
        let mut per_joint = Vec::with_capacity(dims.joints);
        for j in 0..dims.joints {
            let x = Self::tokens(f1, dims, j);
            let (y, cache) = self.attn.forward(p, &x);
            for row in y.chunks_exact(dims.channels) {
                for (d, &v) in row.iter().enumerate() {
                    f2[d * dims.joints + j] += v * inv;
                }
            }
            per_joint.push(cache);
        }
        (f2, PjMhsaCache { per_joint })
    }

    pub fn backward<T: Scalar>(&self, p: &ParamStore<T>, cache: &PjMhsaCache<T>, dims: FusedDims, df2: &[T], g: &mut Grads<T>) -> Vec<T> {
        let n = dims.antennas * dims.steps;
        let inv: T = T::one() / lit(n as f64);
        let mut df1 = vec![T::zero(); dims.len()];
        for j in 0..dims.joints {
            let dy: Vec<T> = (0..n)
                .flat_map(|_| (0..dims.channels).map(move |d| df2[d * dims.joints + j] * inv))
                .collect();
            let dx = self.attn.backward(p, &cache.per_joint[j], &dy, g);
            for a in 0..dims.antennas {
                for w in 0..dims.steps {
                    for d in 0..dims.channels {
                        df1[dims.at(d, j, a, w)] += dx[(a * dims.steps + w) * dims.channels + d];
                    }
                }
            }
        }
        df1
    }
}
