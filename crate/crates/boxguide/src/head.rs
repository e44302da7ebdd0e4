//! A fixed linear cross-attention surrogate over a latent grid.
//!
//! Each token `i` owns a frozen unit-norm projection vector `w_i`. At every
//! grid cell `u` the head forms logits `l_i(u) = <z_u, w_i> / temperature`
//! plus an implicit background logit of 0, and normalizes with a softmax
//! *across tokens* at that cell — the same normalization axis a text-to-image
//! cross-attention layer uses (each spatial query distributes its attention
//! over the text tokens). The per-token map `a_i(u)` is then a raw,
//! unnormalized-over-space attention map, which is exactly what the energy
//! terms expect.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::TokenAttention;

/// Fixed, seeded linear attention head.
#[derive(Debug, Clone)]
pub struct ToyAttentionHead {
    /// `(n_tokens, channels)` projection matrix with unit-norm rows.
    weights: Array2<f64>,
    temperature: f64,
}

impl ToyAttentionHead {
    /// Draws `n_tokens` unit-norm projection vectors from a seeded stream.
    pub fn new(n_tokens: usize, channels: usize, temperature: f64, seed: u64) -> Result<Self> {
        if n_tokens == 0 || channels == 0 {
            return Err(Error::InvalidConfig(
                "head needs at least one token and one channel".into(),
            ));
        }
        if temperature <= 0.0 {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Array2::zeros((n_tokens, channels));
        for mut row in weights.rows_mut() {
            let mut norm2 = 0.0;
            for v in row.iter_mut() {
                let x: f64 = StandardNormal.sample(&mut rng);
                *v = x;
                norm2 += x * x;
            }
            let norm = norm2.sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        Ok(ToyAttentionHead {
            weights,
            temperature,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.weights.nrows()
    }

    pub fn channels(&self) -> usize {
        self.weights.ncols()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Per-cell token probabilities, shape `(n_tokens + 1, H, W)`; the last
    /// slice is the background. Columns sum to 1 at every cell.
    pub fn probabilities(&self, z: &Array3<f64>) -> Array3<f64> {
        let (h, w, c) = z.dim();
        debug_assert_eq!(c, self.channels());
        let nt = self.n_tokens();
        let mut p = Array3::zeros((nt + 1, h, w));
        for r in 0..h {
            for col in 0..w {
                // Token logits plus the background logit 0, softmaxed stably.
                let mut maxl = 0.0f64;
                for t in 0..nt {
                    let mut dot = 0.0;
                    for ch in 0..c {
                        dot += z[[r, col, ch]] * self.weights[[t, ch]];
                    }
                    let l = dot / self.temperature;
                    p[[t, r, col]] = l;
                    if l > maxl {
                        maxl = l;
                    }
                }
                let mut sum = (-maxl).exp(); // background term
                for t in 0..nt {
                    let e = (p[[t, r, col]] - maxl).exp();
                    p[[t, r, col]] = e;
                    sum += e;
                }
                for t in 0..nt {
                    p[[t, r, col]] /= sum;
                }
                p[[nt, r, col]] = (-maxl).exp() / sum;
            }
        }
        p
    }

    /// Raw attention map for token `i`.
    pub fn attention(&self, z: &Array3<f64>, i: usize) -> Result<TokenAttention> {
        if i >= self.n_tokens() {
            return Err(Error::InvalidConfig(format!(
                "token index {i} out of range for {} tokens",
                self.n_tokens()
            )));
        }
        let p = self.probabilities(z);
        TokenAttention::raw(p.index_axis(ndarray::Axis(0), i).to_owned())
    }

    /// Pulls a gradient w.r.t. the per-cell token probabilities back to the
    /// latent: first through the per-cell softmax Jacobian, then through the
    /// linear projections. `dp` has shape `(n_tokens + 1, H, W)`.
    pub fn backward(&self, p: &Array3<f64>, dp: &Array3<f64>) -> Array3<f64> {
        let (ntb, h, w) = p.dim();
        let nt = ntb - 1;
        let c = self.channels();
        let mut grad = Array3::zeros((h, w, c));
        for r in 0..h {
            for col in 0..w {
                // Softmax Jacobian at this cell: dl_j = p_j (dp_j - sum_k p_k dp_k).
                let mut inner = 0.0;
                for t in 0..ntb {
                    inner += p[[t, r, col]] * dp[[t, r, col]];
                }
                for t in 0..nt {
                    let dl = p[[t, r, col]] * (dp[[t, r, col]] - inner);
                    if dl != 0.0 {
                        for ch in 0..c {
                            grad[[r, col, ch]] += dl * self.weights[[t, ch]] / self.temperature;
                        }
                    }
                }
                // The background row has no projection vector; its logit is a
                // constant 0, so it contributes nothing to the latent gradient.
            }
        }
        grad
    }
}
