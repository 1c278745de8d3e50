//! The two latent mechanisms.
//!
//! The geometry latent is a grid of codebook tokens. Quantisation picks the
//! nearest embedding, passes gradients straight through, and the codebook is
//! re-estimated by exponential moving averages rather than by gradient. The
//! colour latent is a diagonal Gaussian with the usual reparameterisation.

use dualvae_autodiff::{Real, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// Token indices of one image, row-major over the `h x w` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub tokens: Vec<usize>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, tokens: Vec<usize>, vocab: usize) -> Result<Self> {
        if tokens.len() != h * w {
            return Err(Error::Contract(format!(
                "token grid {h}x{w} needs {} tokens, got {}",
                h * w,
                tokens.len()
            )));
        }
        if let Some(&token) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfRange { token, vocab });
        }
        Ok(Self { h, w, tokens })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<R> {
    /// `[n_embed, dim]`.
    pub embeddings: Tensor<R>,
    pub ema_cluster_size: Vec<R>,
    /// `[n_embed, dim]`.
    pub ema_sum: Tensor<R>,
    pub decay: f64,
    pub epsilon: f64,
    /// Assignments per code since the counters were last reset.
    pub usage: Vec<u64>,
}

impl<R: Real> Codebook<R> {
    /// Unit-normal embeddings; EMA state starts as if every code had been
    /// assigned its own embedding once.
    pub fn new(n_embed: usize, dim: usize, decay: f64, epsilon: f64, rng: &mut impl Rng) -> Self {
        let embeddings = Tensor::randn([n_embed, dim], 1.0, rng);
        Self::from_embeddings(embeddings, decay, epsilon)
    }

    pub fn from_embeddings(embeddings: Tensor<R>, decay: f64, epsilon: f64) -> Self {
        let (n, _) = embeddings.dims2();
        Self {
            ema_sum: embeddings.clone(),
            embeddings,
            ema_cluster_size: vec![R::ONE; n],
            decay,
            epsilon,
            usage: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[R] {
        let d = self.dim();
        &self.embeddings.data()[i * d..(i + 1) * d]
    }

    /// Index of the embedding nearest to `v` in squared L2; ties go to the
    /// lowest index.
    pub fn nearest(&self, v: &[R]) -> usize {
        let mut best = (0, R::ZERO);
        for i in 0..self.len() {
            let dist: R = self.row(i).iter().zip(v).map(|(&e, &x)| (e - x) * (e - x)).sum();
            if i == 0 || dist < best.1 {
                best = (i, dist);
            }
        }
        best.0
    }

    /// Assigns every row of a `[M, dim]` matrix.
    pub fn assign(&self, rows: &Tensor<R>) -> Vec<usize> {
        rows.data().chunks_exact(self.dim()).map(|v| self.nearest(v)).collect()
    }

    /// `[M, dim]` matrix of the embeddings for `tokens`.
    pub fn lookup(&self, tokens: &[usize]) -> Tensor<R> {
        let mut d = Vec::with_capacity(tokens.len() * self.dim());
        for &t in tokens {
            d.extend_from_slice(self.row(t));
        }
        Tensor::new([tokens.len(), self.dim()], d)
    }

    /// One EMA re-estimation step from the rows assigned in this batch.
    pub fn ema_update(&mut self, rows: &Tensor<R>, assignments: &[usize]) {
        let (n, d) = (self.len(), self.dim());
        let mut counts = vec![R::ZERO; n];
        let mut sums = vec![R::ZERO; n * d];
        for (v, &a) in rows.data().chunks_exact(d).zip(assignments) {
            counts[a] += R::ONE;
            self.usage[a] += 1;
            for (s, &x) in sums[a * d..(a + 1) * d].iter_mut().zip(v) {
                *s += x;
            }
        }
        let gamma = R::from_f64(self.decay);
        let keep = R::from_f64(1.0 - self.decay);
        for (size, c) in self.ema_cluster_size.iter_mut().zip(&counts) {
            *size = gamma * *size + keep * *c;
        }
        for (s, &b) in self.ema_sum.data_mut().iter_mut().zip(&sums) {
            *s = gamma * *s + keep * b;
        }
        // Laplace smoothing keeps unused codes finite.
        let total: R = self.ema_cluster_size.iter().copied().sum();
        let eps = R::from_f64(self.epsilon);
        let nn = R::from_f64(n as f64);
        for i in 0..n {
            let smoothed = (self.ema_cluster_size[i] + eps) / (total + nn * eps) * total;
            for j in 0..d {
                self.embeddings.data_mut()[i * d + j] = self.ema_sum.data()[i * d + j] / smoothed;
            }
        }
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    pub fn cast<S: Real>(&self) -> Codebook<S> {
        Codebook {
            embeddings: self.embeddings.cast(),
            ema_cluster_size: self.ema_cluster_size.iter().map(|v| S::from_f64(v.to_f64())).collect(),
            ema_sum: self.ema_sum.cast(),
            decay: self.decay,
            epsilon: self.epsilon,
            usage: self.usage.clone(),
        }
    }
}

/// `[N, D, h, w]` feature map to `[N*h*w, D]` rows (batch-major, then raster).
pub fn to_rows<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    let (n, d, h, w) = x.dims4();
    let hw = h * w;
    Tensor::from_fn([n * hw, d], |i| {
        let (row, c) = (i / d, i % d);
        let (b, s) = (row / hw, row % hw);
        x.data()[(b * d + c) * hw + s]
    })
}

/// Inverse of [`to_rows`].
pub fn from_rows<R: Real>(rows: &Tensor<R>, n: usize, h: usize, w: usize) -> Tensor<R> {
    let (_, d) = rows.dims2();
    let hw = h * w;
    Tensor::from_fn([n, d, h, w], |i| {
        let (b, rest) = (i / (d * hw), i % (d * hw));
        let (c, s) = (rest / hw, rest % hw);
        rows.data()[(b * hw + s) * d + c]
    })
}

/// Quantiser settings for one forward pass.
#[derive(Clone, Debug)]
pub enum QuantMode<R> {
    /// Nearest-neighbour assignment with a straight-through gradient.
    Live,
    /// Reuses a previous pass's quantised map: `z_q = pre + offset` with
    /// `offset` fixed, so the map stays smooth under finite differences.
    Frozen { z_q: Tensor<R>, offset: Tensor<R> },
}

pub struct Quantized<'g, R: Real> {
    /// Token per image.
    pub tokens: Vec<TokenGrid>,
    /// `[N, D, h, w]`, forward value equal to the selected embeddings.
    pub z_q: Var<'g, R>,
    /// `beta * mean over vectors of |pre - sg(z_q)|^2`.
    pub commit: Var<'g, R>,
}

/// Maps every spatial vector of `pre` to its nearest codebook entry.
pub fn quantize<'g, R: Real>(
    pre: Var<'g, R>,
    codebook: &Codebook<R>,
    beta: f64,
    mode: &QuantMode<R>,
) -> Result<Quantized<'g, R>> {
    if codebook.is_empty() {
        return Err(Error::Contract("quantize: empty codebook".into()));
    }
    let pv = pre.value();
    let (n, d, h, w) = pv.dims4();
    if d != codebook.dim() {
        return Err(Error::Contract(format!(
            "quantize: features have {d} channels, codebook dim is {}",
            codebook.dim()
        )));
    }
    let g = pre.graph();
    let (z_q, zq_val, assignments) = match mode {
        QuantMode::Live => {
            let assignments = codebook.assign(&to_rows(&pv));
            let zq = from_rows(&codebook.lookup(&assignments), n, h, w);
            (pre.straight_through(zq.clone()), zq, assignments)
        }
        QuantMode::Frozen { z_q, offset } => {
            let assignments = codebook.assign(&to_rows(z_q));
            (pre + g.constant(offset.clone()), z_q.clone(), assignments)
        }
    };
    let m = (n * h * w) as f64;
    let commit = (pre - g.constant(zq_val)).sq_l2().scale(beta / m);
    let tokens = assignments
        .chunks_exact(h * w)
        .map(|t| TokenGrid {
            h,
            w,
            tokens: t.to_vec(),
        })
        .collect();
    Ok(Quantized {
        tokens,
        z_q,
        commit,
    })
}

/// `mu + exp(logvar / 2) * noise`.
pub fn reparameterize<'g, R: Real>(mu: Var<'g, R>, logvar: Var<'g, R>, noise: &Tensor<R>) -> Var<'g, R> {
    mu + logvar.scale(0.5).exp() * mu.graph().constant(noise.clone())
}

/// `KL(N(mu, exp(logvar)) || N(0, I))` summed over every entry.
pub fn gaussian_kl<'g, R: Real>(mu: Var<'g, R>, logvar: Var<'g, R>) -> Var<'g, R> {
    (mu.square() + logvar.exp() - logvar).add_scalar(-1.0).sum().scale(0.5)
}

/// Plain closed-form KL for a single diagonal Gaussian.
pub fn gaussian_kl_f64(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, l)| m * m + l.exp() - 1.0 - l)
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use dualvae_autodiff::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn book(n: usize, d: usize) -> Codebook<f64> {
        Codebook::new(n, d, 0.99, 1e-5, &mut ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn exact_match_maps_to_that_entry_with_zero_commitment() {
        let cb = book(16, 4);
        let row = cb.row(7).to_vec();
        let g = Graph::new();
        let pre = g.variable(Tensor::new([1, 4, 1, 1], row));
        let q = quantize(pre, &cb, 0.25, &QuantMode::Live).unwrap();
        assert_eq!(q.tokens[0].tokens, vec![7]);
        assert_eq!(q.commit.item(), 0.0);
    }

    #[test]
    fn rows_roundtrip() {
        let x = Tensor::<f64>::from_fn([2, 3, 2, 2], |i| i as f64);
        let r = to_rows(&x);
        assert_eq!(r.shape(), [8, 3]);
        assert_eq!(&r.data()[..3], &[0.0, 4.0, 8.0]);
        assert_eq!(from_rows(&r, 2, 2, 2), x);
    }

    #[test]
    fn unused_codes_keep_direction() {
        let mut cb = book(4, 3);
        let before = cb.row(3).to_vec();
        let rows = Tensor::new([2, 3], [cb.row(0), cb.row(0)].concat());
        for _ in 0..200 {
            cb.ema_update(&rows, &[0, 0]);
        }
        let after = cb.row(3);
        assert!(after.iter().all(|v| v.is_finite()));
        let dot: f64 = before.iter().zip(after).map(|(a, b)| a * b).sum();
        let na: f64 = before.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = after.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((dot / (na * nb) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_decay_jumps_to_batch_mean() {
        let mut cb = book(3, 2);
        cb.decay = 0.0;
        cb.epsilon = 1e-12;
        let rows = Tensor::from_f64([2, 2], &[1.0, 2.0, 3.0, 6.0]);
        cb.ema_update(&rows, &[1, 1]);
        assert!((cb.row(1)[0] - 2.0).abs() < 1e-9);
        assert!((cb.row(1)[1] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(gaussian_kl_f64(&[0.0], &[0.0]), 0.0);
        assert_eq!(gaussian_kl_f64(&[1.0], &[0.0]), 0.5);
        let g = Graph::<f64>::new();
        let mu = g.constant(Tensor::from_f64([1, 2], &[0.3, -1.0]));
        let lv = g.constant(Tensor::from_f64([1, 2], &[0.5, -0.2]));
        let want = gaussian_kl_f64(&[0.3, -1.0], &[0.5, -0.2]);
        assert!((gaussian_kl(mu, lv).item() - want).abs() < 1e-15);
    }

    #[test]
    fn token_grid_rejects_out_of_range() {
        assert!(matches!(
            TokenGrid::new(1, 2, vec![0, 9], 4),
            Err(Error::TokenOutOfRange { token: 9, vocab: 4 })
        ));
    }
}
