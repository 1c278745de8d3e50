//! Colour-histogram metrics and a Fréchet distance over a fixed random
//! feature extractor.
//!
//! Histograms live on log-chroma coordinates
//! `u = ln((R+ε)/(G+ε))`, `v = ln((B+ε)/(G+ε))`, `B×B` hard bins over
//! `[-3, 3]²` (out-of-range values clamp to the edge bins), each pixel
//! weighted by its intensity `sqrt(R²+G²+B²)`.
//!
//! The Fréchet proxy is not comparable to Inception-based FID numbers.

use std::io::Write;

use dualvae_autodiff::{Graph, Padding, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Image;
use crate::error::{Error, Result};

pub const HIST_BINS: usize = 32;
pub const HIST_RANGE: f64 = 3.0;
pub const HIST_EPS: f64 = 1e-4;
pub const HIST_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ColourHistogram {
    pub bins: usize,
    /// Row-major `[u][v]`, sums to one.
    pub weights: Vec<f64>,
}

fn bin_of(x: f64, bins: usize) -> usize {
    let t = (x + HIST_RANGE) / (2.0 * HIST_RANGE) * bins as f64;
    (t.floor().max(0.0) as usize).min(bins - 1)
}

/// Intensity-weighted log-chroma histogram, floored and renormalised.
pub fn colour_histogram(img: &Image) -> ColourHistogram {
    let s = img.shape();
    let plane = s[1] * s[2];
    let d = img.data();
    let b = HIST_BINS;
    let mut raw = vec![0.0f64; b * b];
    let mut counts = vec![0.0f64; b * b];
    for i in 0..plane {
        let (r, g, bl) = (d[i] as f64, d[plane + i] as f64, d[2 * plane + i] as f64);
        let u = ((r + HIST_EPS) / (g + HIST_EPS)).ln();
        let v = ((bl + HIST_EPS) / (g + HIST_EPS)).ln();
        let k = bin_of(u, b) * b + bin_of(v, b);
        raw[k] += (r * r + g * g + bl * bl).sqrt();
        counts[k] += 1.0;
    }
    // An all-black image carries no intensity; fall back to pixel counts.
    let total: f64 = raw.iter().sum();
    let mut w = if total > 0.0 { raw } else { counts };
    normalise(&mut w);
    w.iter_mut().for_each(|x| *x = x.max(HIST_FLOOR));
    normalise(&mut w);
    ColourHistogram { bins: b, weights: w }
}

fn normalise(w: &mut [f64]) {
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
}

/// `KL(p || q) = Σ p ln(p / q)`.
pub fn histogram_kl(p: &ColourHistogram, q: &ColourHistogram) -> f64 {
    assert_eq!(p.bins, q.bins, "histogram_kl: bin mismatch");
    p.weights
        .iter()
        .zip(&q.weights)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum::<f64>()
        .max(0.0)
}

/// Average of both directions.
pub fn histogram_jeffreys(p: &ColourHistogram, q: &ColourHistogram) -> f64 {
    0.5 * (histogram_kl(p, q) + histogram_kl(q, p))
}

/// Direction of the histogram divergence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KlMode {
    /// `KL(exemplar || generated)`.
    #[default]
    ExemplarToGenerated,
    Symmetric,
}

impl KlMode {
    pub fn divergence(self, exemplar: &ColourHistogram, generated: &ColourHistogram) -> f64 {
        match self {
            KlMode::ExemplarToGenerated => histogram_kl(exemplar, generated),
            KlMode::Symmetric => histogram_jeffreys(exemplar, generated),
        }
    }
}

/// Mean and standard error.
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Mean histogram divergence over `n_pairs` uniformly drawn ordered pairs of
/// distinct images.
pub fn pairwise_baseline_kl(images: &[Image], n_pairs: usize, mode: KlMode, rng: &mut impl Rng) -> Result<(f64, f64)> {
    if images.len() < 2 {
        return Err(Error::Contract("pairwise baseline needs at least two images".into()));
    }
    let hists: Vec<_> = images.iter().map(colour_histogram).collect();
    let v: Vec<f64> = (0..n_pairs)
        .map(|_| {
            let i = rng.gen_range(0..hists.len());
            let mut j = rng.gen_range(0..hists.len() - 1);
            if j >= i {
                j += 1;
            }
            mode.divergence(&hists[i], &hists[j])
        })
        .collect();
    Ok(mean_stderr(&v))
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub model: String,
    pub arm: String,
    pub mean_kl: f64,
    pub stderr: f64,
    pub n: usize,
}

pub const ABLATION_HEADER: &str = "model,arm,mean_kl,stderr,n";

pub fn write_ablation_csv(w: &mut impl Write, rows: &[AblationRow]) -> std::io::Result<()> {
    writeln!(w, "{ABLATION_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{:.6},{:.6},{}", r.model, r.arm, r.mean_kl, r.stderr, r.n)?;
    }
    Ok(())
}

/// Exemplar-conditioned divergences of one generator: for every test image,
/// `n_per_exemplar` outputs are compared against the exemplar.
pub fn conditioned_kl<R: Rng>(
    exemplars: &[Image],
    n_per_exemplar: usize,
    mode: KlMode,
    rng: &mut R,
    mut generate: impl FnMut(&Image, usize, &mut R) -> Result<Vec<Image>>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(exemplars.len() * n_per_exemplar);
    for ex in exemplars {
        let h = colour_histogram(ex);
        for img in generate(ex, n_per_exemplar, rng)? {
            out.push(mode.divergence(&h, &colour_histogram(&img)));
        }
    }
    Ok(out)
}

/// Fixed random convolutional feature extractor.
pub struct FeatureExtractor {
    k1: Tensor<f64>,
    k2: Tensor<f64>,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            k1: Tensor::randn([16, 3, 3, 3], (2.0f64 / 27.0).sqrt(), &mut rng),
            k2: Tensor::randn([32, 16, 3, 3], (2.0f64 / 144.0).sqrt(), &mut rng),
        }
    }

    /// Globally pooled features plus the mean colour.
    pub fn features(&self, img: &Image) -> Vec<f64> {
        let g = Graph::<f64>::new();
        let s = img.shape();
        let x = g.constant(img.cast::<f64>().reshape([1, s[0], s[1], s[2]]));
        let h = x
            .conv2d(g.constant(self.k1.clone()), None, 2, Padding::Reflect)
            .leaky_relu(0.2)
            .conv2d(g.constant(self.k2.clone()), None, 2, Padding::Reflect)
            .leaky_relu(0.2)
            .value();
        let (_, c, hh, ww) = h.dims4();
        let mut f: Vec<f64> = h
            .data()
            .chunks_exact(hh * ww)
            .take(c)
            .map(|p| p.iter().sum::<f64>() / (hh * ww) as f64)
            .collect();
        let plane = s[1] * s[2];
        for ch in 0..3 {
            f.push(img.data()[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64);
        }
        f
    }
}

fn mean_cov(feats: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let n = feats.len();
    let d = feats[0].len();
    let mut mu = vec![0.0; d];
    for f in feats {
        for (m, v) in mu.iter_mut().zip(f) {
            *m += v / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for f in feats {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (f[i] - mu[i]) * (f[j] - mu[j]);
            }
        }
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    (mu, cov / denom)
}

/// Square root of a symmetric positive semi-definite matrix (negative
/// eigenvalues from rounding are clamped to zero).
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `(A B)^{1/2}` for symmetric positive-definite `A`, `B`, computed as
/// `A^{1/2} (A^{1/2} B A^{1/2})^{1/2} A^{-1/2}`, together with the relative
/// Frobenius error of squaring it back.
pub fn sqrtm_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let sa = sqrtm_psd(a);
    let inner = sqrtm_psd(&(&sa * b * &sa));
    let sa_inv = sa
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Contract("covariance is singular".into()))?;
    let root = &sa * inner * sa_inv;
    let target = a * b;
    let err = (&root * &root - &target).norm() / target.norm().max(1e-300);
    Ok((root, err))
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn frechet_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("frechet: empty feature set".into()));
    }
    let (ma, ca) = mean_cov(a);
    let (mb, cb) = mean_cov(b);
    let mean_term: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    // Tr((Ca Cb)^{1/2}) = Tr((Ca^{1/2} Cb Ca^{1/2})^{1/2}).
    let sa = sqrtm_psd(&ca);
    let inner = (&sa * &cb * &sa + (&sa * &cb * &sa).transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((mean_term + ca.trace() + cb.trace() - 2.0 * cross).max(0.0))
}

pub fn frechet_proxy(set_a: &[Image], set_b: &[Image], extractor_seed: u64) -> Result<f64> {
    let fx = FeatureExtractor::new(extractor_seed);
    let fa: Vec<_> = set_a.iter().map(|i| fx.features(i)).collect();
    let fb: Vec<_> = set_b.iter().map(|i| fx.features(i)).collect();
    frechet_from_features(&fa, &fb)
}
