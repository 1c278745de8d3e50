//! Numerical checks of the bound relating the explicit and implicit ELBOs.
//!
//! Everything here works on plain `f64` vectors and small constructed models
//! whose decoders are known in closed form, so each inequality can be checked
//! term by term. Additive constants from the Laplace normalisers are dropped
//! from both estimators identically.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::latents::gaussian_kl_f64;

pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "l1: length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Un-normalised Laplace log-density with unit scale: `-|x - mu|_1`.
pub fn laplace_logprob(x: &[f64], mu: &[f64]) -> f64 {
    -l1(x, mu)
}

/// Fully normalised log-density of independent Laplace coordinates.
pub fn laplace_log_density(x: &[f64], mu: &[f64], scale: f64) -> f64 {
    x.iter()
        .zip(mu)
        .map(|(x, m)| -(2.0 * scale).ln() - (x - m).abs() / scale)
        .sum()
}

/// A model with explicit decoders and diagonal Gaussian posteriors.
pub trait ElboModel {
    fn d_x(&self, f_g: &[f64], f_c: &[f64]) -> Vec<f64>;
    fn d_g(&self, z_g: &[f64]) -> Vec<f64>;
    fn d_c(&self, z_c: &[f64]) -> Vec<f64>;
    /// `(mu, logvar)` of `q(z_g | F_g)`.
    fn posterior_g(&self, f_g: &[f64]) -> (Vec<f64>, Vec<f64>);
    /// `(mu, logvar)` of `q(z_c | F_c)`.
    fn posterior_c(&self, f_c: &[f64]) -> (Vec<f64>, Vec<f64>);
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    fn from_samples(v: &[f64]) -> Self {
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            stderr: (var / n as f64).sqrt(),
            n,
        }
    }
}

fn sample_gaussian(mu: &[f64], logvar: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    mu.iter()
        .zip(logvar)
        .map(|(m, l)| {
            let e: f64 = rng.sample(StandardNormal);
            m + (0.5 * l).exp() * e
        })
        .collect()
}

/// One single-sample draw of both bounds' variable parts, sharing the same
/// latent samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub explicit: f64,
    pub implicit: f64,
}

pub fn elbo_terms<M: ElboModel>(model: &M, x: &[f64], f_g: &[f64], f_c: &[f64], rng: &mut impl Rng) -> ElboTerms {
    let (mg, lg) = model.posterior_g(f_g);
    let (mc, lc) = model.posterior_c(f_c);
    let kl = gaussian_kl_f64(&mg, &lg) + gaussian_kl_f64(&mc, &lc);
    let z_g = sample_gaussian(&mg, &lg, rng);
    let z_c = sample_gaussian(&mc, &lc, rng);
    let (dg, dc) = (model.d_g(&z_g), model.d_c(&z_c));
    let feature_path = l1(x, &model.d_x(f_g, f_c));
    let latent_path = l1(x, &model.d_x(&dg, &dc));
    ElboTerms {
        explicit: -feature_path - l1(f_g, &dg) - l1(f_c, &dc) - kl,
        implicit: -2.0 * feature_path - latent_path - kl,
    }
}

fn check_samples(n: usize) -> Result<()> {
    if n < 1 {
        return Err(Error::Contract("n_samples must be at least 1".into()));
    }
    Ok(())
}

/// Explicit ELBO: image and per-feature reconstruction terms plus both KLs.
pub fn explicit_elbo_estimate<M: ElboModel>(
    model: &M,
    x: &[f64],
    f_g: &[f64],
    f_c: &[f64],
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<Estimate> {
    check_samples(n_samples)?;
    let v: Vec<f64> = (0..n_samples)
        .map(|_| elbo_terms(model, x, f_g, f_c, rng).explicit)
        .collect();
    Ok(Estimate::from_samples(&v))
}

/// Implicit ELBO: twice the feature-path image term, the latent-path image
/// term, and both KLs.
pub fn implicit_elbo_estimate<M: ElboModel>(
    model: &M,
    x: &[f64],
    f_g: &[f64],
    f_c: &[f64],
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<Estimate> {
    check_samples(n_samples)?;
    let v: Vec<f64> = (0..n_samples)
        .map(|_| elbo_terms(model, x, f_g, f_c, rng).implicit)
        .collect();
    Ok(Estimate::from_samples(&v))
}

/// Tests `|a - b|_1 <= c * |D_X(a) - D_X(b)|_1`; returns whether it holds and
/// the ratio `|a - b|_1 / |D_X(a) - D_X(b)|_1`.
pub fn check_reverse_lipschitz(dx: impl Fn(&[f64]) -> Vec<f64>, a: &[f64], b: &[f64], c: f64) -> Result<(bool, f64)> {
    if !(c > 0.0) {
        return Err(Error::Contract(format!("Lipschitz constant must be positive, got {c}")));
    }
    let input = l1(a, b);
    let output = l1(&dx(a), &dx(b));
    let ratio = if output == 0.0 {
        if input == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        input / output
    };
    Ok((input <= c * output, ratio))
}

/// Every step of the bound chain for one tuple.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundChain {
    /// `|F_g - D_g(z_g)|_1 + |F_c - D_c(z_c)|_1`.
    pub feature_error: f64,
    /// The same quantity as one norm of the concatenations.
    pub concat_error: f64,
    /// `C · |D_X(F_g, F_c) - D_X(D_g(z_g), D_c(z_c))|_1`.
    pub decoded_gap: f64,
    /// `C · (|D_X(F_g, F_c) - X|_1 + |D_X(D_g(z_g), D_c(z_c)) - X|_1)`.
    pub image_error: f64,
}

impl BoundChain {
    pub fn split_matches_concat(&self) -> bool {
        (self.feature_error - self.concat_error).abs() <= 1e-12 * (1.0 + self.feature_error)
    }

    pub fn reverse_lipschitz_step(&self) -> bool {
        self.concat_error <= self.decoded_gap * (1.0 + 1e-12) + 1e-12
    }

    pub fn triangle_step(&self) -> bool {
        self.decoded_gap <= self.image_error * (1.0 + 1e-12) + 1e-12
    }

    pub fn holds(&self) -> bool {
        self.feature_error <= self.image_error * (1.0 + 1e-12) + 1e-12
    }
}

pub fn bound_chain<M: ElboModel>(model: &M, x: &[f64], f_g: &[f64], f_c: &[f64], z_g: &[f64], z_c: &[f64], c: f64) -> BoundChain {
    let (dg, dc) = (model.d_g(z_g), model.d_c(z_c));
    let concat_f = [f_g, f_c].concat();
    let concat_d = [dg.as_slice(), dc.as_slice()].concat();
    let xf = model.d_x(f_g, f_c);
    let xz = model.d_x(&dg, &dc);
    BoundChain {
        feature_error: l1(f_g, &dg) + l1(f_c, &dc),
        concat_error: l1(&concat_f, &concat_d),
        decoded_gap: c * l1(&xf, &xz),
        image_error: c * (l1(&xf, x) + l1(&xz, x)),
    }
}

/// Dense row-major matrix helper.
#[derive(Clone, Debug)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn random(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { rows, cols, data }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        self.data
            .chunks_exact(self.cols)
            .map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Linear decoders, linear posterior means and fixed posterior variances.
/// `D_X` is a coordinate permutation of `[F_g, F_c]` plus an offset, an
/// isometry in L1 and therefore 1-reverse-Lipschitz.
#[derive(Clone, Debug)]
pub struct IsometricToy {
    pub dim_g: usize,
    pub dim_c: usize,
    pub permutation: Vec<usize>,
    pub offset: Vec<f64>,
    pub dec_g: Matrix,
    pub dec_c: Matrix,
    pub enc_g: Matrix,
    pub enc_c: Matrix,
    pub logvar_g: f64,
    pub logvar_c: f64,
}

impl IsometricToy {
    /// `D_X` is plain concatenation.
    pub fn identity(dim_g: usize, dim_c: usize, latent: usize, rng: &mut impl Rng) -> Self {
        let n = dim_g + dim_c;
        Self {
            dim_g,
            dim_c,
            permutation: (0..n).collect(),
            offset: vec![0.0; n],
            dec_g: Matrix::random(dim_g, latent, 0.5, rng),
            dec_c: Matrix::random(dim_c, latent, 0.5, rng),
            enc_g: Matrix::random(latent, dim_g, 0.5, rng),
            enc_c: Matrix::random(latent, dim_c, 0.5, rng),
            logvar_g: -1.0,
            logvar_c: -1.0,
        }
    }

    /// `D_X` is a random permutation plus a random offset.
    pub fn permuted(dim_g: usize, dim_c: usize, latent: usize, rng: &mut impl Rng) -> Self {
        let mut m = Self::identity(dim_g, dim_c, latent, rng);
        rand::seq::SliceRandom::shuffle(m.permutation.as_mut_slice(), rng);
        m.offset = (0..dim_g + dim_c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        m
    }

    pub fn d_x_concat(&self, a: &[f64]) -> Vec<f64> {
        self.permutation
            .iter()
            .zip(&self.offset)
            .map(|(&p, o)| a[p] + o)
            .collect()
    }
}

impl ElboModel for IsometricToy {
    fn d_x(&self, f_g: &[f64], f_c: &[f64]) -> Vec<f64> {
        self.d_x_concat(&[f_g, f_c].concat())
    }
    fn d_g(&self, z_g: &[f64]) -> Vec<f64> {
        self.dec_g.apply(z_g)
    }
    fn d_c(&self, z_c: &[f64]) -> Vec<f64> {
        self.dec_c.apply(z_c)
    }
    fn posterior_g(&self, f_g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mu = self.enc_g.apply(f_g);
        let lv = vec![self.logvar_g; mu.len()];
        (mu, lv)
    }
    fn posterior_c(&self, f_c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mu = self.enc_c.apply(f_c);
        let lv = vec![self.logvar_c; mu.len()];
        (mu, lv)
    }
}

/// Linear-Gaussian model whose `D_X` is an arbitrary linear map; used for
/// estimator variance checks where no ordering is claimed.
#[derive(Clone, Debug)]
pub struct LinearGaussianToy {
    pub inner: IsometricToy,
    pub mix: Matrix,
}

impl LinearGaussianToy {
    pub fn new(dim_g: usize, dim_c: usize, latent: usize, rng: &mut impl Rng) -> Self {
        let inner = IsometricToy::identity(dim_g, dim_c, latent, rng);
        let n = dim_g + dim_c;
        Self {
            inner,
            mix: Matrix::random(n, n, 1.0 / (n as f64).sqrt(), rng),
        }
    }
}

impl ElboModel for LinearGaussianToy {
    fn d_x(&self, f_g: &[f64], f_c: &[f64]) -> Vec<f64> {
        self.mix.apply(&[f_g, f_c].concat())
    }
    fn d_g(&self, z_g: &[f64]) -> Vec<f64> {
        self.inner.d_g(z_g)
    }
    fn d_c(&self, z_c: &[f64]) -> Vec<f64> {
        self.inner.d_c(z_c)
    }
    fn posterior_g(&self, f_g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.inner.posterior_g(f_g)
    }
    fn posterior_c(&self, f_c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.inner.posterior_c(f_c)
    }
}

/// Outcome of the full set of bound checks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MathReport {
    pub lines: Vec<(String, bool, String)>,
}

impl MathReport {
    pub fn push(&mut self, name: &str, ok: bool, detail: String) {
        self.lines.push((name.to_string(), ok, detail));
    }

    pub fn all_pass(&self) -> bool {
        self.lines.iter().all(|(_, ok, _)| *ok)
    }
}

fn random_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Laplace identity over `pairs` random `(x, mu)` draws: the largest gap
/// between log-density differences and negated L1 differences.
pub fn laplace_identity_gap(pairs: usize, dim: usize, rng: &mut impl Rng) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let (x1, x2, mu) = (random_vec(dim, rng), random_vec(dim, rng), random_vec(dim, rng));
        let lhs = laplace_logprob(&x1, &mu) - laplace_logprob(&x2, &mu);
        let rhs = l1(&x2, &mu) - l1(&x1, &mu);
        let normalised = laplace_log_density(&x1, &mu, 1.0) - laplace_log_density(&x2, &mu, 1.0);
        worst = worst.max((lhs - rhs).abs()).max((lhs - normalised).abs());
    }
    worst
}

/// Bound-chain check over `tuples` random draws on a permutation-plus-offset
/// decoder: `(violations of the final bound, violations of the triangle
/// step, violations of the reverse-Lipschitz step, split/concat mismatches)`.
pub fn bound_chain_violations(tuples: usize, rng: &mut impl Rng) -> (usize, usize, usize, usize) {
    let (dg, dc, dz) = (6, 5, 3);
    let model = IsometricToy::permuted(dg, dc, dz, rng);
    let mut v = (0, 0, 0, 0);
    for _ in 0..tuples {
        let x = random_vec(dg + dc, rng);
        let (fg, fc) = (random_vec(dg, rng), random_vec(dc, rng));
        let (zg, zc) = (random_vec(dz, rng), random_vec(dz, rng));
        let chain = bound_chain(&model, &x, &fg, &fc, &zg, &zc, 1.0);
        v.0 += usize::from(!chain.holds());
        v.1 += usize::from(!chain.triangle_step());
        v.2 += usize::from(!chain.reverse_lipschitz_step());
        v.3 += usize::from(!chain.split_matches_concat());
    }
    v
}

/// Ordering of the two estimators on `draws` random inputs: returns the
/// number of draws where implicit exceeds explicit by more than three
/// combined standard errors, and the largest such excess in standard errors.
pub fn elbo_ordering(draws: usize, n_samples: usize, rng: &mut impl Rng) -> Result<(usize, f64)> {
    let (dg, dc, dz) = (4, 4, 2);
    let model = IsometricToy::identity(dg, dc, dz, rng);
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..draws {
        let x = random_vec(dg + dc, rng);
        let (fg, fc) = (random_vec(dg, rng), random_vec(dc, rng));
        let e = explicit_elbo_estimate(&model, &x, &fg, &fc, n_samples, rng)?;
        let i = implicit_elbo_estimate(&model, &x, &fg, &fc, n_samples, rng)?;
        let se = (e.stderr.powi(2) + i.stderr.powi(2)).sqrt().max(1e-300);
        let excess = (i.mean - e.mean) / se;
        worst = worst.max(excess);
        if excess > 3.0 {
            violations += 1;
        }
    }
    Ok((violations, worst))
}

/// Runs every check with fixed sizes; used by the `verify-math` command.
pub fn verify_all(rng: &mut impl Rng) -> Result<MathReport> {
    let mut r = MathReport::default();
    let gap = laplace_identity_gap(1000, 8, rng);
    r.push("laplace_identity", gap <= 1e-9, format!("max_gap={gap:.3e}"));

    let (ok_id, ratio_id) = check_reverse_lipschitz(|a| a.to_vec(), &[1.0, -2.0], &[0.5, 3.0], 1.0)?;
    r.push("reverse_lipschitz_identity", ok_id && (ratio_id - 1.0).abs() < 1e-12, format!("ratio={ratio_id}"));
    let (ok_half, ratio_half) =
        check_reverse_lipschitz(|a| a.iter().map(|v| 0.5 * v).collect(), &[1.0, -2.0], &[0.5, 3.0], 1.0)?;
    r.push("reverse_lipschitz_contraction_rejected", !ok_half && (ratio_half - 2.0).abs() < 1e-12, format!("ratio={ratio_half}"));

    let (bound, triangle, lipschitz, split) = bound_chain_violations(10_000, rng);
    r.push(
        "bound_chain",
        bound == 0 && triangle == 0 && lipschitz == 0 && split == 0,
        format!("tuples=10000 bound_violations={bound} triangle_violations={triangle} lipschitz_violations={lipschitz} split_mismatches={split}"),
    );

    let (violations, worst) = elbo_ordering(1000, 64, rng)?;
    r.push(
        "elbo_ordering",
        violations == 0,
        format!("draws=1000 violations={violations} worst_excess_se={worst:.3}"),
    );
    Ok(r)
}
