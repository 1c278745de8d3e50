//! Training objectives for both variants.
//!
//! DualVAE:
//! `w_F·|X − D_X(F_g, F_c)|₁ + w_z·|X − D_X(D_G(z_g), D_C(z_c))|₁ + w_vq·commit + w_kl·KL`.
//!
//! ReDualVAE keeps the encoder geometry features on both passes and drops the
//! token term: `2·|X − D_X(F_g, D_C(z_c))|₁ + |X − D_X(F_g, F_c)|₁ + KL`.
//!
//! Reconstruction and KL terms are summed per image and averaged over the
//! batch; one latent sample per image.

use dualvae_autodiff::{Graph, Real, Tensor, Var};

use crate::config::{LossConfig, Variant};
use crate::error::{Error, Result};
use crate::latents::{gaussian_kl, quantize, reparameterize, to_rows, QuantMode, TokenGrid};
use crate::layers::Ctx;
use crate::networks::DualVae;

/// Component weights `(w_F, w_z, w_vq, w_kl)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub recon_f: f64,
    pub recon_z: f64,
    pub vq: f64,
    pub kl: f64,
}

impl LossWeights {
    pub fn for_variant(variant: Variant, cfg: &LossConfig) -> Self {
        match variant {
            Variant::DualVae => Self {
                recon_f: cfg.w_f,
                recon_z: cfg.w_z,
                vq: cfg.w_vq,
                kl: cfg.w_kl,
            },
            Variant::ReDualVae => Self {
                recon_f: 1.0,
                recon_z: 2.0,
                vq: 0.0,
                kl: cfg.w_kl,
            },
        }
    }
}

/// Named scalar components of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub recon_f: f64,
    pub recon_z: f64,
    pub vq_latent: f64,
    pub gauss_kl: f64,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_sum(&self) -> f64 {
        let w = &self.weights;
        w.recon_f * self.recon_f + w.recon_z * self.recon_z + w.vq * self.vq_latent + w.kl * self.gauss_kl
    }
}

/// Tape handles of one loss evaluation.
pub struct LossVars<'g, R: Real> {
    pub recon_f: Var<'g, R>,
    pub recon_z: Var<'g, R>,
    pub vq_latent: Var<'g, R>,
    pub gauss_kl: Var<'g, R>,
    pub total: Var<'g, R>,
    pub weights: LossWeights,
    /// Token assignments and the `[M, D]` rows they came from, for the EMA step.
    pub assignments: Option<(Vec<TokenGrid>, Tensor<R>)>,
}

impl<R: Real> LossVars<'_, R> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            recon_f: self.recon_f.item().to_f64(),
            recon_z: self.recon_z.item().to_f64(),
            vq_latent: self.vq_latent.item().to_f64(),
            gauss_kl: self.gauss_kl.item().to_f64(),
            weights: self.weights,
            total: self.total.item().to_f64(),
        }
    }

    /// Fails with the first non-finite component's name.
    pub fn check_finite(&self, step: u64) -> Result<()> {
        for (component, v) in [
            ("recon_F", self.recon_f),
            ("recon_z", self.recon_z),
            ("vq", self.vq_latent),
            ("kl", self.gauss_kl),
            ("total", self.total),
        ] {
            if !v.item().is_finite() {
                return Err(Error::NonFiniteLoss { component, step });
            }
        }
        Ok(())
    }
}

/// Per-image mean L1 distance.
pub fn recon_l1<'g, R: Real>(x: Var<'g, R>, x_hat: Var<'g, R>) -> Var<'g, R> {
    let n = x.shape()[0] as f64;
    (x - x_hat).l1_norm().scale(1.0 / n)
}

/// Records the model's loss on a batch `x` (`[N, 3, H, W]`) with colour
/// noise `noise` (`[N, d_c]`).
pub fn model_loss<'g, R: Real>(
    cx: &Ctx<'_, 'g, R>,
    model: &DualVae<R>,
    loss_cfg: &LossConfig,
    x: &Tensor<R>,
    noise: &Tensor<R>,
    quant: &QuantMode<R>,
) -> Result<LossVars<'g, R>> {
    let g: &'g Graph<R> = cx.g;
    let enc = model.encode(cx, x)?;
    let n = x.shape()[0];
    if noise.shape() != [n, model.cfg.colour_dim] {
        return Err(Error::Contract(format!(
            "noise must be [{n}, {}], got {:?}",
            model.cfg.colour_dim,
            noise.shape()
        )));
    }
    let xv = g.constant(x.clone());
    let weights = LossWeights::for_variant(model.variant(), loss_cfg);
    let z_c = reparameterize(enc.mu, enc.logvar, noise);
    let colour_z = model.decode_colour(cx, z_c);
    let x_f = model.merge(cx, &enc.f_g, &enc.f_c)?;
    let recon_f = recon_l1(xv, x_f);
    let gauss_kl = gaussian_kl(enc.mu, enc.logvar).scale(1.0 / n as f64);

    let (recon_z, vq_latent, assignments) = match model.variant() {
        Variant::DualVae => {
            let pre = enc.pre_quant.expect("token branch");
            let cb = model.codebook.as_ref().expect("codebook");
            let q = quantize(pre, cb, loss_cfg.beta, quant)?;
            let geometry_z = model.decode_geometry(cx, q.z_q)?;
            let x_z = model.merge(cx, &geometry_z, &colour_z)?;
            let rows = to_rows(&pre.value());
            (recon_l1(xv, x_z), q.commit, Some((q.tokens, rows)))
        }
        Variant::ReDualVae => {
            let x_z = model.merge(cx, &enc.f_g, &colour_z)?;
            (recon_l1(xv, x_z), g.constant(Tensor::scalar(R::ZERO)), None)
        }
    };
    let total = recon_f.scale(weights.recon_f)
        + recon_z.scale(weights.recon_z)
        + vq_latent.scale(weights.vq)
        + gauss_kl.scale(weights.kl);
    Ok(LossVars {
        recon_f,
        recon_z,
        vq_latent,
        gauss_kl,
        total,
        weights,
        assignments,
    })
}
