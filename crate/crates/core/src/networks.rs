//! Network bodies: colour encoder `E_C`, geometry encoder `E_G`, the skip
//! decoders `D_G` / `D_C`, and the merge decoder `D_X`.
//!
//! Pyramids are indexed from full resolution (level 0) to the deepest level
//! `K = log2(f)`, so a 32x32 input with `f = 8` has levels at 32, 16, 8, 4.

use dualvae_autodiff::{ParamStore, Real, Tensor, Var};
use rand::Rng;

use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::geometry::GeometryModule;
use crate::latents::Codebook;
use crate::layers::{Conv, Ctx, Linear, Norm, LRELU_SLOPE};

/// Where a pyramid's levels came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PyramidOrigin {
    Encoder,
    SkipDecoder,
}

/// Per-resolution feature maps, level 0 at full resolution.
#[derive(Clone)]
pub struct Pyramid<'g, R: Real> {
    pub levels: Vec<Var<'g, R>>,
    pub origin: PyramidOrigin,
}

impl<'g, R: Real> Pyramid<'g, R> {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.levels.iter().map(|l| l.shape()).collect()
    }

    pub fn spatial(&self) -> Vec<(usize, usize)> {
        self.levels
            .iter()
            .map(|l| {
                let s = l.shape();
                (s[2], s[3])
            })
            .collect()
    }
}

/// Stem convolution plus one stride-2 block per level.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: Conv,
    pub downs: Vec<Conv>,
}

impl Encoder {
    fn new<R: Real>(store: &mut ParamStore<R>, name: &str, cin: usize, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let stem = Conv::new(store, &format!("{name}.stem"), cin, cfg.width(0), 3, 1, rng);
        let downs = (1..=cfg.levels())
            .map(|k| Conv::new(store, &format!("{name}.down{k}"), cfg.width(k - 1), cfg.width(k), 3, 2, rng))
            .collect();
        Self { stem, downs }
    }

    fn forward<'g, R: Real>(&self, cx: &Ctx<'_, 'g, R>, x: Var<'g, R>) -> Pyramid<'g, R> {
        let mut h = self.stem.forward(cx, x).leaky_relu(LRELU_SLOPE);
        let mut levels = vec![h];
        for d in &self.downs {
            h = d.forward(cx, h).leaky_relu(LRELU_SLOPE);
            levels.push(h);
        }
        Pyramid {
            levels,
            origin: PyramidOrigin::Encoder,
        }
    }
}

/// `D_G`: token embeddings back to a geometry pyramid.
#[derive(Clone, Debug)]
pub struct GeometrySkipDecoder {
    pub input: Conv,
    pub ups: Vec<Conv>,
}

impl GeometrySkipDecoder {
    fn new<R: Real>(store: &mut ParamStore<R>, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let k = cfg.levels();
        let input = Conv::new(store, "dec_g.input", cfg.embed_dim, cfg.width(k), 3, 1, rng);
        let ups = (0..k)
            .rev()
            .map(|l| Conv::new(store, &format!("dec_g.up{l}"), cfg.width(l + 1), cfg.width(l), 3, 1, rng))
            .collect();
        Self { input, ups }
    }

    pub fn forward<'g, R: Real>(&self, cx: &Ctx<'_, 'g, R>, z_q: Var<'g, R>) -> Pyramid<'g, R> {
        let mut h = self.input.forward(cx, z_q).leaky_relu(LRELU_SLOPE);
        let mut deep_first = vec![h];
        for conv in &self.ups {
            h = conv.forward(cx, h.upsample_nearest2x()).leaky_relu(LRELU_SLOPE);
            deep_first.push(h);
        }
        deep_first.reverse();
        Pyramid {
            levels: deep_first,
            origin: PyramidOrigin::SkipDecoder,
        }
    }
}

/// `D_C`: a per-level linear projection of `z_c`, broadcast over the level's grid.
#[derive(Clone, Debug)]
pub struct ColourSkipDecoder {
    pub proj: Vec<Linear>,
}

impl ColourSkipDecoder {
    fn new<R: Real>(store: &mut ParamStore<R>, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let proj = (0..=cfg.levels())
            .map(|k| Linear::new(store, &format!("dec_c.level{k}"), cfg.colour_dim, cfg.width(k), rng))
            .collect();
        Self { proj }
    }

    pub fn forward<'g, R: Real>(&self, cx: &Ctx<'_, 'g, R>, cfg: &ModelConfig, z_c: Var<'g, R>) -> Pyramid<'g, R> {
        let levels = self
            .proj
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let s = cfg.level_size(k);
                p.forward(cx, z_c).broadcast_spatial(s, s)
            })
            .collect();
        Pyramid {
            levels,
            origin: PyramidOrigin::SkipDecoder,
        }
    }
}

/// One resolution of the merge decoder: geometry skip first, colour skip second.
#[derive(Clone, Debug)]
pub struct MergeLevel {
    pub geometry_norm: Norm,
    pub geometry_conv: Conv,
    pub colour_norm: Norm,
    pub colour_conv: Conv,
    pub upsample: bool,
}

/// `D_X`.
#[derive(Clone, Debug)]
pub struct MergeDecoder {
    /// Deepest level first.
    pub levels: Vec<MergeLevel>,
    pub output: Conv,
}

impl MergeDecoder {
    fn new<R: Real>(store: &mut ParamStore<R>, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let kmax = cfg.levels();
        let levels = (0..=kmax)
            .rev()
            .map(|k| {
                let w = cfg.width(k);
                let carried = if k == kmax { 0 } else { cfg.width(k + 1) };
                let name = format!("merge.level{k}");
                MergeLevel {
                    geometry_norm: Norm::new(store, &format!("{name}.geometry_norm"), w),
                    geometry_conv: Conv::new(store, &format!("{name}.geometry_conv"), carried + w, w, 3, 1, rng),
                    colour_norm: Norm::new(store, &format!("{name}.colour_norm"), w),
                    colour_conv: Conv::new(store, &format!("{name}.colour_conv"), 2 * w, w, 3, 1, rng),
                    upsample: k > 0,
                }
            })
            .collect();
        let output = Conv::new(store, "merge.output", cfg.width(0), 3, 3, 1, rng);
        Self { levels, output }
    }

    pub fn forward<'g, R: Real>(
        &self,
        cx: &Ctx<'_, 'g, R>,
        geometry: &Pyramid<'g, R>,
        colour: &Pyramid<'g, R>,
    ) -> Result<Var<'g, R>> {
        let n = self.levels.len();
        if geometry.levels.len() != n || colour.levels.len() != n {
            return Err(Error::Contract(format!(
                "merge decoder has {n} levels, got geometry {} / colour {}",
                geometry.levels.len(),
                colour.levels.len()
            )));
        }
        if geometry.spatial() != colour.spatial() {
            return Err(Error::Contract("geometry and colour pyramids differ in spatial size".into()));
        }
        let g = cx.g;
        let mut h: Option<Var<'g, R>> = None;
        for (i, level) in self.levels.iter().enumerate() {
            let k = n - 1 - i;
            let gk = level.geometry_norm.forward(cx, geometry.levels[k]);
            let input = match h {
                Some(prev) => g.concat(&[prev, gk], 1),
                None => gk,
            };
            let mut x = level.geometry_conv.forward(cx, input).leaky_relu(LRELU_SLOPE);
            let ck = level.colour_norm.forward(cx, colour.levels[k]);
            x = level
                .colour_conv
                .forward(cx, g.concat(&[x, ck], 1))
                .leaky_relu(LRELU_SLOPE);
            if level.upsample {
                x = x.upsample_nearest2x();
            }
            h = Some(x);
        }
        let h = h.expect("at least one merge level");
        Ok(self.output.forward(cx, h).sigmoid())
    }
}

/// Encoder outputs for a batch.
pub struct Encoded<'g, R: Real> {
    /// `[N, 1, H, W]`.
    pub structure: Var<'g, R>,
    pub f_g: Pyramid<'g, R>,
    pub f_c: Pyramid<'g, R>,
    /// `[N, D, h, w]`; absent for the colour-only variant.
    pub pre_quant: Option<Var<'g, R>>,
    /// `[N, d_c]`.
    pub mu: Var<'g, R>,
    pub logvar: Var<'g, R>,
}

/// Parts that exist only when the geometry latent is tokenised.
#[derive(Clone, Debug)]
pub struct TokenBranch {
    pub pre_quant: Conv,
    pub dec_g: GeometrySkipDecoder,
}

/// Every network of one model together with its parameters and codebook.
#[derive(Clone)]
pub struct DualVae<R: Real> {
    pub cfg: ModelConfig,
    pub store: ParamStore<R>,
    pub geometry: GeometryModule,
    pub enc_g: Encoder,
    pub enc_c: Encoder,
    pub colour_head: Linear,
    pub dec_c: ColourSkipDecoder,
    pub merge: MergeDecoder,
    pub tokens: Option<TokenBranch>,
    pub codebook: Option<Codebook<R>>,
}

impl<R: Real> DualVae<R> {
    pub fn new(cfg: &ModelConfig, decay: f64, epsilon: f64, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let geometry = GeometryModule::new(&mut store, cfg, rng);
        let enc_g = Encoder::new(&mut store, "enc_g", 1, cfg, rng);
        let enc_c = Encoder::new(&mut store, "enc_c", 3, cfg, rng);
        let k = cfg.levels();
        let deep = cfg.width(k) * cfg.level_size(k) * cfg.level_size(k);
        let colour_head = Linear::new(&mut store, "enc_c.head", deep, 2 * cfg.colour_dim, rng);
        // Start the posterior near the prior.
        let head_w = store.get_mut(colour_head.weight);
        *head_w = head_w.map(|v| v * R::from_f64(0.1));
        let dec_c = ColourSkipDecoder::new(&mut store, cfg, rng);
        let merge = MergeDecoder::new(&mut store, cfg, rng);
        let (tokens, codebook) = match cfg.variant {
            Variant::DualVae => {
                let pre_quant = Conv::new(&mut store, "enc_g.pre_quant", cfg.width(k), cfg.embed_dim, 1, 1, rng);
                let dec_g = GeometrySkipDecoder::new(&mut store, cfg, rng);
                let cb = Codebook::new(cfg.n_embed, cfg.embed_dim, decay, epsilon, rng);
                (Some(TokenBranch { pre_quant, dec_g }), Some(cb))
            }
            Variant::ReDualVae => (None, None),
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            geometry,
            enc_g,
            enc_c,
            colour_head,
            dec_c,
            merge,
            tokens,
            codebook,
        })
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    fn check_input(&self, x: &Tensor<R>) -> Result<()> {
        let s = x.shape();
        let size = self.cfg.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
            return Err(Error::Contract(format!(
                "expected images [N, 3, {size}, {size}], got {s:?}"
            )));
        }
        Ok(())
    }

    /// Structure estimate of `[N, 3, H, W]` images.
    pub fn structure<'g>(&self, cx: &Ctx<'_, 'g, R>, x: Var<'g, R>) -> Var<'g, R> {
        self.geometry.forward(cx, x)
    }

    /// Colour posterior `(mu, logvar)` and the colour pyramid.
    pub fn encode_colour<'g>(&self, cx: &Ctx<'_, 'g, R>, x: Var<'g, R>) -> (Var<'g, R>, Var<'g, R>, Pyramid<'g, R>) {
        let f_c = self.enc_c.forward(cx, x);
        let deep = *f_c.levels.last().expect("levels");
        let n = deep.shape()[0];
        let flat = deep.reshape([n, deep.value().numel() / n]);
        let stats = self.colour_head.forward(cx, flat);
        let d = self.cfg.colour_dim;
        (stats.narrow(1, 0, d), stats.narrow(1, d, d), f_c)
    }

    /// Geometry pyramid of a structure map, plus pre-quantisation features
    /// when the model has a token branch.
    pub fn encode_geometry<'g>(&self, cx: &Ctx<'_, 'g, R>, structure: Var<'g, R>) -> (Option<Var<'g, R>>, Pyramid<'g, R>) {
        let f_g = self.enc_g.forward(cx, structure);
        let pre = self
            .tokens
            .as_ref()
            .map(|t| t.pre_quant.forward(cx, *f_g.levels.last().expect("levels")));
        (pre, f_g)
    }

    pub fn encode<'g>(&self, cx: &Ctx<'_, 'g, R>, x: &Tensor<R>) -> Result<Encoded<'g, R>> {
        self.check_input(x)?;
        let xv = cx.g.constant(x.clone());
        let structure = self.structure(cx, xv);
        let (pre_quant, f_g) = self.encode_geometry(cx, structure);
        let (mu, logvar, f_c) = self.encode_colour(cx, xv);
        Ok(Encoded {
            structure,
            f_g,
            f_c,
            pre_quant,
            mu,
            logvar,
        })
    }

    pub fn decode_geometry<'g>(&self, cx: &Ctx<'_, 'g, R>, z_q: Var<'g, R>) -> Result<Pyramid<'g, R>> {
        let branch = self
            .tokens
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no token geometry latent".into()))?;
        Ok(branch.dec_g.forward(cx, z_q))
    }

    pub fn decode_colour<'g>(&self, cx: &Ctx<'_, 'g, R>, z_c: Var<'g, R>) -> Pyramid<'g, R> {
        self.dec_c.forward(cx, &self.cfg, z_c)
    }

    pub fn merge<'g>(&self, cx: &Ctx<'_, 'g, R>, g: &Pyramid<'g, R>, c: &Pyramid<'g, R>) -> Result<Var<'g, R>> {
        self.merge.forward(cx, g, c)
    }

    /// `[N, D, h, w]` embeddings for token grids.
    pub fn embed_tokens(&self, grids: &[crate::latents::TokenGrid]) -> Result<Tensor<R>> {
        let cb = self
            .codebook
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no codebook".into()))?;
        let (h, w) = (self.cfg.grid_size(), self.cfg.grid_size());
        let mut all = Vec::new();
        for grid in grids {
            if grid.h != h || grid.w != w {
                return Err(Error::Contract(format!("token grid {}x{} does not match {h}x{w}", grid.h, grid.w)));
            }
            if let Some(&token) = grid.tokens.iter().find(|&&t| t >= cb.len()) {
                return Err(Error::TokenOutOfRange { token, vocab: cb.len() });
            }
            all.extend_from_slice(&grid.tokens);
        }
        Ok(crate::latents::from_rows(&cb.lookup(&all), grids.len(), h, w))
    }

    /// Copy in another precision.
    pub fn cast<S: Real>(&self) -> DualVae<S> {
        DualVae {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            geometry: self.geometry.clone(),
            enc_g: self.enc_g.clone(),
            enc_c: self.enc_c.clone(),
            colour_head: self.colour_head.clone(),
            dec_c: self.dec_c.clone(),
            merge: self.merge.clone(),
            tokens: self.tokens.clone(),
            codebook: self.codebook.as_ref().map(Codebook::cast),
        }
    }
}
