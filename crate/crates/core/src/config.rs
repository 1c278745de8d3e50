//! Run configuration and its flat `section.key = value` text format.
//!
//! ```text
//! # comments start with '#'
//! model.image_size = 32
//! loss.w_F = 2.0
//! model.widths = 32,64,128
//! ```
//!
//! Every key has a default, unknown or repeated keys are rejected, and
//! [`TrainConfig::to_text`] emits a file that parses back to the same value.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use dualvae_autodiff::AdamConfig;

use crate::error::{Error, Result};

/// Which objective and latent set a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Token geometry latent plus Gaussian colour latent.
    DualVae,
    /// Colour latent only; geometry features go straight to the decoder.
    ReDualVae,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::DualVae => "dualvae",
            Variant::ReDualVae => "redualvae",
        })
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dualvae" => Ok(Variant::DualVae),
            "redualvae" => Ok(Variant::ReDualVae),
            other => Err(format!("unknown variant `{other}` (dualvae|redualvae)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Spatial downsampling factor from image to token grid; a power of two.
    pub downsample: usize,
    /// Codebook vector width.
    pub embed_dim: usize,
    /// Codebook size.
    pub n_embed: usize,
    /// Colour latent width.
    pub colour_dim: usize,
    /// Channel widths of pyramid levels; level `k` uses `widths[min(k, len-1)]`.
    pub widths: Vec<usize>,
    pub geometry_channels: usize,
    pub geometry_layers: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            downsample: 8,
            embed_dim: 32,
            n_embed: 64,
            colour_dim: 64,
            widths: vec![32, 64, 128],
            geometry_channels: 16,
            geometry_layers: 3,
            variant: Variant::DualVae,
        }
    }
}

impl ModelConfig {
    /// Number of downsampling stages, `log2(downsample)`.
    pub fn levels(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    /// Channel width at pyramid level `k` (0 = full resolution).
    pub fn width(&self, k: usize) -> usize {
        self.widths[k.min(self.widths.len() - 1)]
    }

    /// Spatial side of pyramid level `k`.
    pub fn level_size(&self, k: usize) -> usize {
        self.image_size >> k
    }

    /// Side of the token grid.
    pub fn grid_size(&self) -> usize {
        self.image_size / self.downsample
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !self.downsample.is_power_of_two() || self.downsample < 2 {
            return bad(format!("model.downsample = {} must be a power of two >= 2", self.downsample));
        }
        if self.image_size == 0 || self.image_size % self.downsample != 0 {
            return bad(format!(
                "model.image_size = {} must be divisible by model.downsample = {}",
                self.image_size, self.downsample
            ));
        }
        if self.grid_size() < 2 {
            return bad("token grid must be at least 2x2 (reflect padding)".into());
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("model.widths must be a non-empty list of positive widths".into());
        }
        for (name, v) in [
            ("model.embed_dim", self.embed_dim),
            ("model.n_embed", self.n_embed),
            ("model.colour_dim", self.colour_dim),
            ("model.geometry_channels", self.geometry_channels),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.geometry_layers < 1 {
            return bad("model.geometry_layers must be >= 1".into());
        }
        Ok(())
    }
}

/// Weights of the loss components.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the encoder-feature reconstruction path.
    pub w_f: f64,
    /// Weight of the latent reconstruction path.
    pub w_z: f64,
    pub w_vq: f64,
    pub w_kl: f64,
    /// Commitment weight.
    pub beta: f64,
    /// Names of extra reconstruction terms. None are available; must stay empty.
    pub extra_recon: String,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_f: 2.0,
            w_z: 1.0,
            w_vq: 1.0,
            w_kl: 1.0,
            beta: 0.25,
            extra_recon: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodebookConfig {
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            decay: 0.99,
            epsilon: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig {
                lr: 0.0005,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            batch_size: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLoopConfig {
    pub steps: u64,
    pub checkpoint_every: u64,
    pub keep_checkpoints: usize,
}

impl Default for TrainLoopConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            checkpoint_every: 500,
            keep_checkpoints: 3,
        }
    }
}

/// Autoregressive token prior settings.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorConfig {
    pub blocks: usize,
    pub channels: usize,
    pub heads: usize,
    pub dropout: f64,
    pub lr: f64,
    pub steps: u64,
    pub batch_size: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            channels: 64,
            heads: 4,
            dropout: 0.1,
            lr: 0.0005,
            steps: 2000,
            batch_size: 32,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.channels == 0 || self.heads == 0 {
            return Err(Error::InvalidConfig("prior sizes must be positive".into()));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "prior.channels = {} must be divisible by prior.heads = {}",
                self.channels, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("prior.dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Synthetic shapes dataset parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub shapes: usize,
    pub colours: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            shapes: 8,
            colours: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Image directory; empty means the synthetic shapes set.
    pub path: String,
    pub split_seed: u64,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: String::new(),
            split_seed: 0,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub codebook: CodebookConfig,
    pub optim: OptimConfig,
    pub train: TrainLoopConfig,
    pub prior: PriorConfig,
    pub data: DataConfig,
    pub seed: u64,
}

fn parse<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| format!("`{key}`: cannot parse `{v}`: {e}"))
}

fn parse_list(key: &str, v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

impl TrainConfig {
    /// Every accepted key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let a = &self.optim.adam;
        let widths = m
            .widths
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("model.image_size", m.image_size.to_string()),
            ("model.downsample", m.downsample.to_string()),
            ("model.embed_dim", m.embed_dim.to_string()),
            ("model.n_embed", m.n_embed.to_string()),
            ("model.colour_dim", m.colour_dim.to_string()),
            ("model.widths", widths),
            ("model.geometry_channels", m.geometry_channels.to_string()),
            ("model.geometry_layers", m.geometry_layers.to_string()),
            ("model.variant", m.variant.to_string()),
            ("loss.w_F", self.loss.w_f.to_string()),
            ("loss.w_z", self.loss.w_z.to_string()),
            ("loss.w_vq", self.loss.w_vq.to_string()),
            ("loss.w_kl", self.loss.w_kl.to_string()),
            ("loss.beta", self.loss.beta.to_string()),
            ("loss.extra_recon", self.loss.extra_recon.clone()),
            ("codebook.decay", self.codebook.decay.to_string()),
            ("codebook.epsilon", self.codebook.epsilon.to_string()),
            ("optim.lr", a.lr.to_string()),
            ("optim.beta1", a.beta1.to_string()),
            ("optim.beta2", a.beta2.to_string()),
            ("optim.eps", a.eps.to_string()),
            ("optim.batch_size", self.optim.batch_size.to_string()),
            ("train.steps", self.train.steps.to_string()),
            ("train.checkpoint_every", self.train.checkpoint_every.to_string()),
            ("train.keep_checkpoints", self.train.keep_checkpoints.to_string()),
            ("prior.blocks", self.prior.blocks.to_string()),
            ("prior.channels", self.prior.channels.to_string()),
            ("prior.heads", self.prior.heads.to_string()),
            ("prior.dropout", self.prior.dropout.to_string()),
            ("prior.lr", self.prior.lr.to_string()),
            ("prior.steps", self.prior.steps.to_string()),
            ("prior.batch_size", self.prior.batch_size.to_string()),
            ("data.path", self.data.path.clone()),
            ("data.split_seed", self.data.split_seed.to_string()),
            ("synth.count", self.data.synth.count.to_string()),
            ("synth.shapes", self.data.synth.shapes.to_string()),
            ("synth.colours", self.data.synth.colours.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let a = &mut self.optim.adam;
        match key {
            "model.image_size" => m.image_size = parse(key, v)?,
            "model.downsample" => m.downsample = parse(key, v)?,
            "model.embed_dim" => m.embed_dim = parse(key, v)?,
            "model.n_embed" => m.n_embed = parse(key, v)?,
            "model.colour_dim" => m.colour_dim = parse(key, v)?,
            "model.widths" => m.widths = parse_list(key, v)?,
            "model.geometry_channels" => m.geometry_channels = parse(key, v)?,
            "model.geometry_layers" => m.geometry_layers = parse(key, v)?,
            "model.variant" => m.variant = v.parse()?,
            "loss.w_F" => self.loss.w_f = parse(key, v)?,
            "loss.w_z" => self.loss.w_z = parse(key, v)?,
            "loss.w_vq" => self.loss.w_vq = parse(key, v)?,
            "loss.w_kl" => self.loss.w_kl = parse(key, v)?,
            "loss.beta" => self.loss.beta = parse(key, v)?,
            "loss.extra_recon" => self.loss.extra_recon = v.to_string(),
            "codebook.decay" => self.codebook.decay = parse(key, v)?,
            "codebook.epsilon" => self.codebook.epsilon = parse(key, v)?,
            "optim.lr" => a.lr = parse(key, v)?,
            "optim.beta1" => a.beta1 = parse(key, v)?,
            "optim.beta2" => a.beta2 = parse(key, v)?,
            "optim.eps" => a.eps = parse(key, v)?,
            "optim.batch_size" => self.optim.batch_size = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "train.keep_checkpoints" => self.train.keep_checkpoints = parse(key, v)?,
            "prior.blocks" => self.prior.blocks = parse(key, v)?,
            "prior.channels" => self.prior.channels = parse(key, v)?,
            "prior.heads" => self.prior.heads = parse(key, v)?,
            "prior.dropout" => self.prior.dropout = parse(key, v)?,
            "prior.lr" => self.prior.lr = parse(key, v)?,
            "prior.steps" => self.prior.steps = parse(key, v)?,
            "prior.batch_size" => self.prior.batch_size = parse(key, v)?,
            "data.path" => self.data.path = v.to_string(),
            "data.split_seed" => self.data.split_seed = parse(key, v)?,
            "synth.count" => self.data.synth.count = parse(key, v)?,
            "synth.shapes" => self.data.synth.shapes = parse(key, v)?,
            "synth.colours" => self.data.synth.colours = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    line: line_no,
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config {
                    line: line_no,
                    message: format!("duplicate key `{key}`"),
                });
            }
            cfg.set(key, value).map_err(|message| Error::Config {
                line: line_no,
                message,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.prior.validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !self.loss.extra_recon.is_empty() {
            return bad("loss.extra_recon: no extra reconstruction terms are available");
        }
        let l = &self.loss;
        if [l.w_f, l.w_z, l.w_vq, l.w_kl, l.beta]
            .iter()
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return bad("loss weights must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.codebook.decay) {
            return bad("codebook.decay must be in [0, 1)");
        }
        if !(self.codebook.epsilon > 0.0) {
            return bad("codebook.epsilon must be positive");
        }
        let a = &self.optim.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("invalid Adam settings");
        }
        if self.optim.batch_size == 0 || self.prior.batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if self.train.checkpoint_every == 0 || self.train.keep_checkpoints == 0 {
            return bad("train.checkpoint_every and train.keep_checkpoints must be positive");
        }
        if self.data.synth.shapes == 0
            || self.data.synth.shapes > crate::data::SHAPE_KINDS
            || self.data.synth.colours == 0
            || self.data.synth.colours > crate::data::PALETTE.len()
        {
            return bad("synth.shapes / synth.colours out of range");
        }
        Ok(())
    }
}
