//! Stage-1 training, stage-2 prior training and the generation procedures.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dualvae_autodiff::{Adam, Graph, Tensor};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Bundle;
use crate::config::TrainConfig;
use crate::data::{batch, load_dataset, split_indices, synth_shapes, unbatch, Dataset, Image, SynthSpec};
use crate::error::{Error, Result};
use crate::latents::{quantize, QuantMode, TokenGrid};
use crate::layers::Ctx;
use crate::networks::DualVae;
use crate::objective::{model_loss, LossBreakdown};
use crate::prior::Prior;

/// Header of the training loss CSV.
pub const LOSS_HEADER: &str = "step,recon_F,recon_z,vq,kl,total";

/// Batch size used for inference passes.
const INFER_BATCH: usize = 32;

pub fn loss_csv_line(step: u64, b: &LossBreakdown) -> String {
    format!("{step},{},{},{},{},{}", b.recon_f, b.recon_z, b.vq_latent, b.gauss_kl, b.total)
}

/// Stage-1 optimisation state.
pub struct Trainer {
    pub bundle: Bundle,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            bundle: Bundle::new(config, seed)?,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001),
        })
    }

    /// One Adam step on a random batch followed by the codebook EMA update.
    /// The model is left untouched when the loss is not finite.
    pub fn step(&mut self, images: &[Image]) -> Result<LossBreakdown> {
        if images.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let b = &mut self.bundle;
        let n = b.config.optim.batch_size.min(images.len());
        let picked = index::sample(&mut self.rng, images.len(), n);
        let refs: Vec<&Image> = picked.iter().map(|i| &images[i]).collect();
        let x = batch(&refs);
        let noise = Tensor::randn([n, b.config.model.colour_dim], 1.0, &mut self.rng);
        let step = b.step + 1;

        let g = Graph::new();
        let cx = Ctx::new(&g, &b.model.store, true);
        let vars = model_loss(&cx, &b.model, &b.config.loss, &x, &noise, &QuantMode::Live)?;
        vars.check_finite(step)?;
        let breakdown = vars.breakdown();
        let grads = g.backward(vars.total)?;
        let assignments = vars.assignments;
        b.adam.step(&mut b.model.store, &grads);
        if let (Some(cb), Some((grids, rows))) = (b.model.codebook.as_mut(), assignments) {
            let flat: Vec<usize> = grids.iter().flat_map(|t| t.tokens.iter().copied()).collect();
            cb.ema_update(&rows, &flat);
        }
        b.step = step;
        Ok(breakdown)
    }
}

/// Where a training run writes its loss CSV and checkpoints.
pub struct RunDir {
    dir: PathBuf,
    csv: BufWriter<File>,
    kept: Vec<PathBuf>,
}

impl RunDir {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut csv = BufWriter::new(File::create(dir.join("loss.csv"))?);
        writeln!(csv, "{LOSS_HEADER}")?;
        Ok(Self {
            dir: dir.to_path_buf(),
            csv,
            kept: Vec::new(),
        })
    }

    pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
        dir.join(format!("step{step:07}.dvae"))
    }

    fn save(&mut self, bundle: &Bundle, keep: usize) -> Result<()> {
        let path = Self::checkpoint_path(&self.dir, bundle.step);
        bundle.save(&path)?;
        if !self.kept.contains(&path) {
            self.kept.push(path);
        }
        while self.kept.len() > keep.max(1) {
            let old = self.kept.remove(0);
            std::fs::remove_file(&old)?;
        }
        Ok(())
    }

    /// Most recently written checkpoint.
    pub fn latest(&self) -> Option<&Path> {
        self.kept.last().map(PathBuf::as_path)
    }
}

pub struct TrainRun {
    pub bundle: Bundle,
    pub history: Vec<(u64, LossBreakdown)>,
}

/// Trains a model for `config.train.steps` steps. With `out`, a loss CSV and
/// periodic checkpoints are written there and a non-finite loss aborts the
/// run, leaving the last good checkpoint on disk.
pub fn train_stage1(images: &[Image], config: &TrainConfig, seed: u64, out: Option<&Path>) -> Result<TrainRun> {
    if images.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    config.validate()?;
    let mut trainer = Trainer::new(config.clone(), seed)?;
    let mut run = out.map(RunDir::create).transpose()?;
    let mut history = Vec::with_capacity(config.train.steps as usize);
    let every = config.train.checkpoint_every;
    for _ in 0..config.train.steps {
        let breakdown = match trainer.step(images) {
            Ok(b) => b,
            Err(e) => {
                if let Some(run) = &mut run {
                    run.csv.flush()?;
                    log::error!(
                        "training aborted: {e}; last good checkpoint: {}",
                        run.latest().map_or("none".into(), |p| p.display().to_string())
                    );
                }
                return Err(e);
            }
        };
        let step = trainer.bundle.step;
        if let Some(run) = &mut run {
            writeln!(run.csv, "{}", loss_csv_line(step, &breakdown))?;
            if every > 0 && step % every == 0 {
                run.csv.flush()?;
                run.save(&trainer.bundle, config.train.keep_checkpoints)?;
            }
        }
        if step % 100 == 0 || step == 1 {
            log::info!("step {step} total {:.5}", breakdown.total);
        }
        history.push((step, breakdown));
    }
    if let Some(run) = &mut run {
        run.csv.flush()?;
        if every == 0 || trainer.bundle.step % every != 0 {
            run.save(&trainer.bundle, config.train.keep_checkpoints)?;
        }
    }
    Ok(TrainRun {
        bundle: trainer.bundle,
        history,
    })
}

/// The configured image folder, or synthetic shapes when no path is set.
/// Synthetic images are drawn with `config.seed` and split like a folder.
pub fn load_data(config: &TrainConfig) -> Result<Dataset> {
    if !config.data.path.is_empty() {
        return load_dataset(Path::new(&config.data.path), config.model.image_size, config.data.split_seed);
    }
    let s = &config.data.synth;
    let (images, _) = synth_shapes(&SynthSpec {
        canvas: config.model.image_size,
        shapes: s.shapes,
        colours: s.colours,
        count: s.count,
        seed: config.seed,
    })?;
    let (train, test) = split_indices(images.len(), config.data.split_seed);
    Ok(Dataset {
        train: train.iter().map(|&i| images[i].clone()).collect(),
        test: test.iter().map(|&i| images[i].clone()).collect(),
        train_paths: Vec::new(),
        test_paths: Vec::new(),
        skipped: 0,
    })
}

/// Token grids of images under the trained quantiser.
pub fn tokenize(model: &DualVae<f32>, images: &[Image]) -> Result<Vec<TokenGrid>> {
    let cb = model
        .codebook
        .as_ref()
        .ok_or_else(|| Error::Contract("model has no codebook".into()))?;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_BATCH) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let g = Graph::new();
        let cx = Ctx::new(&g, &model.store, false);
        let enc = model.encode(&cx, &batch(&refs))?;
        let pre = enc.pre_quant.expect("codebook implies a token branch");
        out.extend(quantize(pre, cb, 0.0, &QuantMode::Live)?.tokens);
    }
    Ok(out)
}

/// Trains a prior on token grids; returns it with its optimiser and the
/// per-step training NLL.
pub fn train_prior_on(
    grids: &[TokenGrid],
    config: &TrainConfig,
    seed: u64,
) -> Result<(Prior<f32>, Adam<f32>, Vec<f64>)> {
    if grids.is_empty() {
        return Err(Error::Dataset("no token grids to train on".into()));
    }
    let side = config.model.grid_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    let mut prior = Prior::new(&config.prior, config.model.n_embed, (side, side), &mut rng)?;
    let mut adam = prior.optimizer();
    let seqs: Vec<Vec<usize>> = grids.iter().map(|t| t.tokens.clone()).collect();
    let n = config.prior.batch_size.min(seqs.len());
    let mut losses = Vec::with_capacity(config.prior.steps as usize);
    for step in 1..=config.prior.steps {
        let batch: Vec<Vec<usize>> = index::sample(&mut rng, seqs.len(), n)
            .iter()
            .map(|i| seqs[i].clone())
            .collect();
        let nll = prior.train_step(&mut adam, &batch, &mut rng)?;
        if !nll.is_finite() {
            return Err(Error::NonFiniteLoss {
                component: "prior_nll",
                step,
            });
        }
        if step % 100 == 0 || step == 1 {
            log::info!("prior step {step} nll {nll:.4}");
        }
        losses.push(nll);
    }
    Ok((prior, adam, losses))
}

/// Tokenises the training images and attaches a freshly trained prior.
pub fn train_prior(bundle: &mut Bundle, images: &[Image], seed: u64) -> Result<Vec<f64>> {
    let grids = tokenize(&bundle.model, images)?;
    let (prior, adam, losses) = train_prior_on(&grids, &bundle.config, seed)?;
    bundle.prior = Some((prior, adam));
    Ok(losses)
}

/// Colour posterior means `[N, d_c]`.
pub fn colour_means(model: &DualVae<f32>, images: &[Image]) -> Result<Tensor<f32>> {
    let d = model.cfg.colour_dim;
    let mut data = Vec::with_capacity(images.len() * d);
    for chunk in images.chunks(INFER_BATCH) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let g = Graph::new();
        let cx = Ctx::new(&g, &model.store, false);
        let enc = model.encode(&cx, &batch(&refs))?;
        data.extend_from_slice(enc.mu.value().data());
    }
    Ok(Tensor::new([images.len(), d], data))
}

/// Decodes token grids with colour codes `z_c` (`[N, d_c]`).
pub fn decode_tokens(model: &DualVae<f32>, grids: &[TokenGrid], z_c: &Tensor<f32>) -> Result<Vec<Image>> {
    check_codes(model, z_c, grids.len())?;
    let g = Graph::new();
    let cx = Ctx::new(&g, &model.store, false);
    let geo = model.decode_geometry(&cx, g.constant(model.embed_tokens(grids)?))?;
    let col = model.decode_colour(&cx, g.constant(z_c.clone()));
    Ok(unbatch(&model.merge(&cx, &geo, &col)?.value()))
}

fn check_codes(model: &DualVae<f32>, z_c: &Tensor<f32>, n: usize) -> Result<()> {
    if z_c.shape() != [n, model.cfg.colour_dim] {
        return Err(Error::Contract(format!(
            "colour codes must be [{n}, {}], got {:?}",
            model.cfg.colour_dim,
            z_c.shape()
        )));
    }
    Ok(())
}

fn prior_of(bundle: &Bundle) -> Result<&Prior<f32>> {
    bundle
        .prior
        .as_ref()
        .map(|(p, _)| p)
        .ok_or_else(|| Error::Contract("checkpoint has no trained prior".into()))
}

/// Samples both latents: token grids from the prior and `z_c ~ N(0, I)`.
pub fn generate_unconditional(bundle: &Bundle, n: usize, temperature: f64, rng: &mut impl Rng) -> Result<Vec<Image>> {
    let grids = prior_of(bundle)?.sample(n, temperature, rng)?;
    let z_c = Tensor::randn([n, bundle.config.model.colour_dim], 1.0, rng);
    decode_tokens(&bundle.model, &grids, &z_c)
}

/// Samples token grids from the prior and colours all `n` outputs with the
/// exemplar's posterior mean.
pub fn generate_conditional(
    bundle: &Bundle,
    exemplar: &Image,
    n: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Image>> {
    let mu = colour_means(&bundle.model, std::slice::from_ref(exemplar))?;
    let z_c = repeat_rows(&mu, n);
    let grids = prior_of(bundle)?.sample(n, temperature, rng)?;
    decode_tokens(&bundle.model, &grids, &z_c)
}

fn repeat_rows(row: &Tensor<f32>, n: usize) -> Tensor<f32> {
    let d = row.numel();
    Tensor::new([n, d], row.data().repeat(n))
}

/// Decodes the source's geometry features with the given colour codes.
pub fn decode_with_colour(model: &DualVae<f32>, source: &Image, z_c: &Tensor<f32>) -> Result<Vec<Image>> {
    let n = z_c.shape().first().copied().unwrap_or(0);
    check_codes(model, z_c, n)?;
    let g = Graph::new();
    let cx = Ctx::new(&g, &model.store, false);
    let x = batch(&vec![source; n]);
    let enc = model.encode(&cx, &x)?;
    let col = model.decode_colour(&cx, g.constant(z_c.clone()));
    Ok(unbatch(&model.merge(&cx, &enc.f_g, &col)?.value()))
}

/// `k` recolourings of a source with `z_c ~ N(0, I)`. A grayscale source
/// should be channel-replicated first (see [`crate::data::gray_to_rgb`]).
pub fn recolour(model: &DualVae<f32>, source: &Image, k: usize, rng: &mut impl Rng) -> Result<Vec<Image>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let z_c = Tensor::randn([k, model.cfg.colour_dim], 1.0, rng);
    decode_with_colour(model, source, &z_c)
}

/// Source geometry with the exemplar's posterior-mean colour.
pub fn colour_transfer(model: &DualVae<f32>, source: &Image, exemplar: &Image) -> Result<Image> {
    let mu = colour_means(model, std::slice::from_ref(exemplar))?;
    Ok(decode_with_colour(model, source, &mu)?.remove(0))
}

/// Transfers along the straight line between two exemplars' colour means,
/// `t = 0, 1/(steps-1), ..., 1`.
pub fn interpolate_colour(
    model: &DualVae<f32>,
    source: &Image,
    left: &Image,
    right: &Image,
    steps: usize,
) -> Result<Vec<Image>> {
    if steps < 2 {
        return Err(Error::Contract(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    let mu_l = colour_means(model, std::slice::from_ref(left))?;
    let mu_r = colour_means(model, std::slice::from_ref(right))?;
    (0..steps)
        .map(|i| {
            let t = i as f32 / (steps - 1) as f32;
            let z = mu_l.zip_map(&mu_r, |l, r| (1.0 - t) * l + t * r);
            // One image per pass so the endpoints match `colour_transfer` bit for bit.
            Ok(decode_with_colour(model, source, &z)?.remove(0))
        })
        .collect()
}

/// `[N, 1, H, W]` structure estimates.
pub fn structure_maps(model: &DualVae<f32>, images: &[Image]) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_BATCH) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let g = Graph::new();
        let cx = Ctx::new(&g, &model.store, false);
        let s = model.encode(&cx, &batch(&refs))?.structure.value();
        let (n, _, h, w) = s.dims4();
        for i in 0..n {
            out.push(Tensor::new([1, h, w], s.data()[i * h * w..(i + 1) * h * w].to_vec()));
        }
    }
    Ok(out)
}

/// Reconstructions through the encoder features (`F` path).
pub fn reconstruct(model: &DualVae<f32>, images: &[Image]) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_BATCH) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let g = Graph::new();
        let cx = Ctx::new(&g, &model.store, false);
        let enc = model.encode(&cx, &batch(&refs))?;
        out.extend(unbatch(&model.merge(&cx, &enc.f_g, &enc.f_c)?.value()));
    }
    Ok(out)
}
