//! `dualvae` command-line front end.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dualvae::data::{desaturate, load_image, save_grid, save_gray, Image};
use dualvae::eval::{
    colour_histogram, conditioned_kl, mean_stderr, pairwise_baseline_kl, write_ablation_csv, AblationRow, KlMode,
};
use dualvae::pipeline::{
    colour_transfer, generate_conditional, generate_unconditional, interpolate_colour, load_data, recolour,
    structure_maps, train_prior, train_stage1,
};
use dualvae::theory::verify_all;
use dualvae::{Bundle, TrainConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "dualvae", version, about = "Dual-latent VAE: training, generation and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file (`key = value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random choice; defaults to the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Stage-1 training; writes loss.csv, rolling checkpoints and model.dvae.
    Train(Common),
    /// Fits the token prior for a trained model; writes model_prior.dvae.
    TrainPrior(WithCheckpoint),
    /// Unconditional samples.
    Sample {
        #[command(flatten)]
        ck: WithCheckpoint,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
    },
    /// Samples coloured after exemplars: an exemplar row above its samples.
    SampleCond {
        #[command(flatten)]
        ck: WithCheckpoint,
        #[arg(long, required = true, num_args = 1..)]
        exemplar: Vec<PathBuf>,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
    },
    /// Random recolourings of an image (grayscale inputs are desaturated first).
    Recolour {
        #[command(flatten)]
        ck: WithCheckpoint,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 8)]
        k: usize,
        /// Treat the input as grayscale.
        #[arg(long)]
        gray: bool,
    },
    /// Colours the input after an exemplar.
    Transfer {
        #[command(flatten)]
        ck: WithCheckpoint,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        exemplar: PathBuf,
    },
    /// Colour interpolation between two exemplars.
    Interpolate {
        #[command(flatten)]
        ck: WithCheckpoint,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        #[arg(long, default_value_t = 7)]
        steps: usize,
    },
    /// Exemplar-conditioned histogram KL of one or more models; writes ablation.csv.
    EvalAblation {
        #[command(flatten)]
        common: Common,
        /// `label=path` of a checkpoint; repeatable.
        #[arg(long = "model", required = true, num_args = 1..)]
        models: Vec<String>,
        #[arg(long, default_value_t = 50)]
        exemplars: usize,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long, default_value_t = 2000)]
        pairs: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Symmetrised KL instead of KL(exemplar || generated).
        #[arg(long)]
        symmetric: bool,
    },
    /// Structure estimates as grayscale PNGs.
    DumpStructure {
        #[command(flatten)]
        ck: WithCheckpoint,
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
    },
    /// Runs the bound and identity checks and prints a report.
    VerifyMath(Common),
}

fn load_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

struct Session {
    bundle: Bundle,
    seed: u64,
    out: PathBuf,
}

fn open(ck: &WithCheckpoint) -> Result<Session> {
    let mut bundle = Bundle::load(&ck.checkpoint)?;
    if let Some(p) = &ck.common.config {
        let file = TrainConfig::load(p)?;
        bundle.config.data = file.data;
        bundle.config.prior = file.prior;
    }
    let seed = ck.common.seed.unwrap_or(bundle.config.seed);
    std::fs::create_dir_all(&ck.common.out)?;
    Ok(Session {
        bundle,
        seed,
        out: ck.common.out.clone(),
    })
}

fn image(session: &Session, path: &Path) -> Result<Image> {
    Ok(load_image(path, session.bundle.config.model.image_size)?)
}

fn done(path: &Path) {
    println!("wrote {}", path.display());
}

fn train(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let data = load_data(&cfg)?;
    log::info!("{} training / {} test images ({} skipped)", data.train.len(), data.test.len(), data.skipped);
    let run = train_stage1(&data.train, &cfg, cfg.seed, Some(&common.out))?;
    let path = common.out.join("model.dvae");
    run.bundle.save(&path)?;
    if let Some(cb) = &run.bundle.model.codebook {
        let mut w = BufWriter::new(File::create(common.out.join("codebook_usage.csv"))?);
        writeln!(w, "token,count")?;
        for (i, n) in cb.usage.iter().enumerate() {
            writeln!(w, "{i},{n}")?;
        }
    }
    done(&common.out.join("loss.csv"));
    done(&path);
    Ok(())
}

fn train_prior_cmd(ck: &WithCheckpoint) -> Result<()> {
    let mut s = open(ck)?;
    if s.bundle.config.model.variant != Variant::DualVae {
        bail!(dualvae::Error::Contract("the token prior needs a dualvae model".into()));
    }
    let data = load_data(&s.bundle.config)?;
    let losses = train_prior(&mut s.bundle, &data.train, s.seed)?;
    let mut w = BufWriter::new(File::create(s.out.join("prior_loss.csv"))?);
    writeln!(w, "step,nll")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{},{l}", i + 1)?;
    }
    let path = s.out.join("model_prior.dvae");
    s.bundle.save(&path)?;
    done(&path);
    Ok(())
}

fn rows_of(images: Vec<Image>, per_row: usize) -> Vec<Vec<Image>> {
    images.chunks(per_row.max(1)).map(<[Image]>::to_vec).collect()
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(c) => train(c),
        Command::TrainPrior(ck) => train_prior_cmd(ck),
        Command::Sample { ck, n, temperature } => {
            let s = open(ck)?;
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
            let imgs = generate_unconditional(&s.bundle, *n, *temperature, &mut rng)?;
            let per_row = (*n as f64).sqrt().ceil() as usize;
            let path = s.out.join("samples.png");
            save_grid(&path, &rows_of(imgs, per_row))?;
            done(&path);
            Ok(())
        }
        Command::SampleCond {
            ck,
            exemplar,
            n,
            temperature,
        } => {
            let s = open(ck)?;
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
            let exemplars = exemplar.iter().map(|p| image(&s, p)).collect::<Result<Vec<_>>>()?;
            let mut columns = Vec::new();
            for ex in &exemplars {
                columns.push(generate_conditional(&s.bundle, ex, *n, *temperature, &mut rng)?);
            }
            let mut rows = vec![exemplars.clone()];
            rows.extend((0..*n).map(|i| columns.iter().map(|c| c[i].clone()).collect()));
            let path = s.out.join("conditional.png");
            save_grid(&path, &rows)?;
            done(&path);
            Ok(())
        }
        Command::Recolour { ck, input, k, gray } => {
            let s = open(ck)?;
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
            let mut src = image(&s, input)?;
            if *gray {
                src = desaturate(&src);
            }
            let outs = recolour(&s.bundle.model, &src, *k, &mut rng)?;
            let path = s.out.join("recolour.png");
            save_grid(&path, &[vec![src], outs])?;
            done(&path);
            Ok(())
        }
        Command::Transfer { ck, input, exemplar } => {
            let s = open(ck)?;
            let (src, ex) = (image(&s, input)?, image(&s, exemplar)?);
            let out = colour_transfer(&s.bundle.model, &src, &ex)?;
            let path = s.out.join("transfer.png");
            save_grid(&path, &[vec![src, ex, out]])?;
            done(&path);
            Ok(())
        }
        Command::Interpolate {
            ck,
            input,
            left,
            right,
            steps,
        } => {
            let s = open(ck)?;
            let (src, l, r) = (image(&s, input)?, image(&s, left)?, image(&s, right)?);
            let seq = interpolate_colour(&s.bundle.model, &src, &l, &r, *steps)?;
            let mut top = vec![l];
            top.extend(std::iter::repeat(src).take(steps.saturating_sub(2)));
            top.push(r);
            let path = s.out.join("interpolate.png");
            save_grid(&path, &[top, seq])?;
            done(&path);
            Ok(())
        }
        Command::EvalAblation {
            common,
            models,
            exemplars,
            samples,
            pairs,
            temperature,
            symmetric,
        } => eval_ablation(common, models, *exemplars, *samples, *pairs, *temperature, *symmetric),
        Command::DumpStructure { ck, input } => {
            let s = open(ck)?;
            let imgs = input.iter().map(|p| image(&s, p)).collect::<Result<Vec<_>>>()?;
            for (p, map) in input.iter().zip(structure_maps(&s.bundle.model, &imgs)?) {
                let stem = p.file_stem().map_or("image".into(), |x| x.to_string_lossy().into_owned());
                let path = s.out.join(format!("{stem}_structure.png"));
                save_gray(&path, &map)?;
                done(&path);
            }
            Ok(())
        }
        Command::VerifyMath(common) => {
            let cfg = load_config(common)?;
            let report = verify_all(&mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
            std::fs::create_dir_all(&common.out)?;
            let mut w = BufWriter::new(File::create(common.out.join("verify_math.txt"))?);
            for (name, ok, detail) in &report.lines {
                let line = format!("{} {name}: {detail}", if *ok { "PASS" } else { "FAIL" });
                println!("{line}");
                writeln!(w, "{line}")?;
            }
            if !report.all_pass() {
                bail!(dualvae::Error::Contract("math verification failed".into()));
            }
            Ok(())
        }
    }
}

fn eval_ablation(
    common: &Common,
    models: &[String],
    exemplars: usize,
    samples: usize,
    pairs: usize,
    temperature: f64,
    symmetric: bool,
) -> Result<()> {
    let mode = if symmetric { KlMode::Symmetric } else { KlMode::ExemplarToGenerated };
    let mut loaded = Vec::new();
    for spec in models {
        let (label, path) = spec
            .split_once('=')
            .with_context(|| format!("--model expects label=path, got `{spec}`"))?;
        loaded.push((label.to_string(), Bundle::load(Path::new(path))?));
    }
    let cfg = match &common.config {
        Some(_) => load_config(common)?,
        None => loaded[0].1.config.clone(),
    };
    let seed = common.seed.unwrap_or(cfg.seed);
    let data = load_data(&cfg)?;
    let test = &data.test[..exemplars.min(data.test.len())];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for (label, bundle) in &loaded {
        let (arm, kls) = if bundle.prior.is_some() {
            let kls = conditioned_kl(test, samples, mode, &mut rng, |ex, n, r| {
                generate_conditional(bundle, ex, n, temperature, r)
            })?;
            ("conditional", kls)
        } else {
            let mut kls = Vec::new();
            for ex in test {
                let h = colour_histogram(ex);
                for _ in 0..samples {
                    let src = &data.test[rng.gen_range(0..data.test.len())];
                    let out = colour_transfer(&bundle.model, src, ex)?;
                    kls.push(mode.divergence(&h, &colour_histogram(&out)));
                }
            }
            ("transfer", kls)
        };
        let (mean_kl, stderr) = mean_stderr(&kls);
        rows.push(AblationRow {
            model: label.clone(),
            arm: arm.into(),
            mean_kl,
            stderr,
            n: kls.len(),
        });
    }
    let (mean_kl, stderr) = pairwise_baseline_kl(&data.test, pairs, mode, &mut rng)?;
    rows.push(AblationRow {
        model: "baseline".into(),
        arm: "pairwise".into(),
        mean_kl,
        stderr,
        n: pairs,
    });
    std::fs::create_dir_all(&common.out)?;
    let path = common.out.join("ablation.csv");
    let mut w = BufWriter::new(File::create(&path)?);
    write_ablation_csv(&mut w, &rows)?;
    w.flush()?;
    for r in &rows {
        println!("{} {} mean_kl={:.4} stderr={:.4} n={}", r.model, r.arm, r.mean_kl, r.stderr, r.n);
    }
    done(&path);
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(e) = e.downcast_ref::<dualvae::Error>() {
        e.kind()
    } else if e.downcast_ref::<std::io::Error>().is_some() {
        "io"
    } else {
        "usage"
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("DUALVAE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("error: kind={} message={message}", error_kind(&e));
            ExitCode::FAILURE
        }
    }
}
