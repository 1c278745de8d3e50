//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! The trained-model criteria share models: the three regularised and three
//! unregularised DualVAE runs serve criterion 6, the first regularised one
//! criterion 7 and a separate ReDualVAE run criterion 9.

use std::time::Instant;

use dualvae::checkpoint::Bundle;
use dualvae::config::{TrainConfig, Variant};
use dualvae::data::{desaturate, load_dataset, save_png, split_indices, synth_shapes, Image, SynthSpec};
use dualvae::eval::{
    colour_histogram, conditioned_kl, histogram_kl, mean_stderr, pairwise_baseline_kl, KlMode,
};
use dualvae::latents::{gaussian_kl, gaussian_kl_f64, quantize, Codebook, QuantMode};
use dualvae::layers::Ctx;
use dualvae::networks::DualVae;
use dualvae::objective::model_loss;
use dualvae::pipeline::{
    colour_transfer, decode_tokens, generate_conditional, interpolate_colour, reconstruct, recolour,
    structure_maps, tokenize, train_prior, train_stage1,
};
use dualvae::prior::Prior;
use dualvae::theory::{bound_chain_violations, elbo_ordering, laplace_identity_gap};
use dualvae_autodiff::{grad_check, grad_check_params, Graph, Padding, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Channel widths of every trained acceptance model.
const DESK_WIDTHS: [usize; 3] = [8, 16, 32];
const STAGE1_STEPS: u64 = 1500;
const PRIOR_STEPS: u64 = 1000;
const SEEDS: [u64; 3] = [0, 1, 2];
const EXEMPLARS: usize = 50;
const SAMPLES_PER_EXEMPLAR: usize = 4;
const BASELINE_PAIRS: usize = 2000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- criterion 1

fn weighted<'g>(y: Var<'g, f64>, seed: u64) -> Var<'g, f64> {
    let w = Tensor::randn(y.shape(), 1.0, &mut rng(seed ^ 0xABCD));
    (y * y.graph().constant(w)).sum()
}

type Body = Box<dyn for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Var<'g, f64>>;

fn primitives() -> Vec<(&'static str, Vec<usize>, Body)> {
    fn c<'g>(g: &'g Graph<f64>, shape: &[usize], seed: u64) -> Var<'g, f64> {
        g.constant(Tensor::randn(shape.to_vec(), 0.5, &mut rng(seed)))
    }
    vec![
        ("conv2d reflect s1", vec![2, 3, 6, 6], Box::new(|g, x| x.conv2d(c(g, &[4, 3, 3, 3], 1), Some(c(g, &[4], 2)), 1, Padding::Reflect))),
        ("conv2d zero s2", vec![2, 3, 6, 6], Box::new(|g, x| x.conv2d(c(g, &[4, 3, 3, 3], 3), None, 2, Padding::Zero))),
        ("conv2d kernel", vec![4, 3, 3, 3], Box::new(|g, k| c(g, &[2, 3, 6, 6], 4).conv2d(k, None, 2, Padding::Reflect))),
        ("linear", vec![3, 5], Box::new(|g, x| x.linear(c(g, &[4, 5], 5), Some(c(g, &[4], 6))))),
        ("linear weight", vec![4, 5], Box::new(|g, w| c(g, &[3, 5], 7).linear(w, None))),
        ("matmul", vec![3, 4], Box::new(|g, x| x.matmul(c(g, &[4, 2], 8)))),
        ("transpose", vec![3, 4], Box::new(|_, x| x.transpose())),
        ("layer_norm", vec![2, 5, 3, 3], Box::new(|g, x| x.layer_norm(c(g, &[5], 9), c(g, &[5], 10), 1e-5))),
        ("leaky_relu", vec![4, 5], Box::new(|_, x| x.leaky_relu(0.2))),
        ("sigmoid", vec![4, 5], Box::new(|_, x| x.sigmoid())),
        ("tanh", vec![4, 5], Box::new(|_, x| x.tanh())),
        ("exp", vec![4, 5], Box::new(|_, x| x.exp())),
        ("square", vec![4, 5], Box::new(|_, x| x.square())),
        ("scale add_scalar neg", vec![4, 5], Box::new(|_, x| -(x.scale(1.5).add_scalar(0.3)))),
        ("mul sub", vec![4, 5], Box::new(|g, x| x * c(g, &[4, 5], 11) - x)),
        ("sum", vec![4, 5], Box::new(|_, x| x.sum())),
        ("mean", vec![4, 5], Box::new(|_, x| x.mean())),
        ("sq_l2", vec![4, 5], Box::new(|_, x| x.sq_l2())),
        ("l1_norm", vec![4, 5], Box::new(|_, x| x.l1_norm())),
        ("softmax_rows causal", vec![4, 4], Box::new(|_, x| x.softmax_rows(true))),
        ("block_causal_softmax", vec![6, 6], Box::new(|_, x| x.block_causal_softmax(3))),
        ("softmax_rows", vec![3, 5], Box::new(|_, x| x.softmax_rows(false))),
        ("cross_entropy", vec![3, 5], Box::new(|_, x| x.cross_entropy(&[0, 4, 2]))),
        ("upsample_nearest2x", vec![1, 2, 3, 3], Box::new(|_, x| x.upsample_nearest2x())),
        ("avg_pool2x", vec![1, 2, 4, 4], Box::new(|_, x| x.avg_pool2x())),
        ("channel_mean", vec![2, 3, 3, 3], Box::new(|_, x| x.channel_mean())),
        ("broadcast_spatial", vec![2, 3], Box::new(|_, x| x.broadcast_spatial(2, 3))),
        ("concat", vec![2, 3], Box::new(|g, x| g.concat(&[x, c(g, &[2, 2], 12), x], 1))),
        ("narrow", vec![4, 5], Box::new(|_, x| x.narrow(1, 1, 3))),
        ("reshape", vec![4, 5], Box::new(|_, x| x.reshape([2, 10]))),
        ("gather_rows", vec![4, 3], Box::new(|_, x| x.gather_rows(&[3, 0, 3, 1]))),
        (
            "straight_through",
            vec![2, 3],
            Box::new(|_, x| {
                let v = x.value().map(|a| a + 1.0);
                x.straight_through(v)
            }),
        ),
    ]
}

fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.model.image_size = 8;
    c.model.downsample = 4;
    c.model.embed_dim = 3;
    c.model.n_embed = 5;
    c.model.colour_dim = 3;
    c.model.widths = vec![2, 3, 4];
    c.model.geometry_channels = 3;
    c.model.geometry_layers = 2;
    c
}

fn criterion_1() -> Outcome {
    let mut worst_prim = 0.0f64;
    let mut failures = Vec::new();
    for (i, (name, shape, f)) in primitives().into_iter().enumerate() {
        for seed in [1u64, 2, 3] {
            let x = Tensor::randn(shape.clone(), 1.0, &mut rng(seed * 100 + i as u64));
            let r = grad_check(|g, v| weighted(f(g, v), seed), &x, 1e-6).expect("grad check runs");
            worst_prim = worst_prim.max(r.max_rel_err);
            if !r.passes(1e-5) {
                failures.push(format!("{name}/{seed}"));
            }
        }
    }

    let mut worst_model = 0.0f64;
    let (mut checked, mut kinks) = (0, 0);
    for variant in [Variant::DualVae, Variant::ReDualVae] {
        let mut cfg = tiny_config();
        cfg.model.variant = variant;
        let model = DualVae::<f32>::new(&cfg.model, 0.99, 1e-5, &mut rng(7)).unwrap().cast::<f64>();
        let x = Tensor::<f64>::uniform([2, 3, 8, 8], 0.0, 1.0, &mut rng(8));
        let noise = Tensor::<f64>::randn([2, cfg.model.colour_dim], 1.0, &mut rng(9));
        let quant = match &model.codebook {
            Some(cb) => {
                let g = Graph::new();
                let cx = Ctx::new(&g, &model.store, false);
                let pre = model.encode(&cx, &x).unwrap().pre_quant.unwrap();
                let q = quantize(pre, cb, cfg.loss.beta, &QuantMode::Live).unwrap();
                let zq = q.z_q.value().as_ref().clone();
                let offset = zq.zip_map(&pre.value(), |a, b| a - b);
                QuantMode::Frozen { z_q: zq, offset }
            }
            None => QuantMode::Live,
        };
        let r = grad_check_params(
            |g, store| {
                let cx = Ctx::new(g, store, true);
                model_loss(&cx, &model, &cfg.loss, &x, &noise, &quant).unwrap().total
            },
            &model.store,
            1e-5,
            |_, _| true,
        )
        .expect("model grad check runs");
        worst_model = worst_model.max(r.max_rel_err);
        checked += r.checked;
        kinks += r.kinks.len();
        if !r.passes(1e-4) {
            failures.push(format!("{variant} loss: {:?}", r.worst));
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "primitive max rel err {worst_prim:.2e} (tol 1e-5); full loss max rel err {worst_model:.2e} (tol 1e-4) over {checked} parameters, {kinks} kink coordinates excluded{}",
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
        ),
    )
}

// ------------------------------------------------------------ criteria 2 to 5

fn criterion_2() -> Outcome {
    let gap = laplace_identity_gap(1000, 16, &mut rng(2));
    outcome(gap <= 1e-9, format!("1000 pairs, max gap {gap:.3e} (tol 1e-9)"))
}

fn criterion_3() -> Outcome {
    let mut r = rng(3);
    let (bound, triangle, lipschitz, split) = bound_chain_violations(10_000, &mut r);
    let (order_violations, worst) = elbo_ordering(1000, 64, &mut r).unwrap();
    outcome(
        bound + triangle + lipschitz + split + order_violations == 0,
        format!(
            "10000 tuples: bound {bound}, triangle {triangle}, reverse-Lipschitz {lipschitz}, split {split} violations; \
             1000 draws: {order_violations} ordering violations beyond 3 SE (worst excess {worst:.2} SE)"
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut r = rng(4);
    let cb = Codebook::<f64>::new(64, 8, 0.99, 1e-5, &mut r);
    let rows = Tensor::<f64>::randn([1000, 8], 1.0, &mut r);
    let assigned = cb.assign(&rows);
    let mut nn_mismatch = 0;
    for (i, v) in rows.data().chunks_exact(8).enumerate() {
        let mut best = (f64::INFINITY, 0);
        for k in 0..cb.len() {
            let d: f64 = v.iter().zip(cb.row(k)).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best.0 {
                best = (d, k);
            }
        }
        nn_mismatch += usize::from(best.1 != assigned[i]);
    }

    // Fixed point: every vector of one cluster keeps landing on entry 0 of a
    // freshly initialised codebook.
    let mut cb = Codebook::<f64>::new(4, 2, 0.99, 1e-5, &mut r);
    let centre = Tensor::<f64>::randn([1, 2], 1.0, &mut r);
    let cluster = Tensor::<f64>::from_fn([40, 2], |i| centre.data()[i % 2])
        .zip_map(&Tensor::randn([40, 2], 0.3, &mut r), |a, b| a + b);
    let mean = [
        cluster.data().iter().step_by(2).sum::<f64>() / 40.0,
        cluster.data().iter().skip(1).step_by(2).sum::<f64>() / 40.0,
    ];
    for _ in 0..500 {
        cb.ema_update(&cluster, &[0; 40]);
    }
    let ema_err = cb.row(0).iter().zip(mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    // Straight-through: gradient wrt the pre-quantisation map equals the
    // gradient wrt the quantised map, and both match finite differences of
    // the frozen-assignment loss.
    let cb = Codebook::<f64>::new(6, 3, 0.99, 1e-5, &mut r);
    let pre_val = Tensor::<f64>::randn([2, 3, 2, 2], 1.0, &mut r);
    let w = Tensor::<f64>::randn([2, 3, 2, 2], 1.0, &mut r);
    let g = Graph::new();
    let pre = g.variable(pre_val.clone());
    let q = quantize(pre, &cb, 0.0, &QuantMode::Live).unwrap();
    let loss = (q.z_q * g.constant(w.clone())).sum();
    let grads = g.backward(loss).unwrap();
    let st_err = grads.of(pre).unwrap().max_abs_diff(&w);
    let zq = q.z_q.value().as_ref().clone();
    let offset = zq.zip_map(&pre_val, |a, b| a - b);
    let frozen = QuantMode::Frozen { z_q: zq, offset };
    let fd = grad_check(
        |g, p| (quantize(p, &cb, 0.25, &frozen).map(|q| q.z_q * g.constant(w.clone())).unwrap()).sum() + quantize(p, &cb, 0.25, &frozen).unwrap().commit,
        &pre_val,
        1e-6,
    )
    .unwrap();
    outcome(
        nn_mismatch == 0 && ema_err <= 1e-3 && st_err == 0.0 && fd.passes(1e-5),
        format!(
            "nearest-neighbour mismatches {nn_mismatch}/1000; EMA fixed-point error {ema_err:.2e} (tol 1e-3); \
             straight-through gradient gap {st_err:.1e}; finite-difference rel err {:.2e}",
            fd.max_rel_err
        ),
    )
}

fn criterion_5() -> Outcome {
    let g = Graph::<f64>::new();
    let zero = gaussian_kl(g.constant(Tensor::zeros([1, 4])), g.constant(Tensor::zeros([1, 4]))).item();
    let mut r = rng(5);
    let mut worst_z = 0.0f64;
    for _ in 0..20 {
        let mu: f64 = r.sample::<f64, _>(StandardNormal);
        let lv: f64 = r.gen_range(-2.0..1.5);
        let closed = gaussian_kl_f64(&[mu], &[lv]);
        let sd = (0.5 * lv).exp();
        let n = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let e: f64 = r.sample(StandardNormal);
            let z = mu + sd * e;
            // log q(z) - log p(z)
            let v = -0.5 * e * e - 0.5 * lv + 0.5 * z * z;
            s += v;
            s2 += v * v;
        }
        let m = s / n as f64;
        let se = ((s2 / n as f64 - m * m) / n as f64).sqrt();
        worst_z = worst_z.max((m - closed).abs() / se);
    }
    outcome(
        zero == 0.0 && worst_z <= 3.0,
        format!("kl(0, 0) = {zero}; 20 draws, worst Monte Carlo deviation {worst_z:.2} sigma (tol 3)"),
    )
}

// ------------------------------------------------------- trained-model setup

struct Desk {
    train: Vec<Image>,
    test: Vec<Image>,
}

fn desk_data() -> Desk {
    let (images, _) = synth_shapes(&SynthSpec {
        canvas: 32,
        shapes: 8,
        colours: 8,
        count: 2000,
        seed: 17,
    })
    .unwrap();
    let (tr, te) = split_indices(images.len(), 0);
    Desk {
        train: tr.iter().map(|&i| images[i].clone()).collect(),
        test: te.iter().map(|&i| images[i].clone()).collect(),
    }
}

fn desk_config(variant: Variant, w_f: f64, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.model.widths = DESK_WIDTHS.to_vec();
    c.model.variant = variant;
    c.loss.w_f = w_f;
    c.train.steps = STAGE1_STEPS;
    c.prior.steps = PRIOR_STEPS;
    c.seed = seed;
    c
}

fn train_desk(desk: &Desk, variant: Variant, w_f: f64, seed: u64) -> Bundle {
    let t = Instant::now();
    let cfg = desk_config(variant, w_f, seed);
    let mut bundle = train_stage1(&desk.train, &cfg, seed, None).unwrap().bundle;
    if variant == Variant::DualVae {
        train_prior(&mut bundle, &desk.train, seed).unwrap();
    }
    eprintln!("trained {variant} w_F={w_f} seed={seed} in {:.0}s", t.elapsed().as_secs_f64());
    bundle
}

fn exemplar_kl(bundle: &Bundle, test: &[Image], seed: u64) -> f64 {
    let kls = conditioned_kl(
        &test[..EXEMPLARS],
        SAMPLES_PER_EXEMPLAR,
        KlMode::ExemplarToGenerated,
        &mut rng(seed ^ 0xE0),
        |ex, n, r| generate_conditional(bundle, ex, n, 1.0, r),
    )
    .unwrap();
    mean_stderr(&kls).0
}

/// KL of the model's own reconstructions: a floor on what any decoded output reaches.
fn reconstruction_kl(bundle: &Bundle, test: &[Image]) -> f64 {
    let ex = &test[..EXEMPLARS];
    let rec = reconstruct(&bundle.model, ex).unwrap();
    let kls: Vec<f64> = ex
        .iter()
        .zip(&rec)
        .map(|(x, y)| histogram_kl(&colour_histogram(x), &colour_histogram(y)))
        .collect();
    mean_stderr(&kls).0
}

fn criterion_6(desk: &Desk, reg: &[Bundle], unreg: &[Bundle]) -> Outcome {
    let (baseline, _) = pairwise_baseline_kl(&desk.test, BASELINE_PAIRS, KlMode::ExemplarToGenerated, &mut rng(6)).unwrap();
    let r: Vec<f64> = reg.iter().zip(SEEDS).map(|(b, s)| exemplar_kl(b, &desk.test, s)).collect();
    let u: Vec<f64> = unreg.iter().zip(SEEDS).map(|(b, s)| exemplar_kl(b, &desk.test, s)).collect();
    let (mr, mu) = (mean_stderr(&r).0, mean_stderr(&u).0);
    let rec = reconstruction_kl(&reg[0], &desk.test);
    let (a, b) = (mr <= 0.9 * mu, mr <= 0.9 * baseline);
    outcome(
        a && b,
        format!(
            "mean exemplar KL: w_F=2 {mr:.4} {r:.3?}, w_F=0 {mu:.4} {u:.3?}, pairwise baseline {baseline:.4}; \
             required <= 0.9x both: vs w_F=0 {a}, vs baseline {b}; reconstruction KL {rec:.4}"
        ),
    )
}

fn mean_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.numel() as f64
}

fn criterion_7(bundle: &Bundle, test: &[Image]) -> Outcome {
    let model = &bundle.model;
    let mut r = rng(7);
    let (mut structure, mut rgb, mut pairs) = (0.0, 0.0, 0);
    let grids = tokenize(model, &test[..50]).unwrap();
    for grid in grids {
        let z_c = Tensor::randn([8, model.cfg.colour_dim], 1.0, &mut r);
        let outs = decode_tokens(model, &vec![grid; 8], &z_c).unwrap();
        let maps = structure_maps(model, &outs).unwrap();
        for i in 0..8 {
            for j in i + 1..8 {
                structure += mean_abs_diff(&maps[i], &maps[j]);
                rgb += mean_abs_diff(&outs[i], &outs[j]);
                pairs += 1;
            }
        }
    }
    let (s, c) = (structure / pairs as f64, rgb / pairs as f64);
    outcome(
        s < 0.5 * c,
        format!("50 images x 8 colour codes: mean structure change {s:.4}, mean RGB change {c:.4} (need < half)"),
    )
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    let cfg = TrainConfig::default().prior;
    let vocab = 64;
    let mut r = rng(8);
    let prior = Prior::<f64>::new(&cfg, vocab, (4, 4), &mut r).unwrap();
    let seq: Vec<usize> = (0..16).map(|_| r.gen_range(0..vocab)).collect();
    let uniform = prior.nll(&[seq.clone()]).unwrap();
    let uniform_gap = (uniform - (vocab as f64).ln()).abs();

    let mut prior = prior.cast::<f32>();
    let mut adam = prior.optimizer();
    for _ in 0..2000 {
        prior.train_step(&mut adam, &[seq.clone()], &mut r).unwrap();
    }
    let memorised = prior.nll(&[seq.clone()]).unwrap();
    let greedy = prior.sample(4, 1e-6, &mut r).unwrap();
    let reproduced = greedy.iter().all(|g| g.tokens == seq);

    let logits = |s: &Vec<usize>| {
        let g = Graph::new();
        let cx = Ctx::new(&g, &prior.store, false);
        prior.logits(&cx, &[s.clone()], None).unwrap().value().as_ref().clone()
    };
    let base = logits(&seq);
    let mut causal = true;
    for t in 0..16 {
        let mut s = seq.clone();
        for (k, tok) in s.iter_mut().enumerate().skip(t) {
            *tok = (*tok + 1 + k) % vocab;
        }
        let l = logits(&s);
        causal &= base.data()[..(t + 1) * vocab] == l.data()[..(t + 1) * vocab];
    }
    outcome(
        uniform_gap <= 1e-12 && memorised <= 0.01 && reproduced && causal,
        format!(
            "uniform NLL gap {uniform_gap:.1e}; memorised NLL {memorised:.5} nats/token (tol 0.01); \
             greedy reproduces: {reproduced}; causality: {causal}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9(bundle: &Bundle, test: &[Image]) -> Outcome {
    let model = &bundle.model;
    let mut r = rng(9);
    let (baseline, _) = pairwise_baseline_kl(test, BASELINE_PAIRS, KlMode::ExemplarToGenerated, &mut rng(6)).unwrap();
    let mut kls = Vec::new();
    for i in 0..EXEMPLARS {
        let j = (i + 1 + r.gen_range(0..test.len() - 1)) % test.len();
        let out = colour_transfer(model, &test[i], &test[j]).unwrap();
        kls.push(histogram_kl(&colour_histogram(&test[j]), &colour_histogram(&out)));
    }
    let (transfer, _) = mean_stderr(&kls);
    let rec = reconstruction_kl(bundle, test);

    let mut endpoints = true;
    for i in 0..10 {
        let (src, l, rr) = (&test[i], &test[i + 10], &test[i + 20]);
        let seq = interpolate_colour(model, src, l, rr, 5).unwrap();
        endpoints &= seq[0] == colour_transfer(model, src, l).unwrap();
        endpoints &= seq[4] == colour_transfer(model, src, rr).unwrap();
    }

    let k = 4;
    let mut min_pair = f64::INFINITY;
    for img in &test[..10] {
        let outs = recolour(model, &desaturate(img), k, &mut r).unwrap();
        let h: Vec<_> = outs.iter().map(colour_histogram).collect();
        for a in 0..k {
            for b in 0..k {
                if a != b {
                    min_pair = min_pair.min(histogram_kl(&h[a], &h[b]));
                }
            }
        }
    }
    outcome(
        transfer < baseline && endpoints && min_pair > 0.0,
        format!(
            "transfer KL {transfer:.4} vs pairwise baseline {baseline:.4} (reconstruction KL {rec:.4}); \
             interpolation endpoints exact: {endpoints}; grayscale recolour min pairwise KL {min_pair:.4}"
        ),
    )
}

// --------------------------------------------------------------- criterion 10

fn criterion_10(desk: &Desk) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = desk_config(Variant::DualVae, 2.0, 0);
    cfg.train.steps = 20;
    cfg.train.checkpoint_every = 10;
    cfg.prior.steps = 5;
    let mut bundle = train_stage1(&desk.train[..64], &cfg, 10, Some(&dir.path().join("a"))).unwrap().bundle;
    train_prior(&mut bundle, &desk.train[..64], 10).unwrap();
    train_stage1(&desk.train[..64], &cfg, 10, Some(&dir.path().join("b"))).unwrap();
    let csv_a = std::fs::read(dir.path().join("a/loss.csv")).unwrap();
    let csv_b = std::fs::read(dir.path().join("b/loss.csv")).unwrap();
    let csv_same = csv_a == csv_b && csv_a.len() > 100;

    let path = dir.path().join("roundtrip.dvae");
    bundle.save(&path).unwrap();
    let loaded = Bundle::load(&path).unwrap();
    let before = reconstruct(&bundle.model, &desk.test[..8]).unwrap();
    let after = reconstruct(&loaded.model, &desk.test[..8]).unwrap();
    let gen_before = generate_conditional(&bundle, &desk.test[0], 4, 1.0, &mut rng(1)).unwrap();
    let gen_after = generate_conditional(&loaded, &desk.test[0], 4, 1.0, &mut rng(1)).unwrap();
    let bit_exact = before == after && gen_before == gen_after;

    let corpus = dir.path().join("corpus");
    std::fs::create_dir_all(corpus.join("nested")).unwrap();
    for (i, img) in desk.train[..100].iter().enumerate() {
        let sub = if i % 3 == 0 { corpus.join("nested") } else { corpus.clone() };
        save_png(&sub.join(format!("{i:03}.png")), img).unwrap();
    }
    let a = load_dataset(&corpus, 32, 5).unwrap();
    let b = load_dataset(&corpus, 32, 5).unwrap();
    let split_ok = a.train.len() == 95 && a.test.len() == 5 && a.test_paths == b.test_paths;
    outcome(
        csv_same && bit_exact && split_ok,
        format!(
            "loss CSV reruns identical: {csv_same}; save/load forward bit-exact: {bit_exact}; \
             100 images split {}/{} reproducibly: {split_ok}",
            a.train.len(),
            a.test.len()
        ),
    )
}

fn main() {
    let mut results: Vec<(u32, Outcome, f64)> = Vec::new();
    let mut run = |n: u32, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!("criterion {n}: {} ({secs:.1}s) {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o, secs));
    };
    run(1, &mut criterion_1);
    run(2, &mut criterion_2);
    run(3, &mut criterion_3);
    run(4, &mut criterion_4);
    run(5, &mut criterion_5);
    run(8, &mut criterion_8);

    let desk = desk_data();
    run(10, &mut || criterion_10(&desk));
    let t = Instant::now();
    let reg: Vec<Bundle> = SEEDS.iter().map(|&s| train_desk(&desk, Variant::DualVae, 2.0, s)).collect();
    let unreg: Vec<Bundle> = SEEDS.iter().map(|&s| train_desk(&desk, Variant::DualVae, 0.0, s)).collect();
    let training = t.elapsed().as_secs_f64();
    run(6, &mut || {
        let mut o = criterion_6(&desk, &reg, &unreg);
        o.detail += &format!("; training {training:.0}s");
        o
    });
    run(7, &mut || criterion_7(&reg[0], &desk.test));
    let redual = train_desk(&desk, Variant::ReDualVae, 2.0, 0);
    run(9, &mut || criterion_9(&redual, &desk.test));

    results.sort_by_key(|r| r.0);
    let failed: Vec<u32> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    println!("acceptance: {}/{} criteria pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failing criteria: {failed:?}");
        // Reported, not fatal, unless asked: the workspace suite should still run every target.
        if std::env::var_os("DUALVAE_ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
