use dualvae::config::PriorConfig;
use dualvae::layers::Ctx;
use dualvae::Prior;
use dualvae_autodiff::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 5;

fn prior(dropout: f64, seed: u64) -> Prior<f64> {
    let cfg = PriorConfig {
        blocks: 2,
        channels: 16,
        heads: 4,
        dropout,
        lr: 3e-3,
        ..PriorConfig::default()
    };
    Prior::new(&cfg, VOCAB, (2, 2), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Random weights everywhere, so every logit depends on its inputs.
fn scrambled(seed: u64) -> Prior<f64> {
    let mut p = prior(0.0, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let ids: Vec<_> = p.store.ids().collect();
    for id in ids {
        let t = p.store.get_mut(id);
        let noise = Tensor::<f64>::uniform(t.shape().to_vec(), -0.3, 0.3, &mut rng);
        *t = t.zip_map(&noise, |a, b| a + b);
    }
    p
}

fn logits(p: &Prior<f64>, seq: &[usize]) -> Vec<f64> {
    let g = Graph::new();
    let cx = Ctx::new(&g, &p.store, false);
    p.logits(&cx, &[seq.to_vec()], None).unwrap().value().data().to_vec()
}

#[test]
fn logits_never_see_the_current_or_later_tokens() {
    let p = scrambled(1);
    let base = [1, 2, 3, 4];
    let ref_logits = logits(&p, &base);
    for j in 0..4 {
        let mut changed = base;
        changed[j] = (changed[j] + 1) % VOCAB;
        let l = logits(&p, &changed);
        // Position i predicts token i from tokens before i.
        assert_eq!(&l[..(j + 1) * VOCAB], &ref_logits[..(j + 1) * VOCAB], "changed {j}");
        if j < 3 {
            assert_ne!(&l[(j + 1) * VOCAB..], &ref_logits[(j + 1) * VOCAB..]);
        }
    }
}

#[test]
fn batching_does_not_mix_sequences() {
    let p = scrambled(2);
    let (a, b) = (vec![0, 1, 2, 3], vec![4, 4, 0, 1]);
    let g = Graph::new();
    let cx = Ctx::new(&g, &p.store, false);
    let both = p.logits(&cx, &[a.clone(), b.clone()], None).unwrap().value();
    let n = 4 * VOCAB;
    assert_eq!(&both.data()[..n], logits(&p, &a).as_slice());
    assert_eq!(&both.data()[n..], logits(&p, &b).as_slice());
}

#[test]
fn first_position_learns_the_unigram_and_samples_match_it() {
    let mut p = prior(0.0, 3);
    let mut adam = p.optimizer();
    let target = [0.5, 0.3, 0.2, 0.0, 0.0];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let draw = |rng: &mut ChaCha8Rng| {
        let u: f64 = rng.gen();
        if u < 0.5 {
            0
        } else if u < 0.8 {
            1
        } else {
            2
        }
    };
    for _ in 0..400 {
        let batch: Vec<Vec<usize>> = (0..32).map(|_| vec![draw(&mut rng), 3, 3, 3]).collect();
        p.train_step(&mut adam, &batch, &mut rng).unwrap();
    }
    let row = &logits(&p, &[0, 0, 0, 0])[..VOCAB];
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    let model: Vec<f64> = row.iter().map(|v| (v - m).exp() / z).collect();
    for k in 0..VOCAB {
        assert!((model[k] - target[k]).abs() < 0.05, "model {model:?}");
    }

    let n = 10_000;
    let grids = p.sample(n, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    for k in 0..VOCAB {
        let freq = grids.iter().filter(|g| g.tokens[0] == k).count() as f64 / n as f64;
        let sigma = (model[k] * (1.0 - model[k]) / n as f64).sqrt().max(1e-4);
        assert!((freq - model[k]).abs() <= 3.0 * sigma, "token {k}: {freq} vs {}", model[k]);
    }
}

#[test]
fn sampling_is_reproducible_and_checks_temperature() {
    let p = prior(0.1, 6);
    let a = p.sample(8, 1.0, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let b = p.sample(8, 1.0, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|g| g.h == 2 && g.w == 2 && g.tokens.iter().all(|&t| t < VOCAB)));
    for t in [0.0, -1.0, f64::NAN, f64::INFINITY] {
        assert_eq!(p.sample(1, t, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err().kind(), "contract");
    }
}

#[test]
fn malformed_batches_are_rejected() {
    let p = prior(0.0, 8);
    assert!(p.nll(&[]).is_err());
    assert!(p.nll(&[vec![0, 1, 2]]).is_err());
    assert_eq!(p.nll(&[vec![0, 1, 2, VOCAB]]).unwrap_err().kind(), "contract");
}
