use dualvae::checkpoint::{Bundle, Checkpoint};
use dualvae::config::{TrainConfig, Variant};
use dualvae::data::{desaturate, synth_shapes, Image, SynthSpec};
use dualvae::pipeline::{
    colour_transfer, generate_conditional, generate_unconditional, interpolate_colour, recolour, reconstruct,
    structure_maps, train_prior, train_stage1, RunDir,
};
use dualvae_autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(variant: Variant) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.model.image_size = 16;
    c.model.downsample = 4;
    c.model.widths = vec![4, 6, 8];
    c.model.geometry_channels = 3;
    c.model.embed_dim = 3;
    c.model.n_embed = 6;
    c.model.colour_dim = 3;
    c.model.variant = variant;
    c.optim.batch_size = 4;
    c.train.steps = 6;
    c.train.checkpoint_every = 2;
    c.train.keep_checkpoints = 2;
    c.prior.blocks = 1;
    c.prior.channels = 8;
    c.prior.heads = 2;
    c.prior.steps = 5;
    c.prior.batch_size = 4;
    c
}

fn images(n: usize) -> Vec<Image> {
    synth_shapes(&SynthSpec {
        canvas: 16,
        shapes: 4,
        colours: 4,
        count: n,
        seed: 2,
    })
    .unwrap()
    .0
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn in_unit_range(imgs: &[Image]) -> bool {
    imgs.iter().all(|i| i.shape() == [3, 16, 16] && i.data().iter().all(|v| (0.0..=1.0).contains(v)))
}

#[test]
fn run_directory_keeps_the_last_checkpoints_and_logs_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Variant::DualVae);
    let run = train_stage1(&images(8), &cfg, 1, Some(dir.path())).unwrap();
    assert_eq!(run.bundle.step, 6);
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,recon_F,recon_z,vq,kl,total");
    assert_eq!(lines.len(), 7);
    assert!(!RunDir::checkpoint_path(dir.path(), 2).exists());
    for step in [4, 6] {
        assert!(RunDir::checkpoint_path(dir.path(), step).exists());
    }
    let loaded = Bundle::load(&RunDir::checkpoint_path(dir.path(), 6)).unwrap();
    assert_eq!(loaded.step, 6);
    assert_eq!(loaded.config, cfg);
}

#[test]
fn same_seed_same_run() {
    let cfg = tiny(Variant::ReDualVae);
    let a = train_stage1(&images(8), &cfg, 3, None).unwrap();
    let b = train_stage1(&images(8), &cfg, 3, None).unwrap();
    assert_eq!(a.history, b.history);
    let c = train_stage1(&images(8), &cfg, 4, None).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn non_finite_loss_aborts_and_keeps_the_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Variant::DualVae);
    cfg.optim.batch_size = 1;
    cfg.train.steps = 200;
    cfg.train.checkpoint_every = 1;
    cfg.train.keep_checkpoints = 1;
    let mut imgs = images(8);
    imgs[3] = Tensor::full(vec![3, 16, 16], f32::NAN);
    let err = train_stage1(&imgs, &cfg, 5, Some(dir.path())).err().unwrap();
    assert_eq!(err.kind(), "non_finite_loss");
    let kept: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "dvae"))
        .collect();
    assert_eq!(kept.len(), 1, "{kept:?}");
    let bundle = Bundle::load(&kept[0]).unwrap();
    assert!(bundle.step >= 1);
    assert!(bundle.model.store.all_finite());
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count() as u64, bundle.step + 1);
}

#[test]
fn bundle_with_prior_survives_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = images(8);
    let mut bundle = train_stage1(&imgs, &tiny(Variant::DualVae), 6, None).unwrap().bundle;
    let losses = train_prior(&mut bundle, &imgs, 6).unwrap();
    assert_eq!(losses.len(), 5);
    let path = dir.path().join("m.dvae");
    bundle.save(&path).unwrap();
    let loaded = Bundle::load(&path).unwrap();

    let a = reconstruct(&bundle.model, &imgs[..3]).unwrap();
    let b = reconstruct(&loaded.model, &imgs[..3]).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.data() == y.data()));
    let a = generate_unconditional(&bundle, 3, 1.0, &mut rng(1)).unwrap();
    let b = generate_unconditional(&loaded, 3, 1.0, &mut rng(1)).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.data() == y.data()));
    assert!(in_unit_range(&a));
}

#[test]
fn missing_and_unknown_tensors_are_checkpoint_errors() {
    let bundle = Bundle::new(tiny(Variant::DualVae), 0).unwrap();
    let mut ckpt = bundle.to_checkpoint();
    ckpt.tensors.pop();
    assert_eq!(Bundle::from_checkpoint(&ckpt).err().unwrap().kind(), "checkpoint");

    let mut ckpt = bundle.to_checkpoint();
    ckpt.tensors.push(("model/extra".into(), Tensor::full(vec![1], 0.0)));
    assert_eq!(Bundle::from_checkpoint(&ckpt).err().unwrap().kind(), "checkpoint");

    let bytes = bundle.to_checkpoint().encode();
    let back = Checkpoint::decode(&bytes).unwrap();
    assert!(Bundle::from_checkpoint(&back).is_ok());
    assert!(generate_unconditional(&bundle, 1, 1.0, &mut rng(0)).is_err());
}

#[test]
fn colour_editing_operations() {
    let imgs = images(6);
    let bundle = train_stage1(&imgs, &tiny(Variant::ReDualVae), 7, None).unwrap().bundle;
    let m = &bundle.model;

    let path = interpolate_colour(m, &imgs[0], &imgs[1], &imgs[2], 5).unwrap();
    assert_eq!(path.len(), 5);
    assert_eq!(path[0].data(), colour_transfer(m, &imgs[0], &imgs[1]).unwrap().data());
    assert_eq!(path[4].data(), colour_transfer(m, &imgs[0], &imgs[2]).unwrap().data());
    assert!(interpolate_colour(m, &imgs[0], &imgs[1], &imgs[2], 1).is_err());

    let gray = desaturate(&imgs[3]);
    let variants = recolour(m, &gray, 4, &mut rng(8)).unwrap();
    assert_eq!(variants.len(), 4);
    assert!(in_unit_range(&variants));
    for i in 0..4 {
        for j in i + 1..4 {
            assert_ne!(variants[i].data(), variants[j].data());
        }
    }
    assert!(recolour(m, &gray, 0, &mut rng(8)).unwrap().is_empty());
}

#[test]
fn conditional_generation_needs_a_prior_and_returns_n_images() {
    let imgs = images(8);
    let mut bundle = train_stage1(&imgs, &tiny(Variant::DualVae), 9, None).unwrap().bundle;
    assert!(generate_conditional(&bundle, &imgs[0], 2, 1.0, &mut rng(0)).is_err());
    train_prior(&mut bundle, &imgs, 9).unwrap();
    let out = generate_conditional(&bundle, &imgs[0], 3, 1.0, &mut rng(0)).unwrap();
    assert_eq!(out.len(), 3);
    assert!(in_unit_range(&out));
}

#[test]
fn passthrough_geometry_maps_a_constant_image_to_a_constant() {
    let mut bundle = Bundle::new(tiny(Variant::DualVae), 1).unwrap();
    bundle.model.geometry.set_passthrough(&mut bundle.model.store);
    let flat: Image = Tensor::from_fn(vec![3, 16, 16], |i| [0.2, 0.5, 0.8][i / 256]);
    let map = &structure_maps(&bundle.model, &[flat]).unwrap()[0];
    let first = map.data()[0];
    assert!(map.data().iter().all(|v| (v - first).abs() < 1e-6));
}
