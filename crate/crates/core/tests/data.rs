use std::fs;

use dualvae::data::{
    load_dataset, load_image, split_indices, synth_shapes, test_count, SynthSpec, BACKGROUNDS, PALETTE,
};
use image::{ImageBuffer, Luma, Rgb};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn spec(count: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        canvas: 32,
        shapes: 8,
        colours: 8,
        count,
        seed,
    }
}

#[test]
fn synthetic_set_is_reproducible() {
    let (a, la) = synth_shapes(&spec(20, 3)).unwrap();
    let (b, lb) = synth_shapes(&spec(20, 3)).unwrap();
    assert_eq!(la, lb);
    assert!(a.iter().zip(&b).all(|(x, y)| x.data() == y.data()));
    let (_, lc) = synth_shapes(&spec(20, 4)).unwrap();
    assert_ne!(la, lc);
}

#[test]
fn shape_and_colour_labels_are_independent() {
    let (_, labels) = synth_shapes(&spec(4000, 11)).unwrap();
    let mut table = [[0.0f64; 8]; 8];
    for l in &labels {
        table[l.shape][l.colour] += 1.0;
    }
    let n = labels.len() as f64;
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..8).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let mut stat = 0.0;
    for i in 0..8 {
        for j in 0..8 {
            let e = rows[i] * cols[j] / n;
            stat += (table[i][j] - e).powi(2) / e;
        }
    }
    let p = 1.0 - ChiSquared::new(49.0).unwrap().cdf(stat);
    assert!(p > 1e-3, "chi-square {stat:.1}, p = {p:.2e}");
}

#[test]
fn every_pixel_is_background_or_palette() {
    let (images, labels) = synth_shapes(&spec(30, 5)).unwrap();
    for (img, l) in images.iter().zip(&labels) {
        let plane = 32 * 32;
        for i in 0..plane {
            let px: Vec<u8> = (0..3).map(|c| (img.data()[c * plane + i] * 255.0).round() as u8).collect();
            assert!(px == PALETTE[l.colour] || px == BACKGROUNDS[l.background], "stray pixel {px:?}");
        }
    }
}

#[test]
fn split_sizes_and_disjointness() {
    for n in [1, 19, 20, 100, 2000] {
        let (train, test) = split_indices(n, 9);
        assert_eq!(test.len(), test_count(n));
        assert_eq!(train.len() + test.len(), n);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
    assert_eq!(test_count(100), 5);
    assert_eq!(split_indices(50, 1), split_indices(50, 1));
}

#[test]
fn grayscale_and_sixteen_bit_files_become_rgb() {
    let dir = tempfile::tempdir().unwrap();
    let gray = dir.path().join("gray.png");
    ImageBuffer::from_fn(8, 8, |x, _| Luma([(x * 30) as u8])).save(&gray).unwrap();
    let deep = dir.path().join("deep.png");
    ImageBuffer::from_fn(8, 8, |_, _| Rgb([65535u16, 0, 32896])).save(&deep).unwrap();

    let g = load_image(&gray, 8).unwrap();
    assert_eq!(g.shape(), [3, 8, 8]);
    let d = g.data();
    for i in 0..64 {
        assert_eq!(d[i], d[64 + i]);
        assert_eq!(d[i], d[128 + i]);
    }
    assert!((d[7] - 210.0 / 255.0).abs() < 1e-6);

    let c = load_image(&deep, 8).unwrap();
    assert_eq!(c.data()[0], 1.0);
    assert_eq!(c.data()[64], 0.0);
    assert!((c.data()[128] - 128.0 / 255.0).abs() < 1e-6);

    let resized = load_image(&gray, 4).unwrap();
    assert_eq!(resized.shape(), [3, 4, 4]);
}

#[test]
fn folder_ingestion_recurses_and_skips_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let nested = dir.path().join("a/b");
    fs::create_dir_all(&nested).unwrap();
    for i in 0..40u8 {
        let target = if i % 2 == 0 { dir.path().to_path_buf() } else { nested.clone() };
        ImageBuffer::from_fn(6, 6, |_, _| Rgb([i, 0, 0]))
            .save(target.join(format!("{i}.png")))
            .unwrap();
    }
    fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
    fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();

    let ds = load_dataset(dir.path(), 8, 0).unwrap();
    assert_eq!(ds.skipped, 1);
    assert_eq!(ds.test.len(), 2);
    assert_eq!(ds.train.len(), 38);
    assert!(ds.train.iter().all(|im| im.shape() == [3, 8, 8]));
    let again = load_dataset(dir.path(), 8, 0).unwrap();
    assert_eq!(ds.test_paths, again.test_paths);
}

#[test]
fn empty_folder_is_a_dataset_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_dataset(dir.path(), 8, 0).unwrap_err();
    assert_eq!(err.kind(), "dataset");
    let err = load_dataset(&dir.path().join("missing"), 8, 0).unwrap_err();
    assert_eq!(err.kind(), "dataset");
}
