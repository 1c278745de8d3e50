//! Image ingestion, the synthetic shapes set, and PNG output.
//!
//! Images are `[3, H, W]` tensors with values in `[0, 1]`.

use std::path::{Path, PathBuf};

use dualvae_autodiff::Tensor;
use image::{imageops::FilterType, ImageBuffer, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub type Image = Tensor<f32>;

/// Shape vocabulary of the synthetic set.
pub const SHAPE_NAMES: [&str; 8] = ["square", "circle", "triangle", "ring", "diamond", "cross", "bar", "frame"];
pub const SHAPE_KINDS: usize = SHAPE_NAMES.len();

/// Foreground palette.
pub const PALETTE: [[u8; 3]; 8] = [
    [220, 40, 40],
    [40, 180, 60],
    [40, 80, 220],
    [235, 200, 40],
    [200, 50, 200],
    [40, 200, 210],
    [240, 130, 30],
    [130, 90, 50],
];

/// Background colours.
pub const BACKGROUNDS: [[u8; 3]; 2] = [[24, 24, 24], [200, 200, 200]];

/// Labels of one synthetic image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShapeLabel {
    pub shape: usize,
    pub colour: usize,
    pub background: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub canvas: usize,
    pub shapes: usize,
    pub colours: usize,
    pub count: usize,
    pub seed: u64,
}

/// Whether pixel `(x, y)` (centre-sampled) lies in a shape of `kind` with
/// centre `(cx, cy)` and half-size `r`.
fn inside(kind: usize, x: f32, y: f32, cx: f32, cy: f32, r: f32) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    let (ax, ay) = (dx.abs(), dy.abs());
    let t = (r * 0.35).max(1.5);
    match kind {
        0 => ax <= r && ay <= r,
        1 => dx * dx + dy * dy <= r * r,
        // Upward triangle with its base on the bottom edge.
        2 => dy <= r && dy >= -r && ax <= (dy + r) * 0.5,
        3 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (r - t) * (r - t)
        }
        4 => ax + ay <= r,
        5 => (ax <= t * 0.6 && ay <= r) || (ay <= t * 0.6 && ax <= r),
        6 => ax <= r && ay <= r * 0.4,
        _ => ax <= r && ay <= r && (ax >= r - t || ay >= r - t),
    }
}

/// Renders one image with the given labels and geometry; no anti-aliasing.
pub fn render_shape(canvas: usize, label: ShapeLabel, cx: f32, cy: f32, r: f32) -> (Image, Vec<bool>) {
    let fg = PALETTE[label.colour];
    let bg = BACKGROUNDS[label.background];
    let plane = canvas * canvas;
    let mut data = vec![0f32; 3 * plane];
    let mut mask = vec![false; plane];
    for y in 0..canvas {
        for x in 0..canvas {
            let i = y * canvas + x;
            mask[i] = inside(label.shape, x as f32 + 0.5, y as f32 + 0.5, cx, cy, r);
            let c = if mask[i] { fg } else { bg };
            for ch in 0..3 {
                data[ch * plane + i] = c[ch] as f32 / 255.0;
            }
        }
    }
    (Tensor::new([3, canvas, canvas], data), mask)
}

/// Shapes and palette colours drawn independently.
pub fn synth_shapes(spec: &SynthSpec) -> Result<(Vec<Image>, Vec<ShapeLabel>)> {
    if spec.shapes == 0 || spec.shapes > SHAPE_KINDS || spec.colours == 0 || spec.colours > PALETTE.len() {
        return Err(Error::InvalidConfig("synthetic spec out of range".into()));
    }
    if spec.canvas < 8 {
        return Err(Error::InvalidConfig("synthetic canvas must be at least 8 pixels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.canvas as f32;
    let mut images = Vec::with_capacity(spec.count);
    let mut labels = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let label = ShapeLabel {
            shape: rng.gen_range(0..spec.shapes),
            colour: rng.gen_range(0..spec.colours),
            background: rng.gen_range(0..BACKGROUNDS.len()),
        };
        let r = rng.gen_range(0.2 * c..0.33 * c);
        let cx = rng.gen_range(r + 1.0..c - r - 1.0);
        let cy = rng.gen_range(r + 1.0..c - r - 1.0);
        images.push(render_shape(spec.canvas, label, cx, cy, r).0);
        labels.push(label);
    }
    Ok((images, labels))
}

/// A loaded image folder.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Image>,
    pub test: Vec<Image>,
    pub train_paths: Vec<PathBuf>,
    pub test_paths: Vec<PathBuf>,
    /// Files that could not be decoded.
    pub skipped: usize,
}

/// Number of held-out items for a corpus of `n`.
pub fn test_count(n: usize) -> usize {
    (0.05 * n as f64).round() as usize
}

/// Seeded shuffle then a 95/5 split: returns `(train, test)` index lists.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let t = test_count(n);
    let test = idx[..t].to_vec();
    let train = idx[t..].to_vec();
    (train, test)
}

/// Converts any decoded image to 8-bit RGB and resizes it bilinearly.
pub fn to_model_image(img: &image::DynamicImage, size: usize) -> Image {
    let rgb = img.to_rgb8();
    let rgb = if rgb.width() as usize == size && rgb.height() as usize == size {
        rgb
    } else {
        image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle)
    };
    from_rgb8(&rgb)
}

pub fn from_rgb8(rgb: &RgbImage) -> Image {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for (x, y, p) in rgb.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for ch in 0..3 {
            data[ch * plane + i] = p.0[ch] as f32 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

pub fn to_rgb8(img: &Image) -> RgbImage {
    let s = img.shape();
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |ch: usize| (img.data()[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    })
}

/// Decodes a PNG file, or `None` with a warning when it cannot be read.
fn decode(path: &Path, size: usize) -> Option<Image> {
    match image::open(path) {
        Ok(img) => Some(to_model_image(&img, size)),
        Err(e) => {
            log::warn!("skipping {}: {e}", path.display());
            None
        }
    }
}

/// Reads one image file, resized to `size`.
pub fn load_image(path: &Path, size: usize) -> Result<Image> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(to_model_image(&img, size))
}

/// Recursively ingests PNG files under `dir`.
pub fn load_dataset(dir: &Path, image_size: usize, split_seed: u64) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
    }
    let mut paths: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    let decoded: Vec<Option<Image>> = paths.par_iter().map(|p| decode(p, image_size)).collect();
    let mut images = Vec::new();
    let mut kept = Vec::new();
    let mut skipped = 0;
    for (p, d) in paths.into_iter().zip(decoded) {
        match d {
            Some(img) => {
                images.push(img);
                kept.push(p);
            }
            None => skipped += 1,
        }
    }
    if images.is_empty() {
        return Err(Error::Dataset(format!(
            "no readable PNG images under {} ({skipped} skipped)",
            dir.display()
        )));
    }
    let (train_idx, test_idx) = split_indices(images.len(), split_seed);
    let pick = |idx: &[usize]| -> (Vec<Image>, Vec<PathBuf>) {
        idx.iter().map(|&i| (images[i].clone(), kept[i].clone())).unzip()
    };
    let (train, train_paths) = pick(&train_idx);
    let (test, test_paths) = pick(&test_idx);
    Ok(Dataset {
        train,
        test,
        train_paths,
        test_paths,
        skipped,
    })
}

pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    to_rgb8(img).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes rows of equally-sized images as one grid with 2-pixel gutters.
pub fn save_grid(path: &Path, rows: &[Vec<Image>]) -> Result<()> {
    let cell = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::Contract("empty image grid".into()))?
        .shape()
        .to_vec();
    let (h, w) = (cell[1], cell[2]);
    let gap = 2;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gw = cols * (w + gap) + gap;
    let gh = rows.len() * (h + gap) + gap;
    let mut canvas = RgbImage::from_pixel(gw as u32, gh as u32, Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let tile = to_rgb8(img);
            image::imageops::overlay(&mut canvas, &tile, (gap + c * (w + gap)) as i64, (gap + r * (h + gap)) as i64);
        }
    }
    canvas.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a single-channel `[1, H, W]` map as 8-bit grayscale, min-max
/// normalised.
pub fn save_gray(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let s = map.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let d = &map.data()[..h * w];
    let lo = d.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = d.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = (d[y as usize * w + x as usize] - lo) / span;
        Luma([(v * 255.0).round() as u8])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Replicates a `[1, H, W]` or `[H, W]` grayscale map into three channels.
pub fn gray_to_rgb(gray: &Tensor<f32>) -> Image {
    let s = gray.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let d = &gray.data()[..h * w];
    Tensor::new([3, h, w], [d, d, d].concat())
}

/// Luma-style grayscale version of an RGB image, replicated to three channels.
pub fn desaturate(img: &Image) -> Image {
    let s = img.shape();
    let plane = s[1] * s[2];
    let d = img.data();
    let g: Vec<f32> = (0..plane)
        .map(|i| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i])
        .collect();
    Tensor::new([3, s[1], s[2]], [g.as_slice(), &g, &g].concat())
}

/// Stacks `[3, H, W]` images into a `[N, 3, H, W]` batch.
pub fn batch(images: &[&Image]) -> Tensor<f32> {
    let s = images[0].shape();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        assert_eq!(img.shape(), s, "batch: mixed image sizes");
        data.extend_from_slice(img.data());
    }
    Tensor::new([images.len(), s[0], s[1], s[2]], data)
}

/// Splits a `[N, 3, H, W]` batch back into images.
pub fn unbatch(t: &Tensor<f32>) -> Vec<Image> {
    let (n, c, h, w) = t.dims4();
    (0..n)
        .map(|i| Tensor::new([c, h, w], t.data()[i * c * h * w..(i + 1) * c * h * w].to_vec()))
        .collect()
}
