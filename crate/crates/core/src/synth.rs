//! Deterministic synthetic object dataset in the 32×32 binary batch format.
//!
//! Ten classes pair five shape families with two color variants each, so
//! classes 2k and 2k+1 share a silhouette and differ only in tint. Every
//! image places one textured shape on a smooth noisy background and records
//! its tight bounding box, which makes the set usable both for classifier
//! smoke tests and for checking localization against known geometry.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data_io::LabeledDataset;
use crate::error::{Result, SalError};
use crate::sal_step3::BBox;
use crate::tensor::ImageTensor;
use crate::util::seeded_rng;

pub const SYNTH_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disk,
    Square,
    Cross,
    Ring,
    Triangle,
}

const SHAPES: [Shape; 5] = [Shape::Disk, Shape::Square, Shape::Cross, Shape::Ring, Shape::Triangle];

const SHAPE_NAMES: [&str; 5] = ["disk", "square", "cross", "ring", "triangle"];

/// Base object color per shape family; the odd class of each pair shifts
/// this tint slightly, which is what makes the pair confusable.
const BASE_COLORS: [[f32; 3]; 5] = [
    [210.0, 60.0, 50.0],
    [60.0, 200.0, 70.0],
    [70.0, 90.0, 220.0],
    [220.0, 200.0, 60.0],
    [190.0, 70.0, 200.0],
];

const VARIANT_SHIFT: [f32; 3] = [-35.0, 30.0, 10.0];

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub per_class: usize,
    pub seed: u64,
    /// Uniform noise amplitude added to every pixel.
    pub noise: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { per_class: 50, seed: 0, noise: 12.0 }
    }
}

/// A generated labeled set plus the tight box of each image's object.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub data: LabeledDataset,
    pub boxes: Vec<BBox>,
}

fn class_name(k: usize) -> String {
    format!("{}_{}", SHAPE_NAMES[k / 2], if k % 2 == 0 { "a" } else { "b" })
}

fn inside(shape: Shape, dr: f32, dc: f32, half: f32) -> bool {
    match shape {
        Shape::Disk => dr * dr + dc * dc <= half * half,
        Shape::Square => dr.abs() <= half && dc.abs() <= half,
        Shape::Cross => {
            (dr.abs() <= half / 3.0 && dc.abs() <= half)
                || (dc.abs() <= half / 3.0 && dr.abs() <= half)
        }
        Shape::Ring => {
            let d2 = dr * dr + dc * dc;
            d2 <= half * half && d2 >= (half - 2.5) * (half - 2.5)
        }
        Shape::Triangle => {
            // apex up: row dr ∈ [-half, half], width grows linearly
            dr >= -half && dr <= half && dc.abs() <= (dr + half) * 0.5
        }
    }
}

fn quantize(v: f32) -> f32 {
    v.clamp(0.0, 255.0).round()
}

fn render(class: usize, rng: &mut ChaCha8Rng, noise: f32) -> (ImageTensor, BBox) {
    let s = SYNTH_SIZE;
    let shape = SHAPES[class / 2];
    let mut color = BASE_COLORS[class / 2];
    if class % 2 == 1 {
        for (c, d) in color.iter_mut().zip(VARIANT_SHIFT) {
            *c += d;
        }
    }

    // background: vertical gradient between two dark tones
    let top: [f32; 3] = std::array::from_fn(|_| rng.random_range(10.0..70.0));
    let bottom: [f32; 3] = std::array::from_fn(|_| rng.random_range(10.0..70.0));
    let mut img = ImageTensor::zeros(s, s, 3);
    for r in 0..s {
        let t = r as f32 / (s - 1) as f32;
        for c in 0..s {
            for ch in 0..3 {
                let v = top[ch] * (1.0 - t) + bottom[ch] * t;
                img.set(r, c, ch, v);
            }
        }
    }

    // object: one shape, jittered texture, anywhere that fits in the frame
    let size = rng.random_range(11..=19usize);
    let half = size as f32 / 2.0;
    let lo = 2 + size / 2;
    let hi = s - 2 - (size - size / 2);
    let cy = rng.random_range(lo..=hi) as f32 - 0.5;
    let cx = rng.random_range(lo..=hi) as f32 - 0.5;
    let (mut r0, mut c0, mut r1, mut c1) = (s, s, 0usize, 0usize);
    for r in 0..s {
        for c in 0..s {
            if inside(shape, r as f32 - cy, c as f32 - cx, half) {
                let px = img.pixel_mut(r, c);
                for ch in 0..3 {
                    px[ch] = color[ch] + rng.random_range(-18.0..18.0);
                }
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r);
                c1 = c1.max(c);
            }
        }
    }
    debug_assert!(r0 <= r1, "shape painted no pixels");

    for v in img.data_mut() {
        *v = quantize(*v + rng.random_range(-noise..=noise));
    }
    (img, BBox { r0, c0, r1, c1 })
}

/// Generates `per_class` images for each of the ten classes, grouped by
/// class in label order. Image `j` of class `k` depends only on the seed
/// and `(k, j)`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.per_class == 0 {
        return Err(SalError::InvalidConfig("per_class must be positive".into()));
    }
    let mut images = Vec::with_capacity(10 * cfg.per_class);
    let mut labels = Vec::with_capacity(10 * cfg.per_class);
    let mut boxes = Vec::with_capacity(10 * cfg.per_class);
    for k in 0..10usize {
        for j in 0..cfg.per_class {
            let mut rng = seeded_rng(cfg.seed, &format!("synth/c{k}/i{j}"));
            let (img, bb) = render(k, &mut rng, cfg.noise);
            images.push(img);
            labels.push(k);
            boxes.push(bb);
        }
    }
    let names = (0..10).map(class_name).collect();
    Ok(SynthDataset { data: LabeledDataset::new(images, labels, names)?, boxes })
}

fn encode_records(ds: &LabeledDataset, from: usize, to: usize) -> Vec<u8> {
    const PLANE: usize = SYNTH_SIZE * SYNTH_SIZE;
    let mut out = Vec::with_capacity((to - from) * (1 + 3 * PLANE));
    for i in from..to {
        out.push(ds.labels[i] as u8);
        let img = &ds.images[i];
        for ch in 0..3 {
            for r in 0..SYNTH_SIZE {
                for c in 0..SYNTH_SIZE {
                    out.push(img.get(r, c, ch).clamp(0.0, 255.0).round() as u8);
                }
            }
        }
    }
    out
}

/// Writes a train and a test set as standard binary batches (five train
/// files plus one test file) under `dir`.
pub fn write_cifar_batches(
    train: &LabeledDataset,
    test: &LabeledDataset,
    dir: &Path,
) -> Result<()> {
    if train.len() < 5 {
        return Err(SalError::InvalidInput(format!(
            "need at least 5 training images to fill 5 batch files, got {}",
            train.len()
        )));
    }
    if test.is_empty() {
        return Err(SalError::InvalidInput("empty test set".into()));
    }
    fs::create_dir_all(dir)?;
    let n = train.len();
    let per = n.div_ceil(5);
    for b in 0..5usize {
        let from = (b * per).min(n);
        let to = ((b + 1) * per).min(n);
        let bytes = encode_records(train, from, to);
        let mut f = fs::File::create(dir.join(format!("data_batch_{}.bin", b + 1)))?;
        f.write_all(&bytes)?;
    }
    let mut f = fs::File::create(dir.join("test_batch.bin"))?;
    f.write_all(&encode_records(test, 0, test.len()))?;
    Ok(())
}
