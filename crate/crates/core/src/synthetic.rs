//! Synthetic data for tests and smoke runs.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::tensor::Tensor32;
use crate::trainer::LabelledSet;

/// Class directory names written by [`write_image_dataset`].
pub const CLASS_NAMES: [&str; 2] = ["kudu", "nyala"];

/// `n` linearly separable feature vectors of length `dim` (alternating
/// labels). The first coordinate has magnitude in `[1, 2)` and carries the
/// class sign; the others are uniform noise in `[-1, 1)`.
pub fn separable_features(n: usize, dim: usize, seed: u64) -> LabelledSet {
    assert!(dim > 0, "feature dimension must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let sign = if label == 0 { 1.0 } else { -1.0 };
        let data: Vec<f32> = (0..dim)
            .map(|d| {
                if d == 0 {
                    sign * rng.gen_range(1.0..2.0)
                } else {
                    rng.gen_range(-1.0..1.0)
                }
            })
            .collect();
        inputs.push(Tensor32::new(vec![dim], data).expect("length matches"));
        labels.push(label);
    }
    LabelledSet::new(inputs, labels).expect("lengths match")
}

/// A `size×size` image of class 0 (horizontal stripes, warm) or class 1
/// (vertical stripes, cool) with pixel noise.
pub fn class_image(label: usize, size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let period = rng.gen_range(3..7);
    let phase = rng.gen_range(0..period);
    let noise: Vec<f32> = (0..size * size).map(|_| rng.gen_range(-20.0..20.0)).collect();
    Image::from_fn(size, size, |x, y| {
        let t = if label == 0 { y } else { x };
        let on = ((t + phase) / period) % 2 == 0;
        let base = if on { 190.0 } else { 60.0 };
        let n = noise[y * size + x];
        let px = if label == 0 {
            [base + n, base * 0.7 + n, base * 0.4]
        } else {
            [base * 0.4, base * 0.7 + n, base + n]
        };
        px.map(|v| v.clamp(0.0, 255.0))
    })
    .expect("positive size")
}

/// Writes `per_class` PNG images per class under `root/<class>/`.
pub fn write_image_dataset(root: impl AsRef<Path>, per_class: usize, size: usize, seed: u64) -> Result<()> {
    let root = root.as_ref();
    for (label, class) in CLASS_NAMES.iter().enumerate() {
        let dir = root.join(class);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..per_class {
            let img = class_image(label, size, crate::seed::derive(seed, &[label as u64, i as u64]));
            let path = dir.join(format!("{class}_{i:03}.png"));
            img.to_rgb8()
                .save(&path)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        }
    }
    Ok(())
}
