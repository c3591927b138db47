use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};

/// How the per-image augmentation seed evolves across epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "variants")]
pub enum SeedPolicy {
    /// One augmented variant per image for the whole run (cache friendly).
    Fixed,
    /// Fresh draw every epoch.
    PerEpoch,
    /// Cycle through this many variants per image.
    Cycle(u32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Rotation drawn uniformly from `±rotation_degrees`.
    pub rotation_degrees: f64,
    /// Multiplicative brightness factor range `[lo, hi]`.
    pub brightness: (f64, f64),
    /// Horizontal shift drawn from `±width_shift·width` pixels.
    pub width_shift: f64,
    pub height_shift: f64,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub seed_policy: SeedPolicy,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_degrees: 20.0,
            brightness: (0.8, 1.2),
            width_shift: 0.1,
            height_shift: 0.1,
            horizontal_flip: true,
            vertical_flip: true,
            seed_policy: SeedPolicy::Fixed,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            rotation_degrees: 0.0,
            brightness: (1.0, 1.0),
            width_shift: 0.0,
            height_shift: 0.0,
            horizontal_flip: false,
            vertical_flip: false,
            seed_policy: SeedPolicy::Fixed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.brightness;
        if !(0.0..1.0).contains(&self.width_shift) || !(0.0..1.0).contains(&self.height_shift) {
            return Err(Error::Validation("shift fractions must lie in [0, 1)".into()));
        }
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Validation(format!("brightness range ({lo}, {hi}) must be positive and ordered")));
        }
        if !(self.rotation_degrees >= 0.0 && self.rotation_degrees.is_finite()) {
            return Err(Error::Validation("rotation range must be a non-negative number of degrees".into()));
        }
        if self.seed_policy == SeedPolicy::Cycle(0) {
            return Err(Error::Validation("cycle policy needs at least one variant".into()));
        }
        Ok(())
    }

    /// Variant index used at `epoch` under the seed policy.
    pub fn variant(&self, epoch: usize) -> u64 {
        match self.seed_policy {
            SeedPolicy::Fixed => 0,
            SeedPolicy::PerEpoch => epoch as u64,
            SeedPolicy::Cycle(n) => epoch as u64 % n as u64,
        }
    }
}

/// The concrete transform drawn for one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub angle_degrees: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub flip_h: bool,
    pub flip_v: bool,
    pub brightness: f64,
}

impl AugmentDraw {
    /// Always consumes the same six uniforms so streams stay aligned whatever
    /// the configuration.
    pub fn sample(cfg: &AugmentConfig, width: usize, height: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: [f64; 6] = std::array::from_fn(|_| rng.gen::<f64>());
        let (lo, hi) = cfg.brightness;
        AugmentDraw {
            angle_degrees: (2.0 * u[0] - 1.0) * cfg.rotation_degrees,
            shift_x: (2.0 * u[1] - 1.0) * cfg.width_shift * width as f64,
            shift_y: (2.0 * u[2] - 1.0) * cfg.height_shift * height as f64,
            flip_h: cfg.horizontal_flip && u[3] < 0.5,
            flip_v: cfg.vertical_flip && u[4] < 0.5,
            brightness: lo + u[5] * (hi - lo),
        }
    }

    pub fn apply(&self, image: &Image) -> Image {
        let mut img = rotate(image, self.angle_degrees);
        img = shift(&img, self.shift_x, self.shift_y);
        if self.flip_h {
            img = img.flip_horizontal();
        }
        if self.flip_v {
            img = img.flip_vertical();
        }
        brighten(&img, self.brightness)
    }
}

/// Rotation about the image center, bilinear with reflect fill.
pub fn rotate(image: &Image, degrees: f64) -> Image {
    if degrees == 0.0 {
        return image.clone();
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let cx = (image.width() as f64 - 1.0) / 2.0;
    let cy = (image.height() as f64 - 1.0) / 2.0;
    image.warp(|x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (c * dx + s * dy + cx, -s * dx + c * dy + cy)
    })
}

/// Translation by `(dx, dy)` pixels, bilinear with reflect fill.
pub fn shift(image: &Image, dx: f64, dy: f64) -> Image {
    if dx == 0.0 && dy == 0.0 {
        return image.clone();
    }
    image.warp(|x, y| (x - dx, y - dy))
}

pub fn brighten(image: &Image, factor: f64) -> Image {
    if factor == 1.0 {
        return image.clone();
    }
    let f = factor as f32;
    image.map(|v| (v * f).clamp(0.0, 255.0))
}

/// Applies rotation, shift, flips and brightness, in that order; the draw
/// is a pure function of `seed`.
pub fn augment(image: &Image, cfg: &AugmentConfig, seed: u64) -> Image {
    AugmentDraw::sample(cfg, image.width(), image.height(), seed).apply(image)
}
