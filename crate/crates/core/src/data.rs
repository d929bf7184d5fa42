//! Synthetic texture datasets and their on-disk layout.
//!
//! A dataset directory holds `images.gltd`, one rank-4 `[N, H, W, 3]` record,
//! and `labels.txt`, one class id per line in image order.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::augment::{child_rng, derive_seed};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::numerics::{gltd, Tensor};

pub const IMAGES_FILE: &str = "images.gltd";
pub const LABELS_FILE: &str = "labels.txt";
const TINT: f64 = 0.05;

/// Texture families, in class-id order.
pub const FAMILIES: [&str; 8] = [
    "horizontal_stripes",
    "vertical_stripes",
    "diagonal_stripes",
    "checkerboard",
    "dots",
    "rings",
    "pinwheel",
    "plaid",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_images: usize,
    pub n_classes: usize,
    pub size: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_classes > FAMILIES.len() {
            return Err(Error::Config(format!("classes must be in 2..={}", FAMILIES.len())));
        }
        if self.n_images == 0 || !self.n_images.is_multiple_of(self.n_classes) {
            return Err(Error::Config(format!(
                "{} images cannot be split evenly over {} classes",
                self.n_images, self.n_classes
            )));
        }
        if self.size < 8 {
            return Err(Error::Config("image size must be at least 8".into()));
        }
        Ok(())
    }
}

fn smooth_step(v: f64) -> f64 {
    // sharpened sinusoid: soft-edged binary pattern
    (0.5 + 0.5 * (3.0 * v).tanh()).clamp(0.0, 1.0)
}

/// Grey level with a small per-channel tint.
fn random_tone(rng: &mut impl Rng, level: f64) -> [f64; 3] {
    let mut c = [0.0; 3];
    for v in c.iter_mut() {
        *v = (level + rng.gen_range(-TINT..TINT)).clamp(0.0, 1.0);
    }
    c
}

/// Foreground and background tones at one end of the image.
fn tone_pair(rng: &mut impl Rng) -> ([f64; 3], [f64; 3]) {
    let lo = rng.gen_range(0.1..0.35);
    let hi = rng.gen_range(0.65..0.9);
    (random_tone(rng, hi), random_tone(rng, lo))
}

/// One texture of family `class` with random period, phase, centre and a
/// tone gradient across the image.
pub fn texture(class: usize, size: usize, rng: &mut impl Rng) -> Image {
    let s = size as f64;
    let period = s * rng.gen_range(0.12..0.2);
    let freq = 2.0 * PI / period;
    let phase = rng.gen_range(0.0..2.0 * PI);
    let cx = s * rng.gen_range(0.3..0.7);
    let cy = s * rng.gen_range(0.3..0.7);
    let diag_sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let spokes = rng.gen_range(3..6) as f64;
    let ends = [tone_pair(rng), tone_pair(rng)];
    let angle = rng.gen_range(0.0..2.0 * PI);
    let (ux, uy) = (angle.cos(), angle.sin());
    let noise: Vec<f64> = (0..size * size)
        .map(|_| 0.03 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Image::from_fn(size, size, |y, x| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let v = match class {
            0 => (freq * py + phase).sin(),
            1 => (freq * px + phase).sin(),
            2 => (freq * (px + diag_sign * py) / 2f64.sqrt() + phase).sin(),
            3 => (freq * px + phase).sin() * (freq * py + phase).sin(),
            4 => ((freq * px + phase).cos() + (freq * py + phase).cos()) - 1.0,
            5 => (freq * ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() + phase).sin(),
            6 => (spokes * (py - cy).atan2(px - cx) + phase).sin(),
            _ => ((freq * px + phase).cos().max((freq * py + phase).cos()) - 0.7) * 3.0,
        };
        let t = smooth_step(v);
        let g = (0.5 + ((px - s / 2.0) * ux + (py - s / 2.0) * uy) / s).clamp(0.0, 1.0);
        let n = noise[y * size + x];
        let mut rgb = [0.0; 3];
        for c in 0..CHANNELS {
            let fg = ends[0].0[c] * (1.0 - g) + ends[1].0[c] * g;
            let bg = ends[0].1[c] * (1.0 - g) + ends[1].1[c] * g;
            rgb[c] = (bg * (1.0 - t) + fg * t + n).clamp(0.0, 1.0);
        }
        rgb
    })
}

/// Class-balanced synthetic dataset; image `i` has class `i % n_classes`.
pub fn synthesize(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut images = Vec::with_capacity(cfg.n_images);
    let mut labels = Vec::with_capacity(cfg.n_images);
    for i in 0..cfg.n_images {
        let class = i % cfg.n_classes;
        let mut rng = child_rng(derive_seed(&[cfg.seed, i as u64]), 0);
        images.push(texture(class, cfg.size, &mut rng));
        labels.push(class);
    }
    Ok(Dataset { images, labels })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Image side lengths, if every image shares them.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        let first = self.images.first()?;
        let hw = (first.height(), first.width());
        self.images.iter().all(|i| (i.height(), i.width()) == hw).then_some(hw)
    }

    /// The first `n` images of the set.
    pub fn take(&self, n: usize) -> Dataset {
        Dataset {
            images: self.images.iter().take(n).cloned().collect(),
            labels: self.labels.iter().take(n).copied().collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let (h, w) = self
            .image_size()
            .ok_or_else(|| Error::invalid("dataset images must be non-empty and share one size"))?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut data = Vec::with_capacity(self.len() * h * w * CHANNELS);
        for img in &self.images {
            data.extend_from_slice(img.data());
        }
        let t = Tensor::new(vec![self.len(), h, w, CHANNELS], data)?;
        let path = dir.join(IMAGES_FILE);
        std::fs::write(&path, gltd::encode(&t)).map_err(|e| Error::io(&path, e))?;
        let labels: String = self.labels.iter().map(|l| format!("{l}\n")).collect();
        let path = dir.join(LABELS_FILE);
        std::fs::write(&path, labels).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(IMAGES_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (t, _) = gltd::decode(&bytes)?;
        let (n, h, w) = match *t.shape() {
            [n, h, w, 3] => (n, h, w),
            ref s => {
                return Err(Error::Format(format!(
                    "{} must hold [N, H, W, 3], found {s:?}",
                    path.display()
                )))
            }
        };
        let per = h * w * CHANNELS;
        let data = t.into_data();
        let images = (0..n)
            .map(|i| Image::new(h, w, data[i * per..(i + 1) * per].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let path = dir.join(LABELS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let labels = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad label {l:?} in {}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        if labels.len() != n {
            return Err(Error::Format(format!("{n} images but {} labels", labels.len())));
        }
        Ok(Dataset { images, labels })
    }
}
