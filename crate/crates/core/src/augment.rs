//! Augmentation sampling and the photometric pipeline.
//!
//! Randomness comes from ChaCha8 streams. A view set generated with seed `s`
//! draws view `n` from `ChaCha8Rng::seed_from_u64(s)` switched to stream `n`,
//! so each view owns an independent, platform-portable child stream and the
//! result does not depend on generation order or thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_geometric, DownscaleSpec, GeoParams};
use crate::image::{Image, CHANNELS};

/// Luma weights used by grayscale conversion and contrast jitter.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

const CROP_ATTEMPTS: usize = 10;

/// Child RNG for stream `stream` of `seed`.
pub fn child_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Folds several integers into one seed with the splitmix64 finaliser.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhotoDistribution {
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub solarize_prob: f64,
    pub solarize_threshold: f64,
}

impl Default for PhotoDistribution {
    fn default() -> Self {
        Self {
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: (0.1, 0.6),
            solarize_prob: 0.0,
            solarize_threshold: 0.5,
        }
    }
}

impl PhotoDistribution {
    /// Never applies anything.
    pub fn disabled() -> Self {
        Self {
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            solarize_prob: 0.0,
            ..Self::default()
        }
    }
}

/// Sampled photometric parameters of one view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhotoParams {
    pub jitter: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale: bool,
    pub blur: bool,
    pub blur_sigma: f64,
    pub solarize: bool,
    pub solarize_threshold: f64,
}

impl PhotoParams {
    pub fn identity() -> Self {
        Self {
            jitter: false,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            grayscale: false,
            blur: false,
            blur_sigma: 0.0,
            solarize: false,
            solarize_threshold: 0.5,
        }
    }
}

/// Sampling distribution of one view kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugDistribution {
    /// Crop area as a fraction of the image area.
    pub area: (f64, f64),
    /// Crop aspect ratio (width / height), sampled log-uniformly.
    pub ratio: (f64, f64),
    pub out_h: usize,
    pub out_w: usize,
    pub flip_prob: f64,
    pub photo: PhotoDistribution,
}

impl AugDistribution {
    pub fn validate(&self, spec: &DownscaleSpec) -> Result<()> {
        let (a0, a1) = self.area;
        let (r0, r1) = self.ratio;
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::Config(format!(
                "crop area range {:?} must satisfy 0 < lo <= hi <= 1",
                self.area
            )));
        }
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(Error::Config(format!("aspect ratio range {:?} is empty", self.ratio)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip probability outside [0, 1]".into()));
        }
        spec.grid(self.out_h, self.out_w).map_err(|_| {
            Error::Config(format!(
                "view size {}x{} not divisible by {}",
                self.out_h, self.out_w, spec.factor
            ))
        })?;
        Ok(())
    }
}

/// Random-resized-crop sampling with flip.
pub fn sample_geo(dist: &AugDistribution, rng: &mut impl Rng, img_h: usize, img_w: usize) -> GeoParams {
    let (iw, ih) = (img_w as f64, img_h as f64);
    let area = iw * ih;
    let (lr0, lr1) = (dist.ratio.0.ln(), dist.ratio.1.ln());
    let mut rect = None;
    for _ in 0..CROP_ATTEMPTS {
        let target = area * uniform(rng, dist.area.0, dist.area.1);
        let ratio = uniform(rng, lr0, lr1).exp();
        let w = (target * ratio).sqrt();
        let h = (target / ratio).sqrt();
        if w > 0.0 && h > 0.0 && w <= iw && h <= ih {
            let x = uniform(rng, 0.0, iw - w);
            let y = uniform(rng, 0.0, ih - h);
            rect = Some((x, y, w, h));
            break;
        }
    }
    let (x, y, w, h) = rect.unwrap_or_else(|| {
        let in_ratio = iw / ih;
        let (w, h) = if in_ratio < dist.ratio.0 {
            (iw, iw / dist.ratio.0)
        } else if in_ratio > dist.ratio.1 {
            (ih * dist.ratio.1, ih)
        } else {
            (iw, ih)
        };
        ((iw - w) / 2.0, (ih - h) / 2.0, w, h)
    });
    let flip = rng.gen::<f64>() < dist.flip_prob;
    GeoParams {
        ul_x: x,
        ul_y: y,
        // keep the crop inside the image despite rounding
        lr_x: (x + w).min(iw),
        lr_y: (y + h).min(ih),
        h: dist.out_h,
        w: dist.out_w,
        flip,
    }
}

pub fn sample_photo(dist: &PhotoDistribution, rng: &mut impl Rng) -> PhotoParams {
    let jitter = rng.gen::<f64>() < dist.jitter_prob;
    let brightness = uniform(rng, 1.0 - dist.brightness, 1.0 + dist.brightness);
    let contrast = uniform(rng, 1.0 - dist.contrast, 1.0 + dist.contrast);
    let saturation = uniform(rng, 1.0 - dist.saturation, 1.0 + dist.saturation);
    let grayscale = rng.gen::<f64>() < dist.grayscale_prob;
    let blur = rng.gen::<f64>() < dist.blur_prob;
    let blur_sigma = uniform(rng, dist.blur_sigma.0, dist.blur_sigma.1);
    let solarize = rng.gen::<f64>() < dist.solarize_prob;
    PhotoParams {
        jitter,
        brightness,
        contrast,
        saturation,
        grayscale,
        blur,
        blur_sigma,
        solarize,
        solarize_threshold: dist.solarize_threshold,
    }
}

fn luma(p: &[f64]) -> f64 {
    LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]
}

fn clamp_all(data: &mut [f64]) {
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Normalised 1-D Gaussian kernel with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (img.height() as isize, img.width() as isize);
    let mut tmp = img.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (t, kv) in k.iter().enumerate() {
                let sx = (x + t as isize - r).clamp(0, w - 1) as usize;
                let p = img.pixel(y as usize, sx);
                (0..CHANNELS).for_each(|c| acc[c] += kv * p[c]);
            }
            tmp.set_pixel(y as usize, x as usize, acc);
        }
    }
    let mut out = tmp.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (t, kv) in k.iter().enumerate() {
                let sy = (y + t as isize - r).clamp(0, h - 1) as usize;
                let p = tmp.pixel(sy, x as usize);
                (0..CHANNELS).for_each(|c| acc[c] += kv * p[c]);
            }
            out.set_pixel(y as usize, x as usize, acc);
        }
    }
    out
}

/// Colour jitter, grayscale, blur and solarize, each iff flagged, in that
/// order. Output is clamped to `[0, 1]`.
pub fn apply_photometric(image: &Image, p: &PhotoParams) -> Image {
    let mut img = image.clone();
    if p.jitter {
        let d = img.data_mut();
        d.iter_mut().for_each(|v| *v *= p.brightness);
        clamp_all(d);
        let mean = d.chunks(CHANNELS).map(luma).sum::<f64>() / (d.len() / CHANNELS) as f64;
        d.iter_mut().for_each(|v| *v = (*v - mean) * p.contrast + mean);
        clamp_all(d);
        for px in d.chunks_mut(CHANNELS) {
            let g = luma(px);
            px.iter_mut().for_each(|v| *v = (*v - g) * p.saturation + g);
        }
        clamp_all(d);
    }
    if p.grayscale {
        for px in img.data_mut().chunks_mut(CHANNELS) {
            let g = luma(px);
            px.fill(g);
        }
    }
    if p.blur && p.blur_sigma > 0.0 {
        img = gaussian_blur(&img, p.blur_sigma);
    }
    if p.solarize {
        img.data_mut().iter_mut().for_each(|v| {
            if *v >= p.solarize_threshold {
                *v = 1.0 - *v
            }
        });
    }
    clamp_all(img.data_mut());
    img
}

/// Multi-crop configuration: two global distributions and one local.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiCropConfig {
    pub global: [AugDistribution; 2],
    pub local: AugDistribution,
    pub n_local: usize,
    pub downscale: DownscaleSpec,
}

impl MultiCropConfig {
    /// Desk-scale defaults: 64x64 globals, 32x32 locals, `r = 16`.
    pub fn desk(n_local: usize) -> Self {
        let ratio = (3.0 / 4.0, 4.0 / 3.0);
        let global = |blur_prob: f64, solarize_prob: f64| AugDistribution {
            area: (0.4, 1.0),
            ratio,
            out_h: 64,
            out_w: 64,
            flip_prob: 0.5,
            photo: PhotoDistribution {
                blur_prob,
                solarize_prob,
                ..PhotoDistribution::default()
            },
        };
        Self {
            global: [global(1.0, 0.0), global(0.1, 0.2)],
            local: AugDistribution {
                area: (0.05, 0.4),
                ratio,
                out_h: 32,
                out_w: 32,
                flip_prob: 0.5,
                photo: PhotoDistribution::default(),
            },
            n_local,
            downscale: DownscaleSpec { factor: 16 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for d in self.global.iter().chain(std::iter::once(&self.local)) {
            d.validate(&self.downscale)?;
        }
        if self.global[0].out_h != self.global[1].out_h || self.global[0].out_w != self.global[1].out_w {
            return Err(Error::Config("the two global views must share one size".into()));
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        2 + self.n_local
    }

    fn dist(&self, view: usize) -> &AugDistribution {
        match view {
            0 | 1 => &self.global[view],
            _ => &self.local,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: Image,
    pub geo: GeoParams,
    pub photo: PhotoParams,
    pub is_global: bool,
}

/// Two global views followed by the local views.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub views: Vec<View>,
}

impl ViewSet {
    pub fn globals(&self) -> &[View] {
        &self.views[..2]
    }

    pub fn locals(&self) -> &[View] {
        &self.views[2..]
    }
}

fn make_view(image: &Image, dist: &AugDistribution, rng: &mut ChaCha8Rng, is_global: bool) -> Result<View> {
    let geo = sample_geo(dist, rng, image.height(), image.width());
    let photo = sample_photo(&dist.photo, rng);
    let image = apply_photometric(&apply_geometric(image, &geo)?, &photo);
    Ok(View {
        image,
        geo,
        photo,
        is_global,
    })
}

/// Generates the multi-crop view set of one image.
pub fn make_views(image: &Image, config: &MultiCropConfig, seed: u64) -> Result<ViewSet> {
    config.validate()?;
    let views = (0..config.n_views())
        .map(|n| {
            let mut rng = child_rng(seed, n as u64);
            make_view(image, config.dist(n), &mut rng, n < 2)
        })
        .collect::<Result<_>>()?;
    Ok(ViewSet { views })
}

/// Two views with identical geometry and independent photometrics. The
/// ground-truth token correspondence between them is the identity.
pub fn make_eval_pair(image: &Image, config: &MultiCropConfig, rng: &mut impl Rng) -> Result<(View, View)> {
    config.validate()?;
    let dist = &config.global[0];
    let geo = sample_geo(dist, rng, image.height(), image.width());
    let base = apply_geometric(image, &geo)?;
    let pa = sample_photo(&dist.photo, rng);
    let pb = sample_photo(&dist.photo, rng);
    let view = |photo: PhotoParams| View {
        image: apply_photometric(&base, &photo),
        geo,
        photo,
        is_global: true,
    };
    Ok((view(pa), view(pb)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::token_centers;

    fn test_image() -> Image {
        Image::from_fn(48, 48, |y, x| {
            [(x as f64 / 47.0), (y as f64 / 47.0), ((x + y) % 7) as f64 / 6.0]
        })
    }

    #[test]
    fn degenerate_ranges_give_full_crop() {
        let dist = AugDistribution {
            area: (1.0, 1.0),
            ratio: (1.0, 1.0),
            out_h: 16,
            out_w: 16,
            flip_prob: 0.0,
            photo: PhotoDistribution::disabled(),
        };
        let mut rng = child_rng(3, 0);
        let g = sample_geo(&dist, &mut rng, 40, 40);
        assert_eq!(g, GeoParams::full(40, 40, 16, 16, false));
    }

    #[test]
    fn geo_sampling_is_seeded() {
        let d = MultiCropConfig::desk(2).local;
        let a = sample_geo(&d, &mut child_rng(9, 4), 64, 64);
        let b = sample_geo(&d, &mut child_rng(9, 4), 64, 64);
        assert_eq!(a, b);
        assert_ne!(a, sample_geo(&d, &mut child_rng(9, 5), 64, 64));
    }

    #[test]
    fn fallback_center_crop() {
        // a crop area larger than any fitting rectangle at this ratio forces
        // every attempt to fail
        let dist = AugDistribution {
            area: (1.0, 1.0),
            ratio: (3.0, 3.0),
            out_h: 8,
            out_w: 8,
            flip_prob: 0.0,
            photo: PhotoDistribution::disabled(),
        };
        let g = sample_geo(&dist, &mut child_rng(1, 0), 30, 30);
        assert_eq!((g.ul_x, g.lr_x), (0.0, 30.0));
        assert!((g.crop_height() - 10.0).abs() < 1e-12);
        assert!((g.ul_y - 10.0).abs() < 1e-12);
    }

    #[test]
    fn disabled_photometrics_are_identity() {
        let img = test_image();
        assert_eq!(apply_photometric(&img, &PhotoParams::identity()), img);
    }

    #[test]
    fn grayscale_equalises_channels() {
        let img = test_image();
        let p = PhotoParams {
            grayscale: true,
            ..PhotoParams::identity()
        };
        let out = apply_photometric(&img, &p);
        for (px, src) in out.data().chunks(3).zip(img.data().chunks(3)) {
            let g = 0.299 * src[0] + 0.587 * src[1] + 0.114 * src[2];
            assert!(px.iter().all(|&c| (c - g).abs() < 1e-15));
        }
    }

    #[test]
    fn blur_matches_dense_convolution() {
        let mut img = Image::filled(15, 15, [0.0; 3]);
        img.set_pixel(7, 7, [1.0, 0.5, 0.25]);
        let sigma = 1.0;
        let out = gaussian_blur(&img, sigma);
        // dense 2-D oracle: kernel is the outer product of the normalised 1-D
        // Gaussian, impulse far enough from the border that clamping is moot
        let radius = 3isize;
        let g1: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / 2.0).exp()).collect();
        let s: f64 = g1.iter().sum();
        for y in 0..15isize {
            for x in 0..15isize {
                let (dy, dx) = (y - 7, x - 7);
                let expect = if dy.abs() <= radius && dx.abs() <= radius {
                    g1[(dy + radius) as usize] * g1[(dx + radius) as usize] / (s * s)
                } else {
                    0.0
                };
                let p = out.pixel(y as usize, x as usize);
                assert!((p[0] - expect).abs() < 1e-9);
                assert!((p[1] - 0.5 * expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn solarize_and_clamp() {
        let img = Image::filled(2, 2, [0.2, 0.6, 0.9]);
        let p = PhotoParams {
            solarize: true,
            solarize_threshold: 0.5,
            ..PhotoParams::identity()
        };
        let out = apply_photometric(&img, &p);
        assert_eq!(out.pixel(0, 0)[0], 0.2);
        assert!((out.pixel(0, 0)[1] - 0.4).abs() < 1e-15);
        let p = PhotoParams {
            jitter: true,
            brightness: 3.0,
            ..PhotoParams::identity()
        };
        assert!(apply_photometric(&img, &p)
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn view_grids_follow_sizes() {
        let img = Image::filled(64, 64, [0.5; 3]);
        let cfg = MultiCropConfig::desk(8);
        let vs = make_views(&img, &cfg, 5).unwrap();
        assert_eq!(vs.views.len(), 10);
        for (n, v) in vs.views.iter().enumerate() {
            let e = token_centers(&v.geo, &cfg.downscale).unwrap();
            assert_eq!(v.is_global, n < 2);
            assert_eq!(e.grid, if n < 2 { (4, 4) } else { (2, 2) });
        }
        let none = make_views(&img, &MultiCropConfig::desk(0), 5).unwrap();
        assert_eq!(none.views.len(), 2);
        assert!(none.locals().is_empty());
    }

    #[test]
    fn stored_geometry_regenerates_views() {
        let img = test_image();
        let cfg = MultiCropConfig::desk(4);
        let vs = make_views(&img, &cfg, 77).unwrap();
        for v in &vs.views {
            let regen = apply_photometric(&apply_geometric(&img, &v.geo).unwrap(), &v.photo);
            assert_eq!(regen, v.image);
        }
    }

    #[test]
    fn eval_pair_shares_geometry() {
        let img = test_image();
        let mut cfg = MultiCropConfig::desk(0);
        let mut rng = child_rng(2, 0);
        let (a, b) = make_eval_pair(&img, &cfg, &mut rng).unwrap();
        assert_eq!(a.geo, b.geo);
        cfg.global[0].photo = PhotoDistribution::disabled();
        let (a, b) = make_eval_pair(&img, &cfg, &mut rng).unwrap();
        assert_eq!(a.image, b.image);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = MultiCropConfig::desk(2);
        cfg.local.out_h = 30;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = MultiCropConfig::desk(2);
        cfg.global[0].area = (0.5, 0.4);
        assert!(cfg.validate().is_err());
    }
}
