//! Geometric view algebra.
//!
//! A view is produced from an original image by cropping an axis-aligned
//! rectangle (continuous coordinates), resizing it to `h x w` and optionally
//! mirroring it horizontally. Because every step is invertible on points, the
//! centre of each output token can be mapped back into the original image
//! frame, which is what geometric matching operates on.
//!
//! Coordinates use the pixel-centre convention: pixel `(i, j)` covers
//! `[j, j+1) x [i, i+1)` and its centre sits at `(j + 0.5, i + 0.5)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::numerics::Tensor;

/// Crop rectangle, output size and flip flag of one view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoParams {
    pub ul_x: f64,
    pub ul_y: f64,
    pub lr_x: f64,
    pub lr_y: f64,
    pub h: usize,
    pub w: usize,
    pub flip: bool,
}

impl GeoParams {
    /// Whole-image crop, resized to `h x w`.
    pub fn full(img_h: usize, img_w: usize, h: usize, w: usize, flip: bool) -> Self {
        Self {
            ul_x: 0.0,
            ul_y: 0.0,
            lr_x: img_w as f64,
            lr_y: img_h as f64,
            h,
            w,
            flip,
        }
    }

    pub fn crop_width(&self) -> f64 {
        self.lr_x - self.ul_x
    }

    pub fn crop_height(&self) -> f64 {
        self.lr_y - self.ul_y
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            ul_x: self.ul_x + dx,
            ul_y: self.ul_y + dy,
            lr_x: self.lr_x + dx,
            lr_y: self.lr_y + dy,
            ..*self
        }
    }

    /// Checks a non-empty crop inside an `img_h x img_w` image.
    pub fn validate(&self, img_h: usize, img_w: usize) -> Result<()> {
        let vals = [self.ul_x, self.ul_y, self.lr_x, self.lr_y];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCrop("non-finite crop coordinate".into()));
        }
        if !(self.ul_x < self.lr_x && self.ul_y < self.lr_y) {
            return Err(Error::InvalidCrop(format!("zero-area crop {self:?}")));
        }
        if self.ul_x < 0.0 || self.ul_y < 0.0 || self.lr_x > img_w as f64 || self.lr_y > img_h as f64 {
            return Err(Error::InvalidCrop(format!(
                "crop {self:?} outside {img_h}x{img_w} image"
            )));
        }
        if self.h == 0 || self.w == 0 {
            return Err(Error::InvalidCrop("zero output size".into()));
        }
        Ok(())
    }

    /// Maps a point of the resized (and possibly flipped) view back into the
    /// original image frame.
    pub fn view_to_original(&self, x: f64, y: f64) -> (f64, f64) {
        let x = if self.flip { self.w as f64 - x } else { x };
        (
            self.ul_x + x / self.w as f64 * self.crop_width(),
            self.ul_y + y / self.h as f64 * self.crop_height(),
        )
    }

    /// Inverse of [`GeoParams::view_to_original`].
    pub fn original_to_view(&self, x: f64, y: f64) -> (f64, f64) {
        let vx = (x - self.ul_x) / self.crop_width() * self.w as f64;
        let vy = (y - self.ul_y) / self.crop_height() * self.h as f64;
        (if self.flip { self.w as f64 - vx } else { vx }, vy)
    }
}

/// Backbone downscale factor `r`: a token covers an `r x r` pixel patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DownscaleSpec {
    pub factor: usize,
}

impl DownscaleSpec {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("downscale factor must be positive"));
        }
        Ok(Self { factor })
    }

    /// Token grid `(rows, cols)` of an `h x w` view.
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if !h.is_multiple_of(self.factor) || !w.is_multiple_of(self.factor) || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "view size {h}x{w} is not a positive multiple of {}",
                self.factor
            )));
        }
        Ok((h / self.factor, w / self.factor))
    }
}

/// Token centres of one view in original-image coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosEncoding {
    /// Row `k` is the `(x, y)` centre of token `k` (row-major over the grid).
    pub centers: Vec<[f64; 2]>,
    pub grid: (usize, usize),
    /// Footprint diagonal of one token in original pixels.
    pub diag: f64,
    /// Crop rectangle `[ul_x, ul_y, lr_x, lr_y]` the view was cut from.
    pub crop: [f64; 4],
}

impl PosEncoding {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Geometric,
    Similarity,
}

/// Correspondence from each source token to one target token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    pub mode: MatchMode,
    pub target: Vec<usize>,
    /// Matching distance in original pixels (geometric) or the achieved
    /// cosine similarity (similarity).
    pub distance: Vec<f64>,
    pub mask: Vec<bool>,
    /// Distance threshold `s`; only set for geometric matchings.
    pub threshold: Option<f64>,
}

impl Matching {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn active(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// One matching as written to the JSON-lines export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchingRecord {
    pub view_a: usize,
    pub view_b: usize,
    pub targets: Vec<usize>,
    pub distances: Vec<f64>,
    pub mask: Vec<bool>,
    pub s: Option<f64>,
}

impl MatchingRecord {
    pub fn new(view_a: usize, view_b: usize, m: &Matching) -> Self {
        Self {
            view_a,
            view_b,
            targets: m.target.clone(),
            distances: m.distance.clone(),
            mask: m.mask.clone(),
            s: m.threshold,
        }
    }
}

/// Writes matchings as one JSON object per line.
pub fn matchings_to_jsonl(records: &[MatchingRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Bilinear sample at continuous original-frame point `(x, y)`, clamping at
/// the image border.
pub fn sample_bilinear(img: &Image, x: f64, y: f64) -> [f64; 3] {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let u = x - 0.5;
    let v = y - 0.5;
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let clamp = |i: isize, n: isize| i.clamp(0, n - 1) as usize;
    let (xa, xb) = (clamp(x0 as isize, w), clamp(x0 as isize + 1, w));
    let (ya, yb) = (clamp(y0 as isize, h), clamp(y0 as isize + 1, h));
    let (p00, p01, p10, p11) = (
        img.pixel(ya, xa),
        img.pixel(ya, xb),
        img.pixel(yb, xa),
        img.pixel(yb, xb),
    );
    let mut out = [0.0; 3];
    for c in 0..CHANNELS {
        let top = p00[c] + (p01[c] - p00[c]) * fx;
        let bottom = p10[c] + (p11[c] - p10[c]) * fx;
        out[c] = top + (bottom - top) * fy;
    }
    out
}

/// Crop, bilinear resize to `h x w`, then mirror iff `g.flip`.
pub fn apply_geometric(image: &Image, g: &GeoParams) -> Result<Image> {
    g.validate(image.height(), image.width())?;
    let sx = g.crop_width() / g.w as f64;
    let sy = g.crop_height() / g.h as f64;
    let mut out = Image::filled(g.h, g.w, [0.0; 3]);
    for i in 0..g.h {
        let y = g.ul_y + (i as f64 + 0.5) * sy;
        for j in 0..g.w {
            let x = g.ul_x + (j as f64 + 0.5) * sx;
            let dst = if g.flip { g.w - 1 - j } else { j };
            out.set_pixel(i, dst, sample_bilinear(image, x, y));
        }
    }
    Ok(out)
}

fn token_steps(g: &GeoParams, spec: &DownscaleSpec) -> Result<(usize, usize, f64, f64)> {
    let (gh, gw) = spec.grid(g.h, g.w)?;
    Ok((gh, gw, g.crop_width() / gw as f64, g.crop_height() / gh as f64))
}

/// Length of one token's footprint diagonal in original pixels.
pub fn diag_length(g: &GeoParams, spec: &DownscaleSpec) -> Result<f64> {
    let (_, _, step_x, step_y) = token_steps(g, spec)?;
    Ok(step_x.hypot(step_y))
}

/// Back-projects the centre of every output token into the original frame.
pub fn token_centers(g: &GeoParams, spec: &DownscaleSpec) -> Result<PosEncoding> {
    let (gh, gw, step_x, step_y) = token_steps(g, spec)?;
    let r = spec.factor as f64;
    let mut centers = Vec::with_capacity(gh * gw);
    for i in 0..gh {
        let y = (i as f64 + 0.5) * r;
        for j in 0..gw {
            let x = (j as f64 + 0.5) * r;
            let (ox, oy) = g.view_to_original(x, y);
            centers.push([ox, oy]);
        }
    }
    Ok(PosEncoding {
        centers,
        grid: (gh, gw),
        diag: step_x.hypot(step_y),
        crop: [g.ul_x, g.ul_y, g.lr_x, g.lr_y],
    })
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Matches every token of `e` to the nearest token centre of `e_other`.
///
/// Ties go to the lowest target index. A match is kept (mask true) iff its
/// distance is strictly below `s = max(diag, diag') / 2`.
pub fn geometric_match(e: &PosEncoding, e_other: &PosEncoding) -> Result<Matching> {
    if e.is_empty() || e_other.is_empty() {
        return Err(Error::invalid("geometric_match on an empty encoding"));
    }
    let s = 0.5 * e.diag.max(e_other.diag);
    let mut target = Vec::with_capacity(e.len());
    let mut distance = Vec::with_capacity(e.len());
    for &c in &e.centers {
        let (best, best_d2) = e_other
            .centers
            .iter()
            .enumerate()
            .map(|(j, &o)| (j, sq_dist(c, o)))
            .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
        target.push(best);
        distance.push(best_d2.sqrt());
    }
    let mask = distance.iter().map(|&d| d < s).collect();
    Ok(Matching {
        mode: MatchMode::Geometric,
        target,
        distance,
        mask,
        threshold: Some(s),
    })
}

fn row_norms(z: &Tensor, what: &'static str) -> Result<Vec<f64>> {
    z.iter_rows()
        .enumerate()
        .map(|(row, r)| {
            let n = crate::numerics::norm(r);
            if n == 0.0 {
                Err(Error::ZeroNorm { what, row })
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Matches every row of `z` to the row of `z_other` with the highest cosine
/// similarity (ties to the lowest index). The mask is all-true.
pub fn similarity_match(z: &Tensor, z_other: &Tensor) -> Result<Matching> {
    if z.rank() != 2 || z_other.rank() != 2 || z.cols() != z_other.cols() {
        return Err(Error::shape(
            "similarity_match",
            format!("{:?} vs {:?}", z.shape(), z_other.shape()),
        ));
    }
    if z.rows() == 0 || z_other.rows() == 0 {
        return Err(Error::invalid("similarity_match on an empty representation"));
    }
    let na = row_norms(z, "similarity_match source")?;
    let nb = row_norms(z_other, "similarity_match target")?;
    let mut target = Vec::with_capacity(z.rows());
    let mut distance = Vec::with_capacity(z.rows());
    for (a, &norm_a) in z.iter_rows().zip(&na) {
        let (best, best_cos) = z_other
            .iter_rows()
            .zip(&nb)
            .enumerate()
            .map(|(j, (b, &norm_b))| (j, crate::numerics::dot(a, b) / (norm_a * norm_b)))
            .fold((0, f64::NEG_INFINITY), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        target.push(best);
        distance.push(best_cos);
    }
    Ok(Matching {
        mode: MatchMode::Similarity,
        mask: vec![true; target.len()],
        target,
        distance,
        threshold: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x| [x as f64 * 0.01, y as f64 * 0.02, 0.5])
    }

    #[test]
    fn full_crop_is_identity() {
        let img = Image::from_fn(8, 6, |y, x| [(x * y) as f64 / 48.0, 0.3, x as f64 / 6.0]);
        let g = GeoParams::full(8, 6, 8, 6, false);
        assert_eq!(apply_geometric(&img, &g).unwrap(), img);
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = Image::from_fn(5, 7, |y, x| [(x + 3 * y) as f64 / 30.0, 0.1, 0.9]);
        let g = GeoParams::full(5, 7, 5, 7, true);
        let once = apply_geometric(&img, &g).unwrap();
        assert_ne!(once, img);
        assert_eq!(apply_geometric(&once, &g).unwrap(), img);
    }

    #[test]
    fn downscale_ramp_doubles_slope() {
        let img = ramp(16, 16);
        let g = GeoParams::full(16, 16, 8, 8, false);
        let out = apply_geometric(&img, &g).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                // per-pixel bilinear oracle: output (i, j) samples source point
                // (2j+1, 2i+1), i.e. halfway between pixels 2j and 2j+1
                let sx = 2.0 * j as f64 + 0.5;
                let sy = 2.0 * i as f64 + 0.5;
                let p = out.pixel(i, j);
                assert!((p[0] - 0.01 * sx).abs() < 1e-12);
                assert!((p[1] - 0.02 * sy).abs() < 1e-12);
            }
        }
        // doubled slope between neighbouring output pixels
        assert!((out.pixel(0, 1)[0] - out.pixel(0, 0)[0] - 0.02).abs() < 1e-12);
    }

    #[test]
    fn invalid_crops_rejected() {
        let img = ramp(8, 8);
        let mut g = GeoParams::full(8, 8, 4, 4, false);
        g.lr_x = 9.0;
        assert!(matches!(apply_geometric(&img, &g), Err(Error::InvalidCrop(_))));
        g.lr_x = g.ul_x;
        assert!(matches!(apply_geometric(&img, &g), Err(Error::InvalidCrop(_))));
    }

    #[test]
    fn centers_single_token_and_quad() {
        let spec = DownscaleSpec::new(32).unwrap();
        let e = token_centers(&GeoParams::full(32, 32, 32, 32, false), &spec).unwrap();
        assert_eq!(e.centers, vec![[16.0, 16.0]]);
        let e = token_centers(&GeoParams::full(64, 64, 64, 64, false), &spec).unwrap();
        assert_eq!(e.centers, vec![[16.0, 16.0], [48.0, 16.0], [16.0, 48.0], [48.0, 48.0]]);
        assert!(token_centers(&GeoParams::full(64, 64, 48, 64, false), &spec).is_err());
    }

    #[test]
    fn identity_geo_gives_canonical_grid() {
        let spec = DownscaleSpec::new(8).unwrap();
        let e = token_centers(&GeoParams::full(24, 40, 24, 40, false), &spec).unwrap();
        assert_eq!(e.grid, (3, 5));
        for i in 0..3 {
            for j in 0..5 {
                assert_eq!(e.centers[i * 5 + j], [(j as f64 + 0.5) * 8.0, (i as f64 + 0.5) * 8.0]);
            }
        }
    }

    #[test]
    fn flipped_centers_reverse_each_row() {
        let spec = DownscaleSpec::new(4).unwrap();
        let g = GeoParams {
            ul_x: 3.25,
            ul_y: 1.5,
            lr_x: 40.0,
            lr_y: 30.0,
            h: 16,
            w: 12,
            flip: false,
        };
        let plain = token_centers(&g, &spec).unwrap();
        let flipped = token_centers(&GeoParams { flip: true, ..g }, &spec).unwrap();
        let (gh, gw) = plain.grid;
        for i in 0..gh {
            for j in 0..gw {
                let a = flipped.centers[i * gw + j];
                let b = plain.centers[i * gw + (gw - 1 - j)];
                assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
            }
        }
        for c in &flipped.centers {
            assert!(c[0] > g.ul_x && c[0] < g.lr_x && c[1] > g.ul_y && c[1] < g.lr_y);
        }
    }

    #[test]
    fn diag_closed_forms() {
        let spec = DownscaleSpec::new(16).unwrap();
        let g = GeoParams::full(64, 64, 64, 64, false);
        assert!((diag_length(&g, &spec).unwrap() - 16.0 * 2f64.sqrt()).abs() < 1e-12);
        // 32 wide, 64 tall crop resized to a 2x4 (cols x rows) grid
        let g = GeoParams {
            ul_x: 0.0,
            ul_y: 0.0,
            lr_x: 32.0,
            lr_y: 64.0,
            h: 64,
            w: 32,
            flip: false,
        };
        assert_eq!(spec.grid(g.h, g.w).unwrap(), (4, 2));
        assert!((diag_length(&g, &spec).unwrap() - 16.0 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn diag_matches_encoding_neighbours() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = DownscaleSpec::new(8).unwrap();
        for _ in 0..50 {
            let ul_x = rng.gen_range(0.0..30.0);
            let ul_y = rng.gen_range(0.0..30.0);
            let g = GeoParams {
                ul_x,
                ul_y,
                lr_x: ul_x + rng.gen_range(5.0..60.0),
                lr_y: ul_y + rng.gen_range(5.0..60.0),
                h: 32,
                w: 24,
                flip: rng.gen(),
            };
            let e = token_centers(&g, &spec).unwrap();
            let gw = e.grid.1;
            let d = ((e.centers[0][0] - e.centers[gw + 1][0]).powi(2)
                + (e.centers[0][1] - e.centers[gw + 1][1]).powi(2))
            .sqrt();
            assert!((diag_length(&g, &spec).unwrap() - d).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_views_match_identity() {
        let spec = DownscaleSpec::new(16).unwrap();
        let g = GeoParams {
            ul_x: 4.0,
            ul_y: 10.0,
            lr_x: 50.0,
            lr_y: 60.0,
            h: 64,
            w: 64,
            flip: true,
        };
        let e = token_centers(&g, &spec).unwrap();
        let m = geometric_match(&e, &e).unwrap();
        assert_eq!(m.target, (0..16).collect::<Vec<_>>());
        assert!(m.distance.iter().all(|&d| d == 0.0));
        assert!(m.mask.iter().all(|&b| b));
    }

    #[test]
    fn disjoint_views_fully_masked() {
        let spec = DownscaleSpec::new(16).unwrap();
        let a = GeoParams {
            ul_x: 0.0,
            ul_y: 0.0,
            lr_x: 40.0,
            lr_y: 40.0,
            h: 64,
            w: 64,
            flip: false,
        };
        let b = a.translated(60.0, 60.0);
        let m = geometric_match(&token_centers(&a, &spec).unwrap(), &token_centers(&b, &spec).unwrap()).unwrap();
        assert!(m.mask.iter().all(|&x| !x));
        assert!(m.distance.iter().all(|&d| d > m.threshold.unwrap()));
    }

    #[test]
    fn similarity_recovers_permutation_of_orthogonal_rows() {
        let z = Tensor::identity(4);
        let perm = [2usize, 0, 3, 1];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| z.row(p).to_vec()).collect();
        let z2 = Tensor::from_rows(&rows).unwrap();
        let m = similarity_match(&z, &z2).unwrap();
        // source row k is found at the position where perm == k
        for k in 0..4 {
            assert_eq!(perm[m.target[k]], k);
        }
        assert!(m.mask.iter().all(|&b| b));
        assert!(m.threshold.is_none());
    }

    #[test]
    fn similarity_collapsed_target() {
        let z = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let z2 = Tensor::matrix(4, 2, [0.3, 0.7].repeat(4)).unwrap();
        let m = similarity_match(&z, &z2).unwrap();
        assert_eq!(m.target, vec![0, 0, 0]);
    }

    #[test]
    fn similarity_rejects_zero_rows() {
        let z = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            similarity_match(&z, &Tensor::identity(2)),
            Err(Error::ZeroNorm { row: 1, .. })
        ));
        assert!(matches!(
            similarity_match(&Tensor::identity(2), &z),
            Err(Error::ZeroNorm { .. })
        ));
    }

    #[test]
    fn jsonl_export() {
        let m = Matching {
            mode: MatchMode::Geometric,
            target: vec![1, 0],
            distance: vec![0.5, 2.0],
            mask: vec![true, false],
            threshold: Some(1.0),
        };
        let s = matchings_to_jsonl(&[MatchingRecord::new(0, 3, &m)]).unwrap();
        assert_eq!(
            s,
            "{\"view_a\":0,\"view_b\":3,\"targets\":[1,0],\"distances\":[0.5,2.0],\"mask\":[true,false],\"s\":1.0}\n"
        );
    }

    fn dyadic_geo(ul: (u32, u32), size: (u32, u32), grid: (usize, usize), flip: bool, r: usize) -> GeoParams {
        // coordinates on a 1/8 grid keep all centre arithmetic exact
        GeoParams {
            ul_x: ul.0 as f64 / 8.0,
            ul_y: ul.1 as f64 / 8.0,
            lr_x: (ul.0 + size.0) as f64 / 8.0,
            lr_y: (ul.1 + size.1) as f64 / 8.0,
            h: grid.0 * r,
            w: grid.1 * r,
            flip,
        }
    }

    proptest! {
        #[test]
        fn matching_is_translation_consistent(
            ul_a in (0u32..400, 0u32..400), size_a in (8u32..400, 8u32..400),
            ul_b in (0u32..400, 0u32..400), size_b in (8u32..400, 8u32..400),
            ga in (1usize..5, 1usize..5), gb in (1usize..5, 1usize..5),
            fa in any::<bool>(), fb in any::<bool>(),
            shift in (-40i32..40, -40i32..40),
        ) {
            let spec = DownscaleSpec::new(4).unwrap();
            let a = dyadic_geo(ul_a, size_a, ga, fa, 4);
            let b = dyadic_geo(ul_b, size_b, gb, fb, 4);
            let m = geometric_match(&token_centers(&a, &spec).unwrap(), &token_centers(&b, &spec).unwrap()).unwrap();
            let (dx, dy) = (shift.0 as f64, shift.1 as f64);
            let m2 = geometric_match(
                &token_centers(&a.translated(dx, dy), &spec).unwrap(),
                &token_centers(&b.translated(dx, dy), &spec).unwrap(),
            ).unwrap();
            prop_assert_eq!(&m.target, &m2.target);
            prop_assert_eq!(&m.mask, &m2.mask);
            for (x, y) in m.distance.iter().zip(&m2.distance) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn far_matches_leave_the_overlap(
            ul_a in (0u32..300, 0u32..300), size_a in (16u32..300, 16u32..300),
            ul_b in (0u32..300, 0u32..300), size_b in (16u32..300, 16u32..300),
            ga in (1usize..6, 1usize..6), gb in (1usize..6, 1usize..6),
            fa in any::<bool>(), fb in any::<bool>(),
        ) {
            let spec = DownscaleSpec::new(2).unwrap();
            let a = dyadic_geo(ul_a, size_a, ga, fa, 2);
            let b = dyadic_geo(ul_b, size_b, gb, fb, 2);
            let ea = token_centers(&a, &spec).unwrap();
            let eb = token_centers(&b, &spec).unwrap();
            let m = geometric_match(&ea, &eb).unwrap();
            let s = m.threshold.unwrap();
            let ox = (a.ul_x.max(b.ul_x), a.lr_x.min(b.lr_x));
            let oy = (a.ul_y.max(b.ul_y), a.lr_y.min(b.lr_y));
            let inside = |c: [f64; 2]| c[0] >= ox.0 && c[0] <= ox.1 && c[1] >= oy.0 && c[1] <= oy.1;
            for k in 0..m.len() {
                if m.distance[k] > s {
                    prop_assert!(!inside(ea.centers[k]) || !inside(eb.centers[m.target[k]]));
                }
            }
        }
    }
}
