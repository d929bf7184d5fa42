//! RGB images with `f64` channels in `[0, 1]`, plus PPM and GLTD ingestion.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{gltd, Tensor};

pub const CHANNELS: usize = 3;

/// Interleaved RGB image, row-major, `height x width x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::shape(
                "Image::new",
                format!(
                    "{height}x{width}x3 needs {} values, got {}",
                    height * width * CHANNELS,
                    data.len()
                ),
            ));
        }
        if height == 0 || width == 0 {
            return Err(Error::invalid("image must be non-empty"));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Cuts the image into non-overlapping `r x r` patches, one row per patch
    /// in row-major patch order, each row laid out as `(py, px, channel)`.
    pub fn patchify(&self, r: usize) -> Result<Tensor> {
        if r == 0 || !self.height.is_multiple_of(r) || !self.width.is_multiple_of(r) {
            return Err(Error::invalid(format!(
                "{}x{} image is not divisible into {r}x{r} patches",
                self.height, self.width
            )));
        }
        let (gh, gw) = (self.height / r, self.width / r);
        let dim = r * r * CHANNELS;
        let mut out = Vec::with_capacity(gh * gw * dim);
        for i in 0..gh {
            for j in 0..gw {
                for py in 0..r {
                    let start = ((i * r + py) * self.width + j * r) * CHANNELS;
                    out.extend_from_slice(&self.data[start..start + r * CHANNELS]);
                }
            }
        }
        Tensor::new(vec![gh * gw, dim], out)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.height, self.width, CHANNELS], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[h, w, 3] => Image::new(h, w, t.data().to_vec()),
            s => Err(Error::Format(format!("expected an HxWx3 tensor, got {s:?}"))),
        }
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PPM header".into()));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("bad PPM header".into()))?);
        }
        if fields[0] != "P6" {
            return Err(Error::Format(format!("unsupported PPM magic {}", fields[0])));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PPM number {s}")))
        };
        let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
        }
        pos += 1; // single whitespace byte after maxval
        let n = width * height * CHANNELS;
        let raster = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::Format("truncated PPM raster".into()))?;
        let data = raster.iter().map(|&b| b as f64 / maxval as f64).collect();
        Image::new(height, width, data)
    }

    /// Loads a `.ppm` file or a single-record `.gltd` file.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(gltd::MAGIC) {
            let (t, _) = gltd::decode(&bytes)?;
            Image::from_tensor(&t)
        } else {
            Image::from_ppm(&bytes)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_on_8bit_values() {
        let img = Image::from_fn(3, 5, |y, x| [(y * 40) as f64 / 255.0, (x * 50) as f64 / 255.0, 1.0]);
        let back = Image::from_ppm(&img.to_ppm()).unwrap();
        assert!(img.data().iter().zip(back.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn ppm_header_with_comment() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 51]);
        let img = Image::from_ppm(&bytes).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.2]);
    }

    #[test]
    fn patchify_order() {
        let img = Image::from_fn(4, 4, |y, x| [(y * 4 + x) as f64, 0.0, 0.0]);
        let p = img.patchify(2).unwrap();
        assert_eq!(p.shape(), &[4, 12]);
        // second patch (top-right) starts at pixel (0, 2)
        assert_eq!(p.row(1)[0], 2.0);
        assert_eq!(p.row(1)[3], 3.0);
        assert_eq!(p.row(1)[6], 6.0);
        // third patch (bottom-left) starts at pixel (2, 0)
        assert_eq!(p.row(2)[0], 8.0);
        assert!(img.patchify(3).is_err());
    }
}
