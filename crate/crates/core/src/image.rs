//! RGB images: binary PPM/PGM I/O, bilinear resizing and the encoder's
//! preprocessing (resize smallest side, crop, standardize per channel).

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::tensor::{LabelTensor, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "RGB buffer of {} bytes does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }
}

fn parse_pnm_header<'a>(bytes: &'a [u8], magic: &[u8; 2]) -> Result<(usize, usize, &'a [u8])> {
    let bad = |m: &str| Error::InvalidArgument(format!("PNM: {m}"));
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(bad(&format!(
            "expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed header"));
        }
        let v: usize = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| bad("bad header number"))?;
        fields.push(v);
    }
    if fields[2] != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((fields[0], fields[1], &bytes[pos + 1..]))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (w, h, raster) = parse_pnm_header(bytes, b"P6")?;
    if raster.len() < w * h * 3 {
        return Err(Error::Truncated {
            needed: w * h * 3,
            available: raster.len(),
        });
    }
    RgbImage::new(w, h, raster[..w * h * 3].to_vec())
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let bytes = fs::read(path.as_ref()).map_err(io_err(path.as_ref()))?;
    decode_ppm(&bytes)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    fs::write(path.as_ref(), encode_ppm(img)).map_err(io_err(path.as_ref()))
}

/// Writes an 8-bit grayscale PGM (P5).
pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::InvalidArgument("PGM raster size mismatch".into()));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path.as_ref(), out).map_err(io_err(path.as_ref()))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, raster) = parse_pnm_header(bytes, b"P5")?;
    if raster.len() < w * h {
        return Err(Error::Truncated {
            needed: w * h,
            available: raster.len(),
        });
    }
    Ok((w, h, raster[..w * h].to_vec()))
}

/// Bilinear resample of a `channels × h × w` float buffer (half-pixel centers).
pub fn resize_bilinear(src: &[f64], channels: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(n_in - 1);
        (x0, x1, x - x0 as f64)
    };
    let mut out = vec![0.0; channels * oh * ow];
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = coord(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1, fx) = coord(ox, w, ow);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(c * oh + oy) * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Per-channel mean and standard deviation of pixel values scaled to [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ImageStats {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl ImageStats {
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Result<Self> {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0usize;
        for img in images {
            for px in img.data.chunks_exact(3) {
                for c in 0..3 {
                    let v = px[c] as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += img.width * img.height;
        }
        if n == 0 {
            return Err(Error::InvalidArgument("no pixels to compute image statistics".into()));
        }
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            mean[c] = sum[c] / n as f64;
            std[c] = (sq[c] / n as f64 - mean[c] * mean[c]).max(0.0).sqrt().max(1e-6);
        }
        Ok(Self { mean, std })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Resize geometry shared by images and their label masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropPlan {
    pub resized_w: usize,
    pub resized_h: usize,
    pub left: usize,
    pub top: usize,
    pub size: usize,
}

impl CropPlan {
    pub fn new<R: Rng>(width: usize, height: usize, resize_to: usize, size: usize, mode: Mode, rng: &mut R) -> Result<Self> {
        let short = width.min(height);
        let (rw, rh) = if short == resize_to {
            (width, height)
        } else {
            let s = resize_to as f64 / short as f64;
            (
                ((width as f64 * s).round() as usize).max(resize_to),
                ((height as f64 * s).round() as usize).max(resize_to),
            )
        };
        if rw < size || rh < size {
            return Err(Error::InvalidArgument(format!(
                "image {width}x{height} resized to {rw}x{rh} is smaller than the {size}px crop"
            )));
        }
        let (left, top) = match mode {
            Mode::Eval => ((rw - size) / 2, (rh - size) / 2),
            Mode::Train => (rng.gen_range(0..=rw - size), rng.gen_range(0..=rh - size)),
        };
        Ok(Self {
            resized_w: rw,
            resized_h: rh,
            left,
            top,
            size,
        })
    }
}

/// Produces the `3 × S × S` standardized encoder input.
pub fn preprocess_image<T: Scalar, R: Rng>(
    img: &RgbImage,
    resize_to: usize,
    size: usize,
    stats: &ImageStats,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let plan = CropPlan::new(img.width, img.height, resize_to, size, mode, rng)?;
    let (w, h) = (img.width, img.height);
    let mut planar = vec![0.0f64; 3 * w * h];
    for (i, px) in img.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planar[c * w * h + i] = px[c] as f64 / 255.0;
        }
    }
    let resized = resize_bilinear(&planar, 3, h, w, plan.resized_h, plan.resized_w);
    Ok(Tensor::from_fn(&[3, size, size], |i| {
        let c = i / (size * size);
        let y = (i / size) % size;
        let x = i % size;
        let v = resized[(c * plan.resized_h + plan.top + y) * plan.resized_w + plan.left + x];
        T::from_f64((v - stats.mean[c]) / stats.std[c])
    }))
}

/// Applies the same resize (nearest) and crop to an `H × W` label map.
pub fn transform_labels(labels: &LabelTensor, plan: &CropPlan) -> Result<LabelTensor> {
    if labels.shape.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "label map must be H x W, got {:?}",
            labels.shape
        )));
    }
    let (h, w) = (labels.shape[0], labels.shape[1]);
    let s = plan.size;
    let data = (0..s * s)
        .map(|i| {
            let y = plan.top + i / s;
            let x = plan.left + i % s;
            let sy = (((y as f64 + 0.5) * h as f64 / plan.resized_h as f64) as usize).min(h - 1);
            let sx = (((x as f64 + 0.5) * w as f64 / plan.resized_w as f64) as usize).min(w - 1);
            labels.data[sy * w + sx]
        })
        .collect();
    LabelTensor::new(vec![s, s], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ppm_round_trip() {
        let mut img = RgbImage::filled(3, 2, [1, 2, 3]);
        img.set_pixel(2, 1, [250, 0, 9]);
        let back = decode_ppm(&encode_ppm(&img)).unwrap();
        assert_eq!(back, img);
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
    }

    #[test]
    fn eval_at_target_size_only_standardizes() {
        let img = RgbImage::filled(4, 4, [51, 102, 204]);
        let stats = ImageStats {
            mean: [0.1, 0.2, 0.3],
            std: [0.5, 0.5, 0.5],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = preprocess_image(&img, 4, 4, &stats, Mode::Eval, &mut rng).unwrap();
        for c in 0..3 {
            let raw = [51.0, 102.0, 204.0][c] / 255.0;
            let expected = (raw - stats.mean[c]) / stats.std[c];
            for y in 0..4 {
                for x in 0..4 {
                    assert!((t.at(&[c, y, x]) - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn train_crops_are_seed_determined() {
        let img = RgbImage::new(20, 10, (0..600).map(|i| (i % 251) as u8).collect()).unwrap();
        let stats = ImageStats::default();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            preprocess_image::<f32, _>(&img, 12, 8, &stats, Mode::Train, &mut rng).unwrap()
        };
        assert_eq!(run(7), run(7));
    }

    #[test]
    fn undersized_rejected() {
        let img = RgbImage::filled(8, 8, [0, 0, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(preprocess_image::<f32, _>(&img, 8, 16, &ImageStats::default(), Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn resize_constant_stays_constant() {
        let src = vec![0.25; 2 * 5 * 7];
        let out = resize_bilinear(&src, 2, 5, 7, 9, 3);
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn identity_label_transform() {
        let labels = LabelTensor::new(vec![3, 3], (0..9).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = CropPlan::new(3, 3, 3, 3, Mode::Eval, &mut rng).unwrap();
        assert_eq!(transform_labels(&labels, &plan).unwrap(), labels);
    }
}
