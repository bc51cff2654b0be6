//! Grayscale images and the preprocessing chain: histogram equalization,
//! aspect-preserving letterbox resize, tensor conversion.

use alloc::vec;
use alloc::vec::Vec;

use libm::floor;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageGray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl ImageGray {
    pub fn new(width: usize, height: usize) -> Self {
        ImageGray {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }
}

fn round_half_up(x: f64) -> u8 {
    let v = floor(x + 0.5);
    if v < 0.0 {
        0
    } else if v > 255.0 {
        255
    } else {
        v as u8
    }
}

/// Classic global-CDF histogram equalization:
/// h(v) = round((cdf(v) - cdf_min) / (M*N - cdf_min) * 255) with cdf_min
/// the smallest nonzero CDF value. Single-intensity images pass through.
pub fn hist_equalize(img: &ImageGray) -> ImageGray {
    let total = img.pixels.len();
    if total == 0 {
        return img.clone();
    }
    let mut hist = [0usize; 256];
    for &p in &img.pixels {
        hist[p as usize] += 1;
    }
    let mut cdf = [0usize; 256];
    let mut acc = 0;
    for v in 0..256 {
        acc += hist[v];
        cdf[v] = acc;
    }
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    if cdf_min == total {
        // one intensity only: the remap is degenerate, return unchanged
        return img.clone();
    }
    let denom = (total - cdf_min) as f64;
    let mut lut = [0u8; 256];
    for v in 0..256 {
        if cdf[v] == 0 {
            continue;
        }
        lut[v] = round_half_up((cdf[v] - cdf_min) as f64 / denom * 255.0);
    }
    ImageGray {
        width: img.width,
        height: img.height,
        pixels: img.pixels.iter().map(|&p| lut[p as usize]).collect(),
    }
}

fn bilinear_sample(img: &ImageGray, x: f64, y: f64) -> f64 {
    let xc = x.clamp(0.0, (img.width - 1) as f64);
    let yc = y.clamp(0.0, (img.height - 1) as f64);
    let x0 = floor(xc) as usize;
    let y0 = floor(yc) as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let p00 = img.get(x0, y0) as f64;
    let p10 = img.get(x1, y0) as f64;
    let p01 = img.get(x0, y1) as f64;
    let p11 = img.get(x1, y1) as f64;
    p00 * (1.0 - fx) * (1.0 - fy) + p10 * fx * (1.0 - fy) + p01 * (1.0 - fx) * fy + p11 * fx * fy
}

/// Resize content to fit an S x S square without changing its aspect
/// ratio, centered on a black canvas. Odd padding puts the extra
/// row/column after the content.
pub fn resize_letterbox(img: &ImageGray, target: usize) -> Result<ImageGray> {
    if target == 0 {
        return Err(Error::Param("letterbox target must be >= 1".into()));
    }
    if img.width == 0 || img.height == 0 {
        return Err(Error::Data("cannot resize an empty image".into()));
    }
    let scale = target as f64 / img.width.max(img.height) as f64;
    let nw = (libm::round(img.width as f64 * scale) as usize).max(1);
    let nh = (libm::round(img.height as f64 * scale) as usize).max(1);
    let x_off = (target - nw) / 2;
    let y_off = (target - nh) / 2;
    let mut out = ImageGray::new(target, target);
    for oy in 0..nh {
        // pixel-center mapping of the content rectangle onto the source
        let sy = (oy as f64 + 0.5) * img.height as f64 / nh as f64 - 0.5;
        for ox in 0..nw {
            let sx = (ox as f64 + 0.5) * img.width as f64 / nw as f64 - 0.5;
            out.set(
                ox + x_off,
                oy + y_off,
                round_half_up(bilinear_sample(img, sx, sy)),
            );
        }
    }
    Ok(out)
}

/// Scale a square image to [0, 1] floats; channels = 3 replicates the
/// single plane.
pub fn to_tensor(img: &ImageGray, channels: usize) -> Result<Tensor> {
    if img.width != img.height {
        return Err(Error::Shape {
            op: "to_tensor",
            axis: "width",
            expected: img.height,
            got: img.width,
        });
    }
    if channels != 1 && channels != 3 {
        return Err(Error::Param("channels must be 1 or 3".into()));
    }
    let s = img.width;
    let plane: Vec<f64> = img.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let mut data = Vec::with_capacity(channels * s * s);
    for _ in 0..channels {
        data.extend_from_slice(&plane);
    }
    Ok(Tensor::from_vec(&[channels, s, s], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equalize_two_level_image() {
        let img = ImageGray {
            width: 2,
            height: 2,
            pixels: vec![10, 10, 20, 20],
        };
        assert_eq!(hist_equalize(&img).pixels, vec![0, 0, 255, 255]);
    }

    #[test]
    fn equalize_constant_image_unchanged() {
        let img = ImageGray {
            width: 3,
            height: 3,
            pixels: vec![42; 9],
        };
        assert_eq!(hist_equalize(&img), img);
    }

    #[test]
    fn equalize_full_ramp_fixed_point() {
        let img = ImageGray {
            width: 16,
            height: 16,
            pixels: (0..=255).collect(),
        };
        assert_eq!(hist_equalize(&img), img);
    }

    #[test]
    fn equalize_idempotent_within_rounding() {
        let mut pixels = Vec::new();
        for i in 0..64usize {
            pixels.push(((i * i) % 200) as u8);
        }
        let img = ImageGray {
            width: 8,
            height: 8,
            pixels,
        };
        let once = hist_equalize(&img);
        let twice = hist_equalize(&once);
        for (&a, &b) in once.pixels.iter().zip(&twice.pixels) {
            assert!((a as i16 - b as i16).abs() <= 1, "{a} vs {b}");
        }
    }

    #[test]
    fn letterbox_wide_panorama_geometry() {
        // 3180x1509 -> 224: content 224x106, vertical pads 59/59
        let img = ImageGray::new(3180, 1509);
        let out = resize_letterbox(&img, 224).unwrap();
        assert_eq!(out.width, 224);
        assert_eq!(out.height, 224);
        // scale and rounding checks mirror the construction
        let scale = 224.0 / 3180.0;
        assert_eq!(libm::round(1509.0 * scale) as usize, 106);
        assert_eq!((224 - 106) / 2, 59);
    }

    #[test]
    fn letterbox_square_no_padding_and_content_preserved() {
        let mut img = ImageGray::new(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                img.set(x, y, ((x + y) * 10) as u8);
            }
        }
        let out = resize_letterbox(&img, 8).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn letterbox_wide_image_pads_top_and_bottom_black() {
        let img = ImageGray {
            width: 448,
            height: 224,
            pixels: vec![200; 448 * 224],
        };
        let out = resize_letterbox(&img, 224).unwrap();
        // content 224x112, pads 56/56
        for y in 0..56 {
            for x in 0..224 {
                assert_eq!(out.get(x, y), 0);
                assert_eq!(out.get(x, 223 - y), 0);
            }
        }
        assert_eq!(out.get(100, 112), 200);
    }

    #[test]
    fn to_tensor_scaling_and_replication() {
        let img = ImageGray {
            width: 2,
            height: 2,
            pixels: vec![0, 255, 128, 64],
        };
        let t = to_tensor(&img, 1).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[1], 1.0);
        let t3 = to_tensor(&img, 3).unwrap();
        assert_eq!(t3.shape(), &[3, 2, 2]);
        assert_eq!(&t3.data()[0..4], &t3.data()[4..8]);
        let bad = ImageGray::new(2, 3);
        assert!(to_tensor(&bad, 1).is_err());
    }
}
