//! Grayscale image files: binary PGM (P5) and 8-bit PNG in, PGM / PPM /
//! PNG out. 16-bit sources are rescaled to 8 bits, color PNG is
//! luma-converted.

use std::fs;
use std::path::Path;

use densepipe_core::error::{Error, Result};
use densepipe_core::gradcam::OverlayImage;
use densepipe_core::image::ImageGray;

fn round_half_up(x: f64) -> u8 {
    (x + 0.5).floor().clamp(0.0, 255.0) as u8
}

// ---------------------------------------------------------------------------
// PGM (P5)
// ---------------------------------------------------------------------------

struct PgmScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PgmScanner<'a> {
    /// Next whitespace-delimited token, skipping `#` comment lines.
    fn token(&mut self) -> Result<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Data("pgm: truncated header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data("pgm: bad header number".into()))
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<ImageGray> {
    let mut sc = PgmScanner { bytes, pos: 0 };
    if sc.token()? != b"P5" {
        return Err(Error::Data("pgm: not a binary P5 file".into()));
    }
    let width = sc.number()?;
    let height = sc.number()?;
    let maxval = sc.number()?;
    if width == 0 || height == 0 {
        return Err(Error::Data("pgm: zero dimension".into()));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Data(format!("pgm: bad maxval {maxval}")));
    }
    let count = width
        .checked_mul(height)
        .ok_or_else(|| Error::Data("pgm: dimension overflow".into()))?;
    // exactly one whitespace byte separates header from raster
    sc.pos += 1;
    let wide = maxval > 255;
    let bytes_per = if wide { 2 } else { 1 };
    let raster = bytes
        .get(sc.pos..sc.pos + count * bytes_per)
        .ok_or_else(|| Error::Data("pgm: truncated pixel data".into()))?;
    let pixels = if wide {
        raster
            .chunks_exact(2)
            .map(|c| {
                let v = u16::from_be_bytes([c[0], c[1]]) as f64;
                round_half_up(v * 255.0 / maxval as f64)
            })
            .collect()
    } else if maxval == 255 {
        raster.to_vec()
    } else {
        raster
            .iter()
            .map(|&v| round_half_up(v as f64 * 255.0 / maxval as f64))
            .collect()
    };
    Ok(ImageGray {
        width,
        height,
        pixels,
    })
}

pub fn encode_pgm(img: &ImageGray) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Binary PPM (P6) for RGB overlays.
pub fn encode_ppm(img: &OverlayImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.rgb);
    out
}

// ---------------------------------------------------------------------------
// PNG (via the `image` crate)
// ---------------------------------------------------------------------------

fn decode_png(bytes: &[u8]) -> Result<ImageGray> {
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("png: {e}")))?;
    let (width, height) = (decoded.width() as usize, decoded.height() as usize);
    let pixels = match decoded {
        image::DynamicImage::ImageLuma8(img) => img.into_raw(),
        image::DynamicImage::ImageLuma16(img) => img
            .into_raw()
            .iter()
            .map(|&v| round_half_up(v as f64 * 255.0 / 65535.0))
            .collect(),
        other => other
            .to_rgb8()
            .pixels()
            .map(|p| {
                round_half_up(0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64)
            })
            .collect(),
    };
    Ok(ImageGray {
        width,
        height,
        pixels,
    })
}

// ---------------------------------------------------------------------------
// file-level API
// ---------------------------------------------------------------------------

/// Decode by magic bytes: "P5" = PGM, \x89PNG = PNG.
pub fn decode_image(bytes: &[u8]) -> Result<ImageGray> {
    if bytes.starts_with(b"P5") {
        decode_pgm(bytes)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(bytes)
    } else {
        Err(Error::Data("unknown image format (want P5 PGM or PNG)".into()))
    }
}

pub fn load_image(path: &Path) -> Result<ImageGray> {
    let bytes =
        fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    decode_image(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn save_pgm(path: &Path, img: &ImageGray) -> Result<()> {
    fs::write(path, encode_pgm(img))
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

/// Write an RGB overlay: PNG when the extension asks for it, PPM otherwise.
pub fn save_overlay(path: &Path, img: &OverlayImage) -> Result<()> {
    if path.extension().and_then(|e| e.to_str()) == Some("png") {
        let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.rgb.clone())
            .ok_or_else(|| Error::Data("overlay buffer size mismatch".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
    } else {
        fs::write(path, encode_ppm(img))
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_byte_level_decode() {
        // 2x2, maxval 255, pixels 00 40 80 FF
        let bytes = b"P5\n2 2\n255\n\x00\x40\x80\xFF";
        let img = decode_pgm(bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.pixels, vec![0, 64, 128, 255]);
    }

    #[test]
    fn pgm_comments_and_whitespace() {
        let bytes = b"P5 # binary gray\n# another comment\n 2\t1 \n255\n\x01\x02";
        let img = decode_pgm(bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.pixels, vec![1, 2]);
    }

    #[test]
    fn pgm_sixteen_bit_rescale() {
        // maxval 65535: full scale -> 255, half scale -> 128 (half-up)
        let mut bytes = b"P5\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&0xFFFFu16.to_be_bytes());
        bytes.extend_from_slice(&0x8000u16.to_be_bytes());
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.pixels[0], 255);
        assert_eq!(img.pixels[1], 128);
    }

    #[test]
    fn pgm_roundtrip() {
        let img = ImageGray {
            width: 3,
            height: 2,
            pixels: vec![0, 50, 100, 150, 200, 255],
        };
        assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
    }

    #[test]
    fn truncation_and_garbage_are_errors() {
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00\x40").is_err());
        assert!(decode_image(b"hello world, not an image").is_err());
        assert!(decode_pgm(b"P5\n2").is_err());
    }

    #[test]
    fn png_gray_roundtrip_and_color_luma() {
        let gray = image::GrayImage::from_raw(2, 1, vec![10, 200]).unwrap();
        let mut buf = std::io::Cursor::new(Vec::new());
        gray.write_to(&mut buf, image::ImageFormat::Png).unwrap();
        let img = decode_image(buf.get_ref()).unwrap();
        assert_eq!(img.pixels, vec![10, 200]);

        let rgb = image::RgbImage::from_raw(1, 1, vec![255, 0, 0]).unwrap();
        let mut buf = std::io::Cursor::new(Vec::new());
        rgb.write_to(&mut buf, image::ImageFormat::Png).unwrap();
        let img = decode_image(buf.get_ref()).unwrap();
        // 0.299 * 255 = 76.245 -> 76
        assert_eq!(img.pixels, vec![76]);
    }

    #[test]
    fn ppm_layout() {
        let o = OverlayImage {
            width: 1,
            height: 1,
            rgb: vec![1, 2, 3],
        };
        assert_eq!(encode_ppm(&o), b"P6\n1 1\n255\n\x01\x02\x03");
    }
}
