//! RGB images with `[0, 1]` samples, plus binary PPM (P6) I/O.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

/// Per-channel mean of the normalization statistics; also the fill colour
/// for detached and padded pixels.
pub const CHANNEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Row-major `height x width x 3` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Input(format!(
                "image data has {} samples, {height}x{width}x3 needs {}",
                data.len(),
                height * width * 3
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Image { height, width, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Sub-image `[y0, y0 + h) x [x0, x0 + w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Input(format!(
                "crop {h}x{w} at ({y0}, {x0}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(Image { height: h, width: w, data })
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, x, self.pixel(y, self.width - 1 - x));
            }
        }
        out
    }

    /// Channel-first tensor `[3, H, W]` of `(x - mean) / std`.
    pub fn normalized(&self) -> Tensor {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = (self.data[p * 3 + c] - CHANNEL_MEAN[c]) / CHANNEL_STD[c];
            }
        }
        Tensor::new(vec![3, self.height, self.width], out).expect("sizes agree")
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::Input(format!("cannot read image {}: {e}", path.display())))?;
        Self::decode_ppm(&bytes).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
        let mut pos = 0;
        let mut token = || -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Input("truncated PPM header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P6" {
            return Err(Error::Input("only binary PPM (P6) is supported".into()));
        }
        let mut num =
            |what: &str| -> Result<usize> { token()?.parse().map_err(|_| Error::Input(format!("bad PPM {what}"))) };
        let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
        if maxval == 0 || maxval > 65535 {
            return Err(Error::Input(format!("bad PPM maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        let raster = &bytes[(pos + 1).min(bytes.len())..];
        let wide = maxval > 255;
        let need = width * height * 3 * if wide { 2 } else { 1 };
        if raster.len() < need {
            return Err(Error::Input("truncated PPM raster".into()));
        }
        let scale = maxval as f64;
        let data = if wide {
            raster[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale).collect()
        } else {
            raster[..need].iter().map(|&b| b as f64 / scale).collect()
        };
        Image::new(height, width, data)
    }

    /// 8-bit P6 encoding; samples are clamped and rounded.
    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_ppm())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip() {
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| (i * 14) as f64 / 255.0).collect();
        let img = Image::new(2, 3, data).unwrap();
        let back = Image::decode_ppm(&img.encode_ppm()).unwrap();
        assert_eq!(back.height, 2);
        assert_eq!(back.width, 3);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ppm_header_comments_and_errors() {
        let mut bytes = b"P6 # comment\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 128]);
        let img = Image::decode_ppm(&bytes).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 128.0 / 255.0]);
        assert!(Image::decode_ppm(b"P3\n1 1\n255\n1 2 3").is_err());
        assert!(Image::decode_ppm(b"P6\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn normalization_constants() {
        let img = Image::filled(1, 1, [1.0, CHANNEL_MEAN[1], CHANNEL_MEAN[2]]);
        let t = img.normalized();
        assert!((t.data()[0] - 2.2489).abs() < 1e-4);
        assert_eq!(t.data()[1], 0.0);
        assert_eq!(t.data()[2], 0.0);
    }

    #[test]
    fn crop_and_flip() {
        let data: Vec<f64> = (0..4 * 4 * 3).map(|i| i as f64).collect();
        let img = Image::new(4, 4, data).unwrap();
        let c = img.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.pixel(0, 0), img.pixel(1, 2));
        assert_eq!(c.pixel(1, 1), img.pixel(2, 3));
        assert!(img.crop(3, 3, 2, 2).is_err());
        assert_eq!(img.flip_horizontal().pixel(0, 0), img.pixel(0, 3));
    }
}
