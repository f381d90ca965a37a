use std::path::Path;

use image::DynamicImage;

use crate::error::{HtrError, Result};
use crate::tensor::Tensor;

/// Fixed line height fed to the network.
pub const LINE_HEIGHT: usize = 32;
/// Narrowest width kept after rescaling, so the network emits at least one frame.
pub const MIN_WIDTH: usize = 8;

/// A grayscale text-line image with values in `[0, 1]`, bright ink on a dark
/// background.
#[derive(Debug, Clone, PartialEq)]
pub struct LineImage {
    /// Shape `[1, H, W]`.
    pub pixels: Tensor<f32>,
    pub original_height: usize,
    pub original_width: usize,
    pub transcript: Option<String>,
}

impl LineImage {
    pub fn from_pixels(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(HtrError::Format(format!("degenerate {height}x{width} image")));
        }
        let pixels = Tensor::new(vec![1, height, width], data)?;
        Ok(Self { pixels, original_height: height, original_width: width, transcript: None })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn data(&self) -> &[f32] {
        self.pixels.data()
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels.data()[y * self.width() + x]
    }

    pub fn with_transcript(mut self, text: impl Into<String>) -> Self {
        self.transcript = Some(text.into());
        self
    }
}

/// Inverts 8-bit intensities into `[0, 1]`: `p ↦ (255 − p) / 255`.
pub fn normalize_gray(width: usize, height: usize, raw: &[u8]) -> Result<LineImage> {
    if raw.len() != width * height {
        return Err(HtrError::Format(format!("{} bytes for a {width}x{height} image", raw.len())));
    }
    let data = raw.iter().map(|&p| (255 - p) as f32 / 255.0).collect();
    LineImage::from_pixels(height, width, data)
}

/// Accepts only single-channel 8-bit images.
pub fn load_and_normalize(img: &DynamicImage) -> Result<LineImage> {
    match img {
        DynamicImage::ImageLuma8(buf) => normalize_gray(buf.width() as usize, buf.height() as usize, buf.as_raw()),
        other => Err(HtrError::Format(format!("expected 8-bit single-channel image, got {:?}", other.color()))),
    }
}

/// Inverse of [`normalize_gray`]; exact for images that came from 8-bit data.
pub fn denormalize(img: &LineImage) -> Vec<u8> {
    img.data().iter().map(|&v| 255 - (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn read_line_image(path: &Path) -> Result<LineImage> {
    let img = image::open(path).map_err(|e| HtrError::Format(format!("{}: {e}", path.display())))?;
    load_and_normalize(&img)
}

/// Writes raw 8-bit gray data as binary PGM (P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, raw: &[u8]) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(raw);
    crate::training::write_atomic(path, &bytes)
}

/// Samples `img` at real-valued coordinates with bilinear weights; points
/// outside the image read as 0 (background).
pub(crate) fn sample_bilinear(img: &LineImage, y: f64, x: f64) -> f32 {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let px = |yy: isize, xx: isize| -> f32 {
        if yy < 0 || xx < 0 || yy >= h || xx >= w {
            0.0
        } else {
            img.get(yy as usize, xx as usize)
        }
    };
    let mut v = 0.0;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let wgt = wy * wx;
            if wgt != 0.0 {
                v += wgt * px(y0 + dy, x0 + dx);
            }
        }
    }
    v
}

/// Rescales to `target_h` rows keeping the aspect ratio (width
/// `max(8, round(W·target_h/H))`) with bilinear interpolation.
pub fn rescale_height(img: &LineImage, target_h: usize) -> Result<LineImage> {
    let (h, w) = (img.height(), img.width());
    if h == 0 || w == 0 || target_h == 0 {
        return Err(HtrError::Format(format!("cannot rescale a {h}x{w} image")));
    }
    let new_w = ((w as f64 * target_h as f64 / h as f64).round() as usize).max(MIN_WIDTH);
    if new_w == w && target_h == h {
        return Ok(img.clone());
    }
    let (sy, sx) = (h as f64 / target_h as f64, w as f64 / new_w as f64);
    let mut data = Vec::with_capacity(target_h * new_w);
    for y in 0..target_h {
        // Half-pixel centers, clamped so edge rows do not fade into the background.
        let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        for x in 0..new_w {
            let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            data.push(sample_bilinear(img, src_y, src_x).clamp(0.0, 1.0));
        }
    }
    let mut out = LineImage::from_pixels(target_h, new_w, data)?;
    out.original_height = img.original_height;
    out.original_width = img.original_width;
    out.transcript = img.transcript.clone();
    Ok(out)
}

/// Loads a line image from disk, inverts it and rescales it to the network height.
pub fn prepare_line_image(path: &Path) -> Result<LineImage> {
    rescale_height(&read_line_image(path)?, LINE_HEIGHT)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inversion_endpoints() {
        let img = normalize_gray(3, 1, &[255, 0, 128]).unwrap();
        assert_eq!(img.data()[0], 0.0);
        assert_eq!(img.data()[1], 1.0);
        assert!((img.data()[2] - 127.0 / 255.0).abs() < 1e-7);
        assert!((img.data()[2] - 0.498).abs() < 1e-3);
    }

    #[test]
    fn normalization_round_trips_every_byte() {
        let raw: Vec<u8> = (0..=255).collect();
        let img = normalize_gray(256, 1, &raw).unwrap();
        assert_eq!(denormalize(&img), raw);
    }

    #[test]
    fn multi_channel_is_rejected() {
        let rgb = DynamicImage::new_rgb8(4, 4);
        assert!(matches!(load_and_normalize(&rgb), Err(HtrError::Format(_))));
        let gray = DynamicImage::new_luma8(4, 4);
        assert!(load_and_normalize(&gray).is_ok());
    }

    #[test]
    fn rescale_widths() {
        let mk = |h: usize, w: usize| LineImage::from_pixels(h, w, vec![0.5; h * w]).unwrap();
        let r = rescale_height(&mk(128, 1751), 32).unwrap();
        assert_eq!((r.height(), r.width()), (32, 438));
        let src = mk(32, 100);
        let r = rescale_height(&src, 32).unwrap();
        assert_eq!(r, src);
        let r = rescale_height(&mk(64, 6), 32).unwrap();
        assert_eq!((r.height(), r.width()), (32, 8));
        assert!(LineImage::from_pixels(0, 5, vec![]).is_err());
    }

    #[test]
    fn rescale_stays_in_unit_range() {
        let data: Vec<f32> = (0..40 * 90).map(|i| ((i * 7919) % 256) as f32 / 255.0).collect();
        let img = LineImage::from_pixels(40, 90, data).unwrap();
        let r = rescale_height(&img, 32).unwrap();
        assert!(r.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        let raw: Vec<u8> = (0..24).map(|i| (i * 10) as u8).collect();
        write_pgm(&p, 6, 4, &raw).unwrap();
        let img = read_line_image(&p).unwrap();
        assert_eq!((img.height(), img.width()), (4, 6));
        assert_eq!(denormalize(&img), raw);
    }
}
