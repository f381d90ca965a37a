use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::{sample_bilinear, LineImage};
use crate::error::{HtrError, Result};

/// Standard deviations of the Gaussian distortion parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Pixels, applied independently to x and y.
    pub translation_sigma: f64,
    /// Degrees.
    pub rotation_sigma: f64,
    /// Horizontal shear factor.
    pub shear_sigma: f64,
    /// Relative deviation of the isotropic scale around 1.
    pub scale_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { translation_sigma: 2.0, rotation_sigma: 1.5, shear_sigma: 0.1, scale_sigma: 0.05 }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { translation_sigma: 0.0, rotation_sigma: 0.0, shear_sigma: 0.0, scale_sigma: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let s = [self.translation_sigma, self.rotation_sigma, self.shear_sigma, self.scale_sigma];
        if s.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(HtrError::Config(format!("augmentation sigmas must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// One concrete distortion: translation, rotation, shear and scaling about
/// the image center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub tx: f64,
    pub ty: f64,
    pub rotation_deg: f64,
    pub shear: f64,
    pub scale: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams { tx: 0.0, ty: 0.0, rotation_deg: 0.0, shear: 0.0, scale: 1.0 };

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { tx, ty, ..Self::IDENTITY }
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let mut draw = |sigma: f64| Normal::new(0.0, sigma).expect("validated sigma").sample(rng);
        Self {
            tx: draw(cfg.translation_sigma),
            ty: draw(cfg.translation_sigma),
            rotation_deg: draw(cfg.rotation_sigma),
            shear: draw(cfg.shear_sigma),
            scale: 1.0 + draw(cfg.scale_sigma),
        }
    }

    /// Linear part `R(θ)·Shear·Scale`, row-major 2×2 acting on `(x, y)`.
    fn linear(&self) -> [f64; 4] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let k = self.scale;
        // [c -s; s c] · [1 sh; 0 1] · k
        [c * k, (c * self.shear - s) * k, s * k, (s * self.shear + c) * k]
    }
}

/// Resamples `img` under `params` (inverse mapping, bilinear, zero fill).
pub fn warp(img: &LineImage, params: &AffineParams) -> LineImage {
    if *params == AffineParams::IDENTITY {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let [a, b, c, d] = params.linear();
    let det = a * d - b * c;
    let inv = [d / det, -b / det, -c / det, a / det];
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx - params.tx;
            let dy = y as f64 - cy - params.ty;
            let sx = inv[0] * dx + inv[1] * dy + cx;
            let sy = inv[2] * dx + inv[3] * dy + cy;
            data.push(sample_bilinear(img, sy, sx).clamp(0.0, 1.0));
        }
    }
    let mut out = img.clone();
    out.pixels = crate::tensor::Tensor::new(vec![1, h, w], data).expect("same shape");
    out
}

/// Applies a freshly sampled random distortion.
pub fn augment<R: Rng + ?Sized>(img: &LineImage, cfg: &AugmentConfig, rng: &mut R) -> Result<LineImage> {
    cfg.validate()?;
    let params = AffineParams::sample(cfg, rng);
    Ok(warp(img, &params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noisy(h: usize, w: usize) -> LineImage {
        let data = (0..h * w).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        LineImage::from_pixels(h, w, data).unwrap()
    }

    #[test]
    fn zero_sigmas_are_identity() {
        let img = noisy(32, 50);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&img, &AugmentConfig::none(), &mut rng).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn translation_moves_a_delta() {
        let mut data = vec![0.0; 9 * 11];
        data[4 * 11 + 3] = 1.0;
        let img = LineImage::from_pixels(9, 11, data).unwrap();
        let out = warp(&img, &AffineParams::translation(2.0, 0.0));
        assert_eq!(out.get(4, 5), 1.0);
        let mass: f32 = out.data().iter().sum();
        assert!((mass - 1.0).abs() < 1e-6);
    }

    #[test]
    fn same_seed_same_output() {
        let img = noisy(32, 64);
        let cfg = AugmentConfig::default();
        let a = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn negative_sigma_rejected() {
        let cfg = AugmentConfig { rotation_sigma: -1.0, ..AugmentConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(augment(&noisy(4, 4), &cfg, &mut rng).is_err());
    }
}
