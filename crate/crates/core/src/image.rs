//! RGB grids in `[0, 1]`, PNG codec and PSNR.

use std::path::Path;

use crate::error::{CoreError, Result};

/// PSNR reported for identical images instead of infinity.
pub const PSNR_CAP: f64 = 99.0;

/// `height × width × 3` row-major RGB values.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    rgb: Vec<f64>,
}

impl ImageGrid {
    /// Values must lie in `[0, 1]`.
    pub fn new(height: usize, width: usize, rgb: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CoreError::invalid("image must be non-empty"));
        }
        if rgb.len() != height * width * 3 {
            return Err(CoreError::invalid(format!(
                "expected {} values for a {height}x{width} image, got {}",
                height * width * 3,
                rgb.len()
            )));
        }
        if let Some(v) = rgb.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CoreError::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, rgb })
    }

    /// Build from arbitrary reals, clamping into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, rgb: Vec<f64>) -> Result<Self> {
        Self::new(height, width, rgb.into_iter().map(clamp01).collect())
    }

    pub fn filled(height: usize, width: usize, color: [f64; 3]) -> Result<Self> {
        let rgb = (0..height * width).flat_map(|_| color).collect();
        Self::new(height, width, rgb)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.rgb
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let o = (row * self.width + col) * 3;
        [self.rgb[o], self.rgb[o + 1], self.rgb[o + 2]]
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => CoreError::io(path, io),
                other => CoreError::Image(format!("{}: {other}", path.display())),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let rgb = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Self::new(h as usize, w as usize, rgb)
    }

    /// 8-bit quantization happens only here.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let raw: Vec<u8> = self.rgb.iter().map(|&v| quantize(v)).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| CoreError::Image("buffer size mismatch".into()))?;
        let mut out = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| CoreError::Image(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
    }
}

pub fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn quantize(v: f64) -> u8 {
    (clamp01(v) * 255.0).round() as u8
}

pub fn mse(pred: &[f64], gt: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), gt.len());
    let s: f64 = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let d = clamp01(p) - clamp01(g);
            d * d
        })
        .sum();
    s / pred.len() as f64
}

/// `−10·log10(MSE)` for unit peak, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

/// PSNR in dB after clamping both images to `[0, 1]`.
pub fn psnr(pred: &ImageGrid, gt: &ImageGrid) -> Result<f64> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(CoreError::invalid(format!(
            "psnr: shape {}x{} vs {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    Ok(psnr_from_mse(mse(&pred.rgb, &gt.rgb)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_reference_values() {
        assert!((psnr_from_mse(1e-3) - 30.0).abs() < 1e-12);
        assert!((psnr_from_mse(1e-2) - 20.0).abs() < 1e-12);
        let a = ImageGrid::filled(4, 4, [0.5, 0.5, 0.5]).unwrap();
        let b = ImageGrid::filled(4, 4, [0.6, 0.6, 0.6]).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let a = ImageGrid::filled(4, 4, [0.5; 3]).unwrap();
        let b = ImageGrid::filled(4, 2, [0.5; 3]).unwrap();
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(ImageGrid::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(ImageGrid::new(0, 1, vec![]).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        use rand::{Rng, SeedableRng};
        let gt = ImageGrid::new(
            16,
            16,
            (0..768).map(|i| 0.2 + 0.6 * ((i % 7) as f64 / 6.0)).collect(),
        )
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let noise: Vec<f64> = (0..768).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut prev = f64::INFINITY;
        for level in 1..=20 {
            let s = level as f64 * 0.01;
            let pred: Vec<f64> = gt.data().iter().zip(&noise).map(|(g, n)| g + s * n).collect();
            let p = psnr(&ImageGrid::from_clamped(16, 16, pred).unwrap(), &gt).unwrap();
            assert!(p < prev, "level {level}: {p} !< {prev}");
            prev = p;
        }
    }

    #[test]
    fn png_round_trip_is_quantized() {
        let img = ImageGrid::new(1, 2, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        img.save_png(&p).unwrap();
        let back = ImageGrid::load_png(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
