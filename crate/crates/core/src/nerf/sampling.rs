//! Training-ray selection with a bias toward non-white pixels.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::camera::{Camera, Pose};
use crate::error::{CoreError, Result};
use crate::image::ImageGrid;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct PosedView {
    pub image: ImageGrid,
    pub pose: Pose,
}

/// Flat `R×3` ray data with target colors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RayBatch {
    pub origins: Vec<f64>,
    pub directions: Vec<f64>,
    pub colors: Vec<f64>,
    /// `(view, pixel)` of each ray.
    pub sources: Vec<(usize, usize)>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.directions.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    fn push(&mut self, origin: [f64; 3], dir: [f64; 3], color: [f64; 3], source: (usize, usize)) {
        self.origins.extend_from_slice(&origin);
        self.directions.extend_from_slice(&dir);
        self.colors.extend_from_slice(&color);
        self.sources.push(source);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// A pixel is white when every channel exceeds this.
    pub white_threshold: f64,
    /// Share of each batch drawn from non-white pixels only.
    pub nonwhite_fraction: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            white_threshold: 0.99,
            nonwhite_fraction: 0.5,
        }
    }
}

/// All rays of one view, in pixel order.
pub fn view_rays(camera: &Camera, pose: &Pose) -> RayBatch {
    let mut b = RayBatch::default();
    for p in 0..camera.width * camera.height {
        let (o, d) = camera.ray(pose, p);
        b.push(o, d, [0.0; 3], (0, p));
    }
    b
}

/// Reusable sampler over a fixed set of training views.
pub struct RaySampler<'a> {
    camera: Camera,
    views: &'a [PosedView],
    nonwhite: Vec<(usize, usize)>,
    total: usize,
    cfg: SamplingConfig,
}

impl<'a> RaySampler<'a> {
    pub fn new(camera: Camera, views: &'a [PosedView], cfg: SamplingConfig) -> Result<Self> {
        if views.is_empty() {
            return Err(CoreError::invalid("no views to sample from"));
        }
        if !(0.0..=1.0).contains(&cfg.nonwhite_fraction) {
            return Err(CoreError::invalid("non-white fraction must be in [0, 1]"));
        }
        let n = camera.width * camera.height;
        let mut nonwhite = Vec::new();
        for (v, view) in views.iter().enumerate() {
            if view.image.height() != camera.height || view.image.width() != camera.width {
                return Err(CoreError::invalid(format!("view {v} does not match the camera resolution")));
            }
            for p in 0..n {
                let px = view.image.data()[p * 3..p * 3 + 3].iter();
                if !px.clone().all(|&c| c > cfg.white_threshold) {
                    nonwhite.push((v, p));
                }
            }
        }
        Ok(Self {
            camera,
            views,
            nonwhite,
            total: n * views.len(),
            cfg,
        })
    }

    pub fn nonwhite_pixels(&self) -> &[(usize, usize)] {
        &self.nonwhite
    }

    /// `⌊ρ·n⌋` rays from non-white pixels, the rest uniform over every pixel.
    /// Falls back to uniform sampling when every pixel is white.
    pub fn sample(&self, n_rays: usize, rng: &mut seed::Rng) -> RayBatch {
        let focused = if self.nonwhite.is_empty() {
            0
        } else {
            (self.cfg.nonwhite_fraction * n_rays as f64).floor() as usize
        };
        let per_view = self.camera.width * self.camera.height;
        let mut batch = RayBatch::default();
        for i in 0..n_rays {
            let (v, p) = if i < focused {
                self.nonwhite[rng.gen_range(0..self.nonwhite.len())]
            } else {
                let k = rng.gen_range(0..self.total);
                (k / per_view, k % per_view)
            };
            let view = &self.views[v];
            let (o, d) = self.camera.ray(&view.pose, p);
            let c = &view.image.data()[p * 3..p * 3 + 3];
            batch.push(o, d, [c[0], c[1], c[2]], (v, p));
        }
        batch
    }

    pub fn is_white(&self, view: usize, pixel: usize) -> bool {
        self.views[view].image.data()[pixel * 3..pixel * 3 + 3]
            .iter()
            .all(|&c| c > self.cfg.white_threshold)
    }
}

pub fn adaptive_sample_rays(
    camera: Camera,
    views: &[PosedView],
    n_rays: usize,
    cfg: SamplingConfig,
    seed: u64,
) -> Result<RayBatch> {
    if n_rays == 0 {
        return Err(CoreError::invalid("n_rays must be at least 1"));
    }
    let sampler = RaySampler::new(camera, views, cfg)?;
    Ok(sampler.sample(n_rays, &mut seed::rng(seed)))
}
