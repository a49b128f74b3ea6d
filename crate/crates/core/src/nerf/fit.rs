//! Radiance-field fitting from posed views.

use izoo_autograd::{cosine_lr, Adam, AdamConfig, ParamSet, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::camera::{Camera, Pose};
use super::render::{render_plain, render_rays_var, RenderConfig};
use super::sampling::{view_rays, PosedView, RaySampler, SamplingConfig};
use super::{Inr3d, NerfArch};
use crate::error::{CoreError, Result};
use crate::image::{psnr, ImageGrid};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneFitConfig {
    pub steps: usize,
    pub lr: f64,
    /// Cosine floor; equal to `lr` for a constant rate.
    pub lr_min: f64,
    pub rays_per_batch: usize,
    pub arch: NerfArch,
    pub render: RenderConfig,
    pub sampling: SamplingConfig,
    pub seed: u64,
}

impl Default for SceneFitConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 5e-4,
            lr_min: 5e-4,
            rays_per_batch: 2048,
            arch: NerfArch::default(),
            render: RenderConfig::default(),
            sampling: SamplingConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneFit {
    pub inr: Inr3d,
    /// Mean PSNR over the held-out views.
    pub psnr: f64,
    pub view_psnr: Vec<f64>,
    pub final_loss: f64,
}

/// Deterministic full-resolution rendering of one view.
pub fn render_view(inr: &Inr3d, camera: &Camera, pose: &Pose, cfg: &RenderConfig) -> Result<ImageGrid> {
    let rays = view_rays(camera, pose);
    let rgb = render_plain(inr, &rays.origins, &rays.directions, cfg)?;
    ImageGrid::from_clamped(camera.height, camera.width, rgb)
}

/// Mean PSNR of `inr` over `views`, plus the per-view values.
pub fn evaluate_views(inr: &Inr3d, camera: &Camera, views: &[PosedView], cfg: &RenderConfig) -> Result<(f64, Vec<f64>)> {
    let per: Vec<f64> = views
        .iter()
        .map(|v| psnr(&render_view(inr, camera, &v.pose, cfg)?, &v.image))
        .collect::<Result<_>>()?;
    let mean = if per.is_empty() { 0.0 } else { per.iter().sum::<f64>() / per.len() as f64 };
    Ok((mean, per))
}

pub fn fit_scene(camera: Camera, train: &[PosedView], held_out: &[PosedView], cfg: &SceneFitConfig) -> Result<SceneFit> {
    cfg.render.validate()?;
    if train.len() < 2 || held_out.is_empty() {
        return Err(CoreError::invalid("fitting needs at least two training views and one held-out view"));
    }
    if cfg.rays_per_batch == 0 || !(cfg.lr > 0.0) || !(cfg.lr_min > 0.0) || cfg.lr_min > cfg.lr {
        return Err(CoreError::invalid(format!("invalid scene fit config {cfg:?}")));
    }
    let init = Inr3d::init(cfg.arch, cfg.seed)?;
    let mut params = ParamSet::<f32>::new();
    for (i, l) in init.layers().iter().enumerate() {
        params.push(format!("layer{i}.weight"), Tensor::from_f64(&[l.out_dim, l.in_dim], &l.weight));
        params.push(format!("layer{i}.bias"), Tensor::from_f64(&[l.out_dim], &l.bias));
    }
    let mut adam = Adam::new(&params, AdamConfig::default());
    let sampler = RaySampler::new(camera, train, cfg.sampling)?;
    let mut rng = seed::rng(cfg.seed.wrapping_add(1));
    let mut final_loss = f64::NAN;

    for step in 0..cfg.steps {
        let lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min);
        let batch = sampler.sample(cfg.rays_per_batch, &mut rng);
        let n = batch.len();
        let depths = cfg.render.depths(n, Some(&mut rng));

        let mut tape = Tape::<f32>::new();
        let vars: Vec<Var> = params.values().iter().map(|t| tape.leaf(t.clone())).collect();
        let layers: Vec<(Var, Var)> = vars.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        let o = tape.constant(Tensor::from_f64(&[n, 3], &batch.origins));
        let d = tape.constant(Tensor::from_f64(&[n, 3], &batch.directions));
        let target = tape.constant(Tensor::from_f64(&[n, 3], &batch.colors));
        let pred = render_rays_var(&mut tape, &layers, cfg.arch.levels, o, d, &depths, &cfg.render)?;
        let loss = tape.mse(pred, target)?;
        let lv = tape.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(CoreError::NonFiniteLoss { iteration: step, lr });
        }
        final_loss = lv;
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor<f32>> = vars.iter().map(|&v| grads.wrt(v).clone()).collect();
        adam.step(&mut params, &g, lr)?;
    }

    let inr = Inr3d::from_layers_f32(cfg.arch.levels, params.values())?;
    let (psnr, view_psnr) = evaluate_views(&inr, &camera, held_out, &cfg.render)?;
    Ok(SceneFit {
        inr,
        psnr,
        view_psnr,
        final_loss,
    })
}
