//! Photometric pose refinement against a frozen radiance field.

use izoo_autograd::{Adam, AdamConfig, ParamSet, Scalar, Tape, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::camera::{so3_exp_var, Camera, Pose};
use super::render::{render_rays_var, RenderConfig};
use super::sampling::{PosedView, RaySampler, SamplingConfig};
use super::Inr3d;
use crate::error::{CoreError, Result};
use crate::image::ImageGrid;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub steps: usize,
    /// Adam rate for the rotation increment (radians).
    pub lr_rot: f64,
    /// Adam rate for the translation increment (scene units).
    pub lr_trans: f64,
    /// Pixels in the fixed evaluation subset; 0 uses every pixel.
    pub rays: usize,
    pub render: RenderConfig,
    pub sampling: SamplingConfig,
    /// Consecutive loss increases tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr_rot: 2e-3,
            lr_trans: 5e-3,
            rays: 256,
            render: RenderConfig::default(),
            sampling: SamplingConfig::default(),
            patience: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineResult {
    /// Lowest-loss pose observed.
    pub pose: Pose,
    pub loss: f64,
    pub initial_loss: f64,
    pub steps_run: usize,
    pub best_step: usize,
    /// Set when the loss rose for `patience` consecutive steps.
    pub diverged: bool,
}

/// Camera-frame directions and target colors for a set of pixels.
pub struct PixelSet {
    pub dirs_cam: Vec<f64>,
    pub colors: Vec<f64>,
}

impl PixelSet {
    pub fn new(camera: &Camera, image: &ImageGrid, pixels: &[usize]) -> Self {
        let mut dirs_cam = Vec::with_capacity(pixels.len() * 3);
        let mut colors = Vec::with_capacity(pixels.len() * 3);
        for &p in pixels {
            dirs_cam.extend(camera.pixel_direction(p / camera.width, p % camera.width));
            colors.extend_from_slice(&image.data()[p * 3..p * 3 + 3]);
        }
        Self { dirs_cam, colors }
    }

    pub fn len(&self) -> usize {
        self.dirs_cam.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.dirs_cam.is_empty()
    }
}

/// MSE between target colors and the rendering from `base.perturbed(ω, v)`,
/// with `omega` and `v` each of shape `[3]`.
pub fn photometric_loss_var<T: Scalar>(
    tape: &mut Tape<T>,
    layers: &[(Var, Var)],
    levels: usize,
    base: &Pose,
    omega: Var,
    v: Var,
    pixels: &PixelSet,
    render: &RenderConfig,
) -> Result<Var> {
    let n = pixels.len();
    let r0: Vec<f64> = base.rotation.iter().flatten().copied().collect();
    let r0 = tape.constant(Tensor::from_f64(&[3, 3], &r0));
    let dr = so3_exp_var(tape, omega)?;
    let r = tape.matmul(dr, r0)?;
    let dirs_cam = tape.constant(Tensor::from_f64(&[n, 3], &pixels.dirs_cam));
    let dirs = tape.matmul_t(dirs_cam, r)?;
    let t0 = tape.constant(Tensor::from_f64(&[1, 3], &base.translation));
    let v = tape.reshape(v, &[1, 3])?;
    let origin = tape.add(t0, v)?;
    let origins = tape.broadcast_to(origin, &[n, 3])?;
    let depths = render.depths(n, None);
    let pred = render_rays_var(tape, layers, levels, origins, dirs, &depths, render)?;
    let target = tape.constant(Tensor::from_f64(&[n, 3], &pixels.colors));
    Ok(tape.mse(pred, target)?)
}

fn loss_at(inr: &Inr3d, pose: &Pose, pixels: &PixelSet, render: &RenderConfig) -> Result<f64> {
    let mut tape = Tape::<f32>::new();
    let layers = inr.bind(&mut tape, false);
    let w = tape.constant(Tensor::zeros(&[3]));
    let v = tape.constant(Tensor::zeros(&[3]));
    let l = photometric_loss_var(&mut tape, &layers, inr.levels(), pose, w, v, pixels, render)?;
    Ok(tape.value(l).item() as f64)
}

/// Choose the evaluation pixels: every pixel, or a seeded subset biased toward
/// non-white pixels.
pub fn select_pixels(camera: &Camera, image: &ImageGrid, cfg: &RefineConfig) -> Result<Vec<usize>> {
    let total = camera.width * camera.height;
    if cfg.rays == 0 || cfg.rays >= total {
        return Ok((0..total).collect());
    }
    let view = [PosedView {
        image: image.clone(),
        pose: Pose::look_at([0.0, 0.0, 1.0], [0.0; 3]),
    }];
    let sampler = RaySampler::new(*camera, &view, cfg.sampling)?;
    let batch = sampler.sample(cfg.rays, &mut seed::rng(cfg.seed));
    Ok(batch.sources.iter().map(|s| s.1).collect())
}

pub fn refine_pose(inr: &Inr3d, camera: &Camera, image: &ImageGrid, init: &Pose, cfg: &RefineConfig) -> Result<RefineResult> {
    cfg.render.validate()?;
    if image.height() != camera.height || image.width() != camera.width {
        return Err(CoreError::invalid("image does not match the camera resolution"));
    }
    let pixels = PixelSet::new(camera, image, &select_pixels(camera, image, cfg)?);
    refine_adam(inr, &pixels, init, cfg)
}

fn refine_adam(inr: &Inr3d, pixels: &PixelSet, init: &Pose, cfg: &RefineConfig) -> Result<RefineResult> {
    let mut rot = ParamSet::<f32>::new();
    rot.push("omega", Tensor::zeros(&[3]));
    let mut trans = ParamSet::<f32>::new();
    trans.push("v", Tensor::zeros(&[3]));
    let mut adam_rot = Adam::new(&rot, AdamConfig::default());
    let mut adam_trans = Adam::new(&trans, AdamConfig::default());

    let mut pose = *init;
    let mut best = (f64::INFINITY, *init, 0usize);
    let mut initial_loss = f64::NAN;
    let mut prev = f64::INFINITY;
    let mut rising = 0;
    let mut diverged = false;
    let mut steps_run = 0;

    for step in 0..cfg.steps {
        let mut tape = Tape::<f32>::new();
        let layers = inr.bind(&mut tape, false);
        let w = tape.leaf(Tensor::zeros(&[3]));
        let v = tape.leaf(Tensor::zeros(&[3]));
        let loss = photometric_loss_var(&mut tape, &layers, inr.levels(), &pose, w, v, pixels, &cfg.render)?;
        let lv = tape.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(CoreError::NonFiniteLoss { iteration: step, lr: cfg.lr_rot });
        }
        if step == 0 {
            initial_loss = lv;
        }
        if lv < best.0 {
            best = (lv, pose, step);
        }
        rising = if lv > prev { rising + 1 } else { 0 };
        prev = lv;
        if rising >= cfg.patience {
            diverged = true;
            break;
        }
        let grads = tape.backward(loss)?;
        adam_rot.step(&mut rot, &[grads.wrt(w).clone()], cfg.lr_rot)?;
        adam_trans.step(&mut trans, &[grads.wrt(v).clone()], cfg.lr_trans)?;
        let dw = rot.get(0).to_f64_vec();
        let dv = trans.get(0).to_f64_vec();
        pose = pose.perturbed([dw[0], dw[1], dw[2]], [dv[0], dv[1], dv[2]]);
        *rot.get_mut(0) = Tensor::zeros(&[3]);
        *trans.get_mut(0) = Tensor::zeros(&[3]);
        steps_run = step + 1;
    }
    if !diverged && cfg.steps > 0 {
        let lv = loss_at(inr, &pose, pixels, &cfg.render)?;
        if lv < best.0 {
            best = (lv, pose, cfg.steps);
        }
    }
    if cfg.steps == 0 {
        initial_loss = loss_at(inr, init, pixels, &cfg.render)?;
        best.0 = initial_loss;
    }
    Ok(RefineResult {
        pose: best.1,
        loss: best.0,
        initial_loss,
        steps_run,
        best_step: best.2,
        diverged,
    })
}

/// Seeded perturbation: a rotation of `rot_deg` about a uniformly random axis
/// and a shift of length `trans` in a uniformly random direction. Feed the
/// result to [`Pose::perturbed`].
pub fn random_perturbation(seed: u64, rot_deg: f64, trans: f64) -> ([f64; 3], [f64; 3]) {
    let mut rng = seed::rng(seed);
    let mut unit = || loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = super::camera::norm3(v);
        if n > 1e-3 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    };
    let axis = unit();
    let dir = unit();
    (axis.map(|a| a * rot_deg.to_radians()), dir.map(|d| d * trans))
}
