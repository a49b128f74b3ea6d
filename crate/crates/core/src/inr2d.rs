//! Sine-activated image INRs: coordinate grids, normalization, init, querying and fitting.

use izoo_autograd::{cosine_lr, Adam, AdamConfig, ParamSet, Scalar, Tape, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::{psnr, ImageGrid};
use crate::seed;

pub const DEFAULT_W0: f64 = 30.0;

/// Per-channel affine normalization applied to RGB targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormConstants {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormConstants {
    pub const IMAGENET: Self = Self {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    pub const IDENTITY: Self = Self {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    pub fn new(mean: [f64; 3], std: [f64; 3]) -> Result<Self> {
        if std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
            return Err(CoreError::invalid(format!(
                "normalization needs finite mean and positive std, got {mean:?} / {std:?}"
            )));
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, rgb: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|c| (rgb[c] - self.mean[c]) / self.std[c])
    }

    pub fn denormalize(&self, v: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|c| v[c] * self.std[c] + self.mean[c])
    }

    /// Differentiable `v·std + mean` on an `[.., 3]` variable.
    pub fn denormalize_var<T: Scalar>(&self, tape: &mut Tape<T>, v: Var) -> Result<Var> {
        let s = tape.constant(Tensor::from_f64(&[3], &self.std));
        let m = tape.constant(Tensor::from_f64(&[3], &self.mean));
        let scaled = tape.mul(v, s)?;
        Ok(tape.add(scaled, m)?)
    }

    /// Differentiable `(u − mean)/std` on an `[.., 3]` variable.
    pub fn normalize_var<T: Scalar>(&self, tape: &mut Tape<T>, u: Var) -> Result<Var> {
        let inv: Vec<f64> = self.std.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f64> = (0..3).map(|c| -self.mean[c] / self.std[c]).collect();
        let s = tape.constant(Tensor::from_f64(&[3], &inv));
        let m = tape.constant(Tensor::from_f64(&[3], &shift));
        let scaled = tape.mul(u, s)?;
        Ok(tape.add(scaled, m)?)
    }
}

impl Default for NormConstants {
    fn default() -> Self {
        Self::IMAGENET
    }
}

/// MLP shape; `depth` counts linear layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub depth: usize,
    pub width: usize,
    pub w0: f64,
}

impl Arch {
    pub fn new(depth: usize, width: usize) -> Self {
        Self {
            depth,
            width,
            w0: DEFAULT_W0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "cifar" => Ok(Self::new(3, 64)),
            "imagenet" => Ok(Self::new(4, 256)),
            "cityscapes" => Ok(Self::new(5, 256)),
            other => Err(CoreError::invalid(format!(
                "unknown preset {other:?} (expected cifar, imagenet or cityscapes)"
            ))),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.width == 0 || !(self.w0 > 0.0) {
            return Err(CoreError::invalid(format!(
                "architecture needs depth >= 2, width >= 1, w0 > 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Dense layer `y = W x + b` with `W` stored `out_dim × in_dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Weights and biases drawn from `U(−bound, bound)`, rounded to f32.
    pub fn uniform(in_dim: usize, out_dim: usize, bound: f64, rng: &mut seed::Rng) -> Self {
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| rng.gen_range(-bound..=bound) as f32 as f64)
                .collect()
        };
        let weight = draw(in_dim * out_dim);
        let bias = draw(out_dim);
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> (Var, Var) {
        let w = Tensor::from_f64(&[self.out_dim, self.in_dim], &self.weight);
        let b = Tensor::from_f64(&[self.out_dim], &self.bias);
        if trainable {
            (tape.leaf(w), tape.leaf(b))
        } else {
            (tape.constant(w), tape.constant(b))
        }
    }

    pub(crate) fn check_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

pub(crate) fn check_chain(layers: &[Layer], in_dim: usize, out_dim: usize) -> Result<()> {
    let (Some(first), Some(last)) = (layers.first(), layers.last()) else {
        return Err(CoreError::invalid("network has no layers"));
    };
    if first.in_dim != in_dim || last.out_dim != out_dim {
        return Err(CoreError::invalid(format!(
            "network maps {} -> {}, expected {in_dim} -> {out_dim}",
            first.in_dim, last.out_dim
        )));
    }
    for (i, pair) in layers.windows(2).enumerate() {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(CoreError::invalid(format!(
                "layer {i} outputs {} but layer {} expects {}",
                pair[0].out_dim,
                i + 1,
                pair[1].in_dim
            )));
        }
    }
    for (i, l) in layers.iter().enumerate() {
        if l.weight.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
            return Err(CoreError::invalid(format!("layer {i} has inconsistent buffers")));
        }
    }
    Ok(())
}

/// `L_d(sin(w0·(…sin(w0·(W₁x + b₁))…)))` over bound layer variables.
pub fn siren_forward<T: Scalar>(
    tape: &mut Tape<T>,
    layers: &[(Var, Var)],
    w0: f64,
    coords: Var,
) -> Result<Var> {
    let mut h = coords;
    let last = layers.len() - 1;
    for (i, &(w, b)) in layers.iter().enumerate() {
        h = tape.linear(h, w, b)?;
        if i < last {
            let z = tape.scale(h, w0);
            h = tape.sin(z);
        }
    }
    Ok(h)
}

/// Image INR mapping `(x, y) ∈ (−1,1)²` to normalized RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct Inr2d {
    w0: f64,
    layers: Vec<Layer>,
    norm: NormConstants,
}

impl Inr2d {
    pub fn new(w0: f64, layers: Vec<Layer>, norm: NormConstants) -> Result<Self> {
        check_chain(&layers, 2, 3)?;
        if layers.len() < 2 {
            return Err(CoreError::invalid("an image INR needs at least two layers"));
        }
        let width = layers[0].out_dim;
        if layers[..layers.len() - 1].iter().any(|l| l.out_dim != width) {
            return Err(CoreError::invalid("hidden layers must share one width"));
        }
        if !(w0 > 0.0) || !w0.is_finite() {
            return Err(CoreError::invalid(format!("w0 must be positive, got {w0}")));
        }
        Ok(Self { w0, layers, norm })
    }

    /// SIREN initialization: first layer `U(±1/in)`, later layers `U(±√(6/fan_in)/w0)`.
    ///
    /// Biases use the same range as their layer's weights.
    pub fn siren_init(arch: Arch, seed: u64) -> Result<Self> {
        Self::siren_init_with(arch, NormConstants::IMAGENET, seed)
    }

    pub fn siren_init_with(arch: Arch, norm: NormConstants, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed::rng(seed);
        let mut layers = Vec::with_capacity(arch.depth);
        layers.push(Layer::uniform(2, arch.width, 1.0 / 2.0, &mut rng));
        for i in 1..arch.depth {
            let out = if i + 1 == arch.depth { 3 } else { arch.width };
            let bound = (6.0 / arch.width as f64).sqrt() / arch.w0;
            layers.push(Layer::uniform(arch.width, out, bound, &mut rng));
        }
        Self::new(arch.w0, layers, norm)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.layers[0].out_dim
    }

    pub fn w0(&self) -> f64 {
        self.w0
    }

    pub fn arch(&self) -> Arch {
        Arch {
            depth: self.depth(),
            width: self.width(),
            w0: self.w0,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn norm(&self) -> NormConstants {
        self.norm
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<(Var, Var)> {
        self.layers.iter().map(|l| l.bind(tape, trainable)).collect()
    }

    /// Normalized values at `coords` (`N×2`), parameters frozen.
    pub fn query<T: Scalar>(&self, tape: &mut Tape<T>, coords: Var) -> Result<Var> {
        let vars = self.bind(tape, false);
        siren_forward(tape, &vars, self.w0, coords)
    }

    /// Plain f32 evaluation at flat `N×2` coordinates, returning flat `N×3` normalized values.
    pub fn query_points(&self, coords: &[f64]) -> Result<Vec<f64>> {
        if coords.len() % 2 != 0 {
            return Err(CoreError::invalid("coordinates must come in (x, y) pairs"));
        }
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_f64(&[coords.len() / 2, 2], coords));
        let y = self.query(&mut tape, x)?;
        Ok(tape.value(y).to_f64_vec())
    }

    /// Denormalized, clamped rendering on the pixel-center grid.
    pub fn render(&self, height: usize, width: usize) -> Result<ImageGrid> {
        let v = self.query_points(&grid_coords_flat(height, width))?;
        let rgb = v
            .chunks_exact(3)
            .flat_map(|p| self.norm.denormalize([p[0], p[1], p[2]]))
            .collect();
        ImageGrid::from_clamped(height, width, rgb)
    }

    pub fn psnr_against(&self, img: &ImageGrid) -> Result<f64> {
        psnr(&self.render(img.height(), img.width())?, img)
    }
}

/// Pixel-center coordinate along one axis of length `n`.
pub fn axis_coord(index: usize, n: usize) -> f64 {
    (2 * index + 1) as f64 / n as f64 - 1.0
}

/// Row-major `(x, y)` pixel centers; `x` follows columns, `y` follows rows.
pub fn grid_coords(height: usize, width: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(height * width);
    for i in 0..height {
        for j in 0..width {
            out.push([axis_coord(j, width), axis_coord(i, height)]);
        }
    }
    out
}

pub fn grid_coords_flat(height: usize, width: usize) -> Vec<f64> {
    grid_coords(height, width).into_iter().flatten().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub seed: u64,
}

impl FitConfig {
    pub fn new(iterations: usize, seed: u64) -> Self {
        Self {
            iterations,
            lr0: 1e-3,
            lr_min: 1e-5,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0) || self.lr0 < self.lr_min {
            return Err(CoreError::invalid(format!(
                "need lr0 >= lr_min > 0, got lr0={} lr_min={}",
                self.lr0, self.lr_min
            )));
        }
        Ok(())
    }
}

impl Default for FitConfig {
    fn default() -> Self {
        Self::new(1000, 0)
    }
}

/// Full-batch f32 fitting state for one image. Adam moments persist across
/// [`ImageFitter::train`] calls; each call runs its own cosine cycle.
pub struct ImageFitter {
    w0: f64,
    norm: NormConstants,
    params: ParamSet<f32>,
    adam: Adam<f32>,
    coords: Tensor<f32>,
    target: Tensor<f32>,
    image: ImageGrid,
    iterations: usize,
}

impl ImageFitter {
    pub fn new(inr: &Inr2d, image: &ImageGrid) -> Self {
        let mut params = ParamSet::new();
        for (i, l) in inr.layers.iter().enumerate() {
            params.push(
                format!("layer{i}.weight"),
                Tensor::from_f64(&[l.out_dim, l.in_dim], &l.weight),
            );
            params.push(format!("layer{i}.bias"), Tensor::from_f64(&[l.out_dim], &l.bias));
        }
        let adam = Adam::new(&params, AdamConfig::default());
        let n = image.pixels();
        let coords = Tensor::from_f64(&[n, 2], &grid_coords_flat(image.height(), image.width()));
        let target: Vec<f64> = image
            .data()
            .chunks_exact(3)
            .flat_map(|p| inr.norm.normalize([p[0], p[1], p[2]]))
            .collect();
        Self {
            w0: inr.w0,
            norm: inr.norm,
            params,
            adam,
            coords,
            target: Tensor::from_f64(&[n, 3], &target),
            image: image.clone(),
            iterations: 0,
        }
    }

    /// Total optimizer steps taken so far.
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn inr(&self) -> Inr2d {
        let layers = self
            .params
            .values()
            .chunks_exact(2)
            .map(|wb| {
                let shape = wb[0].shape();
                Layer {
                    in_dim: shape[1],
                    out_dim: shape[0],
                    weight: wb[0].to_f64_vec(),
                    bias: wb[1].to_f64_vec(),
                }
            })
            .collect();
        Inr2d {
            w0: self.w0,
            layers,
            norm: self.norm,
        }
    }

    pub fn psnr(&self) -> Result<f64> {
        self.inr().psnr_against(&self.image)
    }

    fn step(&mut self, lr: f64) -> Result<()> {
        let mut tape = Tape::<f32>::new();
        let vars: Vec<Var> = self.params.values().iter().map(|t| tape.leaf(t.clone())).collect();
        let pairs: Vec<(Var, Var)> = vars.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        let x = tape.constant(self.coords.clone());
        let y = tape.constant(self.target.clone());
        let pred = siren_forward(&mut tape, &pairs, self.w0, x)?;
        let loss = tape.mse(pred, y)?;
        if !tape.value(loss).item().is_finite() {
            return Err(CoreError::NonFiniteLoss {
                iteration: self.iterations,
                lr,
            });
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor<f32>> = vars.iter().map(|&v| grads.wrt(v).clone()).collect();
        self.adam.step(&mut self.params, &g, lr)?;
        self.iterations += 1;
        Ok(())
    }

    /// Run up to `budget` steps on a fresh cosine cycle from `lr0` to `lr_min`.
    ///
    /// With `check_every = Some(k)`, PSNR is measured every `k` steps and
    /// training stops as soon as `stop(psnr)` returns true. Returns the
    /// number of steps taken.
    pub fn train(
        &mut self,
        budget: usize,
        lr0: f64,
        lr_min: f64,
        check_every: Option<usize>,
        mut stop: impl FnMut(f64) -> bool,
    ) -> Result<usize> {
        for s in 0..budget {
            self.step(cosine_lr(s, budget, lr0, lr_min))?;
            if let Some(k) = check_every {
                if (s + 1) % k.max(1) == 0 && stop(self.psnr()?) {
                    return Ok(s + 1);
                }
            }
        }
        Ok(budget)
    }
}

/// Fit a freshly initialized INR to `img`; returns the INR and its final PSNR.
pub fn fit_image(img: &ImageGrid, cfg: &FitConfig, arch: Arch) -> Result<(Inr2d, f64)> {
    cfg.validate()?;
    let init = Inr2d::siren_init(arch, cfg.seed)?;
    let mut fitter = ImageFitter::new(&init, img);
    fitter.train(cfg.iterations, cfg.lr0, cfg.lr_min, None, |_| false)?;
    let psnr = fitter.psnr()?;
    Ok((fitter.inr(), psnr))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_examples() {
        assert_eq!(grid_coords(1, 1), vec![[0.0, 0.0]]);
        let g = grid_coords(2, 2);
        assert_eq!(g, vec![[-0.5, -0.5], [0.5, -0.5], [-0.5, 0.5], [0.5, 0.5]]);
        assert_eq!(grid_coords(1, 4)[0][0], -0.75);
    }

    #[test]
    fn normalization_examples() {
        let n = NormConstants::IMAGENET;
        assert_eq!(n.normalize([0.485, 0.456, 0.406]), [0.0; 3]);
        let one = n.normalize([1.0; 3]);
        let expect = [0.515 / 0.229, 0.544 / 0.224, 0.594 / 0.225];
        for c in 0..3 {
            assert!((one[c] - expect[c]).abs() < 1e-12);
        }
        assert!((one[2] - 2.64).abs() < 1e-12);
        assert!(NormConstants::new([0.0; 3], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn presets() {
        assert_eq!(Arch::preset("cifar").unwrap().depth, 3);
        assert_eq!(Arch::preset("imagenet").unwrap().width, 256);
        assert_eq!(Arch::preset("cityscapes").unwrap().depth, 5);
        assert!(Arch::preset("mnist").is_err());
    }

    #[test]
    fn rejects_bad_chain() {
        let layers = vec![Layer::zeros(2, 8), Layer::zeros(4, 3)];
        assert!(Inr2d::new(30.0, layers, NormConstants::IMAGENET).is_err());
    }
}
