//! Small view-independent radiance fields: encoding, rendering, fitting and
//! photometric pose refinement.

pub mod camera;
pub mod fit;
pub mod metrics;
pub mod refine;
pub mod render;
pub mod sampling;

use izoo_autograd::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::inr2d::{check_chain, Layer, NormConstants};
use crate::inrz::InrRecord;
use crate::seed;
use crate::tokenizer::Field;

pub use camera::{Camera, Pose};
pub use fit::{fit_scene, SceneFit, SceneFitConfig};
pub use metrics::{pose_error, pose_metrics, PoseError, PoseMetrics};
pub use refine::{random_perturbation, refine_pose, RefineConfig, RefineResult};
pub use render::{composite, RenderConfig};
pub use sampling::{adaptive_sample_rays, PosedView, RayBatch, SamplingConfig};

/// `3 + 6L` features: the point, then `sin`/`cos` of `2ᵏπp` for `k < L`.
pub fn encoded_dim(levels: usize) -> usize {
    3 + 6 * levels
}

/// Positional encoding of flat `n×3` points, flat `n×(3+6L)` output.
pub fn posenc(points: &[f64], levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(points.len() / 3 * encoded_dim(levels));
    for p in points.chunks_exact(3) {
        out.extend_from_slice(p);
        for k in 0..levels {
            let f = (1u64 << k) as f64 * std::f64::consts::PI;
            out.extend(p.iter().map(|x| (f * x).sin()));
            out.extend(p.iter().map(|x| (f * x).cos()));
        }
    }
    out
}

/// Tape op for [`posenc`] on `[n, 3]` points.
pub fn posenc_var<T: Scalar>(tape: &mut Tape<T>, points: Var, levels: usize) -> Result<Var> {
    let shape = tape.shape(points).to_vec();
    if shape.len() != 2 || shape[1] != 3 {
        return Err(CoreError::invalid(format!("posenc expects [n, 3] points, got {shape:?}")));
    }
    let n = shape[0];
    let e = encoded_dim(levels);
    let p = tape.value(points).data();
    let mut out = Vec::with_capacity(n * e);
    for q in p.chunks_exact(3) {
        out.extend_from_slice(q);
        for k in 0..levels {
            let f = T::of((1u64 << k) as f64 * std::f64::consts::PI);
            out.extend(q.iter().map(|&x| (f * x).sin()));
            out.extend(q.iter().map(|&x| (f * x).cos()));
        }
    }
    Ok(tape.custom(
        &[points],
        Tensor::from_vec(&[n, e], out),
        Box::new(move |_inputs, out, g| {
            let (o, g) = (out.data(), g.data());
            let mut dp = vec![T::zero(); n * 3];
            for r in 0..n {
                let (orow, grow) = (&o[r * e..(r + 1) * e], &g[r * e..(r + 1) * e]);
                for c in 0..3 {
                    let mut acc = grow[c];
                    for k in 0..levels {
                        let f = T::of((1u64 << k) as f64 * std::f64::consts::PI);
                        let s = 3 + 6 * k;
                        // d sin(fp) = f cos(fp), d cos(fp) = −f sin(fp)
                        acc += f * (grow[s + c] * orow[s + 3 + c] - grow[s + 3 + c] * orow[s + c]);
                    }
                    dp[r * 3 + c] = acc;
                }
            }
            vec![Some(Tensor::from_vec(&[n, 3], dp))]
        }),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NerfArch {
    pub depth: usize,
    pub width: usize,
    pub levels: usize,
}

impl Default for NerfArch {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 128,
            levels: 10,
        }
    }
}

/// Encoded point ↦ (sigmoid rgb, relu density); ReLU hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Inr3d {
    levels: usize,
    layers: Vec<Layer>,
}

impl Inr3d {
    pub fn new(levels: usize, layers: Vec<Layer>) -> Result<Self> {
        check_chain(&layers, encoded_dim(levels), 4)?;
        Ok(Self { levels, layers })
    }

    /// Linear layers drawn from `U(±1/√fan_in)`.
    pub fn init(arch: NerfArch, seed: u64) -> Result<Self> {
        if arch.depth < 2 || arch.width == 0 {
            return Err(CoreError::invalid(format!("invalid radiance-field shape {arch:?}")));
        }
        let mut rng = seed::rng(seed);
        let layers = (0..arch.depth)
            .map(|i| {
                let fan_in = if i == 0 { encoded_dim(arch.levels) } else { arch.width };
                let out = if i + 1 == arch.depth { 4 } else { arch.width };
                Layer::uniform(fan_in, out, 1.0 / (fan_in as f64).sqrt(), &mut rng)
            })
            .collect();
        Self::new(arch.levels, layers)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn arch(&self) -> NerfArch {
        NerfArch {
            depth: self.layers.len(),
            width: self.layers[0].out_dim,
            levels: self.levels,
        }
    }

    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<(Var, Var)> {
        self.layers.iter().map(|l| l.bind(tape, trainable)).collect()
    }

    /// `(rgb [n, 3], σ [n])` at `[n, 3]` world points.
    pub fn forward<T: Scalar>(
        tape: &mut Tape<T>,
        layers: &[(Var, Var)],
        levels: usize,
        points: Var,
    ) -> Result<(Var, Var)> {
        let n = tape.shape(points)[0];
        let mut h = posenc_var(tape, points, levels)?;
        let last = layers.len() - 1;
        for (i, &(w, b)) in layers.iter().enumerate() {
            h = tape.linear(h, w, b)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        let rgb = tape.slice(h, 1, 0, 3)?;
        let rgb = tape.sigmoid(rgb);
        let sigma = tape.slice(h, 1, 3, 1)?;
        let sigma = tape.relu(sigma);
        let sigma = tape.reshape(sigma, &[n])?;
        Ok((rgb, sigma))
    }

    pub fn query<T: Scalar>(&self, tape: &mut Tape<T>, points: Var) -> Result<(Var, Var)> {
        let layers = self.bind(tape, false);
        Self::forward(tape, &layers, self.levels, points)
    }

    pub fn from_layers_f32(levels: usize, params: &[Tensor<f32>]) -> Result<Self> {
        let layers = params
            .chunks_exact(2)
            .map(|wb| Layer {
                in_dim: wb[0].shape()[1],
                out_dim: wb[0].shape()[0],
                weight: wb[0].to_f64_vec(),
                bias: wb[1].to_f64_vec(),
            })
            .collect();
        Self::new(levels, layers)
    }
}

impl Field for Inr3d {
    fn in_dim(&self) -> usize {
        3
    }

    fn out_dim(&self) -> usize {
        4
    }

    fn query_var<T: Scalar>(&self, tape: &mut Tape<T>, coords: Var) -> Result<Var> {
        let n = tape.shape(coords)[0];
        let (rgb, sigma) = self.query(tape, coords)?;
        let sigma = tape.reshape(sigma, &[n, 1])?;
        Ok(tape.concat(&[rgb, sigma], 1)?)
    }
}

impl From<&Inr3d> for InrRecord {
    fn from(inr: &Inr3d) -> Self {
        Self {
            in_dim: encoded_dim(inr.levels),
            out_dim: 4,
            w0: 0.0,
            norm: NormConstants::IDENTITY,
            layers: inr.layers.clone(),
        }
    }
}

impl TryFrom<InrRecord> for Inr3d {
    type Error = CoreError;

    fn try_from(r: InrRecord) -> Result<Self> {
        if r.out_dim != 4 || r.in_dim < 3 || (r.in_dim - 3) % 6 != 0 {
            return Err(CoreError::invalid(format!(
                "expected a radiance-field INR (3+6L -> 4), file holds {} -> {}",
                r.in_dim, r.out_dim
            )));
        }
        Self::new((r.in_dim - 3) / 6, r.layers)
    }
}
