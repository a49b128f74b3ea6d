//! Stratified depth sampling and white-background alpha compositing.

use izoo_autograd::{Scalar, Tape, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Inr3d;
use crate::error::{CoreError, Result};
use crate::seed;

pub const BACKGROUND: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub near: f64,
    pub far: f64,
    pub samples: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            near: 2.0,
            far: 6.0,
            samples: 64,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.near < self.far) || self.samples == 0 {
            return Err(CoreError::invalid(format!("invalid render range {self:?}")));
        }
        Ok(())
    }

    /// Depths for `rays` rays, `rays × samples`. Without `rng` the samples are
    /// evenly spaced from `near` to `far`; with it, each is drawn uniformly
    /// within its stratum between neighbouring midpoints.
    pub fn depths(&self, rays: usize, mut rng: Option<&mut seed::Rng>) -> Vec<f64> {
        let s = self.samples;
        let base: Vec<f64> = (0..s)
            .map(|k| {
                if s == 1 {
                    self.near
                } else {
                    self.near + (self.far - self.near) * k as f64 / (s - 1) as f64
                }
            })
            .collect();
        let mut out = Vec::with_capacity(rays * s);
        for _ in 0..rays {
            match rng.as_deref_mut() {
                None => out.extend_from_slice(&base),
                Some(rng) => {
                    for k in 0..s {
                        let lo = if k == 0 { base[0] } else { 0.5 * (base[k - 1] + base[k]) };
                        let hi = if k + 1 == s { base[k] } else { 0.5 * (base[k] + base[k + 1]) };
                        out.push(lo + (hi - lo) * rng.gen::<f64>());
                    }
                }
            }
        }
        out
    }

    /// `t_{i+1} − t_i`, and `far − t_last` for the last sample.
    pub fn deltas(&self, depths: &[f64]) -> Vec<f64> {
        let s = self.samples;
        let mut out = Vec::with_capacity(depths.len());
        for ray in depths.chunks_exact(s) {
            for k in 0..s {
                let next = if k + 1 == s { self.far } else { ray[k + 1] };
                out.push(next - ray[k]);
            }
        }
        out
    }
}

/// Plain compositing of flat `R×S` densities and `R×S×3` colors.
pub struct Composite {
    pub colors: Vec<f64>,
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
}

pub fn composite(sigma: &[f64], rgb: &[f64], deltas: &[f64], samples: usize) -> Composite {
    let rays = sigma.len() / samples;
    let mut colors = Vec::with_capacity(rays * 3);
    let mut weights = Vec::with_capacity(sigma.len());
    let mut transmittance = Vec::with_capacity(rays);
    for r in 0..rays {
        let mut t = 1.0;
        let mut c = [0.0; 3];
        for i in r * samples..(r + 1) * samples {
            let keep = (-sigma[i] * deltas[i]).exp();
            let w = t * (1.0 - keep);
            for k in 0..3 {
                c[k] += w * rgb[i * 3 + k];
            }
            weights.push(w);
            t *= keep;
        }
        colors.extend(c.iter().map(|v| v + t * BACKGROUND));
        transmittance.push(t);
    }
    Composite {
        colors,
        weights,
        transmittance,
    }
}

/// Tape op compositing `σ [R, S]` and `rgb [R, S, 3]` into `[R, 3]` colors.
pub fn composite_var<T: Scalar>(tape: &mut Tape<T>, sigma: Var, rgb: Var, deltas: Vec<f64>) -> Result<Var> {
    let ss = tape.shape(sigma).to_vec();
    if ss.len() != 2 || tape.shape(rgb) != [ss[0], ss[1], 3] || deltas.len() != ss[0] * ss[1] {
        return Err(CoreError::invalid(format!(
            "composite expects sigma [R, S], rgb [R, S, 3] and R*S deltas; got {ss:?}, {:?}, {}",
            tape.shape(rgb),
            deltas.len()
        )));
    }
    let (rays, s) = (ss[0], ss[1]);
    let deltas: Vec<T> = deltas.into_iter().map(T::of).collect();
    let bg = T::of(BACKGROUND);
    let forward = |sig: &[T], col: &[T], deltas: &[T]| -> Vec<T> {
        let mut out = Vec::with_capacity(rays * 3);
        for r in 0..rays {
            let mut t = T::one();
            let mut c = [T::zero(); 3];
            for i in r * s..(r + 1) * s {
                let keep = (-sig[i] * deltas[i]).exp();
                let w = t * (T::one() - keep);
                for k in 0..3 {
                    c[k] += w * col[i * 3 + k];
                }
                t *= keep;
            }
            out.extend(c.iter().map(|&v| v + t * bg));
        }
        out
    };
    let value = forward(tape.value(sigma).data(), tape.value(rgb).data(), &deltas);
    Ok(tape.custom(
        &[sigma, rgb],
        Tensor::from_vec(&[rays, 3], value),
        Box::new(move |inputs, _out, g| {
            let (sig, col, g) = (inputs[0].data(), inputs[1].data(), g.data());
            let mut dsig = vec![T::zero(); rays * s];
            let mut dcol = vec![T::zero(); rays * s * 3];
            let mut w = vec![T::zero(); s];
            let mut t_after = vec![T::zero(); s];
            for r in 0..rays {
                let mut t = T::one();
                for k in 0..s {
                    let i = r * s + k;
                    let keep = (-sig[i] * deltas[i]).exp();
                    w[k] = t * (T::one() - keep);
                    t *= keep;
                    t_after[k] = t;
                }
                let gr = &g[r * 3..r * 3 + 3];
                // Suffix radiance S_{k+1} = Σ_{j>k} w_j c_j + T_final·bg.
                let mut suffix = [t * bg; 3];
                for k in (0..s).rev() {
                    let i = r * s + k;
                    let mut acc = T::zero();
                    for ch in 0..3 {
                        let c = col[i * 3 + ch];
                        dcol[i * 3 + ch] = w[k] * gr[ch];
                        acc += gr[ch] * (t_after[k] * c - suffix[ch]);
                        suffix[ch] += w[k] * c;
                    }
                    dsig[i] = deltas[i] * acc;
                }
            }
            vec![
                Some(Tensor::from_vec(&[rays, s], dsig)),
                Some(Tensor::from_vec(&[rays, s, 3], dcol)),
            ]
        }),
    ))
}

/// Render `[R, 3]` colors for rays `origins`/`dirs` (each `[R, 3]`) with
/// per-ray sample `depths` (`R × S`).
pub fn render_rays_var<T: Scalar>(
    tape: &mut Tape<T>,
    layers: &[(Var, Var)],
    levels: usize,
    origins: Var,
    dirs: Var,
    depths: &[f64],
    cfg: &RenderConfig,
) -> Result<Var> {
    let rays = tape.shape(dirs)[0];
    let s = cfg.samples;
    if depths.len() != rays * s {
        return Err(CoreError::invalid("depth count does not match rays × samples"));
    }
    let o = tape.reshape(origins, &[rays, 1, 3])?;
    let d = tape.reshape(dirs, &[rays, 1, 3])?;
    let t = tape.constant(Tensor::from_f64(&[rays, s, 1], depths));
    let steps = tape.mul(d, t)?;
    let pts = tape.add(steps, o)?;
    let pts = tape.reshape(pts, &[rays * s, 3])?;
    let (rgb, sigma) = Inr3d::forward(tape, layers, levels, pts)?;
    let rgb = tape.reshape(rgb, &[rays, s, 3])?;
    let sigma = tape.reshape(sigma, &[rays, s])?;
    composite_var(tape, sigma, rgb, cfg.deltas(depths))
}

/// Deterministic f32 rendering of flat `R×3` rays in chunks.
pub fn render_plain(inr: &Inr3d, origins: &[f64], dirs: &[f64], cfg: &RenderConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    const CHUNK: usize = 256;
    let rays = dirs.len() / 3;
    let mut out = Vec::with_capacity(rays * 3);
    let mut start = 0;
    while start < rays {
        let n = CHUNK.min(rays - start);
        let mut tape = Tape::<f32>::new();
        let layers = inr.bind(&mut tape, false);
        let o = tape.constant(Tensor::from_f64(&[n, 3], &origins[start * 3..(start + n) * 3]));
        let d = tape.constant(Tensor::from_f64(&[n, 3], &dirs[start * 3..(start + n) * 3]));
        let depths = cfg.depths(n, None);
        let c = render_rays_var(&mut tape, &layers, inr.levels(), o, d, &depths, cfg)?;
        out.extend(tape.value(c).to_f64_vec());
        start += n;
    }
    Ok(out)
}
