//! Differentiable augmentation of image INRs.
//!
//! Geometric transforms use the pull-back convention `f'(x) = f(A·x + t)` and
//! are realized by editing only the first layer: `W' = W·A`, `b' = b + W·t`.
//! Color transforms act on queried values in denormalized `[0, 1]` space after
//! zeroing out-of-range pixels; equalize and posterize pass gradients through
//! as identity via `v + stopgrad(T(v) − v)`.

use std::f64::consts::PI;

use izoo_autograd::{Scalar, Tape, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::inr2d::{grid_coords_flat, Inr2d, NormConstants};
use crate::seed;

/// `x ↦ A·x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine2 {
    pub a: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine2 {
    pub const IDENTITY: Self = Self {
        a: [[1.0, 0.0], [0.0, 1.0]],
        t: [0.0, 0.0],
    };

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let a = &self.a;
        [
            a[0][0] * p[0] + a[0][1] * p[1] + self.t[0],
            a[1][0] * p[0] + a[1][1] * p[1] + self.t[1],
        ]
    }

    pub fn det(&self) -> f64 {
        self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0]
    }

    pub fn inverse(&self) -> Option<Self> {
        let d = self.det();
        if d.abs() < 1e-12 || !d.is_finite() {
            return None;
        }
        let a = &self.a;
        let inv = [[a[1][1] / d, -a[0][1] / d], [-a[1][0] / d, a[0][0] / d]];
        let t = [
            -(inv[0][0] * self.t[0] + inv[0][1] * self.t[1]),
            -(inv[1][0] * self.t[0] + inv[1][1] * self.t[1]),
        ];
        Some(Self { a: inv, t })
    }

    /// Pull-back of `self` followed by `next`: querying
    /// `apply_weightspace(next, apply_weightspace(self, f))` equals querying `f`
    /// under the returned map, `x ↦ A₁(A₂x + t₂) + t₁`.
    pub fn then(&self, next: &Affine2) -> Affine2 {
        let (a1, a2) = (&self.a, &next.a);
        let mut a = [[0.0; 2]; 2];
        for (r, row) in a.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = a1[r][0] * a2[0][c] + a1[r][1] * a2[1][c];
            }
        }
        let t = [
            a1[0][0] * next.t[0] + a1[0][1] * next.t[1] + self.t[0],
            a1[1][0] * next.t[0] + a1[1][1] * next.t[1] + self.t[1],
        ];
        Affine2 { a, t }
    }
}

/// Axis-aligned rectangle removed from the output, in output coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cutout {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Cutout {
    fn covers(&self, p: [f64; 2]) -> bool {
        (p[0] - self.cx).abs() < self.w / 2.0 && (p[1] - self.cy).abs() < self.h / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GeomTransform {
    Rotate { theta: f64 },
    Translate { dx: f64, dy: f64 },
    ShearX { s: f64 },
    ShearY { s: f64 },
    Cutout(Cutout),
}

impl GeomTransform {
    /// `None` for cutout, which exists only in the mask.
    pub fn as_affine(&self) -> Option<Affine2> {
        let a = match *self {
            GeomTransform::Rotate { theta } => {
                let (s, c) = theta.sin_cos();
                Affine2 {
                    a: [[c, -s], [s, c]],
                    t: [0.0; 2],
                }
            }
            GeomTransform::Translate { dx, dy } => Affine2 {
                a: Affine2::IDENTITY.a,
                t: [dx, dy],
            },
            GeomTransform::ShearX { s } => Affine2 {
                a: [[1.0, s], [0.0, 1.0]],
                t: [0.0; 2],
            },
            GeomTransform::ShearY { s } => Affine2 {
                a: [[1.0, 0.0], [s, 1.0]],
                t: [0.0; 2],
            },
            GeomTransform::Cutout(_) => return None,
        };
        Some(a)
    }
}

/// Edit the first layer so the result queries `inr` at `A·x + t`.
pub fn apply_weightspace(inr: &Inr2d, g: &Affine2) -> Result<Inr2d> {
    if g.inverse().is_none() {
        return Err(CoreError::invalid(format!("affine map {g:?} is not invertible")));
    }
    let mut out = inr.clone();
    let l = &mut out.layers_mut()[0];
    for o in 0..l.out_dim {
        let w = [l.weight[o * 2], l.weight[o * 2 + 1]];
        l.weight[o * 2] = w[0] * g.a[0][0] + w[1] * g.a[1][0];
        l.weight[o * 2 + 1] = w[0] * g.a[0][1] + w[1] * g.a[1][1];
        l.bias[o] += w[0] * g.t[0] + w[1] * g.t[1];
    }
    Ok(out)
}

/// 1 where the pulled-back coordinate lies in `(−1,1)²` and no cutout covers
/// the output coordinate, else 0. `coords` is flat `N×2`.
pub fn mask_at(coords: &[f64], g: &Affine2, cutouts: &[Cutout]) -> Vec<f64> {
    coords
        .chunks_exact(2)
        .map(|p| {
            let p = [p[0], p[1]];
            let q = g.apply(p);
            let inside = q.iter().all(|v| v.abs() < 1.0);
            let cut = cutouts.iter().any(|c| c.covers(p));
            if inside && !cut {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Row-major `h × w` validity mask on the pixel-center grid.
pub fn transform_mask(h: usize, w: usize, g: &Affine2, cutouts: &[Cutout]) -> Vec<f64> {
    mask_at(&grid_coords_flat(h, w), g, cutouts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorKind {
    AutoContrast,
    Equalize,
    Solarize,
    ColorBalance,
    Invert,
    Contrast,
    Brightness,
    Sharpness,
    Posterize,
}

impl ColorKind {
    /// Admissible magnitudes. Blend-style kinds use factor `1 + magnitude`;
    /// solarize inverts values above `1 − magnitude`; posterize keeps
    /// `8 − magnitude` bits; the rest take no magnitude.
    pub fn range(self) -> (f64, f64) {
        match self {
            ColorKind::AutoContrast | ColorKind::Equalize | ColorKind::Invert => (0.0, 0.0),
            ColorKind::Solarize => (0.0, 1.0),
            ColorKind::ColorBalance | ColorKind::Contrast | ColorKind::Brightness | ColorKind::Sharpness => {
                (-0.9, 0.9)
            }
            ColorKind::Posterize => (0.0, 7.0),
        }
    }

    pub fn differentiable(self) -> bool {
        !matches!(self, ColorKind::Equalize | ColorKind::Posterize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorTransform {
    pub kind: ColorKind,
    #[serde(default)]
    pub magnitude: f64,
}

impl ColorTransform {
    pub fn new(kind: ColorKind, magnitude: f64) -> Result<Self> {
        let c = Self { kind, magnitude };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.kind.range();
        let m = self.magnitude;
        let ok = m >= lo && m <= hi && (self.kind != ColorKind::Posterize || m.fract() == 0.0);
        if !ok {
            return Err(CoreError::invalid(format!(
                "{:?} magnitude {m} outside [{lo}, {hi}]",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Values queried on an `h × w` grid (row-major), with their validity mask.
pub struct MaskedValues {
    /// Normalized values `[h·w, 3]`.
    pub values: Var,
    pub mask: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Mask, denormalize, apply `ops` in order, renormalize and mask again.
pub fn apply_colors<T: Scalar>(
    tape: &mut Tape<T>,
    mv: &MaskedValues,
    ops: &[ColorTransform],
    norm: &NormConstants,
) -> Result<Var> {
    let n = mv.height * mv.width;
    if tape.shape(mv.values) != [n, 3] || mv.mask.len() != n {
        return Err(CoreError::invalid(format!(
            "masked values must be [{n}, 3] with {n} mask entries"
        )));
    }
    let m = tape.constant(Tensor::from_f64(&[n, 1], &mv.mask));
    let masked = tape.mul(mv.values, m)?;
    let mut u = norm.denormalize_var(tape, masked)?;
    for op in ops {
        op.validate()?;
        u = color_op(tape, u, op, mv)?;
    }
    let v = norm.normalize_var(tape, u)?;
    Ok(tape.mul(v, m)?)
}

pub fn apply_color<T: Scalar>(
    tape: &mut Tape<T>,
    mv: &MaskedValues,
    op: &ColorTransform,
    norm: &NormConstants,
) -> Result<Var> {
    apply_colors(tape, mv, std::slice::from_ref(op), norm)
}

fn valid_count(mask: &[f64]) -> f64 {
    mask.iter().sum()
}

/// Per-pixel luma `[n, 1]`.
fn luma<T: Scalar>(tape: &mut Tape<T>, u: Var) -> Result<Var> {
    let w = tape.constant(Tensor::from_f64(&[3, 1], &LUMA));
    Ok(tape.matmul(u, w)?)
}

/// `base + f·(u − base)`.
fn blend<T: Scalar>(tape: &mut Tape<T>, u: Var, base: Var, f: f64) -> Result<Var> {
    let d = tape.sub(u, base)?;
    let d = tape.scale(d, f);
    Ok(tape.add(base, d)?)
}

fn color_op<T: Scalar>(tape: &mut Tape<T>, u: Var, op: &ColorTransform, mv: &MaskedValues) -> Result<Var> {
    let factor = 1.0 + op.magnitude;
    let mask = &mv.mask;
    Ok(match op.kind {
        ColorKind::Brightness => tape.scale(u, factor),
        ColorKind::Invert => {
            let neg = tape.neg(u);
            tape.add_scalar(neg, 1.0)
        }
        ColorKind::ColorBalance => {
            let g = luma(tape, u)?;
            blend(tape, u, g, factor)?
        }
        ColorKind::Contrast => {
            let count = valid_count(mask);
            if count == 0.0 {
                return Ok(u);
            }
            let g = luma(tape, u)?;
            let m = tape.constant(Tensor::from_f64(&[mask.len(), 1], mask));
            let gm = tape.mul(g, m)?;
            let s = tape.sum(gm);
            let mean = tape.scale(s, 1.0 / count);
            blend(tape, u, mean, factor)?
        }
        ColorKind::Solarize => {
            let thr = 1.0 - op.magnitude;
            let flip: Vec<f64> = tape
                .value(u)
                .to_f64_vec()
                .iter()
                .map(|&x| if x > thr { 1.0 } else { 0.0 })
                .collect();
            let s = tape.constant(Tensor::from_f64(tape.shape(u), &flip));
            let two_u = tape.scale(u, -2.0);
            let d = tape.add_scalar(two_u, 1.0);
            let d = tape.mul(d, s)?;
            tape.add(u, d)?
        }
        ColorKind::Sharpness => {
            let smooth = smooth3x3(tape, u, mv.height, mv.width)?;
            blend(tape, u, smooth, factor)?
        }
        ColorKind::AutoContrast => autocontrast(tape, u, mask)?,
        ColorKind::Equalize => {
            let x = tape.value(u).to_f64_vec();
            residual(tape, u, equalize_values(&x, mask))?
        }
        ColorKind::Posterize => {
            if op.magnitude == 0.0 {
                return Ok(u);
            }
            let bits = 8 - op.magnitude as u32;
            let x = tape.value(u).to_f64_vec();
            let target = x
                .iter()
                .enumerate()
                .map(|(i, &v)| if mask[i / 3] > 0.0 { posterize_value(v, bits) } else { v })
                .collect();
            residual(tape, u, target)?
        }
    })
}

/// `u + stopgrad(target − u)`.
fn residual<T: Scalar>(tape: &mut Tape<T>, u: Var, target: Vec<f64>) -> Result<Var> {
    let x = tape.value(u).to_f64_vec();
    let delta: Vec<f64> = target.iter().zip(&x).map(|(t, v)| t - v).collect();
    let d = tape.constant(Tensor::from_f64(tape.shape(u), &delta));
    Ok(tape.add(u, d)?)
}

/// 8-bit posterization keeping the top `bits` bits.
pub fn posterize_value(v: f64, bits: u32) -> f64 {
    let q = (v.clamp(0.0, 1.0) * 255.0).round() as u32;
    let keep = !((1u32 << (8 - bits)) - 1) & 0xff;
    (q & keep) as f64 / 255.0
}

/// Per-channel histogram equalization on 256 bins over valid pixels of flat
/// `[n, 3]` values. Single-level channels are returned unchanged.
pub fn equalize_values(x: &[f64], mask: &[f64]) -> Vec<f64> {
    let bin = |v: f64| ((v.clamp(0.0, 1.0) * 256.0) as usize).min(255);
    let mut out = x.to_vec();
    for c in 0..3 {
        let mut hist = [0usize; 256];
        for (i, &m) in mask.iter().enumerate() {
            if m > 0.0 {
                hist[bin(x[i * 3 + c])] += 1;
            }
        }
        let total: usize = hist.iter().sum();
        let mut cdf = [0usize; 256];
        let mut acc = 0;
        for (b, h) in hist.iter().enumerate() {
            acc += h;
            cdf[b] = acc;
        }
        let cdf_min = hist.iter().copied().find(|&h| h > 0).unwrap_or(0);
        if total == cdf_min {
            continue;
        }
        let denom = (total - cdf_min) as f64;
        for (i, &m) in mask.iter().enumerate() {
            if m > 0.0 {
                let b = bin(x[i * 3 + c]);
                out[i * 3 + c] = (cdf[b] - cdf_min) as f64 / denom;
            }
        }
    }
    out
}

/// Per-channel `(u − lo)/(hi − lo)` with `lo`, `hi` taken from valid pixels;
/// gradients reach the extreme pixels too. Flat channels pass through.
fn autocontrast<T: Scalar>(tape: &mut Tape<T>, u: Var, mask: &[f64]) -> Result<Var> {
    let x = tape.value(u).to_f64_vec();
    let mut lo_idx = [usize::MAX; 3];
    let mut hi_idx = [usize::MAX; 3];
    for c in 0..3 {
        for (i, &m) in mask.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let v = x[i * 3 + c];
            if lo_idx[c] == usize::MAX || v < x[lo_idx[c] * 3 + c] {
                lo_idx[c] = i;
            }
            if hi_idx[c] == usize::MAX || v > x[hi_idx[c] * 3 + c] {
                hi_idx[c] = i;
            }
        }
    }
    if lo_idx[0] == usize::MAX {
        return Ok(u);
    }
    let live: Vec<f64> = (0..3)
        .map(|c| {
            if x[hi_idx[c] * 3 + c] - x[lo_idx[c] * 3 + c] > 1e-12 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let eye = tape.constant(Tensor::eye(3));
    let pick = |tape: &mut Tape<T>, idx: [usize; 3]| -> Result<Var> {
        let rows = tape.gather_rows(u, &idx)?;
        let diag = tape.mul(rows, eye)?;
        Ok(tape.sum_axis(diag, 0)?)
    };
    let lo = pick(tape, lo_idx)?;
    let hi = pick(tape, hi_idx)?;
    let live_v = tape.constant(Tensor::from_f64(&[3], &live));
    let dead_v = tape.constant(Tensor::from_f64(&[3], &live.iter().map(|l| 1.0 - l).collect::<Vec<_>>()));
    let lo = tape.mul(lo, live_v)?;
    let range = tape.sub(hi, lo)?;
    let range = tape.mul(range, live_v)?;
    let range = tape.add(range, dead_v)?;
    let shifted = tape.sub(u, lo)?;
    Ok(tape.div(shifted, range)?)
}

/// Blend-source for sharpness: interior pixels get the `[[1,1,1],[1,5,1],[1,1,1]]/13`
/// smoothing, border pixels keep their value.
fn smooth3x3<T: Scalar>(tape: &mut Tape<T>, u: Var, h: usize, w: usize) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for dr in -1i64..=1 {
        for dc in -1i64..=1 {
            let weight = if dr == 0 && dc == 0 { 5.0 } else { 1.0 } / 13.0;
            let idx: Vec<usize> = (0..h * w)
                .map(|p| {
                    let (r, c) = ((p / w) as i64, (p % w) as i64);
                    let border = r == 0 || c == 0 || r == h as i64 - 1 || c == w as i64 - 1;
                    if border {
                        p
                    } else {
                        ((r + dr) * w as i64 + c + dc) as usize
                    }
                })
                .collect();
            let g = tape.gather_rows(u, &idx)?;
            let g = tape.scale(g, weight);
            acc = Some(match acc {
                None => g,
                Some(a) => tape.add(a, g)?,
            });
        }
    }
    Ok(acc.expect("nine taps"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum AugOp {
    Geom(GeomTransform),
    Color(ColorTransform),
}

/// Replayable augmentation: geometric edits compose into one affine map,
/// cutouts go to the mask, color ops run in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub seed: u64,
    pub magnitude: f64,
    pub ops: Vec<AugOp>,
}

impl AugmentSpec {
    pub fn affine(&self) -> Affine2 {
        self.ops
            .iter()
            .filter_map(|op| match op {
                AugOp::Geom(g) => g.as_affine(),
                AugOp::Color(_) => None,
            })
            .fold(Affine2::IDENTITY, |acc, g| acc.then(&g))
    }

    pub fn cutouts(&self) -> Vec<Cutout> {
        self.ops
            .iter()
            .filter_map(|op| match op {
                AugOp::Geom(GeomTransform::Cutout(c)) => Some(*c),
                _ => None,
            })
            .collect()
    }

    pub fn colors(&self) -> Vec<ColorTransform> {
        self.ops
            .iter()
            .filter_map(|op| match op {
                AugOp::Color(c) => Some(*c),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpKind {
    Rotate,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Cutout,
    Color(ColorKind),
}

/// The transforms `rand_augment` samples from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPool {
    pub kinds: Vec<OpKind>,
}

impl Default for AugmentPool {
    /// All fifteen transforms.
    fn default() -> Self {
        use ColorKind::*;
        let mut kinds = vec![
            OpKind::Rotate,
            OpKind::ShearX,
            OpKind::ShearY,
            OpKind::TranslateX,
            OpKind::TranslateY,
            OpKind::Cutout,
        ];
        kinds.extend(
            [
                AutoContrast,
                Equalize,
                Solarize,
                ColorBalance,
                Invert,
                Contrast,
                Brightness,
                Sharpness,
                Posterize,
            ]
            .map(OpKind::Color),
        );
        Self { kinds }
    }
}

impl AugmentPool {
    /// Only the transforms whose zero magnitude is the identity.
    pub fn magnitude_only() -> Self {
        let kinds = Self::default()
            .kinds
            .into_iter()
            .filter(|k| {
                !matches!(
                    k,
                    OpKind::Color(ColorKind::AutoContrast | ColorKind::Equalize | ColorKind::Invert)
                )
            })
            .collect();
        Self { kinds }
    }

    /// The geometric transforms except cutout.
    pub fn affine_only() -> Self {
        Self {
            kinds: vec![
                OpKind::Rotate,
                OpKind::ShearX,
                OpKind::ShearY,
                OpKind::TranslateX,
                OpKind::TranslateY,
            ],
        }
    }
}

pub const MAX_ROTATE: f64 = PI / 6.0;
pub const MAX_SHEAR: f64 = 0.3;
pub const MAX_TRANSLATE: f64 = 0.6;
pub const MAX_CUTOUT: f64 = 1.0;

fn sample_op(kind: OpKind, m: f64, rng: &mut seed::Rng) -> AugOp {
    let mut signed = |x: f64| if rng.gen::<bool>() { x } else { -x };
    match kind {
        OpKind::Rotate => AugOp::Geom(GeomTransform::Rotate { theta: signed(m * MAX_ROTATE) }),
        OpKind::ShearX => AugOp::Geom(GeomTransform::ShearX { s: signed(m * MAX_SHEAR) }),
        OpKind::ShearY => AugOp::Geom(GeomTransform::ShearY { s: signed(m * MAX_SHEAR) }),
        OpKind::TranslateX => AugOp::Geom(GeomTransform::Translate {
            dx: signed(m * MAX_TRANSLATE),
            dy: 0.0,
        }),
        OpKind::TranslateY => AugOp::Geom(GeomTransform::Translate {
            dx: 0.0,
            dy: signed(m * MAX_TRANSLATE),
        }),
        OpKind::Cutout => {
            let side = m * MAX_CUTOUT;
            AugOp::Geom(GeomTransform::Cutout(Cutout {
                cx: rng.gen_range(-1.0..1.0),
                cy: rng.gen_range(-1.0..1.0),
                w: side,
                h: side,
            }))
        }
        OpKind::Color(kind) => {
            let magnitude = match kind {
                ColorKind::AutoContrast | ColorKind::Equalize | ColorKind::Invert => 0.0,
                ColorKind::Solarize => m,
                ColorKind::Posterize => (4.0 * m).round(),
                _ => signed(0.9 * m),
            };
            AugOp::Color(ColorTransform { kind, magnitude })
        }
    }
}

/// Draw `n_ops` transforms (with replacement) from the full pool at magnitude `m ∈ [0, 1]`.
pub fn rand_augment(seed: u64, n_ops: usize, m: f64) -> Result<AugmentSpec> {
    rand_augment_from(&AugmentPool::default(), seed, n_ops, m)
}

pub fn rand_augment_from(pool: &AugmentPool, seed: u64, n_ops: usize, m: f64) -> Result<AugmentSpec> {
    if n_ops == 0 {
        return Err(CoreError::invalid("rand_augment needs at least one op"));
    }
    if pool.kinds.is_empty() {
        return Err(CoreError::invalid("augmentation pool is empty"));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(CoreError::invalid(format!("magnitude {m} outside [0, 1]")));
    }
    let mut rng = seed::rng(seed);
    let ops = (0..n_ops)
        .map(|_| {
            let kind = pool.kinds[rng.gen_range(0..pool.kinds.len())];
            sample_op(kind, m, &mut rng)
        })
        .collect();
    Ok(AugmentSpec {
        seed,
        magnitude: m,
        ops,
    })
}

/// Query `inr` under `spec` at grid-ordered `coords` (`[h·w, 2]`). Returns the
/// augmented normalized values and the validity mask.
pub fn augment_query<T: Scalar>(
    tape: &mut Tape<T>,
    inr: &Inr2d,
    spec: &AugmentSpec,
    coords: Var,
    height: usize,
    width: usize,
) -> Result<(Var, Vec<f64>)> {
    let g = spec.affine();
    let edited = apply_weightspace(inr, &g)?;
    let values = edited.query(tape, coords)?;
    let mask = mask_at(&tape.value(coords).to_f64_vec(), &g, &spec.cutouts());
    let mv = MaskedValues {
        values,
        mask,
        height,
        width,
    };
    let out = apply_colors(tape, &mv, &spec.colors(), &inr.norm())?;
    Ok((out, mv.mask))
}
