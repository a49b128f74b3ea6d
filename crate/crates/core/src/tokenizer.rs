//! Learnable coordinate tokenizers.
//!
//! Every grid coordinate belongs to one token of `K = Pᴰ` members. Tokens are
//! stored token-major and the member order inside a token is fixed at build
//! time, so a token embedding always sees the same layout.
//!
//! Raw parameter layouts:
//! * uniform: none
//! * learnable-scale: `ρ[N]`, `x = c + (1 + tanh ρ)·d`
//! * learnable-centers-scale: `γ[N×D]` then `ρ[N]`, `c = sin γ`
//! * learnable-pixels (both inits): `γ[N×K×D]`, `x = sin γ`

use std::fmt;
use std::str::FromStr;

use izoo_autograd::{Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::ImageGrid;
use crate::inr2d::{axis_coord, Inr2d};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Uniform,
    LearnableScale,
    LearnableCentersScale,
    LearnablePixels,
    LearnablePixelsRandomInit,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Uniform,
        Strategy::LearnableScale,
        Strategy::LearnableCentersScale,
        Strategy::LearnablePixels,
        Strategy::LearnablePixelsRandomInit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::LearnableScale => "learnable-scale",
            Strategy::LearnableCentersScale => "learnable-centers-scale",
            Strategy::LearnablePixels => "learnable-pixels",
            Strategy::LearnablePixelsRandomInit => "learnable-pixels-random-init",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| CoreError::invalid(format!("unknown strategy {s:?}")))
    }
}

/// A coordinate field that can be queried on a tape.
pub trait Field {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn query_var<T: Scalar>(&self, tape: &mut Tape<T>, coords: Var) -> Result<Var>;
}

impl Field for Inr2d {
    fn in_dim(&self) -> usize {
        2
    }

    fn out_dim(&self) -> usize {
        3
    }

    fn query_var<T: Scalar>(&self, tape: &mut Tape<T>, coords: Var) -> Result<Var> {
        self.query(tape, coords)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenGrouping {
    strategy: Strategy,
    /// Grid resolution, slowest axis first (`[H, W]` or `[D, H, W]`).
    grid: Vec<usize>,
    patch: usize,
    /// Grid index of each token slot, token-major.
    members: Vec<usize>,
    /// Initial coordinates per slot, `N×K×D`.
    initial: Vec<f64>,
    centers: Vec<f64>,
    offsets: Vec<f64>,
    raw: Vec<f64>,
}

/// Coordinate of grid cell `index` in a grid of resolution `grid`; the last
/// grid axis is the first coordinate component.
fn cell_coord(grid: &[usize], index: usize) -> Vec<f64> {
    let dim = grid.len();
    let mut rem = index;
    let mut idx = vec![0; dim];
    for ax in (0..dim).rev() {
        idx[ax] = rem % grid[ax];
        rem /= grid[ax];
    }
    (0..dim)
        .map(|d| {
            let ax = dim - 1 - d;
            axis_coord(idx[ax], grid[ax])
        })
        .collect()
}

/// Grid indices of each uniform patch, patches and members both row-major.
fn patch_members(grid: &[usize], patch: usize) -> Vec<usize> {
    let dim = grid.len();
    let blocks: Vec<usize> = grid.iter().map(|g| g / patch).collect();
    let n_blocks: usize = blocks.iter().product();
    let k = patch.pow(dim as u32);
    let mut out = Vec::with_capacity(n_blocks * k);
    for b in 0..n_blocks {
        let mut bidx = vec![0; dim];
        let mut rem = b;
        for ax in (0..dim).rev() {
            bidx[ax] = rem % blocks[ax];
            rem /= blocks[ax];
        }
        for m in 0..k {
            let mut rem = m;
            let mut flat = 0;
            let mut cell = vec![0; dim];
            for ax in (0..dim).rev() {
                cell[ax] = bidx[ax] * patch + rem % patch;
                rem /= patch;
            }
            for ax in 0..dim {
                flat = flat * grid[ax] + cell[ax];
            }
            out.push(flat);
        }
    }
    out
}

impl TokenGrouping {
    /// Group a `grid` (2 or 3 axes) into patches of side `patch`.
    pub fn build(strategy: Strategy, grid: &[usize], patch: usize, seed: u64) -> Result<Self> {
        if !(2..=3).contains(&grid.len()) {
            return Err(CoreError::invalid("token grids must have 2 or 3 axes"));
        }
        if patch == 0 || grid.iter().any(|&g| g == 0 || g % patch != 0) {
            return Err(CoreError::invalid(format!(
                "patch size {patch} must divide every grid dimension {grid:?}"
            )));
        }
        let dim = grid.len();
        let k = patch.pow(dim as u32);
        let cells: usize = grid.iter().product();
        let n = cells / k;

        let members = if strategy == Strategy::LearnablePixelsRandomInit {
            let mut perm: Vec<usize> = (0..cells).collect();
            perm.shuffle(&mut seed::rng(seed));
            perm
        } else {
            patch_members(grid, patch)
        };
        let initial: Vec<f64> = members.iter().flat_map(|&m| cell_coord(grid, m)).collect();

        let mut centers = vec![0.0; n * dim];
        for t in 0..n {
            for d in 0..dim {
                let s: f64 = (0..k).map(|m| initial[(t * k + m) * dim + d]).sum();
                centers[t * dim + d] = s / k as f64;
            }
        }
        let offsets: Vec<f64> = (0..n * k * dim)
            .map(|i| initial[i] - centers[(i / (k * dim)) * dim + i % dim])
            .collect();

        let raw = match strategy {
            Strategy::Uniform => Vec::new(),
            Strategy::LearnableScale => vec![0.0; n],
            Strategy::LearnableCentersScale => {
                let mut r: Vec<f64> = centers.iter().map(|c| c.asin()).collect();
                r.extend(std::iter::repeat(0.0).take(n));
                r
            }
            Strategy::LearnablePixels | Strategy::LearnablePixelsRandomInit => {
                initial.iter().map(|x| x.asin()).collect()
            }
        };
        Ok(Self {
            strategy,
            grid: grid.to_vec(),
            patch,
            members,
            initial,
            centers,
            offsets,
            raw,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn dim(&self) -> usize {
        self.grid.len()
    }

    pub fn grid(&self) -> &[usize] {
        &self.grid
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn tokens(&self) -> usize {
        self.members.len() / self.per_token()
    }

    /// Members per token, `Pᴰ`.
    pub fn per_token(&self) -> usize {
        self.patch.pow(self.dim() as u32)
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn initial_coords(&self) -> &[f64] {
        &self.initial
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn is_learnable(&self) -> bool {
        !self.raw.is_empty()
    }

    pub fn set_raw(&mut self, raw: Vec<f64>) -> Result<()> {
        if raw.len() != self.raw.len() {
            return Err(CoreError::invalid(format!(
                "{} expects {} raw parameters, got {}",
                self.strategy,
                self.raw.len(),
                raw.len()
            )));
        }
        self.raw = raw;
        Ok(())
    }

    pub fn raw_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64(&[self.raw.len()], &self.raw)
    }

    /// `min(1/H, 1/W)` (or over all three axes).
    pub fn default_alpha(&self) -> f64 {
        1.0 / *self.grid.iter().max().unwrap() as f64
    }

    /// Token slot for each grid cell (inverse of [`members`](Self::members)).
    pub fn slot_of_cell(&self) -> Vec<usize> {
        let mut inv = vec![0; self.members.len()];
        for (slot, &cell) in self.members.iter().enumerate() {
            inv[cell] = slot;
        }
        inv
    }

    /// Effective coordinates `[N·K, D]` as a function of `raw` (shape `[len(raw)]`).
    pub fn activate<T: Scalar>(&self, tape: &mut Tape<T>, raw: Var) -> Result<Var> {
        let (n, k, d) = (self.tokens(), self.per_token(), self.dim());
        let out = match self.strategy {
            Strategy::Uniform => tape.constant(Tensor::from_f64(&[n * k, d], &self.initial)),
            Strategy::LearnableScale | Strategy::LearnableCentersScale => {
                let (centers, rho) = if self.strategy == Strategy::LearnableScale {
                    let c = tape.constant(Tensor::from_f64(&[n, 1, d], &self.centers));
                    (c, raw)
                } else {
                    let g = tape.slice(raw, 0, 0, n * d)?;
                    let c = tape.sin(g);
                    let c = tape.reshape(c, &[n, 1, d])?;
                    (c, tape.slice(raw, 0, n * d, n)?)
                };
                let t = tape.tanh(rho);
                let s = tape.add_scalar(t, 1.0);
                let s = tape.reshape(s, &[n, 1, 1])?;
                let offsets = tape.constant(Tensor::from_f64(&[n, k, d], &self.offsets));
                let scaled = tape.mul(offsets, s)?;
                let x = tape.add(scaled, centers)?;
                tape.reshape(x, &[n * k, d])?
            }
            Strategy::LearnablePixels | Strategy::LearnablePixelsRandomInit => {
                let x = tape.sin(raw);
                tape.reshape(x, &[n * k, d])?
            }
        };
        Ok(out)
    }

    /// Current effective coordinates, flat `N·K·D`.
    pub fn activated(&self) -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let raw = tape.constant(self.raw_tensor());
        let x = self
            .activate(&mut tape, raw)
            .expect("activation shapes are fixed at build time");
        tape.value(x).data().to_vec()
    }

    /// Values of `field` at the activated coordinates, shape `[N, K, C]`.
    pub fn query_tokens<T: Scalar, F: Field>(
        &self,
        tape: &mut Tape<T>,
        field: &F,
        raw: Var,
    ) -> Result<Var> {
        if field.in_dim() != self.dim() {
            return Err(CoreError::invalid(format!(
                "{}-D grouping cannot query a field over {} dimensions",
                self.dim(),
                field.in_dim()
            )));
        }
        let x = self.activate(tape, raw)?;
        let v = field.query_var(tape, x)?;
        Ok(tape.reshape(v, &[self.tokens(), self.per_token(), field.out_dim()])?)
    }

    /// Non-close regularizer summed over tokens at the current coordinates.
    pub fn reg_value(&self, alpha: f64) -> f64 {
        let x = self.activated();
        let chunk = self.per_token() * self.dim();
        x.chunks_exact(chunk).map(|t| reg_loss(t, self.dim(), alpha)).sum()
    }

    /// Unordered within-token pairs closer than `alpha`.
    pub fn close_pairs(&self, alpha: f64) -> usize {
        let x = self.activated();
        let chunk = self.per_token() * self.dim();
        x.chunks_exact(chunk)
            .map(|t| count_close_pairs(t, self.dim(), alpha))
            .sum()
    }
}

/// 2D grouping of an `h × w` grid.
pub fn build_grouping(strategy: Strategy, h: usize, w: usize, patch: usize, seed: u64) -> Result<TokenGrouping> {
    TokenGrouping::build(strategy, &[h, w], patch, seed)
}

/// 3D grouping of a `res³` volume into cubes of side `patch`.
pub fn volumize(strategy: Strategy, res: usize, patch: usize, seed: u64) -> Result<TokenGrouping> {
    TokenGrouping::build(strategy, &[res, res, res], patch, seed)
}

fn distance(points: &[f64], dim: usize, i: usize, j: usize) -> f64 {
    let mut s = 0.0;
    for d in 0..dim {
        let diff = points[i * dim + d] - points[j * dim + d];
        s += diff * diff;
    }
    s.sqrt()
}

/// `Σ_i Σ_{j≠i} ReLU(α − ‖x_i − x_j‖₂)` over one token's flat `n×dim` points.
pub fn reg_loss(points: &[f64], dim: usize, alpha: f64) -> f64 {
    let n = points.len() / dim;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let gap = alpha - distance(points, dim, i, j);
                if gap > 0.0 {
                    total += gap;
                }
            }
        }
    }
    total
}

pub fn count_close_pairs(points: &[f64], dim: usize, alpha: f64) -> usize {
    let n = points.len() / dim;
    let mut count = 0;
    for i in 0..n {
        for j in i + 1..n {
            if distance(points, dim, i, j) < alpha {
                count += 1;
            }
        }
    }
    count
}

/// Tape op: sum of [`reg_loss`] over consecutive tokens of `per_token` rows of
/// `coords` (`[N·K, D]`). Coincident points get a zero subgradient.
pub fn reg_loss_var<T: Scalar>(
    tape: &mut Tape<T>,
    coords: Var,
    per_token: usize,
    alpha: f64,
) -> Result<Var> {
    let shape = tape.shape(coords).to_vec();
    if shape.len() != 2 || per_token == 0 || shape[0] % per_token != 0 {
        return Err(CoreError::invalid(format!(
            "reg_loss expects [N*{per_token}, D] coordinates, got {shape:?}"
        )));
    }
    let dim = shape[1];
    let x = tape.value(coords).to_f64_vec();
    let chunk = per_token * dim;
    let value: f64 = x.chunks_exact(chunk).map(|t| reg_loss(t, dim, alpha)).sum();
    Ok(tape.custom(
        &[coords],
        Tensor::scalar(T::of(value)),
        Box::new(move |inputs, _out, g| {
            let x = inputs[0].to_f64_vec();
            let g = g.item().to_f64();
            let mut grad = vec![0.0; x.len()];
            for (t, pts) in x.chunks_exact(chunk).enumerate() {
                let base = t * chunk;
                for i in 0..per_token {
                    for j in 0..per_token {
                        if i == j {
                            continue;
                        }
                        let r = distance(pts, dim, i, j);
                        if r < alpha && r > 0.0 {
                            // Pair (i, j) and its mirror (j, i) both pull on x_i.
                            for d in 0..dim {
                                let u = (pts[i * dim + d] - pts[j * dim + d]) / r;
                                grad[base + i * dim + d] -= 2.0 * g * u;
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::from_f64(inputs[0].shape(), &grad))]
        }),
    ))
}

/// Snapshot written by `tokenize-vis`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupingDump {
    pub strategy: Strategy,
    pub grid: Vec<usize>,
    pub patch: usize,
    pub raw: Vec<f64>,
    /// `[N][K][D]` effective coordinates.
    pub activated: Vec<Vec<Vec<f64>>>,
}

impl From<&TokenGrouping> for GroupingDump {
    fn from(g: &TokenGrouping) -> Self {
        let (k, d) = (g.per_token(), g.dim());
        let x = g.activated();
        Self {
            strategy: g.strategy,
            grid: g.grid.clone(),
            patch: g.patch,
            raw: g.raw.clone(),
            activated: x
                .chunks_exact(k * d)
                .map(|t| t.chunks_exact(d).map(|p| p.to_vec()).collect())
                .collect(),
        }
    }
}

/// Distinct, saturated color for token `t` of `n` (golden-ratio hue walk).
pub fn token_color(t: usize, _n: usize) -> [f64; 3] {
    let h = (t as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b]
}

/// Draw each member coordinate of a 2D grouping as a dot in its token's color
/// over a dimmed, upscaled `background`.
pub fn render_grouping(g: &TokenGrouping, background: &ImageGrid, scale: usize) -> Result<ImageGrid> {
    if g.dim() != 2 {
        return Err(CoreError::invalid("only 2D groupings can be drawn"));
    }
    render_coords(&g.activated(), g.tokens(), g.per_token(), background, scale)
}

/// Like [`render_grouping`] for a bare `[tokens][per_token][2]` coordinate list.
pub fn render_coords(
    x: &[f64],
    n: usize,
    k: usize,
    background: &ImageGrid,
    scale: usize,
) -> Result<ImageGrid> {
    if x.len() != n * k * 2 || scale == 0 {
        return Err(CoreError::invalid(format!(
            "expected {} coordinates and a positive scale",
            n * k * 2
        )));
    }
    let (h, w) = (background.height() * scale, background.width() * scale);
    let mut rgb = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            let p = background.pixel(i / scale, j / scale);
            rgb.extend(p.iter().map(|v| 0.35 * v + 0.65));
        }
    }
    for t in 0..n {
        let color = token_color(t, n);
        for m in 0..k {
            let o = (t * k + m) * 2;
            let col = ((x[o] + 1.0) / 2.0 * w as f64).floor() as i64;
            let row = ((x[o + 1] + 1.0) / 2.0 * h as f64).floor() as i64;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (r, c) = (row + dr, col + dc);
                    if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
                        let o = (r as usize * w + c as usize) * 3;
                        rgb[o..o + 3].copy_from_slice(&color);
                    }
                }
            }
        }
    }
    ImageGrid::new(h, w, rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_by_four_patch_two() {
        let g = build_grouping(Strategy::Uniform, 4, 4, 2, 0).unwrap();
        assert_eq!(g.tokens(), 4);
        assert_eq!(g.per_token(), 4);
        assert_eq!(g.centers(), &[-0.5, -0.5, 0.5, -0.5, -0.5, 0.5, 0.5, 0.5]);
        assert_eq!(&g.members()[..4], &[0, 1, 4, 5]);
    }

    #[test]
    fn rejects_non_dividing_patch() {
        assert!(build_grouping(Strategy::Uniform, 4, 6, 4, 0).is_err());
        assert!(volumize(Strategy::Uniform, 10, 4, 0).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
    }
}
