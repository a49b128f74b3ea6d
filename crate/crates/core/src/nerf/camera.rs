//! Pinhole cameras, rigid poses and rotation utilities.
//!
//! Poses are camera-to-world. Cameras look down their local `−z` axis with
//! `+y` up and `+x` to the right.

use izoo_autograd::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

pub fn transpose3(a: &Mat3) -> Mat3 {
    std::array::from_fn(|r| std::array::from_fn(|c| a[c][r]))
}

pub fn matvec3(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|r| a[r][0] * v[0] + a[r][1] * v[1] + a[r][2] * v[2])
}

pub fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn hat(w: [f64; 3]) -> Mat3 {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

/// Rodrigues' formula.
pub fn so3_exp(w: [f64; 3]) -> Mat3 {
    let theta = norm3(w);
    let k = hat(w);
    let k2 = matmul3(&k, &k);
    let (a, b) = if theta < 1e-8 {
        (1.0 - theta * theta / 6.0, 0.5 - theta * theta / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    };
    std::array::from_fn(|r| std::array::from_fn(|c| IDENTITY3[r][c] + a * k[r][c] + b * k2[r][c]))
}

/// `∂R/∂ω_k` for `R = exp([ω]×)`.
pub fn so3_exp_jacobian(w: [f64; 3]) -> [Mat3; 3] {
    let theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let e = |k: usize| -> [f64; 3] { std::array::from_fn(|i| if i == k { 1.0 } else { 0.0 }) };
    if theta2 < 1e-20 {
        return std::array::from_fn(|k| hat(e(k)));
    }
    let r = so3_exp(w);
    let wx = hat(w);
    std::array::from_fn(|k| {
        // (ω_k [ω]× + [ω × (I − R) e_k]×) R / θ²
        let col: [f64; 3] = std::array::from_fn(|i| IDENTITY3[i][k] - r[i][k]);
        let inner = hat(cross(w, col));
        let m: Mat3 = std::array::from_fn(|i| {
            std::array::from_fn(|j| (w[k] * wx[i][j] + inner[i][j]) / theta2)
        });
        matmul3(&m, &r)
    })
}

/// Tape op producing the `[3, 3]` rotation `exp([ω]×)` from `ω` of shape `[3]`.
pub fn so3_exp_var<T: Scalar>(tape: &mut Tape<T>, omega: Var) -> Result<Var> {
    if tape.shape(omega) != [3] {
        return Err(CoreError::invalid("so3_exp expects a 3-vector"));
    }
    let w = tape.value(omega).to_f64_vec();
    let r = so3_exp([w[0], w[1], w[2]]);
    let flat: Vec<f64> = r.iter().flatten().copied().collect();
    Ok(tape.custom(
        &[omega],
        Tensor::from_f64(&[3, 3], &flat),
        Box::new(|inputs, _out, g| {
            let w = inputs[0].to_f64_vec();
            let jac = so3_exp_jacobian([w[0], w[1], w[2]]);
            let g = g.to_f64_vec();
            let grad: Vec<f64> = jac
                .iter()
                .map(|j| j.iter().flatten().zip(&g).map(|(a, b)| a * b).sum())
                .collect();
            vec![Some(Tensor::from_f64(&[3], &grad))]
        }),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Mat3,
    /// Camera center in world coordinates.
    pub translation: [f64; 3],
}

impl Pose {
    pub fn new(rotation: Mat3, translation: [f64; 3]) -> Result<Self> {
        let p = Self {
            rotation,
            translation,
        };
        let rtr = matmul3(&transpose3(&rotation), &rotation);
        let off = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| (rtr[i][j] - IDENTITY3[i][j]).abs())
            .fold(0.0, f64::max);
        if off > 1e-9 || det3(&rotation) < 0.0 {
            return Err(CoreError::invalid("rotation is not orthonormal with det +1"));
        }
        Ok(p)
    }

    /// Camera at `eye` looking at `target` with world `+z` as up.
    pub fn look_at(eye: [f64; 3], target: [f64; 3]) -> Self {
        let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        let unit = |v: [f64; 3]| {
            let n = norm3(v);
            [v[0] / n, v[1] / n, v[2] / n]
        };
        let back = unit(sub(eye, target));
        let mut up = [0.0, 0.0, 1.0];
        if norm3(cross(up, back)) < 1e-9 {
            up = [0.0, 1.0, 0.0];
        }
        let right = unit(cross(up, back));
        let true_up = cross(back, right);
        let rotation = std::array::from_fn(|r| [right[r], true_up[r], back[r]]);
        Self {
            rotation,
            translation: eye,
        }
    }

    /// Rotate about the camera center and shift it: `R ← exp([ω]×)·R`, `t ← t + v`.
    pub fn perturbed(&self, omega: [f64; 3], v: [f64; 3]) -> Self {
        Self {
            rotation: matmul3(&so3_exp(omega), &self.rotation),
            translation: std::array::from_fn(|i| self.translation[i] + v[i]),
        }
    }

    /// Row-major 4×4 camera-to-world matrix.
    pub fn to_matrix(&self) -> [f64; 16] {
        let mut m = [0.0; 16];
        for r in 0..3 {
            m[r * 4..r * 4 + 3].copy_from_slice(&self.rotation[r]);
            m[r * 4 + 3] = self.translation[r];
        }
        m[15] = 1.0;
        m
    }

    pub fn from_matrix(m: &[f64; 16]) -> Result<Self> {
        let rotation = std::array::from_fn(|r| [m[r * 4], m[r * 4 + 1], m[r * 4 + 2]]);
        Self::new(rotation, [m[3], m[7], m[11]])
    }
}

pub fn det3(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
}

impl Camera {
    /// Unit direction in camera coordinates through the center of pixel `(row, col)`.
    pub fn pixel_direction(&self, row: usize, col: usize) -> [f64; 3] {
        self.subpixel_direction(row as f64 + 0.5, col as f64 + 0.5)
    }

    /// Unit direction through the image point `(y, x)` in pixel units.
    pub fn subpixel_direction(&self, y: f64, x: f64) -> [f64; 3] {
        let d = [
            (x - self.width as f64 / 2.0) / self.focal,
            -(y - self.height as f64 / 2.0) / self.focal,
            -1.0,
        ];
        let n = norm3(d);
        [d[0] / n, d[1] / n, d[2] / n]
    }

    /// World-space origin and unit direction of the ray through pixel `index` (row-major).
    pub fn ray(&self, pose: &Pose, index: usize) -> ([f64; 3], [f64; 3]) {
        let d = self.pixel_direction(index / self.width, index % self.width);
        (pose.translation, matvec3(&pose.rotation, d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_is_rotation() {
        let r = so3_exp([0.3, -1.2, 0.7]);
        let p = Pose::new(r, [0.0; 3]);
        assert!(p.is_ok());
        let rz = so3_exp([0.0, 0.0, std::f64::consts::FRAC_PI_2]);
        assert!((rz[0][1] + 1.0).abs() < 1e-15 && (rz[1][0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn look_at_points_minus_z_at_target() {
        let p = Pose::look_at([4.0, 0.0, 1.0], [0.0; 3]);
        let fwd = matvec3(&p.rotation, [0.0, 0.0, -1.0]);
        let want = [-4.0 / 17f64.sqrt(), 0.0, -1.0 / 17f64.sqrt()];
        for i in 0..3 {
            assert!((fwd[i] - want[i]).abs() < 1e-12);
        }
        assert!(Pose::new(p.rotation, p.translation).is_ok());
    }

    #[test]
    fn matrix_round_trip() {
        let p = Pose::look_at([1.0, 2.0, 3.0], [0.0; 3]);
        assert_eq!(Pose::from_matrix(&p.to_matrix()).unwrap(), p);
    }
}
