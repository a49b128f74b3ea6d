//! Procedural images used as fitting targets and toy classification data.

use std::f64::consts::PI;

use rand::Rng as _;

use crate::error::Result;
use crate::image::ImageGrid;
use crate::inr2d::axis_coord;
use crate::seed;

/// Sum of a few random low-frequency sinusoids per channel, values in `[0.1, 0.9]`.
pub fn smooth_image(height: usize, width: usize, seed: u64) -> Result<ImageGrid> {
    let mut rng = seed::rng(seed);
    let waves: Vec<[f64; 4]> = (0..9)
        .map(|_| {
            [
                rng.gen_range(-2.5..2.5),
                rng.gen_range(-2.5..2.5),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.3..1.0),
            ]
        })
        .collect();
    let mut rgb = Vec::with_capacity(height * width * 3);
    for i in 0..height {
        for j in 0..width {
            let (x, y) = (axis_coord(j, width), axis_coord(i, height));
            for c in 0..3 {
                let mut s = 0.0;
                let mut norm = 0.0;
                for w in &waves[c * 3..c * 3 + 3] {
                    s += w[3] * (w[0] * x + w[1] * y + w[2]).sin();
                    norm += w[3];
                }
                rgb.push(0.5 + 0.4 * s / norm);
            }
        }
    }
    ImageGrid::new(height, width, rgb)
}

/// Linear ramp along `x` in red, along `y` in green, constant blue.
pub fn gradient_image(height: usize, width: usize) -> Result<ImageGrid> {
    let mut rgb = Vec::with_capacity(height * width * 3);
    for i in 0..height {
        for j in 0..width {
            let x = (axis_coord(j, width) + 1.0) / 2.0;
            let y = (axis_coord(i, height) + 1.0) / 2.0;
            rgb.extend_from_slice(&[0.1 + 0.8 * x, 0.1 + 0.8 * y, 0.5]);
        }
    }
    ImageGrid::new(height, width, rgb)
}

/// I.i.d. uniform noise, the adversarial case for a small INR.
pub fn noise_image(height: usize, width: usize, seed: u64) -> Result<ImageGrid> {
    let mut rng = seed::rng(seed);
    let rgb = (0..height * width * 3).map(|_| rng.gen::<f64>()).collect();
    ImageGrid::new(height, width, rgb)
}

/// Soft oriented stripes; the class sets the orientation out of `classes` evenly spaced angles.
pub fn bars_image(
    height: usize,
    width: usize,
    class: usize,
    classes: usize,
    seed: u64,
) -> Result<ImageGrid> {
    let mut rng = seed::rng(seed);
    let theta = PI * class as f64 / classes as f64 + rng.gen_range(-0.15..0.15);
    let freq = rng.gen_range(2.0..3.0);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let fg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.55..0.9));
    let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.45));
    let (c, s) = (theta.cos(), theta.sin());
    let mut rgb = Vec::with_capacity(height * width * 3);
    for i in 0..height {
        for j in 0..width {
            let (x, y) = (axis_coord(j, width), axis_coord(i, height));
            let t = 0.5 + 0.5 * (PI * freq * (c * x + s * y) + phase).sin();
            for k in 0..3 {
                rgb.push(bg[k] + (fg[k] - bg[k]) * t);
            }
        }
    }
    ImageGrid::new(height, width, rgb)
}
