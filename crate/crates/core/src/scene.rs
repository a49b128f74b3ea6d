//! Analytic box/sphere scenes, a ray-caster that renders them, and the JSON
//! camera manifest used to store posed views.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::ImageGrid;
use crate::nerf::camera::{matvec3, norm3, Camera, Pose};
use crate::nerf::render::BACKGROUND;
use crate::nerf::sampling::PosedView;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPrim {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub color: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
    pub color: [f64; 3],
}

/// Cameras on a circle around the origin, all looking at it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRing {
    pub count: usize,
    pub radius: f64,
    pub elevation_deg: f64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
}

impl CameraRing {
    pub fn camera(&self) -> Camera {
        Camera {
            width: self.width,
            height: self.height,
            focal: self.focal,
        }
    }

    /// Pose at azimuth `az` (radians) on the ring.
    pub fn pose_at(&self, az: f64) -> Pose {
        let el = self.elevation_deg.to_radians();
        let eye = [
            self.radius * el.cos() * az.cos(),
            self.radius * el.cos() * az.sin(),
            self.radius * el.sin(),
        ];
        Pose::look_at(eye, [0.0; 3])
    }

    /// Evenly spaced training poses.
    pub fn poses(&self) -> Vec<Pose> {
        (0..self.count)
            .map(|k| self.pose_at(std::f64::consts::TAU * k as f64 / self.count as f64))
            .collect()
    }

    /// Poses halfway between consecutive training poses.
    pub fn held_out_poses(&self, n: usize) -> Vec<Pose> {
        let step = std::f64::consts::TAU / self.count as f64;
        (0..n)
            .map(|k| self.pose_at(step * (k as f64 * self.count as f64 / n.max(1) as f64).floor() + step / 2.0))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub boxes: Vec<BoxPrim>,
    pub spheres: Vec<Sphere>,
    pub ring: CameraRing,
    /// Direction toward the light; shading is Lambertian and view-independent.
    pub light: [f64; 3],
    /// Sub-pixel grid side used to anti-alias renders.
    pub supersample: usize,
    pub near: f64,
    pub far: f64,
}

const AMBIENT: f64 = 0.55;

impl SceneSpec {
    /// Three stacked colored boxes seen by 8 cameras at radius 4, 32×32 pixels.
    pub fn desk_boxes() -> Self {
        Self {
            boxes: vec![
                BoxPrim {
                    min: [-0.8, -0.6, -0.5],
                    max: [0.8, 0.6, 0.0],
                    color: [0.85, 0.3, 0.25],
                },
                BoxPrim {
                    min: [-0.55, -0.35, 0.0],
                    max: [0.0, 0.2, 0.7],
                    color: [0.2, 0.35, 0.85],
                },
                BoxPrim {
                    min: [0.2, -0.1, 0.0],
                    max: [0.6, 0.35, 0.35],
                    color: [0.25, 0.75, 0.3],
                },
            ],
            spheres: Vec::new(),
            ring: CameraRing {
                count: 8,
                radius: 4.0,
                elevation_deg: 30.0,
                width: 32,
                height: 32,
                focal: 44.8,
            },
            light: [0.5, 0.3, 0.8],
            supersample: 3,
            near: 2.0,
            far: 6.0,
        }
    }

    pub fn empty(ring: CameraRing) -> Self {
        Self {
            boxes: Vec::new(),
            spheres: Vec::new(),
            ..Self::desk_boxes()
        }
        .with_ring(ring)
    }

    pub fn with_ring(mut self, ring: CameraRing) -> Self {
        self.ring = ring;
        self
    }

    /// Radius of the smallest origin-centered sphere containing every primitive.
    pub fn bounding_radius(&self) -> f64 {
        let boxes = self.boxes.iter().map(|b| {
            let far: [f64; 3] = std::array::from_fn(|i| b.min[i].abs().max(b.max[i].abs()));
            norm3(far)
        });
        let spheres = self.spheres.iter().map(|s| norm3(s.center) + s.radius);
        boxes.chain(spheres).fold(0.0, f64::max)
    }

    /// Shaded color of the first surface hit in `[near, far]`, or the background.
    pub fn trace(&self, origin: [f64; 3], dir: [f64; 3]) -> [f64; 3] {
        let mut hit: Option<(f64, [f64; 3], [f64; 3])> = None;
        let mut consider = |t: f64, n: [f64; 3], c: [f64; 3]| {
            if t >= self.near && t <= self.far && hit.map_or(true, |h| t < h.0) {
                hit = Some((t, n, c));
            }
        };
        for b in &self.boxes {
            if let Some((t, n)) = ray_box(origin, dir, b) {
                consider(t, n, b.color);
            }
        }
        for s in &self.spheres {
            if let Some((t, n)) = ray_sphere(origin, dir, s) {
                consider(t, n, s.color);
            }
        }
        match hit {
            None => [BACKGROUND; 3],
            Some((_, n, c)) => {
                let l = self.light;
                let ln = norm3(l);
                let lambert = ((n[0] * l[0] + n[1] * l[1] + n[2] * l[2]) / ln).max(0.0);
                let shade = AMBIENT + (1.0 - AMBIENT) * lambert;
                c.map(|v| (v * shade).clamp(0.0, 1.0))
            }
        }
    }

    /// Anti-aliased render from `pose`.
    pub fn render(&self, pose: &Pose) -> Result<ImageGrid> {
        let cam = self.ring.camera();
        let s = self.supersample.max(1);
        let mut rgb = Vec::with_capacity(cam.width * cam.height * 3);
        for row in 0..cam.height {
            for col in 0..cam.width {
                let mut acc = [0.0; 3];
                for a in 0..s {
                    for b in 0..s {
                        let y = row as f64 + (a as f64 + 0.5) / s as f64;
                        let x = col as f64 + (b as f64 + 0.5) / s as f64;
                        let d = matvec3(&pose.rotation, cam.subpixel_direction(y, x));
                        let c = self.trace(pose.translation, d);
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                rgb.extend(acc.iter().map(|v| v / (s * s) as f64));
            }
        }
        ImageGrid::from_clamped(cam.height, cam.width, rgb)
    }

    /// Ring renders for training and `held_out` in-between renders.
    pub fn views(&self, held_out: usize) -> Result<(Vec<PosedView>, Vec<PosedView>)> {
        let make = |poses: Vec<Pose>| -> Result<Vec<PosedView>> {
            poses
                .into_iter()
                .map(|pose| Ok(PosedView { image: self.render(&pose)?, pose }))
                .collect()
        };
        Ok((make(self.ring.poses())?, make(self.ring.held_out_poses(held_out))?))
    }
}

/// Slab test; returns entry distance and outward normal of the entered face.
fn ray_box(o: [f64; 3], d: [f64; 3], b: &BoxPrim) -> Option<(f64, [f64; 3])> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let mut axis = 0;
    for i in 0..3 {
        if d[i].abs() < 1e-15 {
            if o[i] < b.min[i] || o[i] > b.max[i] {
                return None;
            }
            continue;
        }
        let (mut a, mut c) = ((b.min[i] - o[i]) / d[i], (b.max[i] - o[i]) / d[i]);
        if a > c {
            std::mem::swap(&mut a, &mut c);
        }
        if a > t0 {
            t0 = a;
            axis = i;
        }
        t1 = t1.min(c);
    }
    if t0 > t1 || t1 < 0.0 {
        return None;
    }
    let mut n = [0.0; 3];
    n[axis] = -d[axis].signum();
    Some((t0, n))
}

fn ray_sphere(o: [f64; 3], d: [f64; 3], s: &Sphere) -> Option<(f64, [f64; 3])> {
    let oc: [f64; 3] = std::array::from_fn(|i| o[i] - s.center[i]);
    let b = oc.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>();
    let c = oc.iter().map(|v| v * v).sum::<f64>() - s.radius * s.radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    let p: [f64; 3] = std::array::from_fn(|i| (o[i] + t * d[i] - s.center[i]) / s.radius);
    Some((t, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    /// Image path relative to the manifest.
    pub image: String,
    /// Row-major 4×4 camera-to-world matrix.
    pub pose: Vec<f64>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraManifest {
    pub camera: Camera,
    pub near: f64,
    pub far: f64,
    pub views: Vec<ViewRecord>,
}

impl CameraManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| CoreError::io(path, e))
    }

    /// Load `(train, test)` views with images resolved against `base`.
    pub fn load_views(&self, base: &Path) -> Result<(Vec<PosedView>, Vec<PosedView>)> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for v in &self.views {
            let m: [f64; 16] = v
                .pose
                .as_slice()
                .try_into()
                .map_err(|_| CoreError::invalid(format!("pose for {} must have 16 entries", v.image)))?;
            let view = PosedView {
                image: ImageGrid::load_png(&base.join(&v.image))?,
                pose: Pose::from_matrix(&m)?,
            };
            match v.split {
                Split::Train => train.push(view),
                Split::Test => test.push(view),
            }
        }
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_is_white() {
        let s = SceneSpec::empty(SceneSpec::desk_boxes().ring);
        let img = s.render(&s.ring.poses()[0]).unwrap();
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn desk_scene_has_foreground_in_every_view() {
        let s = SceneSpec::desk_boxes();
        for p in s.ring.poses() {
            let img = s.render(&p).unwrap();
            let fg = img.data().chunks(3).filter(|c| c.iter().any(|&v| v < 0.99)).count();
            assert!(fg > 100 && fg < 1000, "foreground pixels {fg}");
        }
    }

    #[test]
    fn box_hit_from_outside() {
        let b = BoxPrim {
            min: [-1.0; 3],
            max: [1.0; 3],
            color: [1.0; 3],
        };
        let (t, n) = ray_box([0.0, 0.0, 5.0], [0.0, 0.0, -1.0], &b).unwrap();
        assert_eq!(t, 4.0);
        assert_eq!(n, [0.0, 0.0, 1.0]);
    }
}
