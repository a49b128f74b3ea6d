use izoo_autograd::{grad_check, Tensor};
use izoo_core::nerf::camera::{so3_exp, so3_exp_jacobian};
use izoo_core::nerf::fit::render_view;
use izoo_core::nerf::metrics::re_at;
use izoo_core::nerf::refine::{photometric_loss_var, PixelSet};
use izoo_core::nerf::render::composite_var;
use izoo_core::nerf::sampling::RaySampler;
use izoo_core::nerf::{
    adaptive_sample_rays, composite, fit_scene, pose_error, pose_metrics, posenc, random_perturbation, refine_pose, Camera,
    Inr3d, NerfArch, Pose, PosedView, RefineConfig, RenderConfig, SamplingConfig, SceneFitConfig,
};
use izoo_core::scene::{CameraRing, SceneSpec};
use izoo_core::ImageGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn render_cfg() -> RenderConfig {
    RenderConfig::default()
}

#[test]
fn homogeneous_medium_matches_closed_form() {
    let cfg = render_cfg();
    let depths = cfg.depths(1, None);
    let deltas = cfg.deltas(&depths);
    let c = [0.2, 0.5, 0.9];
    for sigma0 in [0.1, 1.0, 10.0] {
        let sigma = vec![sigma0; 64];
        let rgb: Vec<f64> = (0..64).flat_map(|_| c).collect();
        let out = composite(&sigma, &rgb, &deltas, 64);
        let t = (-4.0 * sigma0).exp();
        for k in 0..3 {
            let want = c[k] * (1.0 - t) + t;
            assert!((out.colors[k] - want).abs() < 1e-3, "σ₀={sigma0}: {} vs {want}", out.colors[k]);
        }
    }
}

#[test]
fn weights_and_transmittance_partition_unity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = render_cfg();
    let deltas = cfg.deltas(&cfg.depths(50, Some(&mut rng)));
    let sigma: Vec<f64> = (0..50 * 64).map(|_| rng.gen_range(0.0..5.0)).collect();
    let rgb: Vec<f64> = (0..50 * 64 * 3).map(|_| rng.gen::<f64>()).collect();
    let out = composite(&sigma, &rgb, &deltas, 64);
    for r in 0..50 {
        let s: f64 = out.weights[r * 64..(r + 1) * 64].iter().sum::<f64>() + out.transmittance[r];
        assert!((s - 1.0).abs() < 1e-6);
    }
    let empty = composite(&vec![0.0; 50 * 64], &rgb, &deltas, 64);
    assert!(empty.colors.iter().all(|&c| c == 1.0));

    let doubled: Vec<f64> = sigma.iter().map(|s| 2.0 * s).collect();
    let more = composite(&doubled, &rgb, &deltas, 64);
    for (a, b) in more.transmittance.iter().zip(&out.transmittance) {
        assert!(a <= b);
    }
}

#[test]
fn compositing_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = RenderConfig {
        samples: 8,
        ..render_cfg()
    };
    let deltas = cfg.deltas(&cfg.depths(3, None));
    let n_sig = 3 * 8;
    let mut point: Vec<f64> = (0..n_sig).map(|_| rng.gen_range(0.0..3.0)).collect();
    point.extend((0..n_sig * 3).map(|_| rng.gen::<f64>()));
    let w: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let report = grad_check(
        |tape, x| {
            let s = tape.slice(x, 0, 0, n_sig)?;
            let s = tape.reshape(s, &[3, 8])?;
            let c = tape.slice(x, 0, n_sig, n_sig * 3)?;
            let c = tape.reshape(c, &[3, 8, 3])?;
            let out = composite_var(tape, s, c, deltas.clone()).unwrap();
            let wv = tape.constant(Tensor::from_vec(&[3, 3], w.clone()));
            let p = tape.mul(out, wv)?;
            Ok(tape.sum(p))
        },
        &Tensor::from_vec(&[point.len()], point),
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{:e}", report.max_rel_error);
}

#[test]
fn posenc_examples() {
    let p = [0.3, -0.2, 0.7];
    assert_eq!(posenc(&p, 0), p.to_vec());
    let e = posenc(&[0.0; 3], 10);
    assert_eq!(e.len(), 63);
    for k in 0..10 {
        assert!(e[3 + 6 * k..6 + 6 * k].iter().all(|&v| v == 0.0));
        assert!(e[6 + 6 * k..9 + 6 * k].iter().all(|&v| v == 1.0));
    }
    let e = posenc(&p, 2);
    assert!((e[9 + 1] - (2.0 * std::f64::consts::PI * p[1]).sin()).abs() < 1e-15);
}

#[test]
fn so3_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    for _ in 0..50 {
        let w: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
        let jac = so3_exp_jacobian(w);
        for k in 0..3 {
            let (mut a, mut b) = (w, w);
            a[k] += h;
            b[k] -= h;
            let (ra, rb) = (so3_exp(a), so3_exp(b));
            for i in 0..3 {
                for j in 0..3 {
                    let fd = (ra[i][j] - rb[i][j]) / (2.0 * h);
                    assert!((fd - jac[k][i][j]).abs() < 1e-8, "{fd} vs {}", jac[k][i][j]);
                }
            }
        }
    }
}

#[test]
fn pose_loss_gradient_matches_finite_differences() {
    let inr = Inr3d::init(
        NerfArch {
            depth: 3,
            width: 16,
            levels: 3,
        },
        4,
    )
    .unwrap();
    let cam = Camera {
        width: 4,
        height: 4,
        focal: 5.0,
    };
    let cfg = RenderConfig {
        samples: 16,
        ..render_cfg()
    };
    let gt = Pose::look_at([0.0, -4.0, 1.0], [0.0; 3]);
    let image = ImageGrid::from_clamped(4, 4, (0..48).map(|i| 0.3 + 0.01 * i as f64).collect()).unwrap();
    let pixels = PixelSet::new(&cam, &image, &(0..16).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let xi: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let report = grad_check(
            |tape, x| {
                let layers = inr.bind(tape, false);
                let w = tape.slice(x, 0, 0, 3)?;
                let v = tape.slice(x, 0, 3, 3)?;
                Ok(photometric_loss_var(tape, &layers, inr.levels(), &gt, w, v, &pixels, &cfg).unwrap())
            },
            &Tensor::from_vec(&[6], xi),
            // ReLU kinks: a 1e-6 step straddles one now and then.
            1e-8,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}

fn half_white_view() -> PosedView {
    let rgb = (0..32 * 32)
        .flat_map(|p| if p % 32 < 16 { [1.0; 3] } else { [0.2, 0.4, 0.6] })
        .collect();
    PosedView {
        image: ImageGrid::new(32, 32, rgb).unwrap(),
        pose: Pose::look_at([0.0, -4.0, 0.0], [0.0; 3]),
    }
}

#[test]
fn adaptive_share_matches_expectation() {
    let cam = Camera {
        width: 32,
        height: 32,
        focal: 40.0,
    };
    let views = [half_white_view()];
    let cfg = SamplingConfig {
        white_threshold: 0.99,
        nonwhite_fraction: 0.5,
    };
    let batch = adaptive_sample_rays(cam, &views, 100_000, cfg, 7).unwrap();
    let sampler = RaySampler::new(cam, &views, cfg).unwrap();
    let nonwhite = batch.sources.iter().filter(|&&(v, p)| !sampler.is_white(v, p)).count();
    let share = nonwhite as f64 / batch.len() as f64;
    assert!((share - 0.75).abs() < 0.01, "share {share}");
    let again = adaptive_sample_rays(cam, &views, 100_000, cfg, 7).unwrap();
    assert_eq!(batch.sources, again.sources);
}

#[test]
fn all_nonwhite_image_samples_uniformly() {
    let cam = Camera {
        width: 8,
        height: 8,
        focal: 10.0,
    };
    let views = [PosedView {
        image: ImageGrid::filled(8, 8, [0.3, 0.3, 0.3]).unwrap(),
        pose: Pose::look_at([0.0, -4.0, 0.0], [0.0; 3]),
    }];
    let uniform = SamplingConfig {
        nonwhite_fraction: 0.0,
        ..SamplingConfig::default()
    };
    let a = adaptive_sample_rays(cam, &views, 500, SamplingConfig::default(), 1).unwrap();
    let b = adaptive_sample_rays(cam, &views, 500, uniform, 1).unwrap();
    assert_eq!(a.sources, b.sources);
    // An all-white view falls back to uniform as well.
    let white = [PosedView {
        image: ImageGrid::filled(8, 8, [1.0; 3]).unwrap(),
        ..views[0].clone()
    }];
    let c = adaptive_sample_rays(cam, &white, 500, SamplingConfig::default(), 1).unwrap();
    assert_eq!(c.sources, b.sources);
}

fn rot_z(deg: f64) -> [[f64; 3]; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

#[test]
fn pose_metric_examples() {
    let gt = Pose::look_at([1.0, -3.0, 2.0], [0.0; 3]);
    let same = pose_error(&gt, &gt);
    assert_eq!((same.te, same.re), (0.0, 0.0));
    for axis in [[1.0, 0.0, 0.0], [0.0, 0.6, 0.8]] {
        let flipped = gt.perturbed(axis.map(|a| a * std::f64::consts::PI), [0.0; 3]);
        assert!((pose_error(&flipped, &gt).re - 180.0).abs() < 1e-6);
    }
    let r = izoo_core::nerf::camera::matmul3(&gt.rotation, &rot_z(30.0));
    let est = Pose::new(r, [1.0, -3.0, 2.5]).unwrap();
    let e = pose_error(&est, &gt);
    assert!((e.re - 30.0).abs() < 1e-9 && (e.te - 0.5).abs() < 1e-12);
    // The RE@β rule is strict.
    let exact = izoo_core::nerf::PoseError { te: 0.0, re: 30.0 };
    assert_eq!(re_at(&[exact], 30.0), 0.0);
    // Symmetric in its arguments.
    assert!((pose_error(&gt, &est).re - e.re).abs() < 1e-12);
    let m = pose_metrics(&[(gt, gt), (est, gt)]);
    assert_eq!((m.re_at_5, m.re_at_15), (0.5, 0.5));
    assert!((m.te - 0.25).abs() < 1e-12);
}

fn small_scene() -> (SceneSpec, Camera, Vec<PosedView>, Vec<PosedView>) {
    let base = SceneSpec::desk_boxes();
    let ring = CameraRing {
        width: 16,
        height: 16,
        focal: base.ring.focal / 2.0,
        ..base.ring
    };
    let scene = base.with_ring(ring);
    let (train, test) = scene.views(1).unwrap();
    (scene, ring.camera(), train, test)
}

fn small_fit_cfg(steps: usize) -> SceneFitConfig {
    SceneFitConfig {
        steps,
        rays_per_batch: 128,
        arch: NerfArch {
            depth: 3,
            width: 32,
            levels: 4,
        },
        render: RenderConfig {
            samples: 32,
            ..render_cfg()
        },
        ..SceneFitConfig::default()
    }
}

#[test]
fn untrained_field_renders_near_white_and_fits_deterministically() {
    let (_, cam, train, test) = small_scene();
    let default_arch = SceneFitConfig {
        arch: NerfArch::default(),
        ..small_fit_cfg(0)
    };
    let zero = fit_scene(cam, &train, &test, &default_arch).unwrap();
    let img = render_view(&zero.inr, &cam, &test[0].pose, &default_arch.render).unwrap();
    let mean = img.data().iter().sum::<f64>() / img.data().len() as f64;
    assert!(mean > 0.8, "mean {mean}");
    let a = fit_scene(cam, &train, &test, &small_fit_cfg(20)).unwrap();
    let b = fit_scene(cam, &train, &test, &small_fit_cfg(20)).unwrap();
    assert_eq!(a.inr, b.inr);
    assert_eq!(a.psnr.to_bits(), b.psnr.to_bits());
}

#[test]
fn refinement_keeps_ground_truth_and_never_worsens() {
    let (_, cam, train, test) = small_scene();
    let fit = fit_scene(cam, &train, &test, &small_fit_cfg(150)).unwrap();
    let cfg = RefineConfig {
        steps: 40,
        rays: 64,
        render: small_fit_cfg(0).render,
        ..RefineConfig::default()
    };
    let gt = train[1].pose;
    // Target rendered by the field itself, so the ground truth is an exact minimum.
    let target = render_view(&fit.inr, &cam, &gt, &cfg.render).unwrap();
    let res = refine_pose(&fit.inr, &cam, &target, &gt, &cfg).unwrap();
    for i in 0..3 {
        assert!((res.pose.translation[i] - gt.translation[i]).abs() < 1e-4);
        for j in 0..3 {
            assert!((res.pose.rotation[i][j] - gt.rotation[i][j]).abs() < 1e-4);
        }
    }

    for seed in 0..3 {
        let (w, v) = random_perturbation(seed, 5.0, 0.4);
        let init = gt.perturbed(w, v);
        let res = refine_pose(&fit.inr, &cam, &train[1].image, &init, &cfg).unwrap();
        assert!(res.loss <= res.initial_loss);
    }
}

#[test]
fn random_perturbation_has_requested_size() {
    for seed in 0..20 {
        let (w, v) = random_perturbation(seed, 5.0, 0.4);
        let gt = Pose::look_at([0.0, -4.0, 1.0], [0.0; 3]);
        let e = pose_error(&gt.perturbed(w, v), &gt);
        assert!((e.re - 5.0).abs() < 1e-9 && (e.te - 0.4).abs() < 1e-12);
    }
}
