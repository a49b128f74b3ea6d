use std::f64::consts::PI;

use izoo_autograd::{numeric_gradient, relative_error, Tape, Tensor};
use izoo_core::difaug::{
    apply_colors, apply_weightspace, augment_query, equalize_values, rand_augment, rand_augment_from, transform_mask, Affine2,
    AugOp, AugmentPool, AugmentSpec, ColorKind, ColorTransform, GeomTransform, MaskedValues,
};
use izoo_core::tokenizer::{build_grouping, Strategy};
use izoo_core::{grid_coords, Arch, Inr2d, NormConstants};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_affine(rng: &mut ChaCha8Rng) -> Affine2 {
    [
        GeomTransform::Rotate { theta: rng.gen_range(-PI..PI) },
        GeomTransform::ShearX { s: rng.gen_range(-0.5..0.5) },
        GeomTransform::ShearY { s: rng.gen_range(-0.5..0.5) },
        GeomTransform::Translate {
            dx: rng.gen_range(-0.6..0.6),
            dy: rng.gen_range(-0.6..0.6),
        },
    ]
    .iter()
    .map(|g| g.as_affine().unwrap())
    .fold(Affine2::IDENTITY, |acc, g| acc.then(&g))
}

/// Max |f'(A⁻¹(x − t)) − f(x)| over random `x`, evaluated on a tape of `T`.
fn identity_gap<T: izoo_autograd::Scalar>(inr: &Inr2d, g: &Affine2, rng: &mut ChaCha8Rng) -> f64 {
    let edited = apply_weightspace(inr, g).unwrap();
    let inv = g.inverse().unwrap();
    let xs: Vec<[f64; 2]> = (0..1000).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
    let pulled: Vec<f64> = xs.iter().flat_map(|&x| inv.apply(x)).collect();
    let xs: Vec<f64> = xs.into_iter().flatten().collect();
    let mut tape = Tape::<T>::new();
    let a = tape.constant(Tensor::from_f64(&[1000, 2], &pulled));
    let b = tape.constant(Tensor::from_f64(&[1000, 2], &xs));
    let fa = edited.query(&mut tape, a).unwrap();
    let fb = inr.query(&mut tape, b).unwrap();
    let (fa, fb) = (tape.value(fa).to_f64_vec(), tape.value(fb).to_f64_vec());
    fa.iter().zip(&fb).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

#[test]
fn weightspace_edit_satisfies_defining_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for i in 0..20 {
        let inr = Inr2d::siren_init(Arch::preset("cifar").unwrap(), i).unwrap();
        let g = random_affine(&mut rng);
        let e32 = identity_gap::<f32>(&inr, &g, &mut rng);
        let e64 = identity_gap::<f64>(&inr, &g, &mut rng);
        assert!(e32 < 1e-5, "f32 gap {e32:e}");
        assert!(e64 < 1e-10, "f64 gap {e64:e}");
    }
}

#[test]
fn edit_touches_only_the_first_layer() {
    let inr = Inr2d::siren_init(Arch::preset("cifar").unwrap(), 1).unwrap();
    let g = random_affine(&mut ChaCha8Rng::seed_from_u64(1));
    let e = apply_weightspace(&inr, &g).unwrap();
    assert_ne!(e.layers()[0], inr.layers()[0]);
    assert_eq!(e.layers()[1..], inr.layers()[1..]);
}

#[test]
fn rotation_special_cases() {
    let inr = Inr2d::siren_init(Arch::preset("cifar").unwrap(), 2).unwrap();
    let zero = GeomTransform::Rotate { theta: 0.0 }.as_affine().unwrap();
    assert_eq!(apply_weightspace(&inr, &zero).unwrap(), inr);
    let half = GeomTransform::Rotate { theta: PI }.as_affine().unwrap();
    let e = apply_weightspace(&inr, &half).unwrap();
    let (l, l0) = (&e.layers()[0], &inr.layers()[0]);
    for (a, b) in l.weight.iter().zip(&l0.weight) {
        assert!((a + b).abs() < 1e-15);
    }
    assert_eq!(l.bias, l0.bias);
    let singular = Affine2 {
        a: [[1.0, 2.0], [0.5, 1.0]],
        t: [0.0; 2],
    };
    assert!(apply_weightspace(&inr, &singular).is_err());
}

#[test]
fn composition_matches_sequential_edits() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inr = Inr2d::siren_init(Arch::preset("cifar").unwrap(), 3).unwrap();
    for _ in 0..10 {
        let (g1, g2) = (random_affine(&mut rng), random_affine(&mut rng));
        let seq = apply_weightspace(&apply_weightspace(&inr, &g1).unwrap(), &g2).unwrap();
        let once = apply_weightspace(&inr, &g1.then(&g2)).unwrap();
        let (a, b) = (&seq.layers()[0], &once.layers()[0]);
        for (x, y) in a.weight.iter().chain(&a.bias).zip(b.weight.iter().chain(&b.bias)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    let theta = 0.7;
    let r = GeomTransform::Rotate { theta }.as_affine().unwrap();
    let back = GeomTransform::Rotate { theta: -theta }.as_affine().unwrap();
    let id = r.then(&back);
    for i in 0..2 {
        for j in 0..2 {
            assert!((id.a[i][j] - Affine2::IDENTITY.a[i][j]).abs() < 1e-12);
        }
        assert!(id.t[i].abs() < 1e-12);
    }
}

#[test]
fn mask_examples() {
    let ones = transform_mask(16, 16, &Affine2::IDENTITY, &[]);
    assert!(ones.iter().all(|&m| m == 1.0));
    let away = GeomTransform::Translate { dx: 2.0, dy: 0.0 }.as_affine().unwrap();
    assert!(transform_mask(16, 16, &away, &[]).iter().all(|&m| m == 0.0));

    // 45°: the rotated square keeps its inscribed disk and loses the corners.
    let rot = GeomTransform::Rotate { theta: PI / 4.0 }.as_affine().unwrap();
    let m = transform_mask(64, 64, &rot, &[]);
    let ratio = m.iter().sum::<f64>() / m.len() as f64;
    assert!((0.6..=0.9).contains(&ratio), "area ratio {ratio}");
    for (p, &v) in grid_coords(64, 64).iter().zip(&m) {
        let r = p[0].hypot(p[1]);
        if r < 0.95 {
            assert_eq!(v, 1.0);
        }
        if p[0].abs() > 0.9 && p[1].abs() > 0.9 {
            assert_eq!(v, 0.0);
        }
    }
}

/// Histogram equalization written directly from the 256-bin CDF definition.
fn equalize_oracle(levels: &[f64]) -> Vec<f64> {
    let bins: Vec<usize> = levels.iter().map(|v| ((v * 256.0) as usize).min(255)).collect();
    let n = bins.len();
    let cdf = |b: usize| bins.iter().filter(|&&x| x <= b).count();
    let cdf_min = cdf(*bins.iter().min().unwrap());
    bins.iter().map(|&b| (cdf(b) - cdf_min) as f64 / (n - cdf_min) as f64).collect()
}

#[test]
fn equalize_two_level_image_value_and_gradient() {
    // 2×2 image, each channel half 0.25 and half 0.75.
    let u = [0.25, 0.75, 0.25, 0.75, 0.25, 0.75, 0.75, 0.25, 0.75, 0.75, 0.25, 0.25];
    let mask = [1.0; 4];
    let out = equalize_values(&u, &mask);
    for c in 0..3 {
        let ch: Vec<f64> = (0..4).map(|i| u[i * 3 + c]).collect();
        let want = equalize_oracle(&ch);
        for i in 0..4 {
            assert_eq!(out[i * 3 + c], want[i]);
        }
        let got: Vec<f64> = (0..4).map(|i| out[i * 3 + c]).collect();
        assert_eq!(got.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(got.iter().cloned().fold(0.0, f64::max), 1.0);
    }

    // Through the tape the equalize step passes gradients as identity.
    let norm = NormConstants::IDENTITY;
    let op = ColorTransform::new(ColorKind::Equalize, 0.0).unwrap();
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(&[4, 3], &u));
    let mv = MaskedValues {
        values: x,
        mask: mask.to_vec(),
        height: 2,
        width: 2,
    };
    let y = apply_colors(&mut tape, &mv, &[op], &norm).unwrap();
    assert_eq!(tape.value(y).to_f64_vec(), out);
    let w: Vec<f64> = (0..12).map(|i| i as f64 - 5.5).collect();
    let wv = tape.constant(Tensor::from_f64(&[4, 3], &w));
    let p = tape.mul(y, wv).unwrap();
    let s = tape.sum(p);
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.wrt(x).to_f64_vec(), w);
}

#[test]
fn invert_twice_is_identity_on_masked_region() {
    let norm = NormConstants::IMAGENET;
    let inv = ColorTransform::new(ColorKind::Invert, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v: Vec<f64> = (0..48).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mask: Vec<f64> = (0..16).map(|i| (i % 3 != 0) as u8 as f64).collect();
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[16, 3], &v));
    let mv = MaskedValues {
        values: x,
        mask: mask.clone(),
        height: 4,
        width: 4,
    };
    let y = apply_colors(&mut tape, &mv, &[inv, inv], &norm).unwrap();
    let y = tape.value(y).to_f64_vec();
    for i in 0..16 {
        for c in 0..3 {
            let want = if mask[i] > 0.0 { v[i * 3 + c] } else { 0.0 };
            assert!((y[i * 3 + c] - want).abs() < 1e-12);
        }
    }
}

/// Equalize and posterize replaced by an identity op. Downstream of them only
/// ops whose Jacobian does not depend on the input point are allowed, so the
/// finite differences of this chain equal the Jacobian of the straight-through
/// surrogate `v + stopgrad(T(v) − v)` exactly.
fn surrogate(spec: &AugmentSpec) -> Option<AugmentSpec> {
    let mut seen = false;
    let mut ops = Vec::new();
    for op in &spec.ops {
        let op = match op {
            AugOp::Color(c) if !c.kind.differentiable() => {
                seen = true;
                AugOp::Color(ColorTransform::new(ColorKind::Brightness, 0.0).unwrap())
            }
            AugOp::Color(c) if seen && matches!(c.kind, ColorKind::Solarize | ColorKind::AutoContrast) => return None,
            other => *other,
        };
        ops.push(op);
    }
    Some(AugmentSpec { ops, ..spec.clone() })
}

#[test]
fn gradients_reach_tokenizer_coordinates_through_augmentation() {
    let inr = Inr2d::siren_init(Arch::preset("cifar").unwrap(), 6).unwrap();
    let g = build_grouping(Strategy::LearnablePixels, 8, 8, 8, 0).unwrap();
    let raw = Tensor::from_vec(&[g.raw().len()], g.raw().to_vec());
    let weights = Tensor::from_vec(&[64, 3], (0..192).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect());
    let loss = |spec: &AugmentSpec, tape: &mut Tape<f64>, r| {
        let coords = g.activate(tape, r).unwrap();
        let (v, _) = augment_query(tape, &inr, spec, coords, 8, 8).unwrap();
        let w = tape.constant(weights.clone());
        let p = tape.mul(v, w)?;
        Ok(tape.sum(p))
    };
    let (mut checked, mut with_residual) = (0, 0);
    for seed in 0..80 {
        let spec = rand_augment(seed, 3, 0.4).unwrap();
        let Some(oracle) = surrogate(&spec) else { continue };
        let mut tape = Tape::<f64>::new();
        let r = tape.leaf(raw.clone());
        let l = loss(&spec, &mut tape, r).unwrap();
        let analytic = tape.backward(l).unwrap().wrt(r).to_f64_vec();
        let numeric = numeric_gradient(&|t: &mut Tape<f64>, r| loss(&oracle, t, r), &raw, 1e-7).unwrap();
        let worst = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| relative_error(*a, *n))
            .fold(0.0, f64::max);
        assert!(worst < 1e-5, "seed {seed} {:?}: {worst:e}", spec.ops);
        checked += 1;
        with_residual += (oracle != spec) as usize;
    }
    assert!(checked >= 60 && with_residual >= 10, "{checked} {with_residual}");
}

#[test]
fn seeded_draws_replay() {
    let a = rand_augment(12, 4, 0.7).unwrap();
    let b = rand_augment(12, 4, 0.7).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_ne!(a, rand_augment(13, 4, 0.7).unwrap());
    assert!(rand_augment(0, 0, 0.5).is_err());
    let affine = rand_augment_from(&AugmentPool::affine_only(), 3, 5, 1.0).unwrap();
    assert!(affine.ops.iter().all(|op| matches!(op, AugOp::Geom(_))));
}

#[test]
fn zero_magnitude_pool_is_identity() {
    let inr = Inr2d::siren_init(Arch::preset("cifar").unwrap(), 2).unwrap();
    let coords = grid_coords(8, 8).into_iter().flatten().collect::<Vec<_>>();
    let plain = inr.query_points(&coords).unwrap();
    for seed in 0..20 {
        let spec = rand_augment_from(&AugmentPool::magnitude_only(), seed, 1, 0.0).unwrap();
        let mut tape = Tape::<f32>::new();
        let c = tape.constant(Tensor::from_f64(&[64, 2], &coords));
        let (v, mask) = augment_query(&mut tape, &inr, &spec, c, 8, 8).unwrap();
        let v = tape.value(v).to_f64_vec();
        for (i, m) in mask.iter().enumerate() {
            if *m > 0.0 {
                for ch in 0..3 {
                    assert!((v[i * 3 + ch] - plain[i * 3 + ch]).abs() < 1e-5, "{:?}", spec.ops);
                }
            }
        }
    }
}
