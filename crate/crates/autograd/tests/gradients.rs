use std::f64::consts::FRAC_PI_2;

use izoo_autograd::{grad_check, BackwardFn, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;
const TRIALS: u64 = 100;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
}

/// Reduce any output to a scalar through a fixed random projection.
fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let w = random(&mut rng, tape.shape(v));
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

/// Run `TRIALS` gradient checks of `f` at random points of the given shape.
fn check_op<F>(name: &str, shape: &[usize], f: F)
where
    F: Fn(&mut Tape<f64>, Var, u64) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let point = random(&mut rng, shape);
        let report = grad_check(
            |tape, x| {
                let y = f(tape, x, trial)?;
                project(tape, y, trial)
            },
            &point,
            H,
        )
        .unwrap();
        worst = worst.max(report.max_rel_error);
    }
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
}

#[test]
fn elementwise_unary_ops() {
    check_op("neg", &[3, 4], |t, x, _| Ok(t.neg(x)));
    check_op("scale", &[3, 4], |t, x, _| Ok(t.scale(x, -1.7)));
    check_op("add_scalar", &[3, 4], |t, x, _| Ok(t.add_scalar(x, 0.3)));
    check_op("sin", &[3, 4], |t, x, _| Ok(t.sin(x)));
    check_op("cos", &[3, 4], |t, x, _| Ok(t.cos(x)));
    check_op("tanh", &[3, 4], |t, x, _| Ok(t.tanh(x)));
    check_op("relu", &[3, 4], |t, x, _| Ok(t.relu(x)));
    check_op("sigmoid", &[3, 4], |t, x, _| Ok(t.sigmoid(x)));
    check_op("exp", &[3, 4], |t, x, _| Ok(t.exp(x)));
    check_op("square", &[3, 4], |t, x, _| Ok(t.square(x)));
    // Positive-domain ops see x² + 0.5.
    check_op("log", &[3, 4], |t, x, _| {
        let s = t.square(x);
        let p = t.add_scalar(s, 0.5);
        Ok(t.log(p))
    });
    check_op("sqrt", &[3, 4], |t, x, _| {
        let s = t.square(x);
        let p = t.add_scalar(s, 0.5);
        Ok(t.sqrt(p))
    });
}

#[test]
fn broadcasting_binary_ops() {
    for (name, other) in [("same", vec![3, 4]), ("row", vec![4]), ("col", vec![3, 1]), ("scalar", vec![])] {
        let other = other.clone();
        let o2 = other.clone();
        check_op(&format!("add/{name}"), &[3, 4], move |t, x, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s + 7);
            let y = t.leaf(random(&mut rng, &other));
            t.add(x, y)
        });
        let o = o2.clone();
        check_op(&format!("sub/{name}"), &[3, 4], move |t, x, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s + 7);
            let y = t.constant(random(&mut rng, &o));
            t.sub(y, x)
        });
        let o = o2.clone();
        check_op(&format!("mul/{name}"), &[3, 4], move |t, x, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s + 7);
            let y = t.constant(random(&mut rng, &o));
            t.mul(x, y)
        });
        let o = o2.clone();
        check_op(&format!("div/{name}"), &[3, 4], move |t, x, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s + 7);
            let y = t.constant(random(&mut rng, &o));
            let sq = t.square(x);
            let d = t.add_scalar(sq, 0.5);
            t.div(y, d)
        });
    }
    // Gradient into the broadcast operand itself.
    check_op("mul/into-row", &[4], |t, x, s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s + 11);
        let y = t.constant(random(&mut rng, &[3, 4]));
        t.mul(y, x)
    });
    check_op("div/into-col", &[3, 1], |t, x, s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s + 11);
        let y = t.constant(random(&mut rng, &[3, 4]));
        let sq = t.square(x);
        let d = t.add_scalar(sq, 0.5);
        t.div(y, d)
    });
}

#[test]
fn reductions_and_losses() {
    check_op("sum", &[3, 4], |t, x, _| Ok(t.sum(x)));
    check_op("mean", &[3, 4], |t, x, _| Ok(t.mean(x)));
    check_op("sum_axis0", &[3, 4, 2], |t, x, _| t.sum_axis(x, 0));
    check_op("sum_axis1", &[3, 4, 2], |t, x, _| t.sum_axis(x, 1));
    check_op("mean_axis2", &[3, 4, 2], |t, x, _| t.mean_axis(x, 2));
    check_op("mse", &[3, 4], |t, x, s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s + 3);
        let y = t.constant(random(&mut rng, &[3, 4]));
        t.mse(x, y)
    });
    check_op("softmax_xent", &[5, 3], |t, x, s| {
        let labels: Vec<usize> = (0..5).map(|i| ((i as u64 + s) % 3) as usize).collect();
        t.softmax_cross_entropy(x, &labels)
    });
    check_op("softmax", &[3, 4], |t, x, _| Ok(t.softmax(x)));
}

#[test]
fn linear_algebra_ops() {
    check_op("matmul/a", &[3, 4], |t, x, s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s + 5);
        let b = t.constant(random(&mut rng, &[4, 2]));
        t.matmul(x, b)
    });
    check_op("matmul/b", &[4, 2], |t, x, s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s + 5);
        let a = t.constant(random(&mut rng, &[3, 4]));
        t.matmul(a, x)
    });
    check_op("matmul_t/both", &[3, 4], |t, x, _| t.matmul_t(x, x));
    check_op("bmm", &[2, 3, 4], |t, x, s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s + 5);
        let b = t.leaf(random(&mut rng, &[2, 4, 3]));
        let c = t.matmul(x, b)?;
        let d = t.matmul(c, x)?;
        Ok(d)
    });
    check_op("linear/x", &[5, 3], |t, x, s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s + 9);
        let w = t.constant(random(&mut rng, &[4, 3]));
        let b = t.constant(random(&mut rng, &[4]));
        t.linear(x, w, b)
    });
    check_op("linear/w", &[4, 3], |t, w, s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s + 9);
        let x = t.constant(random(&mut rng, &[5, 3]));
        let b = t.constant(random(&mut rng, &[4]));
        t.linear(x, w, b)
    });
    check_op("linear/b", &[4], |t, b, s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s + 9);
        let x = t.constant(random(&mut rng, &[5, 3]));
        let w = t.constant(random(&mut rng, &[4, 3]));
        t.linear(x, w, b)
    });
    check_op("transpose", &[2, 3, 4], |t, x, _| t.transpose(x));
}

#[test]
fn structural_ops() {
    check_op("concat0", &[2, 3], |t, x, _| {
        let s = t.sin(x);
        t.concat(&[x, s, x], 0)
    });
    check_op("concat1", &[2, 3], |t, x, _| {
        let s = t.cos(x);
        t.concat(&[s, x], 1)
    });
    check_op("slice", &[4, 5], |t, x, _| t.slice(x, 1, 1, 3));
    check_op("gather_rows", &[4, 2], |t, x, _| t.gather_rows(x, &[3, 0, 3, 1, 3]));
    check_op("broadcast", &[1, 3], |t, x, _| t.broadcast_to(x, &[4, 3]));
    check_op("reshape", &[2, 6], |t, x, _| {
        let r = t.reshape(x, &[3, 4])?;
        let s = t.sin(r);
        Ok(s)
    });
}

#[test]
fn spec_values() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_vec(&[2], vec![0.0, FRAC_PI_2]));
    let s = t.sin(x);
    assert_eq!(t.value(s).data(), &[0.0, 1.0]);

    let a = Tensor::from_vec(&[3, 3], (0..9).map(|i| i as f64 * 0.37 - 1.0).collect());
    let i3 = t.constant(Tensor::eye(3));
    let av = t.constant(a.clone());
    let p = t.matmul(i3, av).unwrap();
    assert_eq!(t.value(p), &a);

    let p = t.constant(Tensor::from_vec(&[2], vec![0.1, 0.1]));
    let z = t.constant(Tensor::zeros(&[2]));
    let m = t.mse(p, z).unwrap();
    assert!((t.value(m).item() - 0.01).abs() < 1e-17);
}

#[test]
fn backward_examples() {
    // loss = sum(w·x) with x fixed → ∂/∂w = x
    let mut t = Tape::<f64>::new();
    let xs = Tensor::from_vec(&[4], vec![0.5, -1.0, 2.0, 3.5]);
    let w = t.leaf(Tensor::ones(&[4]));
    let x = t.constant(xs.clone());
    let prod = t.mul(w, x).unwrap();
    let loss = t.sum(prod);
    let g = t.backward(loss).unwrap();
    assert_eq!(g.wrt(w), &xs);
    assert_eq!(g.get(x), None);

    // constant loss → zero gradient
    let mut t = Tape::<f64>::new();
    let w = t.leaf(Tensor::ones(&[3]));
    let c = t.constant(Tensor::from_vec(&[2], vec![1.0, 2.0]));
    let loss = t.sum(c);
    let g = t.backward(loss).unwrap();
    assert_eq!(g.wrt(w), &Tensor::zeros(&[3]));

    // non-scalar loss rejected
    let mut t = Tape::<f64>::new();
    let w = t.leaf(Tensor::ones(&[3]));
    assert!(t.backward(w).is_err());
}

#[test]
fn mse_of_sine_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = random(&mut rng, &[6, 3]);
    let y = random(&mut rng, &[6, 2]);
    let w = random(&mut rng, &[3, 2]);
    let report = grad_check(
        |t, w| {
            let xv = t.constant(x.clone());
            let yv = t.constant(y.clone());
            let z = t.matmul(xv, w)?;
            let s = t.sin(z);
            t.mse(s, yv)
        },
        &w,
        H,
    )
    .unwrap();
    assert!(report.max_rel_error < TOL, "{:e}", report.max_rel_error);
}

#[test]
fn linear_function_error_is_tiny() {
    let w = Tensor::from_vec(&[3], vec![1.5, -2.0, 0.25]);
    let report = grad_check(
        |t, x| {
            let c = t.constant(w.clone());
            let p = t.mul(x, c)?;
            Ok(t.sum(p))
        },
        &Tensor::from_vec(&[3], vec![0.3, 0.7, -1.1]),
        H,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-9, "{:e}", report.max_rel_error);
}

#[test]
fn broken_backward_rule_is_detected() {
    // sin whose backward pretends the derivative is sin instead of cos.
    let report = grad_check(
        |t, x| {
            let value = t.value(x).map(f64::sin);
            let bad: BackwardFn<f64> = Box::new(|ins, _out, g| {
                vec![Some(g.zip_map(ins[0], |gg, x| gg * x.sin()))]
            });
            let y = t.custom(&[x], value, bad);
            Ok(t.sum(y))
        },
        &Tensor::from_vec(&[3], vec![0.2, 1.0, -0.7]),
        H,
    )
    .unwrap();
    assert!(report.max_rel_error > 1e-2);
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut t = Tape::<f64>::new();
    let x = t.leaf(random(&mut rng, &[8, 3]));
    let w = t.leaf(random(&mut rng, &[5, 3]));
    let b = t.leaf(random(&mut rng, &[5]));
    let h = t.linear(x, w, b).unwrap();
    let s = t.tanh(h);
    let loss = t.mean(s);
    let g1 = t.backward(loss).unwrap();
    let g2 = t.backward(loss).unwrap();
    for v in [x, w, b] {
        assert_eq!(g1.wrt(v), g2.wrt(v));
    }
}

#[test]
fn shape_errors_name_the_op() {
    let mut t = Tape::<f32>::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[4, 3]));
    let err = t.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[4, 3]"), "{err}");
    let err = t.add(a, b).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
    assert!(t.mse(a, b).is_err());
    assert!(t.slice(a, 1, 2, 2).is_err());
    assert!(t.softmax_cross_entropy(a, &[0, 5]).is_err());
}

#[test]
fn f32_and_f64_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, &[16, 2]);
    let w = random(&mut rng, &[8, 2]);
    let run = |x: &Tensor<f64>, w: &Tensor<f64>| -> f64 {
        let mut t = Tape::<f32>::new();
        let xv = t.constant(x.cast());
        let wv = t.leaf(w.cast());
        let b = t.constant(Tensor::zeros(&[8]));
        let h = t.linear(xv, wv, b).unwrap();
        let s = t.sin(h);
        let l = t.mean(s);
        t.value(l).item() as f64
    };
    let mut t = Tape::<f64>::new();
    let xv = t.constant(x.clone());
    let wv = t.leaf(w.clone());
    let b = t.constant(Tensor::zeros(&[8]));
    let h = t.linear(xv, wv, b).unwrap();
    let s = t.sin(h);
    let l = t.mean(s);
    assert!((run(&x, &w) - t.value(l).item()).abs() < 1e-6);
}
