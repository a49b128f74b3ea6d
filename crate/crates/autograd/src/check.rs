use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Magnitude below which gradient components are compared absolutely.
///
/// Central differences carry an absolute rounding error of roughly
/// `eps·|f|/h`, so vanishing components cannot be judged relatively.
pub const GRAD_CHECK_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Central differences `(f(x+h) − f(x−h)) / 2h`, one coordinate at a time.
pub fn numeric_gradient<F>(f: &F, point: &Tensor<f64>, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |x: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };
    let mut grad = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        grad.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }
    Ok(grad)
}

/// Compare reverse-mode gradients of a scalar program against central differences.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let out = f(&mut tape, x)?;
    let grads = tape.backward(out)?;
    let analytic = grads.wrt(x).data().to_vec();
    let numeric = numeric_gradient(&f, point, h)?;
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
