use crate::error::{AutogradError, Result};
use crate::scalar::Scalar;

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AutogradError::ShapeMismatch {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panicking constructor for shapes known to be consistent.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        Self::new(shape, data).expect("tensor data length must match shape")
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self::from_vec(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.to_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x.to_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Sum over the axes that were broadcast to reach `self.shape` from `target`.
    pub(crate) fn reduce_to(&self, target: &[usize]) -> Self {
        if self.shape == target {
            return self.clone();
        }
        let numel: usize = target.iter().product();
        let mut out = vec![T::zero(); numel];
        let strides = broadcast_strides(target, &self.shape);
        for_each_offset(&self.shape, &strides, |i, off| out[off] += self.data[i]);
        Self {
            shape: target.to_vec(),
            data: out,
        }
    }

    /// Materialize a broadcast of `self` to `shape`.
    pub(crate) fn expand(&self, shape: &[usize]) -> Self {
        if self.shape == shape {
            return self.clone();
        }
        let numel: usize = shape.iter().product();
        let mut out = vec![T::zero(); numel];
        let strides = broadcast_strides(&self.shape, shape);
        for_each_offset(shape, &strides, |i, off| out[i] = self.data[off]);
        Self {
            shape: shape.to_vec(),
            data: out,
        }
    }
}

/// Result shape of broadcasting `a` against `b` with trailing-dimension alignment.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(AutogradError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides into a tensor of shape `src` when indexed by the (broadcast) shape `out`.
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        if i + src.len() < rank {
            break;
        }
        let d = src[i + src.len() - rank];
        strides[i] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    strides
}

/// Visit every linear index of `shape` together with the matching offset under `strides`.
fn for_each_offset(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for i in 0..numel {
        f(i, off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Elementwise binary map with broadcasting into `out_shape`.
pub(crate) fn broadcast_zip<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    if a.shape == b.shape {
        return a.zip_map(b, f);
    }
    let numel: usize = out_shape.iter().product();
    // Common case: `b` repeats along the leading axes of `a` (bias rows).
    if a.shape == out_shape && out_shape.ends_with(&b.shape) {
        let nb = b.numel().max(1);
        let data = a
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data[i % nb]))
            .collect();
        return Tensor::from_vec(out_shape, data);
    }
    let ea = a.expand(out_shape);
    let eb = b.expand(out_shape);
    debug_assert_eq!(ea.numel(), numel);
    ea.zip_map(&eb, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_trailing() {
        assert_eq!(broadcast_shape("t", &[4, 3], &[3]).unwrap(), vec![4, 3]);
        assert_eq!(broadcast_shape("t", &[4, 1], &[1, 5]).unwrap(), vec![4, 5]);
        assert_eq!(broadcast_shape("t", &[], &[2, 2]).unwrap(), vec![2, 2]);
        let err = broadcast_shape("add", &[4, 3], &[4]).unwrap_err();
        assert!(err.to_string().contains("add"));
        assert!(err.to_string().contains("[4, 3]"));
    }

    #[test]
    fn expand_then_reduce_counts_copies() {
        let t = Tensor::<f64>::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]);
        let e = t.expand(&[4, 3]);
        assert_eq!(e.data()[9..], [1.0, 2.0, 3.0]);
        let r = e.reduce_to(&[1, 3]);
        assert_eq!(r.data(), &[4.0, 8.0, 12.0]);
        let col = Tensor::<f64>::from_vec(&[2, 1], vec![1.0, 2.0]);
        assert_eq!(col.expand(&[2, 3]).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn constructor_rejects_bad_length() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
    }
}
