//! Dense 4-D tensors in `(batch, channels, height, width)` layout.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};

use crate::{EngineError, Result};

/// Floating point element type understood by the engine.
///
/// Training runs in `f32`; gradient checks use `f64` for finite-difference
/// headroom. The only per-type code is the GEMM kernel dispatch.
pub trait Scalar: Float + FromPrimitive + Default + Debug + Send + Sync + 'static {
    /// `c = a * b + beta * c` for row/column strided matrices.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows as isize - 1) as usize * rs as usize + (cols as isize - 1) as usize * cs as usize + 1
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0);
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: output too short");
                // SAFETY: bounds of all three operands were checked above.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Tensor shape as `[n, c, h, w]`.
pub type Dims = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(EngineError::Input(format!(
                "tensor dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, T::zero())
    }

    pub fn filled(dims: Dims, value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    /// Builds a tensor by evaluating `f(n, c, h, w)` at each position.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for h in 0..dims[2] {
                    for w in 0..dims[3] {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self { dims, data }
    }

    /// A `(n, features, 1, 1)` tensor from row-major rows.
    pub fn from_rows(rows: usize, features: usize, data: Vec<T>) -> Result<Self> {
        Self::new([rows, features, 1, 1], data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    /// Number of values per batch item.
    pub fn item_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    /// Values of batch item `n`.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn reshape(self, dims: Dims) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| EngineError::Input("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut batch = 0;
        for t in items {
            if t.dims[1..] != first.dims[1..] {
                return Err(EngineError::Input(format!(
                    "cannot stack {:?} with {:?}",
                    t.dims, first.dims
                )));
            }
            batch += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        Self::new([batch, first.dims[1], first.dims[2], first.dims[3]], data)
    }

    /// Concatenates flat feature rows `(n, a, 1, 1)` and `(n, b, 1, 1)` into `(n, a + b, 1, 1)`.
    pub fn concat_features(left: &Tensor<T>, right: &Tensor<T>) -> Result<Self> {
        if left.batch() != right.batch() {
            return Err(EngineError::Input(format!(
                "feature batches differ: {} vs {}",
                left.batch(),
                right.batch()
            )));
        }
        let (a, b) = (left.item_len(), right.item_len());
        let mut data = Vec::with_capacity(left.batch() * (a + b));
        for n in 0..left.batch() {
            data.extend_from_slice(left.item(n));
            data.extend_from_slice(right.item(n));
        }
        Self::new([left.batch(), a + b, 1, 1], data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::<f32>::new([1, 2, 2, 2], vec![0.0; 7]).is_err());
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor::<f64>::from_fn([2, 3, 4, 5], |n, c, h, w| {
            (n * 1000 + c * 100 + h * 10 + w) as f64
        });
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[t.offset(1, 0, 2, 1)], 1021.0);
    }

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c = vec![1.0; 8];
        f64::gemm(2, 3, 4, &a, 3, 1, &b, 4, 1, 1.0, &mut c, 4, 1);
        for i in 0..2 {
            for j in 0..4 {
                let expect: f64 = 1.0 + (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum::<f64>();
                assert_eq!(c[i * 4 + j], expect);
            }
        }
    }

    #[test]
    fn concat_features_interleaves_rows() {
        let l = Tensor::<f32>::from_rows(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = Tensor::<f32>::from_rows(2, 1, vec![9.0, 8.0]).unwrap();
        let c = Tensor::concat_features(&l, &r).unwrap();
        assert_eq!(c.dims(), [2, 3, 1, 1]);
        assert_eq!(c.data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
    }
}
