use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use super::NumericsError;

/// Storage precision tag, used by checkpoints and configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar type a tensor can hold. Implemented for `f32` and `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    const DTYPE: DType;

    /// `c = a·b (+ c if accumulate)` with arbitrary strides on `a` and `b`;
    /// `c` is dense row-major `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        accumulate: bool,
    );

    fn lit(v: f64) -> Self;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_real {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Real for $t {
            const DTYPE: DType = $dtype;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
                    }
                    return;
                }
                let last_a = (m as isize - 1) * a_strides.0 + (k as isize - 1) * a_strides.1;
                let last_b = (k as isize - 1) * b_strides.0 + (n as isize - 1) * b_strides.1;
                assert!((last_a as usize) < a.len() && (last_b as usize) < b.len());
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the index bounds of every operand were checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn lit(v: f64) -> Self {
                v as $t
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("scalar width"))
            }
        }
    };
}

impl_real!(f32, DType::F32, matrixmultiply::sgemm);
impl_real!(f64, DType::F64, matrixmultiply::dgemm);

/// Immutable dense tensor, row-major. Cloning shares the buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<[T]>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, NumericsError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data: data.into() })
    }

    /// 2-D constructor; panics if `data.len() != rows * cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix {rows}x{cols} from {} values", data.len());
        Self { shape: vec![rows, cols], data: data.into() }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n].into() }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n].into() }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1, 1], data: vec![value].into() }
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self::matrix(n, n, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::matrix(rows, cols, data)
    }

    pub fn row_vector(values: &[T]) -> Self {
        Self::matrix(1, values.len(), values.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor (a 1-D tensor counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self, NumericsError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(NumericsError::Shape(format!("cannot reshape {:?} to {:?}", self.shape, shape)));
        }
        Ok(Self { shape, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        Self::from_fn(c, r, |i, j| self.at(j, i))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self, NumericsError> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(NumericsError::Shape(format!(
                "matmul inner dimensions {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, &self.data, (k as isize, 1), &other.data, (n as isize, 1), &mut out, false);
        Ok(Self::matrix(m, n, out))
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self, NumericsError> {
        let (m, k) = (self.rows(), self.cols());
        let (n, k2) = (other.rows(), other.cols());
        if k != k2 {
            return Err(NumericsError::Shape(format!(
                "matmul_nt inner dimensions {m}x{k} · ({n}x{k2})ᵀ"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, &self.data, (k as isize, 1), &other.data, (1, k as isize), &mut out, false);
        Ok(Self::matrix(m, n, out))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self) -> Self {
        let c = self.cols();
        let mut out = self.data.to_vec();
        if c > 0 {
            for row in out.chunks_mut(c) {
                softmax_in_place(row);
            }
        }
        Self { shape: self.shape.clone(), data: out.into() }
    }
}

/// Row softmax evaluated in f64 whatever `T` is.
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let wide: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    softmax_wide_into(&wide, row);
}

pub(crate) fn softmax_wide_into<T: Real>(wide: &[f64], out: &mut [T]) {
    let max = wide.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = wide.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    for (o, e) in out.iter_mut().zip(exps) {
        *o = T::lit(e / total);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(i, p) * b.at(p, j);
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    fn pseudo(seed: u64, rows: usize, cols: usize) -> Tensor<f64> {
        let mut rng = crate::rng::XorShift64::new(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn identity_times_x_is_x() {
        let x = pseudo(3, 3, 4);
        assert_eq!(Tensor::<f64>::identity(3).matmul(&x).unwrap(), x);
    }

    #[test]
    fn small_product() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::matrix(2, 1, vec![1.0, 1.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = pseudo(11, 5, 4);
        let b = pseudo(12, 4, 3);
        let got = a.matmul(&b).unwrap();
        for (g, e) in got.data().iter().zip(triple_loop(&a, &b)) {
            assert!((g - e).abs() <= 1e-12);
        }
        let nt = a.matmul_nt(&b.transpose()).unwrap();
        assert!(nt.max_abs_diff(&got) <= 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = pseudo(1, 2, 3);
        assert!(matches!(a.matmul(&a), Err(NumericsError::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::<f64>::row_vector(&[0.0, 0.0, 0.0]).softmax_rows();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = Tensor::<f64>::row_vector(&[1.0, 2.0, 3.0]);
        let total: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        let oracle: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp() / total).collect();
        let got = x.softmax_rows();
        for (g, e) in got.data().iter().zip(oracle) {
            assert!((g - e).abs() <= 1e-12);
        }
        let shifted = x.map(|v| v + 123.5).softmax_rows();
        assert!(shifted.max_abs_diff(&got) <= 1e-12);
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(values in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
            let t = Tensor::row_vector(&values).softmax_rows();
            let s: f64 = t.data().iter().sum();
            proptest::prop_assert!((s - 1.0).abs() <= 1e-12);
            proptest::prop_assert!(t.data().iter().all(|v| *v >= 0.0));
            let t32 = Tensor::<f32>::row_vector(&values.iter().map(|v| *v as f32).collect::<Vec<_>>()).softmax_rows();
            let s32: f32 = t32.data().iter().sum();
            proptest::prop_assert!((s32 - 1.0).abs() <= 1e-6);
        }
    }
}
