//! Dense row-major `f64` tensors.
//!
//! Every tensor is rank 2: vectors are `1 × n` and scalars are `1 × 1`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl Tensor {
    /// `shape` must have exactly two positive extents.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        match *shape {
            [rows, cols] => Self::matrix(rows, cols, data),
            _ => Err(Error::Input(alloc::format!("tensors are rank 2, got shape {shape:?}"))),
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Input(alloc::format!(
                "tensor extents must be positive, got [{rows}, {cols}]"
            )));
        }
        if rows * cols != data.len() {
            return Err(Error::dim("tensor", &[rows, cols], &[data.len()]));
        }
        Ok(Self {
            shape: [rows, cols],
            data,
        })
    }

    /// Panics if `rows` or `cols` is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "tensor extents must be positive");
        Self {
            shape: [rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: [1, 1],
            data: vec![value],
        }
    }

    pub fn row(values: &[f64]) -> Result<Self> {
        Self::matrix(1, values.len(), values.to_vec())
    }

    pub fn column(values: &[f64]) -> Result<Self> {
        Self::matrix(values.len(), 1, values.to_vec())
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Input("no rows".into()));
        };
        let cols = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim("from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims(&self) -> Result<(usize, usize)> {
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(alloc::format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims()?;
        let (k2, n) = other.dims()?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::matrix(m, n, out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims()?;
        let (n, k2) = other.dims()?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", &self.shape, &other.shape));
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b = &other.data[j * k..(j + 1) * k];
                out.push(a.iter().zip(b).map(|(x, y)| x * y).sum());
            }
        }
        Self::matrix(m, n, out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims()?;
        let (m2, n) = other.dims()?;
        if m != m2 {
            return Err(Error::dim("matmul_tn", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; k * n];
        for r in 0..m {
            let a = &self.data[r * k..(r + 1) * k];
            let b = &other.data[r * n..(r + 1) * n];
            for (p, &av) in a.iter().enumerate() {
                for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(b) {
                    *o += av * bv;
                }
            }
        }
        Self::matrix(k, n, out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::matrix(n, m, out)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Self> {
        let (m, n) = self.dims()?;
        let mut out = self.data.clone();
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - max);
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Self::matrix(m, n, out)
    }

    /// Column sums as a plain vector.
    pub fn col_sums(&self) -> Result<Vec<f64>> {
        let (m, n) = self.dims()?;
        let mut sums = vec![0.0; n];
        for i in 0..m {
            for (s, v) in sums.iter_mut().zip(&self.data[i * n..(i + 1) * n]) {
                *s += v;
            }
        }
        Ok(sums)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; b[0].len()]; a.len()];
        for i in 0..a.len() {
            for j in 0..b[0].len() {
                for p in 0..b.len() {
                    out[i][j] += a[i][p] * b[p][j];
                }
            }
        }
        out
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[], vec![]).is_err());
        assert!(Tensor::new(&[1, 1, 1], vec![1.0]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let m = Tensor::from_rows(&[[1.5, -2.0], [0.25, 7.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn hand_matmul() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[[0.0], [1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err();
        assert_eq!(err, Error::dim("matmul", &[2, 3], &[2, 3]));
        assert!(alloc::format!("{err}").contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let a: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..4).map(|_| rng.random_range(-10.0..10.0)).collect())
                .collect();
            let b: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..2).map(|_| rng.random_range(-10.0..10.0)).collect())
                .collect();
            let got = Tensor::from_rows(&a)
                .unwrap()
                .matmul(&Tensor::from_rows(&b).unwrap())
                .unwrap();
            let want = Tensor::from_rows(&naive_matmul(&a, &b)).unwrap();
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn transposed_products_match_explicit_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let mut rand = |r: usize, c: usize| {
                Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-10.0..10.0)).collect()).unwrap()
            };
            let (a, b, c) = (rand(3, 4), rand(5, 4), rand(3, 2));
            let nt = a.matmul_nt(&b).unwrap();
            assert!(nt.max_abs_diff(&a.matmul(&b.transpose().unwrap()).unwrap()) < 1e-12);
            let tn = a.matmul_tn(&c).unwrap();
            assert!(tn.max_abs_diff(&a.transpose().unwrap().matmul(&c).unwrap()) < 1e-12);
        }
        assert!(Tensor::zeros(2, 3).matmul_nt(&Tensor::zeros(2, 4)).is_err());
        assert!(Tensor::zeros(2, 3).matmul_tn(&Tensor::zeros(3, 3)).is_err());
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let s = Tensor::from_rows(&[[0.0, 0.0, 0.0], [1000.0, 0.0, -1000.0]])
            .unwrap()
            .softmax_rows()
            .unwrap();
        for j in 0..3 {
            assert!((s.get(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((s.get(1, 0) - 1.0).abs() < 1e-9);
        assert!(s.get(1, 1) < 1e-9);
        assert!(s.is_finite());
    }

    #[test]
    fn softmax_matches_extended_precision() {
        // e^1, e^2, e^3 normalised; reference values from a 40-digit evaluation.
        let want = [
            0.090_030_573_170_380_457_998,
            0.244_728_471_054_797_652_473,
            0.665_240_955_774_821_889_529,
        ];
        let s = Tensor::row(&[1.0, 2.0, 3.0]).unwrap().softmax_rows().unwrap();
        for (a, b) in s.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }
}
