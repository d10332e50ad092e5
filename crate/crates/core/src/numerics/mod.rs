//! Dense tensor arithmetic and the deterministic kernels everything else
//! builds on.
//!
//! Compute precision is f64 throughout; f32 only exists at checkpoint
//! boundaries. Every operation fixes its floating-point evaluation order, so
//! a run with a given seed is bitwise reproducible on the same machine.

mod kernels;
mod pool;
pub mod rng;
pub mod svd;

pub use kernels::{set_threads, threads};
pub use pool::TensorPool;
pub use rng::{randn, Rng};
pub use svd::singular_values;

/// Keep large blocks on the heap across free/alloc cycles. glibc mmaps
/// allocations above 128 KiB and returns them to the kernel on free, which
/// makes every fresh tensor page-fault; a training step cycles gigabytes.
/// Call once at process start in compute-heavy binaries.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        extern "C" {
            fn mallopt(param: i32, value: i32) -> i32;
        }
        const M_MMAP_THRESHOLD: i32 = -3;
        const M_TRIM_THRESHOLD: i32 = -1;
        unsafe {
            mallopt(M_MMAP_THRESHOLD, 1 << 30);
            mallopt(M_TRIM_THRESHOLD, 1 << 30);
        }
    }
}

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum NumericsError {
    /// Incompatible operand shapes; carries both so messages name them.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A softmax row with every entry -inf has no distribution.
    FullyMaskedRow { row: usize },
    NonFinite { what: String },
    /// Jacobi sweeps failed to reach the convergence tolerance.
    NoConvergence { what: &'static str, sweeps: usize },
}

impl fmt::Display for NumericsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Self::FullyMaskedRow { row } => {
                write!(f, "softmax row {row} is entirely -inf (fully masked)")
            }
            Self::NonFinite { what } => write!(f, "non-finite values in {what}"),
            Self::NoConvergence { what, sweeps } => {
                write!(f, "{what} did not converge within {sweeps} sweeps")
            }
        }
    }
}

impl std::error::Error for NumericsError {}

/// Dense row-major f64 array. The universal value type for activations and
/// weights; immutable by convention once handed out of an op.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix; a vector is a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Width of the trailing axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
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

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.cols();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let n = self.cols();
        self.data[i * n + j] = v;
    }

    /// Single element of a length-1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "transpose needs a matrix");
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    /// Columns `lo..hi` of a matrix (or the slice of a vector).
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Tensor {
        let n = self.cols();
        assert!(lo <= hi && hi <= n);
        if self.shape.len() == 1 {
            return Tensor::vector(self.data[lo..hi].to_vec());
        }
        let m = self.rows();
        let w = hi - lo;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * n + lo..i * n + hi]);
        }
        Tensor {
            shape: vec![m, w],
            data: out,
        }
    }

    pub fn slice_rows(&self, lo: usize, hi: usize) -> Tensor {
        assert_eq!(self.shape.len(), 2);
        let n = self.cols();
        assert!(lo <= hi && hi <= self.rows());
        Tensor {
            shape: vec![hi - lo, n],
            data: self.data[lo * n..hi * n].to_vec(),
        }
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let m = parts[0].rows();
        for p in parts {
            assert_eq!(p.rows(), m, "concat_cols: row counts differ");
        }
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                out.extend_from_slice(p.row(i));
            }
        }
        Tensor {
            shape: vec![m, total],
            data: out,
        }
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let n = parts[0].cols();
        for p in parts {
            assert_eq!(p.cols(), n, "concat_rows: widths differ");
        }
        let m: usize = parts.iter().map(|p| p.rows()).sum();
        let mut out = Vec::with_capacity(m * n);
        for p in parts {
            out.extend_from_slice(p.data());
        }
        Tensor {
            shape: vec![m, n],
            data: out,
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

fn binary_elementwise(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, NumericsError> {
    if a.shape != b.shape {
        return Err(NumericsError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    binary_elementwise("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    binary_elementwise("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    binary_elementwise("mul", a, b, |x, y| x * y)
}

/// Matrix product with sequential-over-k accumulation per output element.
/// Vectors are treated as single rows.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, ka) = (a.rows(), a.cols());
    let (kb, n) = if b.shape.len() >= 2 {
        (b.shape[0], b.shape[1])
    } else {
        (b.len(), 1)
    };
    if ka != kb {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    kernels::matmul_into(a.data(), b.data(), out.data_mut(), m, ka, n);
    Ok(out)
}

/// Accumulating kernel access for in-crate consumers (autodiff backward
/// writes straight into gradient buffers).
pub(crate) fn matmul_into_raw(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    kernels::matmul_into(a, b, c, m, k, n);
}

/// Overwriting kernel access; the destination may hold stale data.
pub(crate) fn matmul_write_raw(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    kernels::matmul_write(a, b, c, m, k, n);
}

/// Row-wise softmax with per-row max subtraction. `-inf` entries are masked
/// positions and map to probability zero.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor, NumericsError> {
    let n = x.cols();
    let m = x.rows();
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let row = &x.data[i * n..(i + 1) * n];
        softmax_row_into(row, out.row_mut(i)).map_err(|_| NumericsError::FullyMaskedRow { row: i })?;
    }
    if x.shape.len() == 1 {
        out.shape = vec![n];
    }
    Ok(out)
}

/// Single-row softmax into a caller buffer; `Err` on a fully masked row.
pub fn softmax_row_into(row: &[f64], out: &mut [f64]) -> Result<(), ()> {
    let mut max = f64::NEG_INFINITY;
    for &v in row {
        if v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(());
    }
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        if v == f64::NEG_INFINITY {
            *o = 0.0;
        } else {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(())
}

/// Euclidean norm of a slice.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
