//! Reverse-mode gradient engine over the numerics ops.
//!
//! A `Tape` is a define-by-run graph: each operation computes its value
//! eagerly and records a backward rule. Creation order is the topological
//! order, so the backward pass is a single reverse sweep. A tape is
//! single-threaded; parallelism happens across tapes. Tensor storage comes
//! from a recycling pool that survives the tape (`Tape::with_pool` /
//! `Tape::into_pool`), which keeps steady-state training free of large
//! allocations.
//!
//! Supported operations: matmul, add, sub, elementwise mul (plain, vector-
//! broadcast and scalar-broadcast), scale by constant, the init/scale
//! reparameterization, abs, sum, transpose, row/column concat and slice,
//! row softmax (plain and fused causal), silu, row-wise unit normalization,
//! rmsnorm, rope, embedding lookup, mean cross-entropy, tangent projection
//! and row-wise slerp. Parameter renormalization is an optimizer post-step
//! and is deliberately never recorded here; the forward-pass normalization
//! of block outputs is recorded (and differentiated) where the model enables
//! it.

use crate::hypersphere::GeometryError;
use crate::numerics::{self, l2_norm, softmax_row_into, Tensor, TensorPool};
use std::fmt;
use std::rc::Rc;

#[derive(Debug, Clone, PartialEq)]
pub enum AutodiffError {
    NonScalarLoss { shape: Vec<usize> },
}

impl fmt::Display for AutodiffError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
        }
    }
}

impl std::error::Error for AutodiffError {}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Precomputed rotation table for rope: one row of (cos, sin) per sequence
/// position, `d_k / 2` frequencies wide.
#[derive(Debug)]
pub struct RopeTable {
    pub half: usize,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(positions: &[usize], d_k: usize, base: f64) -> Self {
        assert!(d_k % 2 == 0, "rope requires an even head dimension");
        let half = d_k / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &pos in positions {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / d_k as f64);
                let angle = pos as f64 * freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Self { half, cos, sin }
    }
}

enum Rule {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// `[m x n] * [n]`, the vector applied to every row.
    MulBcast { x: Var, v: Var },
    /// `[m x n] * scalar var`.
    MulScalar { x: Var, s: Var },
    Scale { x: Var, c: f64 },
    /// `(x / scale) * init`, exact identity-restoring form at init.
    Reparam { x: Var, c: f64 },
    Abs { x: Var },
    Sum { x: Var },
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    SliceCols { x: Var, lo: usize },
    SliceRows { x: Var, lo: usize },
    SoftmaxRows { x: Var },
    /// Softmax of `scale * x` restricted to `j <= i` per row; rest is zero.
    CausalSoftmax { x: Var, scale: f64 },
    Silu { x: Var },
    UnitNormalizeRows { x: Var, norms: Vec<f64> },
    RmsNorm { x: Var, gains: Var, inv_norm: Vec<f64> },
    Rope { x: Var, table: Rc<RopeTable> },
    EmbedLookup { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
    TangentProjectRows { h: Var, b: Var, dots: Vec<f64> },
    SlerpRows { a: Var, b: Var, alpha: Var, ctx: Vec<SlerpRowCtx> },
}

/// Per-row context saved by the slerp forward pass.
struct SlerpRowCtx {
    /// None: geodesic path with (theta, cos_theta). Some(norm): the row fell
    /// below the minimum angle and used normalized lerp with this pre-norm.
    nlerp_norm: Option<f64>,
    theta: f64,
    cos_theta: f64,
}

pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    rules: Vec<Rule>,
    pool: TensorPool,
    backward_runs: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_pool(TensorPool::new())
    }

    /// Build on recycled storage from a previous tape.
    pub fn with_pool(pool: TensorPool) -> Self {
        Self {
            values: Vec::new(),
            grads: Vec::new(),
            rules: Vec::new(),
            pool,
            backward_runs: 0,
        }
    }

    /// Tear down the tape, returning all tensor storage for reuse.
    pub fn into_pool(self) -> TensorPool {
        let mut pool = self.pool;
        for t in self.values {
            pool.give(t.into_data());
        }
        for t in self.grads {
            pool.give(t.into_data());
        }
        pool
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> &Tensor {
        &self.grads[v.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
        self.backward_runs = 0;
    }

    /// Dirty buffer of the requested shape; caller overwrites every element.
    fn alloc(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, self.pool.take(n))
    }

    fn push(&mut self, value: Tensor, rule: Rule) -> Var {
        let id = self.values.len();
        let n = value.len();
        let grad = Tensor::from_vec(value.shape(), self.pool.take_zeroed(n));
        self.grads.push(grad);
        self.values.push(value);
        self.rules.push(rule);
        Var(id)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Rule::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.values[a.0].shape(),
            self.values[b.0].shape(),
            "add shape mismatch"
        );
        let mut out = self.alloc(self.values[a.0].shape().to_vec().as_slice());
        for ((o, &x), &y) in out
            .data_mut()
            .iter_mut()
            .zip(self.values[a.0].data())
            .zip(self.values[b.0].data())
        {
            *o = x + y;
        }
        self.push(out, Rule::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.values[a.0].shape(),
            self.values[b.0].shape(),
            "sub shape mismatch"
        );
        let mut out = self.alloc(self.values[a.0].shape().to_vec().as_slice());
        for ((o, &x), &y) in out
            .data_mut()
            .iter_mut()
            .zip(self.values[a.0].data())
            .zip(self.values[b.0].data())
        {
            *o = x - y;
        }
        self.push(out, Rule::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.values[a.0].shape(),
            self.values[b.0].shape(),
            "mul shape mismatch"
        );
        let mut out = self.alloc(self.values[a.0].shape().to_vec().as_slice());
        for ((o, &x), &y) in out
            .data_mut()
            .iter_mut()
            .zip(self.values[a.0].data())
            .zip(self.values[b.0].data())
        {
            *o = x * y;
        }
        self.push(out, Rule::Mul { a, b })
    }

    /// Multiply every row of `x` elementwise by the vector `v`.
    pub fn mul_bcast(&mut self, x: Var, v: Var) -> Var {
        let n = self.values[x.0].cols();
        assert_eq!(n, self.values[v.0].len(), "mul_bcast width mismatch");
        let mut out = self.alloc(self.values[x.0].shape().to_vec().as_slice());
        {
            let xv = self.values[x.0].data();
            let vv = self.values[v.0].data();
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                *o = xv[i] * vv[i % n];
            }
        }
        self.push(out, Rule::MulBcast { x, v })
    }

    /// Multiply the whole tensor by a single-element variable.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.values[s.0].len(), 1, "mul_scalar needs a 1-element var");
        let c = self.values[s.0].data()[0];
        let mut out = self.alloc(self.values[x.0].shape().to_vec().as_slice());
        for (o, &v) in out.data_mut().iter_mut().zip(self.values[x.0].data()) {
            *o = v * c;
        }
        self.push(out, Rule::MulScalar { x, s })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.alloc(self.values[x.0].shape().to_vec().as_slice());
        for (o, &v) in out.data_mut().iter_mut().zip(self.values[x.0].data()) {
            *o = v * c;
        }
        self.push(out, Rule::Scale { x, c })
    }

    /// The s_init / s_scale reparameterization: stored value divided by
    /// `scale`, times `init`. At `x == scale` this is exactly `init`.
    pub fn reparam(&mut self, x: Var, init: f64, scale: f64) -> Var {
        let mut out = self.alloc(self.values[x.0].shape().to_vec().as_slice());
        for (o, &v) in out.data_mut().iter_mut().zip(self.values[x.0].data()) {
            *o = v / scale * init;
        }
        self.push(out, Rule::Reparam { x, c: init / scale })
    }

    /// Elementwise absolute value; subgradient 0 at exactly 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let mut out = self.alloc(self.values[x.0].shape().to_vec().as_slice());
        for (o, &v) in out.data_mut().iter_mut().zip(self.values[x.0].data()) {
            *o = v.abs();
        }
        self.push(out, Rule::Abs { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.values[x.0].data().iter().sum();
        self.push(Tensor::scalar(s), Rule::Sum { x })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = (self.values[a.0].rows(), self.values[a.0].cols());
        let (kb, n) = (self.values[b.0].rows(), self.values[b.0].cols());
        assert_eq!(
            ka, kb,
            "matmul shape mismatch: {:?} x {:?}",
            self.values[a.0].shape(),
            self.values[b.0].shape()
        );
        let mut out = self.alloc(&[m, n]);
        numerics::matmul_write_raw(
            self.values[a.0].data(),
            self.values[b.0].data(),
            out.data_mut(),
            m,
            ka,
            n,
        );
        self.push(out, Rule::Matmul { a, b })
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (m, n) = (self.values[x.0].rows(), self.values[x.0].cols());
        let mut out = self.alloc(&[n, m]);
        {
            let src = self.values[x.0].data();
            let dst = out.data_mut();
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        self.push(out, Rule::Transpose { x })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.values[parts[0].0].rows();
        let total: usize = parts.iter().map(|&p| self.values[p.0].cols()).sum();
        let mut out = self.alloc(&[m, total]);
        {
            let dst = out.data_mut();
            let mut lo = 0;
            for &p in parts {
                let part = &self.values[p.0];
                assert_eq!(part.rows(), m, "concat_cols: row counts differ");
                let w = part.cols();
                for i in 0..m {
                    dst[i * total + lo..i * total + lo + w].copy_from_slice(part.row(i));
                }
                lo += w;
            }
        }
        self.push(out, Rule::ConcatCols { parts: parts.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.values[parts[0].0].cols();
        let m: usize = parts.iter().map(|&p| self.values[p.0].rows()).sum();
        let mut out = self.alloc(&[m, n]);
        {
            let dst = out.data_mut();
            let mut at = 0;
            for &p in parts {
                let part = &self.values[p.0];
                assert_eq!(part.cols(), n, "concat_rows: widths differ");
                dst[at..at + part.len()].copy_from_slice(part.data());
                at += part.len();
            }
        }
        self.push(out, Rule::ConcatRows { parts: parts.to_vec() })
    }

    pub fn slice_cols(&mut self, x: Var, lo: usize, hi: usize) -> Var {
        let src_shape = self.values[x.0].shape().to_vec();
        let n = self.values[x.0].cols();
        assert!(lo <= hi && hi <= n, "slice_cols range out of bounds");
        let w = hi - lo;
        let mut out = if src_shape.len() == 1 {
            self.alloc(&[w])
        } else {
            let m = self.values[x.0].rows();
            self.alloc(&[m, w])
        };
        {
            let src = self.values[x.0].data();
            let dst = out.data_mut();
            let m = self.values[x.0].rows();
            for i in 0..m {
                dst[i * w..(i + 1) * w].copy_from_slice(&src[i * n + lo..i * n + hi]);
            }
        }
        self.push(out, Rule::SliceCols { x, lo })
    }

    pub fn slice_rows(&mut self, x: Var, lo: usize, hi: usize) -> Var {
        let n = self.values[x.0].cols();
        assert!(lo <= hi && hi <= self.values[x.0].rows());
        let mut out = self.alloc(&[hi - lo, n]);
        out.data_mut()
            .copy_from_slice(&self.values[x.0].data()[lo * n..hi * n]);
        self.push(out, Rule::SliceRows { x, lo })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let shape = self.values[x.0].shape().to_vec();
        let (m, n) = (self.values[x.0].rows(), self.values[x.0].cols());
        let mut out = self.alloc(&shape);
        for i in 0..m {
            let (src, dst) = (
                &self.values[x.0].data()[i * n..(i + 1) * n],
                &mut out.data_mut()[i * n..(i + 1) * n],
            );
            softmax_row_into(src, dst).expect("softmax on fully masked row");
        }
        self.push(out, Rule::SoftmaxRows { x })
    }

    /// Fused causal attention softmax: rows see `scale * x[i, ..=i]`, the
    /// upper triangle is masked out (probability zero). Equivalent to adding
    /// the -inf causal mask and applying softmax_rows.
    pub fn causal_softmax(&mut self, x: Var, scale: f64) -> Var {
        let t = self.values[x.0].rows();
        assert_eq!(t, self.values[x.0].cols(), "causal_softmax needs square scores");
        let mut out = self.alloc(&[t, t]);
        for i in 0..t {
            let row = &self.values[x.0].data()[i * t..i * t + i + 1];
            let orow = &mut out.data_mut()[i * t..(i + 1) * t];
            let mut max = f64::NEG_INFINITY;
            for &v in row {
                let sv = scale * v;
                if sv > max {
                    max = sv;
                }
            }
            let mut sum = 0.0;
            for (o, &v) in orow[..i + 1].iter_mut().zip(row) {
                let e = (scale * v - max).exp();
                *o = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            orow[..i + 1].iter_mut().for_each(|v| *v *= inv);
            orow[i + 1..].iter_mut().for_each(|v| *v = 0.0);
        }
        self.push(out, Rule::CausalSoftmax { x, scale })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let mut out = self.alloc(self.values[x.0].shape().to_vec().as_slice());
        for (o, &v) in out.data_mut().iter_mut().zip(self.values[x.0].data()) {
            *o = v / (1.0 + (-v).exp());
        }
        self.push(out, Rule::Silu { x })
    }

    /// Normalize each row to unit norm. Errors if any row is degenerate.
    pub fn unit_normalize_rows(&mut self, x: Var) -> Result<Var, GeometryError> {
        let shape = self.values[x.0].shape().to_vec();
        let (m, n) = (self.values[x.0].rows(), self.values[x.0].cols());
        let mut out = self.alloc(&shape);
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let src = &self.values[x.0].data()[i * n..(i + 1) * n];
            let norm = l2_norm(src);
            if norm < crate::hypersphere::DEGENERATE_NORM {
                self.pool.give(out.into_data());
                return Err(GeometryError::DegenerateVector { norm });
            }
            let inv = 1.0 / norm;
            for (o, &v) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(src) {
                *o = v * inv;
            }
            norms.push(norm);
        }
        Ok(self.push(out, Rule::UnitNormalizeRows { x, norms }))
    }

    /// Row-wise rmsnorm: scale each row to norm sqrt(n), then multiply by
    /// the gains vector.
    pub fn rmsnorm(&mut self, x: Var, gains: Var) -> Result<Var, GeometryError> {
        let shape = self.values[x.0].shape().to_vec();
        let (m, n) = (self.values[x.0].rows(), self.values[x.0].cols());
        assert_eq!(self.values[gains.0].len(), n, "rmsnorm gains width mismatch");
        let sqrt_n = (n as f64).sqrt();
        let mut out = self.alloc(&shape);
        let mut inv_norm = Vec::with_capacity(m);
        for i in 0..m {
            let src = &self.values[x.0].data()[i * n..(i + 1) * n];
            let norm = l2_norm(src);
            if norm < crate::hypersphere::DEGENERATE_NORM {
                self.pool.give(out.into_data());
                return Err(GeometryError::DegenerateVector { norm });
            }
            let r = sqrt_n / norm;
            let gv = self.values[gains.0].data();
            for (j, (o, &v)) in out.data_mut()[i * n..(i + 1) * n]
                .iter_mut()
                .zip(src)
                .enumerate()
            {
                *o = v * r * gv[j];
            }
            inv_norm.push(1.0 / norm);
        }
        Ok(self.push(out, Rule::RmsNorm { x, gains, inv_norm }))
    }

    /// Rotary position embedding over coordinate pairs (2i, 2i+1).
    pub fn rope(&mut self, x: Var, table: Rc<RopeTable>) -> Var {
        let (m, n) = (self.values[x.0].rows(), self.values[x.0].cols());
        assert_eq!(n, table.half * 2, "rope table width mismatch");
        assert_eq!(table.cos.len(), m * table.half, "rope table rows mismatch");
        let mut out = self.alloc(&[m, n]);
        rope_rotate(
            self.values[x.0].data(),
            out.data_mut(),
            &table.cos,
            &table.sin,
            m,
            table.half,
            false,
        );
        self.push(out, Rule::Rope { x, table })
    }

    /// Gather rows of `table` by token id.
    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Var {
        let d = self.values[table.0].cols();
        let mut out = self.alloc(&[ids.len(), d]);
        for (t, &id) in ids.iter().enumerate() {
            let row = self.values[table.0].row(id);
            out.data_mut()[t * d..(t + 1) * d].copy_from_slice(row);
        }
        self.push(out, Rule::EmbedLookup { table, ids: ids.to_vec() })
    }

    /// Mean over positions of -log softmax(logits)[target].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (t, vocab) = (self.values[logits.0].rows(), self.values[logits.0].cols());
        assert_eq!(t, targets.len(), "cross_entropy length mismatch");
        let mut probs = self.alloc(&[t, vocab]);
        let mut loss = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            let src = &self.values[logits.0].data()[i * vocab..(i + 1) * vocab];
            let dst = &mut probs.data_mut()[i * vocab..(i + 1) * vocab];
            softmax_row_into(src, dst).expect("finite logits");
            loss -= dst[target].ln();
        }
        loss /= t as f64;
        self.push(
            Tensor::scalar(loss),
            Rule::CrossEntropy { logits, targets: targets.to_vec(), probs },
        )
    }

    /// Row-wise tangent projection `h (h . b) - b`.
    pub fn tangent_project_rows(&mut self, h: Var, b: Var) -> Var {
        assert_eq!(
            self.values[h.0].shape(),
            self.values[b.0].shape(),
            "tangent_project shape mismatch"
        );
        let shape = self.values[h.0].shape().to_vec();
        let (m, n) = (self.values[h.0].rows(), self.values[h.0].cols());
        let mut out = self.alloc(&shape);
        let mut dots = Vec::with_capacity(m);
        for i in 0..m {
            let hr = &self.values[h.0].data()[i * n..(i + 1) * n];
            let br = &self.values[b.0].data()[i * n..(i + 1) * n];
            let dot: f64 = hr.iter().zip(br).map(|(&x, &y)| x * y).sum();
            for (j, o) in out.data_mut()[i * n..(i + 1) * n].iter_mut().enumerate() {
                *o = hr[j] * dot - br[j];
            }
            dots.push(dot);
        }
        self.push(out, Rule::TangentProjectRows { h, b, dots })
    }

    /// Row-wise slerp between unit-norm rows with a scalar alpha variable.
    /// Rows closer than the minimum angle fall back to normalized lerp.
    pub fn slerp_rows(&mut self, a: Var, b: Var, alpha: Var) -> Result<Var, GeometryError> {
        assert_eq!(self.values[alpha.0].len(), 1, "slerp alpha must be scalar");
        assert_eq!(
            self.values[a.0].shape(),
            self.values[b.0].shape(),
            "slerp shape mismatch"
        );
        let w = self.values[alpha.0].data()[0];
        let shape = self.values[a.0].shape().to_vec();
        let (m, n) = (self.values[a.0].rows(), self.values[a.0].cols());
        let mut out = self.alloc(&shape);
        let mut ctx = Vec::with_capacity(m);
        for i in 0..m {
            let ar = &self.values[a.0].data()[i * n..(i + 1) * n];
            let br = &self.values[b.0].data()[i * n..(i + 1) * n];
            let dot: f64 = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
            if dot <= -1.0 + 1e-12 {
                self.pool.give(out.into_data());
                return Err(GeometryError::AntipodalPoints);
            }
            let cos_theta = dot.clamp(-1.0, 1.0);
            let theta = cos_theta.acos();
            let orow = &mut out.data_mut()[i * n..(i + 1) * n];
            if theta < 1e-7 {
                let mut sq = 0.0;
                for (o, (&x, &y)) in orow.iter_mut().zip(ar.iter().zip(br)) {
                    let z = (1.0 - w) * x + w * y;
                    *o = z;
                    sq += z * z;
                }
                let norm = sq.sqrt();
                if norm < crate::hypersphere::DEGENERATE_NORM {
                    self.pool.give(out.into_data());
                    return Err(GeometryError::DegenerateVector { norm });
                }
                let inv = 1.0 / norm;
                orow.iter_mut().for_each(|v| *v *= inv);
                ctx.push(SlerpRowCtx { nlerp_norm: Some(norm), theta, cos_theta });
            } else {
                let inv_sin = 1.0 / theta.sin();
                let wa = ((1.0 - w) * theta).sin() * inv_sin;
                let wb = (w * theta).sin() * inv_sin;
                for (o, (&x, &y)) in orow.iter_mut().zip(ar.iter().zip(br)) {
                    *o = wa * x + wb * y;
                }
                ctx.push(SlerpRowCtx { nlerp_norm: None, theta, cos_theta });
            }
        }
        Ok(self.push(out, Rule::SlerpRows { a, b, alpha, ctx }))
    }

    /// Accumulate d(loss)/d(node) into every node's grad. Repeated calls
    /// without zeroing add another full contribution.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        if self.backward_runs == 0 {
            self.grads[loss.0].data_mut()[0] += 1.0;
            let mut reached = vec![false; self.values.len()];
            reached[loss.0] = true;
            for id in (0..self.values.len()).rev() {
                if !reached[id] {
                    continue;
                }
                let (lower, upper) = self.grads.split_at_mut(id);
                let upstream = &upper[0];
                apply_rule(&self.rules[id], &self.values, upstream, lower, &mut reached, &mut self.pool);
            }
        } else {
            // Later passes propagate through scratch so existing grads are
            // added to, not compounded.
            let mut scratch: Vec<Tensor> =
                self.values.iter().map(|v| Tensor::zeros(v.shape())).collect();
            scratch[loss.0].data_mut()[0] = 1.0;
            let mut reached = vec![false; self.values.len()];
            reached[loss.0] = true;
            for id in (0..self.values.len()).rev() {
                if !reached[id] {
                    continue;
                }
                let (lower, upper) = scratch.split_at_mut(id);
                let upstream = &upper[0];
                apply_rule(&self.rules[id], &self.values, upstream, lower, &mut reached, &mut self.pool);
            }
            for (g, s) in self.grads.iter_mut().zip(&scratch) {
                g.add_assign(s);
            }
        }
        self.backward_runs += 1;
        Ok(())
    }
}

/// Rotate pairs by the table angles; `invert` applies the transpose rotation
/// (used by the backward pass).
fn rope_rotate(
    x: &[f64],
    out: &mut [f64],
    cos: &[f64],
    sin: &[f64],
    rows: usize,
    half: usize,
    invert: bool,
) {
    let n = half * 2;
    for i in 0..rows {
        for p in 0..half {
            let c = cos[i * half + p];
            let s = if invert { -sin[i * half + p] } else { sin[i * half + p] };
            let x0 = x[i * n + 2 * p];
            let x1 = x[i * n + 2 * p + 1];
            out[i * n + 2 * p] = x0 * c - x1 * s;
            out[i * n + 2 * p + 1] = x0 * s + x1 * c;
        }
    }
}

fn apply_rule(
    rule: &Rule,
    values: &[Tensor],
    upstream: &Tensor,
    grads: &mut [Tensor],
    reached: &mut [bool],
    pool: &mut TensorPool,
) {
    let mut mark = |v: Var| {
        reached[v.0] = true;
    };
    match rule {
        Rule::Leaf => {}
        Rule::Add { a, b } => {
            grads[a.0].add_assign(upstream);
            grads[b.0].add_assign(upstream);
            mark(*a);
            mark(*b);
        }
        Rule::Sub { a, b } => {
            grads[a.0].add_assign(upstream);
            for (g, u) in grads[b.0].data_mut().iter_mut().zip(upstream.data()) {
                *g -= u;
            }
            mark(*a);
            mark(*b);
        }
        Rule::Mul { a, b } => {
            let (av, bv) = (&values[a.0], &values[b.0]);
            for ((g, u), y) in grads[a.0].data_mut().iter_mut().zip(upstream.data()).zip(bv.data()) {
                *g += u * y;
            }
            for ((g, u), x) in grads[b.0].data_mut().iter_mut().zip(upstream.data()).zip(av.data()) {
                *g += u * x;
            }
            mark(*a);
            mark(*b);
        }
        Rule::MulBcast { x, v } => {
            let n = values[v.0].len();
            let vv = values[v.0].data();
            let xv = values[x.0].data();
            for (i, (g, u)) in grads[x.0]
                .data_mut()
                .iter_mut()
                .zip(upstream.data())
                .enumerate()
            {
                *g += u * vv[i % n];
            }
            let gv = grads[v.0].data_mut();
            for (i, u) in upstream.data().iter().enumerate() {
                gv[i % n] += u * xv[i];
            }
            mark(*x);
            mark(*v);
        }
        Rule::MulScalar { x, s } => {
            let c = values[s.0].data()[0];
            let xv = values[x.0].data();
            for (g, u) in grads[x.0].data_mut().iter_mut().zip(upstream.data()) {
                *g += u * c;
            }
            let acc: f64 = upstream.data().iter().zip(xv).map(|(&u, &x)| u * x).sum();
            grads[s.0].data_mut()[0] += acc;
            mark(*x);
            mark(*s);
        }
        Rule::Scale { x, c } => {
            for (g, u) in grads[x.0].data_mut().iter_mut().zip(upstream.data()) {
                *g += u * c;
            }
            mark(*x);
        }
        Rule::Reparam { x, c } => {
            for (g, u) in grads[x.0].data_mut().iter_mut().zip(upstream.data()) {
                *g += u * c;
            }
            mark(*x);
        }
        Rule::Abs { x } => {
            let xv = values[x.0].data();
            for ((g, u), &v) in grads[x.0].data_mut().iter_mut().zip(upstream.data()).zip(xv) {
                *g += u * if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
            mark(*x);
        }
        Rule::Sum { x } => {
            let u = upstream.data()[0];
            for g in grads[x.0].data_mut() {
                *g += u;
            }
            mark(*x);
        }
        Rule::Matmul { a, b } => {
            // dA += U B^T, dB += A^T U, with pooled transpose scratch.
            let (m, k) = (values[a.0].rows(), values[a.0].cols());
            let n = values[b.0].cols();
            let mut bt = pool.take(n * k);
            transpose_into(values[b.0].data(), &mut bt, k, n);
            numerics::matmul_into_raw(upstream.data(), &bt, grads[a.0].data_mut(), m, n, k);
            pool.give(bt);
            let mut at = pool.take(k * m);
            transpose_into(values[a.0].data(), &mut at, m, k);
            numerics::matmul_into_raw(&at, upstream.data(), grads[b.0].data_mut(), k, m, n);
            pool.give(at);
            mark(*a);
            mark(*b);
        }
        Rule::Transpose { x } => {
            let (m, n) = (upstream.rows(), upstream.cols());
            let g = grads[x.0].data_mut();
            for i in 0..m {
                for j in 0..n {
                    g[j * m + i] += upstream.at(i, j);
                }
            }
            mark(*x);
        }
        Rule::ConcatCols { parts } => {
            let mut lo = 0;
            for &p in parts {
                let w = values[p.0].cols();
                let rows = values[p.0].rows();
                let total = upstream.cols();
                let g = grads[p.0].data_mut();
                for i in 0..rows {
                    for j in 0..w {
                        g[i * w + j] += upstream.data()[i * total + lo + j];
                    }
                }
                lo += w;
                mark(p);
            }
        }
        Rule::ConcatRows { parts } => {
            let mut lo = 0;
            for &p in parts {
                let rows = values[p.0].rows();
                let n = values[p.0].cols();
                let g = grads[p.0].data_mut();
                for (gv, uv) in g.iter_mut().zip(&upstream.data()[lo * n..(lo + rows) * n]) {
                    *gv += uv;
                }
                lo += rows;
                mark(p);
            }
        }
        Rule::SliceCols { x, lo } => {
            let n = values[x.0].cols();
            let w = upstream.cols();
            let rows = upstream.rows();
            let g = grads[x.0].data_mut();
            for i in 0..rows {
                for j in 0..w {
                    g[i * n + lo + j] += upstream.data()[i * w + j];
                }
            }
            mark(*x);
        }
        Rule::SliceRows { x, lo } => {
            let n = values[x.0].cols();
            let g = grads[x.0].data_mut();
            for (gv, uv) in g[lo * n..].iter_mut().zip(upstream.data()) {
                *gv += uv;
            }
            mark(*x);
        }
        Rule::SoftmaxRows { x } => {
            // dx = p (u - p . u) per row; p is recomputed from the input.
            let xv = &values[x.0];
            let (m, n) = (xv.rows(), xv.cols());
            let mut p = pool.take(n);
            let g = grads[x.0].data_mut();
            for i in 0..m {
                softmax_row_into(&xv.data()[i * n..(i + 1) * n], &mut p).expect("finite row");
                let urow = &upstream.data()[i * n..(i + 1) * n];
                let dot: f64 = p.iter().zip(urow).map(|(&pv, &uv)| pv * uv).sum();
                for j in 0..n {
                    g[i * n + j] += p[j] * (urow[j] - dot);
                }
            }
            pool.give(p);
            mark(*x);
        }
        Rule::CausalSoftmax { x, scale } => {
            let xv = &values[x.0];
            let t = xv.rows();
            let g = grads[x.0].data_mut();
            let mut p = pool.take(t);
            for i in 0..t {
                // Recompute the prefix softmax of row i.
                let row = &xv.data()[i * t..i * t + i + 1];
                let mut max = f64::NEG_INFINITY;
                for &v in row {
                    let sv = scale * v;
                    if sv > max {
                        max = sv;
                    }
                }
                let mut sum = 0.0;
                for (j, &v) in row.iter().enumerate() {
                    let e = (scale * v - max).exp();
                    p[j] = e;
                    sum += e;
                }
                let inv = 1.0 / sum;
                let urow = &upstream.data()[i * t..i * t + i + 1];
                let mut dot = 0.0;
                for j in 0..=i {
                    p[j] *= inv;
                    dot += p[j] * urow[j];
                }
                for j in 0..=i {
                    g[i * t + j] += scale * p[j] * (urow[j] - dot);
                }
            }
            pool.give(p);
            mark(*x);
        }
        Rule::Silu { x } => {
            let xv = values[x.0].data();
            for ((g, u), &v) in grads[x.0].data_mut().iter_mut().zip(upstream.data()).zip(xv) {
                let sig = 1.0 / (1.0 + (-v).exp());
                *g += u * sig * (1.0 + v * (1.0 - sig));
            }
            mark(*x);
        }
        Rule::UnitNormalizeRows { x, norms } => {
            let xv = &values[x.0];
            let (m, n) = (xv.rows(), xv.cols());
            let g = grads[x.0].data_mut();
            for i in 0..m {
                let norm = norms[i];
                let inv = 1.0 / norm;
                let xrow = &xv.data()[i * n..(i + 1) * n];
                let urow = &upstream.data()[i * n..(i + 1) * n];
                // y = x / n; dx = (u - y (y . u)) / n
                let mut ydotu = 0.0;
                for j in 0..n {
                    ydotu += xrow[j] * inv * urow[j];
                }
                for j in 0..n {
                    g[i * n + j] += (urow[j] - xrow[j] * inv * ydotu) * inv;
                }
            }
            mark(*x);
        }
        Rule::RmsNorm { x, gains, inv_norm } => {
            let xv = &values[x.0];
            let gv = values[gains.0].data();
            let (m, n) = (xv.rows(), xv.cols());
            let sqrt_n = (n as f64).sqrt();
            for i in 0..m {
                let inv = inv_norm[i];
                let r = sqrt_n * inv;
                let xrow = &xv.data()[i * n..(i + 1) * n];
                let urow = &upstream.data()[i * n..(i + 1) * n];
                // dgains[j] += u[j] * r * x[j]
                {
                    let gg = grads[gains.0].data_mut();
                    for j in 0..n {
                        gg[j] += urow[j] * r * xrow[j];
                    }
                }
                // dx = r * (w - x (w . x) / ||x||^2), w = u * gains
                let mut wdotx = 0.0;
                for j in 0..n {
                    wdotx += urow[j] * gv[j] * xrow[j];
                }
                let gx = grads[x.0].data_mut();
                for j in 0..n {
                    gx[i * n + j] += r * (urow[j] * gv[j] - xrow[j] * wdotx * inv * inv);
                }
            }
            mark(*x);
            mark(*gains);
        }
        Rule::Rope { x, table } => {
            let rows = upstream.rows();
            let mut tmp = pool.take(upstream.len());
            rope_rotate(upstream.data(), &mut tmp, &table.cos, &table.sin, rows, table.half, true);
            for (g, v) in grads[x.0].data_mut().iter_mut().zip(&tmp) {
                *g += v;
            }
            pool.give(tmp);
            mark(*x);
        }
        Rule::EmbedLookup { table, ids } => {
            let d = upstream.cols();
            let g = grads[table.0].data_mut();
            for (t, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    g[id * d + j] += upstream.data()[t * d + j];
                }
            }
            mark(*table);
        }
        Rule::CrossEntropy { logits, targets, probs } => {
            let u = upstream.data()[0];
            let t = targets.len();
            let scale = u / t as f64;
            let v = probs.cols();
            let g = grads[logits.0].data_mut();
            for (i, &target) in targets.iter().enumerate() {
                for j in 0..v {
                    let onehot = if j == target { 1.0 } else { 0.0 };
                    g[i * v + j] += scale * (probs.at(i, j) - onehot);
                }
            }
            mark(*logits);
        }
        Rule::TangentProjectRows { h, b, dots } => {
            let hv = &values[h.0];
            let bv = &values[b.0];
            let (m, n) = (hv.rows(), hv.cols());
            for i in 0..m {
                let d = dots[i];
                let hrow = hv.row(i);
                let brow = bv.row(i);
                let urow = &upstream.data()[i * n..(i + 1) * n];
                let udoth: f64 = urow.iter().zip(hrow).map(|(&u, &x)| u * x).sum();
                {
                    let gh = grads[h.0].data_mut();
                    for j in 0..n {
                        gh[i * n + j] += d * urow[j] + udoth * brow[j];
                    }
                }
                let gb = grads[b.0].data_mut();
                for j in 0..n {
                    gb[i * n + j] += udoth * hrow[j] - urow[j];
                }
            }
            mark(*h);
            mark(*b);
        }
        Rule::SlerpRows { a, b, alpha, ctx } => {
            let av = &values[a.0];
            let bv = &values[b.0];
            let w = values[alpha.0].data()[0];
            let (m, n) = (av.rows(), av.cols());
            let mut dalpha = 0.0;
            for i in 0..m {
                let arow = av.row(i);
                let brow = bv.row(i);
                let urow = &upstream.data()[i * n..(i + 1) * n];
                match ctx[i].nlerp_norm {
                    Some(norm) => {
                        // y = z / ||z||, z = (1-w) a + w b
                        let inv = 1.0 / norm;
                        let mut ydotu = 0.0;
                        for j in 0..n {
                            let z = (1.0 - w) * arow[j] + w * brow[j];
                            ydotu += z * inv * urow[j];
                        }
                        let mut dz_dot_ba = 0.0;
                        for j in 0..n {
                            let z = (1.0 - w) * arow[j] + w * brow[j];
                            let dz = (urow[j] - z * inv * ydotu) * inv;
                            grads[a.0].data_mut()[i * n + j] += (1.0 - w) * dz;
                            grads[b.0].data_mut()[i * n + j] += w * dz;
                            dz_dot_ba += dz * (brow[j] - arow[j]);
                        }
                        dalpha += dz_dot_ba;
                    }
                    None => {
                        let theta = ctx[i].theta;
                        let cos_t = ctx[i].cos_theta;
                        let sin_t = theta.sin();
                        let inv_sin = 1.0 / sin_t;
                        let wa = ((1.0 - w) * theta).sin() * inv_sin;
                        let wb = (w * theta).sin() * inv_sin;
                        let dwa_dt = ((1.0 - w) * ((1.0 - w) * theta).cos() * sin_t
                            - ((1.0 - w) * theta).sin() * cos_t)
                            * inv_sin
                            * inv_sin;
                        let dwb_dt = (w * (w * theta).cos() * sin_t - (w * theta).sin() * cos_t)
                            * inv_sin
                            * inv_sin;
                        let dwa_dw = -theta * ((1.0 - w) * theta).cos() * inv_sin;
                        let dwb_dw = theta * (w * theta).cos() * inv_sin;
                        let udota: f64 = urow.iter().zip(arow).map(|(&u, &x)| u * x).sum();
                        let udotb: f64 = urow.iter().zip(brow).map(|(&u, &x)| u * x).sum();
                        // Sensitivity through theta, then theta through a and b.
                        let s = udota * dwa_dt + udotb * dwb_dt;
                        let dtheta_scale = -1.0 / sin_t; // d(acos c)/dc = -1/sqrt(1-c^2)
                        for j in 0..n {
                            grads[a.0].data_mut()[i * n + j] +=
                                wa * urow[j] + s * dtheta_scale * brow[j];
                            grads[b.0].data_mut()[i * n + j] +=
                                wb * urow[j] + s * dtheta_scale * arow[j];
                        }
                        dalpha += udota * dwa_dw + udotb * dwb_dw;
                    }
                }
            }
            grads[alpha.0].data_mut()[0] += dalpha;
            mark(*a);
            mark(*b);
            mark(*alpha);
        }
    }
}

fn transpose_into(src: &[f64], dst: &mut [f64], m: usize, n: usize) {
    debug_assert_eq!(src.len(), m * n);
    debug_assert_eq!(dst.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            dst[j * m + i] = src[i * n + j];
        }
    }
}

/// Max relative error between the reverse-mode gradient of `f` at `x` and a
/// central finite difference. `f` builds a scalar loss from the leaf it is
/// handed.
pub fn grad_check(f: impl Fn(&mut Tape, Var) -> Var, x: &Tensor, eps: f64) -> f64 {
    let mut tape = Tape::new();
    let vx = tape.leaf(x.clone());
    let loss = f(&mut tape, vx);
    assert_eq!(tape.value(loss).len(), 1, "grad_check needs a scalar loss");
    tape.backward(loss).expect("scalar loss");
    let analytic = tape.grad(vx).clone();

    let eval = |t: &Tensor| -> f64 {
        let mut tape = Tape::new();
        let vx = tape.leaf(t.clone());
        let loss = f(&mut tape, vx);
        tape.value(loss).data()[0]
    };

    let mut max_err = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        max_err = max_err.max(err);
    }
    max_err
}
