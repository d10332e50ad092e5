//! Geometry on the unit hypersphere: normalization, spherical and linear
//! interpolation, the normalized residual step with eigen learning rates,
//! tangent-space projection, and per-vector renormalization of weight
//! matrices along their embedding dimension.

use crate::numerics::{l2_norm, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Norms below this are treated as degenerate. Far below any activation
/// magnitude reachable in double precision.
pub const DEGENERATE_NORM: f64 = 1e-30;

/// SLERP falls back to normalized LERP below this angle (sin(theta) -> 0).
const SLERP_MIN_ANGLE: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub enum GeometryError {
    DegenerateVector { norm: f64 },
    /// Antipodal endpoints have no unique geodesic.
    AntipodalPoints,
    /// SLERP interpolates by a single angle; per-element alphas don't apply.
    ScalarAlphaRequired,
}

impl fmt::Display for GeometryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DegenerateVector { norm } => {
                write!(f, "degenerate vector: norm {norm:.3e} below {DEGENERATE_NORM:.0e}")
            }
            Self::AntipodalPoints => write!(f, "slerp between antipodal points is undefined"),
            Self::ScalarAlphaRequired => {
                write!(f, "slerp residual mode requires a scalar eigen learning rate")
            }
        }
    }
}

impl std::error::Error for GeometryError {}

/// How the hidden state recombines with a block output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualMode {
    Lerp,
    Slerp,
    Riemannian,
}

/// Whether eigen learning rates are forced non-negative in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaConstraint {
    Absolute,
    Free,
}

/// Learnable per-coordinate step sizes for the residual update, stored with
/// the init/scale reparameterization: the trainable value starts at `scale`
/// and the forward pass restores `raw / scale * init`, so the effective value
/// at initialization is exactly `init`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenLr {
    raw: Tensor,
    init: f64,
    scale: f64,
    constraint: AlphaConstraint,
}

impl EigenLr {
    /// `len` 1 gives the scalar variant used by the SLERP mode and the
    /// scalar-alpha ablation.
    pub fn new(len: usize, init: f64, scale: f64, constraint: AlphaConstraint) -> Self {
        Self {
            raw: Tensor::filled(&[len], scale),
            init,
            scale,
            constraint,
        }
    }

    pub fn effective(&self) -> Tensor {
        let (init, scale) = (self.init, self.scale);
        match self.constraint {
            AlphaConstraint::Absolute => self.raw.map(|v| v.abs() / scale * init),
            AlphaConstraint::Free => self.raw.map(|v| v / scale * init),
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.raw.len() == 1
    }

    pub fn raw(&self) -> &Tensor {
        &self.raw
    }

    pub fn raw_mut(&mut self) -> &mut Tensor {
        &mut self.raw
    }

    pub fn init(&self) -> f64 {
        self.init
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn constraint(&self) -> AlphaConstraint {
        self.constraint
    }
}

/// `x / ||x||`. No element-wise gains.
pub fn unit_normalize(x: &[f64]) -> Result<Vec<f64>, GeometryError> {
    let norm = l2_norm(x);
    if norm < DEGENERATE_NORM {
        return Err(GeometryError::DegenerateVector { norm });
    }
    let inv = 1.0 / norm;
    Ok(x.iter().map(|v| v * inv).collect())
}

/// `(1 - alpha) a + alpha b`.
pub fn lerp(a: &[f64], b: &[f64], alpha: f64) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "lerp operands differ in length");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (1.0 - alpha) * x + alpha * y)
        .collect()
}

/// Geodesic interpolation between unit vectors,
/// `(sin((1-alpha) theta) a + sin(alpha theta) b) / sin(theta)`.
///
/// Angles below 1e-7 fall back to normalized LERP; antipodal endpoints are
/// an error.
pub fn slerp(a: &[f64], b: &[f64], alpha: f64) -> Result<Vec<f64>, GeometryError> {
    assert_eq!(a.len(), b.len(), "slerp operands differ in length");
    debug_assert!((l2_norm(a) - 1.0).abs() < 1e-8, "slerp input a not unit norm");
    debug_assert!((l2_norm(b) - 1.0).abs() < 1e-8, "slerp input b not unit norm");
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    if dot <= -1.0 + 1e-12 {
        return Err(GeometryError::AntipodalPoints);
    }
    let theta = dot.clamp(-1.0, 1.0).acos();
    if theta < SLERP_MIN_ANGLE {
        return unit_normalize(&lerp(a, b, alpha));
    }
    let inv_sin = 1.0 / theta.sin();
    let wa = ((1.0 - alpha) * theta).sin() * inv_sin;
    let wb = (alpha * theta).sin() * inv_sin;
    Ok(a.iter().zip(b).map(|(&x, &y)| wa * x + wb * y).collect())
}

/// Projection of the displacement onto the tangent space at `h`:
/// `h (h . h_block) - h_block`. Orthogonal to `h` when `h` is unit norm.
pub fn tangent_project(h: &[f64], h_block: &[f64]) -> Vec<f64> {
    assert_eq!(h.len(), h_block.len());
    debug_assert!((l2_norm(h) - 1.0).abs() < 1e-8, "tangent_project h not unit norm");
    let dot: f64 = h.iter().zip(h_block).map(|(&x, &y)| x * y).sum();
    h.iter()
        .zip(h_block)
        .map(|(&x, &y)| x * dot - y)
        .collect()
}

/// One residual update on the sphere. `h` must be unit norm; `h_block` is the
/// raw block output and is normalized internally.
pub fn residual_step(
    h: &[f64],
    h_block: &[f64],
    alpha: &EigenLr,
    mode: ResidualMode,
) -> Result<Vec<f64>, GeometryError> {
    debug_assert!((l2_norm(h) - 1.0).abs() < 1e-8, "residual_step h not unit norm");
    let hb = unit_normalize(h_block)?;
    let eff = alpha.effective();
    match mode {
        ResidualMode::Lerp => {
            let a = eff.data();
            let step: Vec<f64> = h
                .iter()
                .zip(&hb)
                .enumerate()
                .map(|(i, (&x, &y))| {
                    let ai = if a.len() == 1 { a[0] } else { a[i] };
                    x + ai * (y - x)
                })
                .collect();
            unit_normalize(&step)
        }
        ResidualMode::Slerp => {
            if !alpha.is_scalar() {
                return Err(GeometryError::ScalarAlphaRequired);
            }
            slerp(h, &hb, eff.data()[0])
        }
        ResidualMode::Riemannian => {
            let g = tangent_project(h, &hb);
            let a = eff.data();
            let step: Vec<f64> = h
                .iter()
                .zip(&g)
                .enumerate()
                .map(|(i, (&x, &gi))| {
                    let ai = if a.len() == 1 { a[0] } else { a[i] };
                    x - ai * gi
                })
                .collect();
            unit_normalize(&step)
        }
    }
}

/// Axis of a matrix holding the d_model-length vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingAxis {
    Rows,
    Cols,
}

/// Normalize every d_model-length vector of a matrix to unit norm.
pub fn normalize_embedding_dim(m: &Tensor, axis: EmbeddingAxis) -> Result<Tensor, GeometryError> {
    let mut out = m.clone();
    normalize_embedding_dim_in_place(&mut out, axis)?;
    Ok(out)
}

/// In-place variant; the optimizer post-step uses this so normalization hits
/// the same storage Adam reads next step.
pub fn normalize_embedding_dim_in_place(
    m: &mut Tensor,
    axis: EmbeddingAxis,
) -> Result<(), GeometryError> {
    let (rows, cols) = (m.rows(), m.cols());
    match axis {
        EmbeddingAxis::Rows => {
            for i in 0..rows {
                let row = m.row_mut(i);
                let norm = l2_norm(row);
                if norm < DEGENERATE_NORM {
                    return Err(GeometryError::DegenerateVector { norm });
                }
                let inv = 1.0 / norm;
                row.iter_mut().for_each(|v| *v *= inv);
            }
        }
        EmbeddingAxis::Cols => {
            let data = m.data_mut();
            for j in 0..cols {
                let mut sq = 0.0;
                for i in 0..rows {
                    let v = data[i * cols + j];
                    sq += v * v;
                }
                let norm = sq.sqrt();
                if norm < DEGENERATE_NORM {
                    return Err(GeometryError::DegenerateVector { norm });
                }
                let inv = 1.0 / norm;
                for i in 0..rows {
                    data[i * cols + j] *= inv;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{randn, Rng};

    fn unit(rng: &mut Rng, n: usize) -> Vec<f64> {
        unit_normalize(randn(rng, &[n], 0.0, 1.0).data()).unwrap()
    }

    #[test]
    fn unit_normalize_basic() {
        let u = unit_normalize(&[3.0, 4.0]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
        let u = unit_normalize(&[0.6, 0.8]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
        let mut rng = Rng::new(4);
        let v = unit(&mut rng, 33);
        assert!((l2_norm(&v) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn unit_normalize_degenerate() {
        assert!(matches!(
            unit_normalize(&[0.0, 0.0]),
            Err(GeometryError::DegenerateVector { .. })
        ));
    }

    #[test]
    fn slerp_endpoints() {
        let mut rng = Rng::new(10);
        let a = unit(&mut rng, 8);
        let b = unit(&mut rng, 8);
        let s0 = slerp(&a, &b, 0.0).unwrap();
        let s1 = slerp(&a, &b, 1.0).unwrap();
        for i in 0..8 {
            assert!((s0[i] - a[i]).abs() < 1e-12);
            assert!((s1[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn slerp_orthogonal_midpoint() {
        let a = vec![1.0, 0.0, 0.0];
        let b = vec![0.0, 1.0, 0.0];
        let mid = slerp(&a, &b, 0.5).unwrap();
        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        assert!((mid[0] - inv_sqrt2).abs() < 1e-15);
        assert!((mid[1] - inv_sqrt2).abs() < 1e-15);
    }

    #[test]
    fn slerp_orthogonal_third() {
        // theta = pi/2, alpha = 1/3 gives a rotation by pi/6.
        let a = vec![1.0, 0.0, 0.0];
        let b = vec![0.0, 1.0, 0.0];
        let s = slerp(&a, &b, 1.0 / 3.0).unwrap();
        assert!((s[0] - 3f64.sqrt() / 2.0).abs() < 1e-15);
        assert!((s[1] - 0.5).abs() < 1e-15);
        assert_eq!(s[2], 0.0);
    }

    #[test]
    fn slerp_antipodal_is_error() {
        let a = vec![1.0, 0.0];
        let b = vec![-1.0, 0.0];
        assert!(matches!(slerp(&a, &b, 0.5), Err(GeometryError::AntipodalPoints)));
    }

    #[test]
    fn slerp_tiny_angle_falls_back_to_lerp() {
        let a = vec![1.0, 0.0];
        let eps = 1e-9;
        let b = unit_normalize(&[1.0, eps]).unwrap();
        let s = slerp(&a, &b, 0.5).unwrap();
        assert!((l2_norm(&s) - 1.0).abs() < 1e-12);
        assert!(s[1] > 0.0 && s[1] < eps);
    }

    #[test]
    fn slerp_constant_angular_speed() {
        let mut rng = Rng::new(20);
        for _ in 0..50 {
            let a = unit(&mut rng, 16);
            let b = unit(&mut rng, 16);
            let theta = a
                .iter()
                .zip(&b)
                .map(|(&x, &y)| x * y)
                .sum::<f64>()
                .clamp(-1.0, 1.0)
                .acos();
            for &alpha in &[0.2, 0.5, 0.8] {
                let s = slerp(&a, &b, alpha).unwrap();
                let d: f64 = s.iter().zip(&a).map(|(&x, &y)| x * y).sum();
                assert!((d - (alpha * theta).cos()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn slerp_agrees_with_normalized_lerp_at_special_alphas() {
        let mut rng = Rng::new(21);
        for _ in 0..100 {
            let a = unit(&mut rng, 12);
            let b = unit(&mut rng, 12);
            for &alpha in &[0.0, 0.5, 1.0] {
                let s = slerp(&a, &b, alpha).unwrap();
                let nl = unit_normalize(&lerp(&a, &b, alpha)).unwrap();
                for (x, y) in s.iter().zip(&nl) {
                    assert!((x - y).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn slerp_close_to_normalized_lerp_for_small_angles() {
        let mut rng = Rng::new(22);
        for _ in 0..200 {
            let a = unit(&mut rng, 24);
            // Construct b within 0.5 rad of a.
            let noise = randn(&mut rng, &[24], 0.0, 0.1);
            let mixed: Vec<f64> = a.iter().zip(noise.data()).map(|(&x, &n)| x + n).collect();
            let b = unit_normalize(&mixed).unwrap();
            let theta = a
                .iter()
                .zip(&b)
                .map(|(&x, &y)| x * y)
                .sum::<f64>()
                .clamp(-1.0, 1.0)
                .acos();
            if theta > 0.5 {
                continue;
            }
            let alpha = rng.next_f64();
            let s = slerp(&a, &b, alpha).unwrap();
            let nl = unit_normalize(&lerp(&a, &b, alpha)).unwrap();
            let dist = s
                .iter()
                .zip(&nl)
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            assert!(dist < 0.02, "theta {theta} dist {dist}");
        }
    }

    #[test]
    fn lerp_cases() {
        let a = vec![0.0, 0.0];
        let b = vec![2.0, 4.0];
        assert_eq!(lerp(&a, &b, 0.0), a);
        assert_eq!(lerp(&a, &b, 0.5), vec![1.0, 2.0]);
        let mut rng = Rng::new(30);
        let x = randn(&mut rng, &[9], 0.0, 1.0);
        let y = randn(&mut rng, &[9], 0.0, 1.0);
        let alpha = 0.37;
        let l = lerp(x.data(), y.data(), alpha);
        for i in 0..9 {
            let direct = (1.0 - alpha) * x.data()[i] + alpha * y.data()[i];
            assert!((l[i] - direct).abs() < 1e-15);
        }
    }

    #[test]
    fn tangent_project_cases() {
        let mut rng = Rng::new(40);
        let h = unit(&mut rng, 10);
        // Aligned: projection vanishes.
        let g = tangent_project(&h, &h);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
        // Orthogonal: projection is -h_block.
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 1.0];
        let g = tangent_project(&a, &b);
        assert_eq!(g, vec![0.0, -1.0]);
        // Random pair: orthogonal to h.
        for _ in 0..50 {
            let h = unit(&mut rng, 16);
            let hb = unit(&mut rng, 16);
            let g = tangent_project(&h, &hb);
            let dot: f64 = h.iter().zip(&g).map(|(&x, &y)| x * y).sum();
            assert!(dot.abs() < 1e-12);
        }
    }

    #[test]
    fn residual_step_alpha_zero_keeps_h() {
        let mut rng = Rng::new(50);
        let h = unit(&mut rng, 8);
        let hb = randn(&mut rng, &[8], 0.0, 1.0);
        let alpha = EigenLr {
            raw: Tensor::zeros(&[8]),
            init: 1.0,
            scale: 1.0,
            constraint: AlphaConstraint::Absolute,
        };
        let out = residual_step(&h, hb.data(), &alpha, ResidualMode::Lerp).unwrap();
        for (x, y) in out.iter().zip(&h) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_step_alpha_one_takes_block() {
        let mut rng = Rng::new(51);
        let h = unit(&mut rng, 8);
        let hb = randn(&mut rng, &[8], 0.0, 1.0);
        let alpha = EigenLr::new(8, 1.0, 1.0, AlphaConstraint::Absolute);
        let out = residual_step(&h, hb.data(), &alpha, ResidualMode::Lerp).unwrap();
        let expect = unit_normalize(hb.data()).unwrap();
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_step_midpoint_coincidence() {
        // Orthogonal h and normalized block, scalar alpha 0.5: lerp and slerp
        // modes both give (h + b) / sqrt(2).
        let h = vec![1.0, 0.0, 0.0];
        let hb = vec![0.0, 2.0, 0.0];
        let alpha = EigenLr::new(1, 0.5, 1.0, AlphaConstraint::Absolute);
        let l = residual_step(&h, &hb, &alpha, ResidualMode::Lerp).unwrap();
        let s = residual_step(&h, &hb, &alpha, ResidualMode::Slerp).unwrap();
        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        for i in 0..3 {
            assert!((l[i] - s[i]).abs() < 1e-12);
        }
        assert!((l[0] - inv_sqrt2).abs() < 1e-12 && (l[1] - inv_sqrt2).abs() < 1e-12);
    }

    #[test]
    fn residual_step_slerp_rejects_vector_alpha() {
        let h = vec![1.0, 0.0];
        let hb = vec![0.0, 1.0];
        let alpha = EigenLr::new(2, 0.5, 1.0, AlphaConstraint::Absolute);
        assert!(matches!(
            residual_step(&h, &hb, &alpha, ResidualMode::Slerp),
            Err(GeometryError::ScalarAlphaRequired)
        ));
    }

    #[test]
    fn residual_step_output_unit_norm_all_modes() {
        let mut rng = Rng::new(52);
        for mode in [ResidualMode::Lerp, ResidualMode::Slerp, ResidualMode::Riemannian] {
            for _ in 0..50 {
                let h = unit(&mut rng, 12);
                let hb = randn(&mut rng, &[12], 0.0, 1.5);
                let alpha = match mode {
                    ResidualMode::Slerp => EigenLr::new(1, 0.3, 0.5, AlphaConstraint::Absolute),
                    _ => EigenLr::new(12, 0.3, 0.5, AlphaConstraint::Absolute),
                };
                let out = residual_step(&h, hb.data(), &alpha, mode).unwrap();
                assert!((l2_norm(&out) - 1.0).abs() < 1e-10, "{mode:?}");
            }
        }
    }

    #[test]
    fn eigen_lr_effective_exact_at_init() {
        let d = 128;
        let alpha = EigenLr::new(d, 0.05, 1.0 / (d as f64).sqrt(), AlphaConstraint::Absolute);
        for &v in alpha.effective().data() {
            assert_eq!(v, 0.05);
        }
        let free = EigenLr::new(d, 1.0, 1.0 / (d as f64).sqrt(), AlphaConstraint::Free);
        for &v in free.effective().data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn eigen_lr_absolute_is_non_negative() {
        let mut alpha = EigenLr::new(6, 0.05, 0.1, AlphaConstraint::Absolute);
        let mut rng = Rng::new(60);
        *alpha.raw_mut() = randn(&mut rng, &[6], 0.0, 1.0);
        assert!(alpha.effective().data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn normalize_embedding_dim_rows() {
        let m = Tensor::from_vec(&[2, 2], vec![3.0, 4.0, 0.0, 2.0]);
        let out = normalize_embedding_dim(&m, EmbeddingAxis::Rows).unwrap();
        assert!((out.at(0, 0) - 0.6).abs() < 1e-15 && (out.at(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(out.row(1), &[0.0, 1.0]);
        // Idempotence.
        let again = normalize_embedding_dim(&out, EmbeddingAxis::Rows).unwrap();
        for (x, y) in again.data().iter().zip(out.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn normalize_embedding_dim_cols_and_random_norms() {
        let mut rng = Rng::new(70);
        let m = randn(&mut rng, &[16, 8], 0.0, 1.0);
        let rows = normalize_embedding_dim(&m, EmbeddingAxis::Rows).unwrap();
        for i in 0..16 {
            assert!((l2_norm(rows.row(i)) - 1.0).abs() < 1e-12);
        }
        let cols = normalize_embedding_dim(&m, EmbeddingAxis::Cols).unwrap();
        for j in 0..8 {
            let col: Vec<f64> = (0..16).map(|i| cols.at(i, j)).collect();
            assert!((l2_norm(&col) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_embedding_dim_zero_vector_is_error() {
        let m = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 0.0, 0.0]);
        assert!(matches!(
            normalize_embedding_dim(&m, EmbeddingAxis::Rows),
            Err(GeometryError::DegenerateVector { .. })
        ));
    }
}
