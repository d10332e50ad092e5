//! Both architectures behind one config: the baseline pre-norm GPT decoder
//! and the normalized transformer, where every embedding-dimension vector
//! lives on the unit hypersphere and residual mixing is governed by eigen
//! learning rates.

mod forward;

pub use forward::{
    attention_block, attention_block_with_scale, forward, forward_taped, loss_taped, mlp_block,
    softmax_scale, AttnTrace, ForwardOut, TapedLayer, TapedParams,
};

use crate::hypersphere::{
    normalize_embedding_dim_in_place, AlphaConstraint, EigenLr, EmbeddingAxis, GeometryError,
    ResidualMode,
};
use crate::numerics::{l2_norm, randn, softmax_row_into, Rng, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Gpt,
    Ngpt,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Gpt => write!(f, "gpt"),
            Variant::Ngpt => write!(f, "ngpt"),
        }
    }
}

/// Shape of a trainable scaling factor: a per-element vector, one learned
/// scalar, or a value pinned at its initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingMode {
    Vector,
    Scalar,
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    InvalidConfig(String),
    TokenOutOfRange { token: usize, vocab: usize },
    TargetOutOfRange { target: usize, vocab: usize },
    SequenceTooLong { len: usize, context: usize },
    Geometry(GeometryError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidConfig(msg) => write!(f, "invalid model config: {msg}"),
            Self::TokenOutOfRange { token, vocab } => {
                write!(f, "token id {token} outside vocabulary of size {vocab}")
            }
            Self::TargetOutOfRange { target, vocab } => {
                write!(f, "target id {target} outside vocabulary of size {vocab}")
            }
            Self::SequenceTooLong { len, context } => {
                write!(f, "sequence length {len} exceeds context {context}")
            }
            Self::Geometry(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<GeometryError> for ModelError {
    fn from(e: GeometryError) -> Self {
        Self::Geometry(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Per-head key/query width; `d_model / n_heads` unless overridden.
    pub d_k: usize,
    /// Hidden width of the MLP block; `4 * d_model` unless overridden.
    pub d_mlp: usize,
    pub vocab: usize,
    pub context: usize,
    pub rope_base: f64,
    pub qk_norm: bool,
    pub residual_mode: ResidualMode,
    pub scaling_mode_sqk: ScalingMode,
    pub scaling_mode_suv: ScalingMode,
    pub scaling_mode_sz: ScalingMode,
    pub alpha_constraint: AlphaConstraint,
    /// Replace the per-element eigen learning rates by one scalar per block.
    pub alpha_scalar: bool,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    pub fn new(
        variant: Variant,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        vocab: usize,
        context: usize,
    ) -> Self {
        Self {
            variant,
            d_model,
            n_layers,
            n_heads,
            d_k: d_model / n_heads,
            d_mlp: 4 * d_model,
            vocab,
            context,
            rope_base: 10000.0,
            qk_norm: true,
            residual_mode: ResidualMode::Lerp,
            scaling_mode_sqk: ScalingMode::Vector,
            scaling_mode_suv: ScalingMode::Vector,
            scaling_mode_sz: ScalingMode::Vector,
            alpha_constraint: AlphaConstraint::Absolute,
            alpha_scalar: false,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_k % 2 != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_k {} must be even for rope coordinate pairs",
                self.d_k
            )));
        }
        if self.vocab == 0 || self.context == 0 || self.n_layers == 0 {
            return Err(ModelError::InvalidConfig(
                "vocab, context and n_layers must be positive".to_string(),
            ));
        }
        if self.variant == Variant::Ngpt
            && self.residual_mode == ResidualMode::Slerp
            && !self.alpha_scalar
        {
            return Err(ModelError::InvalidConfig(
                "slerp residual mode requires alpha_scalar=true (scalar eigen learning rate)"
                    .to_string(),
            ));
        }
        Ok(())
    }
}

/// Trainable scaling vector with the init/scale reparameterization: the
/// stored value starts at `scale`, the forward pass restores
/// `raw / scale * init`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledParam {
    raw: Tensor,
    init: f64,
    scale: f64,
    mode: ScalingMode,
}

impl ScaledParam {
    pub fn new(len: usize, init: f64, scale: f64, mode: ScalingMode) -> Self {
        let stored_len = match mode {
            ScalingMode::Vector => len,
            ScalingMode::Scalar | ScalingMode::Fixed => 1,
        };
        Self {
            raw: Tensor::filled(&[stored_len], scale),
            init,
            scale,
            mode,
        }
    }

    pub fn effective(&self) -> Tensor {
        let (init, scale) = (self.init, self.scale);
        self.raw.map(|v| v / scale * init)
    }

    pub fn trainable(&self) -> bool {
        self.mode != ScalingMode::Fixed
    }

    pub fn mode(&self) -> ScalingMode {
        self.mode
    }

    pub fn init(&self) -> f64 {
        self.init
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn raw(&self) -> &Tensor {
        &self.raw
    }

    pub fn raw_mut(&mut self) -> &mut Tensor {
        &mut self.raw
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// [d_model, n_heads * d_k]; the d_model-length vectors are columns.
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// [n_heads * d_k, d_model]; the d_model-length vectors are rows.
    pub w_o: Tensor,
    /// [d_model, d_mlp]
    pub w_u: Tensor,
    pub w_nu: Tensor,
    /// [d_mlp, d_model]
    pub w_o_mlp: Tensor,
    // normalized variant
    pub s_qk: Option<ScaledParam>,
    pub s_u: Option<ScaledParam>,
    pub s_nu: Option<ScaledParam>,
    pub alpha_a: Option<EigenLr>,
    pub alpha_m: Option<EigenLr>,
    // baseline variant
    pub attn_gains: Option<Tensor>,
    pub mlp_gains: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// [vocab, d_model], rows are token embeddings.
    pub e_input: Tensor,
    /// None when embeddings are tied; use [`ModelParams::e_output`].
    pub e_output_param: Option<Tensor>,
    pub layers: Vec<LayerParams>,
    pub s_z: Option<ScaledParam>,
    pub final_gains: Option<Tensor>,
}

impl ModelParams {
    pub fn e_output(&self) -> &Tensor {
        self.e_output_param.as_ref().unwrap_or(&self.e_input)
    }
}

/// Metadata the optimizer and checkpoints need per named parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamMeta {
    /// Embedding-dimension axis for the post-step renormalization; None for
    /// gains, eigen learning rates and scaling factors.
    pub normalize: Option<EmbeddingAxis>,
    pub trainable: bool,
    /// Weight decay applies (baseline variant only; rmsnorm gains excluded).
    pub decay: bool,
}

const MATRIX_ROWS: ParamMeta =
    ParamMeta { normalize: Some(EmbeddingAxis::Rows), trainable: true, decay: true };
const MATRIX_COLS: ParamMeta =
    ParamMeta { normalize: Some(EmbeddingAxis::Cols), trainable: true, decay: true };
const GAINS: ParamMeta = ParamMeta { normalize: None, trainable: true, decay: false };

fn aux_meta(trainable: bool) -> ParamMeta {
    ParamMeta { normalize: None, trainable, decay: false }
}

impl ModelParams {
    /// Walk every stored tensor in canonical order with its name and meta.
    pub fn visit(&self, f: &mut impl FnMut(&str, ParamMeta, &Tensor)) {
        f("e_input", MATRIX_ROWS, &self.e_input);
        if let Some(e) = &self.e_output_param {
            f("e_output", MATRIX_ROWS, e);
        }
        for (i, layer) in self.layers.iter().enumerate() {
            f(&format!("layers.{i}.w_q"), MATRIX_COLS, &layer.w_q);
            f(&format!("layers.{i}.w_k"), MATRIX_COLS, &layer.w_k);
            f(&format!("layers.{i}.w_v"), MATRIX_COLS, &layer.w_v);
            f(&format!("layers.{i}.w_o"), MATRIX_ROWS, &layer.w_o);
            f(&format!("layers.{i}.w_u"), MATRIX_COLS, &layer.w_u);
            f(&format!("layers.{i}.w_nu"), MATRIX_COLS, &layer.w_nu);
            f(&format!("layers.{i}.w_o_mlp"), MATRIX_ROWS, &layer.w_o_mlp);
            if let Some(s) = &layer.s_qk {
                f(&format!("layers.{i}.s_qk"), aux_meta(s.trainable()), s.raw());
            }
            if let Some(s) = &layer.s_u {
                f(&format!("layers.{i}.s_u"), aux_meta(s.trainable()), s.raw());
            }
            if let Some(s) = &layer.s_nu {
                f(&format!("layers.{i}.s_nu"), aux_meta(s.trainable()), s.raw());
            }
            if let Some(a) = &layer.alpha_a {
                f(&format!("layers.{i}.alpha_a"), aux_meta(true), a.raw());
            }
            if let Some(a) = &layer.alpha_m {
                f(&format!("layers.{i}.alpha_m"), aux_meta(true), a.raw());
            }
            if let Some(g) = &layer.attn_gains {
                f(&format!("layers.{i}.attn_gains"), GAINS, g);
            }
            if let Some(g) = &layer.mlp_gains {
                f(&format!("layers.{i}.mlp_gains"), GAINS, g);
            }
        }
        if let Some(s) = &self.s_z {
            f("s_z", aux_meta(s.trainable()), s.raw());
        }
        if let Some(g) = &self.final_gains {
            f("final_gains", GAINS, g);
        }
    }

    /// Mutable walk in the same canonical order as [`ModelParams::visit`].
    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, ParamMeta, &mut Tensor)) {
        f("e_input", MATRIX_ROWS, &mut self.e_input);
        if let Some(e) = &mut self.e_output_param {
            f("e_output", MATRIX_ROWS, e);
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            f(&format!("layers.{i}.w_q"), MATRIX_COLS, &mut layer.w_q);
            f(&format!("layers.{i}.w_k"), MATRIX_COLS, &mut layer.w_k);
            f(&format!("layers.{i}.w_v"), MATRIX_COLS, &mut layer.w_v);
            f(&format!("layers.{i}.w_o"), MATRIX_ROWS, &mut layer.w_o);
            f(&format!("layers.{i}.w_u"), MATRIX_COLS, &mut layer.w_u);
            f(&format!("layers.{i}.w_nu"), MATRIX_COLS, &mut layer.w_nu);
            f(&format!("layers.{i}.w_o_mlp"), MATRIX_ROWS, &mut layer.w_o_mlp);
            if let Some(s) = &mut layer.s_qk {
                let meta = aux_meta(s.trainable());
                f(&format!("layers.{i}.s_qk"), meta, s.raw_mut());
            }
            if let Some(s) = &mut layer.s_u {
                let meta = aux_meta(s.trainable());
                f(&format!("layers.{i}.s_u"), meta, s.raw_mut());
            }
            if let Some(s) = &mut layer.s_nu {
                let meta = aux_meta(s.trainable());
                f(&format!("layers.{i}.s_nu"), meta, s.raw_mut());
            }
            if let Some(a) = &mut layer.alpha_a {
                f(&format!("layers.{i}.alpha_a"), aux_meta(true), a.raw_mut());
            }
            if let Some(a) = &mut layer.alpha_m {
                f(&format!("layers.{i}.alpha_m"), aux_meta(true), a.raw_mut());
            }
            if let Some(g) = &mut layer.attn_gains {
                f(&format!("layers.{i}.attn_gains"), GAINS, g);
            }
            if let Some(g) = &mut layer.mlp_gains {
                f(&format!("layers.{i}.mlp_gains"), GAINS, g);
            }
        }
        if let Some(s) = &mut self.s_z {
            let meta = aux_meta(s.trainable());
            f("s_z", meta, s.raw_mut());
        }
        if let Some(g) = &mut self.final_gains {
            f("final_gains", GAINS, g);
        }
    }

    /// Parameter names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, _, _| out.push(name.to_string()));
        out
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, t| n += t.len());
        n
    }

    /// Clone of the tensor registered under `name`.
    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        let mut found = None;
        self.visit(&mut |n, _, t| {
            if n == name {
                found = Some(t.clone());
            }
        });
        found
    }

    /// Replace the tensor registered under `name` (shape must match).
    pub fn set_tensor(&mut self, name: &str, value: &Tensor) -> bool {
        let mut found = false;
        self.visit_mut(&mut |n, _, t| {
            if n == name {
                assert_eq!(t.shape(), value.shape(), "set_tensor shape mismatch for {n}");
                *t = value.clone();
                found = true;
            }
        });
        found
    }

    /// Largest deviation of any embedding-dimension vector norm from 1 over
    /// all normalized matrix groups. The manifold audit reads the canonical
    /// storage the optimizer updates.
    pub fn norm_audit(&self) -> f64 {
        let mut worst = 0.0f64;
        self.visit(&mut |_, meta, t| {
            if let Some(axis) = meta.normalize {
                match axis {
                    EmbeddingAxis::Rows => {
                        for i in 0..t.rows() {
                            worst = worst.max((l2_norm(t.row(i)) - 1.0).abs());
                        }
                    }
                    EmbeddingAxis::Cols => {
                        let (rows, cols) = (t.rows(), t.cols());
                        for j in 0..cols {
                            let mut sq = 0.0;
                            for i in 0..rows {
                                let v = t.at(i, j);
                                sq += v * v;
                            }
                            worst = worst.max((sq.sqrt() - 1.0).abs());
                        }
                    }
                }
            }
        });
        worst
    }
}

/// Gaussian initialization per variant. For the baseline, matrices use std
/// 0.02 with the output projections shrunk by sqrt(2 * n_layers); for the
/// normalized variant matrices start at std 1/sqrt(d_model) and are
/// immediately renormalized along their embedding dimension, so the draw
/// only sets directions.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let d = cfg.d_model;
    let hd = cfg.n_heads * cfg.d_k;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let ngpt = cfg.variant == Variant::Ngpt;
    let base_std = if ngpt { inv_sqrt_d } else { 0.02 };
    let out_std = if ngpt {
        inv_sqrt_d
    } else {
        0.02 / (2.0 * cfg.n_layers as f64).sqrt()
    };

    let mut draw = |shape: &[usize], std: f64, axis: EmbeddingAxis| -> Result<Tensor, ModelError> {
        let mut t = randn(&mut rng, shape, 0.0, std);
        if ngpt {
            normalize_embedding_dim_in_place(&mut t, axis)?;
        }
        Ok(t)
    };

    let e_input = draw(&[cfg.vocab, d], base_std, EmbeddingAxis::Rows)?;
    let e_output_param = if cfg.tie_embeddings {
        None
    } else {
        Some(draw(&[cfg.vocab, d], base_std, EmbeddingAxis::Rows)?)
    };

    let alpha_len = if cfg.alpha_scalar { 1 } else { d };
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        let w_q = draw(&[d, hd], base_std, EmbeddingAxis::Cols)?;
        let w_k = draw(&[d, hd], base_std, EmbeddingAxis::Cols)?;
        let w_v = draw(&[d, hd], base_std, EmbeddingAxis::Cols)?;
        let w_o = draw(&[hd, d], out_std, EmbeddingAxis::Rows)?;
        let w_u = draw(&[d, cfg.d_mlp], base_std, EmbeddingAxis::Cols)?;
        let w_nu = draw(&[d, cfg.d_mlp], base_std, EmbeddingAxis::Cols)?;
        let w_o_mlp = draw(&[cfg.d_mlp, d], out_std, EmbeddingAxis::Rows)?;
        layers.push(if ngpt {
            LayerParams {
                w_q,
                w_k,
                w_v,
                w_o,
                w_u,
                w_nu,
                w_o_mlp,
                s_qk: Some(ScaledParam::new(hd, 1.0, inv_sqrt_d, cfg.scaling_mode_sqk)),
                s_u: Some(ScaledParam::new(cfg.d_mlp, 1.0, 1.0, cfg.scaling_mode_suv)),
                s_nu: Some(ScaledParam::new(cfg.d_mlp, 1.0, 1.0, cfg.scaling_mode_suv)),
                alpha_a: Some(EigenLr::new(alpha_len, 0.05, inv_sqrt_d, cfg.alpha_constraint)),
                alpha_m: Some(EigenLr::new(alpha_len, 0.05, inv_sqrt_d, cfg.alpha_constraint)),
                attn_gains: None,
                mlp_gains: None,
            }
        } else {
            LayerParams {
                w_q,
                w_k,
                w_v,
                w_o,
                w_u,
                w_nu,
                w_o_mlp,
                s_qk: None,
                s_u: None,
                s_nu: None,
                alpha_a: None,
                alpha_m: None,
                attn_gains: Some(Tensor::filled(&[d], 1.0)),
                mlp_gains: Some(Tensor::filled(&[d], 1.0)),
            }
        });
    }

    Ok(ModelParams {
        e_input,
        e_output_param,
        layers,
        s_z: ngpt.then(|| ScaledParam::new(cfg.vocab, 1.0, inv_sqrt_d, cfg.scaling_mode_sz)),
        final_gains: (!ngpt).then(|| Tensor::filled(&[d], 1.0)),
    })
}

/// RMS normalization of a single vector: rescale to norm sqrt(d), then apply
/// elementwise gains.
pub fn rmsnorm(h: &[f64], gains: &[f64]) -> Result<Vec<f64>, ModelError> {
    assert_eq!(h.len(), gains.len(), "rmsnorm gains length mismatch");
    let norm = l2_norm(h);
    if norm < crate::hypersphere::DEGENERATE_NORM {
        return Err(GeometryError::DegenerateVector { norm }.into());
    }
    let r = (h.len() as f64).sqrt() / norm;
    Ok(h.iter().zip(gains).map(|(&x, &g)| x * r * g).collect())
}

/// Standard rope on a [T, d_k] tensor: coordinate pair (2i, 2i+1) of the row
/// for position `p` rotates by `p * base^(-2i/d_k)`.
pub fn rope_apply(x: &Tensor, positions: &[usize], base: f64) -> Result<Tensor, ModelError> {
    let d_k = x.cols();
    if d_k % 2 != 0 {
        return Err(ModelError::InvalidConfig(format!(
            "rope needs an even head dimension, got {d_k}"
        )));
    }
    assert_eq!(x.rows(), positions.len(), "rope positions length mismatch");
    let mut out = x.clone();
    for (i, &pos) in positions.iter().enumerate() {
        let row = out.row_mut(i);
        for p in 0..d_k / 2 {
            let angle = pos as f64 * base.powf(-2.0 * p as f64 / d_k as f64);
            let (s, c) = angle.sin_cos();
            let (x0, x1) = (row[2 * p], row[2 * p + 1]);
            row[2 * p] = x0 * c - x1 * s;
            row[2 * p + 1] = x0 * s + x1 * c;
        }
    }
    Ok(out)
}

/// Mean cross-entropy of logits against targets.
pub fn loss(logits: &Tensor, targets: &[usize]) -> Result<f64, ModelError> {
    let vocab = logits.cols();
    assert_eq!(logits.rows(), targets.len(), "loss length mismatch");
    for &t in targets {
        if t >= vocab {
            return Err(ModelError::TargetOutOfRange { target: t, vocab });
        }
    }
    let mut probs = vec![0.0; vocab];
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        softmax_row_into(logits.row(i), &mut probs).expect("finite logits");
        total -= probs[t].ln();
    }
    Ok(total / targets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(variant: Variant) -> ModelConfig {
        ModelConfig::new(variant, 8, 2, 2, 11, 5)
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_cfg(Variant::Gpt);
        cfg.n_heads = 3;
        assert!(matches!(cfg.validate(), Err(ModelError::InvalidConfig(_))));
        let mut cfg = tiny_cfg(Variant::Ngpt);
        cfg.d_k = 3;
        assert!(matches!(cfg.validate(), Err(ModelError::InvalidConfig(_))));
        let mut cfg = tiny_cfg(Variant::Ngpt);
        cfg.residual_mode = crate::hypersphere::ResidualMode::Slerp;
        assert!(cfg.validate().is_err());
        cfg.alpha_scalar = true;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn ngpt_init_embeddings_unit_rows() {
        let cfg = tiny_cfg(Variant::Ngpt);
        let params = init_params(&cfg, 0).unwrap();
        for i in 0..cfg.vocab {
            assert!((l2_norm(params.e_input.row(i)) - 1.0).abs() < 1e-12);
        }
        assert!(params.norm_audit() < 1e-12);
    }

    #[test]
    fn alpha_effective_exactly_half_a_tenth_at_init() {
        let cfg = tiny_cfg(Variant::Ngpt);
        let params = init_params(&cfg, 1).unwrap();
        let alpha = params.layers[0].alpha_a.as_ref().unwrap();
        for &v in alpha.effective().data() {
            assert_eq!(v, 0.05);
        }
    }

    #[test]
    fn s_z_effective_one_raw_inv_sqrt_d() {
        let cfg = tiny_cfg(Variant::Ngpt);
        let params = init_params(&cfg, 2).unwrap();
        let s_z = params.s_z.as_ref().unwrap();
        let inv_sqrt_d = 1.0 / (cfg.d_model as f64).sqrt();
        for &v in s_z.effective().data() {
            assert_eq!(v, 1.0);
        }
        for &v in s_z.raw().data() {
            assert_eq!(v, inv_sqrt_d);
        }
    }

    #[test]
    fn gpt_output_matrices_use_shrunk_std() {
        // Statistical: with 2 layers the output std is 0.02 / 2 = 0.01.
        let mut cfg = ModelConfig::new(Variant::Gpt, 32, 2, 4, 64, 16);
        cfg.d_mlp = 512;
        let params = init_params(&cfg, 3).unwrap();
        let w_o = &params.layers[0].w_o;
        let var: f64 =
            w_o.data().iter().map(|v| v * v).sum::<f64>() / w_o.len() as f64;
        let expect = 0.01f64 * 0.01;
        assert!(
            (var - expect).abs() < 0.2 * expect,
            "var {var} expect {expect}"
        );
    }

    #[test]
    fn visit_names_are_stable_and_distinct() {
        let cfg = tiny_cfg(Variant::Ngpt);
        let params = init_params(&cfg, 4).unwrap();
        let names = params.names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len(), "duplicate names");
        assert!(names.contains(&"layers.1.alpha_m".to_string()));
        assert!(names.contains(&"s_z".to_string()));
    }

    #[test]
    fn set_tensor_round_trip() {
        let cfg = tiny_cfg(Variant::Gpt);
        let mut params = init_params(&cfg, 5).unwrap();
        let mut t = params.tensor("layers.0.w_q").unwrap();
        t.data_mut()[0] = 42.0;
        assert!(params.set_tensor("layers.0.w_q", &t));
        assert_eq!(params.tensor("layers.0.w_q").unwrap().data()[0], 42.0);
        assert!(!params.set_tensor("no_such_param", &t.clone()));
    }

    #[test]
    fn rmsnorm_examples() {
        // Norm already sqrt(d): unchanged.
        let out = rmsnorm(&[1.0, 1.0, 1.0, 1.0], &[1.0; 4]).unwrap();
        for (a, b) in out.iter().zip([1.0; 4]) {
            assert!((a - b).abs() < 1e-15);
        }
        let out = rmsnorm(&[2.0, 0.0, 0.0, 0.0], &[1.0; 4]).unwrap();
        assert!((out[0] - 2.0).abs() < 1e-15);
        // Random vector: output norm is sqrt(d) with unit gains.
        let mut rng = Rng::new(8);
        let h = randn(&mut rng, &[16], 0.0, 3.0);
        let out = rmsnorm(h.data(), &vec![1.0; 16]).unwrap();
        assert!((l2_norm(&out) - 4.0).abs() < 1e-10);
        assert!(rmsnorm(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut rng = Rng::new(9);
        let x = randn(&mut rng, &[1, 8], 0.0, 1.0);
        let out = rope_apply(&x, &[0], 10000.0).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn rope_preserves_norm() {
        let mut rng = Rng::new(10);
        let x = randn(&mut rng, &[6, 8], 0.0, 1.0);
        let out = rope_apply(&x, &[0, 1, 2, 3, 100, 1000], 10000.0).unwrap();
        for i in 0..6 {
            assert!((l2_norm(out.row(i)) - l2_norm(x.row(i))).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_single_rotation_closed_form() {
        // Pair (1, 0) at position 1, frequency index 0: angle is exactly 1.
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]);
        let out = rope_apply(&x, &[1], 10000.0).unwrap();
        assert!((out.at(0, 0) - 1f64.cos()).abs() < 1e-15);
        assert!((out.at(0, 1) - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn rope_odd_dk_is_error() {
        let x = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            rope_apply(&x, &[0], 10000.0),
            Err(ModelError::InvalidConfig(_))
        ));
    }

    #[test]
    fn loss_uniform_logits() {
        let logits = Tensor::zeros(&[3, 4]);
        let l = loss(&logits, &[0, 1, 2]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_confident_logits_near_zero() {
        let mut logits = Tensor::zeros(&[2, 5]);
        logits.set(0, 3, 20.0);
        logits.set(1, 0, 20.0);
        let l = loss(&logits, &[3, 0]).unwrap();
        assert!(l < 1e-8);
    }

    #[test]
    fn loss_matches_direct_formula() {
        let mut rng = Rng::new(12);
        let logits = randn(&mut rng, &[4, 7], 0.0, 2.0);
        let targets = [3usize, 0, 6, 2];
        let l = loss(&logits, &targets).unwrap();
        let mut direct = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            direct -= (row[t] - m) - z.ln();
        }
        direct /= 4.0;
        assert!((l - direct).abs() < 1e-12);
    }

    #[test]
    fn loss_target_out_of_range() {
        let logits = Tensor::zeros(&[1, 4]);
        assert!(matches!(
            loss(&logits, &[4]),
            Err(ModelError::TargetOutOfRange { .. })
        ));
    }
}
