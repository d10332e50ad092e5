//! Taped forward pass for both variants. Parameters enter the tape as raw
//! leaves (the storage Adam updates); effective eigen learning rates and
//! scaling factors are derived on the tape so gradients flow to the raw
//! values.

use super::{ModelConfig, ModelError, ModelParams, ScaledParam, Variant};
use crate::autodiff::{RopeTable, Tape, Var};
use crate::hypersphere::{AlphaConstraint, EigenLr, ResidualMode};
use crate::numerics::Tensor;
use std::rc::Rc;

/// Effective value of a scaling factor or eigen learning rate on the tape:
/// either a vector broadcast across rows or a single scalar.
#[derive(Debug, Clone, Copy)]
pub struct TapedScaling {
    pub var: Var,
    pub scalar: bool,
}

impl TapedScaling {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        if self.scalar {
            tape.mul_scalar(x, self.var)
        } else {
            tape.mul_bcast(x, self.var)
        }
    }

    /// Apply the `lo..hi` slice of the vector (per-head factors); a scalar
    /// applies whole.
    pub fn apply_slice(&self, tape: &mut Tape, x: Var, lo: usize, hi: usize) -> Var {
        if self.scalar {
            tape.mul_scalar(x, self.var)
        } else {
            let part = tape.slice_cols(self.var, lo, hi);
            tape.mul_bcast(x, part)
        }
    }
}

#[derive(Debug, Clone)]
pub struct TapedLayer {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub w_u: Var,
    pub w_nu: Var,
    pub w_o_mlp: Var,
    pub s_qk: Option<TapedScaling>,
    pub s_u: Option<TapedScaling>,
    pub s_nu: Option<TapedScaling>,
    pub alpha_a: Option<TapedScaling>,
    pub alpha_m: Option<TapedScaling>,
    pub attn_gains: Option<Var>,
    pub mlp_gains: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct TapedParams {
    pub e_input: Var,
    pub e_output: Var,
    pub layers: Vec<TapedLayer>,
    pub s_z: Option<TapedScaling>,
    pub final_gains: Option<Var>,
    raw: Vec<(String, Var)>,
}

impl TapedParams {
    pub fn leaf(tape: &mut Tape, params: &ModelParams) -> Self {
        Self::leaf_inner(tape, params, None)
    }

    /// Like [`TapedParams::leaf`] but wiring `var` in place of the parameter
    /// registered under `name`; used by gradient checking.
    pub fn leaf_with(tape: &mut Tape, params: &ModelParams, name: &str, var: Var) -> Self {
        Self::leaf_inner(tape, params, Some((name, var)))
    }

    /// Raw parameter leaves by canonical name; gradients of these are what
    /// the optimizer consumes.
    pub fn raw_vars(&self) -> &[(String, Var)] {
        &self.raw
    }

    fn leaf_inner(
        tape: &mut Tape,
        params: &ModelParams,
        override_var: Option<(&str, Var)>,
    ) -> Self {
        let mut raw: Vec<(String, Var)> = Vec::new();
        let mut mk = |tape: &mut Tape, name: String, t: &Tensor| -> Var {
            let v = match override_var {
                Some((n, ov)) if n == name => ov,
                _ => tape.leaf(t.clone()),
            };
            raw.push((name, v));
            v
        };

        let e_input = mk(tape, "e_input".into(), &params.e_input);
        let e_output = match &params.e_output_param {
            Some(e) => mk(tape, "e_output".into(), e),
            None => e_input,
        };

        let scaled = |tape: &mut Tape, raw_var: Var, sp: &ScaledParam| -> TapedScaling {
            let var = tape.reparam(raw_var, sp.init(), sp.scale());
            TapedScaling { var, scalar: sp.raw().len() == 1 }
        };
        let alpha = |tape: &mut Tape, raw_var: Var, a: &EigenLr| -> TapedScaling {
            let base = match a.constraint() {
                AlphaConstraint::Absolute => tape.abs(raw_var),
                AlphaConstraint::Free => raw_var,
            };
            let var = tape.reparam(base, a.init(), a.scale());
            TapedScaling { var, scalar: a.raw().len() == 1 }
        };

        let mut layers = Vec::with_capacity(params.layers.len());
        for (i, lp) in params.layers.iter().enumerate() {
            let w_q = mk(tape, format!("layers.{i}.w_q"), &lp.w_q);
            let w_k = mk(tape, format!("layers.{i}.w_k"), &lp.w_k);
            let w_v = mk(tape, format!("layers.{i}.w_v"), &lp.w_v);
            let w_o = mk(tape, format!("layers.{i}.w_o"), &lp.w_o);
            let w_u = mk(tape, format!("layers.{i}.w_u"), &lp.w_u);
            let w_nu = mk(tape, format!("layers.{i}.w_nu"), &lp.w_nu);
            let w_o_mlp = mk(tape, format!("layers.{i}.w_o_mlp"), &lp.w_o_mlp);
            let s_qk = lp.s_qk.as_ref().map(|s| {
                let rv = mk(tape, format!("layers.{i}.s_qk"), s.raw());
                scaled(tape, rv, s)
            });
            let s_u = lp.s_u.as_ref().map(|s| {
                let rv = mk(tape, format!("layers.{i}.s_u"), s.raw());
                scaled(tape, rv, s)
            });
            let s_nu = lp.s_nu.as_ref().map(|s| {
                let rv = mk(tape, format!("layers.{i}.s_nu"), s.raw());
                scaled(tape, rv, s)
            });
            let alpha_a = lp.alpha_a.as_ref().map(|a| {
                let rv = mk(tape, format!("layers.{i}.alpha_a"), a.raw());
                alpha(tape, rv, a)
            });
            let alpha_m = lp.alpha_m.as_ref().map(|a| {
                let rv = mk(tape, format!("layers.{i}.alpha_m"), a.raw());
                alpha(tape, rv, a)
            });
            let attn_gains = lp
                .attn_gains
                .as_ref()
                .map(|g| mk(tape, format!("layers.{i}.attn_gains"), g));
            let mlp_gains = lp
                .mlp_gains
                .as_ref()
                .map(|g| mk(tape, format!("layers.{i}.mlp_gains"), g));
            layers.push(TapedLayer {
                w_q,
                w_k,
                w_v,
                w_o,
                w_u,
                w_nu,
                w_o_mlp,
                s_qk,
                s_u,
                s_nu,
                alpha_a,
                alpha_m,
                attn_gains,
                mlp_gains,
            });
        }

        let s_z = params.s_z.as_ref().map(|s| {
            let rv = mk(tape, "s_z".into(), s.raw());
            scaled(tape, rv, s)
        });
        let final_gains = params
            .final_gains
            .as_ref()
            .map(|g| mk(tape, "final_gains".into(), g));

        Self { e_input, e_output, layers, s_z, final_gains, raw }
    }
}

/// Attention softmax scale: sqrt(d_k) for the normalized variant (unit-norm
/// q and k give dot products of variance 1/d_k), 1/sqrt(d_k) baseline.
pub fn softmax_scale(cfg: &ModelConfig) -> f64 {
    match cfg.variant {
        Variant::Ngpt => (cfg.d_k as f64).sqrt(),
        Variant::Gpt => 1.0 / (cfg.d_k as f64).sqrt(),
    }
}

/// Per-head tape nodes recorded while building an attention block, for
/// inspection in tests and diagnostics.
#[derive(Debug, Clone)]
pub struct AttnTrace {
    /// Causal attention probability matrices, one per head.
    pub probs: Vec<Var>,
    /// q and k after rope (and, in the normalized variant, after
    /// normalization and scaling), one per head.
    pub q_final: Vec<Var>,
    pub k_final: Vec<Var>,
}

pub fn attention_block(
    tape: &mut Tape,
    h: Var,
    layer: &TapedLayer,
    cfg: &ModelConfig,
    rope: &Rc<RopeTable>,
) -> Result<(Var, AttnTrace), ModelError> {
    attention_block_with_scale(tape, h, layer, cfg, rope, softmax_scale(cfg))
}

/// Attention with an explicit softmax scale (the scale/s_qk equivalence of
/// the normalized variant is exercised through this entry point).
pub fn attention_block_with_scale(
    tape: &mut Tape,
    h: Var,
    layer: &TapedLayer,
    cfg: &ModelConfig,
    rope: &Rc<RopeTable>,
    scale: f64,
) -> Result<(Var, AttnTrace), ModelError> {
    let t_len = tape.value(h).rows();
    if t_len > cfg.context {
        return Err(ModelError::SequenceTooLong { len: t_len, context: cfg.context });
    }
    let hin = match cfg.variant {
        Variant::Gpt => tape.rmsnorm(h, layer.attn_gains.expect("gpt attention gains"))?,
        Variant::Ngpt => h,
    };
    let q = tape.matmul(hin, layer.w_q);
    let k = tape.matmul(hin, layer.w_k);
    let v = tape.matmul(hin, layer.w_v);

    let d_k = cfg.d_k;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut trace = AttnTrace { probs: Vec::new(), q_final: Vec::new(), k_final: Vec::new() };
    for head in 0..cfg.n_heads {
        let (lo, hi) = (head * d_k, (head + 1) * d_k);
        let mut qh = tape.slice_cols(q, lo, hi);
        let mut kh = tape.slice_cols(k, lo, hi);
        let vh = tape.slice_cols(v, lo, hi);
        qh = tape.rope(qh, Rc::clone(rope));
        kh = tape.rope(kh, Rc::clone(rope));
        if cfg.variant == Variant::Ngpt {
            // Normalization follows rope (rope distorts q and k), then the
            // shared per-head scaling factors.
            if cfg.qk_norm {
                qh = tape.unit_normalize_rows(qh)?;
                kh = tape.unit_normalize_rows(kh)?;
            }
            if let Some(s_qk) = &layer.s_qk {
                qh = s_qk.apply_slice(tape, qh, lo, hi);
                kh = s_qk.apply_slice(tape, kh, lo, hi);
            }
        }
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let probs = tape.causal_softmax(scores, scale);
        let out = tape.matmul(probs, vh);
        trace.probs.push(probs);
        trace.q_final.push(qh);
        trace.k_final.push(kh);
        heads.push(out);
    }
    let concat = tape.concat_cols(&heads);
    Ok((tape.matmul(concat, layer.w_o), trace))
}

pub fn mlp_block(
    tape: &mut Tape,
    h: Var,
    layer: &TapedLayer,
    cfg: &ModelConfig,
) -> Result<Var, ModelError> {
    let hin = match cfg.variant {
        Variant::Gpt => tape.rmsnorm(h, layer.mlp_gains.expect("gpt mlp gains"))?,
        Variant::Ngpt => h,
    };
    let mut u = tape.matmul(hin, layer.w_u);
    let mut nu = tape.matmul(hin, layer.w_nu);
    if cfg.variant == Variant::Ngpt {
        if let Some(s_u) = &layer.s_u {
            u = s_u.apply(tape, u);
        }
        if let Some(s_nu) = &layer.s_nu {
            nu = s_nu.apply(tape, nu);
        }
        // Rescale so silu sees unit-variance inputs and stays nonlinear.
        nu = tape.scale(nu, (cfg.d_model as f64).sqrt());
    }
    let gate = tape.silu(nu);
    let gated = tape.mul(u, gate);
    Ok(tape.matmul(gated, layer.w_o_mlp))
}

fn residual(
    tape: &mut Tape,
    h: Var,
    block: Var,
    alpha: &TapedScaling,
    mode: ResidualMode,
) -> Result<Var, ModelError> {
    let hb = tape.unit_normalize_rows(block)?;
    match mode {
        ResidualMode::Lerp => {
            let diff = tape.sub(hb, h);
            let step = alpha.apply(tape, diff);
            let mixed = tape.add(h, step);
            Ok(tape.unit_normalize_rows(mixed)?)
        }
        ResidualMode::Slerp => Ok(tape.slerp_rows(h, hb, alpha.var)?),
        ResidualMode::Riemannian => {
            let g = tape.tangent_project_rows(h, hb);
            let step = alpha.apply(tape, g);
            let moved = tape.sub(h, step);
            Ok(tape.unit_normalize_rows(moved)?)
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOut {
    /// [T, vocab] logits (after s_z scaling in the normalized variant).
    pub logits: Var,
    /// Logits before s_z; equal to `logits` for the baseline.
    pub raw_logits: Var,
    /// Hidden state after each layer's mlp residual.
    pub layer_states: Vec<Var>,
}

pub fn forward_taped(
    tape: &mut Tape,
    tp: &TapedParams,
    tokens: &[usize],
    cfg: &ModelConfig,
) -> Result<ForwardOut, ModelError> {
    for &t in tokens {
        if t >= cfg.vocab {
            return Err(ModelError::TokenOutOfRange { token: t, vocab: cfg.vocab });
        }
    }
    if tokens.len() > cfg.context {
        return Err(ModelError::SequenceTooLong { len: tokens.len(), context: cfg.context });
    }
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let rope = Rc::new(RopeTable::new(&positions, cfg.d_k, cfg.rope_base));

    let mut h = tape.embed_lookup(tp.e_input, tokens);
    let mut layer_states = Vec::with_capacity(cfg.n_layers);
    for layer in &tp.layers {
        let (attn, _) = attention_block(tape, h, layer, cfg, &rope)?;
        h = match cfg.variant {
            Variant::Gpt => tape.add(h, attn),
            Variant::Ngpt => {
                residual(tape, h, attn, layer.alpha_a.as_ref().unwrap(), cfg.residual_mode)?
            }
        };
        let mlp = mlp_block(tape, h, layer, cfg)?;
        h = match cfg.variant {
            Variant::Gpt => tape.add(h, mlp),
            Variant::Ngpt => {
                residual(tape, h, mlp, layer.alpha_m.as_ref().unwrap(), cfg.residual_mode)?
            }
        };
        layer_states.push(h);
    }
    if cfg.variant == Variant::Gpt {
        h = tape.rmsnorm(h, tp.final_gains.expect("gpt final gains"))?;
    }
    let e_out_t = tape.transpose(tp.e_output);
    let raw_logits = tape.matmul(h, e_out_t);
    let logits = match &tp.s_z {
        Some(s_z) => s_z.apply(tape, raw_logits),
        None => raw_logits,
    };
    Ok(ForwardOut { logits, raw_logits, layer_states })
}

/// Mean cross-entropy of taped logits against targets.
pub fn loss_taped(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var, ModelError> {
    let vocab = tape.value(logits).cols();
    for &t in targets {
        if t >= vocab {
            return Err(ModelError::TargetOutOfRange { target: t, vocab });
        }
    }
    Ok(tape.cross_entropy(logits, targets))
}

/// Convenience single-sequence forward on a fresh tape.
pub fn forward(
    tokens: &[usize],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(Tape, ForwardOut), ModelError> {
    let mut tape = Tape::new();
    let tp = TapedParams::leaf(&mut tape, params);
    let out = forward_taped(&mut tape, &tp, tokens, cfg)?;
    Ok((tape, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::numerics::l2_norm;

    fn tiny(variant: Variant) -> (ModelConfig, ModelParams) {
        let cfg = ModelConfig::new(variant, 8, 2, 2, 11, 6);
        let params = init_params(&cfg, 7).unwrap();
        (cfg, params)
    }

    #[test]
    fn single_token_attends_only_to_itself() {
        for variant in [Variant::Gpt, Variant::Ngpt] {
            let (cfg, params) = tiny(variant);
            let mut tape = Tape::new();
            let tp = TapedParams::leaf(&mut tape, &params);
            let h = tape.embed_lookup(tp.e_input, &[3]);
            let rope = Rc::new(RopeTable::new(&[0], cfg.d_k, cfg.rope_base));
            let (_, trace) =
                attention_block(&mut tape, h, &tp.layers[0], &cfg, &rope).unwrap();
            for p in &trace.probs {
                assert_eq!(tape.value(*p).shape(), &[1, 1]);
                assert!((tape.value(*p).data()[0] - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn causality_is_exact() {
        for variant in [Variant::Gpt, Variant::Ngpt] {
            let (cfg, params) = tiny(variant);
            let tokens = [1usize, 4, 2, 9, 5];
            let (tape_a, out_a) = forward(&tokens, &params, &cfg).unwrap();
            let mut perturbed = tokens;
            perturbed[4] = 7; // change the last token
            let (tape_b, out_b) = forward(&perturbed, &params, &cfg).unwrap();
            let la = tape_a.value(out_a.logits);
            let lb = tape_b.value(out_b.logits);
            for t in 0..4 {
                for j in 0..cfg.vocab {
                    assert_eq!(la.at(t, j).to_bits(), lb.at(t, j).to_bits());
                }
            }
            // The perturbed position itself must differ.
            assert_ne!(la.row(4), lb.row(4));
        }
    }

    #[test]
    fn ngpt_hidden_states_unit_norm_per_layer() {
        let (cfg, params) = tiny(Variant::Ngpt);
        let tokens = [0usize, 1, 2, 3, 4, 5];
        let (tape, out) = forward(&tokens, &params, &cfg).unwrap();
        for state in &out.layer_states {
            let v = tape.value(*state);
            for i in 0..v.rows() {
                assert!((l2_norm(v.row(i)) - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn ngpt_raw_logits_are_cosines() {
        let (cfg, params) = tiny(Variant::Ngpt);
        let tokens = [10usize, 2, 7, 1];
        let (tape, out) = forward(&tokens, &params, &cfg).unwrap();
        for &v in tape.value(out.raw_logits).data() {
            assert!(v.abs() <= 1.0 + 1e-10, "raw logit {v} outside [-1, 1]");
        }
    }

    #[test]
    fn softmax_scale_equivalence_with_sqk_fourth_root() {
        // sqrt(d_k) softmax scaling with s_qk at 1 gives the same attention
        // probabilities as scale 1 with s_qk effective d_k^(1/4).
        let (cfg, mut params) = tiny(Variant::Ngpt);
        let tokens = [3usize, 1, 4, 1, 5];
        let rope = Rc::new(RopeTable::new(&[0, 1, 2, 3, 4], cfg.d_k, cfg.rope_base));

        let mut tape_a = Tape::new();
        let tp = TapedParams::leaf(&mut tape_a, &params);
        let h = tape_a.embed_lookup(tp.e_input, &tokens);
        let (_, trace_a) = attention_block_with_scale(
            &mut tape_a,
            h,
            &tp.layers[0],
            &cfg,
            &rope,
            (cfg.d_k as f64).sqrt(),
        )
        .unwrap();

        // Same weights, s_qk re-initialized so its effective value is d_k^(1/4).
        let quarter = (cfg.d_k as f64).powf(0.25);
        for layer in &mut params.layers {
            let old = layer.s_qk.as_ref().unwrap();
            layer.s_qk = Some(ScaledParam::new(
                old.raw().len(),
                quarter,
                old.scale(),
                super::super::ScalingMode::Vector,
            ));
        }
        let mut tape_b = Tape::new();
        let tp = TapedParams::leaf(&mut tape_b, &params);
        let h = tape_b.embed_lookup(tp.e_input, &tokens);
        let (_, trace_b) =
            attention_block_with_scale(&mut tape_b, h, &tp.layers[0], &cfg, &rope, 1.0).unwrap();

        for (pa, pb) in trace_a.probs.iter().zip(&trace_b.probs) {
            for (x, y) in tape_a.value(*pa).data().iter().zip(tape_b.value(*pb).data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn qk_norm_gives_unit_rows_before_scaling() {
        let (cfg, mut params) = tiny(Variant::Ngpt);
        // Pin s_qk effective to a constant c; post-scaling norms equal c.
        let c = 1.7;
        for layer in &mut params.layers {
            let old = layer.s_qk.as_ref().unwrap();
            layer.s_qk = Some(ScaledParam::new(
                old.raw().len(),
                c,
                old.scale(),
                super::super::ScalingMode::Vector,
            ));
        }
        let tokens = [0usize, 3, 6, 9];
        let mut tape = Tape::new();
        let tp = TapedParams::leaf(&mut tape, &params);
        let h = tape.embed_lookup(tp.e_input, &tokens);
        let rope = Rc::new(RopeTable::new(&[0, 1, 2, 3], cfg.d_k, cfg.rope_base));
        let (_, trace) = attention_block(&mut tape, h, &tp.layers[0], &cfg, &rope).unwrap();
        for q in &trace.q_final {
            let v = tape.value(*q);
            for i in 0..v.rows() {
                assert!((l2_norm(v.row(i)) - c).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mlp_norm_output_invariant_to_su_rescaling() {
        let (cfg, params) = tiny(Variant::Ngpt);
        let tokens = [2usize, 4, 6];

        let run = |params: &ModelParams| -> Vec<f64> {
            let mut tape = Tape::new();
            let tp = TapedParams::leaf(&mut tape, params);
            let h = tape.embed_lookup(tp.e_input, &tokens);
            let out = mlp_block(&mut tape, h, &tp.layers[0], &cfg).unwrap();
            let normed = tape.unit_normalize_rows(out).unwrap();
            tape.value(normed).data().to_vec()
        };

        let base = run(&params);
        let mut scaled = params.clone();
        for layer in &mut scaled.layers {
            let old = layer.s_u.as_ref().unwrap();
            layer.s_u = Some(ScaledParam::new(
                old.raw().len(),
                3.0, // effective value three times larger
                old.scale(),
                super::super::ScalingMode::Vector,
            ));
        }
        let tripled = run(&scaled);
        for (a, b) in base.iter().zip(&tripled) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn silu_shape_matches_reference_points() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, -1.278]));
        let y = tape.silu(x);
        assert_eq!(tape.value(y).data()[0], 0.0);
        // Minimum of silu is about -0.278 near x = -1.278.
        assert!((tape.value(y).data()[1] - (-0.278)).abs() < 1e-3);
        let grid_min = (-20000..0)
            .map(|i| {
                let v = i as f64 * 1e-4;
                v / (1.0 + (-v).exp())
            })
            .fold(f64::INFINITY, f64::min);
        assert!((grid_min - (-0.278)).abs() < 1e-3);
    }

    #[test]
    fn finite_loss_at_full_context_random_init() {
        for variant in [Variant::Gpt, Variant::Ngpt] {
            let (cfg, params) = tiny(variant);
            let tokens: Vec<usize> = (0..cfg.context).map(|i| i % cfg.vocab).collect();
            let targets: Vec<usize> = (0..cfg.context).map(|i| (i + 1) % cfg.vocab).collect();
            let mut tape = Tape::new();
            let tp = TapedParams::leaf(&mut tape, &params);
            let out = forward_taped(&mut tape, &tp, &tokens, &cfg).unwrap();
            let loss = loss_taped(&mut tape, out.logits, &targets).unwrap();
            assert!(tape.value(loss).data()[0].is_finite());
        }
    }

    #[test]
    fn token_and_length_guards() {
        let (cfg, params) = tiny(Variant::Gpt);
        assert!(matches!(
            forward(&[11], &params, &cfg),
            Err(ModelError::TokenOutOfRange { token: 11, .. })
        ));
        let long: Vec<usize> = vec![0; cfg.context + 1];
        assert!(matches!(
            forward(&long, &params, &cfg),
            Err(ModelError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn tied_embeddings_share_gradient_paths() {
        let mut cfg = ModelConfig::new(Variant::Gpt, 8, 1, 2, 7, 4);
        cfg.tie_embeddings = true;
        let params = init_params(&cfg, 3).unwrap();
        assert!(params.e_output_param.is_none());
        let mut tape = Tape::new();
        let tp = TapedParams::leaf(&mut tape, &params);
        assert_eq!(tp.e_input, tp.e_output);
        let out = forward_taped(&mut tape, &tp, &[0, 1, 2], &cfg).unwrap();
        let loss = loss_taped(&mut tape, out.logits, &[1, 2, 3]).unwrap();
        tape.backward(loss).unwrap();
        // Both the lookup path and the logit path contribute.
        let g = tape.grad(tp.e_input);
        assert!(g.data().iter().any(|&v| v != 0.0));
    }
}
