//! Logits of the taped forward pass checked against a straight-line
//! re-implementation that shares no code with the tape: plain nested-loop
//! linear algebra, the pure geometry helpers, and an explicit -inf mask fed
//! through the public softmax.

use ngpt_core::hypersphere::{residual_step, unit_normalize, EigenLr, ResidualMode};
use ngpt_core::model::{
    forward, init_params, loss, rmsnorm, rope_apply, ModelConfig, ModelParams, ScalingMode,
    Variant,
};
use ngpt_core::numerics::{softmax_rows, Tensor};

fn matvec_cols(m: &Tensor, x: &[f64]) -> Vec<f64> {
    // y_j = sum_i x_i m[i][j]
    let (rows, cols) = (m.rows(), m.cols());
    assert_eq!(rows, x.len());
    let mut y = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            y[j] += x[i] * m.at(i, j);
        }
    }
    y
}

fn effective_vec(sp: &ngpt_core::model::ScaledParam, want: usize) -> Vec<f64> {
    let eff = sp.effective();
    if eff.len() == 1 {
        vec![eff.data()[0]; want]
    } else {
        eff.data().to_vec()
    }
}

fn alpha_for_row(alpha: &EigenLr) -> EigenLr {
    alpha.clone()
}

fn oracle_forward(tokens: &[usize], params: &ModelParams, cfg: &ModelConfig) -> Vec<Vec<f64>> {
    let t_len = tokens.len();
    let d = cfg.d_model;
    let hd = cfg.n_heads * cfg.d_k;
    let positions: Vec<usize> = (0..t_len).collect();
    let ngpt = cfg.variant == Variant::Ngpt;

    let mut h: Vec<Vec<f64>> = tokens.iter().map(|&t| params.e_input.row(t).to_vec()).collect();
    for layer in &params.layers {
        // --- attention ---
        let hin: Vec<Vec<f64>> = if ngpt {
            h.clone()
        } else {
            h.iter()
                .map(|row| rmsnorm(row, layer.attn_gains.as_ref().unwrap().data()).unwrap())
                .collect()
        };
        let q: Vec<Vec<f64>> = hin.iter().map(|r| matvec_cols(&layer.w_q, r)).collect();
        let k: Vec<Vec<f64>> = hin.iter().map(|r| matvec_cols(&layer.w_k, r)).collect();
        let v: Vec<Vec<f64>> = hin.iter().map(|r| matvec_cols(&layer.w_v, r)).collect();
        let scale = if ngpt {
            (cfg.d_k as f64).sqrt()
        } else {
            1.0 / (cfg.d_k as f64).sqrt()
        };
        let s_qk_eff = layer.s_qk.as_ref().map(|s| effective_vec(s, hd));

        let mut concat: Vec<Vec<f64>> = vec![vec![0.0; hd]; t_len];
        for head in 0..cfg.n_heads {
            let (lo, hi) = (head * cfg.d_k, (head + 1) * cfg.d_k);
            let slice =
                |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> { m.iter().map(|r| r[lo..hi].to_vec()).collect() };
            let qh = slice(&q);
            let kh = slice(&k);
            let vh = slice(&v);
            let to_tensor = |m: &Vec<Vec<f64>>| {
                Tensor::from_vec(&[t_len, cfg.d_k], m.concat())
            };
            let mut qh = rope_apply(&to_tensor(&qh), &positions, cfg.rope_base).unwrap();
            let mut kh = rope_apply(&to_tensor(&kh), &positions, cfg.rope_base).unwrap();
            if ngpt {
                if cfg.qk_norm {
                    let norm_rows = |m: &Tensor| {
                        let mut rows = Vec::new();
                        for i in 0..t_len {
                            rows.extend(unit_normalize(m.row(i)).unwrap());
                        }
                        Tensor::from_vec(&[t_len, cfg.d_k], rows)
                    };
                    qh = norm_rows(&qh);
                    kh = norm_rows(&kh);
                }
                if let Some(s) = &s_qk_eff {
                    for i in 0..t_len {
                        for j in 0..cfg.d_k {
                            let f = s[lo + j];
                            qh.set(i, j, qh.at(i, j) * f);
                            kh.set(i, j, kh.at(i, j) * f);
                        }
                    }
                }
            }
            // scores with the -inf causal mask through the public softmax
            let mut scores = Tensor::zeros(&[t_len, t_len]);
            for i in 0..t_len {
                for j in 0..t_len {
                    if j > i {
                        scores.set(i, j, f64::NEG_INFINITY);
                    } else {
                        let dot: f64 =
                            qh.row(i).iter().zip(kh.row(j)).map(|(&a, &b)| a * b).sum();
                        scores.set(i, j, dot * scale);
                    }
                }
            }
            let probs = softmax_rows(&scores).unwrap();
            for i in 0..t_len {
                for j in 0..cfg.d_k {
                    let mut acc = 0.0;
                    for s in 0..t_len {
                        acc += probs.at(i, s) * vh[s][j];
                    }
                    concat[i][lo + j] = acc;
                }
            }
        }
        let attn: Vec<Vec<f64>> = concat.iter().map(|r| matvec_cols(&layer.w_o, r)).collect();
        h = if ngpt {
            let alpha = alpha_for_row(layer.alpha_a.as_ref().unwrap());
            h.iter()
                .zip(&attn)
                .map(|(hr, ar)| residual_step(hr, ar, &alpha, cfg.residual_mode).unwrap())
                .collect()
        } else {
            h.iter()
                .zip(&attn)
                .map(|(hr, ar)| hr.iter().zip(ar).map(|(&a, &b)| a + b).collect())
                .collect()
        };

        // --- mlp ---
        let hin: Vec<Vec<f64>> = if ngpt {
            h.clone()
        } else {
            h.iter()
                .map(|row| rmsnorm(row, layer.mlp_gains.as_ref().unwrap().data()).unwrap())
                .collect()
        };
        let s_u_eff = layer.s_u.as_ref().map(|s| effective_vec(s, cfg.d_mlp));
        let s_nu_eff = layer.s_nu.as_ref().map(|s| effective_vec(s, cfg.d_mlp));
        let mlp: Vec<Vec<f64>> = hin
            .iter()
            .map(|r| {
                let mut u = matvec_cols(&layer.w_u, r);
                let mut nu = matvec_cols(&layer.w_nu, r);
                if ngpt {
                    let su = s_u_eff.as_ref().unwrap();
                    let snu = s_nu_eff.as_ref().unwrap();
                    let root_d = (d as f64).sqrt();
                    for j in 0..cfg.d_mlp {
                        u[j] *= su[j];
                        nu[j] *= snu[j] * root_d;
                    }
                }
                let gated: Vec<f64> = u
                    .iter()
                    .zip(&nu)
                    .map(|(&uj, &nj)| uj * (nj / (1.0 + (-nj).exp())))
                    .collect();
                matvec_cols(&layer.w_o_mlp, &gated)
            })
            .collect();
        h = if ngpt {
            let alpha = alpha_for_row(layer.alpha_m.as_ref().unwrap());
            h.iter()
                .zip(&mlp)
                .map(|(hr, mr)| residual_step(hr, mr, &alpha, cfg.residual_mode).unwrap())
                .collect()
        } else {
            h.iter()
                .zip(&mlp)
                .map(|(hr, mr)| hr.iter().zip(mr).map(|(&a, &b)| a + b).collect())
                .collect()
        };
    }

    if !ngpt {
        let gains = params.final_gains.as_ref().unwrap();
        h = h.iter().map(|r| rmsnorm(r, gains.data()).unwrap()).collect();
    }
    let e_out = params.e_output();
    let s_z_eff = params.s_z.as_ref().map(|s| effective_vec(s, cfg.vocab));
    h.iter()
        .map(|r| {
            (0..cfg.vocab)
                .map(|t| {
                    let dot: f64 = e_out.row(t).iter().zip(r).map(|(&a, &b)| a * b).sum();
                    match &s_z_eff {
                        Some(s) => dot * s[t],
                        None => dot,
                    }
                })
                .collect()
        })
        .collect()
}

fn compare(cfg: &ModelConfig, seed: u64) {
    let params = init_params(cfg, seed).unwrap();
    let tokens = [3usize, 10, 0, 7, 5];
    let (tape, out) = forward(&tokens, &params, cfg).unwrap();
    let got = tape.value(out.logits);
    let want = oracle_forward(&tokens, &params, cfg);
    for i in 0..tokens.len() {
        for j in 0..cfg.vocab {
            let (a, b) = (got.at(i, j), want[i][j]);
            assert!(
                (a - b).abs() < 1e-10,
                "logit [{i}][{j}]: taped {a} vs oracle {b} ({cfg:?})"
            );
        }
    }
    // Sanity: finite loss through the public scorer too.
    let targets = [1usize, 2, 3, 4, 5];
    assert!(loss(got, &targets).unwrap().is_finite());
}

#[test]
fn gpt_matches_straight_line_oracle() {
    let cfg = ModelConfig::new(Variant::Gpt, 8, 2, 2, 11, 5);
    compare(&cfg, 31);
}

#[test]
fn gpt_tied_embeddings_matches_oracle() {
    let mut cfg = ModelConfig::new(Variant::Gpt, 8, 2, 2, 11, 5);
    cfg.tie_embeddings = true;
    compare(&cfg, 32);
}

#[test]
fn ngpt_default_matches_oracle() {
    let cfg = ModelConfig::new(Variant::Ngpt, 8, 2, 2, 11, 5);
    compare(&cfg, 33);
}

#[test]
fn ngpt_without_qk_norm_matches_oracle() {
    let mut cfg = ModelConfig::new(Variant::Ngpt, 8, 2, 2, 11, 5);
    cfg.qk_norm = false;
    compare(&cfg, 34);
}

#[test]
fn ngpt_riemannian_matches_oracle() {
    let mut cfg = ModelConfig::new(Variant::Ngpt, 8, 2, 2, 11, 5);
    cfg.residual_mode = ResidualMode::Riemannian;
    compare(&cfg, 35);
}

#[test]
fn ngpt_slerp_scalar_alpha_matches_oracle() {
    let mut cfg = ModelConfig::new(Variant::Ngpt, 8, 2, 2, 11, 5);
    cfg.residual_mode = ResidualMode::Slerp;
    cfg.alpha_scalar = true;
    compare(&cfg, 36);
}

#[test]
fn ngpt_scalar_scaling_modes_match_oracle() {
    let mut cfg = ModelConfig::new(Variant::Ngpt, 8, 2, 2, 11, 5);
    cfg.scaling_mode_sqk = ScalingMode::Scalar;
    cfg.scaling_mode_suv = ScalingMode::Scalar;
    cfg.scaling_mode_sz = ScalingMode::Scalar;
    compare(&cfg, 37);
}

#[test]
fn ngpt_fixed_scaling_modes_match_oracle() {
    let mut cfg = ModelConfig::new(Variant::Ngpt, 8, 2, 2, 11, 5);
    cfg.scaling_mode_sqk = ScalingMode::Fixed;
    cfg.scaling_mode_suv = ScalingMode::Fixed;
    cfg.scaling_mode_sz = ScalingMode::Fixed;
    compare(&cfg, 38);
}
