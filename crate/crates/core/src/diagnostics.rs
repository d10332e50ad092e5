//! Inspection metrics over trained parameters: per-layer condition numbers,
//! embedding norm/eigenvalue/dot-product distributions, and the learned
//! eigen-learning-rate and scaling-factor distributions. Everything exports
//! as CSV with `#` comment lines carrying the metadata needed to reproduce
//! the numbers (seeds, bin edges, flags).

use crate::hypersphere::normalize_embedding_dim;
use crate::model::{ModelConfig, ModelParams, Variant};
use crate::numerics::{l2_norm, singular_values, NumericsError, Rng, Tensor};
use std::fmt;

pub const HIST_BINS: usize = 128;
/// Cap on sampled embedding pairs for the dot-product distribution.
pub const MAX_DOT_PAIRS: usize = 1_000_000;

#[derive(Debug)]
pub enum DiagnosticsError {
    WrongVariant { expected: Variant, got: Variant },
    Numerics(NumericsError),
}

impl fmt::Display for DiagnosticsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::WrongVariant { expected, got } => {
                write!(f, "report requires the {expected} variant, got {got}")
            }
            Self::Numerics(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for DiagnosticsError {}

impl From<NumericsError> for DiagnosticsError {
    fn from(e: NumericsError) -> Self {
        Self::Numerics(e)
    }
}

/// Fixed-width histogram with its bin edges, so plots are reproducible from
/// the emitted data alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn build(values: &[f64], bins: usize) -> Self {
        assert!(bins >= 1 && !values.is_empty());
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo == hi {
            lo -= 0.5;
            hi += 0.5;
        }
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0u64; bins];
        for &v in values {
            let idx = (((v - lo) / width) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        Self { edges, counts }
    }

    pub fn csv_rows(&self, out: &mut String) {
        for (i, &c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{c}\n", self.edges[i], self.edges[i + 1]));
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Ratio of largest to smallest singular value; +inf when the smallest is
/// zero to machine resolution.
pub fn condition_number(m: &Tensor) -> Result<f64, NumericsError> {
    assert!(
        m.rows().min(m.cols()) >= 2,
        "condition_number needs a matrix with both dimensions >= 2"
    );
    let sigma = singular_values(m)?;
    let max = sigma[0];
    let min = *sigma.last().unwrap();
    if min < 1e-300 * max {
        return Ok(f64::INFINITY);
    }
    Ok(max / min)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionRow {
    pub layer: usize,
    pub matrix: &'static str,
    pub median_cond: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub rows: Vec<ConditionRow>,
    pub renormalized: bool,
}

impl ConditionReport {
    /// Mean over layers of the given matrix's median condition number.
    pub fn mean_over_layers(&self, matrices: &[&str]) -> f64 {
        let picked: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| matrices.contains(&r.matrix))
            .map(|r| r.median_cond)
            .collect();
        picked.iter().sum::<f64>() / picked.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# renormalized={}\nlayer,matrix,median_cond\n", self.renormalized);
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.layer, r.matrix, r.median_cond));
        }
        out
    }
}

/// Condition numbers per layer: per-head slices for the attention matrices
/// (median across heads), whole matrices for the MLP. `renormalized`
/// re-normalizes the embedding dimension first, separating vector-norm
/// spread from genuine rank deficiency.
pub fn per_layer_condition_report(
    params: &ModelParams,
    cfg: &ModelConfig,
    renormalized: bool,
) -> Result<ConditionReport, DiagnosticsError> {
    let d_k = cfg.d_k;
    let mut rows = Vec::new();
    for (li, layer) in params.layers.iter().enumerate() {
        let mut push = |matrix: &'static str, value: f64| {
            rows.push(ConditionRow { layer: li, matrix, median_cond: value });
        };
        let prep = |m: &Tensor, axis| -> Result<Tensor, DiagnosticsError> {
            if renormalized {
                normalize_embedding_dim(m, axis)
                    .map_err(|_| DiagnosticsError::Numerics(NumericsError::NonFinite {
                        what: "renormalized matrix".to_string(),
                    }))
            } else {
                Ok(m.clone())
            }
        };
        // Per-head column slices of the input projections.
        for (name, m) in [("w_q", &layer.w_q), ("w_k", &layer.w_k), ("w_v", &layer.w_v)] {
            let m = prep(m, crate::hypersphere::EmbeddingAxis::Cols)?;
            let mut conds = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let slice = m.slice_cols(h * d_k, (h + 1) * d_k);
                conds.push(condition_number(&slice)?);
            }
            push(name, median(&mut conds));
        }
        // Per-head row blocks of the output projection.
        {
            let m = prep(&layer.w_o, crate::hypersphere::EmbeddingAxis::Rows)?;
            let mut conds = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let slice = m.slice_rows(h * d_k, (h + 1) * d_k);
                conds.push(condition_number(&slice)?);
            }
            push("w_o", median(&mut conds));
        }
        let w_u = prep(&layer.w_u, crate::hypersphere::EmbeddingAxis::Cols)?;
        push("w_u", condition_number(&w_u)?);
        let w_nu = prep(&layer.w_nu, crate::hypersphere::EmbeddingAxis::Cols)?;
        push("w_nu", condition_number(&w_nu)?);
        let w_o_mlp = prep(&layer.w_o_mlp, crate::hypersphere::EmbeddingAxis::Rows)?;
        push("w_o_mlp", condition_number(&w_o_mlp)?);
    }
    Ok(ConditionReport { rows, renormalized })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStats {
    pub norms: Vec<f64>,
    pub norm_hist: Histogram,
    pub max_norm_dev_from_unit: f64,
    /// Covariance eigenvalues divided by their median, descending. Empty and
    /// flagged degenerate when the covariance has (numerically) no rank.
    pub eig_over_median: Vec<f64>,
    pub degenerate_covariance: bool,
    pub dot_hist: Histogram,
    pub dot_mean: f64,
    pub n_pairs: usize,
    pub seed: u64,
}

/// Row-norm, covariance-eigenvalue and pairwise dot-product distributions of
/// an embedding table. Pair sampling is seeded; the covariance is computed
/// from mean-centered rows.
pub fn embedding_stats(e: &Tensor, seed: u64) -> Result<EmbeddingStats, DiagnosticsError> {
    let (v, d) = (e.rows(), e.cols());
    assert!(v >= 2, "embedding_stats needs at least two rows");
    let norms: Vec<f64> = (0..v).map(|i| l2_norm(e.row(i))).collect();
    let norm_hist = Histogram::build(&norms, HIST_BINS);
    let max_norm_dev_from_unit = norms
        .iter()
        .map(|n| (n - 1.0).abs())
        .fold(0.0f64, f64::max);

    // Eigenvalues of the d x d covariance via singular values of the
    // centered table: eig = sigma^2 / (V - 1).
    let mut centered = e.clone();
    for j in 0..d {
        let mean: f64 = (0..v).map(|i| e.at(i, j)).sum::<f64>() / v as f64;
        for i in 0..v {
            let val = centered.at(i, j) - mean;
            centered.set(i, j, val);
        }
    }
    let sigma = singular_values(&centered)?;
    let mut eigs: Vec<f64> = sigma.iter().map(|s| s * s / (v as f64 - 1.0)).collect();
    eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let med = {
        let mut copy = eigs.clone();
        median(&mut copy)
    };
    let degenerate = med < 1e-300;
    let eig_over_median = if degenerate {
        Vec::new()
    } else {
        eigs.iter().map(|e| e / med).collect()
    };

    let mut rng = Rng::new(seed);
    let n_pairs = MAX_DOT_PAIRS.min(v * (v - 1) / 2).max(1);
    let mut dots = Vec::with_capacity(n_pairs);
    let mut sum = 0.0;
    for _ in 0..n_pairs {
        let i = rng.next_below(v as u64) as usize;
        let mut j = rng.next_below((v - 1) as u64) as usize;
        if j >= i {
            j += 1;
        }
        let dot: f64 = e.row(i).iter().zip(e.row(j)).map(|(&a, &b)| a * b).sum();
        dots.push(dot);
        sum += dot;
    }
    let dot_hist = Histogram::build(&dots, HIST_BINS);

    Ok(EmbeddingStats {
        norms,
        norm_hist,
        max_norm_dev_from_unit,
        eig_over_median,
        degenerate_covariance: degenerate,
        dot_hist,
        dot_mean: sum / n_pairs as f64,
        n_pairs,
        seed,
    })
}

impl EmbeddingStats {
    pub fn norms_csv(&self) -> String {
        let mut out = format!(
            "# bins={HIST_BINS} max_norm_dev_from_unit={}\nbin_lo,bin_hi,count\n",
            self.max_norm_dev_from_unit
        );
        self.norm_hist.csv_rows(&mut out);
        out
    }

    pub fn eigs_csv(&self) -> String {
        let mut out = format!(
            "# covariance of mean-centered rows; degenerate={}\nindex,eig_over_median\n",
            self.degenerate_covariance
        );
        for (i, e) in self.eig_over_median.iter().enumerate() {
            out.push_str(&format!("{i},{e}\n"));
        }
        out
    }

    pub fn dots_csv(&self) -> String {
        let mut out = format!(
            "# seed={} pairs={} mean={}\nbin_lo,bin_hi,count\n",
            self.seed, self.n_pairs, self.dot_mean
        );
        self.dot_hist.csv_rows(&mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingGroup {
    pub name: &'static str,
    /// Mean of effective values per layer (a single entry for s_z).
    pub per_layer_mean: Vec<f64>,
    pub global_mean: f64,
    pub hist: Histogram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingsReport {
    pub groups: Vec<ScalingGroup>,
}

impl ScalingsReport {
    pub fn group(&self, name: &str) -> Option<&ScalingGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "# effective (post-reparameterization) values; histograms combine layers\n\
             name,layer,mean,bin_lo,bin_hi,count\n",
        );
        for g in &self.groups {
            for (layer, mean) in g.per_layer_mean.iter().enumerate() {
                out.push_str(&format!("{},{layer},{mean},,,\n", g.name));
            }
            out.push_str(&format!("{},global,{},,,\n", g.name, g.global_mean));
            for (i, &c) in g.hist.counts.iter().enumerate() {
                out.push_str(&format!(
                    "{},,,{},{},{c}\n",
                    g.name,
                    g.hist.edges[i],
                    g.hist.edges[i + 1]
                ));
            }
        }
        out
    }
}

/// Distributions of the learned eigen learning rates and scaling factors
/// (effective values, after the forward-pass absolute value where one
/// applies). Normalized-variant parameters only.
pub fn learned_scalings_report(
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<ScalingsReport, DiagnosticsError> {
    if cfg.variant != Variant::Ngpt {
        return Err(DiagnosticsError::WrongVariant {
            expected: Variant::Ngpt,
            got: cfg.variant,
        });
    }
    let mut groups = Vec::new();
    let mut collect = |name: &'static str, per_layer: Vec<Vec<f64>>| {
        let per_layer_mean: Vec<f64> = per_layer
            .iter()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            .collect();
        let all: Vec<f64> = per_layer.into_iter().flatten().collect();
        let global_mean = all.iter().sum::<f64>() / all.len() as f64;
        groups.push(ScalingGroup {
            name,
            per_layer_mean,
            global_mean,
            hist: Histogram::build(&all, HIST_BINS),
        });
    };

    let layer_values = |pick: &dyn Fn(&crate::model::LayerParams) -> Vec<f64>| -> Vec<Vec<f64>> {
        params.layers.iter().map(|l| pick(l)).collect()
    };

    collect(
        "alpha_a",
        layer_values(&|l| l.alpha_a.as_ref().unwrap().effective().into_data()),
    );
    collect(
        "alpha_m",
        layer_values(&|l| l.alpha_m.as_ref().unwrap().effective().into_data()),
    );
    collect(
        "s_qk",
        layer_values(&|l| l.s_qk.as_ref().unwrap().effective().into_data()),
    );
    collect(
        "s_u",
        layer_values(&|l| l.s_u.as_ref().unwrap().effective().into_data()),
    );
    collect(
        "s_nu",
        layer_values(&|l| l.s_nu.as_ref().unwrap().effective().into_data()),
    );
    collect(
        "s_z",
        vec![params.s_z.as_ref().unwrap().effective().into_data()],
    );
    Ok(ScalingsReport { groups })
}
