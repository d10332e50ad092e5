//! Flat dotted-key JSON configuration. The file is a single JSON object
//! whose keys mirror `--override key=value` exactly, e.g.
//! `{"model.variant": "ngpt", "optim.lr0": 1e-3, "train.data": "corpus.txt"}`.
//! Every resolved run echoes an `effective_config.json` that reproduces the
//! run when fed back as `--config`.

use crate::CliError;
use ngpt_core::hypersphere::{AlphaConstraint, ResidualMode};
use ngpt_core::model::{ModelConfig, ScalingMode, Variant};
use ngpt_core::optimizer::OptimConfig;
use serde_json::Value;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const KNOWN_KEYS: &[&str] = &[
    "model.variant",
    "model.d_model",
    "model.n_layers",
    "model.n_heads",
    "model.d_k",
    "model.d_mlp",
    "model.vocab",
    "model.context",
    "model.rope_base",
    "model.qk_norm",
    "model.residual_mode",
    "model.scaling_mode_sqk",
    "model.scaling_mode_suv",
    "model.scaling_mode_sz",
    "model.alpha_constraint",
    "model.alpha_scalar",
    "model.tie_embeddings",
    "optim.lr0",
    "optim.total_steps",
    "optim.warmup_steps",
    "optim.weight_decay",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "train.data",
    "train.batch_size",
    "train.split_fraction",
    "train.val_interval",
    "train.val_batches",
    "train.seed",
];

#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, Value>,
}

impl RawConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config file {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("{}: invalid JSON: {e}", path.display())))?;
        let Value::Object(map) = value else {
            return Err(CliError::usage(format!(
                "{}: config must be a flat JSON object",
                path.display()
            )));
        };
        let mut raw = Self::default();
        for (k, v) in map {
            raw.set(&k, v)?;
        }
        Ok(raw)
    }

    pub fn set(&mut self, key: &str, value: Value) -> Result<(), CliError> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(CliError::usage(format!("unknown config key '{key}'")));
        }
        self.entries.insert(key.to_string(), value);
        Ok(())
    }

    /// Apply one `key=value` override; the value parses as JSON where
    /// possible, otherwise as a bare string.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), CliError> {
        let Some((key, value)) = spec.split_once('=') else {
            return Err(CliError::usage(format!("override '{spec}' is not key=value")));
        };
        let parsed = serde_json::from_str::<Value>(value)
            .unwrap_or_else(|_| Value::String(value.to_string()));
        self.set(key, parsed)
    }

    fn get(&self, key: &str) -> Option<&Value> {
        self.entries.get(key)
    }
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct LabConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub data: Option<PathBuf>,
    pub batch_size: usize,
    pub split_fraction: f64,
    pub val_interval: usize,
    pub val_batches: usize,
    pub seed: u64,
}

fn usage(key: &str, what: &str) -> CliError {
    CliError::usage(format!("config key '{key}': {what}"))
}

fn get_usize(raw: &RawConfig, key: &str, default: usize) -> Result<usize, CliError> {
    match raw.get(key) {
        None => Ok(default),
        Some(Value::Number(n)) => n
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| usage(key, "expected a non-negative integer")),
        Some(_) => Err(usage(key, "expected a non-negative integer")),
    }
}

fn get_f64(raw: &RawConfig, key: &str, default: f64) -> Result<f64, CliError> {
    match raw.get(key) {
        None => Ok(default),
        Some(Value::Number(n)) => n.as_f64().ok_or_else(|| usage(key, "expected a number")),
        Some(_) => Err(usage(key, "expected a number")),
    }
}

fn get_bool(raw: &RawConfig, key: &str, default: bool) -> Result<bool, CliError> {
    match raw.get(key) {
        None => Ok(default),
        Some(Value::Bool(b)) => Ok(*b),
        Some(_) => Err(usage(key, "expected true or false")),
    }
}

fn get_str<'a>(raw: &'a RawConfig, key: &str) -> Result<Option<&'a str>, CliError> {
    match raw.get(key) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(_) => Err(usage(key, "expected a string")),
    }
}

fn parse_enum<T: Copy>(key: &str, value: &str, table: &[(&str, T)]) -> Result<T, CliError> {
    for (name, v) in table {
        if *name == value {
            return Ok(*v);
        }
    }
    let names: Vec<&str> = table.iter().map(|(n, _)| *n).collect();
    Err(usage(key, &format!("invalid value '{value}', expected one of {names:?}")))
}

pub fn resolve(raw: &RawConfig) -> Result<LabConfig, CliError> {
    let variant = match get_str(raw, "model.variant")? {
        None => Variant::Ngpt,
        Some(s) => parse_enum("model.variant", s, &[("gpt", Variant::Gpt), ("ngpt", Variant::Ngpt)])?,
    };
    let d_model = get_usize(raw, "model.d_model", 128)?;
    let n_layers = get_usize(raw, "model.n_layers", 4)?;
    let n_heads = get_usize(raw, "model.n_heads", 4)?;
    let vocab = get_usize(raw, "model.vocab", 256)?;
    let context = get_usize(raw, "model.context", 256)?;
    let mut model = ModelConfig::new(variant, d_model, n_layers, n_heads, vocab, context);
    if n_heads > 0 {
        model.d_k = get_usize(raw, "model.d_k", d_model / n_heads)?;
    }
    model.d_mlp = get_usize(raw, "model.d_mlp", 4 * d_model)?;
    model.rope_base = get_f64(raw, "model.rope_base", 10000.0)?;
    model.qk_norm = get_bool(raw, "model.qk_norm", true)?;
    if let Some(s) = get_str(raw, "model.residual_mode")? {
        model.residual_mode = parse_enum(
            "model.residual_mode",
            s,
            &[
                ("lerp", ResidualMode::Lerp),
                ("slerp", ResidualMode::Slerp),
                ("riemannian", ResidualMode::Riemannian),
            ],
        )?;
    }
    let scaling_table = [
        ("vector", ScalingMode::Vector),
        ("scalar", ScalingMode::Scalar),
        ("fixed", ScalingMode::Fixed),
    ];
    if let Some(s) = get_str(raw, "model.scaling_mode_sqk")? {
        model.scaling_mode_sqk = parse_enum("model.scaling_mode_sqk", s, &scaling_table)?;
    }
    if let Some(s) = get_str(raw, "model.scaling_mode_suv")? {
        model.scaling_mode_suv = parse_enum("model.scaling_mode_suv", s, &scaling_table)?;
    }
    if let Some(s) = get_str(raw, "model.scaling_mode_sz")? {
        model.scaling_mode_sz = parse_enum("model.scaling_mode_sz", s, &scaling_table)?;
    }
    if let Some(s) = get_str(raw, "model.alpha_constraint")? {
        model.alpha_constraint = parse_enum(
            "model.alpha_constraint",
            s,
            &[("absolute", AlphaConstraint::Absolute), ("free", AlphaConstraint::Free)],
        )?;
    }
    model.alpha_scalar = get_bool(raw, "model.alpha_scalar", false)?;
    model.tie_embeddings = get_bool(raw, "model.tie_embeddings", false)?;
    model
        .validate()
        .map_err(|e| CliError::usage(e.to_string()))?;

    let total_steps = get_usize(raw, "optim.total_steps", 5000)?;
    let lr0 = get_f64(raw, "optim.lr0", 1e-3)?;
    let mut optim = OptimConfig::for_variant(variant, lr0, total_steps);
    optim.warmup_steps = get_usize(raw, "optim.warmup_steps", optim.warmup_steps)?;
    optim.weight_decay = get_f64(raw, "optim.weight_decay", optim.weight_decay)?;
    optim.beta1 = get_f64(raw, "optim.beta1", optim.beta1)?;
    optim.beta2 = get_f64(raw, "optim.beta2", optim.beta2)?;
    optim.eps = get_f64(raw, "optim.eps", optim.eps)?;
    optim
        .validate()
        .map_err(|e| CliError::usage(e.to_string()))?;

    Ok(LabConfig {
        model,
        optim,
        data: get_str(raw, "train.data")?.map(PathBuf::from),
        batch_size: get_usize(raw, "train.batch_size", 32)?,
        split_fraction: get_f64(raw, "train.split_fraction", 0.9)?,
        val_interval: get_usize(raw, "train.val_interval", 250)?,
        val_batches: get_usize(raw, "train.val_batches", 8)?,
        seed: get_usize(raw, "train.seed", 0)? as u64,
    })
}

/// Every resolved setting (defaults included) as the flat dotted-key JSON
/// document; feeding it back as `--config` reproduces the run.
pub fn effective_json(cfg: &LabConfig) -> String {
    let mut map: BTreeMap<String, Value> = BTreeMap::new();
    let mut put = |k: &str, v: Value| {
        map.insert(k.to_string(), v);
    };
    put("model.variant", Value::String(cfg.model.variant.to_string()));
    put("model.d_model", cfg.model.d_model.into());
    put("model.n_layers", cfg.model.n_layers.into());
    put("model.n_heads", cfg.model.n_heads.into());
    put("model.d_k", cfg.model.d_k.into());
    put("model.d_mlp", cfg.model.d_mlp.into());
    put("model.vocab", cfg.model.vocab.into());
    put("model.context", cfg.model.context.into());
    put("model.rope_base", json_f64(cfg.model.rope_base));
    put("model.qk_norm", Value::Bool(cfg.model.qk_norm));
    put(
        "model.residual_mode",
        Value::String(
            match cfg.model.residual_mode {
                ResidualMode::Lerp => "lerp",
                ResidualMode::Slerp => "slerp",
                ResidualMode::Riemannian => "riemannian",
            }
            .to_string(),
        ),
    );
    let scaling_name = |m: ScalingMode| match m {
        ScalingMode::Vector => "vector",
        ScalingMode::Scalar => "scalar",
        ScalingMode::Fixed => "fixed",
    };
    put("model.scaling_mode_sqk", Value::String(scaling_name(cfg.model.scaling_mode_sqk).into()));
    put("model.scaling_mode_suv", Value::String(scaling_name(cfg.model.scaling_mode_suv).into()));
    put("model.scaling_mode_sz", Value::String(scaling_name(cfg.model.scaling_mode_sz).into()));
    put(
        "model.alpha_constraint",
        Value::String(
            match cfg.model.alpha_constraint {
                AlphaConstraint::Absolute => "absolute",
                AlphaConstraint::Free => "free",
            }
            .to_string(),
        ),
    );
    put("model.alpha_scalar", Value::Bool(cfg.model.alpha_scalar));
    put("model.tie_embeddings", Value::Bool(cfg.model.tie_embeddings));
    put("optim.lr0", json_f64(cfg.optim.lr0));
    put("optim.total_steps", cfg.optim.total_steps.into());
    put("optim.warmup_steps", cfg.optim.warmup_steps.into());
    put("optim.weight_decay", json_f64(cfg.optim.weight_decay));
    put("optim.beta1", json_f64(cfg.optim.beta1));
    put("optim.beta2", json_f64(cfg.optim.beta2));
    put("optim.eps", json_f64(cfg.optim.eps));
    if let Some(data) = &cfg.data {
        put("train.data", Value::String(data.display().to_string()));
    }
    put("train.batch_size", cfg.batch_size.into());
    put("train.split_fraction", json_f64(cfg.split_fraction));
    put("train.val_interval", cfg.val_interval.into());
    put("train.val_batches", cfg.val_batches.into());
    put("train.seed", (cfg.seed as usize).into());
    serde_json::to_string_pretty(&map).expect("serializable map") + "\n"
}

fn json_f64(v: f64) -> Value {
    serde_json::Number::from_f64(v).map(Value::Number).unwrap_or(Value::Null)
}
