//! Command implementations behind the `ngpt-lab` binary, exposed as a
//! library so integration and acceptance tests can drive them in-process.

pub mod config;
pub mod protocol;

use config::{effective_json, resolve, LabConfig, RawConfig};
use ngpt_core::diagnostics::{
    embedding_stats, learned_scalings_report, per_layer_condition_report,
};
use ngpt_core::model::{ModelConfig, Variant};
use ngpt_core::numerics::{softmax_row_into, Rng};
use ngpt_core::training::{
    evaluate, init_state, load_checkpoint, load_corpus, save_checkpoint, train, Corpus,
    TrainEvent, TrainOptions, TrainReport,
};
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration; exit code 2.
    Usage(String),
    /// Failure while doing the work; exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Self::Runtime(msg.into())
    }

    pub fn is_usage(&self) -> bool {
        matches!(self, Self::Usage(_))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(msg) => write!(f, "usage error: {msg}"),
            Self::Runtime(msg) => write!(f, "error: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ngpt_core::training::TrainError> for CliError {
    fn from(e: ngpt_core::training::TrainError) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<ngpt_core::model::ModelError> for CliError {
    fn from(e: ngpt_core::model::ModelError) -> Self {
        Self::Runtime(e.to_string())
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))
}

fn load_config(
    config_path: &Path,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<LabConfig, CliError> {
    let mut raw = RawConfig::from_file(config_path)?;
    for spec in overrides {
        raw.apply_override(spec)?;
    }
    if let Some(seed) = seed {
        raw.apply_override(&format!("train.seed={seed}"))?;
    }
    resolve(&raw)
}

fn corpus_for(cfg: &LabConfig) -> Result<Corpus, CliError> {
    let Some(data) = &cfg.data else {
        return Err(CliError::usage("config key 'train.data' is required"));
    };
    Ok(load_corpus(data, cfg.split_fraction)?)
}

/// `train --config <file> [--seed N] [--out DIR] [--override k=v ...]`
pub fn run_train(
    config_path: &Path,
    seed: Option<u64>,
    out_dir: &Path,
    overrides: &[String],
    quiet: bool,
) -> Result<TrainReport, CliError> {
    let cfg = load_config(config_path, seed, overrides)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::usage(format!("out dir {}: {e}", out_dir.display())))?;
    let corpus = corpus_for(&cfg)?;
    write_file(&out_dir.join("effective_config.json"), &effective_json(&cfg))?;

    let mut state = init_state(&cfg.model, cfg.seed)?;
    let opts = TrainOptions {
        batch_size: cfg.batch_size,
        val_interval: cfg.val_interval,
        val_batches: cfg.val_batches,
        dump_path: Some(out_dir.join("diagnostic.ckpt")),
        ..Default::default()
    };
    let mut on_event = |event: &TrainEvent| {
        if quiet {
            return;
        }
        if let TrainEvent::Validation { step, loss } = event {
            println!("step {step}: val loss {loss:.5}");
        }
    };
    let report = train(&cfg.model, &cfg.optim, &opts, &corpus, &mut state, Some(&mut on_event))?;
    write_file(&out_dir.join("train_log.csv"), &report.to_csv())?;
    save_checkpoint(&out_dir.join("final.ckpt"), &state, &cfg.model, &cfg.optim)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy)]
pub struct EvalRow {
    pub length: usize,
    pub loss: f64,
    pub perplexity: f64,
}

/// `eval --ckpt <file> --data <file> [--length T] [--batches N]`
pub fn run_eval(
    ckpt: &Path,
    data: &Path,
    length: Option<usize>,
    batches: usize,
    csv: Option<&Path>,
) -> Result<EvalRow, CliError> {
    let (state, model_cfg, _) = load_checkpoint(ckpt)?;
    let corpus = load_corpus(data, 0.9)?;
    let max_token = corpus.tokens().iter().copied().max().unwrap_or(0) as usize;
    if max_token >= model_cfg.vocab {
        return Err(CliError::runtime(format!(
            "checkpoint vocabulary {} cannot cover data token id {max_token}",
            model_cfg.vocab
        )));
    }
    let length = length.unwrap_or(model_cfg.context);
    if length == 0 {
        return Err(CliError::usage("--length must be at least 1"));
    }
    let eval = evaluate(&state.params, &model_cfg, &corpus, length, batches)?;
    let row = EvalRow { length, loss: eval.loss, perplexity: eval.perplexity };
    println!("length {}: loss {} perplexity {}", row.length, row.loss, row.perplexity);
    if let Some(csv_path) = csv {
        let mut text = if csv_path.exists() {
            std::fs::read_to_string(csv_path)
                .map_err(|e| CliError::runtime(format!("{}: {e}", csv_path.display())))?
        } else {
            String::from("length,loss,perplexity\n")
        };
        text.push_str(&format!("{},{},{}\n", row.length, row.loss, row.perplexity));
        write_file(csv_path, &text)?;
    }
    Ok(row)
}

/// `inspect --ckpt <file> --out DIR [--reports cond,embed,scalings]`
pub fn run_inspect(
    ckpt: &Path,
    out_dir: &Path,
    reports: Option<&str>,
    stats_seed: u64,
) -> Result<(), CliError> {
    let (state, model_cfg, _) = load_checkpoint(ckpt)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::usage(format!("out dir {}: {e}", out_dir.display())))?;
    let requested: Vec<&str> = match reports {
        Some(list) => list.split(',').map(str::trim).collect(),
        None => match model_cfg.variant {
            Variant::Ngpt => vec!["cond", "embed", "scalings"],
            Variant::Gpt => vec!["cond", "embed"],
        },
    };
    for name in &requested {
        match *name {
            "cond" => {
                let plain = per_layer_condition_report(&state.params, &model_cfg, false)
                    .map_err(|e| CliError::runtime(e.to_string()))?;
                write_file(&out_dir.join("cond_layers.csv"), &plain.to_csv())?;
                let renorm = per_layer_condition_report(&state.params, &model_cfg, true)
                    .map_err(|e| CliError::runtime(e.to_string()))?;
                write_file(&out_dir.join("cond_layers_renormalized.csv"), &renorm.to_csv())?;
            }
            "embed" => {
                let mut norms = String::new();
                let mut eigs = String::new();
                let mut dots = String::new();
                for (table, e) in
                    [("e_input", &state.params.e_input), ("e_output", state.params.e_output())]
                {
                    let stats = embedding_stats(e, stats_seed)
                        .map_err(|e| CliError::runtime(e.to_string()))?;
                    norms.push_str(&format!("# table={table}\n"));
                    norms.push_str(&stats.norms_csv());
                    eigs.push_str(&format!("# table={table}\n"));
                    eigs.push_str(&stats.eigs_csv());
                    dots.push_str(&format!("# table={table}\n"));
                    dots.push_str(&stats.dots_csv());
                }
                write_file(&out_dir.join("embed_norms.csv"), &norms)?;
                write_file(&out_dir.join("embed_eigs.csv"), &eigs)?;
                write_file(&out_dir.join("embed_dots.csv"), &dots)?;
            }
            "scalings" => {
                let report = learned_scalings_report(&state.params, &model_cfg)
                    .map_err(|e| CliError::runtime(e.to_string()))?;
                write_file(&out_dir.join("scalings.csv"), &report.to_csv())?;
            }
            other => {
                return Err(CliError::usage(format!(
                    "unknown report '{other}' (expected cond, embed or scalings)"
                )))
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AblateRow {
    pub label: String,
    pub final_val_loss: f64,
    /// Signed percent delta of validation loss vs the base run.
    pub delta_pct: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AblateTable {
    pub axis: String,
    pub rows: Vec<AblateRow>,
}

impl AblateTable {
    pub fn render(&self) -> String {
        let mut out = format!("axis: {}\nrun,final_val_loss,delta\n", self.axis);
        for row in &self.rows {
            let delta = match row.delta_pct {
                None => String::new(),
                Some(d) => format!("{d:+.2}%"),
            };
            out.push_str(&format!("{},{},{delta}\n", row.label, row.final_val_loss));
        }
        out
    }
}

pub const ABLATE_AXES: &[&str] = &[
    "qk_norm",
    "residual_mode",
    "scaling_mode_sqk",
    "scaling_mode_suv",
    "scaling_mode_sz",
    "alpha_constraint",
    "alpha_scalar",
];

/// `ablate --base <config> --axis <name> --budget <steps>`: run the base
/// and the axis variants with a shared corpus, seed and budget, and report
/// final-validation-loss deltas.
pub fn run_ablate(
    base_config: &Path,
    axis: &str,
    budget: usize,
    seed: Option<u64>,
    out_dir: &Path,
    quiet: bool,
) -> Result<AblateTable, CliError> {
    if !ABLATE_AXES.contains(&axis) {
        return Err(CliError::usage(format!(
            "unknown ablation axis '{axis}' (expected one of {ABLATE_AXES:?})"
        )));
    }
    let base = load_config(base_config, seed, &[])?;
    if base.model.variant != Variant::Ngpt {
        return Err(CliError::usage(
            "ablation axes modify normalized-variant settings; set model.variant=ngpt",
        ));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::usage(format!("out dir {}: {e}", out_dir.display())))?;
    let corpus = corpus_for(&base)?;

    // (label, overrides applied on top of the base config)
    let variants: Vec<(String, Vec<(&str, &str)>)> = match axis {
        "qk_norm" => vec![("qk_norm=false".into(), vec![("model.qk_norm", "false")])],
        "residual_mode" => vec![(
            "residual_mode=slerp".into(),
            // slerp interpolates by one angle, so the eigen learning rate
            // collapses to a scalar for this arm.
            vec![("model.residual_mode", "slerp"), ("model.alpha_scalar", "true")],
        )],
        "scaling_mode_sqk" => vec![
            ("scaling_mode_sqk=scalar".into(), vec![("model.scaling_mode_sqk", "scalar")]),
            ("scaling_mode_sqk=fixed".into(), vec![("model.scaling_mode_sqk", "fixed")]),
        ],
        "scaling_mode_suv" => vec![
            ("scaling_mode_suv=scalar".into(), vec![("model.scaling_mode_suv", "scalar")]),
            ("scaling_mode_suv=fixed".into(), vec![("model.scaling_mode_suv", "fixed")]),
        ],
        "scaling_mode_sz" => vec![
            ("scaling_mode_sz=scalar".into(), vec![("model.scaling_mode_sz", "scalar")]),
            ("scaling_mode_sz=fixed".into(), vec![("model.scaling_mode_sz", "fixed")]),
        ],
        "alpha_constraint" => {
            vec![("alpha_constraint=free".into(), vec![("model.alpha_constraint", "free")])]
        }
        "alpha_scalar" => vec![("alpha_scalar=true".into(), vec![("model.alpha_scalar", "true")])],
        _ => unreachable!(),
    };

    let run_one = |label: &str, cfg: &LabConfig| -> Result<f64, CliError> {
        let mut optim = cfg.optim.clone();
        optim.total_steps = budget;
        optim.warmup_steps = optim.warmup_steps.min(budget);
        let mut state = init_state(&cfg.model, cfg.seed)?;
        let opts = TrainOptions {
            batch_size: cfg.batch_size,
            val_interval: cfg.val_interval,
            val_batches: cfg.val_batches,
            ..Default::default()
        };
        let report = train(&cfg.model, &optim, &opts, &corpus, &mut state, None)?;
        let loss = report
            .final_val_loss()
            .ok_or_else(|| CliError::runtime("run produced no validation loss"))?;
        if !quiet {
            println!("{label}: final val loss {loss:.5}");
        }
        write_file(
            &out_dir.join(format!("{}.csv", label.replace('=', "_"))),
            &report.to_csv(),
        )?;
        Ok(loss)
    };

    let base_loss = run_one("base", &base)?;
    let mut rows = vec![AblateRow {
        label: "base".into(),
        final_val_loss: base_loss,
        delta_pct: None,
    }];
    for (label, overrides) in variants {
        let mut raw = RawConfig::from_file(base_config)?;
        for (k, v) in &overrides {
            raw.apply_override(&format!("{k}={v}"))?;
        }
        if let Some(seed) = seed {
            raw.apply_override(&format!("train.seed={seed}"))?;
        }
        let cfg = resolve(&raw)?;
        let loss = run_one(&label, &cfg)?;
        rows.push(AblateRow {
            label,
            final_val_loss: loss,
            delta_pct: Some((loss - base_loss) / base_loss * 100.0),
        });
    }
    let table = AblateTable { axis: axis.to_string(), rows };
    write_file(&out_dir.join(format!("ablate_{axis}.csv")), &table.render())?;
    if !quiet {
        print!("{}", table.render());
    }
    Ok(table)
}

/// `sample --ckpt <file>`: greedy or temperature sampling demo.
pub fn run_sample(
    ckpt: &Path,
    prompt: &str,
    length: usize,
    temperature: f64,
    seed: u64,
) -> Result<String, CliError> {
    let (state, model_cfg, _) = load_checkpoint(ckpt)?;
    let mut tokens: Vec<usize> = prompt.bytes().map(|b| b as usize).collect();
    if tokens.is_empty() {
        tokens.push(b'\n' as usize);
    }
    let mut rng = Rng::new(seed);
    let mut probs = vec![0.0; model_cfg.vocab];
    for _ in 0..length {
        let window_start = tokens.len().saturating_sub(model_cfg.context);
        let window = &tokens[window_start..];
        let (tape, out) = ngpt_core::model::forward(window, &state.params, &model_cfg)?;
        let logits = tape.value(out.logits);
        let last = logits.row(logits.rows() - 1);
        let next = if temperature <= 0.0 {
            last.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        } else {
            let scaled: Vec<f64> = last.iter().map(|v| v / temperature).collect();
            softmax_row_into(&scaled, &mut probs).expect("finite logits");
            let mut dart = rng.next_f64();
            let mut pick = model_cfg.vocab - 1;
            for (i, &p) in probs.iter().enumerate() {
                dart -= p;
                if dart <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        tokens.push(next);
    }
    let bytes: Vec<u8> = tokens.iter().map(|&t| t as u8).collect();
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

/// `make-corpus --out <file> --bytes N [--seed K]`: deterministic synthetic
/// text so runs are self-contained.
pub fn run_make_corpus(out: &Path, bytes: usize, seed: u64) -> Result<(), CliError> {
    let text = ngpt_core::textgen::generate_text(seed, bytes);
    write_file(out, &text)
}

/// Resolve a config file without running anything (used by tests).
pub fn resolve_config_file(
    path: &Path,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<LabConfig, CliError> {
    load_config(path, seed, overrides)
}

/// Checkpoint loading re-export for tests.
pub fn checkpoint_summary(ckpt: &Path) -> Result<(ModelConfig, usize), CliError> {
    let (state, cfg, _) = load_checkpoint(ckpt)?;
    Ok((cfg, state.step))
}

pub use ngpt_core::training::TrainError;
