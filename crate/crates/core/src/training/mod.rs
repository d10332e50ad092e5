//! Corpus ingestion, deterministic batching, the training loop for both
//! variants, evaluation (including length extrapolation), and checkpoints.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

use crate::autodiff::Tape;
use crate::model::{
    forward_taped, loss_taped, ModelConfig, ModelError, ModelParams, TapedParams, Variant,
};
use crate::numerics::{Rng, Tensor, TensorPool};
use crate::optimizer::{
    adam_step, lr_at, post_step_normalize, AdamState, GradStore, OptimConfig, OptimError,
};
use std::fmt;
use std::path::{Path, PathBuf};

/// Fixed stream id for validation batches, so evaluation is deterministic
/// and identical between the training loop and standalone calls.
const VAL_STREAM_SEED: u64 = 0x5641_4c49_4441_5445;
/// Batch-sampling stream is decorrelated from the parameter-init stream.
const BATCH_STREAM_SALT: u64 = 0x6261_7463_6800_0000;
/// Sequences per validation batch.
pub const EVAL_BATCH: usize = 8;

#[derive(Debug)]
pub enum TrainError {
    Io { path: PathBuf, source: std::io::Error },
    CorpusTooSmall { required: usize, actual: usize },
    NonFiniteLoss { step: usize },
    BadMagic,
    VersionMismatch { found: u32 },
    TruncatedPayload { expected: u64, actual: u64 },
    MissingTensor { name: String },
    InvalidHeader(String),
    Model(ModelError),
    Optim(OptimError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Self::CorpusTooSmall { required, actual } => {
                write!(f, "corpus too small: need at least {required} bytes, got {actual}")
            }
            Self::NonFiniteLoss { step } => write!(f, "non-finite loss at step {step}"),
            Self::BadMagic => write!(f, "bad magic: not a checkpoint file"),
            Self::VersionMismatch { found } => {
                write!(f, "checkpoint format version {found} unsupported (expected {})", CHECKPOINT_VERSION)
            }
            Self::TruncatedPayload { expected, actual } => {
                write!(f, "truncated checkpoint payload: expected {expected} bytes, got {actual}")
            }
            Self::MissingTensor { name } => write!(f, "checkpoint is missing tensor '{name}'"),
            Self::InvalidHeader(msg) => write!(f, "invalid checkpoint header: {msg}"),
            Self::Model(e) => write!(f, "{e}"),
            Self::Optim(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}

impl From<OptimError> for TrainError {
    fn from(e: OptimError) -> Self {
        Self::Optim(e)
    }
}

/// Byte-level token stream with a train/validation split.
#[derive(Debug, Clone)]
pub struct Corpus {
    tokens: Vec<u8>,
    split: usize,
}

impl Corpus {
    /// Deterministic split at floor(fraction * len).
    pub fn from_bytes(tokens: Vec<u8>, split_fraction: f64) -> Result<Self, TrainError> {
        let split = (split_fraction * tokens.len() as f64).floor() as usize;
        if split == 0 || split >= tokens.len() {
            return Err(TrainError::CorpusTooSmall {
                required: 2,
                actual: tokens.len(),
            });
        }
        Ok(Self { tokens, split })
    }

    pub fn train_tokens(&self) -> &[u8] {
        &self.tokens[..self.split]
    }

    pub fn val_tokens(&self) -> &[u8] {
        &self.tokens[self.split..]
    }

    pub fn tokens(&self) -> &[u8] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Raw bytes of a file as token ids.
pub fn load_corpus(path: &Path, split_fraction: f64) -> Result<Corpus, TrainError> {
    let bytes = std::fs::read(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Corpus::from_bytes(bytes, split_fraction)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Token windows with next-byte targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// `b` windows of length `t + 1` at uniform offsets within the split,
/// sliced into (inputs, next-token targets).
pub fn sample_batch(
    corpus: &Corpus,
    rng: &mut Rng,
    b: usize,
    t: usize,
    split: Split,
) -> Result<Batch, TrainError> {
    let data = match split {
        Split::Train => corpus.train_tokens(),
        Split::Val => corpus.val_tokens(),
    };
    if data.len() < t + 1 {
        return Err(TrainError::CorpusTooSmall {
            required: t + 1,
            actual: data.len(),
        });
    }
    let range = (data.len() - t) as u64;
    let mut inputs = Vec::with_capacity(b);
    let mut targets = Vec::with_capacity(b);
    for _ in 0..b {
        let at = rng.next_below(range) as usize;
        inputs.push(data[at..at + t].iter().map(|&x| x as usize).collect());
        targets.push(data[at + 1..at + t + 1].iter().map(|&x| x as usize).collect());
    }
    Ok(Batch { inputs, targets })
}

/// Mean batch loss and accumulated parameter gradients (already divided by
/// the batch size). Sequences run on separate tapes.
pub fn batch_grads(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &Batch,
) -> Result<(f64, GradStore), TrainError> {
    let mut grads = GradStore::new();
    params.visit(&mut |name, _, t| {
        grads.insert(name.to_string(), Tensor::zeros(t.shape()));
    });
    let mut total = 0.0;
    let mut pool = TensorPool::new();
    for (inp, tgt) in batch.inputs.iter().zip(&batch.targets) {
        let mut tape = Tape::with_pool(pool);
        let tp = TapedParams::leaf(&mut tape, params);
        let out = forward_taped(&mut tape, &tp, inp, cfg)?;
        let loss = loss_taped(&mut tape, out.logits, tgt)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: 0 });
        }
        total += value;
        tape.backward(loss).expect("scalar loss");
        for (name, var) in tp.raw_vars() {
            grads.get_mut(name).unwrap().add_assign(tape.grad(*var));
        }
        pool = tape.into_pool();
    }
    let inv = 1.0 / batch.len() as f64;
    for g in grads.values_mut() {
        for v in g.data_mut() {
            *v *= inv;
        }
    }
    Ok((total * inv, grads))
}

/// Forward-only mean loss of a batch.
fn batch_loss(params: &ModelParams, cfg: &ModelConfig, batch: &Batch) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut pool = TensorPool::new();
    for (inp, tgt) in batch.inputs.iter().zip(&batch.targets) {
        let mut tape = Tape::with_pool(pool);
        let tp = TapedParams::leaf(&mut tape, params);
        let out = forward_taped(&mut tape, &tp, inp, cfg)?;
        let loss = loss_taped(&mut tape, out.logits, tgt)?;
        total += tape.value(loss).item();
        pool = tape.into_pool();
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub perplexity: f64,
}

/// Mean cross-entropy over deterministic validation batches at sequence
/// length `t_eval`. Lengths beyond the training context are allowed: rope
/// positions extend naturally, so evaluation widens the context guard.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    corpus: &Corpus,
    t_eval: usize,
    n_batches: usize,
) -> Result<EvalResult, TrainError> {
    if corpus.val_tokens().len() < t_eval + 1 {
        return Err(TrainError::CorpusTooSmall {
            required: t_eval + 1,
            actual: corpus.val_tokens().len(),
        });
    }
    let mut eval_cfg = cfg.clone();
    eval_cfg.context = eval_cfg.context.max(t_eval);
    let mut rng = Rng::new(VAL_STREAM_SEED);
    let mut total = 0.0;
    for _ in 0..n_batches {
        let batch = sample_batch(corpus, &mut rng, EVAL_BATCH, t_eval, Split::Val)?;
        total += batch_loss(params, &eval_cfg, &batch)?;
    }
    let loss = total / n_batches as f64;
    Ok(EvalResult { loss, perplexity: loss.exp() })
}

/// Everything that evolves during training; checkpoints capture it whole.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    pub rng: Rng,
    pub step: usize,
}

/// Fresh state: seeded parameter init plus a decorrelated batch stream.
pub fn init_state(cfg: &ModelConfig, seed: u64) -> Result<TrainState, ModelError> {
    Ok(TrainState {
        params: crate::model::init_params(cfg, seed)?,
        adam: AdamState::new(),
        rng: Rng::new(seed ^ BATCH_STREAM_SALT),
        step: 0,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub val_interval: usize,
    pub val_batches: usize,
    /// Stop once a validation loss at or below this value is observed.
    pub stop_below_val: Option<f64>,
    /// Pause after this absolute step without touching the schedule
    /// (resume workflows); the run picks up from the saved state later.
    pub halt_at_step: Option<usize>,
    /// Where to dump a diagnostic checkpoint if the loss turns non-finite.
    pub dump_path: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 32,
            val_interval: 250,
            val_batches: 8,
            stop_below_val: None,
            halt_at_step: None,
            dump_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogPoint {
    pub step: usize,
    pub split: Split,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub points: Vec<LogPoint>,
    /// Step at which the stop_below_val target was reached, if it was.
    pub stopped_at: Option<usize>,
}

impl TrainReport {
    pub fn final_val_loss(&self) -> Option<f64> {
        self.points
            .iter()
            .rev()
            .find(|p| p.split == Split::Val)
            .map(|p| p.loss)
    }

    /// CSV export: `step,split,loss,lr` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,split,loss,lr\n");
        for p in &self.points {
            let split = match p.split {
                Split::Train => "train",
                Split::Val => "val",
            };
            out.push_str(&format!("{},{split},{},{}\n", p.step, p.loss, p.lr));
        }
        out
    }
}

pub enum TrainEvent {
    Step { step: usize, loss: f64, lr: f64 },
    Validation { step: usize, loss: f64 },
}

/// The loop: sample, forward, backward, Adam at the scheduled rate, then
/// (normalized variant) renormalize parameters. Fully deterministic given
/// the state's seeds.
pub fn train(
    model_cfg: &ModelConfig,
    optim_cfg: &OptimConfig,
    opts: &TrainOptions,
    corpus: &Corpus,
    state: &mut TrainState,
    mut callback: Option<&mut dyn FnMut(&TrainEvent)>,
) -> Result<TrainReport, TrainError> {
    model_cfg.validate()?;
    optim_cfg.validate()?;
    let mut report = TrainReport::default();
    let t = model_cfg.context;

    let validate = |state: &TrainState,
                        report: &mut TrainReport,
                        cb: &mut Option<&mut dyn FnMut(&TrainEvent)>|
     -> Result<f64, TrainError> {
        let eval = evaluate(&state.params, model_cfg, corpus, t, opts.val_batches)?;
        report.points.push(LogPoint {
            step: state.step,
            split: Split::Val,
            loss: eval.loss,
            lr: lr_at(state.step, optim_cfg),
        });
        if let Some(cb) = cb {
            cb(&TrainEvent::Validation { step: state.step, loss: eval.loss });
        }
        Ok(eval.loss)
    };

    let initial = validate(state, &mut report, &mut callback)?;
    if let Some(target) = opts.stop_below_val {
        if initial <= target {
            report.stopped_at = Some(state.step);
            return Ok(report);
        }
    }

    let halt = opts.halt_at_step.unwrap_or(usize::MAX);
    while state.step < optim_cfg.total_steps && state.step < halt {
        let step = state.step;
        let lr = lr_at(step, optim_cfg);
        let batch = sample_batch(corpus, &mut state.rng, opts.batch_size, t, Split::Train)?;
        let (loss, grads) = match batch_grads(&state.params, model_cfg, &batch) {
            Err(TrainError::NonFiniteLoss { .. }) => {
                if let Some(path) = &opts.dump_path {
                    let _ = save_checkpoint(path, state, model_cfg, optim_cfg);
                }
                return Err(TrainError::NonFiniteLoss { step });
            }
            other => other?,
        };
        adam_step(&mut state.params, &grads, &mut state.adam, lr, optim_cfg)?;
        if model_cfg.variant == Variant::Ngpt {
            post_step_normalize(&mut state.params, model_cfg)?;
        }
        state.step += 1;
        report.points.push(LogPoint { step: state.step, split: Split::Train, loss, lr });
        if let Some(cb) = &mut callback {
            cb(&TrainEvent::Step { step: state.step, loss, lr });
        }
        let halting = state.step == optim_cfg.total_steps || state.step == halt;
        if state.step % opts.val_interval == 0 || halting {
            let val = validate(state, &mut report, &mut callback)?;
            if let Some(target) = opts.stop_below_val {
                if val <= target {
                    report.stopped_at = Some(state.step);
                    break;
                }
            }
        }
    }
    Ok(report)
}
