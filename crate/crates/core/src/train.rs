//! Joint multi-task training: loss, optimization loop, checkpoints, grid
//! search, and batch inference into evaluation records.
//!
//! One training step is one optimizer update over a batch of dialogues
//! sampled with replacement. Each dialogue runs on its own tape; leaf
//! gradients are merged into the shared registry in batch order, so the
//! parallel path is bit-identical to the sequential one. All randomness is
//! derived statelessly from `(seed, step, slot)`, which is what makes a
//! resumed run reproduce an uninterrupted one bitwise.
//!
//! The batch objective is the mean over the batch's turns of the per-turn
//! joint loss (intent softmax CE + summed act sigmoid CE + summed tag
//! softmax CE; sentence boundaries carry no tag loss).

use std::fs;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Tape, TapeError, Var};
use crate::corpus::{
    dropout_schedule, tag_name, value_dropout, CorpusError, EncodedDialogue, EncodedTurn, Vocab,
};
use crate::eval::{frame_accuracy, EvalError, TurnRecord};
use crate::model::{LabelDims, ModelConfig, ModelError, SluModel, TurnOutput, TurnState, Variant};
use crate::params::{
    read_params, write_params, AdamConfig, AdamState, BoundParams, ParamError, ParamId, Parameters,
};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error(
        "loss became non-finite at step {step} on dialogue {dialogue} \
         (variant {variant}, lr {lr}); aborting"
    )]
    NonFiniteLoss { step: usize, dialogue: String, variant: Variant, lr: f64 },
    #[error("checkpoint was trained against a different vocabulary ({found} vs {expected})")]
    VocabMismatch { expected: String, found: String },
    #[error("checkpoint is incompatible: {0}")]
    CheckpointMismatch(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

// ─── Config ──────────────────────────────────────────────────────────────────

/// Desk-scale default step count; [`FULL_STEPS`] restores the full-length run.
pub const DEFAULT_STEPS: usize = 15_000;
pub const FULL_STEPS: usize = 150_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Optimizer updates; one update per batch.
    pub steps: usize,
    /// Batch size counted in dialogues, not turns.
    pub batch_dialogues: usize,
    pub seed: u64,
    /// Validation cadence in steps; the best checkpoint is chosen by
    /// combined-validation frame accuracy.
    pub eval_every: usize,
    /// Process the batch's dialogues on worker threads. Gradient merge order
    /// stays fixed, so results match the sequential path bitwise.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: DEFAULT_STEPS,
            batch_dialogues: 10,
            seed: 13,
            eval_every: 500,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_dialogues == 0 {
            return Err(TrainError::Config("batch_dialogues must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainError::Config("eval_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Independent stream for one (purpose, step, slot) triple, so order of use
/// and thread scheduling never change what any dialogue sees.
fn derive_rng(seed: u64, purpose: &str, step: usize, slot: usize) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(purpose.as_bytes());
    hasher.update([0u8]);
    hasher.update((step as u64).to_le_bytes());
    hasher.update((slot as u64).to_le_bytes());
    let mut key = [0u8; 32];
    key.copy_from_slice(&hasher.finalize());
    ChaCha20Rng::from_seed(key)
}

// ─── Joint loss ──────────────────────────────────────────────────────────────

/// Joint loss for one turn: softmax CE for the intent, summed sigmoid CE
/// over act classes, and summed softmax CE over content-token tags.
pub fn turn_loss<'t>(
    output: &TurnOutput<'t>,
    turn: &EncodedTurn,
    act_classes: usize,
) -> Result<Var<'t>, TrainError> {
    if output.tag_logits.len() != turn.tags.len() {
        return Err(TrainError::Config(format!(
            "{} tag logit positions vs {} gold tags",
            output.tag_logits.len(),
            turn.tags.len()
        )));
    }
    let mut targets = vec![0.0; act_classes];
    for &a in &turn.user_acts {
        targets[a] = 1.0;
    }
    let mut parts = Vec::with_capacity(2 + turn.tags.len());
    parts.push(output.intent_logits.softmax_cross_entropy(turn.intent)?);
    parts.push(output.act_logits.sigmoid_cross_entropy(&targets)?);
    for (logits, &tag) in output.tag_logits.iter().zip(&turn.tags) {
        parts.push(logits.softmax_cross_entropy(tag)?);
    }
    let mut total = parts[0];
    for p in &parts[1..] {
        total = total.add(*p)?;
    }
    Ok(total)
}

/// Runs the model over a whole dialogue, threading the turn state, and sums
/// the per-turn losses. The batch loss is the sum of these over the batch's
/// dialogues; gradient accumulation across tapes realizes that sum.
pub fn dialogue_loss<'t>(
    model: &SluModel,
    bound: &BoundParams<'t, '_>,
    dialogue: &EncodedDialogue,
) -> Result<(Var<'t>, usize), TrainError> {
    let act_classes = model.dims().user_acts;
    let mut state = TurnState::start();
    let mut total: Option<Var<'t>> = None;
    for turn in &dialogue.turns {
        let out = model.forward_turn(bound, turn, &state)?;
        let loss = turn_loss(&out, turn, act_classes)?;
        total = Some(match total {
            Some(t) => t.add(loss)?,
            None => loss,
        });
        state = out.state;
    }
    let total = total.ok_or_else(|| {
        TrainError::Config(format!("dialogue {} has no turns", dialogue.id))
    })?;
    Ok((total, dialogue.turns.len()))
}

// ─── Inference ───────────────────────────────────────────────────────────────

/// Decodes one dialogue into per-turn records with both the prediction and
/// the gold frame, named through the vocabulary.
pub fn predict_dialogue(
    model: &SluModel,
    params: &Parameters,
    dialogue: &EncodedDialogue,
    vocab: &Vocab,
) -> Result<Vec<TurnRecord>, TrainError> {
    let tape = Tape::new();
    let bound = BoundParams::new(&tape, params);
    let mut state = TurnState::start();
    let mut records = Vec::with_capacity(dialogue.turns.len());
    for (i, turn) in dialogue.turns.iter().enumerate() {
        let out = model.forward_turn(&bound, turn, &state)?;
        let p = &out.prediction;
        records.push(TurnRecord {
            dialogue_id: dialogue.id.clone(),
            domain: dialogue.domain.clone(),
            turn_index: i,
            predicted_intent: vocab.intents.name(p.intent).to_string(),
            predicted_acts: p.acts.iter().map(|&a| vocab.user_acts.name(a).to_string()).collect(),
            predicted_tags: p.tags.iter().map(|&t| tag_name(t, &vocab.slots)).collect(),
            gold_intent: vocab.intents.name(turn.intent).to_string(),
            gold_acts: turn.user_acts.iter().map(|&a| vocab.user_acts.name(a).to_string()).collect(),
            gold_tags: turn.tags.iter().map(|&t| tag_name(t, &vocab.slots)).collect(),
        });
        state = out.state;
    }
    Ok(records)
}

/// Records for a whole split, in dialogue order. Dialogues are independent,
/// so the parallel path yields the identical record sequence.
pub fn predict_records(
    model: &SluModel,
    params: &Parameters,
    dialogues: &[EncodedDialogue],
    vocab: &Vocab,
    parallel: bool,
) -> Result<Vec<TurnRecord>, TrainError> {
    let per_dialogue: Vec<Result<Vec<TurnRecord>, TrainError>> = if parallel {
        use rayon::prelude::*;
        dialogues.par_iter().map(|d| predict_dialogue(model, params, d, vocab)).collect()
    } else {
        dialogues.iter().map(|d| predict_dialogue(model, params, d, vocab)).collect()
    };
    let mut records = Vec::new();
    for r in per_dialogue {
        records.extend(r?);
    }
    Ok(records)
}

// ─── Checkpoints ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Completed optimizer steps.
    pub step: usize,
    pub vocab_digest: String,
    pub best_dev_frame_accuracy: f64,
    pub best_step: usize,
    pub train_seed: u64,
    pub batch_dialogues: usize,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Parameters,
    pub adam: AdamState,
}

const META_FILE: &str = "meta.json";
const PARAMS_FILE: &str = "params.bin";

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta_path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&ckpt.meta)
        .map_err(|source| TrainError::Json { path: meta_path.display().to_string(), source })?;
    fs::write(&meta_path, text).map_err(io_err(&meta_path))?;
    let params_path = dir.join(PARAMS_FILE);
    let file = fs::File::create(&params_path).map_err(io_err(&params_path))?;
    let mut w = BufWriter::new(file);
    write_params(&mut w, &ckpt.params, &ckpt.adam)?;
    w.flush().map_err(io_err(&params_path))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, TrainError> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|source| TrainError::Json { path: meta_path.display().to_string(), source })?;
    let params_path = dir.join(PARAMS_FILE);
    let file = fs::File::open(&params_path).map_err(io_err(&params_path))?;
    let mut r = BufReader::new(file);
    let (params, adam) = read_params(&mut r)?;
    Ok(Checkpoint { meta, params, adam })
}

/// Rebuilds the model a checkpoint was trained with and restores its
/// parameters, refusing a vocabulary other than the training one.
pub fn load_model(
    dir: &Path,
    vocab: &Vocab,
) -> Result<(SluModel, Parameters, CheckpointMeta), TrainError> {
    let ckpt = load_checkpoint(dir)?;
    if ckpt.meta.vocab_digest != vocab.digest() {
        return Err(TrainError::VocabMismatch {
            expected: ckpt.meta.vocab_digest.clone(),
            found: vocab.digest(),
        });
    }
    let mut fresh = Parameters::new();
    let mut rng = ChaCha20Rng::seed_from_u64(ckpt.meta.train_seed);
    let model = SluModel::new(
        ckpt.meta.model.clone(),
        LabelDims::from_vocab(vocab),
        &mut fresh,
        &mut rng,
    )?;
    check_registry_compatible(&fresh, &ckpt.params)?;
    Ok((model, ckpt.params, ckpt.meta))
}

/// Both registries must agree in order, names, and shapes for checkpoint
/// parameters to be addressable by the rebuilt model's ids.
fn check_registry_compatible(fresh: &Parameters, loaded: &Parameters) -> Result<(), TrainError> {
    if fresh.len() != loaded.len() {
        return Err(TrainError::CheckpointMismatch(format!(
            "{} parameters in the model vs {} in the checkpoint",
            fresh.len(),
            loaded.len()
        )));
    }
    for ((_, fname, fval), (_, lname, lval)) in fresh.iter().zip(loaded.iter()) {
        if fname != lname {
            return Err(TrainError::CheckpointMismatch(format!(
                "parameter order differs: {fname} vs {lname}"
            )));
        }
        if fval.shape() != lval.shape() {
            return Err(TrainError::CheckpointMismatch(format!(
                "{fname}: shape {:?} vs {:?}",
                fval.shape(),
                lval.shape()
            )));
        }
    }
    Ok(())
}

// ─── Training ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    /// Batch loss at this step; absent for the initial-parameters evaluation
    /// a zero-step run performs.
    pub train_loss: Option<f64>,
    pub dev_frame_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: ModelConfig,
    pub steps: usize,
    pub best_step: usize,
    pub best_dev_frame_accuracy: f64,
    pub history: Vec<EvalPoint>,
}

/// A trained model with its optimizer state and run report.
#[derive(Debug)]
pub struct Trained {
    pub model: SluModel,
    pub params: Parameters,
    pub adam: AdamState,
    pub report: TrainReport,
}

/// Trains from scratch. With `ckpt_dir` set, writes `best/` and `last/`
/// checkpoints plus `log.jsonl` (one eval point per line) under it.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[EncodedDialogue],
    dev_set: &[EncodedDialogue],
    vocab: &Vocab,
    ckpt_dir: Option<&Path>,
) -> Result<Trained, TrainError> {
    train_inner(model_cfg, cfg, None, train_set, dev_set, vocab, ckpt_dir)
}

/// Continues a checkpointed run up to `cfg.steps` total steps. Randomness is
/// derived per step, so the continuation reproduces an uninterrupted run
/// bitwise (same seed and batch size, which are therefore enforced).
pub fn resume(
    dir: &Path,
    cfg: &TrainConfig,
    train_set: &[EncodedDialogue],
    dev_set: &[EncodedDialogue],
    vocab: &Vocab,
    ckpt_dir: Option<&Path>,
) -> Result<Trained, TrainError> {
    let ckpt = load_checkpoint(dir)?;
    if ckpt.meta.vocab_digest != vocab.digest() {
        return Err(TrainError::VocabMismatch {
            expected: ckpt.meta.vocab_digest.clone(),
            found: vocab.digest(),
        });
    }
    if ckpt.meta.train_seed != cfg.seed {
        return Err(TrainError::CheckpointMismatch(format!(
            "checkpoint was trained with seed {}, config says {}",
            ckpt.meta.train_seed, cfg.seed
        )));
    }
    if ckpt.meta.batch_dialogues != cfg.batch_dialogues {
        return Err(TrainError::CheckpointMismatch(format!(
            "checkpoint used batches of {}, config says {}",
            ckpt.meta.batch_dialogues, cfg.batch_dialogues
        )));
    }
    let model_cfg = ckpt.meta.model.clone();
    train_inner(&model_cfg, cfg, Some(ckpt), train_set, dev_set, vocab, ckpt_dir)
}

fn train_inner(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    start: Option<Checkpoint>,
    train_set: &[EncodedDialogue],
    dev_set: &[EncodedDialogue],
    vocab: &Vocab,
    ckpt_dir: Option<&Path>,
) -> Result<Trained, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }

    // The model is always rebuilt from the config with the seed-derived
    // initializer; a checkpoint then replaces values and optimizer moments.
    // Registration order is deterministic, so parameter ids line up.
    let mut params = Parameters::new();
    let mut init_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let model = SluModel::new(model_cfg.clone(), LabelDims::from_vocab(vocab), &mut params, &mut init_rng)?;
    let adam_cfg = AdamConfig { learning_rate: model_cfg.learning_rate, ..AdamConfig::default() };
    let mut adam = AdamState::new(adam_cfg, &params);
    let mut first_step = 0;
    let mut best_step = 0;
    let mut best_acc = f64::NEG_INFINITY;
    if let Some(ckpt) = start {
        if ckpt.meta.model != *model_cfg {
            return Err(TrainError::CheckpointMismatch(
                "checkpoint model config differs from the requested one".into(),
            ));
        }
        check_registry_compatible(&params, &ckpt.params)?;
        params = ckpt.params;
        adam = ckpt.adam;
        adam.config = adam_cfg;
        first_step = ckpt.meta.step;
        best_step = ckpt.meta.best_step;
        best_acc = ckpt.meta.best_dev_frame_accuracy;
    }

    let mut history = Vec::new();
    let mut log_lines: Vec<String> = Vec::new();
    let meta = |step: usize, best_step: usize, best_acc: f64| CheckpointMeta {
        model: model_cfg.clone(),
        step,
        vocab_digest: vocab.digest(),
        best_dev_frame_accuracy: best_acc,
        best_step,
        train_seed: cfg.seed,
        batch_dialogues: cfg.batch_dialogues,
    };

    for step in first_step..cfg.steps {
        let loss = run_step(&model, &mut params, &mut adam, cfg, model_cfg, train_set, step)?;

        let done = step + 1 == cfg.steps;
        if (step + 1) % cfg.eval_every == 0 || done {
            let records = predict_records(&model, &params, dev_set, vocab, cfg.parallel)?;
            let acc = if records.is_empty() { 0.0 } else { frame_accuracy(&records) };
            history.push(EvalPoint {
                step: step + 1,
                train_loss: Some(loss),
                dev_frame_accuracy: acc,
            });
            if acc > best_acc {
                best_acc = acc;
                best_step = step + 1;
                if let Some(dir) = ckpt_dir {
                    save_checkpoint(
                        &dir.join("best"),
                        &Checkpoint {
                            meta: meta(step + 1, best_step, best_acc),
                            params: params.clone(),
                            adam: adam.clone(),
                        },
                    )?;
                }
            }
            if ckpt_dir.is_some() {
                log_lines.push(
                    serde_json::to_string(history.last().expect("just pushed"))
                        .expect("eval point serializes"),
                );
            }
        }
    }

    // A run with no steps left (e.g. `steps = 0`) still evaluates the
    // parameters it has, so the caller always gets a meaningful report.
    if history.is_empty() {
        let records = predict_records(&model, &params, dev_set, vocab, cfg.parallel)?;
        let acc = if records.is_empty() { 0.0 } else { frame_accuracy(&records) };
        history.push(EvalPoint { step: first_step, train_loss: None, dev_frame_accuracy: acc });
        if acc > best_acc {
            best_acc = acc;
            best_step = first_step;
            if let Some(dir) = ckpt_dir {
                save_checkpoint(
                    &dir.join("best"),
                    &Checkpoint {
                        meta: meta(first_step, best_step, best_acc),
                        params: params.clone(),
                        adam: adam.clone(),
                    },
                )?;
            }
        }
        if ckpt_dir.is_some() {
            log_lines.push(
                serde_json::to_string(history.last().expect("just pushed"))
                    .expect("eval point serializes"),
            );
        }
    }

    if best_acc == f64::NEG_INFINITY {
        best_acc = 0.0;
    }
    if let Some(dir) = ckpt_dir {
        save_checkpoint(
            &dir.join("last"),
            &Checkpoint {
                meta: meta(first_step.max(cfg.steps), best_step, best_acc),
                params: params.clone(),
                adam: adam.clone(),
            },
        )?;
        let log_path = dir.join("log.jsonl");
        let mut text = log_lines.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(&log_path, text).map_err(io_err(&log_path))?;
    }

    Ok(Trained {
        model,
        params,
        adam,
        report: TrainReport {
            model: model_cfg.clone(),
            steps: cfg.steps,
            best_step,
            best_dev_frame_accuracy: best_acc,
            history,
        },
    })
}

/// One dialogue's backward result: per-parameter gradients plus the summed
/// forward loss.
type DialogueGrads = (Vec<(ParamId, Tensor)>, f64);

/// One optimizer step: sample a batch with replacement, accumulate each
/// dialogue's gradients (parameters stay untouched throughout), then apply
/// a single ADAM update. Returns the batch loss (mean over the batch's
/// turns).
fn run_step(
    model: &SluModel,
    params: &mut Parameters,
    adam: &mut AdamState,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    train_set: &[EncodedDialogue],
    step: usize,
) -> Result<f64, TrainError> {
    let mut sample_rng = derive_rng(cfg.seed, "batch", step, 0);
    let batch: Vec<EncodedDialogue> = (0..cfg.batch_dialogues)
        .map(|slot| {
            let d = &train_set[sample_rng.gen_range(0..train_set.len())];
            let p = dropout_schedule(step, cfg.steps, model_cfg.max_value_dropout);
            let mut d = d.clone();
            let mut drop_rng = derive_rng(cfg.seed, "dropout", step, slot);
            for turn in &mut d.turns {
                value_dropout(&mut turn.user_tokens, &turn.spans, p, &mut drop_rng);
            }
            d
        })
        .collect();
    let batch_turns: usize = batch.iter().map(|d| d.turns.len()).sum();
    params.zero_grads();

    let scale = 1.0 / batch_turns as f64;
    let results: Vec<Result<DialogueGrads, TrainError>> = {
        let frozen: &Parameters = params;
        let one = |dialogue: &EncodedDialogue| {
            let tape = Tape::new();
            let bound = BoundParams::new(&tape, frozen);
            let (loss, _) = dialogue_loss(model, &bound, dialogue)?;
            let value = loss.value().data()[0];
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    dialogue: dialogue.id.clone(),
                    variant: model_cfg.variant,
                    lr: model_cfg.learning_rate,
                });
            }
            let scaled = loss.scale(scale);
            tape.backward(scaled)?;
            Ok((bound.collect_grads(), value))
        };
        if cfg.parallel {
            use rayon::prelude::*;
            batch.par_iter().map(one).collect()
        } else {
            batch.iter().map(one).collect()
        }
    };

    let mut loss_sum = 0.0;
    for r in results {
        let (grads, value) = r?;
        params.merge_grads(grads);
        loss_sum += value;
    }
    adam.step(params)?;
    Ok(loss_sum * scale)
}

// ─── Grid search ─────────────────────────────────────────────────────────────

/// Hyperparameter grid: token embedding size, learning rate, maximum value
/// dropout probability, and act decision threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub token_dims: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub max_dropouts: Vec<f64>,
    pub thresholds: Vec<f64>,
}

impl Default for GridSpec {
    /// The standard search space: embedding size {64, 128, 256}, learning
    /// rate spanning [1e-4, 1e-2], max value dropout spanning [0.2, 0.5],
    /// threshold {0.3, 0.4, 0.5}.
    fn default() -> Self {
        GridSpec {
            token_dims: vec![64, 128, 256],
            learning_rates: vec![1e-4, 1e-3, 1e-2],
            max_dropouts: vec![0.2, 0.35, 0.5],
            thresholds: vec![0.3, 0.4, 0.5],
        }
    }
}

impl GridSpec {
    /// All combinations as full model configs for one variant, in a stable
    /// nesting order.
    pub fn configs(&self, variant: Variant) -> Vec<ModelConfig> {
        let mut out = Vec::new();
        for &dim in &self.token_dims {
            for &lr in &self.learning_rates {
                for &p in &self.max_dropouts {
                    for &t in &self.thresholds {
                        let mut cfg = ModelConfig::preset(variant, dim);
                        cfg.learning_rate = lr;
                        cfg.max_value_dropout = p;
                        cfg.act_threshold = t;
                        out.push(cfg);
                    }
                }
            }
        }
        out
    }
}

/// A compact, filesystem-safe name for one grid trial.
pub fn trial_name(cfg: &ModelConfig) -> String {
    format!(
        "{}-d{}-lr{}-p{}-t{}",
        cfg.variant, cfg.token_dim, cfg.learning_rate, cfg.max_value_dropout, cfg.act_threshold
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub name: String,
    pub model: ModelConfig,
    pub best_dev_frame_accuracy: f64,
    pub best_step: usize,
}

/// Trains every grid combination (typically at reduced steps) and ranks by
/// combined-validation frame accuracy, best first; ties break by name so the
/// ranking is deterministic. With `out_root` set, each trial checkpoints
/// under `out_root/<trial-name>/`, and the ranking lands in `ranking.json`.
pub fn grid_search(
    variant: Variant,
    spec: &GridSpec,
    cfg: &TrainConfig,
    train_set: &[EncodedDialogue],
    dev_set: &[EncodedDialogue],
    vocab: &Vocab,
    out_root: Option<&Path>,
) -> Result<Vec<TrialResult>, TrainError> {
    let mut results = Vec::new();
    for model_cfg in spec.configs(variant) {
        let name = trial_name(&model_cfg);
        let dir = out_root.map(|r| r.join(&name));
        let trained = train(&model_cfg, cfg, train_set, dev_set, vocab, dir.as_deref())?;
        results.push(TrialResult {
            name,
            model: model_cfg,
            best_dev_frame_accuracy: trained.report.best_dev_frame_accuracy,
            best_step: trained.report.best_step,
        });
    }
    results.sort_by(|a, b| {
        b.best_dev_frame_accuracy
            .partial_cmp(&a.best_dev_frame_accuracy)
            .expect("frame accuracy is finite")
            .then_with(|| a.name.cmp(&b.name))
    });
    if let Some(root) = out_root {
        fs::create_dir_all(root).map_err(io_err(root))?;
        let path = root.join("ranking.json");
        let text = serde_json::to_string_pretty(&results)
            .map_err(|source| TrainError::Json { path: path.display().to_string(), source })?;
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(results)
}

/// Paths produced under a trial's checkpoint directory.
pub fn best_dir(trial_dir: &Path) -> PathBuf {
    trial_dir.join("best")
}

pub fn last_dir(trial_dir: &Path) -> PathBuf {
    trial_dir.join("last")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{encode_corpus, Dialogue, DialogueAct, SlotSpan, Turn, Vocab};
    use crate::model::Variant;
    use crate::tensor::Tensor;
    use std::collections::BTreeSet;

    // A deterministic toy corpus: two slots, three acts, two intents; the
    // bare-value turn is only taggable from the system act.
    fn toy_dialogue(i: usize, flip: bool) -> Dialogue {
        let mk_turn = |sys_slot: &str, value: &str, acts: &[&str], intent: &str| Turn {
            system_acts: vec![DialogueAct {
                act_type: "request".into(),
                slot: Some(sys_slot.into()),
                value: None,
            }],
            system_tokens: vec!["which".into(), sys_slot.into()],
            user_tokens: vec![value.into()],
            intent: intent.into(),
            user_acts: acts.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>(),
            slot_spans: vec![SlotSpan { slot: sys_slot.into(), start: 0, exclusive_end: 1 }],
        };
        let (first, second) = if flip { ("beta", "alpha") } else { ("alpha", "beta") };
        let intent = if flip { "go" } else { "stay" };
        Dialogue {
            id: format!("toy-{i}"),
            domain: "toy".into(),
            turns: vec![
                Turn {
                    system_acts: vec![DialogueAct {
                        act_type: "greeting".into(),
                        slot: None,
                        value: None,
                    }],
                    system_tokens: vec!["hello".into()],
                    user_tokens: vec!["please".into(), intent.into()],
                    intent: intent.into(),
                    user_acts: ["inform"].iter().map(|s| s.to_string()).collect(),
                    slot_spans: vec![],
                },
                mk_turn(first, "five", &["inform", "answer"], intent),
                mk_turn(second, "five", &["answer"], intent),
            ],
        }
    }

    fn toy_corpus() -> (Vec<EncodedDialogue>, Vocab) {
        let dialogues: Vec<Dialogue> = (0..6).map(|i| toy_dialogue(i, i % 2 == 1)).collect();
        let vocab = Vocab::build(&dialogues).unwrap();
        let encoded = encode_corpus(&dialogues, &vocab).unwrap();
        (encoded, vocab)
    }

    fn tiny_model_cfg(variant: Variant) -> ModelConfig {
        let mut cfg = ModelConfig::preset(variant, 10);
        cfg.learning_rate = 0.01;
        cfg.max_value_dropout = 0.0;
        cfg
    }

    fn quick_train_cfg(steps: usize) -> TrainConfig {
        TrainConfig { steps, batch_dialogues: 3, seed: 5, eval_every: 5, parallel: false }
    }

    fn params_bytes(params: &Parameters) -> Vec<u64> {
        params
            .iter()
            .flat_map(|(_, _, t)| t.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect()
    }

    // ── loss ──

    #[test]
    fn perfect_saturated_logits_drive_loss_to_zero() {
        let (corpus, vocab) = toy_corpus();
        let turn = &corpus[0].turns[1];
        let tape = Tape::new();
        let big = 40.0;
        let intent_logits = tape.leaf(Tensor::from_vec(
            vocab.intents.len(),
            1,
            (0..vocab.intents.len())
                .map(|i| if i == turn.intent { big } else { -big })
                .collect(),
        ));
        let act_logits = tape.leaf(Tensor::from_vec(
            vocab.user_acts.len(),
            1,
            (0..vocab.user_acts.len())
                .map(|a| if turn.user_acts.contains(&a) { big } else { -big })
                .collect(),
        ));
        let tag_logits: Vec<Var> = turn
            .tags
            .iter()
            .map(|&t| {
                tape.leaf(Tensor::from_vec(
                    vocab.tag_count(),
                    1,
                    (0..vocab.tag_count())
                        .map(|k| if k == t { big } else { -big })
                        .collect(),
                ))
            })
            .collect();
        let out = fake_output(intent_logits, act_logits, tag_logits);
        let loss = turn_loss(&out, turn, vocab.user_acts.len()).unwrap();
        assert!(loss.value().data()[0] < 1e-6, "loss {}", loss.value().data()[0]);
    }

    fn fake_output<'t>(
        intent_logits: Var<'t>,
        act_logits: Var<'t>,
        tag_logits: Vec<Var<'t>>,
    ) -> TurnOutput<'t> {
        TurnOutput {
            intent_logits,
            act_logits,
            tag_logits,
            prediction: crate::model::FramePrediction {
                intent: 0,
                acts: vec![],
                tags: vec![],
                intent_probs: vec![],
                act_probs: vec![],
                tag_probs: vec![],
            },
            state: TurnState::start(),
        }
    }

    #[test]
    fn uniform_intent_logits_cost_ln_of_class_count() {
        let (corpus, vocab) = toy_corpus();
        let turn = &corpus[0].turns[0]; // no slots → tags all O
        assert!(turn.tags.iter().all(|&t| t == 0));
        let tape = Tape::new();
        let big = 40.0;
        let intent_logits = tape.leaf(Tensor::zeros(vocab.intents.len(), 1));
        let act_logits = tape.leaf(Tensor::from_vec(
            vocab.user_acts.len(),
            1,
            (0..vocab.user_acts.len())
                .map(|a| if turn.user_acts.binary_search(&a).is_ok() { big } else { -big })
                .collect(),
        ));
        let tag_logits: Vec<Var> = turn
            .tags
            .iter()
            .map(|&t| {
                tape.leaf(Tensor::from_vec(
                    vocab.tag_count(),
                    1,
                    (0..vocab.tag_count())
                        .map(|k| if k == t { big } else { -big })
                        .collect(),
                ))
            })
            .collect();
        let out = fake_output(intent_logits, act_logits, tag_logits);
        let loss = turn_loss(&out, turn, vocab.user_acts.len()).unwrap();
        let expected = (vocab.intents.len() as f64).ln();
        assert!(
            (loss.value().data()[0] - expected).abs() < 1e-6,
            "loss {} vs ln|I| {}",
            loss.value().data()[0],
            expected
        );
    }

    #[test]
    fn turn_loss_matches_hand_computed_cross_entropies() {
        // Tiny fixed logits; expected value computed here with independent
        // scalar arithmetic.
        let tape = Tape::new();
        let intent = tape.leaf(Tensor::from_vec(3, 1, vec![0.2, -0.4, 1.1]));
        let acts = tape.leaf(Tensor::from_vec(2, 1, vec![0.7, -1.3]));
        let tags =
            vec![tape.leaf(Tensor::from_vec(3, 1, vec![0.0, 0.5, -0.5]))];
        let turn = EncodedTurn {
            system_acts: vec![],
            system_tokens: vec![],
            user_tokens: vec![7],
            intent: 2,
            user_acts: vec![0],
            tags: vec![1],
            spans: vec![],
        };
        let out = fake_output(intent, acts, tags);
        let loss = turn_loss(&out, &turn, 2).unwrap().value().data()[0];

        let lse = |z: &[f64]| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        };
        let intent_ce = lse(&[0.2, -0.4, 1.1]) - 1.1;
        let bce = |z: f64, y: f64| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        let act_ce = bce(0.7, 1.0) + bce(-1.3, 0.0);
        let tag_ce = lse(&[0.0, 0.5, -0.5]) - 0.5;
        assert!((loss - (intent_ce + act_ce + tag_ce)).abs() < 1e-12);
    }

    #[test]
    fn dialogue_loss_backpropagates_for_every_variant() {
        let (corpus, vocab) = toy_corpus();
        for variant in Variant::ALL {
            let mut params = Parameters::new();
            let mut rng = ChaCha20Rng::seed_from_u64(3);
            let model = SluModel::new(
                tiny_model_cfg(variant),
                LabelDims::from_vocab(&vocab),
                &mut params,
                &mut rng,
            )
            .unwrap();
            let tape = Tape::new();
            let bound = BoundParams::new(&tape, &params);
            let (loss, turns) = dialogue_loss(&model, &bound, &corpus[0]).unwrap();
            assert_eq!(turns, 3);
            let value = loss.value().data()[0];
            assert!(value.is_finite() && value > 0.0, "{variant}: loss {value}");
            tape.backward(loss).unwrap();
            let grads = bound.collect_grads();
            let nonzero = grads
                .iter()
                .filter(|(_, g)| g.iter().any(|x| x != 0.0))
                .count();
            assert!(nonzero > 0, "{variant}: no gradient reached any parameter");
        }
    }

    // ── the loop ──

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (corpus, vocab) = toy_corpus();
        let mut cfg = tiny_model_cfg(Variant::ActOnly);
        cfg.learning_rate = 0.0;
        let trained =
            train(&cfg, &quick_train_cfg(3), &corpus, &corpus, &vocab, None).unwrap();

        let mut params = Parameters::new();
        let mut rng = ChaCha20Rng::seed_from_u64(quick_train_cfg(3).seed);
        SluModel::new(cfg, LabelDims::from_vocab(&vocab), &mut params, &mut rng).unwrap();
        assert_eq!(params_bytes(&trained.params), params_bytes(&params));
    }

    #[test]
    fn same_seed_gives_bitwise_identical_runs_and_parallel_matches() {
        let (corpus, vocab) = toy_corpus();
        let cfg = tiny_model_cfg(Variant::ActOnly);
        let tc = quick_train_cfg(6);
        let a = train(&cfg, &tc, &corpus, &corpus, &vocab, None).unwrap();
        let b = train(&cfg, &tc, &corpus, &corpus, &vocab, None).unwrap();
        assert_eq!(params_bytes(&a.params), params_bytes(&b.params));
        assert_eq!(a.report, b.report);

        let par = TrainConfig { parallel: true, ..tc };
        let c = train(&cfg, &par, &corpus, &corpus, &vocab, None).unwrap();
        assert_eq!(
            params_bytes(&a.params),
            params_bytes(&c.params),
            "gradient merge order must make the parallel path bit-identical"
        );
    }

    #[test]
    fn training_reduces_the_loss_on_a_toy_corpus() {
        let (corpus, vocab) = toy_corpus();
        let cfg = tiny_model_cfg(Variant::ActOnly);
        let tc = TrainConfig { steps: 60, eval_every: 10, ..quick_train_cfg(60) };
        let trained = train(&cfg, &tc, &corpus, &corpus, &vocab, None).unwrap();
        let first = trained.report.history.first().unwrap().train_loss.unwrap();
        let last = trained.report.history.last().unwrap().train_loss.unwrap();
        assert!(
            last < first * 0.6,
            "loss did not drop: first {first}, last {last}"
        );
    }

    #[test]
    fn parameters_stay_fixed_while_a_batch_accumulates() {
        // Accumulation borrows the registry immutably; the only mutation is
        // the single ADAM update at the end of the step. Verify by running
        // one step with lr=0: grads accumulate, values never move.
        let (corpus, vocab) = toy_corpus();
        let mut cfg = tiny_model_cfg(Variant::DialogueOnly);
        cfg.learning_rate = 0.0;
        let mut params = Parameters::new();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let model =
            SluModel::new(cfg.clone(), LabelDims::from_vocab(&vocab), &mut params, &mut rng)
                .unwrap();
        let before = params_bytes(&params);
        let mut adam = AdamState::new(
            AdamConfig { learning_rate: 0.0, ..AdamConfig::default() },
            &params,
        );
        let tc = quick_train_cfg(1);
        run_step(&model, &mut params, &mut adam, &tc, &cfg, &corpus, 0).unwrap();
        assert_eq!(params_bytes(&params), before);
        assert!(adam.t == 1, "exactly one optimizer update per batch");
    }

    #[test]
    fn nan_loss_aborts_with_diagnostics() {
        let (corpus, vocab) = toy_corpus();
        let cfg = tiny_model_cfg(Variant::NoContext);
        let mut params = Parameters::new();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let model =
            SluModel::new(cfg.clone(), LabelDims::from_vocab(&vocab), &mut params, &mut rng)
                .unwrap();
        // Poison the parameters; the forward pass carries NaN into the loss.
        let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            for x in params.value_mut(id).data_mut() {
                *x = f64::NAN;
            }
        }
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        let err = run_step(&model, &mut params, &mut adam, &quick_train_cfg(1), &cfg, &corpus, 0)
            .unwrap_err();
        match err {
            TrainError::NonFiniteLoss { step, variant, .. } => {
                assert_eq!(step, 0);
                assert_eq!(variant, Variant::NoContext);
            }
            other => panic!("expected NonFiniteLoss, got {other}"),
        }
    }

    // ── checkpoints ──

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let (corpus, vocab) = toy_corpus();
        let cfg = tiny_model_cfg(Variant::ActAndDialogue);
        let trained = train(&cfg, &quick_train_cfg(4), &corpus, &corpus, &vocab, None).unwrap();
        let dir = scratch("ckpt-rt");
        let ckpt = Checkpoint {
            meta: CheckpointMeta {
                model: cfg,
                step: 4,
                vocab_digest: vocab.digest(),
                best_dev_frame_accuracy: trained.report.best_dev_frame_accuracy,
                best_step: trained.report.best_step,
                train_seed: 5,
                batch_dialogues: 3,
            },
            params: trained.params,
            adam: trained.adam,
        };
        save_checkpoint(&dir, &ckpt).unwrap();
        let loaded = load_checkpoint(&dir).unwrap();
        assert_eq!(loaded.meta, ckpt.meta);
        assert_eq!(params_bytes(&loaded.params), params_bytes(&ckpt.params));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn resume_reproduces_an_uninterrupted_run_bitwise() {
        let (corpus, vocab) = toy_corpus();
        let cfg = tiny_model_cfg(Variant::ActOnly);
        let tc12 = quick_train_cfg(12);
        let full = train(&cfg, &tc12, &corpus, &corpus, &vocab, None).unwrap();

        let dir = scratch("ckpt-resume");
        let tc6 = quick_train_cfg(6);
        train(&cfg, &tc6, &corpus, &corpus, &vocab, Some(&dir)).unwrap();
        let resumed = resume(&dir.join("last"), &tc12, &corpus, &corpus, &vocab, None).unwrap();
        assert_eq!(params_bytes(&full.params), params_bytes(&resumed.params));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn resume_rejects_vocab_and_config_mismatches() {
        let (corpus, vocab) = toy_corpus();
        let cfg = tiny_model_cfg(Variant::ActOnly);
        let dir = scratch("ckpt-mismatch");
        train(&cfg, &quick_train_cfg(2), &corpus, &corpus, &vocab, Some(&dir)).unwrap();

        // Different vocabulary.
        let other_dialogues: Vec<Dialogue> = (0..2).map(|i| toy_dialogue(i, false)).collect();
        let other_vocab = Vocab::build(&other_dialogues).unwrap();
        let err = resume(
            &dir.join("last"),
            &quick_train_cfg(4),
            &corpus,
            &corpus,
            &other_vocab,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::VocabMismatch { .. }), "{err}");

        // Different seed.
        let mut tc = quick_train_cfg(4);
        tc.seed = 99;
        let err =
            resume(&dir.join("last"), &tc, &corpus, &corpus, &vocab, None).unwrap_err();
        assert!(matches!(err, TrainError::CheckpointMismatch(_)), "{err}");
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn zero_step_training_still_evaluates_and_checkpoints() {
        let (corpus, vocab) = toy_corpus();
        let cfg = tiny_model_cfg(Variant::NoContext);
        let dir = scratch("ckpt-zero");
        let tc = TrainConfig { steps: 0, ..quick_train_cfg(0) };
        let trained = train(&cfg, &tc, &corpus, &corpus, &vocab, Some(&dir)).unwrap();
        assert_eq!(trained.report.history.len(), 1);
        assert_eq!(trained.report.history[0].train_loss, None);
        let (model, params, meta) = load_model(&dir.join("last"), &vocab).unwrap();
        assert_eq!(meta.step, 0);
        assert_eq!(params_bytes(&params), params_bytes(&trained.params));
        let records = predict_records(&model, &params, &corpus, &vocab, false).unwrap();
        let turns: usize = corpus.iter().map(|d| d.turns.len()).sum();
        assert_eq!(records.len(), turns);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    fn scratch(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("slu-train-{tag}-{}", std::process::id()));
        if dir.exists() {
            std::fs::remove_dir_all(&dir).unwrap();
        }
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    // ── inference ──

    #[test]
    fn prediction_records_carry_the_gold_frame() {
        let (corpus, vocab) = toy_corpus();
        let cfg = tiny_model_cfg(Variant::ActOnly);
        let trained = train(&cfg, &quick_train_cfg(2), &corpus, &corpus, &vocab, None).unwrap();
        let records =
            predict_records(&trained.model, &trained.params, &corpus, &vocab, false).unwrap();
        let total_turns: usize = corpus.iter().map(|d| d.turns.len()).sum();
        assert_eq!(records.len(), total_turns);
        let r = &records[1];
        assert_eq!(r.dialogue_id, "toy-0");
        assert_eq!(r.turn_index, 1);
        assert_eq!(r.gold_intent, "stay");
        assert!(r.gold_acts.contains("answer"));
        assert_eq!(r.gold_tags.len(), corpus[0].turns[1].user_tokens.len());
        assert!(r.gold_tags[0].starts_with("B-"));
        // Parallel prediction yields the identical sequence.
        let par =
            predict_records(&trained.model, &trained.params, &corpus, &vocab, true).unwrap();
        assert_eq!(records, par);
    }

    // ── grid search ──

    #[test]
    fn singleton_grid_equals_direct_training() {
        let (corpus, vocab) = toy_corpus();
        let spec = GridSpec {
            token_dims: vec![10],
            learning_rates: vec![0.01],
            max_dropouts: vec![0.0],
            thresholds: vec![0.4],
        };
        let tc = quick_train_cfg(5);
        let ranked =
            grid_search(Variant::ActOnly, &spec, &tc, &corpus, &corpus, &vocab, None).unwrap();
        assert_eq!(ranked.len(), 1);
        let direct = train(&ranked[0].model, &tc, &corpus, &corpus, &vocab, None).unwrap();
        assert_eq!(
            ranked[0].best_dev_frame_accuracy,
            direct.report.best_dev_frame_accuracy
        );
        assert_eq!(ranked[0].best_step, direct.report.best_step);
    }

    #[test]
    fn zero_learning_rate_trial_ranks_last() {
        let (corpus, vocab) = toy_corpus();
        let spec = GridSpec {
            token_dims: vec![10],
            learning_rates: vec![0.01, 0.0],
            max_dropouts: vec![0.0],
            thresholds: vec![0.4],
        };
        let tc = TrainConfig { steps: 120, eval_every: 30, ..quick_train_cfg(120) };
        let ranked =
            grid_search(Variant::ActOnly, &spec, &tc, &corpus, &corpus, &vocab, None).unwrap();
        assert_eq!(ranked.len(), 2);
        assert_eq!(ranked[1].model.learning_rate, 0.0);
        assert!(
            ranked[0].best_dev_frame_accuracy > ranked[1].best_dev_frame_accuracy,
            "trained {} vs untrained {}",
            ranked[0].best_dev_frame_accuracy,
            ranked[1].best_dev_frame_accuracy
        );
    }
}
