//! Flat key/value configuration shared by the config file, `--set` overrides,
//! and dedicated flags. Later assignments win; `variant` and `token_dim` are
//! resolved first because the other model defaults derive from them.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use slu_core::model::{ContextPosition, ModelConfig, Variant};
use slu_core::train::TrainConfig;

use crate::Failure;

/// Every accepted key with its meaning; `--help` and error messages quote
/// this list, so it is the single source of truth.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("variant", "model variant: no_context | prev_turn | act_only_no_de | act_only | dialogue_only | act_and_dialogue"),
    ("token_dim", "token embedding and encoder width (even, >= 2)"),
    ("act_position", "where act context enters: a | b | c | d | none"),
    ("dialogue_position", "where dialogue context enters: c | d | none"),
    ("act_encoder_dim", "system-act encoder width"),
    ("slot_embedding_dim", "slot embedding width inside the act encoder"),
    ("act_threshold", "probability above which an act is predicted (0, 1)"),
    ("learning_rate", "ADAM learning rate"),
    ("max_value_dropout", "peak probability of the ramped value dropout [0, 1)"),
    ("cumulative_slots", "carry slots from earlier system turns (true/false)"),
    ("share_system_embeddings", "reuse token embeddings for the previous system utterance (true/false)"),
    ("steps", "optimizer updates to run"),
    ("batch_dialogues", "dialogues per batch"),
    ("seed", "seed for every random choice in the run"),
    ("eval_every", "validation cadence in steps"),
    ("parallel", "process a batch's dialogues on worker threads (true/false)"),
];

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn known_keys() -> BTreeSet<&'static str> {
    CONFIG_KEYS.iter().map(|(k, _)| *k).collect()
}

/// Parses a config file of `key = value` lines; `#` starts a comment.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Runtime(anyhow::anyhow!("cannot read {}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            usage(format!(
                "{}:{}: expected `key = value`, got {raw:?}",
                path.display(),
                lineno + 1
            ))
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Splits one `--set KEY=VALUE` argument.
pub fn parse_set(arg: &str) -> Result<(String, String), Failure> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {arg:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse_with<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, Failure>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| usage(format!("invalid value for {key}: {value:?} ({e})")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, Failure> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(usage(format!("invalid value for {key}: {value:?} (expected true/false)"))),
    }
}

fn parse_position(key: &str, value: &str) -> Result<Option<ContextPosition>, Failure> {
    if value.eq_ignore_ascii_case("none") || value.is_empty() {
        return Ok(None);
    }
    value
        .parse::<ContextPosition>()
        .map(Some)
        .map_err(|e| usage(format!("invalid value for {key}: {value:?} ({e})")))
}

/// Resolves an ordered assignment list (file, then `--set`s, then dedicated
/// flags) into validated configs. Unknown keys are rejected by name.
pub fn resolve(pairs: &[(String, String)]) -> Result<(ModelConfig, TrainConfig), Failure> {
    let known = known_keys();
    if let Some((k, _)) = pairs.iter().find(|(k, _)| !known.contains(k.as_str())) {
        return Err(usage(format!(
            "unknown config key {k:?}; valid keys: {}",
            known.iter().copied().collect::<Vec<_>>().join(", ")
        )));
    }

    let last = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
    let variant: Variant = match last("variant") {
        Some(v) => parse_with("variant", v)?,
        None => Variant::ActOnly,
    };
    let token_dim: usize = match last("token_dim") {
        Some(v) => parse_with("token_dim", v)?,
        None => 64,
    };

    let mut model = ModelConfig::preset(variant, token_dim);
    let mut train = TrainConfig::default();
    for (k, v) in pairs {
        match k.as_str() {
            "variant" | "token_dim" => {}
            "act_position" => model.act_position = parse_position(k, v)?,
            "dialogue_position" => model.dialogue_position = parse_position(k, v)?,
            "act_encoder_dim" => model.act_encoder_dim = parse_with(k, v)?,
            "slot_embedding_dim" => model.slot_embedding_dim = parse_with(k, v)?,
            "act_threshold" => model.act_threshold = parse_with(k, v)?,
            "learning_rate" => model.learning_rate = parse_with(k, v)?,
            "max_value_dropout" => model.max_value_dropout = parse_with(k, v)?,
            "cumulative_slots" => model.cumulative_slots = parse_bool(k, v)?,
            "share_system_embeddings" => model.share_system_embeddings = parse_bool(k, v)?,
            "steps" => train.steps = parse_with(k, v)?,
            "batch_dialogues" => train.batch_dialogues = parse_with(k, v)?,
            "seed" => train.seed = parse_with(k, v)?,
            "eval_every" => train.eval_every = parse_with(k, v)?,
            "parallel" => train.parallel = parse_bool(k, v)?,
            _ => unreachable!("key set checked above"),
        }
    }

    model.validate().map_err(|e| usage(e.to_string()))?;
    train.validate().map_err(|e| usage(e.to_string()))?;
    Ok((model, train))
}

fn fmt_position(p: Option<ContextPosition>) -> String {
    p.map(|p| p.to_string()).unwrap_or_else(|| "none".into())
}

/// The materialized `key = value` block every command prints; feeding these
/// lines back as a config file reproduces the run.
pub fn effective_lines(
    command: &str,
    extras: &[(&str, String)],
    model: Option<&ModelConfig>,
    train: Option<&TrainConfig>,
) -> String {
    let mut out = String::from("# effective config\n");
    let mut line = |k: &str, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    line("command", command.to_string());
    for (k, v) in extras {
        line(k, v.clone());
    }
    if let Some(m) = model {
        line("variant", m.variant.to_string());
        line("token_dim", m.token_dim.to_string());
        line("act_position", fmt_position(m.act_position));
        line("dialogue_position", fmt_position(m.dialogue_position));
        line("act_encoder_dim", m.act_encoder_dim.to_string());
        line("slot_embedding_dim", m.slot_embedding_dim.to_string());
        line("act_threshold", m.act_threshold.to_string());
        line("learning_rate", m.learning_rate.to_string());
        line("max_value_dropout", m.max_value_dropout.to_string());
        line("cumulative_slots", m.cumulative_slots.to_string());
        line("share_system_embeddings", m.share_system_embeddings.to_string());
    }
    if let Some(t) = train {
        line("steps", t.steps.to_string());
        line("batch_dialogues", t.batch_dialogues.to_string());
        line("seed", t.seed.to_string());
        line("eval_every", t.eval_every.to_string());
        line("parallel", t.parallel.to_string());
    }
    out
}

/// One help paragraph listing the config keys, shared by `--help` texts.
pub fn config_key_help() -> String {
    let mut out = String::from(
        "Config file: flat `key = value` lines, `#` comments. Flags override file \
         values; later assignments win. Keys:\n",
    );
    for (k, doc) in CONFIG_KEYS {
        let _ = writeln!(out, "  {k:<24} {doc}");
    }
    out.push_str(
        "\nEnvironment: SLU_PREPARED, SLU_DATA_DIR, SLU_CONFIG, SLU_SEED, SLU_STEPS, and \
         SLU_PARALLEL override the matching flags (for CI); explicit flags beat them.",
    );
    out
}
