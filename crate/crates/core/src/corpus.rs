//! Dialogue corpus: loading, validation, vocabularies, IOB tagging, and
//! value dropout.
//!
//! On disk a corpus is one JSON file per (domain, split) in the public
//! dialogue schema: an array of dialogues, each with turns carrying system
//! acts (`{type, slot?, value?}`), tokenized system/user utterances, user act
//! labels, a user intent, and token-indexed slot spans
//! (`{slot, start, exclusive_end}`). Loading normalizes tokens to lowercase,
//! validates spans and act structure, and errors name the offending dialogue
//! and turn.
//!
//! Vocabularies are built from the training split only, with four reserved
//! token ids (`<pad>`, `<oov>`, `<sos>`, `<eos>`) in fixed positions; every
//! map is sorted, so identical data always yields identical ids.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PAD: usize = 0;
pub const OOV: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<oov>", "<sos>", "<eos>"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("dialogue {dialogue} turn {turn}: {detail}")]
    Malformed { dialogue: String, turn: usize, detail: String },
    #[error("slot span {slot} [{start}, {end}) out of bounds for {len} tokens")]
    SpanOutOfBounds { slot: String, start: usize, end: usize, len: usize },
    #[error("slot spans {a} and {b} overlap at token {position}")]
    SpanOverlap { a: String, b: String, position: usize },
    #[error("unknown {kind} {name:?}")]
    UnknownName { kind: &'static str, name: String },
    #[error("malformed IOB tag {0:?}")]
    MalformedTag(String),
    #[error("duplicate vocabulary entry {0:?}")]
    DuplicateName(String),
    #[error(
        "{domain}/{split}: expected {expected_dialogues} dialogues / {expected_turns} turns, \
         found {got_dialogues} / {got_turns}"
    )]
    CountMismatch {
        domain: String,
        split: String,
        expected_dialogues: usize,
        expected_turns: usize,
        got_dialogues: usize,
        got_turns: usize,
    },
    #[error("corpus cache: {0}")]
    Cache(String),
}

// ─── Vocabularies ────────────────────────────────────────────────────────────

/// Immutable name ↔ dense-id map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct VocabMap {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl VocabMap {
    pub fn from_names(names: Vec<String>) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(CorpusError::DuplicateName(n.clone()));
            }
        }
        Ok(VocabMap { names, index })
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn require(&self, kind: &'static str, name: &str) -> Result<usize, CorpusError> {
        self.get(name).ok_or_else(|| CorpusError::UnknownName { kind, name: name.to_string() })
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

impl TryFrom<Vec<String>> for VocabMap {
    type Error = CorpusError;
    fn try_from(names: Vec<String>) -> Result<Self, CorpusError> {
        VocabMap::from_names(names)
    }
}

impl From<VocabMap> for Vec<String> {
    fn from(v: VocabMap) -> Vec<String> {
        v.names
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub tokens: VocabMap,
    pub slots: VocabMap,
    pub system_acts: VocabMap,
    pub user_acts: VocabMap,
    pub intents: VocabMap,
}

impl Vocab {
    /// Builds every map from the training split. Tokens cover user and system
    /// utterances; label sets are sorted for id stability.
    pub fn build(train: &[Dialogue]) -> Result<Self, CorpusError> {
        let mut tokens = BTreeSet::new();
        let mut slots = BTreeSet::new();
        let mut system_acts = BTreeSet::new();
        let mut user_acts = BTreeSet::new();
        let mut intents = BTreeSet::new();
        for d in train {
            for t in &d.turns {
                tokens.extend(t.user_tokens.iter().cloned());
                tokens.extend(t.system_tokens.iter().cloned());
                for a in &t.system_acts {
                    system_acts.insert(a.act_type.clone());
                    if let Some(s) = &a.slot {
                        slots.insert(s.clone());
                    }
                }
                user_acts.extend(t.user_acts.iter().cloned());
                intents.insert(t.intent.clone());
                for s in &t.slot_spans {
                    slots.insert(s.slot.clone());
                }
            }
        }
        let mut token_names: Vec<String> =
            RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        token_names.extend(tokens.into_iter().filter(|t| !RESERVED_TOKENS.contains(&t.as_str())));
        Ok(Vocab {
            tokens: VocabMap::from_names(token_names)?,
            slots: VocabMap::from_names(slots.into_iter().collect())?,
            system_acts: VocabMap::from_names(system_acts.into_iter().collect())?,
            user_acts: VocabMap::from_names(user_acts.into_iter().collect())?,
            intents: VocabMap::from_names(intents.into_iter().collect())?,
        })
    }

    /// Token id with out-of-vocabulary fallback.
    pub fn token_id(&self, token: &str) -> usize {
        self.tokens.get(token).unwrap_or(OOV)
    }

    /// Number of IOB tag classes: `2 * |slots| + 1`.
    pub fn tag_count(&self) -> usize {
        2 * self.slots.len() + 1
    }

    /// Content digest used to tie checkpoints to the vocabulary they index.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (section, map) in [
            ("tokens", &self.tokens),
            ("slots", &self.slots),
            ("system_acts", &self.system_acts),
            ("user_acts", &self.user_acts),
            ("intents", &self.intents),
        ] {
            hasher.update(section.as_bytes());
            hasher.update([0u8]);
            for n in map.names() {
                hasher.update(n.as_bytes());
                hasher.update([0u8]);
            }
        }
        let mut out = String::new();
        for b in hasher.finalize() {
            let _ = write!(out, "{b:02x}");
        }
        out
    }
}

// ─── IOB tags ────────────────────────────────────────────────────────────────
//
// Tag ids: O = 0, B-slot_s = 1 + 2s, I-slot_s = 2 + 2s.

pub fn tag_name(id: usize, slots: &VocabMap) -> String {
    if id == 0 {
        "O".to_string()
    } else {
        let slot = slots.name((id - 1) / 2);
        if id % 2 == 1 {
            format!("B-{slot}")
        } else {
            format!("I-{slot}")
        }
    }
}

pub fn parse_tag(tag: &str, slots: &VocabMap) -> Result<usize, CorpusError> {
    if tag == "O" {
        return Ok(0);
    }
    let (prefix, slot) =
        tag.split_once('-').ok_or_else(|| CorpusError::MalformedTag(tag.to_string()))?;
    let s = slots.get(slot).ok_or_else(|| CorpusError::MalformedTag(tag.to_string()))?;
    match prefix {
        "B" => Ok(1 + 2 * s),
        "I" => Ok(2 + 2 * s),
        _ => Err(CorpusError::MalformedTag(tag.to_string())),
    }
}

/// Expands non-overlapping `(slot, start, exclusive_end)` spans into one IOB
/// tag per token.
pub fn spans_to_iob(
    len: usize,
    spans: &[(usize, usize, usize)],
    slots: &VocabMap,
) -> Result<Vec<usize>, CorpusError> {
    let mut tags = vec![0usize; len];
    let mut owner: Vec<Option<usize>> = vec![None; len];
    for (i, &(slot, start, end)) in spans.iter().enumerate() {
        if start >= end || end > len {
            return Err(CorpusError::SpanOutOfBounds {
                slot: slots.name(slot).to_string(),
                start,
                end,
                len,
            });
        }
        for pos in start..end {
            if let Some(other) = owner[pos] {
                let (oslot, _, _): (usize, usize, usize) = spans[other];
                return Err(CorpusError::SpanOverlap {
                    a: slots.name(oslot).to_string(),
                    b: slots.name(slot).to_string(),
                    position: pos,
                });
            }
            owner[pos] = Some(i);
            tags[pos] = if pos == start { 1 + 2 * slot } else { 2 + 2 * slot };
        }
    }
    Ok(tags)
}

/// Recovers `(slot, start, exclusive_end)` spans from IOB tags. Tolerant of
/// ill-formed sequences: an I tag without a matching B opens a new span.
pub fn iob_to_spans(tags: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut spans: Vec<(usize, usize, usize)> = Vec::new();
    let mut open: Option<(usize, usize)> = None; // (slot, start)
    for (pos, &tag) in tags.iter().enumerate() {
        let kind = if tag == 0 {
            None
        } else {
            Some(((tag - 1) / 2, tag % 2 == 1)) // (slot, is_begin)
        };
        match kind {
            None => {
                if let Some((slot, start)) = open.take() {
                    spans.push((slot, start, pos));
                }
            }
            Some((slot, is_begin)) => {
                let continues = !is_begin && matches!(open, Some((s, _)) if s == slot);
                if !continues {
                    if let Some((s, start)) = open.take() {
                        spans.push((s, start, pos));
                    }
                    open = Some((slot, pos));
                }
            }
        }
    }
    if let Some((slot, start)) = open {
        spans.push((slot, start, tags.len()));
    }
    spans
}

// ─── Dialogue data model ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueAct {
    pub act_type: String,
    pub slot: Option<String>,
    pub value: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotSpan {
    pub slot: String,
    pub start: usize,
    pub exclusive_end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub system_acts: Vec<DialogueAct>,
    pub system_tokens: Vec<String>,
    pub user_tokens: Vec<String>,
    pub intent: String,
    pub user_acts: BTreeSet<String>,
    pub slot_spans: Vec<SlotSpan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub domain: String,
    pub turns: Vec<Turn>,
}

// ─── Public JSON schema ──────────────────────────────────────────────────────

#[derive(Deserialize)]
struct RawDialogue {
    dialogue_id: String,
    turns: Vec<RawTurn>,
}

#[derive(Deserialize)]
struct RawTurn {
    #[serde(default)]
    system_acts: Vec<RawAct>,
    #[serde(default)]
    system_utterance: Option<RawUtterance>,
    #[serde(default)]
    user_acts: Vec<RawAct>,
    #[serde(default)]
    user_intents: Vec<String>,
    user_utterance: RawUtterance,
}

#[derive(Deserialize)]
struct RawAct {
    #[serde(rename = "type")]
    act_type: String,
    #[serde(default)]
    slot: Option<String>,
    #[serde(default)]
    value: Option<String>,
}

#[derive(Deserialize)]
struct RawUtterance {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    slots: Vec<RawSlot>,
}

#[derive(Deserialize)]
struct RawSlot {
    slot: String,
    start: usize,
    exclusive_end: usize,
}

fn malformed(dialogue: &str, turn: usize, detail: impl Into<String>) -> CorpusError {
    CorpusError::Malformed { dialogue: dialogue.to_string(), turn, detail: detail.into() }
}

/// Loads one (domain, split) file in the public schema.
pub fn load_split(path: &Path, domain: &str) -> Result<Vec<Dialogue>, CorpusError> {
    let text = fs::read_to_string(path)
        .map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
    let raw: Vec<RawDialogue> = serde_json::from_str(&text)
        .map_err(|source| CorpusError::Json { path: path.display().to_string(), source })?;
    raw.into_iter().map(|d| convert_dialogue(d, domain)).collect()
}

fn convert_dialogue(raw: RawDialogue, domain: &str) -> Result<Dialogue, CorpusError> {
    let id = raw.dialogue_id;
    let mut turns = Vec::with_capacity(raw.turns.len());
    let mut current_intent: Option<String> = None;
    for (i, t) in raw.turns.into_iter().enumerate() {
        let user_tokens: Vec<String> =
            t.user_utterance.tokens.iter().map(|s| s.to_lowercase()).collect();
        if user_tokens.is_empty() {
            return Err(malformed(&id, i, "empty user utterance"));
        }
        let system_tokens: Vec<String> = t
            .system_utterance
            .as_ref()
            .map(|u| u.tokens.iter().map(|s| s.to_lowercase()).collect())
            .unwrap_or_default();
        for a in t.system_acts.iter().chain(&t.user_acts) {
            if a.value.is_some() && a.slot.is_none() {
                return Err(malformed(
                    &id,
                    i,
                    format!("act {} has a value but no slot", a.act_type),
                ));
            }
        }
        // Slot spans must lie inside the utterance and not overlap.
        let len = user_tokens.len();
        let mut owner: Vec<Option<&str>> = vec![None; len];
        for s in &t.user_utterance.slots {
            if s.start >= s.exclusive_end || s.exclusive_end > len {
                return Err(malformed(
                    &id,
                    i,
                    format!(
                        "slot span {} [{}, {}) out of bounds for {} tokens",
                        s.slot, s.start, s.exclusive_end, len
                    ),
                ));
            }
            for (off, slot_owner) in owner[s.start..s.exclusive_end].iter_mut().enumerate() {
                if let Some(other) = slot_owner {
                    return Err(malformed(
                        &id,
                        i,
                        format!(
                            "slot spans {} and {} overlap at token {}",
                            other,
                            s.slot,
                            s.start + off
                        ),
                    ));
                }
                *slot_owner = Some(&s.slot);
            }
        }
        let intent = match t.user_intents.first() {
            Some(intent) => {
                current_intent = Some(intent.clone());
                intent.clone()
            }
            // The schema only marks intents when they change; carry forward.
            None => current_intent
                .clone()
                .ok_or_else(|| malformed(&id, i, "first turn has no user intent"))?,
        };
        turns.push(Turn {
            system_acts: t
                .system_acts
                .into_iter()
                .map(|a| DialogueAct { act_type: a.act_type, slot: a.slot, value: a.value })
                .collect(),
            system_tokens,
            user_tokens,
            intent,
            user_acts: t.user_acts.into_iter().map(|a| a.act_type).collect(),
            slot_spans: t
                .user_utterance
                .slots
                .into_iter()
                .map(|s| SlotSpan { slot: s.slot, start: s.start, exclusive_end: s.exclusive_end })
                .collect(),
        });
    }
    Ok(Dialogue { id, domain: domain.to_string(), turns })
}

// ─── Split counts ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub dialogues: usize,
    pub turns: usize,
}

/// Published training-split sizes; other splits have no published counts.
pub fn expected_train_counts(domain: &str) -> Option<SplitCounts> {
    match domain {
        "sim-r" => Some(SplitCounts { dialogues: 1116, turns: 11234 }),
        "sim-m" => Some(SplitCounts { dialogues: 384, turns: 3562 }),
        _ => None,
    }
}

pub fn count_split(dialogues: &[Dialogue]) -> SplitCounts {
    SplitCounts {
        dialogues: dialogues.len(),
        turns: dialogues.iter().map(|d| d.turns.len()).sum(),
    }
}

pub fn validate_counts(
    domain: &str,
    split: &str,
    dialogues: &[Dialogue],
) -> Result<(), CorpusError> {
    if split != "train" {
        return Ok(());
    }
    let Some(expected) = expected_train_counts(domain) else {
        return Ok(());
    };
    let got = count_split(dialogues);
    if got != expected {
        return Err(CorpusError::CountMismatch {
            domain: domain.to_string(),
            split: split.to_string(),
            expected_dialogues: expected.dialogues,
            expected_turns: expected.turns,
            got_dialogues: got.dialogues,
            got_turns: got.turns,
        });
    }
    Ok(())
}

// ─── Prepared corpus ─────────────────────────────────────────────────────────

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedCorpus {
    pub train: Vec<Dialogue>,
    pub dev: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
    pub vocab: Vocab,
}

const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CacheFile {
    version: u32,
    corpus: PreparedCorpus,
}

impl PreparedCorpus {
    /// Loads `root/<domain>/{train,dev,test}.json` for every domain, validates
    /// published counts (unless `skip_count_check`), and builds vocabularies
    /// from the combined training split.
    pub fn prepare(
        root: &Path,
        domains: &[String],
        skip_count_check: bool,
    ) -> Result<Self, CorpusError> {
        let mut splits: [Vec<Dialogue>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for domain in domains {
            for (i, split) in SPLITS.iter().enumerate() {
                let path = root.join(domain).join(format!("{split}.json"));
                let dialogues = load_split(&path, domain)?;
                if !skip_count_check {
                    validate_counts(domain, split, &dialogues)?;
                }
                splits[i].extend(dialogues);
            }
        }
        let [train, dev, test] = splits;
        let vocab = Vocab::build(&train)?;
        Ok(PreparedCorpus { train, dev, test, vocab })
    }

    pub fn split(&self, name: &str) -> Option<&[Dialogue]> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let file = CacheFile { version: CACHE_VERSION, corpus: self.clone() };
        let text = serde_json::to_string(&file).map_err(|e| CorpusError::Cache(e.to_string()))?;
        fs::write(path, text)
            .map_err(|source| CorpusError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path)
            .map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
        let file: CacheFile = serde_json::from_str(&text)
            .map_err(|source| CorpusError::Json { path: path.display().to_string(), source })?;
        if file.version != CACHE_VERSION {
            return Err(CorpusError::Cache(format!(
                "cache version {} unsupported (expected {CACHE_VERSION}); re-run prepare",
                file.version
            )));
        }
        Ok(file.corpus)
    }
}

// ─── Encoded view ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedAct {
    pub act: usize,
    pub slot: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTurn {
    pub system_acts: Vec<EncodedAct>,
    pub system_tokens: Vec<usize>,
    /// User tokens without SOS/EOS; the model adds those.
    pub user_tokens: Vec<usize>,
    pub intent: usize,
    /// Sorted user act label ids.
    pub user_acts: Vec<usize>,
    /// One IOB tag id per user token.
    pub tags: Vec<usize>,
    /// `(slot, start, exclusive_end)` — kept for value dropout.
    pub spans: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDialogue {
    pub id: String,
    pub domain: String,
    pub turns: Vec<EncodedTurn>,
}

pub fn encode_dialogue(d: &Dialogue, vocab: &Vocab) -> Result<EncodedDialogue, CorpusError> {
    let turns = d
        .turns
        .iter()
        .map(|t| {
            let spans = t
                .slot_spans
                .iter()
                .map(|s| Ok((vocab.slots.require("slot", &s.slot)?, s.start, s.exclusive_end)))
                .collect::<Result<Vec<_>, CorpusError>>()?;
            let tags = spans_to_iob(t.user_tokens.len(), &spans, &vocab.slots)?;
            let mut user_acts = t
                .user_acts
                .iter()
                .map(|a| vocab.user_acts.require("user act", a))
                .collect::<Result<Vec<_>, _>>()?;
            user_acts.sort_unstable();
            Ok(EncodedTurn {
                system_acts: t
                    .system_acts
                    .iter()
                    .map(|a| {
                        Ok(EncodedAct {
                            act: vocab.system_acts.require("system act", &a.act_type)?,
                            slot: a
                                .slot
                                .as_deref()
                                .map(|s| vocab.slots.require("slot", s))
                                .transpose()?,
                        })
                    })
                    .collect::<Result<Vec<_>, CorpusError>>()?,
                system_tokens: t.system_tokens.iter().map(|w| vocab.token_id(w)).collect(),
                user_tokens: t.user_tokens.iter().map(|w| vocab.token_id(w)).collect(),
                intent: vocab.intents.require("intent", &t.intent)?,
                user_acts,
                tags,
                spans,
            })
        })
        .collect::<Result<Vec<_>, CorpusError>>()?;
    Ok(EncodedDialogue { id: d.id.clone(), domain: d.domain.clone(), turns })
}

pub fn encode_corpus(
    dialogues: &[Dialogue],
    vocab: &Vocab,
) -> Result<Vec<EncodedDialogue>, CorpusError> {
    dialogues.iter().map(|d| encode_dialogue(d, vocab)).collect()
}

// ─── Value dropout ───────────────────────────────────────────────────────────

/// Linear ramp from 0 at step 0 to `p_max` at `total` steps.
pub fn dropout_schedule(step: usize, total: usize, p_max: f64) -> f64 {
    if total == 0 {
        return p_max;
    }
    p_max * (step.min(total) as f64 / total as f64)
}

/// Replaces each in-span token with `<oov>` independently with probability `p`.
/// Tokens outside slot spans are never touched.
pub fn value_dropout(
    tokens: &mut [usize],
    spans: &[(usize, usize, usize)],
    p: f64,
    rng: &mut impl Rng,
) {
    if p <= 0.0 {
        return;
    }
    for &(_, start, end) in spans {
        for tok in tokens[start..end].iter_mut() {
            if rng.gen::<f64>() < p {
                *tok = OOV;
            }
        }
    }
}
