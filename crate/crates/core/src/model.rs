//! The per-turn network: a bidirectional GRU utterance encoder, a
//! bidirectional LSTM slot tagger stacked on the encoder's token outputs, an
//! optional order-invariant system-act encoder and turn-level GRU dialogue
//! encoder, and linear heads for intent (softmax), user dialogue acts
//! (independent sigmoids), and IOB slot tags (per-token softmax).
//!
//! Context vectors enter at four sites:
//!   A — appended to every utterance-encoder step input,
//!   B — linear projection seeding the utterance encoder's initial state,
//!   C — appended to every tagger step input,
//!   D — linear projection seeding the tagger's initial state.
//! A/B carry the system-act context (or the encoded previous system utterance
//! for the `PrevTurn` variant); C/D may carry the act context and/or the
//! previous turn's dialogue vector, depending on the variant.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acts::{ActEncoder, ActFeatures};
use crate::autodiff::{sigmoid, TapeError, Var};
use crate::corpus::{EncodedTurn, Vocab, EOS, SOS};
use crate::params::{BoundParams, ParamError, Parameters};
use crate::rnn::{birnn, Activation, BiRnnOutput, Dense, EmbeddingTable, GruCell, LstmCell, RnnCell};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("utterance has no content tokens")]
    EmptyUtterance,
    #[error("context vector {0} targets both C and D; each vector goes to one site")]
    SharedContextVector(usize),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

// ─── Configuration ───────────────────────────────────────────────────────────

/// Which context signals the model consumes, and where they enter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Each turn in isolation; system acts and dialogue history are ignored.
    NoContext,
    /// No act encoder or dialogue encoder; a separate bidirectional GRU
    /// encodes the previous system utterance and feeds the tagger at C.
    PrevTurn,
    /// Act context at one of A–D; no dialogue encoder, heads read `u_t`.
    ActOnlyNoDe,
    /// Act context into the dialogue encoder and at one of A–D.
    ActOnly,
    /// Act context into the dialogue encoder only; the previous dialogue
    /// vector `o_prev` feeds the tagger at C or D.
    DialogueOnly,
    /// Act context into the dialogue encoder, plus act context and `o_prev`
    /// independently at C or D (four combinations).
    ActAndDialogue,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::NoContext,
        Variant::PrevTurn,
        Variant::ActOnlyNoDe,
        Variant::ActOnly,
        Variant::DialogueOnly,
        Variant::ActAndDialogue,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoContext => "no_context",
            Variant::PrevTurn => "prev_turn",
            Variant::ActOnlyNoDe => "act_only_no_de",
            Variant::ActOnly => "act_only",
            Variant::DialogueOnly => "dialogue_only",
            Variant::ActAndDialogue => "act_and_dialogue",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextPosition {
    A,
    B,
    C,
    D,
}

impl fmt::Display for ContextPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextPosition::A => "a",
            ContextPosition::B => "b",
            ContextPosition::C => "c",
            ContextPosition::D => "d",
        })
    }
}

impl FromStr for ContextPosition {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "a" | "A" => Ok(ContextPosition::A),
            "b" | "B" => Ok(ContextPosition::B),
            "c" | "C" => Ok(ContextPosition::C),
            "d" | "D" => Ok(ContextPosition::D),
            "none" => Err(ModelError::Config(
                "position \"none\" is spelled by omitting the flag".into(),
            )),
            other => Err(ModelError::Config(format!("unknown context position {other:?}"))),
        }
    }
}

/// Label-space sizes the network is built against; derived from a [`Vocab`]
/// and stored with checkpoints so a model can refuse a mismatched corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDims {
    pub tokens: usize,
    pub slots: usize,
    pub system_acts: usize,
    pub user_acts: usize,
    pub intents: usize,
}

impl LabelDims {
    pub fn from_vocab(vocab: &Vocab) -> Self {
        LabelDims {
            tokens: vocab.tokens.len(),
            slots: vocab.slots.len(),
            system_acts: vocab.system_acts.len(),
            user_acts: vocab.user_acts.len(),
            intents: vocab.intents.len(),
        }
    }

    /// IOB tag classes: O plus B/I per slot.
    pub fn tag_classes(&self) -> usize {
        2 * self.slots + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Token embedding size; the utterance encoder and tagger hidden sizes
    /// equal it, the dialogue encoder uses half of it.
    pub token_dim: usize,
    /// Where the act context (or previous-system-utterance encoding) enters.
    pub act_position: Option<ContextPosition>,
    /// Where the previous turn's dialogue vector enters (C or D).
    pub dialogue_position: Option<ContextPosition>,
    pub act_encoder_dim: usize,
    pub slot_embedding_dim: usize,
    /// Dialogue acts with probability strictly above this are predicted.
    pub act_threshold: f64,
    pub learning_rate: f64,
    /// Peak probability of the linearly ramped value dropout.
    pub max_value_dropout: f64,
    /// Carry slots from earlier system turns into the act encoder with
    /// all-zero act vectors.
    pub cumulative_slots: bool,
    /// Reuse the user-token embedding table for the previous-system-utterance
    /// encoder (`PrevTurn` only).
    pub share_system_embeddings: bool,
}

impl ModelConfig {
    /// The canonical configuration for a variant: best-performing context
    /// positions, act encoder at half the token dimension.
    pub fn preset(variant: Variant, token_dim: usize) -> Self {
        let (act_position, dialogue_position) = match variant {
            Variant::NoContext => (None, None),
            Variant::PrevTurn => (Some(ContextPosition::C), None),
            Variant::ActOnlyNoDe => (Some(ContextPosition::B), None),
            Variant::ActOnly => (Some(ContextPosition::D), None),
            Variant::DialogueOnly => (None, Some(ContextPosition::D)),
            Variant::ActAndDialogue => (Some(ContextPosition::C), Some(ContextPosition::D)),
        };
        ModelConfig {
            variant,
            token_dim,
            act_position,
            dialogue_position,
            act_encoder_dim: (token_dim / 2).max(1),
            slot_embedding_dim: 32.min(token_dim.max(2)),
            act_threshold: 0.4,
            learning_rate: 1e-3,
            max_value_dropout: 0.4,
            cumulative_slots: false,
            share_system_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.token_dim < 2 || !self.token_dim.is_multiple_of(2) {
            return fail(format!(
                "token_dim must be even and at least 2 (the dialogue encoder uses half of it), got {}",
                self.token_dim
            ));
        }
        if !(self.act_threshold > 0.0 && self.act_threshold < 1.0) {
            return fail(format!("act_threshold must lie in (0, 1), got {}", self.act_threshold));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be finite and ≥ 0, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.max_value_dropout) {
            return fail(format!(
                "max_value_dropout must lie in [0, 1], got {}",
                self.max_value_dropout
            ));
        }
        if self.has_act_encoder() && (self.act_encoder_dim == 0 || self.slot_embedding_dim == 0) {
            return fail("act encoder dimensions must be positive".into());
        }
        let v = self.variant;
        match (v, self.act_position) {
            (Variant::NoContext | Variant::DialogueOnly, Some(p)) => {
                return fail(format!("variant {v} takes no act context, but position {p} was set"));
            }
            (Variant::PrevTurn, p) if p != Some(ContextPosition::C) => {
                return fail(format!("variant {v} requires the context at position c"));
            }
            (Variant::ActOnlyNoDe | Variant::ActOnly, None) => {
                return fail(format!("variant {v} requires an act context position"));
            }
            (Variant::ActAndDialogue, p)
                if !matches!(p, Some(ContextPosition::C | ContextPosition::D)) =>
            {
                return fail(format!("variant {v} takes the act context at c or d"));
            }
            _ => {}
        }
        match (v, self.dialogue_position) {
            (Variant::DialogueOnly | Variant::ActAndDialogue, p) => {
                if !matches!(p, Some(ContextPosition::C | ContextPosition::D)) {
                    return fail(format!(
                        "variant {v} requires the previous dialogue vector at c or d"
                    ));
                }
            }
            (_, Some(p)) => {
                return fail(format!(
                    "variant {v} takes no dialogue-vector context, but position {p} was set"
                ));
            }
            (_, None) => {}
        }
        Ok(())
    }

    pub fn has_act_encoder(&self) -> bool {
        matches!(
            self.variant,
            Variant::ActOnlyNoDe | Variant::ActOnly | Variant::DialogueOnly | Variant::ActAndDialogue
        )
    }

    pub fn has_dialogue_encoder(&self) -> bool {
        matches!(self.variant, Variant::ActOnly | Variant::DialogueOnly | Variant::ActAndDialogue)
    }

    /// Hidden size of each utterance-encoder / tagger direction.
    pub fn rnn_hidden(&self) -> usize {
        self.token_dim
    }

    pub fn dialogue_hidden(&self) -> usize {
        self.token_dim / 2
    }

    /// Width of the context vector routed to positions A–D for the act side.
    pub fn act_context_dim(&self) -> usize {
        match self.variant {
            Variant::NoContext => 0,
            // Bidirectional final state of the previous-system-turn encoder.
            Variant::PrevTurn => 2 * self.dialogue_hidden(),
            _ => self.act_encoder_dim,
        }
    }

    /// Input the intent/act heads read: the dialogue vector if the dialogue
    /// encoder exists, otherwise the utterance encoding.
    pub fn head_input_dim(&self) -> usize {
        if self.has_dialogue_encoder() {
            self.dialogue_hidden()
        } else {
            2 * self.rnn_hidden()
        }
    }

    fn act_at(&self, p: ContextPosition) -> bool {
        self.act_position == Some(p)
    }

    fn dialogue_at(&self, p: ContextPosition) -> bool {
        self.dialogue_position == Some(p)
    }
}

// ─── Turn-level state and outputs ────────────────────────────────────────────

/// Recurrent state carried across the turns of one dialogue. All vectors live
/// on the dialogue's tape, so gradients flow through turn boundaries.
#[derive(Clone, Debug, Default)]
pub struct TurnState<'t> {
    /// Dialogue-encoder hidden state after the previous turn.
    pub s: Option<Var<'t>>,
    /// Dialogue context vector exposed to the next turn's tagger.
    pub o_prev: Option<Var<'t>>,
    /// Slots mentioned by system acts in earlier turns (cumulative mode).
    pub seen_slots: BTreeSet<usize>,
    pub turn_index: usize,
}

impl<'t> TurnState<'t> {
    /// State before the first turn: zero dialogue state, nothing seen.
    pub fn start() -> Self {
        TurnState::default()
    }
}

/// The decoded frame for one turn, plus the per-head probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub intent: usize,
    /// Ascending act ids with probability strictly above the threshold.
    pub acts: Vec<usize>,
    /// One IOB tag id per content token (no sentence boundaries).
    pub tags: Vec<usize>,
    pub intent_probs: Vec<f64>,
    pub act_probs: Vec<f64>,
    pub tag_probs: Vec<Vec<f64>>,
}

/// Differentiable head outputs plus the decoded prediction and next state.
#[derive(Debug)]
pub struct TurnOutput<'t> {
    pub intent_logits: Var<'t>,
    pub act_logits: Var<'t>,
    /// Per content token, in order; sentence boundaries carry no tag loss.
    pub tag_logits: Vec<Var<'t>>,
    pub prediction: FramePrediction,
    pub state: TurnState<'t>,
}

/// Numerically stable softmax over raw logit values.
pub fn softmax_probs(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Act ids whose probability strictly exceeds the threshold, ascending.
pub fn act_set(probs: &[f64], threshold: f64) -> Vec<usize> {
    probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > threshold)
        .map(|(k, _)| k)
        .collect()
}

// ─── The model ───────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct SluModel {
    config: ModelConfig,
    dims: LabelDims,
    token_emb: EmbeddingTable,
    /// Separate table for system tokens when embeddings are not shared.
    system_token_emb: Option<EmbeddingTable>,
    act_encoder: Option<ActEncoder>,
    prev_fwd: Option<GruCell>,
    prev_bwd: Option<GruCell>,
    utt_fwd: GruCell,
    utt_bwd: GruCell,
    proj_b: Option<Dense>,
    tag_fwd: LstmCell,
    tag_bwd: LstmCell,
    proj_d: Option<Dense>,
    dialogue_cell: Option<GruCell>,
    intent_head: Dense,
    act_head: Dense,
    tag_head: Dense,
}

impl SluModel {
    /// Validates the config and registers every parameter the variant needs,
    /// in a fixed order so equal seeds give equal initializations.
    pub fn new(
        config: ModelConfig,
        dims: LabelDims,
        params: &mut Parameters,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if dims.tokens == 0 || dims.intents == 0 || dims.user_acts == 0 {
            return Err(ModelError::Config(
                "token, intent, and user-act vocabularies must be non-empty".into(),
            ));
        }
        let d = config.rnn_hidden();
        let ctx = config.act_context_dim();

        let token_emb = EmbeddingTable::new("token_emb", dims.tokens, config.token_dim, params, rng)?;
        let system_token_emb = if config.variant == Variant::PrevTurn
            && !config.share_system_embeddings
        {
            Some(EmbeddingTable::new("system_token_emb", dims.tokens, config.token_dim, params, rng)?)
        } else {
            None
        };
        let act_encoder = if config.has_act_encoder() {
            Some(ActEncoder::new(
                "act_enc",
                dims.system_acts,
                dims.slots.max(1),
                config.slot_embedding_dim,
                config.act_encoder_dim,
                params,
                rng,
            )?)
        } else {
            None
        };
        let (prev_fwd, prev_bwd) = if config.variant == Variant::PrevTurn {
            let h = config.dialogue_hidden();
            (
                Some(GruCell::new("prev.fwd", config.token_dim, h, params, rng)?),
                Some(GruCell::new("prev.bwd", config.token_dim, h, params, rng)?),
            )
        } else {
            (None, None)
        };

        let utt_in = config.token_dim + if config.act_at(ContextPosition::A) { ctx } else { 0 };
        let utt_fwd = GruCell::new("utt.fwd", utt_in, d, params, rng)?;
        let utt_bwd = GruCell::new("utt.bwd", utt_in, d, params, rng)?;
        let proj_b = if config.act_at(ContextPosition::B) {
            Some(Dense::new("proj_b", ctx, d, params, rng)?)
        } else {
            None
        };

        let tag_in = 2 * d
            + if config.act_at(ContextPosition::C) { ctx } else { 0 }
            + if config.dialogue_at(ContextPosition::C) { config.dialogue_hidden() } else { 0 };
        let tag_fwd = LstmCell::new("tag.fwd", tag_in, d, params, rng)?;
        let tag_bwd = LstmCell::new("tag.bwd", tag_in, d, params, rng)?;
        let d_in = if config.act_at(ContextPosition::D) { ctx } else { 0 }
            + if config.dialogue_at(ContextPosition::D) { config.dialogue_hidden() } else { 0 };
        let proj_d =
            if d_in > 0 { Some(Dense::new("proj_d", d_in, d, params, rng)?) } else { None };

        let dialogue_cell = if config.has_dialogue_encoder() {
            Some(GruCell::new(
                "dialogue",
                config.act_encoder_dim + 2 * d,
                config.dialogue_hidden(),
                params,
                rng,
            )?)
        } else {
            None
        };

        let head_in = config.head_input_dim();
        let intent_head = Dense::new("intent_head", head_in, dims.intents, params, rng)?;
        let act_head = Dense::new("act_head", head_in, dims.user_acts, params, rng)?;
        let tag_head = Dense::new("tag_head", 2 * d, dims.tag_classes(), params, rng)?;

        Ok(SluModel {
            config,
            dims,
            token_emb,
            system_token_emb,
            act_encoder,
            prev_fwd,
            prev_bwd,
            utt_fwd,
            utt_bwd,
            proj_b,
            tag_fwd,
            tag_bwd,
            proj_d,
            dialogue_cell,
            intent_head,
            act_head,
            tag_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> LabelDims {
        self.dims
    }

    /// Context vector for the current turn's system side: the encoded system
    /// acts, or for `PrevTurn` the bidirectional encoding of the system
    /// utterance preceding the user turn (zeros when the system said nothing).
    fn system_context<'t>(
        &self,
        bound: &BoundParams<'t, '_>,
        turn: &EncodedTurn,
        state: &TurnState<'t>,
    ) -> Result<Option<Var<'t>>, ModelError> {
        if let (Some(fwd), Some(bwd)) = (&self.prev_fwd, &self.prev_bwd) {
            if turn.system_tokens.is_empty() {
                let dim = self.config.act_context_dim();
                return Ok(Some(bound.tape().constant(Tensor::zeros(dim, 1))));
            }
            let emb = self.system_token_emb.as_ref().unwrap_or(&self.token_emb);
            let inputs = turn
                .system_tokens
                .iter()
                .map(|&t| emb.lookup(bound, t))
                .collect::<Result<Vec<_>, _>>()?;
            let enc = birnn(bound, fwd, bwd, &inputs, None, None)?;
            return Ok(Some(enc.final_state));
        }
        if let Some(encoder) = &self.act_encoder {
            let feats = ActFeatures::from_encoded(&turn.system_acts, self.dims.system_acts);
            let extra: Vec<usize> = if self.config.cumulative_slots {
                state.seen_slots.iter().copied().collect()
            } else {
                Vec::new()
            };
            return Ok(Some(encoder.encode(bound, &feats, &extra)?));
        }
        Ok(None)
    }

    /// Runs the bidirectional GRU over `SOS ++ tokens ++ EOS` embeddings.
    /// `context_at_a` joins every step input; `init_at_b` is projected into
    /// the initial state of both directions. A single context vector goes to
    /// exactly one of the two sites.
    pub fn encode_utterance<'t>(
        &self,
        bound: &BoundParams<'t, '_>,
        user_tokens: &[usize],
        context_at_a: Option<Var<'t>>,
        init_at_b: Option<Var<'t>>,
    ) -> Result<BiRnnOutput<'t>, ModelError> {
        if user_tokens.is_empty() {
            return Err(ModelError::EmptyUtterance);
        }
        if let (Some(a), Some(b)) = (context_at_a, init_at_b) {
            if a.id() == b.id() {
                return Err(ModelError::SharedContextVector(a.id()));
            }
            return Err(ModelError::Config(
                "one context vector goes to position a or b, not both".into(),
            ));
        }
        let tape = bound.tape();
        let mut inputs = Vec::with_capacity(user_tokens.len() + 2);
        for &tok in std::iter::once(&SOS).chain(user_tokens).chain(std::iter::once(&EOS)) {
            let x = self.token_emb.lookup(bound, tok)?;
            inputs.push(match context_at_a {
                Some(ctx) => tape.concat(&[x, ctx])?,
                None => x,
            });
        }
        let init = match (init_at_b, &self.proj_b) {
            (Some(ctx), Some(proj)) => Some(proj.apply(bound, ctx, Activation::Linear)?),
            (Some(_), None) => {
                return Err(ModelError::Config(
                    "no projection registered for position b in this variant".into(),
                ))
            }
            (None, _) => None,
        };
        Ok(birnn(bound, &self.utt_fwd, &self.utt_bwd, &inputs, init, init)?)
    }

    /// One step of the turn-level GRU on `a_t ⊕ u_t`; returns `(o_t, s_t)`,
    /// which coincide for a GRU.
    pub fn encode_dialogue_turn<'t>(
        &self,
        bound: &BoundParams<'t, '_>,
        a_t: Var<'t>,
        u_t: Var<'t>,
        state: &TurnState<'t>,
    ) -> Result<(Var<'t>, Var<'t>), ModelError> {
        let cell = self.dialogue_cell.as_ref().ok_or_else(|| {
            ModelError::Config(format!("variant {} has no dialogue encoder", self.config.variant))
        })?;
        let input = bound.tape().concat(&[a_t, u_t])?;
        let prev = cell.initial(bound, state.s)?;
        let s_t = cell.step(bound, input, &prev)?;
        Ok((s_t, s_t))
    }

    /// Intent logits; softmax of these is the intent distribution.
    pub fn classify_intent<'t>(
        &self,
        bound: &BoundParams<'t, '_>,
        o_t: Var<'t>,
    ) -> Result<Var<'t>, TapeError> {
        self.intent_head.apply(bound, o_t, Activation::Linear)
    }

    /// Per-act logits; element-wise sigmoid gives the act probabilities.
    pub fn classify_acts<'t>(
        &self,
        bound: &BoundParams<'t, '_>,
        o_t: Var<'t>,
    ) -> Result<Var<'t>, TapeError> {
        self.act_head.apply(bound, o_t, Activation::Linear)
    }

    /// Bidirectional LSTM over the encoder's token vectors followed by the
    /// tag head. `context_at_c` vectors join every step input in the given
    /// order; `init_at_d` vectors are concatenated and projected into the
    /// initial hidden state. The same vector may not serve both sites.
    pub fn tag_slots<'t>(
        &self,
        bound: &BoundParams<'t, '_>,
        token_vecs: &[Var<'t>],
        context_at_c: &[Var<'t>],
        init_at_d: &[Var<'t>],
    ) -> Result<Vec<Var<'t>>, ModelError> {
        if token_vecs.is_empty() {
            return Err(ModelError::EmptyUtterance);
        }
        for c in context_at_c {
            if let Some(d) = init_at_d.iter().find(|d| d.id() == c.id()) {
                return Err(ModelError::SharedContextVector(d.id()));
            }
        }
        let tape = bound.tape();
        let mut inputs = Vec::with_capacity(token_vecs.len());
        for &v in token_vecs {
            if context_at_c.is_empty() {
                inputs.push(v);
            } else {
                let mut parts = Vec::with_capacity(1 + context_at_c.len());
                parts.push(v);
                parts.extend_from_slice(context_at_c);
                inputs.push(tape.concat(&parts)?);
            }
        }
        let init = if init_at_d.is_empty() {
            None
        } else {
            let proj = self.proj_d.as_ref().ok_or_else(|| {
                ModelError::Config("no projection registered for position d in this variant".into())
            })?;
            let cat = if init_at_d.len() == 1 { init_at_d[0] } else { tape.concat(init_at_d)? };
            Some(proj.apply(bound, cat, Activation::Linear)?)
        };
        let out = birnn(bound, &self.tag_fwd, &self.tag_bwd, &inputs, init, init)?;
        out.outputs
            .into_iter()
            .map(|s_om| Ok(self.tag_head.apply(bound, s_om, Activation::Linear)?))
            .collect()
    }

    /// Runs one full turn: context encoding, utterance encoder, dialogue
    /// encoder, heads, and tagger, wired per the configured variant. The
    /// returned state feeds the next turn of the same dialogue.
    pub fn forward_turn<'t>(
        &self,
        bound: &BoundParams<'t, '_>,
        turn: &EncodedTurn,
        state: &TurnState<'t>,
    ) -> Result<TurnOutput<'t>, ModelError> {
        if turn.user_tokens.is_empty() {
            return Err(ModelError::EmptyUtterance);
        }
        let tape = bound.tape();
        let cfg = &self.config;

        let sys_ctx = self.system_context(bound, turn, state)?;
        let dlg_ctx = if cfg.dialogue_position.is_some() {
            Some(match state.o_prev {
                Some(o) => o,
                None => tape.constant(Tensor::zeros(cfg.dialogue_hidden(), 1)),
            })
        } else {
            None
        };

        let at = |p| if cfg.act_at(p) { sys_ctx } else { None };
        let enc = self.encode_utterance(
            bound,
            &turn.user_tokens,
            at(ContextPosition::A),
            at(ContextPosition::B),
        )?;
        let u_t = enc.final_state;

        let (head_in, next_s, o_t) = if self.dialogue_cell.is_some() {
            let a_t = sys_ctx.expect("dialogue-encoder variants build an act context");
            let (o_t, s_t) = self.encode_dialogue_turn(bound, a_t, u_t, state)?;
            (o_t, Some(s_t), Some(o_t))
        } else {
            (u_t, None, None)
        };

        let intent_logits = self.classify_intent(bound, head_in)?;
        let act_logits = self.classify_acts(bound, head_in)?;

        let mut at_c = Vec::new();
        let mut at_d = Vec::new();
        if let Some(ctx) = sys_ctx {
            if cfg.act_at(ContextPosition::C) {
                at_c.push(ctx);
            }
            if cfg.act_at(ContextPosition::D) {
                at_d.push(ctx);
            }
        }
        if let Some(o) = dlg_ctx {
            if cfg.dialogue_at(ContextPosition::C) {
                at_c.push(o);
            }
            if cfg.dialogue_at(ContextPosition::D) {
                at_d.push(o);
            }
        }
        let all_tag_logits = self.tag_slots(bound, &enc.outputs, &at_c, &at_d)?;
        // Sentence boundaries feed the recurrence but are never tagged.
        let tag_logits: Vec<Var<'t>> =
            all_tag_logits[1..=turn.user_tokens.len()].to_vec();

        let intent_vals = intent_logits.value();
        let intent_probs = softmax_probs(intent_vals.data());
        let act_vals = act_logits.value();
        let act_probs: Vec<f64> = act_vals.data().iter().map(|&z| sigmoid(z)).collect();
        let acts = act_set(&act_probs, cfg.act_threshold);
        let mut tags = Vec::with_capacity(tag_logits.len());
        let mut tag_probs = Vec::with_capacity(tag_logits.len());
        for logits in &tag_logits {
            let vals = logits.value();
            tags.push(vals.argmax());
            tag_probs.push(softmax_probs(vals.data()));
        }
        let prediction = FramePrediction {
            intent: intent_vals.argmax(),
            acts,
            tags,
            intent_probs,
            act_probs,
            tag_probs,
        };

        let mut seen_slots = state.seen_slots.clone();
        if cfg.cumulative_slots {
            for act in &turn.system_acts {
                if let Some(s) = act.slot {
                    seen_slots.insert(s);
                }
            }
        }
        let state = TurnState {
            s: next_s,
            o_prev: o_t,
            seen_slots,
            turn_index: state.turn_index + 1,
        };

        Ok(TurnOutput { intent_logits, act_logits, tag_logits, prediction, state })
    }
}
