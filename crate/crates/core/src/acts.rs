//! Order-invariant encoding of system dialogue acts.
//!
//! A turn's system acts are featurized into binary act-type vectors: one per
//! mentioned slot (which act types were said about that slot) plus one for
//! slotless acts. Values are deliberately ignored. The encoder then applies a
//! shared ReLU layer to each slot's features concatenated with its slot
//! embedding, averages over the slot set, concatenates the slotless vector,
//! and applies a second ReLU layer:
//!
//! ```text
//! a'(s)  = a_slot(s) ⊕ e_s
//! a''(s) = ReLU(W1 · a'(s) + b1)
//! a_comb = mean_{s ∈ S} a''(s) ⊕ a_ns
//! a      = ReLU(W2 · a_comb + b2)
//! ```
//!
//! Featurization keys slots in ascending id order and the mean is a set
//! operation, so the encoding is exactly invariant to act order and
//! duplication. An empty slot set contributes a zero mean; a turn with no
//! acts at all yields the encoding of all-zero features.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{TapeError, Var};
use crate::corpus::{CorpusError, DialogueAct, EncodedAct, VocabMap};
use crate::params::{BoundParams, ParamError, Parameters};
use crate::rnn::{Activation, Dense, EmbeddingTable};
use crate::tensor::Tensor;

/// Binary act-type features for one turn.
#[derive(Debug, Clone, PartialEq)]
pub struct ActFeatures {
    /// `|A_sys|` — length of every feature vector.
    pub act_dim: usize,
    /// Per mentioned slot, ascending by slot id.
    pub slot_rows: Vec<(usize, Vec<f64>)>,
    /// Acts that appeared without a slot.
    pub no_slot: Vec<f64>,
}

impl ActFeatures {
    /// Featurizes raw acts, resolving names through the vocabularies.
    pub fn from_raw(
        acts: &[DialogueAct],
        act_vocab: &VocabMap,
        slot_vocab: &VocabMap,
    ) -> Result<Self, CorpusError> {
        let encoded = acts
            .iter()
            .map(|a| {
                Ok(EncodedAct {
                    act: act_vocab.require("system act", &a.act_type)?,
                    slot: a
                        .slot
                        .as_deref()
                        .map(|s| slot_vocab.require("slot", s))
                        .transpose()?,
                })
            })
            .collect::<Result<Vec<_>, CorpusError>>()?;
        Ok(Self::from_encoded(&encoded, act_vocab.len()))
    }

    /// Featurizes already-encoded acts. Values never appear at this level.
    pub fn from_encoded(acts: &[EncodedAct], act_dim: usize) -> Self {
        let mut slot_rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut no_slot = vec![0.0; act_dim];
        for a in acts {
            debug_assert!(a.act < act_dim);
            match a.slot {
                Some(s) => {
                    slot_rows.entry(s).or_insert_with(|| vec![0.0; act_dim])[a.act] = 1.0;
                }
                None => no_slot[a.act] = 1.0,
            }
        }
        ActFeatures { act_dim, slot_rows: slot_rows.into_iter().collect(), no_slot }
    }

    /// Slot ids mentioned this turn, ascending.
    pub fn slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.slot_rows.iter().map(|&(s, _)| s)
    }
}

#[derive(Debug, Clone)]
pub struct ActEncoder {
    pub act_dim: usize,
    pub slot_dim: usize,
    pub output_dim: usize,
    slot_emb: EmbeddingTable,
    l1: Dense,
    l2: Dense,
}

impl ActEncoder {
    pub fn new(
        ns: &str,
        act_dim: usize,
        slot_count: usize,
        slot_dim: usize,
        output_dim: usize,
        params: &mut Parameters,
        rng: &mut impl Rng,
    ) -> Result<Self, ParamError> {
        let slot_emb = EmbeddingTable::new(&format!("{ns}.slot_emb"), slot_count, slot_dim, params, rng)?;
        let l1 = Dense::new(&format!("{ns}.l1"), act_dim + slot_dim, output_dim, params, rng)?;
        let l2 = Dense::new(&format!("{ns}.l2"), output_dim + act_dim, output_dim, params, rng)?;
        Ok(ActEncoder { act_dim, slot_dim, output_dim, slot_emb, l1, l2 })
    }

    /// Encodes one turn's features. `extra_slots` carries slots mentioned in
    /// earlier turns (cumulative mode); they contribute an all-zero act vector
    /// alongside their embedding.
    pub fn encode<'t>(
        &self,
        bound: &BoundParams<'t, '_>,
        feats: &ActFeatures,
        extra_slots: &[usize],
    ) -> Result<Var<'t>, TapeError> {
        if feats.act_dim != self.act_dim {
            return Err(TapeError::Shape {
                op: "encode_acts",
                lhs: (self.act_dim, 1),
                rhs: (feats.act_dim, 1),
            });
        }
        let tape = bound.tape();
        // Union of current and carried slots, ascending, without duplicates.
        let mut rows: BTreeMap<usize, Option<&Vec<f64>>> = BTreeMap::new();
        for (s, row) in &feats.slot_rows {
            rows.insert(*s, Some(row));
        }
        for &s in extra_slots {
            rows.entry(s).or_insert(None);
        }
        let mut per_slot = Vec::with_capacity(rows.len());
        for (slot, row) in rows {
            let act_vec = match row {
                Some(r) => tape.constant(Tensor::vector(r.clone())),
                None => tape.constant(Tensor::zeros(self.act_dim, 1)),
            };
            let e = self.slot_emb.lookup(bound, slot)?;
            let joined = tape.concat(&[act_vec, e])?;
            per_slot.push(self.l1.apply(bound, joined, Activation::Relu)?);
        }
        let mean = if per_slot.is_empty() {
            tape.constant(Tensor::zeros(self.output_dim, 1))
        } else {
            tape.mean(&per_slot)?
        };
        let ns_vec = tape.constant(Tensor::vector(feats.no_slot.clone()));
        let comb = tape.concat(&[mean, ns_vec])?;
        self.l2.apply(bound, comb, Activation::Relu)
    }
}
