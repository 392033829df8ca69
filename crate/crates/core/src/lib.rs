//! Contextual spoken language understanding for task-oriented dialogue.
//!
//! The model reads a dialogue turn by turn and, for each user utterance,
//! jointly predicts the user intent, the set of user dialogue acts, and an
//! IOB slot tag per token. Context enters two ways: an order-invariant
//! encoding of the preceding system dialogue acts, and a turn-level recurrent
//! summary of the whole dialogue so far. Both can be fed to the utterance
//! encoder and tagger at several injection points, giving the model variants
//! exercised by the training and evaluation pipeline.
//!
//! Layering, bottom up: [`tensor`] and [`autodiff`] are a self-contained
//! reverse-mode differentiation substrate; [`params`] owns trainable state
//! and ADAM; [`rnn`] provides GRU/LSTM cells and a bidirectional driver;
//! [`acts`] encodes system dialogue acts; [`model`] wires the full network;
//! [`corpus`] loads and encodes dialogue data; [`train`] runs optimization;
//! [`eval`] scores predictions.

pub mod acts;
pub mod autodiff;
pub mod corpus;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod rnn;
pub mod synth;
pub mod tensor;
pub mod train;
