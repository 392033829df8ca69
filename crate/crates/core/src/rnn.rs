//! Recurrent cells, dense layers, and embeddings.
//!
//! Cells follow the single-matrix-per-gate convention: each gate applies
//! `W · (x ⊕ h_prev) + b`, with the input occupying the first `input` columns
//! of `W` and the previous hidden state the rest. Weight matrices are
//! initialized uniformly in `±sqrt(6 / (fan_in + fan_out))`, biases at zero
//! (LSTM forget gate at one), embeddings uniformly in `±0.1`.

use rand::Rng;

use crate::autodiff::{TapeError, Var};
use crate::params::{BoundParams, ParamError, ParamId, Parameters};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
}

/// Fully connected layer `activation(W·x + b)`; projections may omit the bias.
#[derive(Clone, Debug)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    w: ParamId,
    b: Option<ParamId>,
}

impl Dense {
    pub fn new(
        ns: &str,
        input: usize,
        output: usize,
        params: &mut Parameters,
        rng: &mut impl Rng,
    ) -> Result<Self, ParamError> {
        let w = params.register(format!("{ns}.weight"), Tensor::glorot(output, input, rng))?;
        let b = params.register(format!("{ns}.bias"), Tensor::zeros(output, 1))?;
        Ok(Dense { input, output, w, b: Some(b) })
    }

    /// Weight-only linear map, so a zero input projects to exactly zero.
    pub fn new_unbiased(
        ns: &str,
        input: usize,
        output: usize,
        params: &mut Parameters,
        rng: &mut impl Rng,
    ) -> Result<Self, ParamError> {
        let w = params.register(format!("{ns}.weight"), Tensor::glorot(output, input, rng))?;
        Ok(Dense { input, output, w, b: None })
    }

    pub fn apply<'t>(
        &self,
        bound: &BoundParams<'t, '_>,
        x: Var<'t>,
        activation: Activation,
    ) -> Result<Var<'t>, TapeError> {
        let mut z = bound.var(self.w).matmul(x)?;
        if let Some(b) = self.b {
            z = z.add(bound.var(b))?;
        }
        Ok(match activation {
            Activation::Linear => z,
            Activation::Relu => z.relu(),
        })
    }
}

/// Token/slot embedding table; lookup yields a `dim x 1` column.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub vocab: usize,
    pub dim: usize,
    table: ParamId,
}

impl EmbeddingTable {
    pub fn new(
        ns: &str,
        vocab: usize,
        dim: usize,
        params: &mut Parameters,
        rng: &mut impl Rng,
    ) -> Result<Self, ParamError> {
        let table =
            params.register(format!("{ns}.table"), Tensor::uniform(vocab, dim, -0.1, 0.1, rng))?;
        Ok(EmbeddingTable { vocab, dim, table })
    }

    pub fn lookup<'t>(
        &self,
        bound: &BoundParams<'t, '_>,
        id: usize,
    ) -> Result<Var<'t>, TapeError> {
        bound.var(self.table).row(id)
    }
}

/// A recurrent cell usable by the bidirectional driver.
pub trait RnnCell {
    type State<'t>: Clone;

    fn hidden(&self) -> usize;

    /// Initial state, optionally seeding the hidden vector (context injection
    /// into the initial state). A seed of the wrong length is a shape error.
    fn initial<'t>(
        &self,
        bound: &BoundParams<'t, '_>,
        h0: Option<Var<'t>>,
    ) -> Result<Self::State<'t>, TapeError>;

    fn step<'t>(
        &self,
        bound: &BoundParams<'t, '_>,
        x: Var<'t>,
        state: &Self::State<'t>,
    ) -> Result<Self::State<'t>, TapeError>;

    /// The exposed output of a state (the hidden vector).
    fn output<'t>(state: Self::State<'t>) -> Var<'t>;
}

fn register_gate(
    ns: &str,
    name: &str,
    rows: usize,
    cols: usize,
    bias: f64,
    params: &mut Parameters,
    rng: &mut impl Rng,
) -> Result<(ParamId, ParamId), ParamError> {
    let w = params.register(format!("{ns}.{name}.weight"), Tensor::glorot(rows, cols, rng))?;
    let mut b0 = Tensor::zeros(rows, 1);
    if bias != 0.0 {
        b0.fill(bias);
    }
    let b = params.register(format!("{ns}.{name}.bias"), b0)?;
    Ok((w, b))
}

fn check_seed(hidden: usize, h0: &Var<'_>) -> Result<(), TapeError> {
    let shape = h0.shape();
    if shape != (hidden, 1) {
        return Err(TapeError::Shape { op: "rnn_initial_state", lhs: (hidden, 1), rhs: shape });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct GruCell {
    pub input: usize,
    pub hidden: usize,
    w_z: ParamId,
    b_z: ParamId,
    w_r: ParamId,
    b_r: ParamId,
    w_h: ParamId,
    b_h: ParamId,
}

impl GruCell {
    pub fn new(
        ns: &str,
        input: usize,
        hidden: usize,
        params: &mut Parameters,
        rng: &mut impl Rng,
    ) -> Result<Self, ParamError> {
        let cat = input + hidden;
        let (w_z, b_z) = register_gate(ns, "z", hidden, cat, 0.0, params, rng)?;
        let (w_r, b_r) = register_gate(ns, "r", hidden, cat, 0.0, params, rng)?;
        let (w_h, b_h) = register_gate(ns, "h", hidden, cat, 0.0, params, rng)?;
        Ok(GruCell { input, hidden, w_z, b_z, w_r, b_r, w_h, b_h })
    }
}

impl RnnCell for GruCell {
    type State<'t> = Var<'t>;

    fn hidden(&self) -> usize {
        self.hidden
    }

    fn initial<'t>(
        &self,
        bound: &BoundParams<'t, '_>,
        h0: Option<Var<'t>>,
    ) -> Result<Var<'t>, TapeError> {
        match h0 {
            Some(h) => {
                check_seed(self.hidden, &h)?;
                Ok(h)
            }
            None => Ok(bound.tape().constant(Tensor::zeros(self.hidden, 1))),
        }
    }

    fn step<'t>(
        &self,
        bound: &BoundParams<'t, '_>,
        x: Var<'t>,
        h_prev: &Var<'t>,
    ) -> Result<Var<'t>, TapeError> {
        let h_prev = *h_prev;
        let xin = bound.tape().concat(&[x, h_prev])?;
        let z = bound.var(self.w_z).matmul(xin)?.add(bound.var(self.b_z))?.sigmoid();
        let r = bound.var(self.w_r).matmul(xin)?.add(bound.var(self.b_r))?.sigmoid();
        let gated = bound.tape().concat(&[x, r.mul(h_prev)?])?;
        let cand = bound.var(self.w_h).matmul(gated)?.add(bound.var(self.b_h))?.tanh();
        // (1 - z) ⊙ h_prev + z ⊙ cand
        h_prev.sub(z.mul(h_prev)?)?.add(z.mul(cand)?)
    }

    fn output<'t>(state: Self::State<'t>) -> Var<'t> {
        state
    }
}

#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input: usize,
    pub hidden: usize,
    w_i: ParamId,
    b_i: ParamId,
    w_f: ParamId,
    b_f: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    w_c: ParamId,
    b_c: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState<'t> {
    pub h: Var<'t>,
    pub c: Var<'t>,
}

impl LstmCell {
    pub fn new(
        ns: &str,
        input: usize,
        hidden: usize,
        params: &mut Parameters,
        rng: &mut impl Rng,
    ) -> Result<Self, ParamError> {
        let cat = input + hidden;
        let (w_i, b_i) = register_gate(ns, "i", hidden, cat, 0.0, params, rng)?;
        // Forget bias starts at one so early steps retain cell state.
        let (w_f, b_f) = register_gate(ns, "f", hidden, cat, 1.0, params, rng)?;
        let (w_o, b_o) = register_gate(ns, "o", hidden, cat, 0.0, params, rng)?;
        let (w_c, b_c) = register_gate(ns, "c", hidden, cat, 0.0, params, rng)?;
        Ok(LstmCell { input, hidden, w_i, b_i, w_f, b_f, w_o, b_o, w_c, b_c })
    }
}

impl RnnCell for LstmCell {
    type State<'t> = LstmState<'t>;

    fn hidden(&self) -> usize {
        self.hidden
    }

    fn initial<'t>(
        &self,
        bound: &BoundParams<'t, '_>,
        h0: Option<Var<'t>>,
    ) -> Result<LstmState<'t>, TapeError> {
        let zeros = || bound.tape().constant(Tensor::zeros(self.hidden, 1));
        let h = match h0 {
            Some(h) => {
                check_seed(self.hidden, &h)?;
                h
            }
            None => zeros(),
        };
        // Injected context seeds only the hidden vector; the cell starts empty.
        Ok(LstmState { h, c: zeros() })
    }

    fn step<'t>(
        &self,
        bound: &BoundParams<'t, '_>,
        x: Var<'t>,
        state: &LstmState<'t>,
    ) -> Result<LstmState<'t>, TapeError> {
        let xin = bound.tape().concat(&[x, state.h])?;
        let gate = |w: ParamId, b: ParamId| -> Result<Var<'t>, TapeError> {
            bound.var(w).matmul(xin)?.add(bound.var(b))
        };
        let i = gate(self.w_i, self.b_i)?.sigmoid();
        let f = gate(self.w_f, self.b_f)?.sigmoid();
        let o = gate(self.w_o, self.b_o)?.sigmoid();
        let cand = gate(self.w_c, self.b_c)?.tanh();
        let c = f.mul(state.c)?.add(i.mul(cand)?)?;
        let h = o.mul(c.tanh())?;
        Ok(LstmState { h, c })
    }

    fn output<'t>(state: Self::State<'t>) -> Var<'t> {
        state.h
    }
}

#[derive(Debug)]
pub struct BiRnnOutput<'t> {
    /// Per position: forward output ⊕ backward output, in input order.
    pub outputs: Vec<Var<'t>>,
    /// Forward final output ⊕ backward final output.
    pub final_state: Var<'t>,
}

/// Runs a forward and a backward pass over `inputs`. The backward direction is
/// the forward recurrence applied to the reversed sequence, so both share one
/// code path.
pub fn birnn<'t, C: RnnCell>(
    bound: &BoundParams<'t, '_>,
    fwd: &C,
    bwd: &C,
    inputs: &[Var<'t>],
    init_fwd: Option<Var<'t>>,
    init_bwd: Option<Var<'t>>,
) -> Result<BiRnnOutput<'t>, TapeError> {
    if inputs.is_empty() {
        return Err(TapeError::Empty { op: "birnn" });
    }
    let mut state = fwd.initial(bound, init_fwd)?;
    let mut fwd_out = Vec::with_capacity(inputs.len());
    for &x in inputs {
        state = fwd.step(bound, x, &state)?;
        fwd_out.push(C::output(state.clone()));
    }
    let mut state = bwd.initial(bound, init_bwd)?;
    let mut bwd_out = Vec::with_capacity(inputs.len());
    for &x in inputs.iter().rev() {
        state = bwd.step(bound, x, &state)?;
        bwd_out.push(C::output(state.clone()));
    }
    bwd_out.reverse();
    let final_state =
        bound.tape().concat(&[*fwd_out.last().unwrap(), bwd_out[0]])?;
    let outputs = fwd_out
        .into_iter()
        .zip(&bwd_out)
        .map(|(f, b)| bound.tape().concat(&[f, *b]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BiRnnOutput { outputs, final_state })
}
