//! Trainable parameter registry, ADAM, and the on-disk parameter container.
//!
//! [`Parameters`] owns every parameter tensor and its gradient buffer, keyed
//! by a stable insertion-order [`ParamId`] and a unique dotted name
//! (`<module>.<layer>.<weight|bias>`). Graphs never own parameters: a
//! [`BoundParams`] view copies each parameter onto a tape as a differentiable
//! leaf and, after backward, hands the leaf gradients back for accumulation.
//! Iteration everywhere follows insertion order, so updates and serialization
//! are deterministic.

use std::collections::HashMap;
use std::io::{Read, Write};

use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter name {0:?}")]
    DuplicateName(String),
    #[error("unknown parameter name {0:?}")]
    UnknownName(String),
    #[error("gradient for parameter {0:?} was never populated (missing backward/merge?)")]
    MissingGrad(String),
    #[error("optimizer state holds {state} parameters but registry holds {params}")]
    StateMismatch { state: usize, params: usize },
    #[error("parameter container io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parameter container corrupt: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
    touched: bool,
}

#[derive(Default, Clone, Debug)]
pub struct Parameters {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl Parameters {
    pub fn new() -> Self {
        Parameters::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
    ) -> Result<ParamId, ParamError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ParamError::DuplicateName(name));
        }
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, value, grad, touched: false });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn id(&self, name: &str) -> Result<ParamId, ParamError> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| ParamError::UnknownName(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    /// Insertion-ordered iteration.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
            e.touched = false;
        }
    }

    /// Adds gradients produced by one graph. Marks parameters as populated.
    pub fn merge_grads(&mut self, grads: impl IntoIterator<Item = (ParamId, Tensor)>) {
        for (id, g) in grads {
            let e = &mut self.entries[id.0];
            debug_assert_eq!(e.grad.shape(), g.shape());
            e.grad.add_assign(&g);
            e.touched = true;
        }
    }
}

/// View of [`Parameters`] bound onto one tape. Binding is eager: every
/// parameter becomes a leaf so a pass can never silently skip one.
pub struct BoundParams<'t, 'p> {
    tape: &'t Tape,
    params: &'p Parameters,
    slots: Vec<Var<'t>>,
}

impl<'t, 'p> BoundParams<'t, 'p> {
    pub fn new(tape: &'t Tape, params: &'p Parameters) -> Self {
        let slots = params.entries.iter().map(|e| tape.leaf(e.value.clone())).collect();
        BoundParams { tape, params, slots }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.slots[id.0]
    }

    pub fn params(&self) -> &'p Parameters {
        self.params
    }

    /// Leaf gradients after backward, aligned with the registry; call
    /// [`Parameters::merge_grads`] with the result.
    pub fn collect_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.slots.iter().enumerate().map(|(i, v)| (ParamId(i), v.grad())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    /// Completed update count.
    pub t: u64,
    moments: Vec<(Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &Parameters) -> Self {
        let moments = params
            .entries
            .iter()
            .map(|e| {
                let (r, c) = e.value.shape();
                (Tensor::zeros(r, c), Tensor::zeros(r, c))
            })
            .collect();
        AdamState { config, t: 0, moments }
    }

    /// One bias-corrected ADAM update over all parameters, in registry order.
    pub fn step(&mut self, params: &mut Parameters) -> Result<(), ParamError> {
        if self.moments.len() != params.entries.len() {
            return Err(ParamError::StateMismatch {
                state: self.moments.len(),
                params: params.entries.len(),
            });
        }
        if let Some(e) = params.entries.iter().find(|e| !e.touched) {
            return Err(ParamError::MissingGrad(e.name.clone()));
        }
        self.t += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (e, (m, v)) in params.entries.iter_mut().zip(&mut self.moments) {
            for ((theta, &g), (mi, vi)) in e
                .value
                .data_mut()
                .iter_mut()
                .zip(e.grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

// ─── On-disk container ───────────────────────────────────────────────────────
//
// Little-endian binary, bitwise round-trip:
//   magic "SLUPARM1", param count u64, adam {lr, b1, b2, eps} f64, t u64,
//   then per parameter: name (u64 len + utf8), rows u64, cols u64,
//   value f64*, adam m f64*, adam v f64*.

const MAGIC: &[u8; 8] = b"SLUPARM1";

pub fn write_params(
    w: &mut impl Write,
    params: &Parameters,
    adam: &AdamState,
) -> Result<(), ParamError> {
    if adam.moments.len() != params.entries.len() {
        return Err(ParamError::StateMismatch {
            state: adam.moments.len(),
            params: params.entries.len(),
        });
    }
    w.write_all(MAGIC)?;
    w.write_all(&(params.entries.len() as u64).to_le_bytes())?;
    for x in [
        adam.config.learning_rate,
        adam.config.beta1,
        adam.config.beta2,
        adam.config.epsilon,
    ] {
        w.write_all(&x.to_le_bytes())?;
    }
    w.write_all(&adam.t.to_le_bytes())?;
    for (e, (m, v)) in params.entries.iter().zip(&adam.moments) {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(e.value.rows() as u64).to_le_bytes())?;
        w.write_all(&(e.value.cols() as u64).to_le_bytes())?;
        for t in [&e.value, m, v] {
            for x in t.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_params(r: &mut impl Read) -> Result<(Parameters, AdamState), ParamError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ParamError::Corrupt(format!("bad magic {magic:?}")));
    }
    let n = read_u64(r)? as usize;
    let config = AdamConfig {
        learning_rate: read_f64(r)?,
        beta1: read_f64(r)?,
        beta2: read_f64(r)?,
        epsilon: read_f64(r)?,
    };
    let t = read_u64(r)?;
    let mut params = Parameters::new();
    let mut moments = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = read_u64(r)? as usize;
        if name_len > 4096 {
            return Err(ParamError::Corrupt(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| ParamError::Corrupt(format!("non-utf8 name: {e}")))?;
        let rows = read_u64(r)? as usize;
        let cols = read_u64(r)? as usize;
        let read_tensor = |r: &mut dyn Read| -> Result<Tensor, ParamError> {
            let mut data = vec![0.0; rows * cols];
            for d in &mut data {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf)?;
                *d = f64::from_le_bytes(buf);
            }
            Ok(Tensor::from_vec(rows, cols, data))
        };
        let value = read_tensor(r)?;
        let m = read_tensor(r)?;
        let v = read_tensor(r)?;
        params.register(name, value)?;
        moments.push((m, v));
    }
    Ok((params, AdamState { config, t, moments }))
}

fn read_u64(r: &mut impl Read) -> Result<u64, ParamError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64, ParamError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn single(value: f64) -> (Parameters, ParamId) {
        let mut p = Parameters::new();
        let id = p.register("test.w", Tensor::scalar(value)).unwrap();
        (p, id)
    }

    #[test]
    fn first_adam_step_matches_hand_rolled_update() {
        let (mut params, id) = single(1.0);
        params.merge_grads([(id, Tensor::scalar(0.1))]);
        let mut adam = AdamState::new(
            AdamConfig { learning_rate: 0.01, ..AdamConfig::default() },
            &params,
        );
        adam.step(&mut params).unwrap();
        // m̂ = 0.1, v̂ = 0.01 after bias correction at t=1, so the update is
        // -lr * m̂ / (sqrt(v̂) + eps) = -0.01 * 0.1 / (0.1 + 1e-8) ≈ -0.01.
        let expected = 1.0 - 0.01 * (0.1 / (0.1 + 1e-8));
        assert!((params.value(id).scalar_value() - expected).abs() < 1e-15);
        assert!((params.value(id).scalar_value() - 0.99).abs() < 1e-6);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn zero_grad_zero_delta() {
        let (mut params, id) = single(0.7);
        params.merge_grads([(id, Tensor::scalar(0.0))]);
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        adam.step(&mut params).unwrap();
        assert_eq!(params.value(id).scalar_value().to_bits(), 0.7f64.to_bits());
    }

    #[test]
    fn zero_learning_rate_freezes_values() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut params = Parameters::new();
        let id = params.register("w", Tensor::uniform(3, 4, -1.0, 1.0, &mut rng)).unwrap();
        let before = params.value(id).clone();
        params.merge_grads([(id, Tensor::uniform(3, 4, -1.0, 1.0, &mut rng))]);
        let mut adam = AdamState::new(
            AdamConfig { learning_rate: 0.0, ..AdamConfig::default() },
            &params,
        );
        adam.step(&mut params).unwrap();
        let after = params.value(id);
        assert!(before.iter().zip(after.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn second_identical_gradient_does_not_grow_step() {
        let (mut params, id) = single(0.0);
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        params.merge_grads([(id, Tensor::scalar(0.3))]);
        adam.step(&mut params).unwrap();
        let d1 = params.value(id).scalar_value().abs();
        let prev = params.value(id).scalar_value();
        params.zero_grads();
        params.merge_grads([(id, Tensor::scalar(0.3))]);
        adam.step(&mut params).unwrap();
        let d2 = (params.value(id).scalar_value() - prev).abs();
        assert!(d2 <= d1 + 1e-12, "d1={d1} d2={d2}");
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut params = Parameters::new();
        params.register("encoder.w", Tensor::scalar(1.0)).unwrap();
        let hidden = params.register("head.bias", Tensor::scalar(1.0)).unwrap();
        params.merge_grads([(hidden, Tensor::scalar(0.5))]);
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        let err = adam.step(&mut params).unwrap_err();
        assert!(err.to_string().contains("encoder.w"), "{err}");
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut params = Parameters::new();
        params.register("w", Tensor::scalar(0.0)).unwrap();
        assert!(matches!(params.register("w", Tensor::scalar(1.0)), Err(ParamError::DuplicateName(_))));
    }

    #[test]
    fn bound_params_round_trip_gradients() {
        let mut params = Parameters::new();
        let w = params
            .register("w", Tensor::from_vec(1, 2, vec![2.0, -1.0]))
            .unwrap();
        let tape = Tape::new();
        let bound = BoundParams::new(&tape, &params);
        let x = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = bound.var(w).matmul(x).unwrap().sum();
        tape.backward(y).unwrap();
        let grads = bound.collect_grads();
        params.merge_grads(grads);
        assert_eq!(params.grad(w).data(), &[3.0, 4.0]);
    }

    #[test]
    fn container_round_trip_bitwise() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let mut params = Parameters::new();
        for (name, r, c) in [("a.weight", 4, 7), ("a.bias", 4, 1), ("b.weight", 2, 3)] {
            params.register(name, Tensor::uniform(r, c, -2.0, 2.0, &mut rng)).unwrap();
        }
        let mut adam = AdamState::new(
            AdamConfig { learning_rate: 0.003, ..AdamConfig::default() },
            &params,
        );
        // Dirty the optimizer state so moments are non-trivial.
        for _ in 0..3 {
            params.zero_grads();
            let grads: Vec<_> = params
                .iter()
                .map(|(id, _, t)| (id, Tensor::uniform(t.rows(), t.cols(), -1.0, 1.0, &mut rng)))
                .collect();
            params.merge_grads(grads);
            adam.step(&mut params).unwrap();
        }

        let mut buf = Vec::new();
        write_params(&mut buf, &params, &adam).unwrap();
        let (params2, adam2) = read_params(&mut buf.as_slice()).unwrap();

        assert_eq!(adam2.t, adam.t);
        assert_eq!(adam2.config, adam.config);
        for ((id1, name1, t1), (id2, name2, t2)) in params.iter().zip(params2.iter()) {
            assert_eq!(name1, name2);
            assert_eq!(id1, id2);
            assert!(t1.iter().zip(t2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        for ((m1, v1), (m2, v2)) in adam.moments.iter().zip(&adam2.moments) {
            assert!(m1.iter().zip(m2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert!(v1.iter().zip(v2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        // A second write of the reloaded state is byte-identical.
        let mut buf2 = Vec::new();
        write_params(&mut buf2, &params2, &adam2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn truncated_container_is_corrupt_not_panic() {
        let mut params = Parameters::new();
        params.register("w", Tensor::scalar(1.0)).unwrap();
        let adam = AdamState::new(AdamConfig::default(), &params);
        let mut buf = Vec::new();
        write_params(&mut buf, &params, &adam).unwrap();
        buf.truncate(buf.len() - 5);
        assert!(read_params(&mut buf.as_slice()).is_err());
        let mut garbage = b"NOTAFILE".to_vec();
        garbage.extend_from_slice(&[0u8; 64]);
        assert!(matches!(read_params(&mut garbage.as_slice()), Err(ParamError::Corrupt(_))));
    }
}
