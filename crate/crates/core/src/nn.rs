//! Named parameter storage and the small building blocks shared by the
//! encoder, the expert groups and the decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::{Activation, Gradients, Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// All tensors in id order.
    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Result<Var> {
        tape.bind_param(id.0, &self.tensors[id.0])
    }

    /// Collects a gradient per parameter; parameters the tape never touched
    /// get zeros.
    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients) -> Vec<Tensor> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                tape.bound_param(i)
                    .and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(contract(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                value.shape()
            )));
        }
        self.tensors[id.0] = value;
        Ok(())
    }
}

/// Deterministic parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Glorot-uniform matrix.
    pub fn xavier(&mut self, rows: usize, cols: usize) -> Tensor {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.random_range(-bound..bound)).collect();
        Tensor::new(vec![rows, cols], data).expect("shape matches")
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }
}

/// Affine map on the last axis: `x · w + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.w"), init.xavier(d_in, d_out));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[d_out])));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.bind(tape, self.w)?;
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = store.bind(tape, b)?;
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn d_out(&self, store: &ParamStore) -> usize {
        store.get(self.w).cols()
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = store.bind(tape, self.gamma)?;
        let b = store.bind(tape, self.beta)?;
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Two-layer position-wise feed-forward block `d → d_ffn → d`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
    pub activation: Activation,
}

impl Ffn {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        d: usize,
        d_ffn: usize,
        activation: Activation,
    ) -> Self {
        Self {
            up: Linear::new(store, init, &format!("{name}.up"), d, d_ffn, true),
            down: Linear::new(store, init, &format!("{name}.down"), d_ffn, d, true),
            activation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.activation(h, self.activation)?;
        self.down.forward(tape, store, h)
    }

    /// Scalar parameter count of one block.
    pub fn param_count(d: usize, d_ffn: usize) -> usize {
        2 * d * d_ffn + d + d_ffn
    }
}
