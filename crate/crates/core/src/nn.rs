//! Embedding, LSTM cell, affine projection and dropout on top of the tape.
//!
//! Layers do not own their weights. All trainable tensors live in a
//! [`ParamSet`]; a layer only records the [`ParamId`]s it reads, and every
//! forward pass starts by binding the set onto a fresh tape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{concat, Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named trainable tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Binding<'t> {
        Binding {
            vars: self.tensors.iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Binding<'t> {
        Binding {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    /// Folds the gradients of a bound copy back into the stored tensors.
    pub fn absorb(&mut self, binding: &Binding<'_>, grads: &Gradients) -> Result<()> {
        for (t, v) in self.tensors.iter_mut().zip(&binding.vars) {
            if let Some(g) = grads.get(*v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}

pub struct Binding<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Binding<'t> {
    /// Vars in [`ParamId`] order, for driving layers from arbitrary inputs.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }
}

pub fn uniform_tensor(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape matches generated data")
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub vocab_size: usize,
    pub dim: usize,
    pub weights: ParamId,
}

impl EmbeddingTable {
    pub fn new(params: &mut ParamSet, name: &str, vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let w = uniform_tensor(vec![vocab_size, dim], 0.01, rng);
        EmbeddingTable {
            vocab_size,
            dim,
            weights: params.add(format!("{name}.weight"), w),
        }
    }

    /// Rows for `ids`, one row per id.
    pub fn lookup<'t>(&self, b: &Binding<'t>, ids: &[usize]) -> Result<Var<'t>> {
        if let Some(pos) = ids.iter().position(|&i| i >= self.vocab_size) {
            return Err(Error::Index {
                index: ids[pos],
                bound: self.vocab_size,
                position: format!("token {pos}"),
            });
        }
        let ids: Vec<Option<usize>> = ids.iter().copied().map(Some).collect();
        b.var(self.weights).gather_rows(&ids)
    }
}

/// Single-layer LSTM cell with gate order input, forget, candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `[4·hidden × (input + hidden)]`
    pub weight: ParamId,
    /// `[4·hidden]`
    pub bias: ParamId,
}

pub const FORGET_BIAS: f64 = 1.0;

impl LstmCell {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = uniform_tensor(vec![4 * hidden_dim, input_dim + hidden_dim], 0.1, rng);
        let mut b = uniform_tensor(vec![4 * hidden_dim], 0.1, rng);
        b.data_mut()[hidden_dim..2 * hidden_dim]
            .iter_mut()
            .for_each(|v| *v += FORGET_BIAS);
        LstmCell {
            input_dim,
            hidden_dim,
            weight: params.add(format!("{name}.weight"), w),
            bias: params.add(format!("{name}.bias"), b),
        }
    }

    pub fn zero_state<'t>(&self, tape: &'t Tape, batch: usize) -> (Var<'t>, Var<'t>) {
        (
            tape.constant(Tensor::zeros(vec![batch, self.hidden_dim])),
            tape.constant(Tensor::zeros(vec![batch, self.hidden_dim])),
        )
    }

    pub fn step<'t>(
        &self,
        b: &Binding<'t>,
        x: Var<'t>,
        h_prev: Var<'t>,
        c_prev: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let xs = x.shape();
        let hs = h_prev.shape();
        if xs.len() != 2 || xs[1] != self.input_dim || hs != [xs[0], self.hidden_dim] {
            return Err(Error::shape("lstm_step", &xs, &hs));
        }
        if c_prev.shape() != hs {
            return Err(Error::shape("lstm_step", &hs, &c_prev.shape()));
        }
        let hd = self.hidden_dim;
        let gates = concat(&[x, h_prev])?
            .matmul_bt(b.var(self.weight))?
            .add_bias(b.var(self.bias))?;
        let i = gates.slice_cols(0, hd)?.sigmoid();
        let f = gates.slice_cols(hd, 2 * hd)?.sigmoid();
        let g = gates.slice_cols(2 * hd, 3 * hd)?.tanh();
        let o = gates.slice_cols(3 * hd, 4 * hd)?.sigmoid();
        let c = f.mul(c_prev)?.add(i.mul(g)?)?;
        let h = o.mul(c.tanh())?;
        Ok((h, c))
    }

    /// One step on the concatenation `[token_embedding, latent]`.
    pub fn decoder_step<'t>(
        &self,
        b: &Binding<'t>,
        token: Var<'t>,
        latent: Var<'t>,
        h_prev: Var<'t>,
        c_prev: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        self.step(b, concat(&[token, latent])?, h_prev, c_prev)
    }
}

/// `y = x·Wᵀ + b` with `W: [out × in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = uniform_tensor(vec![out_dim, in_dim], bound, rng);
        let b = uniform_tensor(vec![out_dim], bound, rng);
        Linear {
            in_dim,
            out_dim,
            weight: params.add(format!("{name}.weight"), w),
            bias: params.add(format!("{name}.bias"), b),
        }
    }

    pub fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul_bt(b.var(self.weight))?.add_bias(b.var(self.bias))
    }
}

/// Inverted dropout: survivors are scaled by `1 / (1 − p)`.
pub fn dropout<'t>(x: Var<'t>, p: f64, training: bool, rng: &mut impl Rng) -> Result<Var<'t>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Argument(format!("dropout probability {p} not in [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = x.shape();
    let mask = (0..x.numel())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    x.mul_const(&Tensor::new(shape, mask)?)
}
