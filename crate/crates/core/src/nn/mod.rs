//! Parameter storage, layers, initialization, optimizers and weight averaging.

mod ema;
mod optim;

pub use ema::EmaState;
pub use optim::{OptimKind, OptimizerState};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owns the trainable tensors of one network together with their gradients.
///
/// The `tag` distinguishes stores that share a tape, so a backward pass through
/// generator and discriminator can write gradients to just one of them.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    tag: u32,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Vec<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(tag: u32) -> Self {
        Self { tag, names: Vec::new(), values: Vec::new(), grads: Vec::new() }
    }

    pub fn tag(&self) -> u32 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.grads.push(vec![T::zero(); value.numel()]);
        self.values.push(value);
        self.names.push(name.into());
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.grads[id.0]
    }

    pub fn grads(&self) -> &[Vec<T>] {
        &self.grads
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Leaf for parameter `id` on `tape`; repeated calls reuse one node.
    pub fn var(&self, tape: &mut Tape<T>, id: ParamId) -> Var {
        tape.param_leaf(self.tag, id.0, &self.values[id.0])
    }

    /// Adds every gradient the tape holds for this store into `grads`.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>) {
        for (idx, g) in tape.param_grads(self.tag) {
            for (acc, &v) in self.grads[idx].iter_mut().zip(g) {
                *acc = *acc + v;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Overwrites all values with those of a store of identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        self.check_layout(other.values())?;
        self.values.clone_from_slice(other.values());
        Ok(())
    }

    pub fn set_values(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        self.check_layout(&values)?;
        self.values = values;
        Ok(())
    }

    fn check_layout(&self, values: &[Tensor<T>]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::InvalidArgument(format!("parameter count {} vs {}", values.len(), self.values.len())));
        }
        for (a, b) in self.values.iter().zip(values) {
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    op: "param copy",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Same layout and values under a different tag.
    pub fn clone_with_tag(&self, tag: u32) -> Self {
        let mut s = self.clone();
        s.tag = tag;
        s.zero_grads();
        s
    }
}

/// Glorot-uniform tensor: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::InvalidArgument(format!("zero fan for shape {shape:?}")));
    }
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Ok(Tensor::from_fn(shape, |_| T::c(rng.random_range(-a..a))))
}

/// Conv kernel `[out, in, k, k]` with receptive-field-scaled fans.
pub fn glorot_conv<T: Scalar, R: Rng + ?Sized>(out: usize, inp: usize, k: usize, rng: &mut R) -> Result<Tensor<T>> {
    glorot(&[out, inp, k, k], inp * k * k, out * k * k, rng)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Scalar>(self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu(s) => tape.leaky_relu(x, s),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Affine map over the last axis with weight `[out, in]` and bias `[out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = glorot(&[out_dim, in_dim], in_dim, out_dim, rng)?;
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        match shape.last() {
            Some(&d) if d == self.in_dim => {}
            _ => return Err(Error::ShapeMismatch { op: "linear", lhs: shape, rhs: vec![self.out_dim, self.in_dim] }),
        }
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let flat = tape.reshape(x, &[rows, self.in_dim])?;
        let w = store.var(tape, self.weight);
        let b = store.var(tape, self.bias);
        let y = tape.matmul_ext(flat, w, true)?;
        let y = tape.add(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        tape.reshape(y, &out_shape)
    }
}

/// Stack of linear layers, each followed by its own activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<(Linear, Activation)>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`; `hidden` applies to every layer but the
    /// last, which uses `last`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        hidden: Activation,
        last: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument("mlp needs at least input and output dims".into()));
        }
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let act = if i + 2 == dims.len() { last } else { hidden };
            layers.push((Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng)?, act));
        }
        Ok(Self { layers })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(*self.forward_all(tape, store, x)?.last().expect("nonempty"))
    }

    /// Post-activation output of every layer.
    pub fn forward_all<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut outs = Vec::with_capacity(self.layers.len());
        for (lin, act) in &self.layers {
            h = lin.forward(tape, store, h)?;
            h = act.apply(tape, h)?;
            outs.push(h);
        }
        Ok(outs)
    }
}

/// Mean binary cross-entropy of logits against targets in `[0, 1]`.
pub fn bce_logits<T: Scalar>(tape: &mut Tape<T>, logits: Var, target: &Tensor<T>) -> Result<Var> {
    tape.bce_logits(logits, target)
}

/// Same, with every target equal to `t`.
pub fn bce_logits_const<T: Scalar>(tape: &mut Tape<T>, logits: Var, t: f64) -> Result<Var> {
    let target = Tensor::full(tape.shape(logits), T::c(t));
    tape.bce_logits(logits, &target)
}
