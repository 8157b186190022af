use rand::Rng;

use super::replay::Transition;
use crate::error::{invalid, Error, Result};
use crate::nn::{Activation, Mlp, OptimizerState, ParamStore};
use crate::tensor::{Tape, Tensor};

/// Online and target MLPs mapping an observation to one value per action.
#[derive(Clone, Debug)]
pub struct QNetwork {
    pub obs_dim: usize,
    pub n_actions: usize,
    mlp: Mlp,
    pub online: ParamStore<f64>,
    pub target: ParamStore<f64>,
    pub optimizer: OptimizerState<f64>,
}

impl QNetwork {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: usize, n_actions: usize, lr: f64, rng: &mut R) -> Result<Self> {
        let mut online = ParamStore::new(10);
        let mlp = Mlp::new(
            &mut online,
            "q",
            &[obs_dim, hidden, hidden, n_actions],
            Activation::Relu,
            Activation::Identity,
            rng,
        )?;
        let target = online.clone_with_tag(11);
        let optimizer = OptimizerState::adamw(&online, lr, 0.0);
        Ok(Self { obs_dim, n_actions, mlp, online, target, optimizer })
    }

    fn eval(&self, store: &ParamStore<f64>, obs: &[Vec<f64>]) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(self.batch(obs)?);
        let q = self.mlp.forward(&mut tape, store, x)?;
        Ok(tape.value(q).clone())
    }

    fn batch(&self, obs: &[Vec<f64>]) -> Result<Tensor<f64>> {
        let mut flat = Vec::with_capacity(obs.len() * self.obs_dim);
        for o in obs {
            if o.len() != self.obs_dim {
                return Err(Error::ShapeMismatch { op: "qnet", lhs: vec![o.len()], rhs: vec![self.obs_dim] });
            }
            flat.extend_from_slice(o);
        }
        Tensor::new(vec![obs.len(), self.obs_dim], flat)
    }

    pub fn q_values(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eval(&self.online, &[obs.to_vec()])?.into_data())
    }

    pub fn q_target(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eval(&self.target, &[obs.to_vec()])?.into_data())
    }

    /// Copies online weights into the target network.
    pub fn sync_target(&mut self) {
        self.target.copy_values_from(&self.online).expect("same architecture");
    }

    /// One optimizer step on the mean squared TD error against
    /// `r + (1 − done)·γ·max_a' Q_target(s', a')`. Returns the pre-step loss.
    pub fn update(&mut self, batch: &[Transition], gamma: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(invalid("dqn update on an empty batch"));
        }
        let next: Vec<Vec<f64>> = batch.iter().map(|t| t.next_state.clone()).collect();
        let next_q = self.eval(&self.target, &next)?;
        let mut targets = Vec::with_capacity(batch.len());
        for (i, t) in batch.iter().enumerate() {
            if t.action >= self.n_actions {
                return Err(invalid(format!("action {} out of range", t.action)));
            }
            let y = if t.done {
                t.reward
            } else {
                let row = &next_q.data()[i * self.n_actions..(i + 1) * self.n_actions];
                let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                t.reward + gamma * best
            };
            if !y.is_finite() {
                return Err(Error::NonFinite { what: "td target".into(), round: 0 });
            }
            targets.push(y);
        }
        let states: Vec<Vec<f64>> = batch.iter().map(|t| t.state.clone()).collect();
        let mut tape = Tape::new();
        let x = tape.constant(self.batch(&states)?);
        let q = self.mlp.forward(&mut tape, &self.online, x)?;
        let mut onehot = vec![0.0; batch.len() * self.n_actions];
        for (i, t) in batch.iter().enumerate() {
            onehot[i * self.n_actions + t.action] = 1.0;
        }
        let picked = tape.mask(q, onehot)?;
        let picked = tape.sum_axes(picked, &[1], false)?;
        let y = tape.constant(Tensor::new(vec![batch.len()], targets)?);
        let diff = tape.sub(picked, y)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.mean(sq)?;
        let value = tape.value(loss).item();
        tape.backward(loss)?;
        self.online.zero_grads();
        self.online.accumulate_grads(&tape);
        self.optimizer.step(&mut self.online)?;
        Ok(value)
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
