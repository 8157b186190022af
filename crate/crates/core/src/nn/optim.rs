use super::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimKind {
    /// Adam with decoupled weight decay.
    AdamW,
    /// Plain `θ ← θ − η∇` (plus decoupled decay when configured).
    Sgd,
}

impl std::str::FromStr for OptimKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(Self::AdamW),
            "sgd" => Ok(Self::Sgd),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

impl std::fmt::Display for OptimKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::AdamW => "adamw",
            Self::Sgd => "sgd",
        })
    }
}

/// Per-store optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub kind: OptimKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    /// AdamW with β = (0.9, 0.999) and ε = 1e-8.
    pub fn adamw(store: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        Self::new(OptimKind::AdamW, store, lr, weight_decay)
    }

    pub fn sgd(store: &ParamStore<T>, lr: f64) -> Self {
        Self::new(OptimKind::Sgd, store, lr, 0.0)
    }

    pub fn new(kind: OptimKind, store: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        let zeros = || store.values().iter().map(|v| vec![T::zero(); v.numel()]).collect();
        Self { kind, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update from the gradients currently held by `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} params, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (i, v) in store.values().iter().enumerate() {
            if self.m[i].len() != v.numel() || self.v[i].len() != v.numel() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer",
                    lhs: v.shape().to_vec(),
                    rhs: vec![self.m[i].len()],
                });
            }
        }
        self.step += 1;
        let lr = T::c(self.lr);
        let decay = T::c(1.0 - self.lr * self.weight_decay);
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let c1 = T::c(1.0 - self.beta1.powf(self.step as f64));
        let c2 = T::c(1.0 - self.beta2.powf(self.step as f64));
        let eps = T::c(self.eps);
        let grads: Vec<Vec<T>> = store.grads().to_vec();
        for (i, value) in store.values_mut().iter_mut().enumerate() {
            let g = &grads[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in value.data_mut().iter_mut().enumerate() {
                match self.kind {
                    OptimKind::AdamW => {
                        m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                        v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                        let mhat = m[j] / c1;
                        let vhat = v[j] / c2;
                        *w = *w * decay - lr * mhat / (vhat.sqrt() + eps);
                    }
                    OptimKind::Sgd => *w = *w * decay - lr * g[j],
                }
            }
        }
        Ok(())
    }
}
