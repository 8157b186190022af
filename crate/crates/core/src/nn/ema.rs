use super::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Exponential moving average of a store's parameters.
///
/// With `warmup` the decay applied on update `n` is
/// `min(decay, (1 + n) / (10 + n))`, so short runs are not dominated by the
/// initial weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState<T> {
    pub decay: f64,
    pub warmup: bool,
    pub updates: u64,
    pub shadow: Vec<Tensor<T>>,
}

impl<T: Scalar> EmaState<T> {
    pub fn new(store: &ParamStore<T>, decay: f64, warmup: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!("ema decay {decay} outside [0,1]")));
        }
        Ok(Self { decay, warmup, updates: 0, shadow: store.values().to_vec() })
    }

    pub fn effective_decay(&self) -> f64 {
        if self.warmup {
            let n = self.updates as f64;
            self.decay.min((1.0 + n) / (10.0 + n))
        } else {
            self.decay
        }
    }

    /// `shadow ← d·shadow + (1 − d)·param`
    pub fn update(&mut self, store: &ParamStore<T>) -> Result<()> {
        if store.len() != self.shadow.len() {
            return Err(Error::InvalidArgument(format!(
                "ema tracks {} params, store has {}",
                self.shadow.len(),
                store.len()
            )));
        }
        for (s, p) in self.shadow.iter().zip(store.values()) {
            if s.shape() != p.shape() {
                return Err(Error::ShapeMismatch { op: "ema", lhs: s.shape().to_vec(), rhs: p.shape().to_vec() });
            }
        }
        let d = T::c(self.effective_decay());
        let one_minus = T::c(1.0 - self.effective_decay());
        for (s, p) in self.shadow.iter_mut().zip(store.values()) {
            for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = d * *sv + one_minus * pv;
            }
        }
        self.updates += 1;
        Ok(())
    }

    /// A copy of `store` holding the averaged weights.
    pub fn materialize(&self, store: &ParamStore<T>) -> Result<ParamStore<T>> {
        let mut out = store.clone();
        out.set_values(self.shadow.clone())?;
        Ok(out)
    }
}
