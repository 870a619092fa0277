//! AdamW with decoupled weight decay.
//!
//! Weight decay is applied directly to the parameter (`p -= lr * wd * p`)
//! rather than folded into the gradient, so the moment estimates track the
//! loss gradient alone.

use super::tape::{Gradients, ParamId, Params};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// First/second moment buffers for one parameter.
#[derive(Clone)]
pub struct OptimState<T: Scalar> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

pub struct AdamW<T: Scalar> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    weight_decay: T,
    step: u64,
    state: Vec<OptimState<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &Params<T>, lr: T, beta1: T, beta2: T, weight_decay: T) -> Self {
        let state = params
            .iter()
            .map(|(_, _, v)| OptimState { m: Tensor::zeros(v.shape()), v: Tensor::zeros(v.shape()) })
            .collect();
        AdamW {
            lr,
            beta1,
            beta2,
            eps: T::from_f64(1e-8),
            weight_decay,
            step: 0,
            state,
        }
    }

    pub fn set_lr(&mut self, lr: T) {
        self.lr = lr;
    }

    pub fn lr(&self) -> T {
        self.lr
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Moment buffers in parameter registration order, for serialization.
    pub fn state(&self) -> &[OptimState<T>] {
        &self.state
    }

    /// Replaces the moment buffers and step counter with ones saved from an
    /// earlier run. The buffers must match the tracked parameters one for one.
    pub fn restore(&mut self, step: u64, state: Vec<OptimState<T>>) -> Result<()> {
        if state.len() != self.state.len() {
            return Err(Error::contract(
                "adamw_restore",
                format!("saved state has {} entries, optimizer tracks {}", state.len(), self.state.len()),
            ));
        }
        for (i, (new, cur)) in state.iter().zip(&self.state).enumerate() {
            if new.m.shape() != cur.m.shape() || new.v.shape() != cur.v.shape() {
                return Err(Error::contract(
                    "adamw_restore",
                    format!("saved moment shapes for parameter {i} do not match the registry"),
                ));
            }
        }
        self.step = step;
        self.state = state;
        Ok(())
    }

    /// Applies one update. Parameters without a gradient entry (unreachable
    /// from the loss) still receive weight decay and advance their moment
    /// buffers with a zero gradient, matching the dense behaviour.
    pub fn step(&mut self, params: &mut Params<T>, grads: &Gradients<T>) -> Result<()> {
        if self.state.len() != params.len() {
            return Err(Error::contract(
                "adamw_step",
                format!("optimizer tracks {} parameters, registry has {}", self.state.len(), params.len()),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let one = T::one();

        for i in 0..params.len() {
            let id = ParamId(i);
            if let Some(g) = grads.get(id) {
                if g.shape() != params.value(id).shape() {
                    return Err(Error::contract(
                        "adamw_step",
                        format!(
                            "gradient shape {} does not match parameter {} of shape {}",
                            g.shape(),
                            params.name(id),
                            params.value(id).shape()
                        ),
                    ));
                }
                if !g.all_finite() {
                    return Err(Error::numeric(
                        "adamw_step",
                        format!("non-finite gradient for parameter {}", params.name(id)),
                    ));
                }
            }
            let zero_grad = Tensor::zeros(params.value(id).shape());
            let g = grads.get(id).unwrap_or(&zero_grad);
            let st = &mut self.state[i];
            let p = params.value_mut(id);
            let decay = one - self.lr * self.weight_decay;
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.data_mut())
                .zip(st.v.data_mut())
            {
                *mv = self.beta1 * *mv + (one - self.beta1) * *gv;
                *vv = self.beta2 * *vv + (one - self.beta2) * *gv * *gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv = *pv * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            if !p.all_finite() {
                return Err(Error::numeric(
                    "adamw_step",
                    format!("parameter {} became non-finite after update", params.name(id)),
                ));
            }
        }
        Ok(())
    }
}
