//! Named parameter storage with optimizer state.
//!
//! Every network block owns one [`ParamStore`]. Stores are identified by a
//! process-unique uid so a [`Tape`](crate::autodiff::Tape) can route collected
//! gradients back to the store they were leased from.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::autodiff::tape::Tape;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

/// One tensor plus its Adam moment buffers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub tensor: Tensor,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// Gradient update rules. Adam uses the usual bias-corrected moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::adam()
    }
}

/// Ordered collection of named parameters.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    params: BTreeMap<String, Param>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { uid: NEXT_UID.fetch_add(1, Ordering::Relaxed), params: BTreeMap::new() }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let n = tensor.numel();
        self.params.insert(
            name.to_string(),
            Param { tensor, m: vec![0.0; n], v: vec![0.0; n], step: 0 },
        );
        Ok(())
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Overwrite a parameter's values, preserving optimizer state shape.
    /// The replacement must match the existing shape.
    pub fn set_value(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::Shape {
                op: "set_value",
                detail: format!(
                    "param '{name}' has shape {:?}, replacement is {:?}",
                    p.tensor.shape(),
                    tensor.shape()
                ),
            });
        }
        p.tensor = tensor.clone();
        Ok(())
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.params.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub(crate) fn param_entries(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub(crate) fn insert_param(&mut self, name: String, param: Param) -> Result<()> {
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.params.insert(name, param);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// Copy parameter values from another store where names match. Optimizer
    /// state of the destination is reset for the copied entries. Names
    /// present in only one store are left alone.
    pub fn copy_matching_values(&mut self, src: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for (name, sp) in src.params.iter() {
            if let Some(dp) = self.params.get_mut(name) {
                if dp.tensor.shape() != sp.tensor.shape() {
                    return Err(Error::Shape {
                        op: "copy_matching_values",
                        detail: format!(
                            "param '{name}': {:?} vs {:?}",
                            dp.tensor.shape(),
                            sp.tensor.shape()
                        ),
                    });
                }
                dp.tensor = sp.tensor.clone();
                let n = dp.tensor.numel();
                dp.m = vec![0.0; n];
                dp.v = vec![0.0; n];
                dp.step = 0;
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Deep copy under a fresh uid. Values and optimizer state carry over;
    /// tape leases taken against the original never touch the copy.
    pub fn duplicate(&self) -> ParamStore {
        let mut copy = ParamStore::new();
        copy.params = self.params.clone();
        copy
    }

    /// Overwrite this store's values and optimizer state from a snapshot.
    /// Both stores must hold exactly the same names and shapes.
    pub fn clone_state_from(&mut self, src: &ParamStore) -> Result<()> {
        if self.params.len() != src.params.len() {
            return Err(Error::Train(format!(
                "state restore: {} params here, {} in the snapshot",
                self.params.len(),
                src.params.len()
            )));
        }
        for (name, sp) in src.params.iter() {
            let dp = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if dp.tensor.shape() != sp.tensor.shape() {
                return Err(Error::Shape {
                    op: "clone_state_from",
                    detail: format!(
                        "param '{name}': {:?} vs {:?}",
                        dp.tensor.shape(),
                        sp.tensor.shape()
                    ),
                });
            }
            *dp = sp.clone();
        }
        Ok(())
    }

    /// Pull accumulated gradients for this store's leases off a tape.
    /// Adds into any gradient already present, so several tapes can
    /// contribute before one optimizer step.
    pub fn collect_grads(&mut self, tape: &Tape) -> Result<()> {
        if !tape.backward_has_run() {
            return Err(Error::MissingGrad("backward has not run on this tape".into()));
        }
        for (name, grad) in tape.param_grads(self.uid) {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
            p.tensor.accumulate_grad(grad)?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.clear_grad();
        }
    }

    /// Apply one optimizer update to every parameter. Each parameter must
    /// carry a gradient; gradients are left in place afterwards so callers
    /// decide when to clear.
    pub fn optimizer_step(&mut self, opt: Optimizer, lr: f64) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::Train(format!("learning rate {lr} is not usable")));
        }
        for (name, p) in self.params.iter_mut() {
            let grad = p
                .tensor
                .grad()
                .ok_or_else(|| Error::MissingGrad(name.clone()))?
                .to_vec();
            match opt {
                Optimizer::Sgd => {
                    let data = p.tensor.data_mut();
                    for (w, g) in data.iter_mut().zip(&grad) {
                        *w -= lr * g;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    p.step += 1;
                    let t = p.step as i32;
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    let data = p.tensor.data_mut();
                    for i in 0..grad.len() {
                        let g = grad[i];
                        p.m[i] = beta1 * p.m[i] + (1.0 - beta1) * g;
                        p.v[i] = beta2 * p.v[i] + (1.0 - beta2) * g * g;
                        let m_hat = p.m[i] / bc1;
                        let v_hat = p.v[i] / bc2;
                        data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            p.tensor.assert_finite(&format!("param '{name}' after optimizer step"))?;
        }
        Ok(())
    }

    /// Largest absolute gradient entry across the store, for diagnostics.
    pub fn max_abs_grad(&self) -> f64 {
        self.params
            .values()
            .filter_map(|p| p.tensor.grad())
            .flat_map(|g| g.iter().copied())
            .fold(0.0, |acc: f64, g| acc.max(g.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uids_are_unique() {
        let a = ParamStore::new();
        let b = ParamStore::new();
        assert_ne!(a.uid(), b.uid());
    }

    #[test]
    fn duplicate_and_unknown_names_error() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            s.insert("w", Tensor::scalar(2.0)),
            Err(Error::DuplicateParam(_))
        ));
        assert!(matches!(s.value("nope"), Err(Error::UnknownParam(_))));
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&s, "w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        s.collect_grads(&tape).unwrap();
        // d/dw sum(w^2) = 2w = [2, -4]
        s.optimizer_step(Optimizer::Sgd, 0.1).unwrap();
        let v = s.value("w").unwrap().data();
        assert!((v[0] - 0.8).abs() < 1e-15);
        assert!((v[1] + 1.6).abs() < 1e-15);
        // Gradient is untouched by the step.
        assert_eq!(s.value("w").unwrap().grad().unwrap(), &[2.0, -4.0]);
        s.clear_grads();
        assert!(s.value("w").unwrap().grad().is_none());
    }

    #[test]
    fn adam_first_step_size_is_lr() {
        // With bias correction the first Adam update is lr * g/(|g|+eps),
        // i.e. almost exactly lr in magnitude regardless of gradient scale.
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(5.0)).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&s, "w").unwrap();
        let y = tape.scale(w, 3.0).unwrap();
        tape.backward(y).unwrap();
        s.collect_grads(&tape).unwrap();
        s.optimizer_step(Optimizer::adam(), 0.01).unwrap();
        let v = s.value("w").unwrap().data()[0];
        assert!((v - (5.0 - 0.01)).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(4.0)).unwrap();
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let w = tape.param(&s, "w").unwrap();
            let shifted = tape.affine(w, 1.0, -1.5).unwrap(); // w - 1.5
            let sq = tape.mul(shifted, shifted).unwrap();
            let loss = tape.sum(sq).unwrap();
            tape.backward(loss).unwrap();
            s.clear_grads();
            s.collect_grads(&tape).unwrap();
            s.optimizer_step(Optimizer::adam(), 0.05).unwrap();
        }
        let v = s.value("w").unwrap().data()[0];
        assert!((v - 1.5).abs() < 1e-3, "got {v}");
    }

    #[test]
    fn step_without_grad_names_the_param() {
        let mut s = ParamStore::new();
        s.insert("only", Tensor::scalar(1.0)).unwrap();
        let err = s.optimizer_step(Optimizer::Sgd, 0.1).unwrap_err();
        assert!(err.to_string().contains("only"), "got: {err}");
    }

    #[test]
    fn duplicate_preserves_state_under_new_uid() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(2.0)).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&s, "w").unwrap();
        let y = tape.mul(w, w).unwrap();
        tape.backward(y).unwrap();
        s.collect_grads(&tape).unwrap();
        s.optimizer_step(Optimizer::adam(), 0.1).unwrap();

        let snap = s.duplicate();
        assert_ne!(snap.uid(), s.uid());
        assert_eq!(snap.value("w").unwrap().data(), s.value("w").unwrap().data());
        assert_eq!(snap.param("w").unwrap().step, 1);
        assert_eq!(snap.param("w").unwrap().m, s.param("w").unwrap().m);

        // Mutating the original leaves the snapshot alone.
        s.set_value("w", &Tensor::scalar(-7.0)).unwrap();
        assert_ne!(snap.value("w").unwrap().data(), s.value("w").unwrap().data());
    }

    #[test]
    fn clone_state_from_restores_moments_and_rejects_mismatch() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&a, "w").unwrap();
        let y = tape.scale(w, 2.0).unwrap();
        tape.backward(y).unwrap();
        a.collect_grads(&tape).unwrap();
        a.optimizer_step(Optimizer::adam(), 0.5).unwrap();

        let mut b = ParamStore::new();
        b.insert("w", Tensor::scalar(0.0)).unwrap();
        b.clone_state_from(&a).unwrap();
        assert_eq!(b.value("w").unwrap().data(), a.value("w").unwrap().data());
        assert_eq!(b.param("w").unwrap().step, 1);
        assert_eq!(b.param("w").unwrap().v, a.param("w").unwrap().v);

        let mut extra = ParamStore::new();
        extra.insert("w", Tensor::scalar(0.0)).unwrap();
        extra.insert("x", Tensor::scalar(0.0)).unwrap();
        assert!(extra.clone_state_from(&a).is_err());
    }

    #[test]
    fn copy_matching_values_resets_moments() {
        let mut src = ParamStore::new();
        src.insert("a", Tensor::scalar(9.0)).unwrap();
        let mut dst = ParamStore::new();
        dst.insert("a", Tensor::scalar(0.0)).unwrap();
        dst.insert("b", Tensor::scalar(2.0)).unwrap();
        let n = dst.copy_matching_values(&src).unwrap();
        assert_eq!(n, 1);
        assert_eq!(dst.value("a").unwrap().data(), &[9.0]);
        assert_eq!(dst.value("b").unwrap().data(), &[2.0]);
    }
}
