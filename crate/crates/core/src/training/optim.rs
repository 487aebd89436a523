use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Adam without weight decay, with its moment estimates exposed for
/// checkpointing.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        let params: Vec<(String, Var)> = store.named_vars().map(|(k, v)| (k.clone(), v.clone())).collect();
        let m = params.iter().map(|(_, v)| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self { lr, beta1, beta2, eps: 1e-8, step: 0, params, m, v })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Gradients for every parameter, `None` where the graph did not reach it.
    pub fn gradients(&self, grads: &GradStore) -> Vec<Option<Tensor>> {
        self.params.iter().map(|(_, v)| grads.get(v.as_tensor()).map(Tensor::detach)).collect()
    }

    pub fn step(&mut self, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Validation(format!("{} gradients for {} parameters", grads.len(), self.params.len())));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let g = g.detach();
            let m = self.m[i].affine(self.beta1, 0.0)?.add(&g.affine(1.0 - self.beta1, 0.0)?)?;
            let v = self.v[i].affine(self.beta2, 0.0)?.add(&g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?;
            let update = m.affine(1.0 / bc1, 0.0)?.div(&v.affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, self.eps)?)?;
            let var = &self.params[i].1;
            var.set(&var.as_tensor().sub(&update.affine(self.lr, 0.0)?)?)?;
            self.m[i] = m.detach();
            self.v[i] = v.detach();
        }
        Ok(())
    }

    pub fn state(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.insert(format!("{prefix}m.{name}"), self.m[i].clone());
            out.insert(format!("{prefix}v.{name}"), self.v[i].clone());
        }
        out
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, prefix: &str, step: u64) -> Result<()> {
        for (i, (name, var)) in self.params.iter().enumerate() {
            for (slot, kind) in [(&mut self.m[i], "m"), (&mut self.v[i], "v")] {
                let key = format!("{prefix}{kind}.{name}");
                let t = tensors.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key}")))?;
                *slot = t.to_dtype(var.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    }
    let norm = sq.sqrt();
    if norm > max_norm && max_norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g = g.affine(scale, 0.0)?;
        }
    }
    Ok(norm)
}
