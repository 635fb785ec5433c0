use super::param::{Param, ParamSet};
use super::tensor::Tensor;
use crate::error::Result;

/// Adam with global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            step: 0,
            m: params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
            v: params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &mut ParamSet) {
        let norm = params.grad_norm();
        let clip = if norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = p.grad.data();
            let w = p.value.data_mut();
            for j in 0..w.len() {
                let gj = g[j] * clip;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                w[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        params.zero_grads();
    }

    /// Moments and step counter as a parameter list, for resumable runs.
    pub fn state(&self, params: &ParamSet) -> ParamSet {
        let mut out = ParamSet::new();
        out.insert(Param::new("adam.step", Tensor::scalar(self.step as f64)))
            .expect("fresh set");
        for (i, p) in params.iter().enumerate() {
            out.insert(Param::new(format!("adam.m.{}", p.name), self.m[i].clone()))
                .expect("unique");
            out.insert(Param::new(format!("adam.v.{}", p.name), self.v[i].clone()))
                .expect("unique");
        }
        out
    }

    pub fn restore(params: &ParamSet, state: &ParamSet, lr: f64) -> Result<Self> {
        let mut opt = Self::new(params, lr);
        let get = |n: &str| {
            state.by_name(n).map(|p| p.value.clone()).ok_or_else(|| {
                crate::error::Error::Checkpoint(format!("optimizer state lacks `{n}`"))
            })
        };
        opt.step = get("adam.step")?.item() as u64;
        for (i, p) in params.iter().enumerate() {
            opt.m[i] = get(&format!("adam.m.{}", p.name))?;
            opt.v[i] = get(&format!("adam.v.{}", p.name))?;
        }
        Ok(opt)
    }
}
