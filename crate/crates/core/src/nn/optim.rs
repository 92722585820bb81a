use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::params::{Gradients, ParamId, ParamStore};
use crate::nn::tensor::DenseMatrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators for every tensor of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    m: Vec<DenseMatrix<S>>,
    v: Vec<DenseMatrix<S>>,
    t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(store: &ParamStore<S>, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| DenseMatrix::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, id: ParamId) -> &DenseMatrix<S> {
        &self.m[id.0]
    }

    pub fn second_moment(&self, id: ParamId) -> &DenseMatrix<S> {
        &self.v[id.0]
    }
}

/// One bias-corrected Adam update of every parameter for which `trainable` holds.
pub fn adam_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &Gradients<S>,
    state: &mut AdamState<S>,
    lr: f64,
    trainable: impl Fn(ParamId) -> bool,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(crate::error::shape_err("adam_step", params.len(), grads.len()));
    }
    state.t += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.t as i32;
    let step = S::of(lr / (1.0 - beta1.powi(t)));
    let v_corr = S::of(1.0 / (1.0 - beta2.powi(t)));
    let (b1, b2, eps) = (S::of(beta1), S::of(beta2), S::of(eps));
    let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);

    for id in params.ids().collect::<Vec<_>>() {
        if !trainable(id) {
            continue;
        }
        let g = grads.get(id).as_slice();
        let m = state.m[id.0].as_mut_slice();
        let v = state.v[id.0].as_mut_slice();
        let p = params.get_mut(id).as_mut_slice();
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + one_b1 * gi;
            v[i] = b2 * v[i] + one_b2 * gi * gi;
            p[i] -= step * m[i] / ((v[i] * v_corr).sqrt() + eps);
        }
    }
    Ok(())
}

/// Plain gradient descent `theta -= lr * g` on trainable parameters.
pub fn sgd_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &Gradients<S>,
    lr: f64,
    trainable: impl Fn(ParamId) -> bool,
) {
    let lr = S::of(lr);
    for id in params.ids().collect::<Vec<_>>() {
        if !trainable(id) {
            continue;
        }
        let g = grads.get(id).as_slice();
        for (p, gi) in params.get_mut(id).as_mut_slice().iter_mut().zip(g) {
            *p -= lr * *gi;
        }
    }
}

/// Adds the gradient of `(lambda / 2) * ||theta||^2`, i.e. `lambda * theta`.
pub fn l2_grad<S: Scalar>(
    params: &ParamStore<S>,
    grads: &mut Gradients<S>,
    lambda: f64,
    trainable: impl Fn(ParamId) -> bool,
) {
    if lambda == 0.0 {
        return;
    }
    let lambda = S::of(lambda);
    for id in params.ids() {
        if !trainable(id) {
            continue;
        }
        for (g, p) in grads.get_mut(id).as_mut_slice().iter_mut().zip(params.get(id).as_slice()) {
            *g += lambda * *p;
        }
    }
}

/// `(lambda / 2) * ||theta||^2` over trainable parameters.
pub fn l2_penalty<S: Scalar>(params: &ParamStore<S>, lambda: f64, trainable: impl Fn(ParamId) -> bool) -> S {
    let mut acc = S::zero();
    for (id, p) in params.iter() {
        if trainable(id) {
            acc += p.value.as_slice().iter().map(|v| *v * *v).sum::<S>();
        }
    }
    S::of(lambda / 2.0) * acc
}
