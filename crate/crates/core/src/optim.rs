//! Adaptive-moment optimizer over a parameter store.

use crate::model::ParamStore;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// per-parameter update count, so groups updated on alternate steps get
    /// their own bias correction
    t: Vec<u64>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let sizes: Vec<usize> = (0..params.len()).map(|i| params.value(i).len()).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: vec![0; sizes.len()],
        }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) {
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let mut value = params.value(i).as_ref().clone();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, x) in value.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *x -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            params.set_index(i, value);
        }
    }
}

/// Rescales gradients in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
    norm
}
