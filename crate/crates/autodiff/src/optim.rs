use crate::{Gradients, ParamStore, Real, Tensor};

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are indexed like the store they were
/// created for.
#[derive(Clone, Debug)]
pub struct Adam<R> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
    pub step: u64,
}

impl<R: Real> Adam<R> {
    pub fn new(config: AdamConfig, store: &ParamStore<R>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<R>, grads: &Gradients<R>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (R::from_f64(c.beta1), R::from_f64(c.beta2));
        let (ob1, ob2) = (R::from_f64(1.0 - c.beta1), R::from_f64(1.0 - c.beta2));
        let lr_t = R::from_f64(c.lr / bc1);
        let inv_bc2 = R::from_f64(1.0 / bc2);
        let eps = R::from_f64(c.eps);
        for (id, g) in grads.params() {
            let i = id.index();
            let p = store.get_mut(id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + ob1 * gi;
                *vi = b2 * *vi + ob2 * gi * gi;
                *w -= lr_t * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }
}
