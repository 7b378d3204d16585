use crate::error::Result;
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are created on the first step.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First and second moment buffers, in parameter order (empty before the
    /// first step).
    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Restore state saved from [`Adam::moments`] and [`Adam::steps_taken`].
    pub fn restore(&mut self, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }

    /// Apply one update from the store's accumulated gradients. Fails without
    /// touching any parameter if a gradient is not finite.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        store.check_grads_finite()?;
        if self.m.len() != store.len() {
            self.m = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for id in store.ids().collect::<Vec<_>>() {
            let g = store.grad(id).data().to_vec();
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let p = store.value_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let total: f64 = store
        .ids()
        .map(|id| store.grad(id).data().iter().map(|&g| g.as_f64().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let s = T::lit(max_norm / total);
        for id in store.ids().collect::<Vec<_>>() {
            store.grad_mut(id).data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    total
}
