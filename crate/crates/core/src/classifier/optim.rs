use ndarray::Zip;

use super::network::Network;
use super::nn::{lit, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// Adam with bias correction; moment buffers mirror the network layout.
pub struct Adam<F> {
    config: AdamConfig,
    m: Network<F>,
    v: Network<F>,
    t: i32,
}

impl<F: Real> Adam<F> {
    pub fn new(net: &Network<F>, config: AdamConfig) -> Self {
        Self {
            config,
            m: net.zeros_like(),
            v: net.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut Network<F>, grad: &Network<F>, lr: f64) {
        self.t += 1;
        let b1 = lit::<F>(self.config.beta1);
        let b2 = lit::<F>(self.config.beta2);
        let one = F::one();
        let c1 = one - b1.powi(self.t);
        let c2 = one - b2.powi(self.t);
        let lr = lit::<F>(lr);
        let eps = lit::<F>(self.config.eps);
        let params = net.params_mut();
        let grads = grad.params();
        let ms = self.m.params_mut();
        let vs = self.v.params_mut();
        for (((mut p, g), mut m), mut v) in params
            .into_iter()
            .map(|x| x.1)
            .zip(grads.into_iter().map(|x| x.1))
            .zip(ms.into_iter().map(|x| x.1))
            .zip(vs.into_iter().map(|x| x.1))
        {
            Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm<F: Real>(grad: &mut Network<F>, max_norm: f64) -> f64 {
    let total: f64 = grad
        .params()
        .iter()
        .flat_map(|(_, p)| p.iter().map(|v| v.to_f64().unwrap_or(0.0).powi(2)))
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = lit::<F>(max_norm / total);
        for (_, mut p) in grad.params_mut() {
            p.mapv_inplace(|v| v * s);
        }
    }
    total
}
