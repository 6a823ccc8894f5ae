//! Adam with bias correction.

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::model::Seq2SeqParams;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Seq2SeqParams,
    pub v: Seq2SeqParams,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &Seq2SeqParams) -> Self {
        Adam {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One update. Fails without touching anything if a gradient entry is
    /// not finite.
    pub fn step(&mut self, params: &mut Seq2SeqParams, grads: &Seq2SeqParams) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::NonFinite {
                what: "gradient",
                step: self.step + 1,
            });
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let ps = params.arrays_mut();
        let gs = grads.arrays();
        let ms = self.m.arrays_mut();
        let vs = self.v.arrays_mut();
        for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            update(p, g, m, v, lr, beta1, beta2, eps, c1, c2);
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn update(
    p: &mut Array2<f64>,
    g: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    c1: f64,
    c2: f64,
) {
    Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    });
}
