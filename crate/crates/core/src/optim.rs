//! AdamW with decoupled, multiplicative weight decay.

use serde::{Deserialize, Serialize};

use crate::model::{Grads, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// One update of a flat parameter block. `step` is the 1-based count
    /// used for bias correction.
    pub fn update(&self, lr: f64, param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], step: u64) {
        let decay = 1.0 - lr * self.weight_decay;
        let c1 = 1.0 - self.beta1.powf(step as f64);
        let c2 = 1.0 - self.beta2.powf(step as f64);
        for i in 0..param.len() {
            param[i] *= decay;
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            param[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// First and second moments for `W_E` and `W_U`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub m_e: Vec<f64>,
    pub v_e: Vec<f64>,
    pub m_u: Vec<f64>,
    pub v_u: Vec<f64>,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &ModelParams) -> Self {
        let ne = params.w_e.data().len();
        let nu = params.w_u.data().len();
        Self {
            m_e: vec![0.0; ne],
            v_e: vec![0.0; ne],
            m_u: vec![0.0; nu],
            v_u: vec![0.0; nu],
            step: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        [&self.m_e, &self.v_e, &self.m_u, &self.v_u]
            .iter()
            .all(|b| b.iter().all(|x| x.is_finite()))
    }
}

pub fn adamw_step(params: &mut ModelParams, grads: &Grads, opt: &mut OptState, cfg: &AdamW) {
    adamw_step_with_lr(params, grads, opt, cfg, cfg.lr);
}

pub fn adamw_step_with_lr(params: &mut ModelParams, grads: &Grads, opt: &mut OptState, cfg: &AdamW, lr: f64) {
    opt.step += 1;
    cfg.update(lr, params.w_e.data_mut(), grads.w_e.data(), &mut opt.m_e, &mut opt.v_e, opt.step);
    cfg.update(lr, params.w_u.data_mut(), grads.w_u.data(), &mut opt.m_u, &mut opt.v_u, opt.step);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Activation, InitScale};

    #[test]
    fn decay_only_step() {
        let mut p = init_params(3, 4, InitScale::Exponent(0.0), Activation::Identity, 1).unwrap();
        let before = p.clone();
        let g = Grads::zeros_like(&p);
        let mut st = OptState::new(&p);
        let cfg = AdamW::new(0.1, 0.01);
        adamw_step(&mut p, &g, &mut st, &cfg);
        for (a, b) in p.w_e.data().iter().zip(before.w_e.data()) {
            assert_eq!(*a, b * (1.0 - 0.1 * 0.01));
        }
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut x = vec![0.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        let cfg = AdamW::new(1e-3, 0.0);
        let mut last = 0.0;
        for t in 1..=5000 {
            let before = x[0];
            cfg.update(cfg.lr, &mut x, &[0.37], &mut m, &mut v, t);
            last = before - x[0];
        }
        assert!((last - 1e-3).abs() < 1e-9, "{last}");
    }

    #[test]
    fn first_step_is_sign_scaled() {
        let mut x = vec![1.0, 1.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        let cfg = AdamW::new(0.01, 0.0);
        cfg.update(cfg.lr, &mut x, &[5.0, -0.2], &mut m, &mut v, 1);
        assert!((x[0] - 0.99).abs() < 1e-8);
        assert!((x[1] - 1.01).abs() < 1e-8);
    }
}
