//! Adam with decoupled weight decay and a linearly decaying learning rate.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::checkpoint::Container;
use crate::model::tensor::{lit, Real};
use crate::model::{is_decay_eligible, Parameters};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub total_steps: u64,
}

impl AdamConfig {
    /// `base · max(0, 1 − step / total_steps)`
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return 0.0;
        }
        self.lr * (1.0 - step as f64 / self.total_steps as f64).max(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Parameters<T>,
    pub v: Parameters<T>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &Parameters<T>) -> Self {
        AdamState { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }

    /// Applies one update to every tensor accepted by `trainable` and returns
    /// the learning rate used.
    pub fn step(
        &mut self,
        params: &mut Parameters<T>,
        grads: &Parameters<T>,
        cfg: &AdamConfig,
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<f64> {
        let lr = cfg.lr_at(self.step);
        let t = (self.step + 1) as i32;
        let (b1, b2) = (lit::<T>(cfg.beta1), lit::<T>(cfg.beta2));
        let c1 = T::one() - lit::<T>(cfg.beta1.powi(t));
        let c2 = T::one() - lit::<T>(cfg.beta2.powi(t));
        let (lr_t, eps) = (lit::<T>(lr), lit::<T>(cfg.eps));
        let decay = T::one() - lit::<T>(lr * cfg.weight_decay);
        let g_named = grads.named();
        let mut m_all = self.m.named_mut();
        let mut v_all = self.v.named_mut();
        let mut err = None;
        for (k, (name, w)) in params.named_mut().into_iter().enumerate() {
            if !trainable(&name) {
                continue;
            }
            let (m, v) = (&mut *m_all[k].1, &mut *v_all[k].1);
            let g = g_named[k].1;
            let eligible = is_decay_eligible(&name) && cfg.weight_decay > 0.0;
            for i in 0..w.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (T::one() - b1) * gi;
                v.data[i] = b2 * v.data[i] + (T::one() - b2) * gi * gi;
                let update = lr_t * (m.data[i] / c1) / ((v.data[i] / c2).sqrt() + eps);
                let mut next = w.data[i];
                if eligible {
                    next *= decay;
                }
                next -= update;
                if !next.is_finite() {
                    err = Some(Error::NonFiniteUpdate(name.clone()));
                    break;
                }
                w.data[i] = next;
            }
            if err.is_some() {
                break;
            }
        }
        if let Some(e) = err {
            return Err(e);
        }
        self.step += 1;
        Ok(lr)
    }
}

impl AdamState<f32> {
    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.set("optimizer", "adamw");
        c.set("step", self.step);
        self.m.visit(&mut |n, m| c.push_f32(format!("adam.m.{n}"), m));
        self.v.visit(&mut |n, v| c.push_f32(format!("adam.v.{n}"), v));
        c
    }

    /// Restores moments for a parameter set with the same structure.
    pub fn from_container(c: &Container, params: &Parameters<f32>) -> Result<Self> {
        let mut state = AdamState::new(params);
        state.step = c.parse("step")?;
        for (prefix, target) in [("adam.m.", &mut state.m), ("adam.v.", &mut state.v)] {
            let mut err = None;
            target.visit_mut(&mut |n, m| {
                if err.is_some() {
                    return;
                }
                match c.f32_mat(&format!("{prefix}{n}")) {
                    Ok(src) if src.shape() == m.shape() => *m = src,
                    Ok(src) => err = Some(Error::ShapeMismatch { name: n, expected: m.shape(), found: src.shape() }),
                    Err(e) => err = Some(e),
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path, params: &Parameters<f32>) -> Result<Self> {
        AdamState::from_container(&Container::load(path)?, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;

    fn cfg(wd: f64) -> AdamConfig {
        AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: wd, total_steps: 10 }
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p: Parameters<f64> = Parameters::init(EncoderConfig::tiny(12), 0).unwrap();
        let before = p.clone();
        let g = p.zeros_like();
        let mut s = AdamState::new(&p);
        s.step(&mut p, &g, &cfg(0.0), &|_| true).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p: Parameters<f64> = Parameters::init(EncoderConfig::tiny(12), 0).unwrap();
        let mut g = p.zeros_like();
        g.mlm.bias.data[0] = 0.5;
        let w0 = p.mlm.bias.data[0];
        let mut s = AdamState::new(&p);
        s.step(&mut p, &g, &cfg(0.0), &|_| true).unwrap();
        // m = 0.05, v = 0.00025; bias-corrected ratio is g/|g| = 1.
        assert!((s.m.mlm.bias.data[0] - 0.05).abs() < 1e-15);
        assert!((s.v.mlm.bias.data[0] - 0.00025).abs() < 1e-15);
        let expected = w0 - 0.1 * 0.5 / (0.25f64.sqrt() + 1e-8);
        assert!((p.mlm.bias.data[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn schedule_reaches_zero() {
        let c = cfg(0.0);
        let lrs: Vec<f64> = (0..=12).map(|s| c.lr_at(s)).collect();
        assert!(lrs.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(c.lr_at(10), 0.0);
        assert_eq!(c.lr_at(12), 0.0);
    }

    #[test]
    fn past_horizon_nothing_moves() {
        let mut p: Parameters<f64> = Parameters::init(EncoderConfig::tiny(12), 0).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.mlm.weight.data.iter_mut().for_each(|x| *x = 1.0);
        let mut s = AdamState::new(&p);
        s.step = 10;
        s.step(&mut p, &g, &cfg(0.01), &|_| true).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn state_round_trip() {
        let mut p: Parameters<f32> = Parameters::init(EncoderConfig::tiny(12), 0).unwrap();
        let mut g = p.zeros_like();
        g.mlm.weight.data.iter_mut().enumerate().for_each(|(i, x)| *x = i as f32 * 0.01);
        let mut s = AdamState::new(&p);
        s.step(&mut p, &g, &cfg(0.01), &|_| true).unwrap();
        let c = Container::from_bytes(&s.to_container().to_bytes()).unwrap();
        let mut r = AdamState::from_container(&c, &p).unwrap();
        assert_eq!(r, s);
        let mut p2 = p.clone();
        s.step(&mut p, &g, &cfg(0.01), &|_| true).unwrap();
        r.step(&mut p2, &g, &cfg(0.01), &|_| true).unwrap();
        assert_eq!(p, p2);
    }
}
