use serde::{Deserialize, Serialize};

use super::{Grads, MicroNet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps >= 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW settings {self:?}")))
        }
    }
}

/// AdamW with decoupled weight decay. Moments and step counts are kept per
/// tensor, so a tensor frozen for a while resumes with its own bias
/// correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub(crate) m: Vec<Vec<f64>>,
    pub(crate) v: Vec<Vec<f64>>,
    pub(crate) steps: Vec<u64>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, net: &MicroNet) -> Self {
        let zeros: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamW {
            config,
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; net.params().len()],
        }
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }

    /// One update. Tensors with `trainable = false` are skipped entirely:
    /// value, moments and step count stay bit-identical.
    pub fn step(&mut self, net: &mut MicroNet, grads: &Grads) -> Result<()> {
        if grads.0.len() != self.m.len() || grads.0.len() != net.params().len() {
            return Err(Error::invalid("gradient tensor count does not match the network"));
        }
        for (p, g) in net.params().iter().zip(&grads.0) {
            if p.value.len() != g.len() {
                return Err(Error::invalid(format!("gradient shape mismatch for {}", p.name)));
            }
        }
        let c = self.config;
        for (i, p) in net.params_mut().iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let lr = c.lr * p.lr_mult;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p.value.iter_mut().zip(&grads.0[i]).zip(m).zip(v) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= lr * c.weight_decay * *w;
                *w -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micronet::{ParamGroup, Stage};

    fn single_value_net(v: f64) -> MicroNet {
        let mut net = MicroNet::new(0);
        for p in net.params_mut() {
            p.value.iter_mut().for_each(|x| *x = v);
        }
        net
    }

    #[test]
    fn hand_evaluated_first_step() {
        let mut net = single_value_net(0.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            eps: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &net);
        let mut g = Grads::zeros_like(&net);
        g.0.iter_mut().flatten().for_each(|x| *x = 1.0);
        opt.step(&mut net, &g).unwrap();
        for p in net.params() {
            assert!(p.value.iter().all(|&x| (x + 0.1).abs() < 1e-15));
        }
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut net = single_value_net(1.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &net);
        let g = Grads::zeros_like(&net);
        opt.step(&mut net, &g).unwrap();
        assert!(net.params().iter().all(|p| p.value.iter().all(|&x| x == 1.0)));
    }

    #[test]
    fn frozen_tensors_are_bit_identical() {
        let mut net = MicroNet::new(4);
        net.set_stage_trainability(Stage::III);
        let before = net.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &net);
        let mut g = Grads::zeros_like(&net);
        g.0.iter_mut().flatten().for_each(|x| *x = 0.5);
        for _ in 0..3 {
            opt.step(&mut net, &g).unwrap();
        }
        for (a, b) in net.params().iter().zip(before.params()) {
            let frozen = matches!(a.group, ParamGroup::Stem | ParamGroup::Stage1 | ParamGroup::LaDecoder);
            assert_eq!(a.value == b.value, frozen, "{}", a.name);
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut net = MicroNet::new(0);
        let mut opt = AdamW::new(AdamWConfig::default(), &net);
        let mut g = Grads::zeros_like(&net);
        g.0[0].pop();
        assert!(opt.step(&mut net, &g).is_err());
    }
}
