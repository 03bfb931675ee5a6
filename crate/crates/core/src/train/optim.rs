//! Adam with decoupled weight decay and a warmup + linear-decay schedule.

use crate::encoder::Mat;
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Learning-rate multiplier for 1-based `step` of `total`: linear ramp over
/// the first `ceil(warmup_ratio * total)` steps, then linear decay that
/// would reach zero one step past the end.
pub fn schedule(step: usize, total: usize, warmup_ratio: f64) -> f64 {
    let warmup = (warmup_ratio * total as f64).ceil() as usize;
    if step <= warmup {
        step as f64 / warmup.max(1) as f64
    } else {
        let rest = (total + 1 - warmup) as f64;
        ((total + 1).saturating_sub(step)) as f64 / rest
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, model: &Model) -> Self {
        let zeros: Vec<Mat> = model
            .named_tensors()
            .into_iter()
            .map(|(_, t)| Mat::zeros(t.raw_dim()))
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update with learning rate `config.lr * lr_scale`.
    pub fn step(&mut self, model: &mut Model, grads: &Model, lr_scale: f64) {
        self.t += 1;
        let c = self.config;
        let lr = c.lr * lr_scale;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let g_all: Vec<&Mat> = grads.named_tensors().into_iter().map(|(_, t)| t).collect();
        for (((p, g), m), v) in model
            .tensors_mut()
            .into_iter()
            .zip(g_all)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *p -= lr * (update + c.weight_decay * *p);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        assert_eq!(schedule(1, 100, 0.1), 0.1);
        assert_eq!(schedule(10, 100, 0.1), 1.0);
        assert!(schedule(11, 100, 0.1) < 1.0);
        assert!(schedule(100, 100, 0.1) > 0.0);
        assert_eq!(schedule(1, 1, 0.1), 1.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = crate::EncoderConfig {
            hidden_size: 4,
            heads: 1,
            layers_ssb: 1,
            layers_gle: 0,
            layers_lde: 0,
            ffn_size: 4,
            max_len: 4,
            vocab_size: 5,
            seed: 1,
        };
        let mut model = Model::init(cfg).unwrap();
        let before = model.clone();
        let mut grads = model.zeros_like();
        grads.heads.dense_b[[0, 0]] = 3.0;
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &model,
        );
        opt.step(&mut model, &grads, 1.0);
        let moved = before.heads.dense_b[[0, 0]] - model.heads.dense_b[[0, 0]];
        assert!((moved - 1e-3).abs() < 1e-9);
        assert_eq!(model.heads.dense_b[[0, 1]], before.heads.dense_b[[0, 1]]);
    }
}
