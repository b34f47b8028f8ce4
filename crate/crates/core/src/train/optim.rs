//! AdamW with decoupled weight decay, global-norm clipping and a linear
//! warmup followed by cosine decay.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::nn::{round_f32, Parameters};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub lr_finetune: f64,
    pub warmup_steps: u64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Warmup length used for full-size training runs.
pub const REFERENCE_WARMUP_STEPS: u64 = 3000;

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_stage1: 2e-4,
            lr_stage2: 2e-4,
            lr_finetune: 2e-5,
            warmup_steps: 100,
            grad_clip: 1.0,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.lr_stage1, self.lr_stage2, self.lr_finetune].iter().any(|lr| !(*lr > 0.0)) {
            return Err(invalid("learning rates must be positive"));
        }
        if !(self.grad_clip > 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(invalid("grad_clip and eps must be positive, weight_decay nonnegative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("moment decay rates must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup: u64,
    pub total: u64,
}

/// Linear ramp from 0 to `base_lr` over `warmup` steps, then cosine decay
/// reaching 0 at `total`.
pub fn lr_at(step: u64, s: &Schedule) -> f64 {
    if step < s.warmup {
        return s.base_lr * step as f64 / s.warmup as f64;
    }
    if s.total <= s.warmup {
        return if step == s.warmup { s.base_lr } else { 0.0 };
    }
    let progress = ((step - s.warmup) as f64 / (s.total - s.warmup) as f64).min(1.0);
    s.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Per-parameter gradients in the model's visit order.
pub type ParamGrads = Vec<Vec<f64>>;

pub fn global_norm(grads: &ParamGrads) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales so the global norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// First and second moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Moment estimates are kept single-precision representable, like the
/// parameters, so a saved optimizer resumes exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub step: u64,
    pub moments: Vec<Moments>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn for_model(model: &impl Parameters) -> Self {
        let mut moments = Vec::new();
        model.visit(&mut |p| {
            moments.push(Moments {
                name: p.name.clone(),
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
            })
        });
        Self { step: 0, moments }
    }

    pub fn update(&mut self, model: &mut impl Parameters, grads: &ParamGrads, lr: f64, cfg: &OptimConfig) -> Result<()> {
        if self.moments.is_empty() {
            *self = Self::for_model(model);
        }
        if grads.len() != self.moments.len() {
            return Err(shape(format!("{} gradients for {} parameters", grads.len(), self.moments.len())));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let mut i = 0;
        let mut err = None;
        let moments = &mut self.moments;
        model.visit_mut(&mut |p| {
            let mo = &mut moments[i];
            let g = &grads[i];
            i += 1;
            if err.is_some() {
                return;
            }
            if mo.name != p.name || g.len() != p.len() || mo.m.len() != p.len() {
                err = Some(shape(format!("optimizer state does not match parameter {}", p.name)));
                return;
            }
            let decay = if p.decay { cfg.weight_decay } else { 0.0 };
            for j in 0..p.len() {
                let m = round_f32(cfg.beta1 * mo.m[j] + (1.0 - cfg.beta1) * g[j]);
                let v = round_f32(cfg.beta2 * mo.v[j] + (1.0 - cfg.beta2) * g[j] * g[j]);
                mo.m[j] = m;
                mo.v[j] = v;
                let adam = (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
                let w = p.data[j];
                p.data[j] = round_f32(w - lr * (adam + decay * w));
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerNorm, Linear, Param};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_landmarks() {
        let s = Schedule {
            base_lr: 2e-4,
            warmup: 100,
            total: 1100,
        };
        assert_eq!(lr_at(0, &s), 0.0);
        assert_eq!(lr_at(100, &s), 2e-4);
        assert!((lr_at(600, &s) - 1e-4).abs() < 1e-18);
        assert!(lr_at(1100, &s).abs() < 1e-20);
        assert!(lr_at(5000, &s).abs() < 1e-20);
        assert!((lr_at(50, &s) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![vec![3.0, 0.0], vec![4.0]];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![vec![0.1]]);
    }

    struct Toy {
        lin: Linear,
        norm: LayerNorm,
    }

    impl Parameters for Toy {
        fn visit(&self, f: &mut dyn FnMut(&Param)) {
            self.lin.visit(f);
            self.norm.visit(f);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            self.lin.visit_mut(f);
            self.norm.visit_mut(f);
        }
    }

    #[test]
    fn zero_gradient_step_only_decays_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut toy = Toy {
            lin: Linear::new("lin", 3, 2, true, &mut rng),
            norm: LayerNorm::new("norm", 2),
        };
        toy.lin.bias.as_mut().unwrap().data = vec![0.5, -0.25];
        let before_w = toy.lin.weight.data.clone();
        let before_b = toy.lin.bias.clone().unwrap().data;
        let before_gain = toy.norm.gain.data.clone();
        let grads: ParamGrads = vec![vec![0.0; 6], vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]];
        let mut opt = AdamW::new();
        let cfg = OptimConfig::default();
        opt.update(&mut toy, &grads, 0.1, &cfg).unwrap();
        for (a, b) in toy.lin.weight.data.iter().zip(&before_w) {
            assert_eq!(*a, round_f32(b - 0.1 * 0.05 * b));
        }
        assert_eq!(toy.lin.bias.unwrap().data, before_b);
        assert_eq!(toy.norm.gain.data, before_gain);
    }

    #[test]
    fn decay_flags_cover_only_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let toy = Toy {
            lin: Linear::new("lin", 3, 2, true, &mut rng),
            norm: LayerNorm::new("norm", 2),
        };
        toy.visit(&mut |p| assert_eq!(p.decay, p.name.ends_with(".weight"), "{}", p.name));
    }
}
