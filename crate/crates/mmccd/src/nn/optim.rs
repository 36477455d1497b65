use serde::{Deserialize, Serialize};

use super::{Param, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// Adam with moment buffers keyed by visitation order.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Applies one update to every parameter yielded by `visit`, then clears
    /// the gradients. Returns the pre-clip global gradient norm.
    pub fn step<T: Real>(&mut self, visit: &mut dyn FnMut(&mut dyn FnMut(&str, &mut Param<T>))) -> f64 {
        let mut sq = 0.0;
        visit(&mut |_, p| {
            for g in &p.grad {
                let g = g.as_f64();
                sq += g * g;
            }
        });
        let norm = sq.sqrt();
        let scale = match self.config.clip_norm {
            Some(c) if norm > c && norm > 0.0 => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let (first, second) = (&mut self.first, &mut self.second);
        let mut index = 0;
        visit(&mut |_, p| {
            if first.len() <= index {
                first.push(vec![0.0; p.len()]);
                second.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut first[index], &mut second[index]);
            for i in 0..p.len() {
                let g = p.grad[i].as_f64() * scale;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let update = c.learning_rate * (m[i] / bias1) / ((v[i] / bias2).sqrt() + c.epsilon);
                p.value[i] -= T::from_f64_lossy(update);
            }
            p.zero_grad();
            index += 1;
        });
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut p = Param::<f64>::zeros(2);
        p.value = vec![3.0, -2.0];
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.05,
            clip_norm: None,
            ..AdamConfig::default()
        });
        for _ in 0..2000 {
            for i in 0..2 {
                p.grad[i] = 2.0 * (p.value[i] - 1.0);
            }
            adam.step::<f64>(&mut |f| f("p", &mut p));
        }
        assert!((p.value[0] - 1.0).abs() < 1e-3 && (p.value[1] - 1.0).abs() < 1e-3);
        assert_eq!(adam.steps_taken(), 2000);
    }

    #[test]
    fn first_step_has_learning_rate_magnitude() {
        let mut p = Param::<f32>::zeros(1);
        p.grad[0] = 250.0;
        let mut adam = Adam::new(AdamConfig::default());
        let norm = adam.step::<f32>(&mut |f| f("p", &mut p));
        assert_eq!(norm, 250.0);
        assert!((p.value[0] + 1e-4).abs() < 1e-7);
        assert_eq!(p.grad[0], 0.0);
    }
}
