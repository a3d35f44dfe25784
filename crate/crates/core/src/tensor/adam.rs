//! Adam optimizer with bias correction.

use super::{Parameter, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state aligned with a fixed parameter list. A parameter with no
/// gradient (not touched by the last backward pass) is treated as having a
/// zero gradient, so its moments decay but an all-zero history leaves the
/// value untouched.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: Vec<Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[Parameter]) -> Adam {
        let moments = params
            .iter()
            .map(|p| Moments {
                m: vec![0.0; p.tensor.len()],
                v: vec![0.0; p.tensor.len()],
            })
            .collect();
        Adam {
            cfg,
            step: 0,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters; gradients are consumed as-is and the
    /// caller is responsible for zeroing them afterwards.
    pub fn step(&mut self, params: &[Parameter]) {
        assert_eq!(
            params.len(),
            self.moments.len(),
            "optimizer built for {} parameters, got {}",
            self.moments.len(),
            params.len()
        );
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - self.cfg.beta1.powf(t);
        let bias2 = 1.0 - self.cfg.beta2.powf(t);
        for (param, state) in params.iter().zip(self.moments.iter_mut()) {
            let mut grad = param
                .tensor
                .grad()
                .unwrap_or_else(|| vec![0.0; param.tensor.len()]);
            zero_frozen_rows(&param.tensor, &param.frozen_rows, &mut grad);
            let mut data = param.tensor.to_vec();
            for i in 0..data.len() {
                let g = grad[i];
                state.m[i] = self.cfg.beta1 * state.m[i] + (1.0 - self.cfg.beta1) * g;
                state.v[i] = self.cfg.beta2 * state.v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = state.m[i] / bias1;
                let v_hat = state.v[i] / bias2;
                data[i] -= self.cfg.learning_rate * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
            param.tensor.set_data(&data);
        }
    }
}

fn zero_frozen_rows(tensor: &Tensor, rows: &[usize], grad: &mut [f64]) {
    if rows.is_empty() {
        return;
    }
    let cols = *tensor.shape().last().expect("frozen rows on scalar");
    for &r in rows {
        grad[r * cols..(r + 1) * cols].fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: Vec<f64>) -> Parameter {
        let n = values.len();
        Parameter::new("p", Tensor::leaf(&[n], values))
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let p = param(vec![0.5, -0.25]);
        let mut opt = Adam::new(AdamConfig::default(), std::slice::from_ref(&p));
        opt.step(std::slice::from_ref(&p));
        assert_eq!(p.tensor.to_vec(), vec![0.5, -0.25]);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // With bias correction, the first update for g = 1 is lr / (1 + eps).
        let p = param(vec![1.0]);
        p.tensor.accumulate_grad(&[1.0]);
        let mut opt = Adam::new(AdamConfig::default(), std::slice::from_ref(&p));
        opt.step(std::slice::from_ref(&p));
        let moved = 1.0 - p.tensor.item();
        assert!((moved - 1e-4).abs() < 1e-9, "moved {}", moved);
    }

    #[test]
    fn deterministic_across_identical_runs() {
        let run = || {
            let p = param(vec![0.3, 0.7, -0.2]);
            let mut opt = Adam::new(AdamConfig::default(), std::slice::from_ref(&p));
            for step in 0..25 {
                p.tensor.zero_grad();
                p.tensor.accumulate_grad(&[0.1 * step as f64, -0.05, 0.3]);
                opt.step(std::slice::from_ref(&p));
            }
            p.tensor.to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_rows_never_move() {
        let p = Parameter::new("emb", Tensor::leaf(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]))
            .with_frozen_rows(vec![0]);
        p.tensor.accumulate_grad(&[5.0, 5.0, 5.0, 5.0]);
        let mut opt = Adam::new(AdamConfig::default(), std::slice::from_ref(&p));
        opt.step(std::slice::from_ref(&p));
        let data = p.tensor.to_vec();
        assert_eq!(&data[0..2], &[0.0, 0.0]);
        assert!(data[2] < 1.0 && data[3] < 1.0);
    }
}
