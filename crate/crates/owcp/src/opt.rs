//! Adam optimizer and the warmup-then-linear-decay learning-rate schedule
//! shared by the pre-training, GAN, and fine-tuning loops.

/// Learning-rate multiplier at `step` of `total_steps`: linear warmup over
/// the first `warmup_fraction` of steps, then linear decay toward zero.
pub fn warmup_linear(step: usize, total_steps: usize, warmup_fraction: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let warmup_steps = ((total_steps as f64 * warmup_fraction).round() as usize).max(1);
    if step < warmup_steps {
        (step + 1) as f64 / warmup_steps as f64
    } else if total_steps == warmup_steps {
        1.0
    } else {
        ((total_steps - step) as f64 / (total_steps - warmup_steps) as f64).max(0.0)
    }
}

/// Adam with bias correction.
///
/// State is keyed by position in the `(param, grad)` list handed to
/// [`Adam::step`]; callers must present tensors in a fixed order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one update with learning rate `lr` to every `(param, grad)`
    /// pair. Moment buffers are allocated on first use.
    pub fn step(&mut self, lr: f64, pairs: &mut [(&mut [f64], &[f64])]) {
        if self.m.is_empty() {
            for (p, _) in pairs.iter() {
                self.m.push(vec![0.0; p.len()]);
                self.v.push(vec![0.0; p.len()]);
            }
        }
        assert_eq!(self.m.len(), pairs.len(), "tensor count changed between steps");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, (param, grad)) in pairs.iter_mut().enumerate() {
            assert_eq!(param.len(), grad.len());
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
