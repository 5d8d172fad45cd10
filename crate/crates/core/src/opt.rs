//! Adam with a cosine-decaying learning rate schedule.

use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Cosine decay from the base learning rate to zero over `total_steps`.
#[derive(Debug, Clone)]
pub struct CosineSchedule {
    base_lr: f64,
    total_steps: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, total_steps: usize) -> CosineSchedule {
        CosineSchedule { base_lr, total_steps: total_steps.max(1) }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let t = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

struct Slot {
    param: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam over an explicit parameter list. Moment buffers exist only for
/// the parameters handed in; a parameter with no accumulated gradient is
/// treated as having gradient zero.
pub struct Adam {
    slots: Vec<Slot>,
    step_count: usize,
    pub base_lr: f64,
}

impl Adam {
    pub fn new(params: &[Tensor], base_lr: f64) -> Adam {
        let slots = params
            .iter()
            .map(|p| Slot { param: p.clone(), m: vec![0.0; p.numel()], v: vec![0.0; p.numel()] })
            .collect();
        Adam { slots, step_count: 0, base_lr }
    }

    /// One update using the accumulated gradients, then clears them.
    pub fn step(&mut self, lr: f64) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - BETA1.powf(t);
        let bc2 = 1.0 - BETA2.powf(t);
        for slot in &mut self.slots {
            let grad = slot.param.grad().unwrap_or_else(|| vec![0.0; slot.param.numel()]);
            let m = &mut slot.m;
            let v = &mut slot.v;
            slot.param.update_data(|data| {
                for i in 0..data.len() {
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * grad[i];
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * grad[i] * grad[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    data[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                }
            });
            slot.param.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let s = CosineSchedule::new(1e-3, 100);
        assert!((s.lr_at(0) - 1e-3).abs() < 1e-15);
        assert!(s.lr_at(100) < 1e-12);
        assert!((s.lr_at(50) - 5e-4).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_step_changes_nothing_bitwise() {
        let p = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]);
        p.set_requires_grad(true);
        p.accum_grad(&[0.5, 0.5, 0.5]);
        let before = p.data();
        let mut adam = Adam::new(&[p.clone()], 1e-3);
        adam.step(0.0);
        let after = p.data();
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zero_grad_zero_moments_step_is_identity() {
        let p = Tensor::new(vec![2], vec![0.25, -0.75]);
        p.set_requires_grad(true);
        let before = p.data();
        let mut adam = Adam::new(&[p.clone()], 1e-3);
        adam.step(1e-3);
        for (a, b) in before.iter().zip(&p.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn adam_descends_on_quadratic() {
        let p = Tensor::new(vec![1], vec![5.0]);
        p.set_requires_grad(true);
        let mut adam = Adam::new(&[p.clone()], 0.1);
        for _ in 0..500 {
            let x = p.item(0);
            p.zero_grad();
            p.accum_grad(&[2.0 * x]);
            adam.step(0.1);
        }
        assert!(p.item(0).abs() < 1e-2);
    }
}
