//! Adam optimizer with L2-style weight decay (decay folded into the
//! gradient, matching the reference torch.optim.Adam semantics).

use super::tensor::Tensor;
use super::Param;
use std::collections::HashMap;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    state: HashMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            state: HashMap::new(),
        }
    }

    /// Advance the shared step counter. Call once per optimizer step, before
    /// updating the parameters of that step.
    pub fn next_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, p: &mut Param) {
        assert!(self.step > 0, "call next_step() before update()");
        let (m, v) = self
            .state
            .entry(p.name.clone())
            .or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let md = m.data_mut();
        let vd = v.data_mut();
        let pv = p.value.data_mut();
        let pg = p.grad.data();
        for i in 0..pv.len() {
            let g = pg[i] + self.weight_decay * pv[i];
            md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g;
            vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g * g;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pv[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamGroup;

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first Adam step is ~lr * sign(grad).
        let mut p = Param::new("w", ParamGroup::Head, Tensor::from_vec(&[2], vec![1.0, -2.0]));
        p.grad = Tensor::from_vec(&[2], vec![0.5, -3.0]);
        let mut opt = Adam::new(0.01, 0.0);
        opt.next_step();
        opt.update(&mut p);
        let w = p.value.data();
        assert!((w[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((w[1] - (-2.0 + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut p = Param::new("w", ParamGroup::Head, Tensor::from_vec(&[1], vec![5.0]));
        p.grad = Tensor::from_vec(&[1], vec![0.0]);
        let mut opt = Adam::new(0.1, 1e-2);
        opt.next_step();
        opt.update(&mut p);
        assert!(p.value.data()[0] < 5.0);
    }
}
