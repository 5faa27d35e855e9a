use crate::network::Params;
use crate::tensor::Tensor;

/// Adam with the usual bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &Params<f32>, lr: f64) -> Self {
        let zeros = || params.tensors().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads` are in parameter-table order.
    pub fn step(&mut self, params: &mut Params<f32>, grads: &[Tensor<f32>]) {
        assert_eq!(grads.len(), self.m.len(), "gradient count");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let step_size = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (((_, p), g), (m, v)) in params
            .entries_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step_size * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// `ema <- rate * ema + (1 - rate) * params`.
pub fn ema_update(ema: &mut Params<f32>, params: &Params<f32>, rate: f64) {
    let (r, q) = (rate as f32, (1.0 - rate) as f32);
    for ((_, e), p) in ema.entries_mut().iter_mut().zip(params.tensors()) {
        for (e, &p) in e.data_mut().iter_mut().zip(p.data()) {
            *e = r * *e + q * p;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f32) -> Params<f32> {
        Params::new(vec![("w".into(), Tensor::scalar(v))])
    }

    #[test]
    fn ema_formula() {
        let mut ema = single(1.0);
        ema_update(&mut ema, &single(2.0), 0.999);
        assert!((ema.get("w").unwrap().item() - 1.001).abs() < 1e-6);
    }

    #[test]
    fn ema_converges_geometrically_to_fixed_params() {
        let mut ema = single(0.0);
        let p = single(1.0);
        for k in 1..=50 {
            ema_update(&mut ema, &p, 0.9);
            let gap = 1.0 - ema.get("w").unwrap().item() as f64;
            assert!((gap - 0.9f64.powi(k)).abs() < 1e-5);
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // with bias correction the first update is lr * sign(g)
        let mut p = Params::new(vec![("w".into(), Tensor::new(vec![2], vec![1.0, 1.0]).unwrap())]);
        let mut adam = Adam::new(&p, 0.1);
        adam.step(&mut p, &[Tensor::new(vec![2], vec![3.0, -0.5]).unwrap()]);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let mut p = single(0.7);
        let mut adam = Adam::new(&p, 0.0);
        adam.step(&mut p, &[Tensor::scalar(5.0)]);
        assert_eq!(p.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = single(4.0);
        let mut adam = Adam::new(&p, 0.05);
        for _ in 0..500 {
            let w = p.get("w").unwrap().item();
            adam.step(&mut p, &[Tensor::scalar(2.0 * (w - 1.5))]);
        }
        assert!((p.get("w").unwrap().item() - 1.5).abs() < 1e-2);
    }
}
