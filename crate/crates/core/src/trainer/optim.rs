use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::thead::ParamTree;

/// SGD with momentum, L2 weight decay and linear warm-up:
/// `v <- mu * v + (g + wd * p)`, `p <- p - lr_t * v`,
/// `lr_t = lr * min(1, (step + 1) / warmup)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T: Scalar = f32> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, warmup_steps: usize) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            warmup_steps,
            velocity: Vec::new(),
        }
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    /// Applies one update; `grads` follows the visiting order of `params`.
    pub fn step(&mut self, step: usize, params: &mut impl ParamTree<Tensor<T>>, grads: &[Tensor<T>]) -> Result<()> {
        let lr = T::from_f64(self.learning_rate(step));
        let mu = T::from_f64(self.momentum);
        let wd = T::from_f64(self.weight_decay);
        let mut k = 0;
        let mut err = None;
        let velocity = &mut self.velocity;
        params.visit_mut("", &mut |name, p| {
            if err.is_some() {
                return;
            }
            let Some(g) = grads.get(k) else {
                err = Some(Error::InvalidArgument(format!("no gradient for {name}")));
                return;
            };
            if g.shape() != p.shape() {
                err = Some(Error::shape("sgd", format!("{name}: gradient {:?} for parameter {:?}", g.shape(), p.shape())));
                return;
            }
            if velocity.len() == k {
                velocity.push(Tensor::zeros(p.shape()));
            }
            let v = velocity[k].data_mut();
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vv = mu * *vv + (gv + wd * *pv);
                *pv -= lr * *vv;
            }
            k += 1;
        });
        match err {
            Some(e) => Err(e),
            None if k != grads.len() => Err(Error::InvalidArgument(format!("{} gradients for {k} parameters", grads.len()))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::thead::Dense;

    fn scalar_param(x: f64) -> Dense<Tensor<f64>> {
        Dense { weight: Tensor::full(&[1], x), bias: Tensor::zeros(&[1]) }
    }

    #[test]
    fn quadratic_trajectory_matches_recurrence() {
        // f(x) = a/2 x^2.
        let (a, lr, mu, wd, warmup) = (1.7, 0.05, 0.9, 1e-4, 10);
        let mut opt = Sgd::<f64>::new(lr, mu, wd, warmup);
        let mut p = scalar_param(2.0);
        let (mut x, mut v) = (2.0f64, 0.0f64);
        for step in 0..100 {
            let g = Tensor::full(&[1], a * p.weight.data()[0]);
            opt.step(step, &mut p, &[g, Tensor::zeros(&[1])]).unwrap();
            let lr_t = lr * ((step + 1) as f64 / warmup as f64).min(1.0);
            v = mu * v + (a * x + wd * x);
            x -= lr_t * v;
            assert!((p.weight.data()[0] - x).abs() < 1e-6, "step {step}");
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut opt = Sgd::<f32>::new(0.0, 0.9, 1e-4, 0);
        let mut p = Dense { weight: Tensor::full(&[3], 1.5f32), bias: Tensor::full(&[1], -0.5f32) };
        let before = p.clone();
        for s in 0..5 {
            opt.step(s, &mut p, &[Tensor::full(&[3], 2.0), Tensor::full(&[1], 1.0)]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn gradient_shape_mismatch_is_reported() {
        let mut opt = Sgd::<f64>::new(0.1, 0.0, 0.0, 0);
        let mut p = scalar_param(1.0);
        assert!(opt.step(0, &mut p, &[Tensor::zeros(&[2]), Tensor::zeros(&[1])]).is_err());
        assert!(opt.step(0, &mut p, &[Tensor::zeros(&[1])]).is_err());
    }
}
