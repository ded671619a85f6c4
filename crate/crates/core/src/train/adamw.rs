use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Adaptive moment estimation with decoupled, multiplicative weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Element> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(shapes: &[&[usize]], lr: f64, weight_decay: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One update of every parameter. `grads` pairs with `params` by position.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} slots, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let decay = T::lit(1.0 - self.lr * self.weight_decay);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (c1, c2) = (T::lit(1.0 - self.beta1.powi(t)), T::lit(1.0 - self.beta2.powi(t)));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        let one = T::one();
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("param {k} has shape {:?}, grad {:?}", p.shape(), g.shape())));
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                *x *= decay;
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_from_zero_matches_hand_formula() {
        let (lr, eps) = (0.01, 1e-8);
        let mut opt = AdamW::<f64>::new(&[&[1]], lr, 0.0, 0.9, 0.999, eps);
        let mut p = vec![Tensor::scalar(0.0).reshape(&[1]).unwrap()];
        opt.step(&mut p, &[Tensor::from_f64(&[1], &[1.0]).unwrap()]).unwrap();
        // m̂ = v̂ = 1 after bias correction.
        assert!((p[0].data()[0] - (-lr / (1.0 + eps))).abs() < 1e-15);
    }

    #[test]
    fn two_steps_against_direct_evaluation() {
        let (lr, wd, b1, b2, eps) = (0.1, 0.01, 0.8, 0.9, 1e-6);
        let mut opt = AdamW::<f64>::new(&[&[1]], lr, wd, b1, b2, eps);
        let mut p = vec![Tensor::from_f64(&[1], &[2.0]).unwrap()];
        let gs = [0.5, -1.5];
        let (mut x, mut m, mut v) = (2.0f64, 0.0, 0.0);
        for (t, &g) in gs.iter().enumerate() {
            opt.step(&mut p, &[Tensor::from_f64(&[1], &[g]).unwrap()]).unwrap();
            x *= 1.0 - lr * wd;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let n = (t + 1) as i32;
            x -= lr * (m / (1.0 - b1.powi(n))) / ((v / (1.0 - b2.powi(n))).sqrt() + eps);
        }
        assert!((p[0].data()[0] - x).abs() < 1e-12);
    }

    #[test]
    fn zero_grads_without_decay_change_nothing() {
        let mut opt = AdamW::<f32>::new(&[&[2, 2]], 1e-3, 0.0, 0.9, 0.999, 1e-8);
        let init = Tensor::from_f64(&[2, 2], &[1.0, -2.0, 3.0, 0.5]).unwrap();
        let mut p = vec![init.clone()];
        for _ in 0..3 {
            opt.step(&mut p, &[Tensor::zeros(&[2, 2])]).unwrap();
        }
        assert!(p[0].bit_eq(&init));
        assert!(opt.step(&mut p, &[Tensor::zeros(&[4])]).is_err());
    }
}
