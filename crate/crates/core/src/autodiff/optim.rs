use crate::error::{Result, VtpError};
use crate::tensor::Tensor;

fn check_shapes(params: &[&mut Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(VtpError::Shape(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(VtpError::Shape(format!(
                "parameter {i} is {:?} but its gradient is {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    Ok(())
}

/// Plain gradient descent: `w ← w − lr·g`.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    check_shapes(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        check_shapes(params, grads)?;
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len() {
            return Err(VtpError::Shape("parameter set changed between Adam steps".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &d), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * d;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * d * d;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut w = Tensor::from_fn(&[3], |i| i as f64);
        let before = w.clone();
        sgd_step(&mut [&mut w], &[Tensor::zeros(&[3])], 0.1).unwrap();
        assert_eq!(w, before);
        let mut adam = Adam::new(0.1);
        adam.step(&mut [&mut w], &[Tensor::zeros(&[3])]).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        // f(w) = 3 (w − 2)², stable for lr < 1/3.
        let mut w = Tensor::scalar(-5.0);
        let loss = |w: &Tensor| 3.0 * (w.data()[0] - 2.0).powi(2);
        let mut prev = loss(&w);
        for _ in 0..100 {
            let g = Tensor::scalar(6.0 * (w.data()[0] - 2.0));
            sgd_step(&mut [&mut w], &[g], 0.05).unwrap();
            let l = loss(&w);
            assert!(l < prev || l == 0.0);
            prev = l;
        }
        assert!(prev < 1e-10);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut w = Tensor::new(&[2], vec![3.0, -4.0]).unwrap();
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let g = w.map(|x| 2.0 * x);
            adam.step(&mut [&mut w], &[g]).unwrap();
        }
        assert!(w.data().iter().all(|x| x.abs() < 1e-2), "{w:?}");
        assert_eq!(adam.steps_taken(), 500);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut w = Tensor::zeros(&[3]);
        assert!(sgd_step(&mut [&mut w], &[Tensor::zeros(&[2])], 0.1).is_err());
        assert!(sgd_step(&mut [&mut w], &[], 0.1).is_err());
    }
}
