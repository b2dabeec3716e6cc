use crate::error::{Error, Result};

/// Anything whose trainable parameters can be viewed as a list of flat slices.
///
/// Gradients implement the same trait so optimizers can pair slices by index.
pub trait Parameterized {
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }
}

/// AdamW: adaptive moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new<P: Parameterized + ?Sized>(params: &P, learning_rate: f64, weight_decay: f64) -> Self {
        let shapes: Vec<usize> = params.param_slices().iter().map(|s| s.len()).collect();
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of `params` from `grads`.
    ///
    /// Decay is applied as `p ← p·(1 − lr·wd)` before the moment step.
    pub fn step<P, G>(&mut self, params: &mut P, grads: &G) -> Result<()>
    where
        P: Parameterized + ?Sized,
        G: Parameterized + ?Sized,
    {
        let mut ps = params.param_slices_mut();
        let gs = grads.param_slices();
        if ps.len() != gs.len() || ps.len() != self.first.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter tensors, {} gradient tensors, {} moment tensors",
                ps.len(),
                gs.len(),
                self.first.len()
            )));
        }
        for (i, (p, g)) in ps.iter().zip(&gs).enumerate() {
            if p.len() != g.len() || p.len() != self.first[i].len() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {i}: {} params, {} grads, {} moments",
                    p.len(),
                    g.len(),
                    self.first[i].len()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.learning_rate * self.weight_decay;
        for (i, (p, g)) in ps.iter_mut().zip(&gs).enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                p[j] = p[j] * decay - self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Flat(Vec<f64>);

    impl Parameterized for Flat {
        fn param_slices(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = Flat(vec![1.0, -2.0, 3.0]);
        let mut opt = OptimizerState::new(&p, 1e-2, 0.0);
        for _ in 0..5 {
            opt.step(&mut p, &Flat(vec![0.0; 3])).unwrap();
        }
        assert_eq!(p.0, vec![1.0, -2.0, 3.0]);
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn first_step_closed_form() {
        let (lr, wd) = (0.01, 0.1);
        let p0 = vec![0.5, -1.0, 2.0];
        let g = vec![0.2, -3.0, 0.0];
        let mut p = Flat(p0.clone());
        let mut opt = OptimizerState::new(&p, lr, wd);
        opt.step(&mut p, &Flat(g.clone())).unwrap();
        for j in 0..3 {
            // m̂ = g, v̂ = g² after bias correction.
            let expected = p0[j] * (1.0 - lr * wd) - lr * g[j] / (g[j].abs() + 1e-8);
            assert!((p.0[j] - expected).abs() < 1e-15, "{j}");
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = Flat(vec![0.0; 3]);
        let mut opt = OptimizerState::new(&p, 0.1, 0.0);
        assert!(matches!(
            opt.step(&mut p, &Flat(vec![0.0; 2])),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn convex_quadratic_decreases() {
        // f(p) = Σ a_j (p_j - c_j)²
        let a = [1.0, 4.0, 0.5];
        let c = [3.0, -1.0, 2.0];
        let f = |p: &[f64]| -> f64 { (0..3).map(|j| a[j] * (p[j] - c[j]).powi(2)).sum() };
        let mut p = Flat(vec![0.0; 3]);
        let mut opt = OptimizerState::new(&p, 0.05, 0.0);
        let mut losses = vec![f(&p.0)];
        for _ in 0..100 {
            let g: Vec<f64> = (0..3).map(|j| 2.0 * a[j] * (p.0[j] - c[j])).collect();
            opt.step(&mut p, &Flat(g)).unwrap();
            losses.push(f(&p.0));
        }
        // Adam can overshoot locally; the trend over windows of 10 must fall.
        for w in losses.chunks(10).collect::<Vec<_>>().windows(2) {
            let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
            assert!(mean(w[1]) < mean(w[0]));
        }
        assert!(losses[100] < 1e-2 * losses[0]);
    }
}
