use serde::{Deserialize, Serialize};

use super::optim::{OptimizerState, Parameterized};
use crate::distill::ce_loss;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream, Vector};

/// One-layer linear classifier on early-exit features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxHead {
    /// `C × D`
    pub weight: Matrix,
    pub bias: Vector,
}

impl AuxHead {
    pub fn zeros(num_classes: usize, feature_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(num_classes, feature_dim),
            bias: vec![0.0; num_classes],
        }
    }

    /// Uniform `±1/sqrt(D)` weights, zero bias.
    pub fn random(num_classes: usize, feature_dim: usize, rng: &mut RngStream) -> Self {
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let data = (0..num_classes * feature_dim)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        Self {
            weight: Matrix::from_vec(num_classes, feature_dim, data).expect("sized above"),
            bias: vec![0.0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.cols()
    }

    /// `weight·phi + bias`
    pub fn forward(&self, phi: &[f64]) -> Result<Vector> {
        if phi.len() != self.feature_dim() {
            return Err(Error::DimMismatch {
                expected: self.feature_dim(),
                actual: phi.len(),
                context: "aux head features",
            });
        }
        let mut z = self.weight.matvec(phi)?;
        for (zi, b) in z.iter_mut().zip(&self.bias) {
            *zi += b;
        }
        Ok(z)
    }
}

impl Parameterized for AuxHead {
    fn param_slices(&self) -> Vec<&[f64]> {
        vec![self.weight.as_slice(), &self.bias]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.as_mut_slice(), &mut self.bias]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxTrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for AuxTrainSettings {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            learning_rate: 1e-2,
        }
    }
}

/// Minibatch AdamW on softmax cross-entropy. Each call starts from fresh
/// optimizer moments; the head itself carries over.
pub fn train_aux(
    mut head: AuxHead,
    features: &Matrix,
    labels: &[usize],
    settings: &AuxTrainSettings,
    rng: &mut RngStream,
) -> Result<AuxHead> {
    if features.rows() != labels.len() {
        return Err(Error::DimMismatch {
            expected: features.rows(),
            actual: labels.len(),
            context: "aux training labels",
        });
    }
    if features.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if features.cols() != head.feature_dim() {
        return Err(Error::DimMismatch {
            expected: head.feature_dim(),
            actual: features.cols(),
            context: "aux training features",
        });
    }
    if settings.epochs == 0 {
        return Ok(head);
    }
    let batch = settings.batch_size.max(1);
    let mut opt = OptimizerState::new(&head, settings.learning_rate, 0.0);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut grad = AuxHead::zeros(head.num_classes(), head.feature_dim());
    for _ in 0..settings.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            grad.weight.as_mut_slice().fill(0.0);
            grad.bias.fill(0.0);
            for &i in chunk {
                let phi = features.row(i);
                let z = head.forward(phi)?;
                let (_, dz) = ce_loss(&z, labels[i])?;
                for (r, &d) in dz.iter().enumerate() {
                    for (g, &x) in grad.weight.row_mut(r).iter_mut().zip(phi) {
                        *g += d * x;
                    }
                    grad.bias[r] += d;
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            grad.weight.as_mut_slice().iter_mut().for_each(|g| *g *= inv);
            grad.bias.iter_mut().for_each(|g| *g *= inv);
            opt.step(&mut head, &grad)?;
        }
    }
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::argmax;

    fn blobs(n: usize, seed: u64) -> (Matrix, Vec<usize>) {
        // Two Gaussian blobs at (±2, ±2) with unit noise, shifted apart so the
        // closest points are well separated.
        let mut rng = RngStream::new(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        while rows.len() < n {
            let y = rows.len() % 2;
            let sign = if y == 0 { -1.0 } else { 1.0 };
            let p = [sign * 3.0 + 0.5 * rng.standard_normal(), sign * 3.0 + 0.5 * rng.standard_normal()];
            // Enforce a margin around the separating line x + y = 0.
            if sign * (p[0] + p[1]) < 1.0 {
                continue;
            }
            rows.push(p.to_vec());
            labels.push(y);
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        assert_eq!(AuxHead::zeros(3, 4).forward(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_head() {
        let head = AuxHead {
            weight: Matrix::identity(2),
            bias: vec![0.0; 2],
        };
        assert_eq!(head.forward(&[3.0, 4.0]).unwrap(), vec![3.0, 4.0]);
        assert!(matches!(head.forward(&[1.0]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn seeded_head_golden_logits() {
        let mut rng = RngStream::new(77);
        let head = AuxHead::random(3, 4, &mut rng);
        let z = head.forward(&[1.0, -0.5, 0.25, 2.0]).unwrap();
        let golden = [-0.6062113318008089_f64, 0.08886375259454662, -0.3471488656588918];
        for (a, b) in z.iter().zip(golden) {
            assert!((a - b).abs() < 1e-14, "{z:?}");
        }
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (x, y) = blobs(200, 5);
        let settings = AuxTrainSettings {
            epochs: 20,
            ..Default::default()
        };
        let head = train_aux(AuxHead::zeros(2, 2), &x, &y, &settings, &mut RngStream::new(1)).unwrap();
        let correct = (0..y.len())
            .filter(|&i| argmax(&head.forward(x.row(i)).unwrap()) == y[i])
            .count();
        assert!(correct as f64 / y.len() as f64 >= 0.99);
    }

    #[test]
    fn zero_epochs_returns_head_unchanged() {
        let (x, y) = blobs(20, 6);
        let start = AuxHead::random(2, 2, &mut RngStream::new(3));
        let settings = AuxTrainSettings {
            epochs: 0,
            ..Default::default()
        };
        let out = train_aux(start.clone(), &x, &y, &settings, &mut RngStream::new(1)).unwrap();
        assert_eq!(out, start);
    }

    #[test]
    fn training_is_deterministic() {
        let (x, y) = blobs(50, 7);
        let s = AuxTrainSettings::default();
        let a = train_aux(AuxHead::zeros(2, 2), &x, &y, &s, &mut RngStream::new(9)).unwrap();
        let b = train_aux(AuxHead::zeros(2, 2), &x, &y, &s, &mut RngStream::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let x = Matrix::zeros(0, 2);
        let r = train_aux(AuxHead::zeros(2, 2), &x, &[], &AuxTrainSettings::default(), &mut RngStream::new(1));
        assert!(matches!(r, Err(Error::EmptyDataset)));
    }
}
