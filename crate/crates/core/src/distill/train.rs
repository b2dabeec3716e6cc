use serde::{Deserialize, Serialize};

use super::loss::{blend_coefficients, ce_loss, kd_loss_scaled, margin_weight};
use super::{FeatureSource, Gating, RefreshSchedule, StrategyKind, TrainingConfig};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::laplace::{entropy_weight, predictive_entropy, LaplacePosterior};
use crate::metrics::evaluate_groups;
use crate::network::{early_features, train_aux, AuxHead, Mlp, OptimizerState};
use crate::numerics::{argmax, softmax, Matrix, RngStream, Vector};

/// Teacher trained on cross-entropy alone.
pub fn train_teacher(train: &[Example], cfg: &TrainingConfig) -> Result<Mlp> {
    cfg.validate()?;
    let first = train.first().ok_or(Error::EmptyDataset)?;
    let root = RngStream::new(cfg.seed);
    let mut net = Mlp::new(
        first.features.len(),
        &cfg.teacher_hidden,
        cfg.num_classes,
        cfg.activation,
        &mut root.derive("teacher-init"),
    )?;
    let mut opt = OptimizerState::new(&net, cfg.learning_rate, cfg.weight_decay);
    let mut shuffle = root.derive("teacher-shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.teacher_epochs {
        shuffle.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = net.zero_gradients();
            for &i in batch {
                let (logits, trace) = net.forward(&train[i].features)?;
                let (_, d) = ce_loss(&logits, train[i].label)?;
                net.accumulate_backward(&trace, &d, &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut net, &grads)?;
        }
    }
    Ok(net)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub mean_weight: f64,
    pub max_weight: f64,
    /// Counts per [`weight_histogram_edges`] bin.
    pub weight_histogram: Vec<usize>,
    pub monitor_average_accuracy: Option<f64>,
    pub monitor_worst_group_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: Mlp,
    pub aux_head: Option<AuxHead>,
    pub history: Vec<EpochMetrics>,
    /// Weights in force at the end of training, by training-example index.
    pub final_weights: Vec<f64>,
    /// Number of times each example's weight was recomputed.
    pub weight_updates: Vec<usize>,
}

impl DistillOutcome {
    pub fn history_csv(&self) -> String {
        use std::fmt::Write as _;
        let cap_edges = self
            .history
            .first()
            .map_or(0, |h| h.weight_histogram.len());
        let mut s = String::from("epoch,train_loss,avg_acc,worst_group_acc,mean_weight,max_weight");
        for b in 0..cap_edges {
            let _ = write!(s, ",hist_{b}");
        }
        s.push('\n');
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for h in &self.history {
            let _ = write!(
                s,
                "{},{},{},{},{},{}",
                h.epoch,
                h.train_loss,
                opt(h.monitor_average_accuracy),
                opt(h.monitor_worst_group_accuracy),
                h.mean_weight,
                h.max_weight
            );
            for c in &h.weight_histogram {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }
}

/// Power-of-two bin edges `1, 2, 4, …` up to and including `cap`.
pub fn weight_histogram_edges(cap: f64) -> Vec<f64> {
    let mut edges = vec![1.0];
    while *edges.last().expect("non-empty") < cap {
        let next = edges.last().expect("non-empty") * 2.0;
        edges.push(next.min(cap));
    }
    if edges.len() == 1 {
        edges.push(cap);
    }
    edges
}

/// Counts of weights per `[edge_k, edge_k+1)` bin; the last bin is closed.
pub fn weight_histogram(weights: &[f64], cap: f64) -> Vec<usize> {
    let edges = weight_histogram_edges(cap);
    let bins = edges.len() - 1;
    let mut counts = vec![0; bins];
    for &w in weights {
        let b = edges[1..]
            .iter()
            .position(|&hi| w < hi)
            .unwrap_or(bins - 1);
        counts[b] += 1;
    }
    counts
}

/// DeDIER-style distillation: every `aux_period` epochs the aux head is
/// retrained on early features and every example's weight is refreshed from
/// its confidence margin.
pub fn distill_dedier(
    teacher: &Mlp,
    train: &[Example],
    cfg: &TrainingConfig,
    monitor: Option<&[Example]>,
) -> Result<DistillOutcome> {
    if !matches!(cfg.strategy, StrategyKind::Margin | StrategyKind::Uniform) {
        return Err(Error::ConfigMismatch(format!(
            "margin distillation needs strategy margin or uniform, got {:?}",
            cfg.strategy
        )));
    }
    Distiller::new(teacher, train, cfg)?.run(monitor)
}

/// Laplace-entropy distillation: the aux head, feature covariance and
/// entropy weights are refreshed before the examples they weight are used.
pub fn distill_laplace(
    teacher: &Mlp,
    train: &[Example],
    cfg: &TrainingConfig,
    monitor: Option<&[Example]>,
) -> Result<DistillOutcome> {
    if !matches!(cfg.strategy, StrategyKind::LaplaceEntropy | StrategyKind::Uniform) {
        return Err(Error::ConfigMismatch(format!(
            "laplace distillation needs strategy laplace_entropy or uniform, got {:?}",
            cfg.strategy
        )));
    }
    Distiller::new(teacher, train, cfg)?.run(monitor)
}

struct Distiller<'a> {
    teacher: &'a Mlp,
    train: &'a [Example],
    cfg: &'a TrainingConfig,
    teacher_logits: Vec<Vector>,
    student: Mlp,
    aux: AuxHead,
    weights: Vec<f64>,
    updates: Vec<usize>,
    aux_rng: RngStream,
    mc_root: RngStream,
    shuffle_rng: RngStream,
    refreshes: u64,
}

impl<'a> Distiller<'a> {
    fn new(teacher: &'a Mlp, train: &'a [Example], cfg: &'a TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        let first = train.first().ok_or(Error::EmptyDataset)?;
        if teacher.input_dim() != first.features.len() || teacher.num_classes() != cfg.num_classes {
            return Err(Error::ConfigMismatch(format!(
                "teacher maps {} -> {}, data has {} features and config {} classes",
                teacher.input_dim(),
                teacher.num_classes(),
                first.features.len(),
                cfg.num_classes
            )));
        }
        let root = RngStream::new(cfg.seed);
        let student = Mlp::new(
            first.features.len(),
            &cfg.student_hidden,
            cfg.num_classes,
            cfg.activation,
            &mut root.derive("student-init"),
        )?;
        let teacher_logits = train
            .iter()
            .map(|e| teacher.logits(&e.features))
            .collect::<Result<Vec<_>>>()?;
        let aux_dim = match cfg.aux_feature_source {
            FeatureSource::Student => student.layer_width(cfg.exit_depth)?,
            FeatureSource::Teacher => teacher.layer_width(teacher_tap(teacher))?,
        };
        let aux = AuxHead::random(cfg.num_classes, aux_dim, &mut root.derive("aux-init"));
        Ok(Self {
            teacher,
            train,
            cfg,
            teacher_logits,
            student,
            aux,
            weights: vec![1.0; train.len()],
            updates: vec![0; train.len()],
            aux_rng: root.derive("aux-train"),
            mc_root: root.derive("mc"),
            shuffle_rng: root.derive("student-shuffle"),
            refreshes: 0,
        })
    }

    fn run(mut self, monitor: Option<&[Example]>) -> Result<DistillOutcome> {
        let cfg = self.cfg;
        let strategy = cfg.weighting();
        let mut opt = OptimizerState::new(&self.student, cfg.learning_rate, cfg.weight_decay);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        let all: Vec<usize> = order.clone();
        for epoch in 1..=cfg.epochs {
            if strategy.kind == StrategyKind::LaplaceEntropy && cfg.refresh == RefreshSchedule::PerEpoch {
                self.refresh_laplace(&all)?;
            }
            self.shuffle_rng.shuffle(&mut order);
            let mut loss_sum = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                if strategy.kind == StrategyKind::LaplaceEntropy
                    && cfg.refresh == RefreshSchedule::PerMinibatch
                    && batch.len() >= 2
                {
                    self.refresh_laplace(batch)?;
                }
                loss_sum += self.step(batch, &mut opt)?;
            }
            if strategy.kind == StrategyKind::Margin && epoch % cfg.aux_period == 0 {
                self.refresh_margin()?;
            }
            let (avg, worst) = match monitor {
                Some(m) if !m.is_empty() => {
                    let r = evaluate_groups(&self.student, m)?;
                    (Some(r.average_accuracy), Some(r.worst_group_accuracy))
                }
                _ => (None, None),
            };
            history.push(EpochMetrics {
                epoch,
                train_loss: loss_sum / self.train.len() as f64,
                mean_weight: self.weights.iter().sum::<f64>() / self.weights.len() as f64,
                max_weight: self.weights.iter().copied().fold(1.0, f64::max),
                weight_histogram: weight_histogram(&self.weights, cfg.weight_cap),
                monitor_average_accuracy: avg,
                monitor_worst_group_accuracy: worst,
            });
        }
        let aux_head = (strategy.kind != StrategyKind::Uniform).then_some(self.aux);
        Ok(DistillOutcome {
            student: self.student,
            aux_head,
            history,
            final_weights: self.weights,
            weight_updates: self.updates,
        })
    }

    /// One optimizer step on a minibatch; returns the summed loss.
    fn step(&mut self, batch: &[usize], opt: &mut OptimizerState) -> Result<f64> {
        let cfg = self.cfg;
        let mut grads = self.student.zero_gradients();
        let mut loss = 0.0;
        for &i in batch {
            let ex = &self.train[i];
            let (logits, trace) = self.student.forward(&ex.features)?;
            let (ce, d_ce) = ce_loss(&logits, ex.label)?;
            let (kd, d_kd) = kd_loss_scaled(&logits, &self.teacher_logits[i], cfg.temp, cfg.kd_temp_squared)?;
            let (a, b) = blend_coefficients(cfg.blend_mode, cfg.lambda, self.weights[i]);
            loss += a * ce + b * kd;
            let d: Vector = d_ce.iter().zip(&d_kd).map(|(x, y)| a * x + b * y).collect();
            self.student.accumulate_backward(&trace, &d, &mut grads)?;
        }
        grads.scale(1.0 / batch.len() as f64);
        opt.step(&mut self.student, &grads)?;
        Ok(loss)
    }

    fn aux_features(&self, idx: &[usize]) -> Result<Matrix> {
        let rows = idx
            .iter()
            .map(|&i| {
                let x = &self.train[i].features;
                Ok(match self.cfg.aux_feature_source {
                    FeatureSource::Student => {
                        let (_, t) = self.student.forward(x)?;
                        early_features(&t, self.cfg.exit_depth)?.to_vec()
                    }
                    FeatureSource::Teacher => {
                        let (_, t) = self.teacher.forward(x)?;
                        early_features(&t, teacher_tap(self.teacher))?.to_vec()
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    }

    fn retrain_aux(&mut self, idx: &[usize], features: &Matrix) -> Result<()> {
        let labels: Vec<usize> = idx.iter().map(|&i| self.train[i].label).collect();
        let head = std::mem::replace(&mut self.aux, AuxHead::zeros(0, 0));
        self.aux = train_aux(head, features, &labels, &self.cfg.aux_settings(), &mut self.aux_rng)?;
        Ok(())
    }

    /// Retrain the aux head on the full training set, then set every weight
    /// from the aux prediction's confidence margin.
    fn refresh_margin(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let gating = cfg.weighting().gating;
        let all: Vec<usize> = (0..self.train.len()).collect();
        let features = self.aux_features(&all)?;
        self.retrain_aux(&all, &features)?;
        for i in all {
            let p = softmax(&self.aux.forward(features.row(i))?, 1.0);
            self.weights[i] = margin_weight(&p, self.train[i].label, cfg.beta_w, cfg.alpha_w, cfg.weight_cap, gating)?;
            self.updates[i] += 1;
        }
        Ok(())
    }

    /// Retrain the aux head on `idx`, fit the covariance on the same features
    /// and set the weights of `idx` from the predictive entropy.
    fn refresh_laplace(&mut self, idx: &[usize]) -> Result<()> {
        let cfg = self.cfg;
        let gating = cfg.weighting().gating;
        let features = self.aux_features(idx)?;
        self.retrain_aux(idx, &features)?;
        let post = LaplacePosterior::fit(self.aux.clone(), &features, cfg.ridge)?;
        let round = self.mc_root.derive_index(self.refreshes);
        self.refreshes += 1;
        for (row, &i) in idx.iter().enumerate() {
            let pred = post.predictive(features.row(row))?;
            if gating == Gating::GatedOnAuxError && argmax(&pred.mu) == self.train[i].label {
                self.weights[i] = 1.0;
            } else {
                let mut rng = round.derive_index(i as u64);
                // Weights use the untempered softmax.
                let h = predictive_entropy(&pred, cfg.mc_samples, 1.0, &mut rng);
                self.weights[i] = entropy_weight(h, cfg.beta_w, cfg.alpha_w, cfg.weight_cap)?;
            }
            self.updates[i] += 1;
        }
        Ok(())
    }
}

/// Teacher layer used when aux features come from the teacher: its last
/// hidden layer (or the logits for a single-layer teacher).
fn teacher_tap(teacher: &Mlp) -> usize {
    teacher.depth().saturating_sub(1).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorSpec};
    use crate::network::Parameterized;

    fn small_cfg() -> TrainingConfig {
        TrainingConfig {
            epochs: 2,
            teacher_epochs: 2,
            teacher_hidden: vec![16, 16],
            student_hidden: vec![8, 8],
            exit_depth: 1,
            aux_epochs: 2,
            mc_samples: 20,
            ..Default::default()
        }
    }

    fn data(n: usize) -> Vec<Example> {
        generate(&GeneratorSpec {
            n,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    fn bits(net: &Mlp) -> Vec<u64> {
        net.param_slices().concat().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn histogram_edges_and_counts() {
        assert_eq!(weight_histogram_edges(100.0), vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 100.0]);
        assert_eq!(weight_histogram_edges(1.0), vec![1.0, 1.0]);
        let h = weight_histogram(&[1.0, 1.5, 2.0, 99.0, 100.0], 100.0);
        assert_eq!(h, vec![2, 1, 0, 0, 0, 0, 2]);
    }

    #[test]
    fn teacher_with_zero_epochs_is_its_initialization() {
        let d = data(50);
        let cfg = TrainingConfig {
            teacher_epochs: 0,
            ..small_cfg()
        };
        let t = train_teacher(&d, &cfg).unwrap();
        let init = Mlp::new(15, &cfg.teacher_hidden, 3, cfg.activation, &mut RngStream::new(cfg.seed).derive("teacher-init")).unwrap();
        assert_eq!(t, init);
        assert!(matches!(train_teacher(&[], &cfg), Err(Error::EmptyDataset)));
    }

    #[test]
    fn teacher_training_is_deterministic() {
        let d = data(200);
        let a = train_teacher(&d, &small_cfg()).unwrap();
        let b = train_teacher(&d, &small_cfg()).unwrap();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn strategy_mismatch_is_rejected() {
        let d = data(40);
        let t = train_teacher(&d, &small_cfg()).unwrap();
        let cfg = TrainingConfig {
            strategy: StrategyKind::LaplaceEntropy,
            ..small_cfg()
        };
        assert!(matches!(distill_dedier(&t, &d, &cfg, None), Err(Error::ConfigMismatch(_))));
        let cfg = TrainingConfig {
            strategy: StrategyKind::Margin,
            ..small_cfg()
        };
        assert!(matches!(distill_laplace(&t, &d, &cfg, None), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn zero_beta_reduces_to_uniform() {
        let d = data(150);
        let t = train_teacher(&d, &small_cfg()).unwrap();
        let uniform = distill_dedier(&t, &d, &small_cfg(), None).unwrap();
        for kind in [StrategyKind::Margin, StrategyKind::LaplaceEntropy] {
            let cfg = TrainingConfig {
                strategy: kind,
                beta_w: 0.0,
                ..small_cfg()
            };
            let out = if kind == StrategyKind::Margin {
                distill_dedier(&t, &d, &cfg, None).unwrap()
            } else {
                distill_laplace(&t, &d, &cfg, None).unwrap()
            };
            assert_eq!(bits(&out.student), bits(&uniform.student), "{kind:?}");
            assert!(out.final_weights.iter().all(|&w| w == 1.0));
        }
        let via_laplace = distill_laplace(&t, &d, &small_cfg(), None).unwrap();
        assert_eq!(bits(&via_laplace.student), bits(&uniform.student));
    }

    #[test]
    fn aux_period_longer_than_training_never_reweights() {
        let d = data(100);
        let t = train_teacher(&d, &small_cfg()).unwrap();
        let cfg = TrainingConfig {
            strategy: StrategyKind::Margin,
            aux_period: 3,
            ..small_cfg()
        };
        let out = distill_dedier(&t, &d, &cfg, None).unwrap();
        assert!(out.final_weights.iter().all(|&w| w == 1.0));
        assert!(out.weight_updates.iter().all(|&u| u == 0));
    }

    #[test]
    fn margin_round_touches_every_example_once() {
        let d = data(120);
        let t = train_teacher(&d, &small_cfg()).unwrap();
        let cfg = TrainingConfig {
            strategy: StrategyKind::Margin,
            epochs: 3,
            ..small_cfg()
        };
        let out = distill_dedier(&t, &d, &cfg, Some(&d)).unwrap();
        assert!(out.weight_updates.iter().all(|&u| u == 3));
        assert!(out.final_weights.iter().all(|&w| (1.0..=cfg.weight_cap).contains(&w)));
        assert_eq!(out.history.len(), 3);
        assert!(out.history[0].monitor_worst_group_accuracy.is_some());
    }

    #[test]
    fn laplace_weights_are_bounded_and_deterministic() {
        let d = data(120);
        let t = train_teacher(&d, &small_cfg()).unwrap();
        for refresh in [RefreshSchedule::PerEpoch, RefreshSchedule::PerMinibatch] {
            for source in [FeatureSource::Student, FeatureSource::Teacher] {
                let cfg = TrainingConfig {
                    strategy: StrategyKind::LaplaceEntropy,
                    refresh,
                    aux_feature_source: source,
                    ..small_cfg()
                };
                let a = distill_laplace(&t, &d, &cfg, None).unwrap();
                let b = distill_laplace(&t, &d, &cfg, None).unwrap();
                assert_eq!(bits(&a.student), bits(&b.student));
                assert!(a.final_weights.iter().all(|&w| (1.0..=cfg.weight_cap).contains(&w)));
                assert!(a.final_weights.iter().any(|&w| w > 1.0));
            }
        }
    }

    #[test]
    fn history_csv_has_one_row_per_epoch() {
        let d = data(60);
        let t = train_teacher(&d, &small_cfg()).unwrap();
        let out = distill_dedier(&t, &d, &small_cfg(), Some(&d)).unwrap();
        let csv = out.history_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("epoch,train_loss,avg_acc,worst_group_acc,mean_weight,max_weight,hist_0"));
    }
}
