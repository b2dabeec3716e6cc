//! Group accuracy, per-layer confidence-margin profiles and calibration.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{feature_matrix, labels, Example};
use crate::distill::confidence_margin;
use crate::error::{Error, Result};
use crate::network::{early_features, train_aux, AuxHead, AuxTrainSettings, Mlp};
use crate::numerics::{argmax, softmax, Matrix, RngStream, Vector};

/// Floor applied to the true-class probability before taking its log.
pub const NLPD_FLOOR: f64 = 1e-12;
pub const DEFAULT_ECE_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group: usize,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub groups: Vec<GroupStats>,
    pub total: usize,
    pub average_accuracy: f64,
    pub worst_group_accuracy: f64,
    pub worst_group_id: usize,
}

impl GroupReport {
    /// Builds the report from predictions; groups with no examples are listed
    /// with zero count and ignored for the worst group.
    pub fn from_predictions(predictions: &[usize], examples: &[Example], num_groups: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let num_groups = num_groups.max(examples.iter().map(|e| e.group + 1).max().unwrap_or(0));
        let mut count = vec![0usize; num_groups];
        let mut correct = vec![0usize; num_groups];
        for (e, &p) in examples.iter().zip(predictions) {
            count[e.group] += 1;
            if p == e.label {
                correct[e.group] += 1;
            }
        }
        let groups: Vec<GroupStats> = (0..num_groups)
            .map(|g| GroupStats {
                group: g,
                count: count[g],
                correct: correct[g],
                accuracy: if count[g] > 0 {
                    correct[g] as f64 / count[g] as f64
                } else {
                    0.0
                },
            })
            .collect();
        let (worst_group_id, worst_group_accuracy) = groups
            .iter()
            .filter(|g| g.count > 0)
            .map(|g| (g.group, g.accuracy))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        let total: usize = count.iter().sum();
        Ok(Self {
            average_accuracy: correct.iter().sum::<usize>() as f64 / total as f64,
            groups,
            total,
            worst_group_accuracy,
            worst_group_id,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,count,correct,accuracy\n");
        for g in &self.groups {
            let _ = writeln!(s, "{},{},{},{}", g.group, g.count, g.correct, g.accuracy);
        }
        s
    }
}

/// Class probabilities (temperature 1) for every example. Fans out over
/// `threads` workers; output order follows the input.
pub fn predict_probs(model: &Mlp, examples: &[Example], threads: usize) -> Result<Vec<Vector>> {
    for e in examples {
        if e.features.len() != model.input_dim() {
            return Err(Error::DimMismatch {
                expected: model.input_dim(),
                actual: e.features.len(),
                context: "dataset features vs model input",
            });
        }
    }
    let one = |e: &Example| model.logits(&e.features).map(|z| softmax(&z, 1.0));
    if threads <= 1 {
        return examples.iter().map(one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::ConfigMismatch(format!("thread pool: {e}")))?;
    pool.install(|| examples.par_iter().map(one).collect())
}

pub fn evaluate_groups(model: &Mlp, examples: &[Example]) -> Result<GroupReport> {
    evaluate_groups_threaded(model, examples, 1)
}

pub fn evaluate_groups_threaded(model: &Mlp, examples: &[Example], threads: usize) -> Result<GroupReport> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds: Vec<usize> = predict_probs(model, examples, threads)?
        .iter()
        .map(|p| argmax(p))
        .collect();
    GroupReport::from_predictions(&preds, examples, 2 * model.num_classes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    All,
    WorstGroup,
    Wrong,
}

impl Cohort {
    pub const ALL: [Cohort; 3] = [Cohort::All, Cohort::WorstGroup, Cohort::Wrong];

    pub fn name(self) -> &'static str {
        match self {
            Cohort::All => "all",
            Cohort::WorstGroup => "worst_group",
            Cohort::Wrong => "wrong",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginRow {
    pub layer: usize,
    pub cohort: Cohort,
    pub count: usize,
    /// Mean confidence margin; `None` when the cohort is empty.
    pub mean_margin: Option<f64>,
}

/// Mean confidence margin of per-layer probes, by cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginProfile {
    pub worst_group_id: usize,
    pub probe_protocol: String,
    pub rows: Vec<MarginRow>,
    /// Per-example margins, `[layer index][example]`, in the order of `layers`.
    #[serde(skip)]
    pub per_example: Vec<Vec<f64>>,
}

impl MarginProfile {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,cohort,count,mean_margin\n");
        for r in &self.rows {
            let m = r.mean_margin.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(s, "{},{},{},{}", r.layer, r.cohort.name(), r.count, m);
        }
        s
    }

    pub fn per_example_csv(&self, layers: &[usize]) -> String {
        let mut s = String::from("example,layer,margin\n");
        for (li, layer) in layers.iter().enumerate() {
            for (i, m) in self.per_example[li].iter().enumerate() {
                let _ = writeln!(s, "{i},{layer},{m}");
            }
        }
        s
    }
}

/// A linear probe per requested layer.
pub type LayerProbes = Vec<(usize, AuxHead)>;

fn layer_features(model: &Mlp, examples: &[Example], layer: usize) -> Result<Matrix> {
    let rows = examples
        .iter()
        .map(|e| {
            let (_, trace) = model.forward(&e.features)?;
            Ok(early_features(&trace, layer)?.to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

pub const PROBE_PROTOCOL: &str =
    "fresh zero-initialized linear head per layer, trained on frozen post-activation features of the training set with softmax cross-entropy (AdamW, 5 epochs)";

/// Trains one fresh linear probe per layer on frozen features of `train`.
pub fn train_probes(
    model: &Mlp,
    train: &[Example],
    layers: &[usize],
    settings: &AuxTrainSettings,
    rng: &RngStream,
) -> Result<LayerProbes> {
    let y = labels(train);
    layers
        .iter()
        .map(|&layer| {
            let f = layer_features(model, train, layer)?;
            let head = AuxHead::zeros(model.num_classes(), f.cols());
            let mut r = rng.derive_index(layer as u64);
            Ok((layer, train_aux(head, &f, &y, settings, &mut r)?))
        })
        .collect()
}

/// Mean probe margin per layer over all examples, the worst group (by the
/// model's own final predictions) and the examples the model gets wrong.
pub fn margin_profile(
    model: &Mlp,
    probes: &LayerProbes,
    examples: &[Example],
    layers: &[usize],
) -> Result<MarginProfile> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let report = evaluate_groups(model, examples)?;
    let preds: Vec<usize> = examples
        .iter()
        .map(|e| model.logits(&e.features).map(|z| argmax(&z)))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut per_example = Vec::new();
    for &layer in layers {
        let head = probes
            .iter()
            .find(|(l, _)| *l == layer)
            .map(|(_, h)| h)
            .ok_or(Error::ProbeMissing(layer))?;
        let f = layer_features(model, examples, layer)?;
        let margins: Vec<f64> = (0..examples.len())
            .map(|i| confidence_margin(&softmax(&head.forward(f.row(i))?, 1.0)))
            .collect::<Result<_>>()?;
        for cohort in Cohort::ALL {
            let picked: Vec<f64> = (0..examples.len())
                .filter(|&i| match cohort {
                    Cohort::All => true,
                    Cohort::WorstGroup => examples[i].group == report.worst_group_id,
                    Cohort::Wrong => preds[i] != examples[i].label,
                })
                .map(|i| margins[i])
                .collect();
            rows.push(MarginRow {
                layer,
                cohort,
                count: picked.len(),
                mean_margin: (!picked.is_empty())
                    .then(|| picked.iter().sum::<f64>() / picked.len() as f64),
            });
        }
        per_example.push(margins);
    }
    Ok(MarginProfile {
        worst_group_id: report.worst_group_id,
        probe_protocol: PROBE_PROTOCOL.to_string(),
        rows,
        per_example,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub nlpd: f64,
    pub bin_count: usize,
    pub bins: Vec<CalibrationBin>,
}

impl CalibrationReport {
    pub fn from_probs(probs: &[Vector], labels: &[usize], bins: usize) -> Result<Self> {
        let max_probs: Vec<f64> = probs.iter().map(|p| p[argmax(p)]).collect();
        let correct: Vec<bool> = probs
            .iter()
            .zip(labels)
            .map(|(p, &y)| argmax(p) == y)
            .collect();
        let table = calibration_bins(&max_probs, &correct, bins)?;
        Ok(Self {
            ece: ece_from_bins(&table, max_probs.len()),
            nlpd: nlpd(probs, labels)?,
            bin_count: bins,
            bins: table,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin,lower,upper,count,accuracy,confidence\n");
        for (i, b) in self.bins.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i},{},{},{},{},{}",
                b.lower, b.upper, b.count, b.accuracy, b.confidence
            );
        }
        s
    }
}

/// Equal-width bins on `[0, 1]`; bin `b` holds confidences in
/// `[b/B, (b+1)/B)`, with 1.0 in the last bin.
fn calibration_bins(max_probs: &[f64], correct: &[bool], bins: usize) -> Result<Vec<CalibrationBin>> {
    if max_probs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if bins == 0 {
        return Err(Error::InvalidHyperparameter("ece needs at least one bin".into()));
    }
    if max_probs.len() != correct.len() {
        return Err(Error::DimMismatch {
            expected: max_probs.len(),
            actual: correct.len(),
            context: "ece correctness flags",
        });
    }
    let mut count = vec![0usize; bins];
    let mut hits = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    for (&p, &ok) in max_probs.iter().zip(correct) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidDistribution(format!("confidence {p} outside [0, 1]")));
        }
        let b = ((p * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        hits[b] += usize::from(ok);
        conf[b] += p;
    }
    Ok((0..bins)
        .map(|b| CalibrationBin {
            lower: b as f64 / bins as f64,
            upper: (b + 1) as f64 / bins as f64,
            count: count[b],
            accuracy: if count[b] > 0 { hits[b] as f64 / count[b] as f64 } else { 0.0 },
            confidence: if count[b] > 0 { conf[b] / count[b] as f64 } else { 0.0 },
        })
        .collect())
}

fn ece_from_bins(bins: &[CalibrationBin], n: usize) -> f64 {
    bins.iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.confidence).abs())
        .sum()
}

/// Expected calibration error over `bins` equal-width confidence bins.
pub fn ece(max_probs: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    let table = calibration_bins(max_probs, correct, bins)?;
    Ok(ece_from_bins(&table, max_probs.len()))
}

/// Mean negative log probability of the true label, floored at `1e-12`.
pub fn nlpd(probs: &[Vector], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if probs.len() != labels.len() {
        return Err(Error::DimMismatch {
            expected: probs.len(),
            actual: labels.len(),
            context: "nlpd labels",
        });
    }
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        crate::numerics::validate_distribution(p, 1e-9)?;
        if y >= p.len() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: p.len(),
            });
        }
        total -= p[y].max(NLPD_FLOOR).ln();
    }
    Ok(total / probs.len() as f64)
}

/// Helper for callers holding a dataset: probabilities and labels.
pub fn model_calibration(model: &Mlp, examples: &[Example], bins: usize, threads: usize) -> Result<CalibrationReport> {
    let probs = predict_probs(model, examples, threads)?;
    CalibrationReport::from_probs(&probs, &labels(examples), bins)
}

/// Feature matrix at `layer` for a dataset; shared with the CLI.
pub fn features_at(model: &Mlp, examples: &[Example], layer: usize) -> Result<Matrix> {
    if layer == 0 {
        return feature_matrix(examples);
    }
    layer_features(model, examples, layer)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::network::{Activation, Layer, LayerSpec};

    fn ex(features: Vec<f64>, label: usize, group: usize) -> Example {
        Example {
            features,
            label,
            group,
            spurious_attr: (group / 3) as u8,
        }
    }

    /// Single linear layer whose logits strongly favour class 0.
    fn constant_model(c: usize, d: usize) -> Mlp {
        let mut bias = vec![0.0; c];
        bias[0] = 50.0;
        Mlp::from_layers(vec![Layer {
            spec: LayerSpec {
                in_dim: d,
                out_dim: c,
                activation: Activation::Identity,
            },
            weight: Matrix::zeros(c, d),
            bias,
        }])
        .unwrap()
    }

    #[test]
    fn constant_predictor_on_constant_labels() {
        let data: Vec<Example> = (0..20).map(|i| ex(vec![i as f64], 0, if i % 2 == 0 { 0 } else { 3 })).collect();
        let r = evaluate_groups(&constant_model(3, 1), &data).unwrap();
        assert_eq!(r.average_accuracy, 1.0);
        assert_eq!(r.worst_group_accuracy, 1.0);
        assert!(r.groups.iter().filter(|g| g.count > 0).all(|g| g.accuracy == 1.0));
    }

    #[test]
    fn random_labels_give_chance_accuracy() {
        let mut rng = RngStream::new(4);
        let n = 9000;
        let data: Vec<Example> = (0..n)
            .map(|_| {
                let y = rng.below(3);
                ex(vec![0.0], y, y)
            })
            .collect();
        let r = evaluate_groups(&constant_model(3, 1), &data).unwrap();
        let p = 1.0 / 3.0;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((r.average_accuracy - p).abs() <= 3.0 * sd);
        assert!(r.worst_group_accuracy <= r.average_accuracy);
    }

    #[test]
    fn report_is_permutation_invariant() {
        let mut rng = RngStream::new(5);
        let net = Mlp::new(2, &[4], 3, Activation::Relu, &mut rng).unwrap();
        let mut data: Vec<Example> = (0..200)
            .map(|_| {
                let y = rng.below(3);
                ex(vec![rng.standard_normal(), rng.standard_normal()], y, y + 3 * rng.below(2))
            })
            .collect();
        let a = evaluate_groups(&net, &data).unwrap();
        rng.shuffle(&mut data);
        let b = evaluate_groups(&net, &data).unwrap();
        assert_eq!(a, b);
        assert!(a.worst_group_accuracy <= a.average_accuracy);
        assert_eq!(a, evaluate_groups_threaded(&net, &data, 3).unwrap());
    }

    #[test]
    fn empty_dataset_errors() {
        assert!(matches!(evaluate_groups(&constant_model(3, 1), &[]), Err(Error::EmptyDataset)));
        assert!(matches!(ece(&[], &[], 10), Err(Error::EmptyDataset)));
        assert!(matches!(nlpd(&[], &[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn ece_examples() {
        assert_eq!(ece(&[1.0; 10], &[true; 10], 10).unwrap(), 0.0);
        let correct: Vec<bool> = (0..10).map(|i| i < 8).collect();
        assert_abs_diff_eq!(ece(&[0.8; 10], &correct, 10).unwrap(), 0.0, epsilon = 1e-12);
        let half: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        assert_abs_diff_eq!(ece(&[1.0; 10], &half, 10).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn nlpd_examples() {
        let one_hot = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        assert!(nlpd(&one_hot, &[0, 1]).unwrap() <= 1e-11);
        let uniform = vec![vec![1.0 / 3.0; 3]; 5];
        assert_abs_diff_eq!(nlpd(&uniform, &[0, 1, 2, 0, 1]).unwrap(), 3f64.ln(), epsilon = 1e-12);
        // Wrong one-hot hits the floor.
        assert_abs_diff_eq!(nlpd(&one_hot, &[1, 0]).unwrap(), -(1e-12f64).ln(), epsilon = 1e-9);
    }

    #[test]
    fn nlpd_matches_scalar_recomputation() {
        let mut rng = RngStream::new(6);
        let mut probs = Vec::new();
        let mut ys = Vec::new();
        let mut direct = 0.0;
        for _ in 0..100 {
            let raw: Vec<f64> = (0..4).map(|_| rng.uniform() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let y = rng.below(4);
            direct += -(raw[y] / s).ln();
            probs.push(p);
            ys.push(y);
        }
        assert_abs_diff_eq!(nlpd(&probs, &ys).unwrap(), direct / 100.0, epsilon = 1e-12);
    }

    #[test]
    fn margin_profile_extremes_and_missing_probe() {
        let mut rng = RngStream::new(7);
        let net = Mlp::new(2, &[3], 2, Activation::Relu, &mut rng).unwrap();
        let data: Vec<Example> = (0..20).map(|i| ex(vec![i as f64 * 0.1, 1.0], i % 2, i % 2)).collect();
        let confident = AuxHead {
            weight: Matrix::zeros(2, 3),
            bias: vec![100.0, 0.0],
        };
        let flat = AuxHead::zeros(2, 3);
        let p = margin_profile(&net, &vec![(1, confident)], &data, &[1]).unwrap();
        assert!(p.rows.iter().filter_map(|r| r.mean_margin).all(|m| m == 1.0));
        let p = margin_profile(&net, &vec![(1, flat)], &data, &[1]).unwrap();
        assert!(p.rows.iter().filter_map(|r| r.mean_margin).all(|m| m == 0.0));
        assert_eq!(p.rows.len(), 3);
        assert!(matches!(
            margin_profile(&net, &vec![], &data, &[1]),
            Err(Error::ProbeMissing(1))
        ));
        let csv = p.to_csv();
        assert_eq!(csv.lines().count(), 4);
    }
}
