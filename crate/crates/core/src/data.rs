//! Synthetic spurious-correlation data with (label, attribute) groups.
//!
//! Each example has `core_dim` class-informative features followed by
//! `spurious_dim` attribute-informative features. The binary attribute agrees
//! with a label-derived attribute (`label == C − 1`) with probability `rho`,
//! so with a large `spurious_separation` the attribute is an easy but
//! unreliable shortcut for the last class.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::numerics::{Matrix, RngStream, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vector,
    pub label: usize,
    pub group: usize,
    pub spurious_attr: u8,
}

/// `group = C·attr + label`
pub fn group_of(label: usize, attr: u8, num_classes: usize) -> usize {
    num_classes * attr as usize + label
}

/// Inverse of [`group_of`]: `(label, attr)`.
pub fn group_parts(group: usize, num_classes: usize) -> (usize, u8) {
    (group % num_classes, (group / num_classes) as u8)
}

/// The attribute value most examples of `label` carry.
pub fn majority_attr(label: usize, num_classes: usize) -> u8 {
    u8::from(label + 1 == num_classes)
}

pub fn is_majority_group(group: usize, num_classes: usize) -> bool {
    let (label, attr) = group_parts(group, num_classes);
    attr == majority_attr(label, num_classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n: usize,
    pub num_classes: usize,
    pub core_dim: usize,
    pub spurious_dim: usize,
    pub rho: f64,
    pub core_separation: f64,
    pub spurious_separation: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n: 10_000,
            num_classes: 3,
            core_dim: 10,
            spurious_dim: 5,
            rho: 0.95,
            core_separation: 1.0,
            spurious_separation: 3.0,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes = {} (need >= 2)", self.num_classes));
        }
        if self.core_dim == 0 || self.spurious_dim == 0 {
            return bad("core_dim and spurious_dim must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho = {} outside [0, 1]", self.rho));
        }
        if !(self.core_separation > 0.0) || !(self.spurious_separation > 0.0) {
            return bad("separations must be positive".into());
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad(format!("noise_std = {}", self.noise_std));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.core_dim + self.spurious_dim
    }

    pub fn num_groups(&self) -> usize {
        2 * self.num_classes
    }

    fn sample_features(&self, label: usize, attr: u8, rng: &mut RngStream) -> Vector {
        let mut f = Vec::with_capacity(self.feature_dim());
        // Core coordinate j belongs to class j mod C.
        for j in 0..self.core_dim {
            let mean = if j % self.num_classes == label {
                self.core_separation
            } else {
                0.0
            };
            f.push(mean + self.noise_std * rng.standard_normal());
        }
        let mean = self.spurious_separation * (f64::from(attr) - 0.5);
        for _ in 0..self.spurious_dim {
            f.push(mean + self.noise_std * rng.standard_normal());
        }
        f
    }

    fn example(&self, label: usize, attr: u8, rng: &mut RngStream) -> Example {
        Example {
            features: self.sample_features(label, attr, rng),
            label,
            group: group_of(label, attr, self.num_classes),
            spurious_attr: attr,
        }
    }
}

/// Draws `spec.n` examples: uniform label, attribute equal to the majority
/// attribute with probability `rho`.
pub fn generate(spec: &GeneratorSpec) -> Result<Vec<Example>> {
    spec.validate()?;
    let mut rng = RngStream::new(spec.seed).derive("generate");
    Ok((0..spec.n)
        .map(|_| {
            let label = rng.below(spec.num_classes);
            let maj = majority_attr(label, spec.num_classes);
            let attr = if rng.bernoulli(spec.rho) { maj } else { 1 - maj };
            spec.example(label, attr, &mut rng)
        })
        .collect())
}

/// Group-balanced set: `per_group` fresh draws from each (label, attribute)
/// cell's conditional distribution, in group order. Uses a stream independent
/// of [`generate`]'s.
pub fn generate_balanced(spec: &GeneratorSpec, per_group: usize) -> Result<Vec<Example>> {
    spec.validate()?;
    let root = RngStream::new(spec.seed).derive("balanced");
    let mut out = Vec::with_capacity(per_group * spec.num_groups());
    for g in 0..spec.num_groups() {
        let (label, attr) = group_parts(g, spec.num_classes);
        let mut rng = root.derive_index(g as u64);
        for _ in 0..per_group {
            out.push(spec.example(label, attr, &mut rng));
        }
    }
    Ok(out)
}

pub fn feature_matrix(examples: &[Example]) -> Result<Matrix> {
    Matrix::from_rows(&examples.iter().map(|e| e.features.as_slice()).collect::<Vec<_>>())
}

pub fn labels(examples: &[Example]) -> Vec<usize> {
    examples.iter().map(|e| e.label).collect()
}

/// Renders JSON-Lines, with an optional `#` header line carrying the spec.
pub fn to_jsonl(examples: &[Example], spec: Option<&GeneratorSpec>) -> Result<String> {
    let mut out = String::new();
    if let Some(spec) = spec {
        let header = serde_json::json!({ "generator": spec });
        let _ = writeln!(out, "# {header}");
    }
    for e in examples {
        let line = serde_json::to_string(e).map_err(|err| Error::InvalidSpec(err.to_string()))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn save(path: &Path, examples: &[Example], spec: Option<&GeneratorSpec>) -> Result<()> {
    write_atomic(path, to_jsonl(examples, spec)?.as_bytes())
}

/// Reads a JSON-Lines dataset. Lines starting with `#` and blank lines are
/// skipped; anything else must parse as an [`Example`].
pub fn load(path: &Path) -> Result<Vec<Example>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let ex: Example = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if ex.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "non-finite feature".into(),
            });
        }
        out.push(ex);
    }
    Ok(out)
}

/// The generator spec recorded in a dataset header, if any.
pub fn read_header(path: &Path) -> Result<Option<GeneratorSpec>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let Some(first) = BufReader::new(file).lines().next() else {
        return Ok(None);
    };
    let first = first.map_err(|e| Error::io(path, e))?;
    let Some(body) = first.trim().strip_prefix('#') else {
        return Ok(None);
    };
    #[derive(Deserialize)]
    struct Header {
        generator: GeneratorSpec,
    }
    Ok(serde_json::from_str::<Header>(body.trim())
        .ok()
        .map(|h| h.generator))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n`, then consecutive partitions sized
/// `round(f·n)`. When the fractions sum to one the last part absorbs rounding
/// so the split covers every index.
pub fn split(n: usize, fractions: &[f64], seed: u64) -> Result<Split> {
    if fractions.is_empty() || fractions.len() > 3 {
        return Err(Error::InvalidFractions(format!(
            "expected 1 to 3 fractions, got {}",
            fractions.len()
        )));
    }
    if fractions.iter().any(|f| !(*f > 0.0)) {
        return Err(Error::InvalidFractions(format!("{fractions:?} must all be positive")));
    }
    let total: f64 = fractions.iter().sum();
    if total > 1.0 + 1e-9 {
        return Err(Error::InvalidFractions(format!("{fractions:?} sum to {total}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(seed).derive("split").shuffle(&mut order);
    let mut parts: Vec<Vec<usize>> = Vec::with_capacity(3);
    let mut start = 0;
    for (k, f) in fractions.iter().enumerate() {
        let covering = k + 1 == fractions.len() && (total - 1.0).abs() <= 1e-9;
        let len = if covering {
            n - start
        } else {
            ((f * n as f64).round() as usize).min(n - start)
        };
        parts.push(order[start..start + len].to_vec());
        start += len;
    }
    parts.resize(3, Vec::new());
    let test = parts.pop().unwrap_or_default();
    let val = parts.pop().unwrap_or_default();
    let train = parts.pop().unwrap_or_default();
    Ok(Split { train, val, test })
}

pub fn select(examples: &[Example], idx: &[usize]) -> Vec<Example> {
    idx.iter().map(|&i| examples[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{train_aux, AuxHead, AuxTrainSettings};
    use crate::numerics::argmax;

    fn spec(n: usize, rho: f64, seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            n,
            rho,
            seed,
            ..Default::default()
        }
    }

    fn group_counts(ex: &[Example], groups: usize) -> Vec<usize> {
        let mut c = vec![0; groups];
        for e in ex {
            c[e.group] += 1;
        }
        c
    }

    #[test]
    fn full_correlation_leaves_minority_groups_empty() {
        let ex = generate(&spec(2000, 1.0, 1)).unwrap();
        assert!(ex.iter().all(|e| is_majority_group(e.group, 3)));
    }

    #[test]
    fn half_correlation_balances_cells() {
        let n = 10_000;
        let ex = generate(&spec(n, 0.5, 2)).unwrap();
        let p = 1.0 / 6.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in group_counts(&ex, 6) {
            assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sd, "{c}");
        }
    }

    #[test]
    fn majority_fraction_tracks_rho() {
        let n = 10_000;
        let rho = 0.95;
        let ex = generate(&spec(n, rho, 3)).unwrap();
        let maj = ex.iter().filter(|e| is_majority_group(e.group, 3)).count() as f64;
        let sd = (n as f64 * rho * (1.0 - rho)).sqrt();
        assert!((maj - n as f64 * rho).abs() <= 3.0 * sd);
    }

    #[test]
    fn group_encoding_round_trips() {
        for e in generate(&spec(500, 0.7, 4)).unwrap() {
            assert_eq!(group_parts(e.group, 3), (e.label, e.spurious_attr));
            assert_eq!(group_of(e.label, e.spurious_attr, 3), e.group);
        }
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let s = spec(300, 0.9, 5);
        let a = to_jsonl(&generate(&s).unwrap(), Some(&s)).unwrap();
        let b = to_jsonl(&generate(&s).unwrap(), Some(&s)).unwrap();
        assert_eq!(a, b);
        let c = to_jsonl(&generate(&spec(300, 0.9, 6)).unwrap(), None).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for bad in [
            GeneratorSpec { rho: 1.5, ..Default::default() },
            GeneratorSpec { core_dim: 0, ..Default::default() },
            GeneratorSpec { num_classes: 1, ..Default::default() },
            GeneratorSpec { spurious_separation: 0.0, ..Default::default() },
        ] {
            assert!(matches!(generate(&bad), Err(Error::InvalidSpec(_))));
        }
    }

    #[test]
    fn balanced_set_has_every_group() {
        let ex = generate_balanced(&spec(0, 1.0, 7), 100).unwrap();
        assert_eq!(group_counts(&ex, 6), vec![100; 6]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        save(&p, &[], None).unwrap();
        assert!(load(&p).unwrap().is_empty());

        let s = spec(1000, 0.9, 8);
        let ex = generate(&s).unwrap();
        save(&p, &ex, Some(&s)).unwrap();
        let back = load(&p).unwrap();
        assert_eq!(back, ex);
        for (a, b) in back.iter().zip(&ex) {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.features), bits(&b.features));
        }
        assert_eq!(read_header(&p).unwrap(), Some(s));
    }

    #[test]
    fn malformed_line_names_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&generate(&spec(1, 0.9, 1)).unwrap()[0]).unwrap();
        std::fs::write(&p, format!("# header\n{good}\n{{\"features\": [1.0], \"label\": \n")).unwrap();
        match load(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_examples() {
        let s = split(50, &[1.0], 1).unwrap();
        assert_eq!(s.train.len(), 50);
        assert!(s.val.is_empty() && s.test.is_empty());

        let a = split(1000, &[0.8, 0.1, 0.1], 9).unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (800, 100, 100));
        assert_eq!(a, split(1000, &[0.8, 0.1, 0.1], 9).unwrap());
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());

        assert!(split(10, &[0.8, 0.3], 1).is_err());
        assert!(split(10, &[0.0], 1).is_err());
        assert!(split(10, &[], 1).is_err());
    }

    #[test]
    fn split_keeps_group_proportions() {
        let ex = generate(&spec(10_000, 0.9, 10)).unwrap();
        let s = split(ex.len(), &[0.8, 0.1, 0.1], 3).unwrap();
        let overall = group_counts(&ex, 6);
        for part in [&s.train, &s.val, &s.test] {
            let counts = group_counts(&select(&ex, part), 6);
            for g in 0..6 {
                let p = overall[g] as f64 / ex.len() as f64;
                let m = part.len() as f64;
                let sd = (m * p * (1.0 - p)).sqrt();
                assert!((counts[g] as f64 - m * p).abs() <= 4.0 * sd + 1.0);
            }
        }
    }

    #[test]
    fn spurious_probe_plants_the_shortcut() {
        // A linear probe on the spurious coordinates alone beats chance on
        // majority groups and falls below chance on minority groups.
        let s = spec(6000, 0.95, 12);
        let train = generate(&s).unwrap();
        let spur = |ex: &[Example]| {
            Matrix::from_rows(
                &ex.iter()
                    .map(|e| e.features[s.core_dim..].to_vec())
                    .collect::<Vec<_>>(),
            )
            .unwrap()
        };
        let head = train_aux(
            AuxHead::zeros(3, s.spurious_dim),
            &spur(&train),
            &labels(&train),
            &AuxTrainSettings::default(),
            &mut RngStream::new(1),
        )
        .unwrap();
        let test = generate_balanced(&s, 300).unwrap();
        let x = spur(&test);
        let chance = 1.0 / 3.0;
        for g in 0..6 {
            let idx: Vec<usize> = (0..test.len()).filter(|&i| test[i].group == g).collect();
            let acc = idx
                .iter()
                .filter(|&&i| argmax(&head.forward(x.row(i)).unwrap()) == test[i].label)
                .count() as f64
                / idx.len() as f64;
            if is_majority_group(g, 3) {
                assert!(acc > chance, "group {g}: {acc}");
            } else {
                assert!(acc < chance, "group {g}: {acc}");
            }
        }
    }
}
