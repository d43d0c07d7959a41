//! Seeded synthetic data: diagonal Gaussian mixtures, label and feature
//! corruption, and balanced fold plans.
//!
//! Binary data (two classes) carries labels in `{-1, +1}` with class index 0
//! mapped to `-1`; multi-class data carries labels `1..=C`. `class_of` always
//! records the generating class index, so it survives label corruption.

use std::io::{Read, Write};

use log::warn;
use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::seed::{derived_rng, rng_from_seed};

/// Per-class covariance. Only diagonal covariances are supported; a scalar is
/// an isotropic variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Covariance {
    Isotropic(f64),
    Diagonal(Vec<f64>),
}

impl Covariance {
    fn variance(&self, axis: usize) -> f64 {
        match self {
            Covariance::Isotropic(v) => *v,
            Covariance::Diagonal(v) => v[axis],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub class_means: Vec<Vec<f64>>,
    pub class_covariances: Vec<Covariance>,
    pub class_counts: Vec<usize>,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn dim(&self) -> usize {
        self.class_means.first().map_or(0, Vec::len)
    }

    /// `max(counts) / min(counts)`.
    pub fn imbalance_ratio(&self) -> f64 {
        let max = self.class_counts.iter().copied().max().unwrap_or(0);
        let min = self.class_counts.iter().copied().min().unwrap_or(0);
        max as f64 / min as f64
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.class_counts.len();
        if c < 2 {
            return Err(LabError::invalid("at least two classes are required"));
        }
        if self.class_means.len() != c || self.class_covariances.len() != c {
            return Err(LabError::invalid(
                "class_means, class_covariances and class_counts must have one entry per class",
            ));
        }
        let d = self.dim();
        if d == 0 {
            return Err(LabError::invalid("class means must have dimension >= 1"));
        }
        for (k, m) in self.class_means.iter().enumerate() {
            if m.len() != d {
                return Err(LabError::invalid(format!(
                    "class {k} mean has dimension {} but class 0 has {d}",
                    m.len()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(LabError::invalid(format!("class {k} mean is not finite")));
            }
        }
        for (k, cov) in self.class_covariances.iter().enumerate() {
            let ok = match cov {
                Covariance::Isotropic(v) => v.is_finite() && *v > 0.0,
                Covariance::Diagonal(v) => {
                    v.len() == d && v.iter().all(|x| x.is_finite() && *x > 0.0)
                }
            };
            if !ok {
                return Err(LabError::invalid(format!(
                    "class {k} covariance must be positive with dimension {d}"
                )));
            }
        }
        if let Some(k) = self.class_counts.iter().position(|&n| n == 0) {
            return Err(LabError::invalid(format!("class {k} has count 0")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<i64>,
    pub noise_flag: Vec<bool>,
    pub class_of: Vec<usize>,
    pub num_classes: usize,
    pub source_spec: Option<DatasetSpec>,
}

/// Label stored for class index `class` when there are `num_classes` classes.
pub fn label_for_class(class: usize, num_classes: usize) -> i64 {
    if num_classes == 2 {
        if class == 0 {
            -1
        } else {
            1
        }
    } else {
        class as i64 + 1
    }
}

/// Inverse of [`label_for_class`].
pub fn class_for_label(label: i64, num_classes: usize) -> Result<usize> {
    if num_classes == 2 {
        match label {
            -1 => Ok(0),
            1 => Ok(1),
            _ => Err(LabError::invalid(format!("binary label must be -1 or +1, got {label}"))),
        }
    } else if label >= 1 && label as usize <= num_classes {
        Ok(label as usize - 1)
    } else {
        Err(LabError::invalid(format!(
            "label {label} outside 1..={num_classes}"
        )))
    }
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<i64>,
        noise_flag: Vec<bool>,
        class_of: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n || noise_flag.len() != n || class_of.len() != n {
            return Err(LabError::invalid("per-sample columns must all have n entries"));
        }
        if num_classes < 2 {
            return Err(LabError::invalid("at least two classes are required"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(LabError::invalid("features must be finite"));
        }
        for &y in &labels {
            class_for_label(y, num_classes)?;
        }
        if class_of.iter().any(|&c| c >= num_classes) {
            return Err(LabError::invalid("class index out of range"));
        }
        Ok(Dataset {
            features,
            labels,
            noise_flag,
            class_of,
            num_classes,
            source_spec: None,
        })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_binary(&self) -> bool {
        self.num_classes == 2
    }

    /// Number of model outputs needed: one for binary data, `C` otherwise.
    pub fn num_outputs(&self) -> usize {
        if self.is_binary() {
            1
        } else {
            self.num_classes
        }
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    /// Row `i` as a contiguous slice (features are always stored row-major).
    pub fn x(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.features.as_slice().expect("row-major features")[i * d..(i + 1) * d]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &c in &self.class_of {
            counts[c] += 1;
        }
        counts
    }

    /// Copy holding the rows listed in `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let d = self.dim();
        let mut flat = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            flat.extend_from_slice(self.x(i));
        }
        Dataset {
            features: Array2::from_shape_vec((indices.len(), d), flat).expect("shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            noise_flag: indices.iter().map(|&i| self.noise_flag[i]).collect(),
            class_of: indices.iter().map(|&i| self.class_of[i]).collect(),
            num_classes: self.num_classes,
            source_spec: self.source_spec.clone(),
        }
    }

    /// Per-feature population standard deviation.
    pub fn feature_std(&self) -> Vec<f64> {
        let n = self.n() as f64;
        (0..self.dim())
            .map(|j| {
                let col = self.features.column(j);
                let m = col.sum() / n;
                (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
            })
            .collect()
    }

    pub fn mean_feature_std(&self) -> f64 {
        let s = self.feature_std();
        s.iter().sum::<f64>() / s.len() as f64
    }

    /// `sup_i ||x_i||`.
    pub fn max_row_norm(&self) -> f64 {
        (0..self.n())
            .map(|i| crate::stats::norm(self.x(i)))
            .fold(0.0, f64::max)
    }

    fn ensure_standard_layout(mut self) -> Self {
        if !self.features.is_standard_layout() {
            self.features = self.features.as_standard_layout().into_owned();
        }
        self
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("f{j}")).collect();
        header.extend(["label", "noise_flag", "class"].map(String::from));
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self.x(i).iter().map(|v| format_f64(*v)).collect();
            rec.push(self.labels[i].to_string());
            rec.push(u8::from(self.noise_flag[i]).to_string());
            rec.push(self.class_of[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV layout produced by [`Dataset::write_csv`]. The class
    /// count is inferred: labels confined to `{-1, +1}` mean binary data,
    /// anything else has at least three classes.
    pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let ncol = header.len();
        if ncol < 4
            || &header[ncol - 3] != "label"
            || &header[ncol - 2] != "noise_flag"
            || &header[ncol - 1] != "class"
        {
            return Err(LabError::invalid("dataset CSV header must end with label,noise_flag,class"));
        }
        let d = ncol - 3;
        for (j, name) in header.iter().take(d).enumerate() {
            if name != format!("f{j}") {
                return Err(LabError::invalid(format!("unexpected feature column '{name}'")));
            }
        }
        let mut flat = Vec::new();
        let mut labels = Vec::new();
        let mut noise = Vec::new();
        let mut class_of = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for j in 0..d {
                flat.push(parse_f64(&rec[j])?);
            }
            labels.push(
                rec[d]
                    .parse::<i64>()
                    .map_err(|e| LabError::invalid(format!("bad label: {e}")))?,
            );
            noise.push(match &rec[d + 1] {
                "0" => false,
                "1" => true,
                other => return Err(LabError::invalid(format!("bad noise_flag '{other}'"))),
            });
            class_of.push(
                rec[d + 2]
                    .parse::<usize>()
                    .map_err(|e| LabError::invalid(format!("bad class: {e}")))?,
            );
        }
        let n = labels.len();
        let binary = labels.iter().all(|&y| y == -1 || y == 1);
        let max_class = class_of.iter().copied().max().map_or(0, |c| c + 1);
        let num_classes = if binary {
            2
        } else {
            (labels.iter().copied().max().unwrap_or(0).max(0) as usize).max(max_class).max(3)
        };
        let features = Array2::from_shape_vec((n, d), flat)
            .map_err(|e| LabError::invalid(format!("feature shape: {e}")))?;
        Dataset::new(features, labels, noise, class_of, num_classes)
    }
}

/// 17 significant digits; parses back to the identical bit pattern.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| LabError::invalid(format!("bad number '{s}': {e}")))
}

pub fn gen_gaussian_mixture(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let d = spec.dim();
    let c = spec.num_classes();
    let n: usize = spec.class_counts.iter().sum();
    let mut rng = rng_from_seed(spec.seed);
    let mut flat = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut class_of = Vec::with_capacity(n);
    for (k, &count) in spec.class_counts.iter().enumerate() {
        let mean = &spec.class_means[k];
        let cov = &spec.class_covariances[k];
        for _ in 0..count {
            for (j, mu) in mean.iter().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                flat.push(mu + cov.variance(j).sqrt() * z);
            }
            labels.push(label_for_class(k, c));
            class_of.push(k);
        }
    }
    let mut ds = Dataset::new(
        Array2::from_shape_vec((n, d), flat).expect("shape"),
        labels,
        vec![false; n],
        class_of,
        c,
    )?;
    ds.source_spec = Some(spec.clone());
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    UniformLabel,
    FlipLabel,
    Feature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDirection {
    Adversarial,
    Promoted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub rate: f64,
    pub kind: NoiseKind,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "default_direction")]
    pub direction: NoiseDirection,
    pub seed: u64,
}

fn default_direction() -> NoiseDirection {
    NoiseDirection::Adversarial
}

impl NoiseSpec {
    pub fn label(kind: NoiseKind, rate: f64, seed: u64) -> Self {
        NoiseSpec {
            rate,
            kind,
            epsilon: 0.0,
            direction: NoiseDirection::Adversarial,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(LabError::invalid(format!("noise rate {} outside [0,1]", self.rate)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(LabError::invalid("epsilon must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Stream index of the per-sample Bernoulli draws; one uniform `f64` per
/// sample, corrupted when the draw is below the rate.
pub const BERNOULLI_STREAM: u64 = 0;
const CHOICE_STREAM: u64 = 1;

pub fn apply_label_noise(ds: &Dataset, spec: &NoiseSpec) -> Result<Dataset> {
    spec.validate()?;
    if spec.kind == NoiseKind::Feature {
        return Err(LabError::WrongOperation(
            "feature noise must go through apply_feature_noise".into(),
        ));
    }
    let c = ds.num_classes;
    let mut coin = derived_rng(spec.seed, &[BERNOULLI_STREAM]);
    let mut choice = derived_rng(spec.seed, &[CHOICE_STREAM]);
    let mut out = ds.clone();
    for i in 0..ds.n() {
        let u: f64 = coin.random();
        if u >= spec.rate {
            continue;
        }
        let current = class_for_label(ds.labels[i], c)?;
        let target = match spec.kind {
            NoiseKind::FlipLabel => (current + 1) % c,
            NoiseKind::UniformLabel => {
                let k = choice.random_range(0..c - 1);
                if k >= current {
                    k + 1
                } else {
                    k
                }
            }
            NoiseKind::Feature => unreachable!(),
        };
        out.labels[i] = label_for_class(target, c);
        out.noise_flag[i] = true;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNoiseOutcome {
    pub dataset: Dataset,
    pub perturbed: Vec<usize>,
    /// Samples selected for perturbation whose reference row was zero.
    pub skipped_zero_gradient: usize,
}

/// Default perturbation norm: 5% of the mean per-feature standard deviation.
pub fn default_feature_epsilon(ds: &Dataset) -> f64 {
    0.05 * ds.mean_feature_std()
}

/// Moves each selected `x_i` by a vector of norm `epsilon` along (promoted)
/// or against (adversarial) row `i` of `reference_gradient`.
pub fn apply_feature_noise(
    ds: &Dataset,
    spec: &NoiseSpec,
    reference_gradient: &Array2<f64>,
) -> Result<FeatureNoiseOutcome> {
    spec.validate()?;
    if spec.kind != NoiseKind::Feature {
        return Err(LabError::WrongOperation(
            "label noise must go through apply_label_noise".into(),
        ));
    }
    if reference_gradient.dim() != ds.features.dim() {
        return Err(LabError::invalid("reference gradient must be n x d"));
    }
    let sign = match spec.direction {
        NoiseDirection::Adversarial => -1.0,
        NoiseDirection::Promoted => 1.0,
    };
    let mut coin = derived_rng(spec.seed, &[BERNOULLI_STREAM]);
    let mut out = ds.clone();
    let mut perturbed = Vec::new();
    let mut skipped = 0;
    for i in 0..ds.n() {
        let u: f64 = coin.random();
        if u >= spec.rate || spec.epsilon == 0.0 {
            continue;
        }
        let g = reference_gradient.row(i);
        let gn = g.dot(&g).sqrt();
        if !(gn > 0.0 && gn.is_finite()) {
            skipped += 1;
            continue;
        }
        let mut row = out.features.row_mut(i);
        row.scaled_add(sign * spec.epsilon / gn, &g);
        out.noise_flag[i] = true;
        perturbed.push(i);
    }
    if skipped > 0 {
        warn!("feature noise: {skipped} samples left unperturbed (zero reference gradient)");
    }
    Ok(FeatureNoiseOutcome {
        dataset: out.ensure_standard_layout(),
        perturbed,
        skipped_zero_gradient: skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_of: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl FoldPlan {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Random balanced partition of `0..n` into `k` folds.
pub fn make_fold_plan(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || k > n {
        return Err(LabError::invalid(format!("fold count {k} must satisfy 2 <= K <= n = {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_from_seed(seed));
    let mut fold_of = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        fold_of[i] = pos % k;
    }
    Ok(FoldPlan { fold_of, k, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn two_class(counts: [usize; 2], seed: u64) -> DatasetSpec {
        DatasetSpec {
            class_means: vec![vec![-2.0], vec![2.0]],
            class_covariances: vec![Covariance::Isotropic(1.0), Covariance::Isotropic(1.0)],
            class_counts: counts.to_vec(),
            seed,
        }
    }

    #[test]
    fn zero_count_is_rejected() {
        let err = gen_gaussian_mixture(&two_class([0, 10], 1)).unwrap_err();
        assert!(matches!(err, LabError::InvalidInput(_)));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut spec = two_class([5, 5], 1);
        spec.class_means[1] = vec![1.0, 2.0];
        assert!(matches!(gen_gaussian_mixture(&spec), Err(LabError::InvalidInput(_))));
    }

    #[test]
    fn generation_contract() {
        let ds = gen_gaussian_mixture(&two_class([50, 50], 7)).unwrap();
        assert_eq!(ds.n(), 100);
        assert_eq!(ds.class_counts(), vec![50, 50]);
        assert!(ds.noise_flag.iter().all(|f| !f));
        assert!(ds.labels[..50].iter().all(|&y| y == -1));
        assert!(ds.labels[50..].iter().all(|&y| y == 1));
        assert_eq!(ds, gen_gaussian_mixture(&two_class([50, 50], 7)).unwrap());
    }

    #[test]
    fn imbalance_ratio_ten_to_one() {
        assert_eq!(two_class([100, 10], 0).imbalance_ratio(), 10.0);
    }

    #[test]
    fn zero_rate_label_noise_is_identity() {
        let ds = gen_gaussian_mixture(&two_class([20, 20], 2)).unwrap();
        let out = apply_label_noise(&ds, &NoiseSpec::label(NoiseKind::UniformLabel, 0.0, 9)).unwrap();
        assert_eq!(out, ds);
    }

    #[test]
    fn unit_rate_flips_every_binary_label() {
        let ds = gen_gaussian_mixture(&two_class([20, 20], 2)).unwrap();
        for kind in [NoiseKind::UniformLabel, NoiseKind::FlipLabel] {
            let out = apply_label_noise(&ds, &NoiseSpec::label(kind, 1.0, 9)).unwrap();
            assert!(out.noise_flag.iter().all(|&f| f));
            assert!(out.labels.iter().zip(&ds.labels).all(|(a, b)| *a == -*b));
            assert_eq!(out.class_of, ds.class_of);
        }
    }

    #[test]
    fn flip_noise_is_cyclic_for_multiclass() {
        let spec = DatasetSpec {
            class_means: vec![vec![0.0], vec![1.0], vec![2.0]],
            class_covariances: vec![Covariance::Isotropic(1.0); 3],
            class_counts: vec![3, 3, 3],
            seed: 1,
        };
        let ds = gen_gaussian_mixture(&spec).unwrap();
        let out = apply_label_noise(&ds, &NoiseSpec::label(NoiseKind::FlipLabel, 1.0, 0)).unwrap();
        for (a, b) in ds.labels.iter().zip(&out.labels) {
            assert_eq!(*b, (*a % 3) + 1);
        }
        let uni = apply_label_noise(&ds, &NoiseSpec::label(NoiseKind::UniformLabel, 1.0, 0)).unwrap();
        assert!(uni.labels.iter().zip(&ds.labels).all(|(a, b)| a != b));
    }

    #[test]
    fn label_noise_rejects_feature_kind() {
        let ds = gen_gaussian_mixture(&two_class([3, 3], 2)).unwrap();
        let spec = NoiseSpec::label(NoiseKind::Feature, 0.5, 0);
        assert!(matches!(apply_label_noise(&ds, &spec), Err(LabError::WrongOperation(_))));
    }

    fn feature_spec(direction: NoiseDirection, epsilon: f64) -> NoiseSpec {
        NoiseSpec {
            rate: 1.0,
            kind: NoiseKind::Feature,
            epsilon,
            direction,
            seed: 4,
        }
    }

    #[test]
    fn adversarial_step_is_antiparallel() {
        let ds = Dataset::new(array![[0.0, 0.0]], vec![1], vec![false], vec![1], 2).unwrap();
        let grad = array![[1.0, 0.0]];
        let out = apply_feature_noise(&ds, &feature_spec(NoiseDirection::Adversarial, 0.5), &grad)
            .unwrap();
        assert_eq!(out.dataset.x(0), &[-0.5, 0.0]);
        assert_eq!(out.perturbed, vec![0]);
        let out = apply_feature_noise(&ds, &feature_spec(NoiseDirection::Promoted, 0.5), &grad)
            .unwrap();
        assert_eq!(out.dataset.x(0), &[0.5, 0.0]);
    }

    #[test]
    fn zero_epsilon_and_zero_gradient_leave_data_unchanged() {
        let ds = gen_gaussian_mixture(&two_class([4, 4], 3)).unwrap();
        let grad = Array2::from_elem((8, 1), 1.0);
        let out = apply_feature_noise(&ds, &feature_spec(NoiseDirection::Adversarial, 0.0), &grad)
            .unwrap();
        assert_eq!(out.dataset, ds);
        let zero = Array2::zeros((8, 1));
        let out = apply_feature_noise(&ds, &feature_spec(NoiseDirection::Adversarial, 0.3), &zero)
            .unwrap();
        assert_eq!(out.dataset, ds);
        assert_eq!(out.skipped_zero_gradient, 8);
    }

    #[test]
    fn fold_plans_are_balanced() {
        let p = make_fold_plan(10, 5, 1).unwrap();
        assert_eq!(p.fold_sizes(), vec![2; 5]);
        let p = make_fold_plan(11, 5, 1).unwrap();
        let mut sizes = p.fold_sizes();
        sizes.sort();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
        assert_eq!(p, make_fold_plan(11, 5, 1).unwrap());
        assert!(make_fold_plan(4, 5, 0).is_err());
        assert!(make_fold_plan(4, 1, 0).is_err());
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let mut ds = gen_gaussian_mixture(&two_class([7, 5], 11)).unwrap();
        ds.noise_flag[3] = true;
        ds.labels[3] = -ds.labels[3];
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("f0,label,noise_flag,class\n"));
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.features, ds.features);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.noise_flag, ds.noise_flag);
        assert_eq!(back.class_of, ds.class_of);
        assert_eq!(back.num_classes, 2);
    }
}
