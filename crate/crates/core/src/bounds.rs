//! Weighted generalization bound on discrete (class-cell) densities.
//!
//! The bound reads
//! `test error ≤ I + II + III` with
//! `I = (1/n) Σ_i (p_t/p̃_s)(x_i) · 1(y_i f(x_i) < γ)`,
//! `II = L·sqrt(D + 1) / (γ q^{(q−1)/2} √n)` and `III = ε(γ, n, δ)`,
//! where `p̃_s ∝ w·p_s` is the weighted training density and `D` a χ²
//! divergence between the target and `p̃_s`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{LabError, Result};
use crate::models::{LossSpec, ModelFamily, ModelParams};
use crate::optimizer::{make_weights, train, DifficultyInputs, Hyper, SchemeKind, WeightScheme};

const SUM_TOL: f64 = 1e-12;

/// Target density `p_t`, source density `p_s`, per-cell weights `w` and the
/// weighted source density `p̃_s = w·p_s / Σ w·p_s` over a shared support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDensityPair {
    pub support: Vec<usize>,
    pub p_t: Vec<f64>,
    pub p_s: Vec<f64>,
    pub w: Vec<f64>,
    pub p_tilde_s: Vec<f64>,
}

fn check_probabilities(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(LabError::invalid(format!("{name} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(LabError::invalid(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

impl DiscreteDensityPair {
    pub fn new(support: Vec<usize>, p_t: Vec<f64>, p_s: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        let m = support.len();
        if m == 0 || p_t.len() != m || p_s.len() != m || w.len() != m {
            return Err(LabError::invalid("support, p_t, p_s and w must be non-empty and of equal length"));
        }
        check_probabilities("p_t", &p_t)?;
        check_probabilities("p_s", &p_s)?;
        if w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(LabError::invalid("cell weights must be positive and finite"));
        }
        let z: f64 = w.iter().zip(&p_s).map(|(a, b)| a * b).sum();
        let p_tilde_s = w.iter().zip(&p_s).map(|(a, b)| a * b / z).collect();
        Ok(DiscreteDensityPair {
            support,
            p_t,
            p_s,
            w,
            p_tilde_s,
        })
    }

    /// A pair whose weighted source density is given directly.
    pub fn from_densities(p_t: Vec<f64>, p_tilde_s: Vec<f64>) -> Result<Self> {
        let m = p_t.len();
        Self::new((0..m).collect(), p_t, p_tilde_s, vec![1.0; m])
    }

    /// `p_t / p̃_s` per cell; infinite where `p̃_s` is zero.
    pub fn ratios(&self) -> Vec<f64> {
        self.p_t.iter().zip(&self.p_tilde_s).map(|(t, s)| t / s).collect()
    }
}

/// Class-cell densities of a weighted training set. Returns the pair and the
/// per-sample density ratio `p_t/p̃_s` of each sample's cell.
///
/// Cell weights are the mean sample weight within the class. `target`
/// defaults to the empirical class priors. With `clean_target`, noise-flagged
/// samples are dropped from the source cells and get ratio 0.
pub fn class_cell_pair(
    ds: &Dataset,
    weights: &[f64],
    target: Option<&[f64]>,
    clean_target: bool,
) -> Result<(DiscreteDensityPair, Vec<f64>)> {
    if weights.len() != ds.n() {
        return Err(LabError::invalid("weight vector length differs from the dataset size"));
    }
    let c = ds.num_classes;
    let included: Vec<bool> = (0..ds.n()).map(|i| !(clean_target && ds.noise_flag[i])).collect();
    let mut counts = vec![0usize; c];
    let mut wsum = vec![0.0; c];
    for i in 0..ds.n() {
        if included[i] {
            counts[ds.class_of[i]] += 1;
            wsum[ds.class_of[i]] += weights[i];
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(LabError::invalid("no samples left to form source cells"));
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(LabError::SupportMismatch(k));
    }
    let p_s: Vec<f64> = counts.iter().map(|&n| n as f64 / total as f64).collect();
    let w: Vec<f64> = wsum.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect();
    let p_t = match target {
        Some(t) => {
            if t.len() != c {
                return Err(LabError::invalid("target priors must have one entry per class"));
            }
            t.to_vec()
        }
        None => p_s.clone(),
    };
    let pair = DiscreteDensityPair::new((0..c).collect(), p_t, p_s, w)?;
    let cell_ratio = pair.ratios();
    let ratios = (0..ds.n())
        .map(|i| if included[i] { cell_ratio[ds.class_of[i]] } else { 0.0 })
        .collect();
    Ok((pair, ratios))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// `Σ p̃_s·[(p̃_s/p_t)² − 1]`.
    #[default]
    SourceWeighted,
    /// Pearson `Σ p_t²/p̃_s − 1`.
    Standard,
}

pub fn chi2_divergence(pair: &DiscreteDensityPair, convention: Convention) -> Result<f64> {
    if let Some(k) = pair.p_t.iter().position(|&p| p <= 0.0) {
        return Err(LabError::SupportMismatch(k));
    }
    match convention {
        Convention::SourceWeighted => Ok(pair
            .p_tilde_s
            .iter()
            .zip(&pair.p_t)
            .map(|(s, t)| s * ((s / t).powi(2) - 1.0))
            .sum()),
        Convention::Standard => {
            if let Some(k) = pair.p_tilde_s.iter().position(|&p| p <= 0.0) {
                return Err(LabError::SupportMismatch(k));
            }
            Ok(pair
                .p_t
                .iter()
                .zip(&pair.p_tilde_s)
                .map(|(t, s)| t * t / s)
                .sum::<f64>()
                - 1.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub gamma: f64,
    pub delta: f64,
    pub q: u32,
    #[serde(rename = "L")]
    pub l: f64,
    pub n: usize,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(LabError::Domain("gamma must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(LabError::Domain("delta must lie in (0, 1)".into()));
        }
        if self.q < 2 {
            return Err(LabError::Domain("depth q must be >= 2".into()));
        }
        if !(self.l > 0.0 && self.l.is_finite()) {
            return Err(LabError::Domain("L must be positive".into()));
        }
        if self.n == 0 {
            return Err(LabError::Domain("n must be >= 1".into()));
        }
        if !(4.0 * self.l / self.gamma > 2.0) {
            return Err(LabError::Domain("4L/gamma must exceed 2".into()));
        }
        Ok(())
    }
}

/// `sqrt(ln(log₂(4L/γ))/n) + sqrt(ln(1/δ)/n)`.
pub fn epsilon_term(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    let n = inputs.n as f64;
    let inner = (4.0 * inputs.l / inputs.gamma).log2().ln();
    Ok((inner / n).sqrt() + ((1.0 / inputs.delta).ln() / n).sqrt())
}

/// Ratio-weighted fraction of margin violations `y f(x) < γ`, with the
/// indicator averaged over `models`.
pub fn term_i(models: &[ModelParams], ds: &Dataset, ratios: &[f64], gamma: f64) -> Result<f64> {
    if models.is_empty() {
        return Err(LabError::invalid("at least one model is required"));
    }
    if ratios.len() != ds.n() {
        return Err(LabError::invalid("one density ratio per sample is required"));
    }
    if ratios.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
        return Err(LabError::invalid("density ratios must be finite and nonnegative"));
    }
    if !(gamma > 0.0) {
        return Err(LabError::Domain("gamma must be positive".into()));
    }
    let per_model: Vec<Vec<f64>> = models
        .par_iter()
        .map(|m| m.margins(ds))
        .collect::<Result<_>>()?;
    let k = models.len() as f64;
    let mut total = 0.0;
    for (i, r) in ratios.iter().enumerate() {
        let violations = per_model.iter().filter(|m| m[i] < gamma).count() as f64;
        total += r * violations / k;
    }
    Ok(total / ds.n() as f64)
}

pub fn term_ii(pair: &DiscreteDensityPair, inputs: &BoundInputs, convention: Convention) -> Result<f64> {
    inputs.validate()?;
    let d = chi2_divergence(pair, convention)?;
    if d + 1.0 < 0.0 {
        return Err(LabError::Numeric(format!("divergence {d} below -1")));
    }
    let q = inputs.q as f64;
    Ok(inputs.l * (d + 1.0).sqrt() / (inputs.gamma * q.powf((q - 1.0) / 2.0) * (inputs.n as f64).sqrt()))
}

/// Fraction of samples with margin `≤ 0`.
pub fn test_error(model: &ModelParams, ds: &Dataset) -> Result<f64> {
    if ds.n() == 0 {
        return Err(LabError::invalid("empty test set"));
    }
    let m = model.margins(ds)?;
    Ok(m.iter().filter(|g| **g <= 0.0).count() as f64 / m.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub schema_version: u32,
    pub gamma: f64,
    pub delta: f64,
    pub q: u32,
    #[serde(rename = "L")]
    pub l: f64,
    pub n: usize,
    pub convention: Convention,
    #[serde(rename = "D")]
    pub d: f64,
    #[serde(rename = "I")]
    pub term_i: f64,
    #[serde(rename = "II")]
    pub term_ii: f64,
    #[serde(rename = "III")]
    pub term_iii: f64,
    pub total: f64,
    pub empirical: f64,
    pub log_convention: String,
    pub density_model: String,
}

/// Evaluates all three terms on the training set `train` (with per-sample
/// ratios) and compares against the mean test error of `models` on `test`.
pub fn evaluate_bound(
    models: &[ModelParams],
    train: &Dataset,
    ratios: &[f64],
    test: &Dataset,
    pair: &DiscreteDensityPair,
    inputs: &BoundInputs,
    convention: Convention,
) -> Result<BoundReport> {
    inputs.validate()?;
    if inputs.n != train.n() {
        return Err(LabError::invalid("BoundInputs.n must equal the training set size"));
    }
    let d = chi2_divergence(pair, convention)?;
    let t1 = term_i(models, train, ratios, inputs.gamma)?;
    let t2 = term_ii(pair, inputs, convention)?;
    let t3 = epsilon_term(inputs)?;
    let errs: Vec<f64> = models.iter().map(|m| test_error(m, test)).collect::<Result<_>>()?;
    Ok(BoundReport {
        schema_version: crate::SCHEMA_VERSION,
        gamma: inputs.gamma,
        delta: inputs.delta,
        q: inputs.q,
        l: inputs.l,
        n: inputs.n,
        convention,
        d,
        term_i: t1,
        term_ii: t2,
        term_iii: t3,
        total: t1 + t2 + t3,
        empirical: errs.iter().sum::<f64>() / errs.len() as f64,
        log_convention: "ln∘log2".into(),
        density_model: "class_cells".into(),
    })
}

/// `count` models trained with equal weights from init seeds
/// `seed_base + v`, each rescaled to unit parameter norm.
pub fn normalized_ensemble(
    family: &ModelFamily,
    loss: &LossSpec,
    hyper: &Hyper,
    ds: &Dataset,
    count: usize,
    seed_base: u64,
) -> Result<Vec<ModelParams>> {
    if count == 0 {
        return Err(LabError::invalid("ensemble needs at least one model"));
    }
    (0..count as u64)
        .into_par_iter()
        .map(|v| {
            let init = family.init(ds, seed_base + v)?;
            let (m, _) = train(&init, ds, &WeightScheme::equal(), loss, hyper, None, None)?;
            let nrm = m.norm();
            if nrm == 0.0 {
                return Err(LabError::UndefinedMargin);
            }
            Ok(m.scaled(1.0 / nrm))
        })
        .collect()
}

/// Median training margin pooled over `models`.
pub fn median_margin(models: &[ModelParams], ds: &Dataset) -> Result<f64> {
    let mut all = Vec::with_capacity(models.len() * ds.n());
    for m in models {
        all.extend(m.margins(ds)?);
    }
    Ok(crate::stats::median(&all))
}

/// Bound reports for hard-first weights `err^β` over `powers`, with fixed
/// `models` and class-cell densities whose target is the empirical class
/// distribution.
#[allow(clippy::too_many_arguments)]
pub fn hard_first_sweep(
    models: &[ModelParams],
    train_ds: &Dataset,
    test: &Dataset,
    errors: &[f64],
    powers: &[f64],
    inputs: &BoundInputs,
    convention: Convention,
) -> Result<Vec<BoundReport>> {
    powers
        .iter()
        .map(|&beta| {
            let mut scheme = WeightScheme::new(SchemeKind::ErrorHardFirst);
            scheme.power = beta;
            let w = make_weights(
                &scheme,
                train_ds.n(),
                &DifficultyInputs {
                    errors: Some(errors),
                    ..Default::default()
                },
            )?;
            let (pair, ratios) = class_cell_pair(train_ds, w.as_slice(), None, false)?;
            evaluate_bound(models, train_ds, &ratios, test, &pair, inputs, convention)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Dims, ModelKind};
    use ndarray::array;

    fn pair(p_t: &[f64], p_tilde: &[f64]) -> DiscreteDensityPair {
        DiscreteDensityPair::from_densities(p_t.to_vec(), p_tilde.to_vec()).unwrap()
    }

    #[test]
    fn divergence_examples() {
        let same = pair(&[0.3, 0.7], &[0.3, 0.7]);
        assert_eq!(chi2_divergence(&same, Convention::SourceWeighted).unwrap(), 0.0);
        assert!(chi2_divergence(&same, Convention::Standard).unwrap().abs() < 1e-15);
        let p = pair(&[0.5, 0.5], &[0.8, 0.2]);
        assert!((chi2_divergence(&p, Convention::SourceWeighted).unwrap() - 1.08).abs() < 1e-12);
        assert!((chi2_divergence(&p, Convention::Standard).unwrap() - 0.5625).abs() < 1e-12);
        let z = pair(&[0.0, 1.0], &[0.5, 0.5]);
        assert!(matches!(chi2_divergence(&z, Convention::SourceWeighted), Err(LabError::SupportMismatch(0))));
    }

    #[test]
    fn weighted_density_is_proportional() {
        let p = DiscreteDensityPair::new(vec![0, 1], vec![0.5, 0.5], vec![0.5, 0.5], vec![3.0, 1.0]).unwrap();
        assert_eq!(p.p_tilde_s, vec![0.75, 0.25]);
        assert!(DiscreteDensityPair::new(vec![0, 1], vec![0.5, 0.6], vec![0.5, 0.5], vec![1.0, 1.0]).is_err());
    }

    fn inputs(l: f64, gamma: f64, n: usize, delta: f64) -> BoundInputs {
        BoundInputs { gamma, delta, q: 2, l, n }
    }

    #[test]
    fn epsilon_examples() {
        let e = epsilon_term(&inputs(1.0, 0.5, 100, 0.1)).unwrap();
        assert!((e - 0.25656).abs() < 1e-5);
        assert!(epsilon_term(&inputs(1.0, 0.5, 100_000_000, 0.1)).unwrap() < 1e-3);
        assert!(matches!(epsilon_term(&inputs(1.0, 0.5, 100, 1.0)), Err(LabError::Domain(_))));
        assert!(matches!(epsilon_term(&inputs(1.0, 2.0, 100, 0.1)), Err(LabError::Domain(_))));
    }

    #[test]
    fn term_ii_at_zero_divergence() {
        let p = pair(&[0.5, 0.5], &[0.5, 0.5]);
        let t = term_ii(&p, &inputs(1.0, 1.0, 100, 0.1), Convention::SourceWeighted).unwrap();
        assert!((t - 1.0 / (2f64.sqrt() * 10.0)).abs() < 1e-12);
    }

    fn line() -> (Dataset, Vec<ModelParams>) {
        let ds = Dataset::new(array![[1.0], [2.0], [3.0]], vec![1, 1, 1], vec![false; 3], vec![1; 3], 2).unwrap();
        let dims = Dims { d: 1, h: 0, c: 1 };
        let a = ModelParams::new(ModelKind::Linear, dims, vec![1.0]).unwrap();
        let b = ModelParams::new(ModelKind::Linear, dims, vec![0.5]).unwrap();
        (ds, vec![a, b])
    }

    #[test]
    fn term_i_examples() {
        let (ds, models) = line();
        let ratios = [1.0, 2.0, 3.0];
        assert_eq!(term_i(&models[..1], &ds, &ratios, 0.5).unwrap(), 0.0);
        assert_eq!(term_i(&models[..1], &ds, &ratios, 10.0).unwrap(), 2.0);
        // Sample 0 violates γ = 0.8 only under the second model.
        assert!((term_i(&models, &ds, &ratios, 0.8).unwrap() - 0.5 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn test_error_counts_zero_margin() {
        let (ds, models) = line();
        assert_eq!(test_error(&models[0], &ds).unwrap(), 0.0);
        assert_eq!(test_error(&models[0].scaled(-1.0), &ds).unwrap(), 1.0);
        let zero = models[0].scaled(0.0);
        assert_eq!(test_error(&zero, &ds).unwrap(), 1.0);
    }

    #[test]
    fn equal_weights_on_source_target_give_zero_divergence() {
        let (ds, _) = line();
        let ds2 = Dataset::new(array![[1.0], [-1.0]], vec![1, -1], vec![false; 2], vec![1, 0], 2).unwrap();
        let (p, r) = class_cell_pair(&ds2, &[1.0, 1.0], None, false).unwrap();
        assert_eq!(chi2_divergence(&p, Convention::SourceWeighted).unwrap(), 0.0);
        assert_eq!(r, vec![1.0, 1.0]);
        assert!(matches!(class_cell_pair(&ds, &[1.0; 3], None, false), Err(LabError::SupportMismatch(0))));
    }
}
