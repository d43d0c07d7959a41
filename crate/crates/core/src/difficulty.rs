//! Per-sample generalization error as a difficulty measure.
//!
//! [`estimate_error_profile`] repeats K-fold training `R` times with fresh
//! fold plans (optionally on Gaussian-perturbed training features) and, for
//! every sample, collects the loss, margin and output of the model whose
//! training portion excluded it. From these it derives the error, a
//! bias/variance split, margin-distribution moments, epistemic uncertainty
//! and normality Z-scores.

use std::io::Write;

use log::warn;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{format_f64, make_fold_plan, Dataset};
use crate::error::{LabError, Result};
use crate::models::{loss_value, margin_of_outputs, LossKind, LossSpec, ModelFamily};
use crate::optimizer::{train, Hyper, WeightScheme};
use crate::seed::{derive_seed, derived_rng};
use crate::stats::{mean, variance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    Kfold,
    Perturb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorEstimatorConfig {
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_mode")]
    pub mode: EstimatorMode,
    /// Variance of the feature perturbation in perturb mode; defaults to
    /// `0.01 ×` the mean feature standard deviation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    pub family: ModelFamily,
    pub loss: LossSpec,
    pub hyper: Hyper,
    pub master_seed: u64,
}

fn default_folds() -> usize {
    5
}

fn default_repeats() -> usize {
    20
}

fn default_mode() -> EstimatorMode {
    EstimatorMode::Kfold
}

impl ErrorEstimatorConfig {
    pub fn new(family: ModelFamily, loss: LossSpec, hyper: Hyper, master_seed: u64) -> Self {
        ErrorEstimatorConfig {
            folds: 5,
            repeats: 20,
            mode: EstimatorMode::Kfold,
            delta: None,
            family,
            loss,
            hyper,
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(LabError::invalid("K must be >= 2"));
        }
        if self.repeats < 1 {
            return Err(LabError::invalid("R must be >= 1"));
        }
        if let Some(d) = self.delta {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(LabError::invalid("delta must be >= 0"));
            }
        }
        self.loss.validate()?;
        self.hyper.validate()
    }
}

/// How `bias` and `variance` relate to `err` in a profile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decomposition {
    /// Squared loss: `err = bias + variance` holds exactly.
    ExactSquared,
    /// Other losses: `bias = ℓ(mean prediction)` and `variance = err − bias`,
    /// which may be negative.
    LossOfMeanResidual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileMeta {
    pub loss: LossKind,
    pub decomposition: Decomposition,
    pub folds: usize,
    pub repeats_requested: usize,
    pub repeats_used: usize,
    pub repeats_discarded: Vec<usize>,
    pub mode: EstimatorMode,
    pub delta: f64,
    pub master_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DifficultyProfile {
    pub err: Vec<f64>,
    pub bias: Vec<f64>,
    pub variance: Vec<f64>,
    /// Held-out functional margins, one per kept repeat.
    pub margin_samples: Vec<Vec<f64>>,
    /// Held-out head outputs, `[sample][repeat][output]`.
    pub predictions: Vec<Vec<Vec<f64>>>,
    pub mu_hat: Vec<f64>,
    pub sigma2_hat: Vec<f64>,
    pub uncertainty: Vec<f64>,
    /// NaN when fewer than 8 repeats or zero margin variance.
    pub z_skew: Vec<f64>,
    pub z_kurt: Vec<f64>,
    pub noise_flag: Vec<bool>,
    pub class_of: Vec<usize>,
    /// Mean input-gradient of the held-out margin, `n × d`.
    pub reference_gradient: Array2<f64>,
    pub meta: ProfileMeta,
}

impl DifficultyProfile {
    pub fn n(&self) -> usize {
        self.err.len()
    }

    /// Fraction of repeats in which each sample was classified correctly.
    pub fn correct_probability(&self) -> Vec<f64> {
        self.margin_samples
            .iter()
            .map(|m| m.iter().filter(|g| **g > 0.0).count() as f64 / m.len() as f64)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "idx", "err", "bias", "variance", "mu_hat", "sigma2_hat", "uncertainty", "z_skew",
            "z_kurt", "noise_flag", "class",
        ])?;
        for i in 0..self.n() {
            w.write_record([
                i.to_string(),
                format_f64(self.err[i]),
                format_f64(self.bias[i]),
                format_f64(self.variance[i]),
                format_f64(self.mu_hat[i]),
                format_f64(self.sigma2_hat[i]),
                format_f64(self.uncertainty[i]),
                format_f64(self.z_skew[i]),
                format_f64(self.z_kurt[i]),
                u8::from(self.noise_flag[i]).to_string(),
                self.class_of[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One row of a profile CSV, as read back by the reporter.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct ProfileRow {
    pub idx: usize,
    pub err: f64,
    pub bias: f64,
    pub variance: f64,
    pub mu_hat: f64,
    pub sigma2_hat: f64,
    pub uncertainty: f64,
    pub z_skew: f64,
    pub z_kurt: f64,
    pub noise_flag: u8,
    pub class: usize,
}

pub fn read_profile_csv<R: std::io::Read>(reader: R) -> Result<Vec<ProfileRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

struct HeldOut {
    idx: usize,
    out: Vec<f64>,
    loss: f64,
    margin: f64,
    grad: Vec<f64>,
}

struct FoldRun {
    repeat: usize,
    held_out: Result<Vec<HeldOut>>,
}

fn run_fold(
    ds: &Dataset,
    train_features: &Array2<f64>,
    cfg: &ErrorEstimatorConfig,
    repeat: usize,
    fold: usize,
    test_idx: &[usize],
    train_idx: &[usize],
) -> Result<Vec<HeldOut>> {
    let mut train_set = ds.subset(train_idx);
    if train_features.nrows() > 0 {
        for (r, &i) in train_idx.iter().enumerate() {
            train_set.features.row_mut(r).assign(&train_features.row(i));
        }
    }
    let seed = derive_seed(cfg.master_seed, &[repeat as u64, fold as u64]);
    let init = cfg.family.init(ds, seed)?;
    let loss = LossSpec {
        kind: cfg.loss.kind,
        lambda: cfg.loss.lambda,
        r: cfg.loss.r,
    };
    let scheme = WeightScheme::equal();
    let (model, _) = train(&init, &train_set, &scheme, &loss, &cfg.hyper, None, None)?;
    let plain = LossSpec::new(cfg.loss.kind);
    test_idx
        .iter()
        .map(|&i| {
            let x = ds.x(i);
            let y = ds.labels[i];
            let out = model.forward(x)?;
            Ok(HeldOut {
                idx: i,
                loss: loss_value(&plain, &out, y)?,
                margin: margin_of_outputs(&out, y)?,
                grad: model.margin_input_gradient(x, y)?,
                out,
            })
        })
        .collect()
}

/// Resampled held-out error profile. Inner runs execute in parallel on the
/// current rayon pool; aggregation order is fixed, so the result depends only
/// on `(ds, cfg)`.
pub fn estimate_error_profile(ds: &Dataset, cfg: &ErrorEstimatorConfig) -> Result<DifficultyProfile> {
    cfg.validate()?;
    cfg.loss.check_head(ds.num_outputs())?;
    let n = ds.n();
    if cfg.folds > n {
        return Err(LabError::invalid("more folds than samples"));
    }
    let delta = match cfg.mode {
        EstimatorMode::Kfold => 0.0,
        EstimatorMode::Perturb => cfg.delta.unwrap_or(0.01 * ds.mean_feature_std()),
    };
    let plans: Vec<_> = (0..cfg.repeats)
        .map(|r| make_fold_plan(n, cfg.folds, derive_seed(cfg.master_seed, &[r as u64, u64::MAX])))
        .collect::<Result<_>>()?;
    let perturbed: Vec<Array2<f64>> = (0..cfg.repeats)
        .map(|r| {
            if cfg.mode == EstimatorMode::Kfold {
                return Array2::zeros((0, 0));
            }
            let mut rng = derived_rng(cfg.master_seed, &[r as u64, u64::MAX - 1]);
            let sd = delta.sqrt();
            ds.features
                .mapv(|v| v + sd * rng.sample::<f64, _>(StandardNormal))
        })
        .collect();

    let jobs: Vec<(usize, usize)> = (0..cfg.repeats)
        .flat_map(|r| (0..cfg.folds).map(move |k| (r, k)))
        .collect();
    let runs: Vec<FoldRun> = jobs
        .par_iter()
        .map(|&(r, k)| FoldRun {
            repeat: r,
            held_out: run_fold(
                ds,
                &perturbed[r],
                cfg,
                r,
                k,
                &plans[r].test_indices(k),
                &plans[r].train_indices(k),
            ),
        })
        .collect();

    let mut discarded = Vec::new();
    for run in &runs {
        if let Err(e) = &run.held_out {
            if !discarded.contains(&run.repeat) {
                warn!("repeat {} discarded: {e}", run.repeat);
                discarded.push(run.repeat);
            }
        }
    }
    discarded.sort_unstable();
    if 2 * discarded.len() > cfg.repeats {
        return Err(LabError::EstimationFailure {
            discarded: discarded.len(),
            total: cfg.repeats,
        });
    }

    let d = ds.dim();
    let mut margins = vec![Vec::new(); n];
    let mut losses = vec![Vec::new(); n];
    let mut preds = vec![Vec::new(); n];
    let mut grad_sum = Array2::<f64>::zeros((n, d));
    for run in runs {
        if discarded.contains(&run.repeat) {
            continue;
        }
        for h in run.held_out.expect("kept repeats succeeded") {
            margins[h.idx].push(h.margin);
            losses[h.idx].push(h.loss);
            preds[h.idx].push(h.out);
            for (j, g) in h.grad.iter().enumerate() {
                grad_sum[(h.idx, j)] += g;
            }
        }
    }
    let used = cfg.repeats - discarded.len();
    let plain = LossSpec::new(cfg.loss.kind);
    let mut profile = DifficultyProfile {
        err: Vec::with_capacity(n),
        bias: Vec::with_capacity(n),
        variance: Vec::with_capacity(n),
        margin_samples: margins,
        predictions: preds,
        mu_hat: Vec::with_capacity(n),
        sigma2_hat: Vec::with_capacity(n),
        uncertainty: Vec::with_capacity(n),
        z_skew: Vec::with_capacity(n),
        z_kurt: Vec::with_capacity(n),
        noise_flag: ds.noise_flag.clone(),
        class_of: ds.class_of.clone(),
        reference_gradient: grad_sum / used as f64,
        meta: ProfileMeta {
            loss: cfg.loss.kind,
            decomposition: if cfg.loss.kind == LossKind::Squared {
                Decomposition::ExactSquared
            } else {
                Decomposition::LossOfMeanResidual
            },
            folds: cfg.folds,
            repeats_requested: cfg.repeats,
            repeats_used: used,
            repeats_discarded: discarded,
            mode: cfg.mode,
            delta,
            master_seed: cfg.master_seed,
        },
    };
    for i in 0..n {
        let err = mean(&losses[i]);
        let c = profile.predictions[i][0].len();
        let mean_out: Vec<f64> = (0..c)
            .map(|k| mean(&profile.predictions[i].iter().map(|p| p[k]).collect::<Vec<_>>()))
            .collect();
        let bias = loss_value(&plain, &mean_out, ds.labels[i])?;
        let variance_term = err - bias;
        let m = &profile.margin_samples[i];
        let (zs, zk) = if m.len() >= 8 {
            gaussianity_z(m).unwrap_or((f64::NAN, f64::NAN))
        } else {
            (f64::NAN, f64::NAN)
        };
        profile.err.push(err);
        profile.bias.push(bias);
        profile.variance.push(variance_term);
        profile.mu_hat.push(mean(m));
        profile.sigma2_hat.push(variance(m));
        profile.uncertainty.push(vector_epistemic(&profile.predictions[i], 0.0));
        profile.z_skew.push(zs);
        profile.z_kurt.push(zk);
    }
    Ok(profile)
}

/// `τ⁻¹ + mean_k ‖f_k‖² − ‖mean_k f_k‖²` for vector-valued predictions.
fn vector_epistemic(preds: &[Vec<f64>], tau_inv: f64) -> f64 {
    let k = preds.len() as f64;
    let c = preds[0].len();
    let second: f64 = preds.iter().map(|p| p.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / k;
    let first_sq: f64 = (0..c)
        .map(|j| {
            let m = preds.iter().map(|p| p[j]).sum::<f64>() / k;
            m * m
        })
        .sum();
    tau_inv + second - first_sq
}

/// `e^{−μ + σ²/2}`; overflow yields `+inf`.
pub fn closed_form_error(mu: f64, sigma2: f64) -> Result<f64> {
    if !(sigma2 >= 0.0) {
        return Err(LabError::invalid("sigma2 must be >= 0"));
    }
    Ok((-mu + 0.5 * sigma2).exp())
}

/// Per-sample `τ⁻¹ + (1/K) Σ_k f_k² − ((1/K) Σ_k f_k)²` for a `K × n`
/// prediction matrix given as `K` rows.
pub fn epistemic_uncertainty(predictions: &[Vec<f64>], tau_inv: f64) -> Result<Vec<f64>> {
    if predictions.len() < 2 {
        return Err(LabError::invalid("need K >= 2 predictions per sample"));
    }
    if !(tau_inv >= 0.0) {
        return Err(LabError::invalid("tau_inv must be >= 0"));
    }
    let n = predictions[0].len();
    if predictions.iter().any(|row| row.len() != n) {
        return Err(LabError::invalid("prediction rows must have equal length"));
    }
    let k = predictions.len() as f64;
    Ok((0..n)
        .map(|i| {
            let s1: f64 = predictions.iter().map(|row| row[i]).sum::<f64>() / k;
            let s2: f64 = predictions.iter().map(|row| row[i] * row[i]).sum::<f64>() / k;
            tau_inv + s2 - s1 * s1
        })
        .collect())
}

/// Standard error of the sample skewness for `n` observations.
pub fn skewness_se(n: f64) -> f64 {
    (6.0 * n * (n - 1.0) / ((n - 2.0) * (n + 1.0) * (n + 3.0))).sqrt()
}

/// Standard error of the sample excess kurtosis for `n` observations.
pub fn kurtosis_se(n: f64) -> f64 {
    2.0 * skewness_se(n) * ((n * n - 1.0) / ((n - 3.0) * (n + 5.0))).sqrt()
}

/// Bias-adjusted sample skewness `G1` and excess kurtosis `G2`, the
/// estimators the standard errors above are derived for.
pub fn sample_skew_kurt(samples: &[f64]) -> Result<(f64, f64)> {
    let n = samples.len() as f64;
    let m = mean(samples);
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for x in samples {
        let d = x - m;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    if !(m2 > 0.0) {
        return Err(LabError::DegenerateSample("zero variance".into()));
    }
    let g1 = m3 / m2.powf(1.5);
    let g2 = m4 / (m2 * m2) - 3.0;
    let big_g1 = g1 * (n * (n - 1.0)).sqrt() / (n - 2.0);
    let big_g2 = (n - 1.0) / ((n - 2.0) * (n - 3.0)) * ((n + 1.0) * g2 + 6.0);
    Ok((big_g1, big_g2))
}

/// Z-scores of skewness and excess kurtosis; `|z| ≤ 1.96` is consistent
/// with normality at the 5% level.
pub fn gaussianity_z(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.len() < 8 {
        return Err(LabError::invalid("need at least 8 samples"));
    }
    let (g1, g2) = sample_skew_kurt(samples)?;
    let n = samples.len() as f64;
    Ok((g1 / skewness_se(n), g2 / kurtosis_se(n)))
}

/// Critical value of the two-sided 5% normal test.
pub const Z_CRITICAL: f64 = 1.96;

/// Relative gap between the log-normal closed form evaluated at the sample
/// moments and the empirical mean of `e^{−γ}`.
pub fn lognormal_gap(margins: &[f64]) -> Result<f64> {
    if margins.is_empty() {
        return Err(LabError::invalid("empty margin samples"));
    }
    let empirical = mean(&margins.iter().map(|g| (-g).exp()).collect::<Vec<_>>());
    let closed = closed_form_error(mean(margins), variance(margins))?;
    Ok((closed - empirical).abs() / empirical)
}

/// Per-sample [`lognormal_gap`] of an exponential-loss profile.
pub fn verify_lognormal_law(profile: &DifficultyProfile) -> Result<Vec<f64>> {
    if profile.meta.loss != LossKind::Exponential {
        return Err(LabError::invalid("the log-normal law applies to exponential-loss profiles"));
    }
    profile.margin_samples.iter().map(|m| lognormal_gap(m)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_values() {
        assert_eq!(closed_form_error(0.0, 0.0).unwrap(), 1.0);
        assert_eq!(closed_form_error(1.0, 2.0).unwrap(), 1.0);
        assert!((closed_form_error(2.0, 0.0).unwrap() - 0.135_335_283_236_612_7).abs() < 1e-15);
        assert_eq!(closed_form_error(-1e6, 0.0).unwrap(), f64::INFINITY);
        assert!(closed_form_error(0.0, -1.0).is_err());
    }

    #[test]
    fn epistemic_examples() {
        let same = vec![vec![0.7, -1.0]; 3];
        assert!(epistemic_uncertainty(&same, 0.0).unwrap().iter().all(|u| u.abs() < 1e-15));
        let two = vec![vec![0.0], vec![2.0]];
        assert_eq!(epistemic_uncertainty(&two, 0.0).unwrap(), vec![1.0]);
        assert_eq!(epistemic_uncertainty(&two, 0.5).unwrap(), vec![1.5]);
        assert!(epistemic_uncertainty(&two[..1], 0.0).is_err());
    }

    #[test]
    fn symmetric_sample_has_zero_skew() {
        let s: Vec<f64> = [-1.0, 0.0, 1.0].repeat(3);
        let (zs, _) = gaussianity_z(&s).unwrap();
        assert_eq!(zs, 0.0);
        assert!(matches!(gaussianity_z(&[1.0; 9]), Err(LabError::DegenerateSample(_))));
        assert!(gaussianity_z(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn degenerate_margins_have_zero_gap() {
        assert_eq!(lognormal_gap(&[0.8; 5]).unwrap(), 0.0);
        assert!(lognormal_gap(&[]).is_err());
    }

    #[test]
    fn standard_errors_match_reference_values() {
        // Values for n = 100 from the usual SPSS-style tables.
        assert!((skewness_se(100.0) - 0.2413).abs() < 1e-4);
        assert!((kurtosis_se(100.0) - 0.4783).abs() < 1e-4);
    }
}
