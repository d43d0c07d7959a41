//! Executable checks of the difficulty claims, each producing a
//! [`CheckVerdict`] with clause-level statistics.

use std::collections::BTreeMap;
use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    apply_feature_noise, apply_label_noise, class_for_label, default_feature_epsilon, gen_gaussian_mixture,
    label_for_class, Dataset, DatasetSpec, NoiseDirection, NoiseKind, NoiseSpec,
};
use crate::difficulty::{closed_form_error, estimate_error_profile, DifficultyProfile, ErrorEstimatorConfig, Z_CRITICAL};
use crate::error::{LabError, Result};
use crate::maxmargin::solve_max_margin;
use crate::models::{
    ground_truth_probability, loss_value, sample_losses, LossKind, LossSpec, ModelFamily, ModelKind, ModelParams,
};
use crate::optimizer::{
    make_weights, minimize_objective, normalized_margin, train, DifficultyInputs, Hyper, SchemeKind, WeightScheme,
};
use crate::seed::{config_digest, derive_seed};
use crate::stats::{bootstrap_mean_diff_ci, mean, median, spearman};

pub const BOOTSTRAP_LEVEL: f64 = 0.95;
pub const PAIR_AGREEMENT: f64 = 0.95;
pub const GAUSSIAN_FRACTION: f64 = 0.80;
pub const MARGIN_REL_TOL: f64 = 0.05;
pub const MONOTONE_TOL: f64 = 1e-3;
pub const CORRUPTED_RISK_REL_TOL: f64 = 0.02;
pub const EXACT_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Passed,
    Failed,
    /// A precondition of the claim does not hold on the input.
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckVerdict {
    pub check_id: String,
    pub outcome: Outcome,
    pub passed: bool,
    /// Non-finite values serialize as `null`.
    pub statistics: BTreeMap<String, f64>,
    /// Key of the statistic reported in summaries.
    pub headline: String,
    pub config_digest: String,
    pub seed: u64,
}

impl CheckVerdict {
    fn new<C: Serialize>(check_id: &str, config: &C, seed: u64, headline: &str) -> Result<Self> {
        Ok(CheckVerdict {
            check_id: check_id.into(),
            outcome: Outcome::Failed,
            passed: false,
            statistics: BTreeMap::new(),
            headline: headline.into(),
            config_digest: config_digest(config)?,
            seed,
        })
    }

    fn stat(&mut self, key: &str, value: f64) {
        self.statistics.insert(key.into(), value);
    }

    fn flag(&mut self, key: &str, value: bool) {
        self.stat(key, f64::from(u8::from(value)));
    }

    fn conclude(mut self, passed: bool) -> Self {
        self.passed = passed;
        self.outcome = if passed { Outcome::Passed } else { Outcome::Failed };
        self
    }

    fn inconclusive(mut self) -> Self {
        self.passed = false;
        self.outcome = Outcome::Inconclusive;
        self
    }

    pub fn headline_value(&self) -> f64 {
        self.statistics.get(&self.headline).copied().unwrap_or(f64::NAN)
    }
}

pub fn write_verdicts_jsonl<W: Write>(verdicts: &[CheckVerdict], mut writer: W) -> Result<()> {
    for v in verdicts {
        serde_json::to_writer(&mut writer, v)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_summary_csv<W: Write>(verdicts: &[CheckVerdict], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["check_id", "passed", "headline_statistic"])?;
    for v in verdicts {
        w.write_record([
            v.check_id.clone(),
            v.passed.to_string(),
            crate::datagen::format_f64(v.headline_value()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn train_equal(family: &ModelFamily, loss: &LossSpec, hyper: &Hyper, ds: &Dataset, seed: u64) -> Result<ModelParams> {
    let init = family.init(ds, seed)?;
    Ok(train(&init, ds, &WeightScheme::equal(), loss, hyper, None, None)?.0)
}

fn group_mean(values: &[f64], keep: impl Fn(usize) -> bool) -> (Vec<f64>, f64) {
    let v: Vec<f64> = (0..values.len()).filter(|&i| keep(i)).map(|i| values[i]).collect();
    let m = mean(&v);
    (v, m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNoiseCheck {
    pub estimator: ErrorEstimatorConfig,
    /// Fraction of samples to perturb.
    #[serde(default = "default_feature_rate")]
    pub rate: f64,
    /// Perturbation norm; defaults to 5% of the mean feature std.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub noise_seed: u64,
}

fn default_feature_rate() -> f64 {
    0.1
}

/// Moving a sample's features against the mean margin gradient (its
/// dot product with the error gradient is positive) should raise its error;
/// moving along it should lower it. Both directions are re-estimated with the
/// same seeds and compared per sample against the predicted sign.
pub fn check_feature_noise(ds: &Dataset, cfg: &FeatureNoiseCheck) -> Result<CheckVerdict> {
    let mut v = CheckVerdict::new("feature_noise", cfg, cfg.estimator.master_seed, "sign_agreement")?;
    let base = estimate_error_profile(ds, &cfg.estimator)?;
    let epsilon = cfg.epsilon.unwrap_or_else(|| default_feature_epsilon(ds));
    v.stat("epsilon", epsilon);
    let mut agree = 0usize;
    let mut total = 0usize;
    let mut ok = true;
    for (name, direction) in [("adversarial", NoiseDirection::Adversarial), ("promoted", NoiseDirection::Promoted)] {
        let spec = NoiseSpec {
            rate: cfg.rate,
            kind: NoiseKind::Feature,
            epsilon,
            direction,
            seed: cfg.noise_seed,
        };
        let outcome = apply_feature_noise(ds, &spec, &base.reference_gradient)?;
        let moved = estimate_error_profile(&outcome.dataset, &cfg.estimator)?;
        let deltas: Vec<f64> = outcome.perturbed.iter().map(|&i| moved.err[i] - base.err[i]).collect();
        let predicted = if direction == NoiseDirection::Adversarial { 1.0 } else { -1.0 };
        agree += deltas.iter().filter(|d| d.signum() == predicted).count();
        total += deltas.len();
        let m = mean(&deltas);
        v.stat(&format!("{name}_mean_delta_err"), m);
        v.stat(&format!("{name}_count"), deltas.len() as f64);
        v.stat(&format!("{name}_skipped"), outcome.skipped_zero_gradient as f64);
        ok &= m * predicted > 0.0;
    }
    if total == 0 {
        return Ok(v.inconclusive());
    }
    let agreement = agree as f64 / total as f64;
    v.stat("sign_agreement", agreement);
    Ok(v.conclude(ok && agreement >= PAIR_AGREEMENT))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelNoiseCheck {
    pub rate: f64,
    #[serde(default = "default_label_kind")]
    pub kind: NoiseKind,
    pub noise_seed: u64,
    pub estimator: ErrorEstimatorConfig,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
    /// Samples used for the exact corrupted-risk enumeration (at most 10).
    #[serde(default = "default_subset")]
    pub enumeration_subset: usize,
    /// Corrupted draws used for the sampled corrupted risk.
    #[serde(default = "default_draws")]
    pub sampled_draws: usize,
}

fn default_label_kind() -> NoiseKind {
    NoiseKind::FlipLabel
}

fn default_resamples() -> usize {
    2000
}

fn default_subset() -> usize {
    10
}

fn default_draws() -> usize {
    20_000
}

/// Possible corrupted classes of a sample and their probabilities.
fn label_outcomes(kind: NoiseKind, class: usize, c: usize, rate: f64) -> Vec<(usize, f64)> {
    let mut out = vec![(class, 1.0 - rate)];
    match kind {
        NoiseKind::FlipLabel => out.push(((class + 1) % c, rate)),
        _ => out.extend((0..c).filter(|&k| k != class).map(|k| (k, rate / (c - 1) as f64))),
    }
    out
}

fn risk(model: &ModelParams, ds: &Dataset, loss: &LossSpec) -> Result<f64> {
    Ok(mean(&sample_losses(model, ds, loss)?))
}

/// Components of the corrupted-risk identity on `ds` for a fixed model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptedRisk {
    /// Risk on the clean labels.
    pub clean: f64,
    /// Risk on the corrupted labels `y′`, averaged over the corruption target.
    pub corrupted_labels: f64,
    /// `(1 − π)·clean + π·corrupted_labels`.
    pub closed_form: f64,
    /// Expected risk by enumerating every corruption pattern.
    pub enumerated: f64,
}

/// Exact expected empirical risk under per-sample label corruption, by
/// enumeration of all corruption patterns (feasible for `n ≤ 10`).
pub fn corrupted_risk(model: &ModelParams, ds: &Dataset, loss: &LossSpec, kind: NoiseKind, rate: f64) -> Result<CorruptedRisk> {
    if ds.n() == 0 || ds.n() > 10 {
        return Err(LabError::invalid("enumeration needs 1..=10 samples"));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(LabError::invalid("rate outside [0,1]"));
    }
    let c = ds.num_classes;
    let n = ds.n();
    // loss_table[i][k]: loss of sample i under class k.
    let mut loss_table = vec![vec![0.0; c]; n];
    let mut outcomes = Vec::with_capacity(n);
    for i in 0..n {
        let out = model.forward(ds.x(i))?;
        for (k, slot) in loss_table[i].iter_mut().enumerate() {
            *slot = loss_value(loss, &out, label_for_class(k, c))?;
        }
        outcomes.push(label_outcomes(kind, class_for_label(ds.labels[i], c)?, c, rate));
    }
    let clean = (0..n).map(|i| loss_table[i][outcomes[i][0].0]).sum::<f64>() / n as f64;
    let corrupted_labels = (0..n)
        .map(|i| {
            let others = &outcomes[i][1..];
            let mass: f64 = others.iter().map(|o| o.1).sum();
            if mass > 0.0 {
                others.iter().map(|&(k, p)| p * loss_table[i][k]).sum::<f64>() / mass
            } else {
                let cls = outcomes[i][0].0;
                let alt: Vec<usize> = match kind {
                    NoiseKind::FlipLabel => vec![(cls + 1) % c],
                    _ => (0..c).filter(|&k| k != cls).collect(),
                };
                alt.iter().map(|&k| loss_table[i][k]).sum::<f64>() / alt.len() as f64
            }
        })
        .sum::<f64>()
        / n as f64;
    let mut enumerated = 0.0;
    let mut idx = vec![0usize; n];
    loop {
        let mut p = 1.0;
        let mut r = 0.0;
        for i in 0..n {
            let (k, q) = outcomes[i][idx[i]];
            p *= q;
            r += loss_table[i][k];
        }
        enumerated += p * r / n as f64;
        let mut pos = 0;
        loop {
            if pos == n {
                return Ok(CorruptedRisk {
                    clean,
                    corrupted_labels,
                    closed_form: (1.0 - rate) * clean + rate * corrupted_labels,
                    enumerated,
                });
            }
            idx[pos] += 1;
            if idx[pos] < outcomes[pos].len() {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

/// Mean empirical risk of `model` over `draws` corrupted copies of `ds`.
pub fn sampled_corrupted_risk(
    model: &ModelParams,
    ds: &Dataset,
    loss: &LossSpec,
    kind: NoiseKind,
    rate: f64,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for m in 0..draws {
        let noisy = apply_label_noise(ds, &NoiseSpec::label(kind, rate, derive_seed(seed, &[m as u64])))?;
        total += risk(model, &noisy, loss)?;
    }
    Ok(total / draws as f64)
}

/// Noisy samples have larger errors than clean ones when the base problem is
/// learnable; also verifies the corrupted-risk identity.
pub fn check_label_noise(base: &Dataset, cfg: &LabelNoiseCheck) -> Result<CheckVerdict> {
    let mut v = CheckVerdict::new("label_noise", cfg, cfg.estimator.master_seed, "ci_low")?;
    if cfg.kind == NoiseKind::Feature {
        return Err(LabError::invalid("label-noise check needs a label noise kind"));
    }
    let clean = estimate_error_profile(base, &cfg.estimator)?;
    let p = mean(&clean.correct_probability());
    v.stat("clean_correct_probability", p);
    if !(p > 0.5) {
        return Ok(v.inconclusive());
    }
    let noisy_ds = apply_label_noise(base, &NoiseSpec::label(cfg.kind, cfg.rate, cfg.noise_seed))?;
    let profile = estimate_error_profile(&noisy_ds, &cfg.estimator)?;
    let (noisy, m_noisy) = group_mean(&profile.err, |i| profile.noise_flag[i]);
    let (kept, m_clean) = group_mean(&profile.err, |i| !profile.noise_flag[i]);
    v.stat("noisy_count", noisy.len() as f64);
    v.stat("mean_err_noisy", m_noisy);
    v.stat("mean_err_clean", m_clean);
    if noisy.is_empty() || kept.is_empty() {
        return Ok(v.inconclusive());
    }
    let (lo, hi) = bootstrap_mean_diff_ci(
        &noisy,
        &kept,
        cfg.bootstrap_resamples,
        BOOTSTRAP_LEVEL,
        derive_seed(cfg.estimator.master_seed, &[0xB007]),
    );
    v.stat("ci_low", lo);
    v.stat("ci_high", hi);
    let ordering = m_noisy > m_clean && lo > 0.0;

    let loss = LossSpec::new(cfg.estimator.loss.kind);
    let model = train_equal(&cfg.estimator.family, &cfg.estimator.loss, &cfg.estimator.hyper, base, cfg.estimator.master_seed)?;
    let k = cfg.enumeration_subset.clamp(1, 10).min(base.n());
    let subset = base.subset(&(0..k).collect::<Vec<_>>());
    let at = |rate| corrupted_risk(&model, &subset, &loss, cfg.kind, rate);
    let r0 = at(0.0)?;
    let r1 = at(1.0)?;
    let rp = at(cfg.rate)?;
    let zero_gap = (risk(&model, &apply_label_noise(&subset, &NoiseSpec::label(cfg.kind, 0.0, cfg.noise_seed))?, &loss)? - r0.clean).abs();
    v.stat("identity_gap_rate0", zero_gap);
    let mut exact = zero_gap <= EXACT_TOL;
    if cfg.kind == NoiseKind::FlipLabel || base.num_classes == 2 {
        let full = apply_label_noise(&subset, &NoiseSpec::label(cfg.kind, 1.0, cfg.noise_seed))?;
        let one_gap = (risk(&model, &full, &loss)? - r1.corrupted_labels).abs();
        v.stat("identity_gap_rate1", one_gap);
        exact &= one_gap <= EXACT_TOL;
    }
    let enum_gap = (rp.enumerated - rp.closed_form).abs();
    v.stat("enumeration_vs_closed_form", enum_gap);
    let sampled = sampled_corrupted_risk(&model, &subset, &loss, cfg.kind, cfg.rate, cfg.sampled_draws, cfg.noise_seed)?;
    let rel = (sampled - rp.enumerated).abs() / rp.enumerated;
    v.stat("sampled_risk", sampled);
    v.stat("enumerated_risk", rp.enumerated);
    v.stat("sampled_rel_gap", rel);
    let identity = exact && enum_gap <= EXACT_TOL.max(1e-12 * rp.enumerated.abs()) && rel <= CORRUPTED_RISK_REL_TOL;
    v.flag("ordering_holds", ordering);
    v.flag("identity_holds", identity);
    Ok(v.conclude(ordering && identity))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceCheck {
    pub estimator: ErrorEstimatorConfig,
    /// Seed of the held-out set used for small-class recall.
    pub test_seed: u64,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
}

fn default_test_per_class() -> usize {
    100
}

/// Binary small/large class indices by count.
fn small_large(spec: &DatasetSpec) -> Result<(usize, usize)> {
    if spec.num_classes() != 2 {
        return Err(LabError::invalid("imbalance check needs two classes"));
    }
    let small = if spec.class_counts[0] < spec.class_counts[1] { 0 } else { 1 };
    Ok((small, 1 - small))
}

/// Fraction of `class` samples in `ds` with positive margin.
pub fn class_recall(model: &ModelParams, ds: &Dataset, class: usize) -> Result<f64> {
    let m = model.margins(ds)?;
    let idx: Vec<usize> = (0..ds.n()).filter(|&i| ds.class_of[i] == class).collect();
    Ok(idx.iter().filter(|&&i| m[i] > 0.0).count() as f64 / idx.len() as f64)
}

/// Under imbalance beyond `e : 1`, the small class has lower ground-truth
/// probability and higher error. Also reports small-class recall under
/// class-balanced versus equal weights.
pub fn check_imbalance(spec: &DatasetSpec, cfg: &ImbalanceCheck) -> Result<CheckVerdict> {
    let mut v = CheckVerdict::new("imbalance", &(spec, cfg), cfg.estimator.master_seed, "err_gap")?;
    let (small, large) = small_large(spec)?;
    let ratio = spec.imbalance_ratio();
    v.stat("imbalance_ratio", ratio);
    if !(ratio > std::f64::consts::E) {
        return Ok(v.inconclusive());
    }
    let ds = gen_gaussian_mixture(spec)?;
    let profile = estimate_error_profile(&ds, &cfg.estimator)?;
    let (_, err_small) = group_mean(&profile.err, |i| ds.class_of[i] == small);
    let (_, err_large) = group_mean(&profile.err, |i| ds.class_of[i] == large);
    let family = &cfg.estimator.family;
    let loss = &cfg.estimator.loss;
    let hyper = &cfg.estimator.hyper;
    let init = family.init(&ds, cfg.estimator.master_seed)?;
    let equal = train(&init, &ds, &WeightScheme::equal(), loss, hyper, None, None)?.0;
    let balanced = train(&init, &ds, &WeightScheme::new(SchemeKind::ClassBalanced), loss, hyper, None, None)?.0;
    let probs: Vec<f64> = equal.margins(&ds)?.into_iter().map(ground_truth_probability).collect();
    let (_, gt_small) = group_mean(&probs, |i| ds.class_of[i] == small);
    let (_, gt_large) = group_mean(&probs, |i| ds.class_of[i] == large);
    let test_spec = DatasetSpec {
        class_counts: vec![cfg.test_per_class; 2],
        seed: cfg.test_seed,
        ..spec.clone()
    };
    let test = gen_gaussian_mixture(&test_spec)?;
    let recall_equal = class_recall(&equal, &test, small)?;
    let recall_balanced = class_recall(&balanced, &test, small)?;
    v.stat("mean_err_small", err_small);
    v.stat("mean_err_large", err_large);
    v.stat("err_gap", err_small - err_large);
    v.stat("ground_truth_small", gt_small);
    v.stat("ground_truth_large", gt_large);
    v.stat("small_recall_equal", recall_equal);
    v.stat("small_recall_class_balanced", recall_balanced);
    v.flag("recall_improves", recall_balanced > recall_equal);
    Ok(v.conclude(gt_large > gt_small && err_small > err_large))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginErrorCheck {
    /// Pairs count as variance-matched when `|σ̂²_i − σ̂²_j|` is at most this
    /// fraction of the median `σ̂²`.
    #[serde(default = "default_match_tol")]
    pub variance_match_rel_tol: f64,
}

fn default_match_tol() -> f64 {
    0.1
}

impl Default for MarginErrorCheck {
    fn default() -> Self {
        MarginErrorCheck {
            variance_match_rel_tol: default_match_tol(),
        }
    }
}

/// Whether the log-normal closed form is strictly decreasing in `μ` and
/// strictly increasing in `σ²` on the grid `{0,…,mu_max} × {0,…,s_max}`.
pub fn closed_form_monotone_on_grid(mus: &[f64], sigma2s: &[f64]) -> Result<bool> {
    let mut ok = true;
    for &s in sigma2s {
        for w in mus.windows(2) {
            ok &= closed_form_error(w[1], s)? < closed_form_error(w[0], s)?;
        }
    }
    for &m in mus {
        for w in sigma2s.windows(2) {
            ok &= closed_form_error(m, w[1])? > closed_form_error(m, w[0])?;
        }
    }
    Ok(ok)
}

/// Whether a pair's error ordering is determined by its margin moments:
/// the smaller mean must not also carry the smaller variance.
pub fn pair_decidable(mu_i: f64, s_i: f64, mu_j: f64, s_j: f64) -> bool {
    (mu_i - mu_j) * (s_i - s_j) <= 0.0
}

/// Smaller mean margin goes with larger error, the closed-form law is
/// monotone, and margin distributions are tested for normality.
pub fn check_margin_error(profile: &DifficultyProfile, cfg: &MarginErrorCheck) -> Result<CheckVerdict> {
    let mut v = CheckVerdict::new("margin_error", cfg, profile.meta.master_seed, "pair_agreement")?;
    let n = profile.n();
    if n < 2 {
        return Err(LabError::invalid("need at least two samples"));
    }
    let grid = closed_form_monotone_on_grid(&[0.0, 1.0, 2.0], &[0.0, 1.0])?;
    v.flag("analytic_monotone", grid);
    let tol = cfg.variance_match_rel_tol * median(&profile.sigma2_hat);
    let (mut matched, mut agree, mut undecidable) = (0usize, 0usize, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            let (mi, mj) = (profile.mu_hat[i], profile.mu_hat[j]);
            let (si, sj) = (profile.sigma2_hat[i], profile.sigma2_hat[j]);
            if (si - sj).abs() > tol || mi == mj {
                continue;
            }
            if !pair_decidable(mi, si, mj, sj) {
                undecidable += 1;
                continue;
            }
            matched += 1;
            if (mi - mj) * (profile.err[i] - profile.err[j]) < 0.0 {
                agree += 1;
            }
        }
    }
    v.stat("matched_pairs", matched as f64);
    v.stat("undecidable_pairs", undecidable as f64);
    let rho = spearman(&profile.mu_hat, &profile.err);
    v.stat("spearman_mu_err", rho);
    let gaussian = (0..n)
        .filter(|&i| profile.z_skew[i].abs() <= Z_CRITICAL && profile.z_kurt[i].abs() <= Z_CRITICAL)
        .count() as f64
        / n as f64;
    v.stat("gaussian_fraction", gaussian);
    v.flag("gaussian_line_met", gaussian >= GAUSSIAN_FRACTION);
    if matched == 0 {
        v.stat("pair_agreement", f64::NAN);
        return Ok(v.inconclusive());
    }
    let agreement = agree as f64 / matched as f64;
    v.stat("pair_agreement", agreement);
    Ok(v.conclude(grid && agreement >= PAIR_AGREEMENT && rho < 0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum DualModel {
    /// `p = a·γ + b` with `a < 0`.
    LinearP { a: f64, b: f64 },
    /// `p = c·e^{−γ}` with `c > 0`.
    ExponentialP { c: f64 },
}

/// Dual weights that are decreasing functions of the margin order a pair
/// like its errors. `err` is the exponential-loss error `mean(e^{−γ})`.
pub fn check_dual_weights(margins_i: &[f64], margins_j: &[f64], model: DualModel) -> Result<CheckVerdict> {
    let mut v = CheckVerdict::new("dual_weights", &(margins_i, margins_j, model), 0, "ep_gap")?;
    if margins_i.is_empty() || margins_j.is_empty() {
        return Err(LabError::invalid("empty margin samples"));
    }
    let err = |m: &[f64]| mean(&m.iter().map(|g| (-g).exp()).collect::<Vec<_>>());
    let (err_i, err_j) = (err(margins_i), err(margins_j));
    let (mu_i, mu_j) = (mean(margins_i), mean(margins_j));
    v.stat("err_i", err_i);
    v.stat("err_j", err_j);
    v.stat("mu_i", mu_i);
    v.stat("mu_j", mu_j);
    let (ep_i, ep_j) = match model {
        DualModel::LinearP { a, b } => {
            if !(a < 0.0) {
                return Err(LabError::invalid("linear dual model needs a < 0"));
            }
            (a * mu_i + b, a * mu_j + b)
        }
        DualModel::ExponentialP { c } => {
            if !(c > 0.0) {
                return Err(LabError::invalid("exponential dual model needs c > 0"));
            }
            let e = |m: &[f64]| mean(&m.iter().map(|g| c * (-g).exp()).collect::<Vec<_>>());
            (e(margins_i), e(margins_j))
        }
    };
    v.stat("ep_i", ep_i);
    v.stat("ep_j", ep_j);
    v.stat("ep_gap", ep_i - ep_j);
    if err_i < err_j {
        return Ok(v.inconclusive());
    }
    let passed = match model {
        DualModel::LinearP { .. } => (ep_i >= ep_j) == (mu_i <= mu_j),
        DualModel::ExponentialP { .. } => {
            v.flag("larger_mean_yet_larger_weight", mu_i > mu_j && ep_i > ep_j);
            ep_i >= ep_j
        }
    };
    Ok(v.conclude(passed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginConvergenceCheck {
    pub family: ModelFamily,
    #[serde(default = "default_conv_loss")]
    pub loss: LossKind,
    pub schemes: Vec<WeightScheme>,
    pub lambdas: Vec<f64>,
    /// Per-sample errors for error-based schemes; the initial per-sample
    /// losses are used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub errors: Option<Vec<f64>>,
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_step")]
    pub initial_step: f64,
    pub seed: u64,
    /// Gradient-descent run comparing epochs to a cosine threshold under
    /// equal and hard-first weights (linear models only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceleration: Option<AccelerationRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccelerationRun {
    pub hyper: Hyper,
    #[serde(default = "default_threshold")]
    pub cosine_threshold: f64,
    #[serde(default = "default_hard_first")]
    pub hard_first: WeightScheme,
}

fn default_conv_loss() -> LossKind {
    LossKind::Exponential
}

fn default_grad_tol() -> f64 {
    1e-9
}

fn default_max_iters() -> usize {
    200_000
}

fn default_step() -> f64 {
    0.1
}

fn default_threshold() -> f64 {
    0.99
}

fn default_hard_first() -> WeightScheme {
    WeightScheme::new(SchemeKind::ErrorHardFirst)
}

/// Normalized margin of the minimizer of the regularized weighted objective
/// for each `λ`. Entries are `None` where the minimization diverged.
#[allow(clippy::too_many_arguments)]
pub fn regularized_margins(
    ds: &Dataset,
    init: &ModelParams,
    scheme: &WeightScheme,
    errors: &[f64],
    loss: LossKind,
    lambdas: &[f64],
    grad_tol: f64,
    max_iters: usize,
    initial_step: f64,
) -> Result<Vec<Option<f64>>> {
    let weights = make_weights(
        scheme,
        ds.n(),
        &DifficultyInputs {
            margins: Some(&init.margins(ds)?),
            errors: Some(errors),
            class_of: Some(&ds.class_of),
        },
    )?;
    lambdas
        .iter()
        .map(|&lam| {
            let spec = LossSpec::new(loss).with_lambda(lam);
            match minimize_objective(init, ds, &weights, &spec, initial_step, grad_tol, max_iters) {
                Ok((p, _, _)) => Ok(Some(normalized_margin(&p, ds)?)),
                Err(LabError::Divergence { .. }) | Err(LabError::Numeric(_)) => {
                    warn!("lambda {lam} dropped: minimization diverged");
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// The normalized margin of the regularized minimizer grows toward the
/// max-margin value as `λ → 0` for every bounded scheme.
pub fn check_margin_convergence(ds: &Dataset, cfg: &MarginConvergenceCheck) -> Result<CheckVerdict> {
    if cfg.lambdas.is_empty() || cfg.lambdas.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(LabError::invalid("lambdas must be positive"));
    }
    if cfg.lambdas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(LabError::invalid("lambdas must be strictly decreasing"));
    }
    if cfg.schemes.is_empty() {
        return Err(LabError::invalid("at least one weight scheme is required"));
    }
    for s in &cfg.schemes {
        s.validate()?;
        if s.dynamic {
            return Err(LabError::invalid("margin convergence uses static weights"));
        }
    }
    let linear = cfg.family.kind == ModelKind::Linear && ds.is_binary();
    let headline = if linear { "max_rel_gap_smallest_lambda" } else { "max_monotone_violation" };
    let mut v = CheckVerdict::new("margin_convergence", cfg, cfg.seed, headline)?;
    let init = cfg.family.init(ds, cfg.seed)?;
    let loss = LossSpec::new(cfg.loss);
    let errors = match &cfg.errors {
        Some(e) => e.clone(),
        None => sample_losses(&init, ds, &loss)?,
    };
    let oracle = if linear { Some(solve_max_margin(ds)?) } else { None };
    if let Some(o) = &oracle {
        v.stat("gamma_star", o.gamma_star);
    }
    let mut monotone = true;
    let mut worst_violation: f64 = 0.0;
    let mut finals = Vec::new();
    for (s_idx, scheme) in cfg.schemes.iter().enumerate() {
        let gammas = regularized_margins(
            ds,
            &init,
            scheme,
            &errors,
            cfg.loss,
            &cfg.lambdas,
            cfg.grad_tol,
            cfg.max_iters,
            cfg.initial_step,
        )?;
        let kept: Vec<f64> = gammas.iter().flatten().copied().collect();
        for (k, g) in gammas.iter().enumerate() {
            v.stat(&format!("gamma_s{s_idx}_l{k}"), g.unwrap_or(f64::NAN));
        }
        v.stat(&format!("dropped_s{s_idx}"), (gammas.len() - kept.len()) as f64);
        for w in kept.windows(2) {
            let drop = w[0] - w[1];
            worst_violation = worst_violation.max(drop);
            monotone &= drop <= MONOTONE_TOL;
        }
        match kept.last() {
            Some(&g) => finals.push(g),
            None => return Ok(v.inconclusive()),
        }
    }
    v.stat("max_monotone_violation", worst_violation);
    v.flag("monotone", monotone);
    let mut passed = monotone;
    if let Some(o) = &oracle {
        let gs = o.gamma_star;
        let gap = finals.iter().map(|g| (g - gs).abs() / gs).fold(0.0, f64::max);
        let spread = finals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - finals.iter().copied().fold(f64::INFINITY, f64::min);
        v.stat("max_rel_gap_smallest_lambda", gap);
        v.stat("scheme_spread_over_gamma_star", spread / gs);
        passed &= gap <= MARGIN_REL_TOL && spread <= MARGIN_REL_TOL * gs;
        if let Some(acc) = &cfg.acceleration {
            let reference = o.direction.clone();
            let run = |scheme: &WeightScheme| -> Result<Option<usize>> {
                let (_, trace) = train(&init, ds, scheme, &loss, &acc.hyper, Some(&reference), Some(&errors))?;
                Ok(trace.epochs_to_cosine(acc.cosine_threshold))
            };
            let eq = run(&WeightScheme::equal())?;
            let hf = run(&acc.hard_first)?;
            let as_f = |e: Option<usize>| e.map_or(f64::INFINITY, |e| e as f64);
            v.stat("epochs_equal", as_f(eq));
            v.stat("epochs_hard_first", as_f(hf));
            let faster = hf.is_some() && as_f(hf) <= as_f(eq);
            v.flag("hard_first_not_slower", faster);
            passed &= faster;
        }
    }
    Ok(v.conclude(passed))
}

/// Per-sample Gaussian margin draws `N(μ_i, σ²_i)`, `r` per sample.
pub fn gaussian_margin_samples(params: &[(f64, f64)], r: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    params
        .iter()
        .enumerate()
        .map(|(i, &(mu, s2))| {
            let mut rng = crate::seed::derived_rng(seed, &[i as u64]);
            (0..r).map(|_| mu + s2.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect()
        })
        .collect()
}

/// Fraction of `draws` samples of size `n` from `N(0,1)` whose skewness and
/// kurtosis Z-scores are each within the critical value: `(skew, kurt)`.
pub fn normal_z_calibration(n: usize, draws: usize, seed: u64) -> Result<(f64, f64)> {
    let samples = gaussian_margin_samples(&vec![(0.0, 1.0); draws], n, seed);
    let mut ok_s = 0usize;
    let mut ok_k = 0usize;
    for s in &samples {
        let (zs, zk) = crate::difficulty::gaussianity_z(s)?;
        ok_s += usize::from(zs.abs() <= Z_CRITICAL);
        ok_k += usize::from(zk.abs() <= Z_CRITICAL);
    }
    Ok((ok_s as f64 / draws as f64, ok_k as f64 / draws as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Dims, ModelKind};
    use ndarray::array;

    #[test]
    fn grid_monotonicity_holds() {
        assert!(closed_form_monotone_on_grid(&[0.0, 1.0, 2.0], &[0.0, 1.0]).unwrap());
    }

    #[test]
    fn undecidable_pairs() {
        assert!(!pair_decidable(1.0, 0.5, 2.0, 1.0));
        assert!(pair_decidable(1.0, 1.0, 2.0, 0.5));
        assert!(pair_decidable(1.0, 1.0, 2.0, 1.0));
    }

    #[test]
    fn linear_dual_example() {
        let v = check_dual_weights(&[1.0, 1.0], &[2.0, 2.0], DualModel::LinearP { a: -1.0, b: 0.0 }).unwrap();
        assert_eq!(v.statistics["ep_i"], -1.0);
        assert_eq!(v.statistics["ep_j"], -2.0);
        assert!(v.passed);
        assert!(check_dual_weights(&[1.0], &[2.0], DualModel::LinearP { a: 0.0, b: 0.0 }).is_err());
        assert!(check_dual_weights(&[1.0], &[2.0], DualModel::ExponentialP { c: -1.0 }).is_err());
    }

    #[test]
    fn exponential_dual_weight_is_the_error() {
        let m = [0.3, 1.2, -0.4];
        let v = check_dual_weights(&m, &[5.0], DualModel::ExponentialP { c: 1.0 }).unwrap();
        assert_eq!(v.statistics["ep_i"], v.statistics["err_i"]);
    }

    fn tiny() -> (ModelParams, Dataset) {
        let ds = Dataset::new(
            array![[1.0, 0.5], [-0.5, 1.0], [0.2, -1.0], [-1.0, -0.3]],
            vec![1, -1, 1, -1],
            vec![false; 4],
            vec![1, 0, 1, 0],
            2,
        )
        .unwrap();
        let m = ModelParams::new(ModelKind::Linear, Dims { d: 2, h: 0, c: 1 }, vec![0.7, -0.2]).unwrap();
        (m, ds)
    }

    #[test]
    fn corrupted_risk_extremes() {
        let (m, ds) = tiny();
        let loss = LossSpec::new(LossKind::Logistic);
        let r0 = corrupted_risk(&m, &ds, &loss, NoiseKind::FlipLabel, 0.0).unwrap();
        assert_eq!(r0.enumerated, r0.clean);
        let r1 = corrupted_risk(&m, &ds, &loss, NoiseKind::FlipLabel, 1.0).unwrap();
        assert!((r1.enumerated - r1.corrupted_labels).abs() < 1e-15);
        let rp = corrupted_risk(&m, &ds, &loss, NoiseKind::FlipLabel, 0.3).unwrap();
        assert!((rp.enumerated - rp.closed_form).abs() < 1e-14);
    }

    #[test]
    fn verdict_outputs() {
        let v = check_dual_weights(&[1.0], &[2.0], DualModel::LinearP { a: -1.0, b: 0.0 }).unwrap();
        let mut buf = Vec::new();
        write_verdicts_jsonl(std::slice::from_ref(&v), &mut buf).unwrap();
        let line: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(line["outcome"], "passed");
        let mut csv_buf = Vec::new();
        write_summary_csv(&[v], &mut csv_buf).unwrap();
        let text = String::from_utf8(csv_buf).unwrap();
        assert!(text.starts_with("check_id,passed,headline_statistic\ndual_weights,true,"));
    }
}
