//! Weighted full-batch gradient descent and its convergence diagnostics.

use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::Dataset;
use crate::error::{LabError, Result};
use crate::models::{objective_and_grad, sample_losses, LossSpec, ModelParams};
use crate::stats::{dot, norm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Equal,
    InverseMargin,
    ErrorHardFirst,
    ErrorEasyFirst,
    ClassBalanced,
    CustomStatic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightScheme {
    pub kind: SchemeKind,
    #[serde(default = "default_lower")]
    pub lower: f64,
    #[serde(default = "default_upper")]
    pub upper: f64,
    /// Recompute weights from the current model at every epoch.
    #[serde(default)]
    pub dynamic: bool,
    /// Raw weights for [`SchemeKind::CustomStatic`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom: Option<Vec<f64>>,
    /// Exponent applied to the error in the error-based schemes (1 by default).
    #[serde(default = "default_power")]
    pub power: f64,
}

fn default_lower() -> f64 {
    0.1
}

fn default_upper() -> f64 {
    10.0
}

fn default_power() -> f64 {
    1.0
}

impl WeightScheme {
    pub fn new(kind: SchemeKind) -> Self {
        WeightScheme {
            kind,
            lower: default_lower(),
            upper: default_upper(),
            dynamic: false,
            custom: None,
            power: 1.0,
        }
    }

    pub fn equal() -> Self {
        Self::new(SchemeKind::Equal)
    }

    pub fn bounds(mut self, lower: f64, upper: f64) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn dynamic(mut self, dynamic: bool) -> Self {
        self.dynamic = dynamic;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lower > 0.0 && self.lower <= 1.0 && self.upper >= 1.0 && self.upper.is_finite()) {
            return Err(LabError::invalid(format!(
                "weight bounds [{}, {}] must satisfy 0 < b <= 1 <= B < inf",
                self.lower, self.upper
            )));
        }
        if !(self.power >= 0.0 && self.power.is_finite()) {
            return Err(LabError::invalid("scheme power must be finite and >= 0"));
        }
        if self.kind == SchemeKind::CustomStatic && self.custom.is_none() {
            return Err(LabError::invalid("custom_static scheme needs raw weights"));
        }
        Ok(())
    }

    pub fn needs_errors(&self) -> bool {
        matches!(self.kind, SchemeKind::ErrorHardFirst | SchemeKind::ErrorEasyFirst)
    }
}

/// Per-sample quantities a scheme may read.
#[derive(Clone, Copy, Debug, Default)]
pub struct DifficultyInputs<'a> {
    pub margins: Option<&'a [f64]>,
    pub errors: Option<&'a [f64]>,
    pub class_of: Option<&'a [usize]>,
}

/// Nonnegative per-sample weights with mean 1 inside the scheme's bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn ones(n: usize) -> Self {
        WeightVector(vec![1.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean(&self) -> f64 {
        crate::stats::mean(&self.0)
    }

    /// First 16 hex digits of the SHA-256 of the little-endian bit patterns.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.0 {
            h.update(w.to_le_bytes());
        }
        hex16(&h.finalize())
    }
}

pub(crate) fn hex16(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn require<'a, T>(v: Option<&'a [T]>, n: usize, what: &str) -> Result<&'a [T]> {
    let v = v.ok_or_else(|| LabError::invalid(format!("scheme needs per-sample {what}")))?;
    if v.len() != n {
        return Err(LabError::invalid(format!("{what} must have {n} entries")));
    }
    Ok(v)
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(LabError::invalid(format!("non-finite {what}")));
    }
    Ok(())
}

/// Raw (unnormalized) weights before bounding.
pub fn raw_weights(scheme: &WeightScheme, n: usize, inputs: &DifficultyInputs) -> Result<Vec<f64>> {
    let raw = match scheme.kind {
        SchemeKind::Equal => vec![1.0; n],
        SchemeKind::InverseMargin => {
            let m = require(inputs.margins, n, "margins")?;
            check_finite(m, "margin")?;
            let scale = m.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            let floor = if scale > 0.0 { 1e-3 * scale } else { 1.0 };
            m.iter().map(|g| 1.0 / g.max(floor)).collect()
        }
        SchemeKind::ErrorHardFirst => {
            let e = require(inputs.errors, n, "errors")?;
            check_finite(e, "error")?;
            e.iter().map(|v| v.max(0.0).powf(scheme.power)).collect()
        }
        SchemeKind::ErrorEasyFirst => {
            let e = require(inputs.errors, n, "errors")?;
            check_finite(e, "error")?;
            e.iter().map(|v| (-scheme.power * v).exp()).collect()
        }
        SchemeKind::ClassBalanced => {
            let c = require(inputs.class_of, n, "class ids")?;
            let k = c.iter().copied().max().map_or(0, |m| m + 1);
            let mut counts = vec![0usize; k];
            for &ci in c {
                counts[ci] += 1;
            }
            c.iter().map(|&ci| 1.0 / counts[ci] as f64).collect()
        }
        SchemeKind::CustomStatic => {
            let w = require(scheme.custom.as_deref(), n, "custom weights")?;
            if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(LabError::invalid("custom weights must be finite and >= 0"));
            }
            w.to_vec()
        }
    };
    check_finite(&raw, "raw weight")?;
    Ok(raw)
}

/// Builds the scheme's weights, then finds the clip/renormalize fixpoint:
/// `w_i = clip(s · raw_i, b, B)` with the scale `s` chosen so that the mean is 1.
pub fn make_weights(scheme: &WeightScheme, n: usize, inputs: &DifficultyInputs) -> Result<WeightVector> {
    scheme.validate()?;
    if n == 0 {
        return Err(LabError::invalid("cannot weight an empty sample"));
    }
    let raw = raw_weights(scheme, n, inputs)?;
    bound_and_normalize(&raw, scheme.lower, scheme.upper)
}

pub fn bound_and_normalize(raw: &[f64], lower: f64, upper: f64) -> Result<WeightVector> {
    let n = raw.len();
    let max_raw = raw.iter().copied().fold(0.0, f64::max);
    if max_raw <= 0.0 {
        return Ok(WeightVector::ones(n));
    }
    let raw: Vec<f64> = raw.iter().map(|r| r / max_raw).collect();
    let mean_at = |s: f64| raw.iter().map(|r| (s * r).clamp(lower, upper)).sum::<f64>() / n as f64;

    let mut hi = 1.0;
    let mut iters = 0;
    while mean_at(hi) < 1.0 {
        hi *= 2.0;
        iters += 1;
        if iters > 2000 {
            return Err(LabError::invalid(
                "weights cannot reach mean 1 within the bounds (too many zero raw weights)",
            ));
        }
    }
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Solve the scale exactly on the free set identified by the bracket.
    let s0 = 0.5 * (lo + hi);
    let mut clipped_mass = 0.0;
    let mut free_raw = 0.0;
    for r in &raw {
        let v = s0 * r;
        if v <= lower {
            clipped_mass += lower;
        } else if v >= upper {
            clipped_mass += upper;
        } else {
            free_raw += r;
        }
    }
    let s = if free_raw > 0.0 {
        (n as f64 - clipped_mass) / free_raw
    } else {
        s0
    };
    let mut w: Vec<f64> = raw.iter().map(|r| (s * r).clamp(lower, upper)).collect();
    // Spread the residual rounding error over the free entries.
    let resid = n as f64 - w.iter().sum::<f64>();
    let free: Vec<usize> = (0..n).filter(|&i| w[i] > lower && w[i] < upper).collect();
    if !free.is_empty() {
        let adj = resid / free.len() as f64;
        for &i in &free {
            w[i] = (w[i] + adj).clamp(lower, upper);
        }
    }
    Ok(WeightVector(w))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_lr() -> f64 {
    0.1
}

impl Hyper {
    pub fn new(epochs: usize) -> Self {
        Hyper {
            learning_rate: 0.1,
            epochs,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LabError::invalid("learning rate must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub objective: f64,
    pub min_margin: f64,
    /// NaN when θ = 0.
    pub normalized_margin: f64,
    pub cosine_ref: Option<f64>,
    pub weights_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
    pub scheme: SchemeKind,
    pub dynamic: bool,
    /// Dynamic weights are re-bounded and renormalized to mean 1 every epoch.
    pub renormalized_per_epoch: bool,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// First epoch from which the cosine to the reference stays at or above
    /// `threshold` until the end of the trace.
    pub fn epochs_to_cosine(&self, threshold: f64) -> Option<usize> {
        let above = |r: &TraceRecord| r.cosine_ref.is_some_and(|c| c >= threshold);
        if !self.records.last().is_some_and(above) {
            return None;
        }
        let last_below = self.records.iter().rposition(|r| !above(r));
        Some(last_below.map_or(0, |k| self.records[k + 1].epoch))
    }

    /// First epoch whose cosine to the reference reaches `threshold`.
    pub fn first_cosine_crossing(&self, threshold: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.cosine_ref.is_some_and(|c| c >= threshold))
            .map(|r| r.epoch)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "objective", "min_margin", "normalized_margin", "cosine_ref"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                crate::datagen::format_f64(r.objective),
                crate::datagen::format_f64(r.min_margin),
                crate::datagen::format_f64(r.normalized_margin),
                r.cosine_ref.map(crate::datagen::format_f64).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `min_i margin_i(θ) / ‖θ‖^α`.
pub fn normalized_margin(params: &ModelParams, ds: &Dataset) -> Result<f64> {
    let nrm = params.norm();
    if nrm == 0.0 {
        return Err(LabError::UndefinedMargin);
    }
    let min = params
        .margins(ds)?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    Ok(min / nrm.powi(params.nominal_degree() as i32))
}

pub fn cosine_to_direction(theta: &[f64], reference: &[f64]) -> Result<f64> {
    if theta.len() != reference.len() {
        return Err(LabError::invalid("vectors must have equal length"));
    }
    let (a, b) = (norm(theta), norm(reference));
    if a == 0.0 || b == 0.0 {
        return Err(LabError::UndefinedDirection);
    }
    Ok((dot(theta, reference) / (a * b)).clamp(-1.0, 1.0))
}

fn current_weights(
    scheme: &WeightScheme,
    params: &ModelParams,
    ds: &Dataset,
    loss: &LossSpec,
    margins: &[f64],
    static_errors: Option<&[f64]>,
) -> Result<WeightVector> {
    let losses;
    let errors = if scheme.needs_errors() && (scheme.dynamic || static_errors.is_none()) {
        losses = sample_losses(params, ds, &LossSpec::new(loss.kind))?;
        Some(losses.as_slice())
    } else {
        static_errors
    };
    make_weights(
        scheme,
        ds.n(),
        &DifficultyInputs {
            margins: Some(margins),
            errors,
            class_of: Some(&ds.class_of),
        },
    )
}

/// Runs exactly `hyper.epochs` updates `θ ← θ − η ∇L(θ; w)`.
///
/// Static error schemes read `errors` (typically an estimated difficulty
/// profile); without it, or when the scheme is dynamic, the current
/// per-sample losses stand in. Static margin schemes use the margins of
/// `init`. The trace holds `epochs + 1` records, the first for `init`.
pub fn train(
    init: &ModelParams,
    ds: &Dataset,
    scheme: &WeightScheme,
    loss: &LossSpec,
    hyper: &Hyper,
    reference: Option<&[f64]>,
    errors: Option<&[f64]>,
) -> Result<(ModelParams, TrainTrace)> {
    hyper.validate()?;
    scheme.validate()?;
    init.validate()?;
    if let Some(r) = reference {
        if r.len() != init.theta.len() {
            return Err(LabError::invalid("reference direction must match the parameter length"));
        }
    }
    let mut params = init.clone();
    let mut records = Vec::with_capacity(hyper.epochs + 1);
    let mut weights: Option<WeightVector> = None;
    let alpha = params.nominal_degree() as i32;
    for epoch in 0..=hyper.epochs {
        let margins = params.margins(ds).map_err(|_| LabError::Divergence { epoch })?;
        if scheme.dynamic || weights.is_none() {
            weights = Some(current_weights(scheme, &params, ds, loss, &margins, errors)?);
        }
        let w = weights.as_ref().expect("weights set above");
        let (obj, grad) = objective_and_grad(&params, ds, loss, w.as_slice())?;
        if !obj.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(LabError::Divergence { epoch });
        }
        let min_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
        let nrm = params.norm();
        let normalized = if nrm > 0.0 {
            min_margin / nrm.powi(alpha)
        } else {
            f64::NAN
        };
        let cosine_ref = match reference {
            Some(r) => cosine_to_direction(&params.theta, r).ok(),
            None => None,
        };
        records.push(TraceRecord {
            epoch,
            objective: obj,
            min_margin,
            normalized_margin: normalized,
            cosine_ref,
            weights_digest: w.digest(),
        });
        if epoch == hyper.epochs {
            break;
        }
        for (t, g) in params.theta.iter_mut().zip(&grad) {
            *t -= hyper.learning_rate * g;
        }
        if params.theta.iter().any(|t| !t.is_finite()) {
            return Err(LabError::Divergence { epoch: epoch + 1 });
        }
    }
    Ok((
        params,
        TrainTrace {
            records,
            scheme: scheme.kind,
            dynamic: scheme.dynamic,
            renormalized_per_epoch: scheme.dynamic,
        },
    ))
}

/// Minimizes the weighted regularized objective with fixed weights by
/// gradient descent with backtracking, stopping when `‖∇‖ ≤ tol`.
/// Returns the parameters, the iteration count and the final gradient norm.
pub fn minimize_objective(
    init: &ModelParams,
    ds: &Dataset,
    weights: &WeightVector,
    loss: &LossSpec,
    initial_step: f64,
    tol: f64,
    max_iters: usize,
) -> Result<(ModelParams, usize, f64)> {
    let mut params = init.clone();
    let mut step = initial_step;
    let (mut obj, mut grad) = objective_and_grad(&params, ds, loss, weights.as_slice())?;
    let mut gnorm = norm(&grad);
    let mut it = 0;
    while gnorm > tol && it < max_iters {
        let mut accepted = false;
        for _ in 0..60 {
            let cand = ModelParams {
                kind: params.kind,
                dims: params.dims,
                theta: params
                    .theta
                    .iter()
                    .zip(&grad)
                    .map(|(t, g)| t - step * g)
                    .collect(),
            };
            let (o, g) = objective_and_grad(&cand, ds, loss, weights.as_slice())?;
            if o.is_finite() && o <= obj - 0.5 * step * gnorm * gnorm {
                params = cand;
                obj = o;
                grad = g;
                gnorm = norm(&grad);
                accepted = true;
                step *= 1.5;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        it += 1;
    }
    if !obj.is_finite() {
        return Err(LabError::Divergence { epoch: it });
    }
    Ok((params, it, gnorm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Dims, LossKind, ModelKind};
    use ndarray::array;

    fn inputs<'a>(errors: Option<&'a [f64]>, class_of: Option<&'a [usize]>) -> DifficultyInputs<'a> {
        DifficultyInputs {
            margins: None,
            errors,
            class_of,
        }
    }

    #[test]
    fn equal_weights_are_ones() {
        let w = make_weights(&WeightScheme::equal(), 4, &DifficultyInputs::default()).unwrap();
        assert_eq!(w.0, vec![1.0; 4]);
    }

    #[test]
    fn class_balanced_ratio_is_inverse_frequency() {
        let class_of: Vec<usize> = (0..100).map(|i| usize::from(i >= 90)).collect();
        let scheme = WeightScheme::new(SchemeKind::ClassBalanced);
        let raw = raw_weights(&scheme, 100, &inputs(None, Some(&class_of))).unwrap();
        assert!((raw[95] / raw[0] - 9.0).abs() < 1e-12);
        let w = make_weights(&scheme, 100, &inputs(None, Some(&class_of))).unwrap();
        assert!((w.0[95] / w.0[0] - 9.0).abs() < 1e-12);
        assert!((w.mean() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hard_first_proportional_then_mean_one() {
        let e = [0.1, 0.3];
        let w = make_weights(&WeightScheme::new(SchemeKind::ErrorHardFirst), 2, &inputs(Some(&e), None))
            .unwrap();
        assert!((w.0[0] - 0.5).abs() < 1e-12 && (w.0[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn clipping_respects_bounds_and_mean() {
        let e = [0.0, 0.0, 0.0, 1e-6, 50.0, 0.2];
        let w = make_weights(&WeightScheme::new(SchemeKind::ErrorHardFirst).bounds(0.5, 2.0), 6, &inputs(Some(&e), None))
            .unwrap();
        assert!(w.0.iter().all(|v| (0.5..=2.0).contains(v)));
        assert!((w.mean() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_difficulty_is_rejected() {
        let e = [0.1, f64::NAN];
        assert!(make_weights(&WeightScheme::new(SchemeKind::ErrorHardFirst), 2, &inputs(Some(&e), None)).is_err());
        assert!(make_weights(&WeightScheme::equal().bounds(0.0, 2.0), 2, &DifficultyInputs::default()).is_err());
    }

    #[test]
    fn inverse_margin_floors_small_margins() {
        let m = [1.0, 0.0, -3.0];
        let scheme = WeightScheme::new(SchemeKind::InverseMargin);
        let raw = raw_weights(&scheme, 3, &DifficultyInputs { margins: Some(&m), ..Default::default() }).unwrap();
        assert_eq!(raw[1], raw[2]);
        assert!((raw[1] - 1.0 / 3e-3).abs() < 1e-9);
    }

    fn two_point() -> Dataset {
        Dataset::new(array![[1.0, 1.0], [-1.0, -1.0]], vec![1, -1], vec![false; 2], vec![1, 0], 2).unwrap()
    }

    fn lin(theta: Vec<f64>) -> ModelParams {
        ModelParams::new(ModelKind::Linear, Dims { d: 2, h: 0, c: 1 }, theta).unwrap()
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let init = lin(vec![0.3, -0.1]);
        let (p, trace) = train(&init, &two_point(), &WeightScheme::equal(), &LossSpec::new(LossKind::Exponential), &Hyper::new(0), None, None)
            .unwrap();
        assert_eq!(p, init);
        assert_eq!(trace.len(), 1);
    }

    #[test]
    fn objective_decreases_on_two_points() {
        let init = lin(vec![-0.5, 0.2]);
        let (_, trace) = train(&init, &two_point(), &WeightScheme::equal(), &LossSpec::new(LossKind::Exponential), &Hyper::new(200), Some(&[1.0, 1.0]), None)
            .unwrap();
        assert_eq!(trace.len(), 201);
        for pair in trace.records.windows(2) {
            assert!(pair[1].objective < pair[0].objective);
        }
        let first = trace.records[0].cosine_ref.unwrap();
        let last = trace.records.last().unwrap().cosine_ref.unwrap();
        assert!(first < 0.0 && last > 0.5);
    }

    #[test]
    fn divergence_reports_epoch() {
        let ds = Dataset::new(array![[1000.0], [-1000.0]], vec![-1, 1], vec![false; 2], vec![0, 1], 2).unwrap();
        let init = ModelParams::new(ModelKind::Linear, Dims { d: 1, h: 0, c: 1 }, vec![1.0]).unwrap();
        let err = train(&init, &ds, &WeightScheme::equal(), &LossSpec::new(LossKind::Exponential), &Hyper::new(10), None, None)
            .unwrap_err();
        assert!(matches!(err, LabError::Divergence { .. }));
    }

    #[test]
    fn normalized_margin_and_cosine_by_hand() {
        let ds = Dataset::new(array![[3.0, 1.0]], vec![1], vec![false], vec![1], 2).unwrap();
        assert!((normalized_margin(&lin(vec![0.0, 2.0]), &ds).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(normalized_margin(&lin(vec![0.0, 0.0]), &ds), Err(LabError::UndefinedMargin)));
        assert!((cosine_to_direction(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_to_direction(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((cosine_to_direction(&[1.0, 2.0], &[-2.0, -4.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(cosine_to_direction(&[0.0, 0.0], &[1.0, 0.0]), Err(LabError::UndefinedDirection)));
    }
}
