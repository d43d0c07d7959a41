//! Bias-free predictors and losses.
//!
//! Two architectures are provided, both positively homogeneous in their
//! parameters: a linear map (degree 1) and a two-layer ReLU network
//! `W2 · relu(W1 · x)` (degree 2). Binary heads produce one output, the
//! multi-class head produces `C` logits. The smoothness and Lipschitz
//! assumptions used by the convergence theory are not enforced here.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::{class_for_label, Dataset};
use crate::error::{LabError, Result};
use crate::seed::{derive_seed, rng_from_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Mlp2,
}

/// Input dimension `d`, hidden width `h` (unused by the linear model) and
/// output count `c` (1 for binary data).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d: usize,
    pub h: usize,
    pub c: usize,
}

impl Dims {
    pub fn param_len(&self, kind: ModelKind) -> usize {
        match kind {
            ModelKind::Linear => self.c * self.d,
            ModelKind::Mlp2 => self.h * self.d + self.c * self.h,
        }
    }
}

/// Flat parameter vector. Linear: `c × d` row-major. Mlp2: `W1` (`h × d`)
/// followed by `W2` (`c × h`), both row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub kind: ModelKind,
    pub dims: Dims,
    pub theta: Vec<f64>,
}

/// Model architecture settings independent of any dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFamily {
    pub kind: ModelKind,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Standard deviation of the normal initialization; 0 gives a zero init.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_hidden() -> usize {
    5
}

fn default_init_scale() -> f64 {
    1.0
}

impl ModelFamily {
    pub fn linear() -> Self {
        ModelFamily {
            kind: ModelKind::Linear,
            hidden: default_hidden(),
            init_scale: 1.0,
        }
    }

    pub fn mlp2(hidden: usize) -> Self {
        ModelFamily {
            kind: ModelKind::Mlp2,
            hidden,
            init_scale: 1.0,
        }
    }

    pub fn dims_for(&self, ds: &Dataset) -> Dims {
        Dims {
            d: ds.dim(),
            h: self.hidden,
            c: ds.num_outputs(),
        }
    }

    pub fn init(&self, ds: &Dataset, seed: u64) -> Result<ModelParams> {
        ModelParams::init_normal(self.kind, self.dims_for(ds), seed, self.init_scale)
    }
}

impl ModelParams {
    pub fn new(kind: ModelKind, dims: Dims, theta: Vec<f64>) -> Result<Self> {
        let p = ModelParams { kind, dims, theta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let Dims { d, h, c } = self.dims;
        if d == 0 || c == 0 || (self.kind == ModelKind::Mlp2 && h == 0) {
            return Err(LabError::invalid("model dimensions must be positive"));
        }
        if self.theta.len() != self.dims.param_len(self.kind) {
            return Err(LabError::invalid(format!(
                "parameter vector has length {} but dims require {}",
                self.theta.len(),
                self.dims.param_len(self.kind)
            )));
        }
        if self.theta.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Numeric("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn zeros(kind: ModelKind, dims: Dims) -> Self {
        ModelParams {
            kind,
            dims,
            theta: vec![0.0; dims.param_len(kind)],
        }
    }

    /// Entries drawn i.i.d. from `N(0, scale^2)`.
    pub fn init_normal(kind: ModelKind, dims: Dims, seed: u64, scale: f64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        let theta = (0..dims.param_len(kind))
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        ModelParams::new(kind, dims, theta)
    }

    pub fn is_binary(&self) -> bool {
        self.dims.c == 1
    }

    pub fn norm(&self) -> f64 {
        crate::stats::norm(&self.theta)
    }

    pub fn scaled(&self, c: f64) -> ModelParams {
        ModelParams {
            kind: self.kind,
            dims: self.dims,
            theta: self.theta.iter().map(|v| v * c).collect(),
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims.d {
            return Err(LabError::invalid(format!(
                "input has length {} but the model expects {}",
                x.len(),
                self.dims.d
            )));
        }
        Ok(())
    }

    /// Writes the `c` outputs into `out`; `hidden` receives the hidden
    /// pre-activations for the MLP and is left untouched for linear models.
    fn forward_raw(&self, x: &[f64], hidden: &mut [f64], out: &mut [f64]) {
        let Dims { d, h, c } = self.dims;
        match self.kind {
            ModelKind::Linear => {
                for (k, o) in out.iter_mut().enumerate().take(c) {
                    *o = crate::stats::dot(&self.theta[k * d..(k + 1) * d], x);
                }
            }
            ModelKind::Mlp2 => {
                let (w1, w2) = self.theta.split_at(h * d);
                for (j, z) in hidden.iter_mut().enumerate().take(h) {
                    *z = crate::stats::dot(&w1[j * d..(j + 1) * d], x);
                }
                for (k, o) in out.iter_mut().enumerate().take(c) {
                    *o = w2[k * h..(k + 1) * h]
                        .iter()
                        .zip(hidden.iter())
                        .map(|(w, z)| w * relu(*z))
                        .sum();
                }
            }
        }
    }

    /// Linear: `θ·x`; Mlp2: `W2 · relu(W1 · x)`. One value for binary heads.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut hidden = vec![0.0; self.dims.h];
        let mut out = vec![0.0; self.dims.c];
        self.forward_raw(x, &mut hidden, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Numeric("non-finite model output".into()));
        }
        Ok(out)
    }

    pub fn forward_scalar(&self, x: &[f64]) -> Result<f64> {
        if !self.is_binary() {
            return Err(LabError::invalid("scalar output requires a binary head"));
        }
        Ok(self.forward(x)?[0])
    }

    /// Functional margin of `(x, y)`.
    pub fn margin(&self, x: &[f64], y: i64) -> Result<f64> {
        let out = self.forward(x)?;
        margin_of_outputs(&out, y)
    }

    /// Gradient of the functional margin with respect to the input `x`.
    pub fn margin_input_gradient(&self, x: &[f64], y: i64) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let Dims { d, h, c } = self.dims;
        let mut hidden = vec![0.0; h];
        let mut out = vec![0.0; c];
        self.forward_raw(x, &mut hidden, &mut out);
        // d margin / d outputs
        let mut g_out = vec![0.0; c];
        if c == 1 {
            g_out[0] = binary_sign(y)?;
        } else {
            let yi = class_for_label(y, c)?;
            let other = argmax_excluding(&out, yi);
            g_out[yi] = 1.0;
            g_out[other] -= 1.0;
        }
        let mut gx = vec![0.0; d];
        match self.kind {
            ModelKind::Linear => {
                for (k, gk) in g_out.iter().enumerate() {
                    for (gxj, w) in gx.iter_mut().zip(&self.theta[k * d..(k + 1) * d]) {
                        *gxj += gk * w;
                    }
                }
            }
            ModelKind::Mlp2 => {
                let (w1, w2) = self.theta.split_at(h * d);
                for j in 0..h {
                    if hidden[j] <= 0.0 {
                        continue;
                    }
                    let gz: f64 = (0..c).map(|k| g_out[k] * w2[k * h + j]).sum();
                    for (gxj, w) in gx.iter_mut().zip(&w1[j * d..(j + 1) * d]) {
                        *gxj += gz * w;
                    }
                }
            }
        }
        Ok(gx)
    }

    pub fn margins(&self, ds: &Dataset) -> Result<Vec<f64>> {
        (0..ds.n()).map(|i| self.margin(ds.x(i), ds.labels[i])).collect()
    }

    /// Homogeneity degree of the architecture: 1 for linear, 2 for the
    /// two-layer network.
    pub fn nominal_degree(&self) -> u32 {
        match self.kind {
            ModelKind::Linear => 1,
            ModelKind::Mlp2 => 2,
        }
    }

    /// `max_k |f_k(cθ, x) − c^α f_k(θ, x)|` and `max_k |f_k(θ, x)|`.
    pub fn homogeneity_residual(&self, x: &[f64], c: f64) -> Result<(f64, f64)> {
        let alpha = self.nominal_degree() as i32;
        let f = self.forward(x)?;
        let fc = self.scaled(c).forward(x)?;
        let mut resid: f64 = 0.0;
        let mut fmax: f64 = 0.0;
        for (a, b) in fc.iter().zip(&f) {
            resid = resid.max((a - c.powi(alpha) * b).abs());
            fmax = fmax.max(b.abs());
        }
        Ok((resid, fmax))
    }

    pub fn checkpoint_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Checkpoint<'a> {
            schema_version: u32,
            #[serde(flatten)]
            params: &'a ModelParams,
        }
        Ok(serde_json::to_string_pretty(&Checkpoint {
            schema_version: crate::SCHEMA_VERSION,
            params: self,
        })?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let p: ModelParams = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }
}

pub const HOMOGENEITY_SCALES: [f64; 3] = [0.5, 2.0, 3.0];

/// Returns the homogeneity degree α after checking
/// `|f(cθ,x) − c^α f(θ,x)| ≤ 1e−9 (1+|f|)` on seeded probe inputs for
/// every `c` in [`HOMOGENEITY_SCALES`].
pub fn homogeneity_degree(params: &ModelParams) -> Result<u32> {
    params.validate()?;
    let mut rng = rng_from_seed(derive_seed(0x686f6d6f, &[params.dims.d as u64]));
    for _ in 0..4 {
        let x: Vec<f64> = (0..params.dims.d)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        for c in HOMOGENEITY_SCALES {
            let (resid, f) = params.homogeneity_residual(&x, c)?;
            if resid > 1e-9 * (1.0 + f) {
                return Err(LabError::InvariantViolation(format!(
                    "f(cθ,x) deviates from c^α f(θ,x) by {resid:e} at c = {c}"
                )));
            }
        }
    }
    Ok(params.nominal_degree())
}

fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

fn binary_sign(y: i64) -> Result<f64> {
    match y {
        1 => Ok(1.0),
        -1 => Ok(-1.0),
        _ => Err(LabError::invalid(format!("binary label must be -1 or +1, got {y}"))),
    }
}

fn argmax_excluding(v: &[f64], skip: usize) -> usize {
    let mut best = usize::MAX;
    for (k, x) in v.iter().enumerate() {
        if k != skip && (best == usize::MAX || *x > v[best]) {
            best = k;
        }
    }
    best
}

/// Binary: `y·f`; multi-class: true-class logit minus the best other logit.
pub fn margin_of_outputs(out: &[f64], y: i64) -> Result<f64> {
    if out.len() == 1 {
        Ok(binary_sign(y)? * out[0])
    } else {
        let yi = class_for_label(y, out.len())?;
        let other = argmax_excluding(out, yi);
        Ok(out[yi] - out[other])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Exponential,
    Logistic,
    CrossEntropy,
    Squared,
}

/// Per-sample loss plus the objective-level regularizer `λ‖θ‖^r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_r")]
    pub r: f64,
}

fn default_r() -> f64 {
    2.0
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        LossSpec {
            kind,
            lambda: 0.0,
            r: 2.0,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(LabError::invalid("lambda must be finite and >= 0"));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(LabError::invalid("regularizer exponent r must be > 0"));
        }
        Ok(())
    }

    /// Whether this loss can be paired with a head of `outputs` values.
    pub fn check_head(&self, outputs: usize) -> Result<()> {
        let ok = match self.kind {
            LossKind::Exponential | LossKind::Logistic => outputs == 1,
            LossKind::CrossEntropy => outputs >= 2,
            LossKind::Squared => true,
        };
        if ok {
            Ok(())
        } else {
            Err(LabError::invalid(format!(
                "{:?} loss is incompatible with a head of {outputs} outputs",
                self.kind
            )))
        }
    }

    pub fn regularizer(&self, theta: &[f64]) -> f64 {
        if self.lambda == 0.0 {
            0.0
        } else {
            self.lambda * crate::stats::norm(theta).powf(self.r)
        }
    }

    fn add_regularizer_grad(&self, theta: &[f64], grad: &mut [f64]) {
        if self.lambda == 0.0 {
            return;
        }
        let nrm = crate::stats::norm(theta);
        if nrm == 0.0 {
            return;
        }
        let coef = self.lambda * self.r * nrm.powf(self.r - 2.0);
        for (g, t) in grad.iter_mut().zip(theta) {
            *g += coef * t;
        }
    }
}

/// `e^{-u}`.
pub fn exponential_loss(u: f64) -> f64 {
    (-u).exp()
}

/// `log(1 + e^{-u})` without overflow for large negative `u`.
pub fn logistic_loss(u: f64) -> f64 {
    if u > 0.0 {
        (-u).exp().ln_1p()
    } else {
        -u + u.exp().ln_1p()
    }
}

fn logistic_dloss(u: f64) -> f64 {
    if u > 0.0 {
        let e = (-u).exp();
        -e / (1.0 + e)
    } else {
        -1.0 / (1.0 + u.exp())
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-sample loss of the head outputs `out` against label `y`. The
/// regularizer is not included.
pub fn loss_value(spec: &LossSpec, out: &[f64], y: i64) -> Result<f64> {
    if out.iter().any(|v| v.is_nan()) {
        return Err(LabError::Numeric("NaN model output".into()));
    }
    spec.check_head(out.len())?;
    let v = match spec.kind {
        LossKind::Exponential => exponential_loss(binary_sign(y)? * out[0]),
        LossKind::Logistic => logistic_loss(binary_sign(y)? * out[0]),
        LossKind::CrossEntropy => {
            let yi = class_for_label(y, out.len())?;
            log_sum_exp(out) - out[yi]
        }
        LossKind::Squared => {
            if out.len() == 1 {
                let r = y as f64 - out[0];
                r * r
            } else {
                let yi = class_for_label(y, out.len())?;
                out.iter()
                    .enumerate()
                    .map(|(k, f)| {
                        let t = if k == yi { 1.0 } else { 0.0 };
                        (t - f) * (t - f)
                    })
                    .sum()
            }
        }
    };
    Ok(v)
}

/// Loss value and its gradient with respect to the head outputs.
fn loss_and_output_grad(spec: &LossSpec, out: &[f64], y: i64, g: &mut [f64]) -> Result<f64> {
    let v = loss_value(spec, out, y)?;
    match spec.kind {
        LossKind::Exponential => {
            let s = binary_sign(y)?;
            g[0] = -s * (-s * out[0]).exp();
        }
        LossKind::Logistic => {
            let s = binary_sign(y)?;
            g[0] = s * logistic_dloss(s * out[0]);
        }
        LossKind::CrossEntropy => {
            let yi = class_for_label(y, out.len())?;
            let lse = log_sum_exp(out);
            for (k, gk) in g.iter_mut().enumerate() {
                *gk = (out[k] - lse).exp() - if k == yi { 1.0 } else { 0.0 };
            }
        }
        LossKind::Squared => {
            if out.len() == 1 {
                g[0] = -2.0 * (y as f64 - out[0]);
            } else {
                let yi = class_for_label(y, out.len())?;
                for (k, gk) in g.iter_mut().enumerate() {
                    let t = if k == yi { 1.0 } else { 0.0 };
                    *gk = -2.0 * (t - out[k]);
                }
            }
        }
    }
    Ok(v)
}

/// `(1/n) Σ w_i ℓ_i + λ‖θ‖^r` and its gradient with respect to θ.
pub fn objective_and_grad(
    params: &ModelParams,
    ds: &Dataset,
    loss: &LossSpec,
    weights: &[f64],
) -> Result<(f64, Vec<f64>)> {
    check_batch(params, ds, loss, weights)?;
    let Dims { d, h, c } = params.dims;
    let n = ds.n();
    let mut grad = vec![0.0; params.theta.len()];
    let mut hidden = vec![0.0; h];
    let mut out = vec![0.0; c];
    let mut g_out = vec![0.0; c];
    let mut total = 0.0;
    for i in 0..n {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        let x = ds.x(i);
        params.forward_raw(x, &mut hidden, &mut out);
        total += w * loss_and_output_grad(loss, &out, ds.labels[i], &mut g_out)?;
        match params.kind {
            ModelKind::Linear => {
                for (k, gk) in g_out.iter().enumerate() {
                    let s = w * gk;
                    for (gj, xj) in grad[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *gj += s * xj;
                    }
                }
            }
            ModelKind::Mlp2 => {
                let (gw1, gw2) = grad.split_at_mut(h * d);
                let w2 = &params.theta[h * d..];
                for (k, gk) in g_out.iter().enumerate() {
                    let s = w * gk;
                    for j in 0..h {
                        gw2[k * h + j] += s * relu(hidden[j]);
                    }
                }
                for j in 0..h {
                    // relu'(0) = 0
                    if hidden[j] <= 0.0 {
                        continue;
                    }
                    let gz: f64 = w * (0..c).map(|k| g_out[k] * w2[k * h + j]).sum::<f64>();
                    for (gj, xj) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *gj += gz * xj;
                    }
                }
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    for g in grad.iter_mut() {
        *g *= inv_n;
    }
    loss.add_regularizer_grad(&params.theta, &mut grad);
    Ok((total * inv_n + loss.regularizer(&params.theta), grad))
}

/// Gradient of the weighted regularized objective.
pub fn grad_params(
    params: &ModelParams,
    ds: &Dataset,
    loss: &LossSpec,
    weights: &[f64],
) -> Result<Vec<f64>> {
    objective_and_grad(params, ds, loss, weights).map(|(_, g)| g)
}

/// Weighted regularized objective value.
pub fn objective(
    params: &ModelParams,
    ds: &Dataset,
    loss: &LossSpec,
    weights: &[f64],
) -> Result<f64> {
    check_batch(params, ds, loss, weights)?;
    let mut total = 0.0;
    for i in 0..ds.n() {
        if weights[i] == 0.0 {
            continue;
        }
        let out = params.forward(ds.x(i))?;
        total += weights[i] * loss_value(loss, &out, ds.labels[i])?;
    }
    Ok(total / ds.n() as f64 + loss.regularizer(&params.theta))
}

/// Per-sample unweighted losses.
pub fn sample_losses(params: &ModelParams, ds: &Dataset, loss: &LossSpec) -> Result<Vec<f64>> {
    (0..ds.n())
        .map(|i| loss_value(loss, &params.forward(ds.x(i))?, ds.labels[i]))
        .collect()
}

fn check_batch(params: &ModelParams, ds: &Dataset, loss: &LossSpec, weights: &[f64]) -> Result<()> {
    loss.validate()?;
    loss.check_head(params.dims.c)?;
    if ds.dim() != params.dims.d {
        return Err(LabError::invalid(format!(
            "dataset has dimension {} but the model expects {}",
            ds.dim(),
            params.dims.d
        )));
    }
    if ds.num_outputs() != params.dims.c {
        return Err(LabError::invalid("model head does not match the dataset's class count"));
    }
    if ds.n() == 0 {
        return Err(LabError::invalid("empty batch"));
    }
    if weights.len() != ds.n() {
        return Err(LabError::invalid("weights must have one entry per sample"));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(LabError::invalid("weights must be finite and >= 0"));
    }
    Ok(())
}

/// Probability of the ground truth under the logistic link, `1/(1+e^{-γ})`.
pub fn ground_truth_probability(margin: f64) -> f64 {
    if margin >= 0.0 {
        1.0 / (1.0 + (-margin).exp())
    } else {
        let e = margin.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn lin(theta: Vec<f64>) -> ModelParams {
        let d = theta.len();
        ModelParams::new(ModelKind::Linear, Dims { d, h: 0, c: 1 }, theta).unwrap()
    }

    #[test]
    fn linear_forward_is_a_dot_product() {
        assert_eq!(lin(vec![1.0, 2.0]).forward(&[3.0, -1.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn mlp_forward_by_hand() {
        let p = ModelParams::new(
            ModelKind::Mlp2,
            Dims { d: 2, h: 2, c: 1 },
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        assert_eq!(p.forward(&[1.0, -2.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn wrong_input_length_is_rejected() {
        assert!(matches!(lin(vec![1.0, 2.0]).forward(&[1.0]), Err(LabError::InvalidInput(_))));
        assert!(ModelParams::new(ModelKind::Linear, Dims { d: 2, h: 0, c: 1 }, vec![1.0]).is_err());
    }

    #[test]
    fn margins_by_definition() {
        assert_eq!(margin_of_outputs(&[2.0], -1).unwrap(), -2.0);
        assert_eq!(margin_of_outputs(&[3.0, 1.0, 0.0], 1).unwrap(), 2.0);
        assert_eq!(margin_of_outputs(&[0.7, 0.7, 0.7], 2).unwrap(), 0.0);
    }

    #[test]
    fn closed_form_losses() {
        let exp = LossSpec::new(LossKind::Exponential);
        let log = LossSpec::new(LossKind::Logistic);
        let ce = LossSpec::new(LossKind::CrossEntropy);
        assert_eq!(loss_value(&exp, &[0.0], 1).unwrap(), 1.0);
        assert!((loss_value(&log, &[0.0], 1).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((loss_value(&ce, &[0.0, 0.0], 1).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(loss_value(&exp, &[f64::NAN], 1), Err(LabError::Numeric(_))));
        assert!(loss_value(&exp, &[0.0, 1.0], 1).is_err());
        assert!(loss_value(&ce, &[0.0], 1).is_err());
    }

    #[test]
    fn logistic_is_stable_and_tails_vanish() {
        let v = logistic_loss(-700.0);
        assert!(v.is_finite() && (v - 700.0).abs() < 1e-9);
        for spec in [LossSpec::new(LossKind::Exponential), LossSpec::new(LossKind::Logistic)] {
            let mut g = [0.0];
            let v = loss_and_output_grad(&spec, &[30.0], 1, &mut g).unwrap();
            assert!(v < 1e-12 && g[0].abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let ds = Dataset::new(array![[1.0, 2.0], [-1.0, 0.5]], vec![1, -1], vec![false; 2], vec![1, 0], 2)
            .unwrap();
        let g = grad_params(&lin(vec![0.3, -0.2]), &ds, &LossSpec::new(LossKind::Exponential), &[0.0, 0.0])
            .unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn linear_exponential_gradient_closed_form() {
        let ds = Dataset::new(array![[1.5, -0.5]], vec![-1], vec![false], vec![0], 2).unwrap();
        let theta = vec![0.2, 0.7];
        let w = 1.7;
        let g = grad_params(&lin(theta.clone()), &ds, &LossSpec::new(LossKind::Exponential), &[w])
            .unwrap();
        let u: f64 = -(0.2 * 1.5 - 0.7 * 0.5);
        let expected = [-w * -1.0 * 1.5 * (-u).exp(), -w * -1.0 * -0.5 * (-u).exp()];
        for (a, b) in g.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn homogeneity_degrees() {
        let p = lin(vec![0.4, -1.3]);
        assert_eq!(homogeneity_degree(&p).unwrap(), 1);
        let f = p.forward(&[1.0, 1.0]).unwrap()[0];
        assert!((p.scaled(2.0).forward(&[1.0, 1.0]).unwrap()[0] - 2.0 * f).abs() < 1e-15);
        let m = ModelParams::init_normal(ModelKind::Mlp2, Dims { d: 3, h: 5, c: 1 }, 3, 1.0).unwrap();
        assert_eq!(homogeneity_degree(&m).unwrap(), 2);
        let x = [0.3, -0.2, 1.1];
        let f = m.forward(&x).unwrap()[0];
        assert!((m.scaled(2.0).forward(&x).unwrap()[0] - 4.0 * f).abs() < 1e-12);
        assert_eq!(m.scaled(1.0).forward(&x).unwrap()[0], f);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = ModelParams::init_normal(ModelKind::Mlp2, Dims { d: 2, h: 3, c: 3 }, 9, 1.0).unwrap();
        let text = m.checkpoint_json().unwrap();
        assert!(text.contains("\"schema_version\": 1"));
        assert_eq!(ModelParams::from_checkpoint_json(&text).unwrap(), m);
    }

    #[test]
    fn margin_input_gradient_of_linear_model() {
        let p = lin(vec![0.5, -2.0]);
        assert_eq!(p.margin_input_gradient(&[1.0, 1.0], -1).unwrap(), vec![-0.5, 2.0]);
    }
}
