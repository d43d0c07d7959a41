//! Hard-margin direction of linearly separable binary data (no bias term).
//!
//! Solves `min ‖θ‖²  s.t.  y_i θ·x_i ≥ 1`. The reported direction is
//! `θ/‖θ‖` and `gamma_star = min_i y_i direction·x_i`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{LabError, Result};
use crate::stats::{dot, norm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxMarginSolution {
    pub direction: Vec<f64>,
    pub gamma_star: f64,
    /// Dual coefficients scaled so that `Σ p_i y_i x_i = direction / gamma_star`.
    pub p: Vec<f64>,
    pub support_set: Vec<usize>,
}

impl MaxMarginSolution {
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a> {
            schema_version: u32,
            #[serde(flatten)]
            sol: &'a MaxMarginSolution,
        }
        Ok(serde_json::to_string_pretty(&Doc {
            schema_version: crate::SCHEMA_VERSION,
            sol: self,
        })?)
    }
}

/// Feasibility phase budget: passes of the perceptron over the data.
pub const FEASIBILITY_PASSES: usize = 50_000;
const DUAL_SWEEPS: usize = 200_000;
const DUAL_TOL: f64 = 1e-13;
const SUPPORT_REL_TOL: f64 = 1e-7;

/// Rows `y_i x_i`.
fn signed_rows(ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    if !ds.is_binary() {
        return Err(LabError::invalid("max-margin solver needs binary labels"));
    }
    if ds.n() == 0 {
        return Err(LabError::invalid("empty dataset"));
    }
    Ok((0..ds.n())
        .map(|i| ds.x(i).iter().map(|v| v * ds.labels[i] as f64).collect())
        .collect())
}

/// Bias-free perceptron; `Some(θ)` with every `z_i·θ > 0`, or `None` when
/// the pass budget runs out.
fn find_separator(z: &[Vec<f64>], passes: usize) -> Option<Vec<f64>> {
    let d = z[0].len();
    let mut theta = vec![0.0; d];
    for _ in 0..passes {
        let mut mistakes = 0;
        for zi in z {
            if dot(zi, &theta) <= 0.0 {
                let n = norm(zi);
                if n == 0.0 {
                    return None;
                }
                for (t, v) in theta.iter_mut().zip(zi) {
                    *t += v / n;
                }
                mistakes += 1;
            }
        }
        if mistakes == 0 {
            return Some(theta);
        }
    }
    None
}

/// Minimum-norm θ satisfying `z_i·θ = 1` for `i ∈ active`, via the
/// pseudo-inverse of the active Gram matrix.
fn min_norm_on_active(z: &[Vec<f64>], active: &[usize]) -> Vec<f64> {
    let d = z[0].len();
    let a = DMatrix::from_fn(active.len(), d, |r, c| z[active[r]][c]);
    let gram = &a * a.transpose();
    let ones = DVector::from_element(active.len(), 1.0);
    let eps = 1e-12 * gram.norm().max(1.0);
    let pinv = gram
        .pseudo_inverse(eps)
        .expect("pseudo-inverse with positive epsilon");
    let beta = pinv * ones;
    (a.transpose() * beta).iter().copied().collect()
}

/// Lawson–Hanson nonnegative least squares: `min ‖A p − b‖, p ≥ 0`.
pub(crate) fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-12 * a.norm().max(1.0);
    for _ in 0..(3 * n + 10) {
        let w = a.transpose() * (b - a * &x);
        let cand = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = cand else { break };
        passive[j] = true;
        loop {
            let idx: Vec<usize> = (0..n).filter(|&k| passive[k]).collect();
            let sub = DMatrix::from_fn(a.nrows(), idx.len(), |r, c| a[(r, idx[c])]);
            let sol = sub
                .clone()
                .svd(true, true)
                .solve(b, 1e-14)
                .unwrap_or_else(|_| DVector::zeros(idx.len()));
            if sol.iter().all(|v| *v > 0.0) {
                for (c, &k) in idx.iter().enumerate() {
                    x[k] = sol[c];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (c, &k) in idx.iter().enumerate() {
                if sol[c] <= 0.0 {
                    let denom = x[k] - sol[c];
                    if denom > 0.0 {
                        alpha = alpha.min(x[k] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            for (c, &k) in idx.iter().enumerate() {
                x[k] += alpha * (sol[c] - x[k]);
                if x[k] <= tol {
                    x[k] = 0.0;
                    passive[k] = false;
                }
            }
        }
    }
    x
}

fn finish(z: &[Vec<f64>], theta: Vec<f64>) -> MaxMarginSolution {
    let nrm = norm(&theta);
    let direction: Vec<f64> = theta.iter().map(|t| t / nrm).collect();
    let margins: Vec<f64> = z.iter().map(|zi| dot(zi, &direction)).collect();
    let gamma_star = margins.iter().copied().fold(f64::INFINITY, f64::min);
    let support_set: Vec<usize> = (0..z.len())
        .filter(|&i| margins[i] <= gamma_star * (1.0 + SUPPORT_REL_TOL))
        .collect();
    // Recover duals from stationarity on the active constraints:
    // Σ_{i∈S} p_i z_i = direction / gamma_star.
    let d = direction.len();
    let a = DMatrix::from_fn(d, support_set.len(), |r, c| z[support_set[c]][r]);
    let b = DVector::from_iterator(d, direction.iter().map(|v| v / gamma_star));
    let ps = nnls(&a, &b);
    let mut p = vec![0.0; z.len()];
    for (c, &i) in support_set.iter().enumerate() {
        p[i] = ps[c];
    }
    MaxMarginSolution {
        direction,
        gamma_star,
        p,
        support_set,
    }
}

/// Iterative solver: perceptron feasibility phase, coordinate ascent on the
/// dual `max Σα − ½‖Σ α_i z_i‖², α ≥ 0`, then an exact solve on the
/// identified active set.
pub fn solve_max_margin(ds: &Dataset) -> Result<MaxMarginSolution> {
    let z = signed_rows(ds)?;
    if find_separator(&z, FEASIBILITY_PASSES).is_none() {
        return Err(LabError::NotSeparable);
    }
    let n = z.len();
    let d = z[0].len();
    let sq: Vec<f64> = z.iter().map(|zi| dot(zi, zi)).collect();
    let mut alpha = vec![0.0; n];
    let mut theta = vec![0.0; d];
    for _ in 0..DUAL_SWEEPS {
        let mut max_step: f64 = 0.0;
        for i in 0..n {
            let g = 1.0 - dot(&z[i], &theta);
            let new = (alpha[i] + g / sq[i]).max(0.0);
            let delta = new - alpha[i];
            if delta != 0.0 {
                alpha[i] = new;
                for (t, v) in theta.iter_mut().zip(&z[i]) {
                    *t += delta * v;
                }
                max_step = max_step.max((delta * sq[i].sqrt()).abs());
            }
        }
        if max_step <= DUAL_TOL * norm(&theta).max(1.0) {
            break;
        }
    }
    let amax = alpha.iter().copied().fold(0.0, f64::max);
    let margins: Vec<f64> = z.iter().map(|zi| dot(zi, &theta)).collect();
    let active: Vec<usize> = (0..n)
        .filter(|&i| alpha[i] > 1e-10 * amax || margins[i] <= 1.0 + 1e-9)
        .collect();
    let polished = min_norm_on_active(&z, &active);
    let feasible = z.iter().all(|zi| dot(zi, &polished) >= 1.0 - 1e-10);
    let theta = if feasible && norm(&polished) <= norm(&theta) * (1.0 + 1e-9) {
        polished
    } else {
        theta
    };
    Ok(finish(&z, theta))
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve_dense(mut m: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Option<Vec<f64>> {
    let k = rhs.len();
    let scale = m.iter().flatten().fold(0.0_f64, |a, v| a.max(v.abs())).max(1e-300);
    for col in 0..k {
        let piv = (col..k).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[piv][col].abs() <= 1e-12 * scale {
            return None;
        }
        m.swap(col, piv);
        rhs.swap(col, piv);
        for r in col + 1..k {
            let f = m[r][col] / m[col][col];
            for c in col..k {
                m[r][c] -= f * m[col][c];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; k];
    for r in (0..k).rev() {
        let s: f64 = (r + 1..k).map(|c| m[r][c] * x[c]).sum();
        x[r] = (rhs[r] - s) / m[r][r];
    }
    Some(x)
}

fn combinations(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if cur.len() == k {
        out.push(cur.clone());
        return;
    }
    for i in start..n {
        cur.push(i);
        combinations(n, k, i + 1, cur, out);
        cur.pop();
    }
}

pub const BRUTE_FORCE_MAX_N: usize = 12;
pub const BRUTE_FORCE_MAX_D: usize = 3;

/// Exhaustive oracle for tiny problems: for every candidate support subset
/// of size ≤ d+1, solve the equality system `z_i·θ = 1` in the span of the
/// subset and keep the feasible candidate with the smallest norm.
pub fn brute_force_max_margin(ds: &Dataset) -> Result<MaxMarginSolution> {
    if ds.n() > BRUTE_FORCE_MAX_N || ds.dim() > BRUTE_FORCE_MAX_D {
        return Err(LabError::invalid(format!(
            "brute force is limited to n <= {BRUTE_FORCE_MAX_N}, d <= {BRUTE_FORCE_MAX_D}"
        )));
    }
    let z = signed_rows(ds)?;
    let n = z.len();
    let d = z[0].len();
    // (squared norm, theta, active subset, multipliers)
    type Candidate = (f64, Vec<f64>, Vec<usize>, Vec<f64>);
    let mut best: Option<Candidate> = None;
    for size in 1..=(d + 1).min(n) {
        let mut subsets = Vec::new();
        combinations(n, size, 0, &mut Vec::new(), &mut subsets);
        for s in subsets {
            let gram: Vec<Vec<f64>> = s
                .iter()
                .map(|&i| s.iter().map(|&j| dot(&z[i], &z[j])).collect())
                .collect();
            let Some(beta) = solve_dense(gram, vec![1.0; size]) else {
                continue;
            };
            let mut theta = vec![0.0; d];
            for (b, &i) in beta.iter().zip(&s) {
                for (t, v) in theta.iter_mut().zip(&z[i]) {
                    *t += b * v;
                }
            }
            if z.iter().any(|zi| dot(zi, &theta) < 1.0 - 1e-9) {
                continue;
            }
            let nrm2 = dot(&theta, &theta);
            if best.as_ref().is_none_or(|(b, ..)| nrm2 < *b) {
                best = Some((nrm2, theta, s, beta));
            }
        }
    }
    let Some((_, theta, subset, beta)) = best else {
        return Err(LabError::NotSeparable);
    };
    let nrm = norm(&theta);
    let direction: Vec<f64> = theta.iter().map(|t| t / nrm).collect();
    let gamma_star = z
        .iter()
        .map(|zi| dot(zi, &direction))
        .fold(f64::INFINITY, f64::min);
    let support_set: Vec<usize> = (0..n)
        .filter(|&i| dot(&z[i], &direction) <= gamma_star * (1.0 + SUPPORT_REL_TOL))
        .collect();
    let mut p = vec![0.0; n];
    for (b, &i) in beta.iter().zip(&subset) {
        p[i] = b.max(0.0);
    }
    Ok(MaxMarginSolution {
        direction,
        gamma_star,
        p,
        support_set,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn ds(rows: Array2<f64>, labels: Vec<i64>) -> Dataset {
        let n = labels.len();
        let class_of = labels.iter().map(|&y| usize::from(y > 0)).collect();
        Dataset::new(rows, labels, vec![false; n], class_of, 2).unwrap()
    }

    #[test]
    fn symmetric_pair() {
        let data = ds(array![[1.0, 1.0], [-1.0, -1.0]], vec![1, -1]);
        for sol in [solve_max_margin(&data).unwrap(), brute_force_max_margin(&data).unwrap()] {
            let r = std::f64::consts::FRAC_1_SQRT_2;
            assert!((sol.direction[0] - r).abs() < 1e-12 && (sol.direction[1] - r).abs() < 1e-12);
            assert!((sol.gamma_star - 2f64.sqrt()).abs() < 1e-12);
            assert_eq!(sol.support_set, vec![0, 1]);
        }
    }

    #[test]
    fn interior_point_does_not_move_the_solution() {
        let base = ds(array![[1.0, 1.0], [-1.0, -1.0]], vec![1, -1]);
        let more = ds(array![[1.0, 1.0], [-1.0, -1.0], [5.0, 4.0]], vec![1, -1, 1]);
        let a = brute_force_max_margin(&base).unwrap();
        let b = brute_force_max_margin(&more).unwrap();
        assert!((a.gamma_star - b.gamma_star).abs() < 1e-12);
        let c = solve_max_margin(&more).unwrap();
        assert!((a.gamma_star - c.gamma_star).abs() < 1e-9);
        assert_eq!(c.p[2], 0.0);
    }

    #[test]
    fn non_separable_is_reported() {
        let data = ds(array![[1.0, 0.0], [1.0, 0.0]], vec![1, -1]);
        assert!(matches!(brute_force_max_margin(&data), Err(LabError::NotSeparable)));
        assert!(matches!(solve_max_margin(&data), Err(LabError::NotSeparable)));
    }

    #[test]
    fn oversized_brute_force_is_rejected() {
        let data = ds(Array2::from_elem((13, 1), 1.0), vec![1; 13]);
        assert!(matches!(brute_force_max_margin(&data), Err(LabError::InvalidInput(_))));
    }

    #[test]
    fn nnls_matches_known_solution() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = DVector::from_vec(vec![2.0, -1.0]);
        let x = nnls(&a, &b);
        assert!((x[0] - 2.0).abs() < 1e-12 && x[1] == 0.0);
    }
}
