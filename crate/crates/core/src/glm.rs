//! Weighted linear and logistic regression.
//!
//! Linear fits solve weighted least squares through a pivoted QR of
//! `sqrt(W) X`. Logistic fits maximise the weighted log-likelihood
//! `sum_i w_i [y_i log mu_i + (1 - y_i) log(1 - mu_i)]` by Newton/IRLS with
//! step halving whenever the deviance increases.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::CohortDataset;
use crate::linalg;
use crate::stats::{expit, softplus};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmError {
    #[error("design references unknown column `{0}`")]
    UnknownColumn(String),
    #[error("duplicate design term `{0}`")]
    DuplicateTerm(String),
    #[error("invalid design term `{0}`")]
    InvalidTerm(String),
    #[error("design has no columns")]
    EmptyDesign,
    #[error("row {row} has no value for design column `{column}`")]
    MissingDesignColumn { column: String, row: usize },
    #[error("input lengths disagree: {0}")]
    LengthMismatch(String),
    #[error("no row has positive weight")]
    NoPositiveWeight,
    #[error("row {row}: weight {weight} is negative or not finite")]
    InvalidWeight { row: usize, weight: f64 },
    #[error("row {row}: response {value} is not valid for the {family} family")]
    InvalidResponse { row: usize, value: f64, family: Family },
    #[error("design matrix is rank deficient (rank {rank} < width {width})")]
    RankDeficient { rank: usize, width: usize },
    #[error("logistic fit separated after {iterations} iterations")]
    Separation { iterations: usize },
    #[error("fit did not converge in {iterations} iterations (max |score| = {gradient_norm:e})")]
    NotConverged { iterations: usize, gradient_norm: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Linear,
    Logistic,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Linear => "linear",
            Family::Logistic => "logistic",
        })
    }
}

/// A main effect (one factor) or an interaction (product of factors).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Term {
    factors: Vec<String>,
}

impl Term {
    pub fn parse(text: &str) -> Result<Self, GlmError> {
        let factors: Vec<String> = text.split(':').map(|f| f.trim().to_string()).collect();
        if factors.iter().any(|f| f.is_empty()) {
            return Err(GlmError::InvalidTerm(text.to_string()));
        }
        Ok(Term { factors })
    }

    pub fn factors(&self) -> &[String] {
        &self.factors
    }

    fn key(&self) -> Vec<&str> {
        let mut k: Vec<&str> = self.factors.iter().map(String::as_str).collect();
        k.sort_unstable();
        k
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.factors.join(":"))
    }
}

#[derive(Serialize, Deserialize)]
struct RawDesign {
    terms: Vec<String>,
    #[serde(default = "default_intercept")]
    intercept: bool,
}

fn default_intercept() -> bool {
    true
}

/// Ordered model terms plus an intercept flag, e.g.
/// `{"terms": ["z1", "s", "z1:s"], "intercept": true}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawDesign", into = "RawDesign")]
pub struct DesignSpec {
    terms: Vec<Term>,
    intercept: bool,
}

impl TryFrom<RawDesign> for DesignSpec {
    type Error = GlmError;

    fn try_from(raw: RawDesign) -> Result<Self, GlmError> {
        let terms: Vec<&str> = raw.terms.iter().map(String::as_str).collect();
        DesignSpec::new(&terms, raw.intercept)
    }
}

impl From<DesignSpec> for RawDesign {
    fn from(d: DesignSpec) -> Self {
        RawDesign {
            terms: d.terms.iter().map(Term::to_string).collect(),
            intercept: d.intercept,
        }
    }
}

/// Dense column-major model matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMatrix {
    pub n: usize,
    pub p: usize,
    pub values: Vec<f64>,
}

impl ModelMatrix {
    pub fn from_columns(columns: &[Vec<f64>]) -> Self {
        let n = columns.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(n * columns.len());
        for c in columns {
            assert_eq!(c.len(), n, "ragged model matrix columns");
            values.extend_from_slice(c);
        }
        ModelMatrix {
            n,
            p: columns.len(),
            values,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[col * self.n + row]
    }

    fn linear_predictor(&self, beta: &[f64]) -> Vec<f64> {
        let mut eta = vec![0.0; self.n];
        for (j, &b) in beta.iter().enumerate() {
            let col = &self.values[j * self.n..(j + 1) * self.n];
            for (e, &x) in eta.iter_mut().zip(col) {
                *e += b * x;
            }
        }
        eta
    }

    /// `X^T v`.
    fn transpose_mul(&self, v: &[f64]) -> Vec<f64> {
        (0..self.p)
            .map(|j| {
                self.values[j * self.n..(j + 1) * self.n]
                    .iter()
                    .zip(v)
                    .map(|(x, v)| x * v)
                    .sum()
            })
            .collect()
    }

    fn scaled_rows(&self, scale: &[f64]) -> Vec<f64> {
        let mut out = self.values.clone();
        for j in 0..self.p {
            for (x, s) in out[j * self.n..(j + 1) * self.n].iter_mut().zip(scale) {
                *x *= s;
            }
        }
        out
    }
}

impl DesignSpec {
    pub fn new(terms: &[&str], intercept: bool) -> Result<Self, GlmError> {
        let mut parsed: Vec<Term> = Vec::with_capacity(terms.len());
        for t in terms {
            let term = Term::parse(t)?;
            if parsed.iter().any(|p| p.key() == term.key()) {
                return Err(GlmError::DuplicateTerm(term.to_string()));
            }
            parsed.push(term);
        }
        if parsed.is_empty() && !intercept {
            return Err(GlmError::EmptyDesign);
        }
        Ok(DesignSpec {
            terms: parsed,
            intercept,
        })
    }

    pub fn intercept_only() -> Self {
        DesignSpec {
            terms: Vec::new(),
            intercept: true,
        }
    }

    /// Intercept plus main effects of `columns`.
    pub fn main_effects<S: AsRef<str>>(columns: &[S]) -> Result<Self, GlmError> {
        let terms: Vec<&str> = columns.iter().map(AsRef::as_ref).collect();
        DesignSpec::new(&terms, true)
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn has_intercept(&self) -> bool {
        self.intercept
    }

    pub fn width(&self) -> usize {
        self.terms.len() + usize::from(self.intercept)
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.width());
        if self.intercept {
            names.push("(intercept)".to_string());
        }
        names.extend(self.terms.iter().map(Term::to_string));
        names
    }

    /// Distinct factor columns referenced by the terms.
    pub fn referenced_columns(&self) -> BTreeSet<&str> {
        self.terms
            .iter()
            .flat_map(|t| t.factors.iter().map(String::as_str))
            .collect()
    }

    pub fn validate(&self, data: &CohortDataset) -> Result<(), GlmError> {
        for c in self.referenced_columns() {
            if data.covariate(c).is_none() {
                return Err(GlmError::UnknownColumn(c.to_string()));
            }
        }
        Ok(())
    }

    /// True when every referenced column is observed on all rows (`S` or stage one).
    pub fn uses_only_stage_one(&self, data: &CohortDataset) -> Result<bool, GlmError> {
        for c in self.referenced_columns() {
            let col = data
                .covariate(c)
                .ok_or_else(|| GlmError::UnknownColumn(c.to_string()))?;
            if !col.always_observed() {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn model_matrix(&self, data: &CohortDataset, rows: &[usize]) -> Result<ModelMatrix, GlmError> {
        let n = rows.len();
        let p = self.width();
        let mut values = Vec::with_capacity(n * p);
        if self.intercept {
            values.resize(n, 1.0);
        }
        for term in &self.terms {
            let cols = term
                .factors
                .iter()
                .map(|f| {
                    data.covariate(f)
                        .ok_or_else(|| GlmError::UnknownColumn(f.clone()))
                        .map(|c| (f, c))
                })
                .collect::<Result<Vec<_>, _>>()?;
            for &row in rows {
                let mut v = 1.0;
                for (name, col) in &cols {
                    v *= col.get(row).ok_or_else(|| GlmError::MissingDesignColumn {
                        column: (*name).clone(),
                        row,
                    })?;
                }
                values.push(v);
            }
        }
        Ok(ModelMatrix { n, p, values })
    }
}

/// Convergence and failure-handling settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    pub score_tol: f64,
    pub rel_deviance_tol: f64,
    pub rank_tol: f64,
    /// Return the last iterate, flagged non-converged, instead of failing on separation.
    pub allow_separation: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 100,
            score_tol: 1e-8,
            rel_deviance_tol: 1e-10,
            rank_tol: 1e-10,
            allow_separation: false,
        }
    }
}

/// Coefficients and convergence record of a fit on a raw model matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlmFit {
    pub family: Family,
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Max absolute component of the weighted score `X^T W (y - mu)`.
    pub gradient_norm: f64,
    /// Weighted log-likelihood (logistic) or weighted residual sum of squares (linear).
    pub objective: f64,
    pub n_obs: usize,
}

/// A fit bound to the design it was estimated on.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FittedGlm {
    pub design: DesignSpec,
    #[serde(flatten)]
    pub fit: GlmFit,
}

impl FittedGlm {
    pub fn family(&self) -> Family {
        self.fit.family
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.fit.coefficients
    }

    /// Fitted means: `x'b` (linear) or `expit(x'b)` clamped strictly inside (0, 1).
    pub fn predict_mean(&self, data: &CohortDataset, rows: &[usize]) -> Result<Vec<f64>, GlmError> {
        let x = self.design.model_matrix(data, rows)?;
        Ok(predict_matrix(self.fit.family, &self.fit.coefficients, &x))
    }
}

pub fn predict_matrix(family: Family, beta: &[f64], x: &ModelMatrix) -> Vec<f64> {
    let eta = x.linear_predictor(beta);
    match family {
        Family::Linear => eta,
        Family::Logistic => eta
            .into_iter()
            .map(|e| expit(e).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
            .collect(),
    }
}

/// Fits `family` with `design` on `rows` of `data`; `response` and `weights`
/// are aligned with `rows`.
pub fn fit(
    family: Family,
    design: &DesignSpec,
    data: &CohortDataset,
    rows: &[usize],
    response: &[f64],
    weights: &[f64],
    opts: &FitOptions,
) -> Result<FittedGlm, GlmError> {
    let x = design.model_matrix(data, rows)?;
    let fit = fit_matrix(family, &x, response, weights, opts)?;
    Ok(FittedGlm {
        design: design.clone(),
        fit,
    })
}

/// Fits on an explicit model matrix. Rows with zero weight are ignored.
pub fn fit_matrix(
    family: Family,
    x: &ModelMatrix,
    response: &[f64],
    weights: &[f64],
    opts: &FitOptions,
) -> Result<GlmFit, GlmError> {
    if response.len() != x.n || weights.len() != x.n {
        return Err(GlmError::LengthMismatch(format!(
            "{} rows, {} responses, {} weights",
            x.n,
            response.len(),
            weights.len()
        )));
    }
    if x.p == 0 {
        return Err(GlmError::EmptyDesign);
    }
    for (row, &w) in weights.iter().enumerate() {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(GlmError::InvalidWeight { row, weight: w });
        }
    }
    for (row, &y) in response.iter().enumerate() {
        let ok = match family {
            Family::Linear => y.is_finite(),
            Family::Logistic => y == 0.0 || y == 1.0,
        };
        if !ok && weights[row] > 0.0 {
            return Err(GlmError::InvalidResponse { row, value: y, family });
        }
    }

    // Restrict to the weighted support.
    let keep: Vec<usize> = (0..x.n).filter(|&i| weights[i] > 0.0).collect();
    if keep.is_empty() {
        return Err(GlmError::NoPositiveWeight);
    }
    let x = if keep.len() == x.n {
        x.clone()
    } else {
        let mut values = Vec::with_capacity(keep.len() * x.p);
        for j in 0..x.p {
            values.extend(keep.iter().map(|&i| x.get(i, j)));
        }
        ModelMatrix {
            n: keep.len(),
            p: x.p,
            values,
        }
    };
    let y: Vec<f64> = keep.iter().map(|&i| response[i]).collect();
    let w: Vec<f64> = keep.iter().map(|&i| weights[i]).collect();

    let sqrt_w: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let rank_err = |e: linalg::RankDeficient| GlmError::RankDeficient {
        rank: e.rank,
        width: x.p,
    };

    match family {
        Family::Linear => {
            let xs = x.scaled_rows(&sqrt_w);
            let ys: Vec<f64> = y.iter().zip(&sqrt_w).map(|(y, s)| y * s).collect();
            let beta = linalg::least_squares(&xs, x.n, x.p, &ys, opts.rank_tol).map_err(rank_err)?;
            let fitted = x.linear_predictor(&beta);
            let wres: Vec<f64> = (0..x.n).map(|i| w[i] * (y[i] - fitted[i])).collect();
            let rss = (0..x.n).map(|i| w[i] * (y[i] - fitted[i]).powi(2)).sum();
            Ok(GlmFit {
                family,
                gradient_norm: max_abs(&x.transpose_mul(&wres)),
                coefficients: beta,
                converged: true,
                iterations: 1,
                objective: rss,
                n_obs: x.n,
            })
        }
        Family::Logistic => {
            // Rank on the weighted support, before any curvature weights.
            let xs = x.scaled_rows(&sqrt_w);
            linalg::least_squares(&xs, x.n, x.p, &vec![0.0; x.n], opts.rank_tol).map_err(rank_err)?;
            irls(&x, &y, &w, opts)
        }
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn logistic_deviance(eta: &[f64], y: &[f64], w: &[f64]) -> f64 {
    // -2 * sum w [y log mu + (1-y) log(1-mu)], with log mu = -softplus(-eta).
    2.0 * eta
        .iter()
        .zip(y)
        .zip(w)
        .map(|((&e, &y), &w)| w * (y * softplus(-e) + (1.0 - y) * softplus(e)))
        .sum::<f64>()
}

/// A whole outcome class fitted this close to its label means the likelihood
/// has no finite maximiser.
const SEPARATION_TOL: f64 = 1e-6;

fn separated(mu: &[f64], y: &[f64]) -> bool {
    let ones = y.contains(&1.0);
    let zeros = y.contains(&0.0);
    let pinned_ones = ones && mu.iter().zip(y).filter(|(_, &y)| y == 1.0).all(|(&m, _)| m > 1.0 - SEPARATION_TOL);
    let pinned_zeros = zeros && mu.iter().zip(y).filter(|(_, &y)| y == 0.0).all(|(&m, _)| m < SEPARATION_TOL);
    pinned_ones || pinned_zeros
}

fn irls(x: &ModelMatrix, y: &[f64], w: &[f64], opts: &FitOptions) -> Result<GlmFit, GlmError> {
    let n = x.n;
    let mut beta = vec![0.0; x.p];
    let mut eta = vec![0.0; n];
    let mut mu: Vec<f64> = vec![0.5; n];
    let mut dev = logistic_deviance(&eta, y, w);

    let score = |mu: &[f64]| {
        let r: Vec<f64> = (0..n).map(|i| w[i] * (y[i] - mu[i])).collect();
        x.transpose_mul(&r)
    };
    let done = |beta: Vec<f64>, dev: f64, iterations: usize, gradient_norm: f64, converged: bool| GlmFit {
        family: Family::Logistic,
        coefficients: beta,
        converged,
        iterations,
        gradient_norm,
        objective: -0.5 * dev,
        n_obs: n,
    };

    for iter in 0..opts.max_iter {
        let g = score(&mu);
        let gnorm = max_abs(&g);
        if separated(&mu, y) {
            if opts.allow_separation {
                return Ok(done(beta, dev, iter, gnorm, false));
            }
            return Err(GlmError::Separation { iterations: iter });
        }
        if gnorm <= opts.score_tol {
            return Ok(done(beta, dev, iter, gnorm, true));
        }

        // Newton step: (X' W V X) delta = X' W (y - mu), as least squares in sqrt(W V) X.
        let r: Vec<f64> = (0..n).map(|i| (w[i] * mu[i] * (1.0 - mu[i])).sqrt()).collect();
        let rhs: Vec<f64> = (0..n)
            .map(|i| if r[i] > 0.0 { w[i] * (y[i] - mu[i]) / r[i] } else { 0.0 })
            .collect();
        let xs = x.scaled_rows(&r);
        let delta = match linalg::least_squares(&xs, n, x.p, &rhs, opts.rank_tol) {
            Ok(d) => d,
            // Curvature collapsing on a full-rank design means fitted values are pinned.
            Err(_) if opts.allow_separation => return Ok(done(beta, dev, iter, gnorm, false)),
            Err(_) => return Err(GlmError::Separation { iterations: iter }),
        };

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = beta.iter().zip(&delta).map(|(b, d)| b + step * d).collect();
            let cand_eta = x.linear_predictor(&cand);
            let cand_dev = logistic_deviance(&cand_eta, y, w);
            if cand_dev.is_finite() && cand_dev <= dev * (1.0 + 1e-12) + 1e-300 {
                accepted = Some((cand, cand_eta, cand_dev));
                break;
            }
            step *= 0.5;
        }
        let Some((new_beta, new_eta, new_dev)) = accepted else {
            // No descent possible from here: the iterate is as good as it gets numerically.
            let gnorm = max_abs(&score(&mu));
            return Ok(done(beta, dev, iter + 1, gnorm, gnorm <= opts.score_tol));
        };
        let rel_change = (dev - new_dev).abs() / (new_dev.abs() + 0.1);
        beta = new_beta;
        eta = new_eta;
        mu = eta.iter().map(|&e| expit(e)).collect();
        dev = new_dev;
        if rel_change <= opts.rel_deviance_tol {
            if separated(&mu, y) && !opts.allow_separation {
                return Err(GlmError::Separation { iterations: iter + 1 });
            }
            let gnorm = max_abs(&score(&mu));
            return Ok(done(beta, dev, iter + 1, gnorm, !separated(&mu, y)));
        }
    }
    let gnorm = max_abs(&score(&mu));
    if gnorm <= opts.score_tol && !separated(&mu, y) {
        return Ok(done(beta, dev, opts.max_iter, gnorm, true));
    }
    Err(GlmError::NotConverged {
        iterations: opts.max_iter,
        gradient_norm: gnorm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CohortColumns, ColumnSpec, Covariate};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn matrix(cols: &[&[f64]]) -> ModelMatrix {
        ModelMatrix::from_columns(&cols.iter().map(|c| c.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn logistic_intercept_only_balanced_is_zero() {
        let y: Vec<f64> = (0..100).map(|i| f64::from(u8::from(i < 50))).collect();
        let x = matrix(&[&[1.0; 100]]);
        let fit = fit_matrix(Family::Logistic, &x, &y, &[1.0; 100], &FitOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.coefficients[0].abs() < 1e-8);
    }

    #[test]
    fn linear_interpolates_exact_line() {
        let t = [0.0, 1.0, 2.0, 3.5, -1.0];
        let y: Vec<f64> = t.iter().map(|t| 2.0 + 3.0 * t).collect();
        let x = matrix(&[&[1.0; 5], &t]);
        let fit = fit_matrix(Family::Linear, &x, &y, &[1.0; 5], &FitOptions::default()).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-13);
        assert!((fit.coefficients[1] - 3.0).abs() < 1e-13);
        assert!(fit.objective < 1e-24);
    }

    #[test]
    fn separated_points_are_reported() {
        let x = matrix(&[&[1.0, 1.0], &[0.0, 1.0]]);
        let err = fit_matrix(Family::Logistic, &x, &[0.0, 1.0], &[1.0, 1.0], &FitOptions::default());
        assert!(matches!(err, Err(GlmError::Separation { .. })), "{err:?}");
        let opts = FitOptions {
            allow_separation: true,
            ..FitOptions::default()
        };
        let fit = fit_matrix(Family::Logistic, &x, &[0.0, 1.0], &[1.0, 1.0], &opts).unwrap();
        assert!(!fit.converged);
    }

    #[test]
    fn rank_deficiency_is_an_error() {
        let t = [1.0, 2.0, 3.0, 4.0];
        let t2: Vec<f64> = t.iter().map(|v| 2.0 * v).collect();
        let x = matrix(&[&[1.0; 4], &t, &t2]);
        for family in [Family::Linear, Family::Logistic] {
            let err = fit_matrix(family, &x, &[0.0, 1.0, 0.0, 1.0], &[1.0; 4], &FitOptions::default());
            assert!(matches!(err, Err(GlmError::RankDeficient { rank: 2, width: 3 })), "{err:?}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = matrix(&[&[1.0, 1.0]]);
        let o = FitOptions::default();
        assert!(matches!(
            fit_matrix(Family::Logistic, &x, &[0.0, 0.5], &[1.0, 1.0], &o),
            Err(GlmError::InvalidResponse { row: 1, .. })
        ));
        assert!(matches!(
            fit_matrix(Family::Linear, &x, &[0.0, 0.5], &[1.0, -1.0], &o),
            Err(GlmError::InvalidWeight { row: 1, .. })
        ));
        assert!(matches!(
            fit_matrix(Family::Linear, &x, &[0.0, 0.5], &[0.0, 0.0], &o),
            Err(GlmError::NoPositiveWeight)
        ));
    }

    #[test]
    fn zero_weight_rows_are_ignored() {
        let x = matrix(&[&[1.0, 1.0, 1.0]]);
        let fit = fit_matrix(Family::Linear, &x, &[1.0, 3.0, 100.0], &[1.0, 1.0, 0.0], &FitOptions::default())
            .unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-14);
    }

    /// Independent optimiser: coarse grid then Nelder-Mead on the weighted
    /// negative log-likelihood, written directly from the definition.
    fn nelder_mead_oracle(t: &[f64], y: &[f64], w: &[f64]) -> [f64; 2] {
        let nll = |b: [f64; 2]| -> f64 {
            t.iter()
                .zip(y)
                .zip(w)
                .map(|((&t, &y), &w)| {
                    let mu = 1.0 / (1.0 + (-(b[0] + b[1] * t)).exp());
                    -w * (y * mu.ln() + (1.0 - y) * (1.0 - mu).ln())
                })
                .sum()
        };
        let mut best = [0.0, 0.0];
        let mut best_v = f64::INFINITY;
        for i in -40..=40 {
            for j in -40..=40 {
                let b = [i as f64 * 0.1, j as f64 * 0.1];
                let v = nll(b);
                if v < best_v {
                    best_v = v;
                    best = b;
                }
            }
        }
        let mut simplex = [best, [best[0] + 0.1, best[1]], [best[0], best[1] + 0.1]];
        let mut vals = simplex.map(nll);
        for _ in 0..5000 {
            let mut idx = [0, 1, 2];
            idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
            let (lo, mid, hi) = (idx[0], idx[1], idx[2]);
            let c = [
                (simplex[lo][0] + simplex[mid][0]) / 2.0,
                (simplex[lo][1] + simplex[mid][1]) / 2.0,
            ];
            let along = |f: f64| [c[0] + f * (simplex[hi][0] - c[0]), c[1] + f * (simplex[hi][1] - c[1])];
            let r = along(-1.0);
            let fr = nll(r);
            if fr < vals[lo] {
                let e = along(-2.0);
                let fe = nll(e);
                if fe < fr {
                    simplex[hi] = e;
                    vals[hi] = fe;
                } else {
                    simplex[hi] = r;
                    vals[hi] = fr;
                }
            } else if fr < vals[mid] {
                simplex[hi] = r;
                vals[hi] = fr;
            } else {
                let k = along(0.5);
                let fk = nll(k);
                if fk < vals[hi] {
                    simplex[hi] = k;
                    vals[hi] = fk;
                } else {
                    for i in [mid, hi] {
                        simplex[i] = [
                            (simplex[i][0] + simplex[lo][0]) / 2.0,
                            (simplex[i][1] + simplex[lo][1]) / 2.0,
                        ];
                        vals[i] = nll(simplex[i]);
                    }
                }
            }
            let spread = (vals[hi] - vals[lo]).abs();
            if spread < 1e-15 && (simplex[hi][0] - simplex[lo][0]).abs() < 1e-9 {
                break;
            }
        }
        let lo = (0..3).min_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap()).unwrap();
        simplex[lo]
    }

    #[test]
    fn logistic_agrees_with_nelder_mead_oracle() {
        let mut rng = crate::rng::seeded(2024);
        let t: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y: Vec<f64> = t
            .iter()
            .map(|&t| f64::from(u8::from(rng.random::<f64>() < expit(-1.0 + 2.0 * t))))
            .collect();
        let w: Vec<f64> = (0..200).map(|_| 0.5 + rng.random::<f64>()).collect();
        let x = matrix(&[&vec![1.0; 200], &t]);
        let fit = fit_matrix(Family::Logistic, &x, &y, &w, &FitOptions::default()).unwrap();
        let oracle = nelder_mead_oracle(&t, &y, &w);
        for k in 0..2 {
            assert!(
                (fit.coefficients[k] - oracle[k]).abs() < 1e-4,
                "{:?} vs {:?}",
                fit.coefficients,
                oracle
            );
        }
    }

    fn small_dataset() -> CohortDataset {
        let spec = ColumnSpec {
            s: "s".into(),
            d: "d".into(),
            a: "a".into(),
            y: "y".into(),
            x1: vec!["z1".into()],
            x2: vec!["z2".into()],
            id: None,
        };
        CohortDataset::new(CohortColumns {
            spec,
            ids: None,
            s: vec![true, true, false, false],
            d: vec![true, true, true, false],
            a: vec![Some(1), Some(0), None, None],
            y: vec![Some(1.0), Some(2.0), None, None],
            x1: vec![Covariate::new("z1", vec![0.5, -1.0, 2.0, 3.0])],
            x2: vec![Covariate::new("z2", vec![Some(1.0), Some(2.0), Some(0.0), None])],
        })
        .unwrap()
    }

    #[test]
    fn model_matrix_builds_interactions() {
        let data = small_dataset();
        let design = DesignSpec::new(&["z1", "s", "z1:s"], true).unwrap();
        let x = design.model_matrix(&data, &[0, 2, 3]).unwrap();
        assert_eq!(x.p, 4);
        assert_eq!(x.values, vec![1.0, 1.0, 1.0, 0.5, 2.0, 3.0, 1.0, 0.0, 0.0, 0.5, 0.0, 0.0]);
        assert!(design.uses_only_stage_one(&data).unwrap());
        let with_x2 = DesignSpec::main_effects(&["z1", "z2"]).unwrap();
        assert!(!with_x2.uses_only_stage_one(&data).unwrap());
        assert!(matches!(
            with_x2.model_matrix(&data, &[3]),
            Err(GlmError::MissingDesignColumn { row: 3, .. })
        ));
        assert!(matches!(
            DesignSpec::main_effects(&["zz"]).unwrap().validate(&data),
            Err(GlmError::UnknownColumn(_))
        ));
    }

    #[test]
    fn design_rejects_duplicates_and_round_trips_json() {
        assert!(matches!(
            DesignSpec::new(&["z1:s", "s:z1"], true),
            Err(GlmError::DuplicateTerm(_))
        ));
        assert!(DesignSpec::new(&[], false).is_err());
        let d: DesignSpec = serde_json::from_str(r#"{"terms": ["z1", "s", "z1:s"], "intercept": true}"#).unwrap();
        assert_eq!(d.width(), 4);
        assert_eq!(serde_json::to_string(&d).unwrap(), r#"{"terms":["z1","s","z1:s"],"intercept":true}"#);
        assert!(serde_json::from_str::<DesignSpec>(r#"{"terms": ["z1", "z1"]}"#).is_err());
    }

    #[test]
    fn zero_coefficients_predict_one_half() {
        let data = small_dataset();
        let model = FittedGlm {
            design: DesignSpec::main_effects(&["z1"]).unwrap(),
            fit: GlmFit {
                family: Family::Logistic,
                coefficients: vec![0.0, 0.0],
                converged: true,
                iterations: 0,
                gradient_norm: 0.0,
                objective: 0.0,
                n_obs: 0,
            },
        };
        assert_eq!(model.predict_mean(&data, &[0, 1, 2, 3]).unwrap(), vec![0.5; 4]);
    }

    #[test]
    fn logistic_predictions_match_direct_sigmoid() {
        let beta = [0.3, -1.2, 0.7];
        let rows: Vec<[f64; 2]> = (0..10).map(|i| [i as f64 * 0.37 - 1.5, (i * i) as f64 * 0.05 - 0.8]).collect();
        let x = ModelMatrix::from_columns(&[
            vec![1.0; 10],
            rows.iter().map(|r| r[0]).collect(),
            rows.iter().map(|r| r[1]).collect(),
        ]);
        let pred = predict_matrix(Family::Logistic, &beta, &x);
        for (r, p) in rows.iter().zip(pred) {
            let eta = beta[0] + beta[1] * r[0] + beta[2] * r[1];
            let oracle = 1.0 / (1.0 + (-eta).exp());
            assert!((p - oracle).abs() < 1e-12);
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn saturated_linear_refit_reproduces_response() {
        let data = small_dataset();
        let design = DesignSpec::main_effects(&["z1"]).unwrap();
        let rows = [0, 1];
        let y = [1.0, 2.0];
        let model = fit(Family::Linear, &design, &data, &rows, &y, &[1.0, 1.0], &FitOptions::default()).unwrap();
        let pred = model.predict_mean(&data, &rows).unwrap();
        assert!((pred[0] - 1.0).abs() < 1e-13 && (pred[1] - 2.0).abs() < 1e-13);
    }
}
