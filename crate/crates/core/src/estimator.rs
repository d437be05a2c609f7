//! The one-step estimator of `psi(a) = E[Y^a]` over the whole cohort, its
//! no-sub-sampling special case, influence-curve and bootstrap inference, and
//! plug-in asymptotic variances with and without sub-sampling.

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::CohortDataset;
use crate::nuisance::{ArmNuisance, NuisanceError, NuisanceSet};
use crate::rng;
use crate::stats;

/// Probabilities entering an inverse weight below this are an error.
pub const WEIGHT_FLOOR: f64 = 1e-12;

/// Largest tolerated share of failed bootstrap replicates.
pub const MAX_BOOTSTRAP_FAILURE_RATE: f64 = 0.10;

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("{quantity} = {value:e} at row {row} is below the weight floor {WEIGHT_FLOOR:e}")]
    DegenerateWeight { row: usize, quantity: String, value: f64 },
    #[error("no trial participant received arm {0}")]
    EmptyArm(i64),
    #[error("row {row} has D = 0; the no-sub-sampling estimator needs census data")]
    NotCensus { row: usize },
    #[error("estimates come from different datasets: {0}")]
    MismatchedData(String),
    #[error("nuisance value missing at row {row}: {quantity}")]
    MissingNuisance { row: usize, quantity: String },
    #[error("{failures} of {replicates} bootstrap replicates failed")]
    TooManyFailures { failures: usize, replicates: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Nuisance(#[from] NuisanceError),
}

/// Per-unit influence values. `values` are uncentered, so their mean is the
/// point estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceCurve {
    pub estimate: f64,
    pub values: Vec<f64>,
}

impl InfluenceCurve {
    fn from_terms(values: Vec<f64>) -> Self {
        InfluenceCurve {
            estimate: stats::mean(&values),
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn centered(&self) -> Vec<f64> {
        self.values.iter().map(|v| v - self.estimate).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcMode {
    /// `n^-1 sqrt(sum (IC_i - psi)^2)`.
    #[default]
    Centered,
    /// `n^-1 sqrt(sum IC_i^2)`, without centering.
    PaperLiteral,
}

/// A point estimate for one arm with its influence curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmEstimate {
    pub arm: i64,
    pub psi: f64,
    pub ic: InfluenceCurve,
    /// Probabilities raised to the opt-in clipping floor.
    pub clipped: usize,
    #[serde(skip)]
    fingerprint: u64,
}

/// A difference `psi(arm) - psi(reference)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContrastEstimate {
    pub arm: i64,
    pub reference: i64,
    pub estimate: f64,
    pub ic: InfluenceCurve,
}

fn fingerprint(data: &CohortDataset) -> u64 {
    let mut h = DefaultHasher::new();
    data.n_units().hash(&mut h);
    data.s().hash(&mut h);
    data.d().hash(&mut h);
    data.a().hash(&mut h);
    for y in data.y() {
        y.map(f64::to_bits).hash(&mut h);
    }
    h.finish()
}

/// Applies the weight floor, or the opt-in clipping floor when given.
struct Floor {
    clip: Option<f64>,
    clipped: usize,
}

impl Floor {
    fn new(clip: Option<f64>) -> Result<Self, EstimateError> {
        if let Some(f) = clip {
            if !(f > 0.0 && f < 1.0) {
                return Err(EstimateError::InvalidArgument(format!("clip floor {f} not in (0, 1)")));
            }
        }
        Ok(Floor { clip, clipped: 0 })
    }

    fn apply(&mut self, row: usize, quantity: &str, value: f64) -> Result<f64, EstimateError> {
        let value = match self.clip {
            Some(f) if value < f => {
                self.clipped += 1;
                f
            }
            _ => value,
        };
        if !(value >= WEIGHT_FLOOR) {
            return Err(EstimateError::DegenerateWeight {
                row,
                quantity: quantity.to_string(),
                value,
            });
        }
        Ok(value)
    }
}

fn required(v: Option<f64>, row: usize, quantity: &str) -> Result<f64, EstimateError> {
    v.ok_or_else(|| EstimateError::MissingNuisance {
        row,
        quantity: quantity.to_string(),
    })
}

fn check_lengths(data: &CohortDataset, nuis: &ArmNuisance) -> Result<(), EstimateError> {
    let n = data.n_units();
    let lens = [nuis.b.len(), nuis.c.len(), nuis.g.len(), nuis.p.len(), nuis.e.len()];
    if lens.iter().any(|&l| l != n) {
        return Err(EstimateError::InvalidArgument(format!(
            "nuisance vectors {lens:?} do not match {n} units"
        )));
    }
    if !data.a().iter().any(|&a| a.is_some()) {
        return Err(EstimateError::InvalidArgument("no trial participants".into()));
    }
    Ok(())
}

/// Inverse-propensity residual term `I(S=1, A=a) / (p e) * (Y - g)`.
fn residual_term(
    data: &CohortDataset,
    arm: i64,
    nuis: &ArmNuisance,
    i: usize,
    g: f64,
    floor: &mut Floor,
) -> Result<f64, EstimateError> {
    if !(data.s()[i] && data.a()[i] == Some(arm)) {
        return Ok(0.0);
    }
    let p = required(nuis.p[i], i, "p")?;
    let e = required(nuis.e[i], i, "e")?;
    let pe = floor.apply(i, "p*e", p * e)?;
    let y = data.y()[i].expect("trial rows have outcomes");
    Ok((y - g) / pe)
}

fn ensure_arm(data: &CohortDataset, arm: i64) -> Result<(), EstimateError> {
    if data.s().iter().zip(data.a()).any(|(&s, &a)| s && a == Some(arm)) {
        Ok(())
    } else {
        Err(EstimateError::EmptyArm(arm))
    }
}

/// The sub-sampling estimator from already evaluated nuisance values.
pub fn psi_from_values(
    data: &CohortDataset,
    arm: i64,
    nuis: &ArmNuisance,
    clip_floor: Option<f64>,
) -> Result<ArmEstimate, EstimateError> {
    check_lengths(data, nuis)?;
    ensure_arm(data, arm)?;
    let mut floor = Floor::new(clip_floor)?;
    let mut terms = Vec::with_capacity(data.n_units());
    for i in 0..data.n_units() {
        let b = nuis.b[i];
        if !data.d()[i] {
            terms.push(b);
            continue;
        }
        let c = floor.apply(i, "c", nuis.c[i])?;
        let g = required(nuis.g[i], i, "g")?;
        let r = residual_term(data, arm, nuis, i, g, &mut floor)?;
        terms.push(b + (g - b) / c + r);
    }
    Ok(finish(data, arm, terms, floor.clipped))
}

/// The no-sub-sampling estimator from already evaluated nuisance values.
pub fn psi_nosub_from_values(
    data: &CohortDataset,
    arm: i64,
    nuis: &ArmNuisance,
    clip_floor: Option<f64>,
) -> Result<ArmEstimate, EstimateError> {
    if let Some(row) = data.d().iter().position(|&d| !d) {
        return Err(EstimateError::NotCensus { row });
    }
    check_lengths(data, nuis)?;
    ensure_arm(data, arm)?;
    let mut floor = Floor::new(clip_floor)?;
    let mut terms = Vec::with_capacity(data.n_units());
    for i in 0..data.n_units() {
        let g = required(nuis.g[i], i, "g")?;
        let r = residual_term(data, arm, nuis, i, g, &mut floor)?;
        terms.push(g + r);
    }
    Ok(finish(data, arm, terms, floor.clipped))
}

fn finish(data: &CohortDataset, arm: i64, terms: Vec<f64>, clipped: usize) -> ArmEstimate {
    let ic = InfluenceCurve::from_terms(terms);
    ArmEstimate {
        arm,
        psi: ic.estimate,
        ic,
        clipped,
        fingerprint: fingerprint(data),
    }
}

pub fn estimate_psi(data: &CohortDataset, arm: i64, nuisance: &NuisanceSet) -> Result<ArmEstimate, EstimateError> {
    ensure_arm(data, arm)?;
    let values = nuisance.evaluate(data, arm)?;
    psi_from_values(data, arm, &values, nuisance.clip_floor)
}

pub fn estimate_psi_nosub(
    data: &CohortDataset,
    arm: i64,
    nuisance: &NuisanceSet,
) -> Result<ArmEstimate, EstimateError> {
    if let Some(row) = data.d().iter().position(|&d| !d) {
        return Err(EstimateError::NotCensus { row });
    }
    ensure_arm(data, arm)?;
    let values = nuisance.evaluate(data, arm)?;
    psi_nosub_from_values(data, arm, &values, nuisance.clip_floor)
}

pub fn contrast(arm: &ArmEstimate, reference: &ArmEstimate) -> Result<ContrastEstimate, EstimateError> {
    if arm.ic.len() != reference.ic.len() || arm.fingerprint != reference.fingerprint {
        return Err(EstimateError::MismatchedData(format!(
            "arm {} ({} units) vs arm {} ({} units)",
            arm.arm,
            arm.ic.len(),
            reference.arm,
            reference.ic.len()
        )));
    }
    let values: Vec<f64> = arm.ic.values.iter().zip(&reference.ic.values).map(|(a, b)| a - b).collect();
    let ic = InfluenceCurve {
        estimate: arm.psi - reference.psi,
        values,
    };
    Ok(ContrastEstimate {
        arm: arm.arm,
        reference: reference.arm,
        estimate: ic.estimate,
        ic,
    })
}

/// Influence-curve standard error. Returns 0 for fewer than two units.
pub fn ic_standard_error(ic: &InfluenceCurve, mode: IcMode) -> f64 {
    let n = ic.len();
    if n < 2 {
        return 0.0;
    }
    let ss = match mode {
        IcMode::Centered => stats::sum(ic.values.iter().map(|v| (v - ic.estimate).powi(2))),
        IcMode::PaperLiteral => stats::sum(ic.values.iter().map(|v| v * v)),
    };
    ss.sqrt() / n as f64
}

/// `estimate -/+ z_{1 - alpha/2} * se`.
pub fn wald_interval(estimate: f64, se: f64, alpha: f64) -> (f64, f64) {
    let half = stats::normal_quantile(1.0 - alpha / 2.0) * se;
    (estimate - half, estimate + half)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapSummary {
    pub replicates: usize,
    pub failures: usize,
    /// Standard deviation (divisor `R - 1`) of successful replicates, per estimand.
    pub standard_errors: Vec<f64>,
    /// Percentile intervals at `alpha / 2` and `1 - alpha / 2`, per estimand.
    pub intervals: Vec<(f64, f64)>,
    /// Successful replicate estimates, in replicate order.
    #[serde(skip)]
    pub draws: Vec<Vec<f64>>,
}

/// Resamples units with replacement `replicates` times and applies `estimate`
/// to each resample. Replicate `b` uses RNG stream `(seed, b)`, so results do
/// not depend on scheduling. Failed replicates are excluded and counted.
pub fn bootstrap<F>(
    data: &CohortDataset,
    replicates: usize,
    seed: u64,
    alpha: f64,
    estimate: F,
) -> Result<BootstrapSummary, EstimateError>
where
    F: Fn(&CohortDataset) -> Result<Vec<f64>, crate::Error> + Sync,
{
    if replicates == 0 {
        return Err(EstimateError::InvalidArgument("bootstrap needs at least one replicate".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(EstimateError::InvalidArgument(format!("alpha {alpha} not in (0, 1)")));
    }
    let n = data.n_units();
    let outcomes: Vec<Option<Vec<f64>>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::stream(seed, b as u64);
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            estimate(&data.select_rows(&rows)).ok()
        })
        .collect();
    let failures = outcomes.iter().filter(|o| o.is_none()).count();
    if failures as f64 > MAX_BOOTSTRAP_FAILURE_RATE * replicates as f64 || failures == replicates {
        return Err(EstimateError::TooManyFailures { failures, replicates });
    }
    let draws: Vec<Vec<f64>> = outcomes.into_iter().flatten().collect();
    let k = draws[0].len();
    let mut standard_errors = Vec::with_capacity(k);
    let mut intervals = Vec::with_capacity(k);
    for j in 0..k {
        let mut col: Vec<f64> = draws.iter().map(|d| d[j]).collect();
        standard_errors.push(stats::sample_variance(&col).sqrt());
        col.sort_by(f64::total_cmp);
        intervals.push((
            stats::quantile_sorted(&col, alpha / 2.0),
            stats::quantile_sorted(&col, 1.0 - alpha / 2.0),
        ));
    }
    Ok(BootstrapSummary {
        replicates,
        failures,
        standard_errors,
        intervals,
        draws,
    })
}

/// Plug-in asymptotic variances of `sqrt(n) (psi_hat - psi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AvarComponents {
    /// Without sub-sampling: `E[v / (p e)] + Var[g]`.
    pub avar1_hat: f64,
    /// `E[((1 - c) / c) (g - b)^2]`.
    pub penalty_hat: f64,
    pub avar2_hat: f64,
    /// Pooled mean squared residual among trial participants in the arm.
    pub residual_variance: f64,
}

/// Expectations over the cohort use `D / c` weights on measured rows, which
/// stand in for the rows whose stage-two covariates were not collected.
pub fn avar_components(data: &CohortDataset, arm: i64, nuis: &ArmNuisance) -> Result<AvarComponents, EstimateError> {
    check_lengths(data, nuis)?;
    ensure_arm(data, arm)?;
    let n = data.n_units() as f64;
    let mut floor = Floor::new(None)?;

    let mut residuals = Vec::new();
    for i in 0..data.n_units() {
        if data.s()[i] && data.a()[i] == Some(arm) {
            let g = required(nuis.g[i], i, "g")?;
            residuals.push((data.y()[i].expect("trial rows have outcomes") - g).powi(2));
        }
    }
    let v = stats::mean(&residuals);

    let mut inv_pe = Vec::new();
    let mut w = Vec::new();
    let mut wg = Vec::new();
    let mut gs = Vec::new();
    let mut gaps = Vec::new();
    for i in 0..data.n_units() {
        if !data.d()[i] {
            continue;
        }
        let c = floor.apply(i, "c", nuis.c[i])?;
        let g = required(nuis.g[i], i, "g")?;
        let pe = floor.apply(i, "p*e", required(nuis.p[i], i, "p")? * required(nuis.e[i], i, "e")?)?;
        inv_pe.push(v / (c * pe));
        w.push(1.0 / c);
        wg.push(g / c);
        gs.push(g);
        gaps.push((1.0 - c) / (c * c) * (g - nuis.b[i]).powi(2));
    }
    let total_w = stats::sum(w.iter().copied());
    let mean_g = stats::sum(wg.iter().copied()) / total_w;
    let var_g = stats::sum(w.iter().zip(&gs).map(|(wi, g)| wi * (g - mean_g).powi(2))) / total_w;
    let avar1_hat = stats::sum(inv_pe.iter().copied()) / n + var_g;
    let penalty_hat = stats::sum(gaps.iter().copied()) / n;
    Ok(AvarComponents {
        avar1_hat,
        penalty_hat,
        avar2_hat: avar1_hat + penalty_hat,
        residual_variance: v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CohortColumns, ColumnSpec, Covariate};

    fn spec() -> ColumnSpec {
        ColumnSpec {
            s: "s".into(),
            d: "d".into(),
            a: "a".into(),
            y: "y".into(),
            x1: vec!["z1".into()],
            x2: vec![],
            id: None,
        }
    }

    /// Eight rows with hand-fixed nuisance values for arm 1.
    fn eight_rows() -> (CohortDataset, ArmNuisance) {
        let s = [true, true, true, false, false, false, false, false];
        let d = [true, true, true, true, true, false, false, true];
        let a = [Some(1), Some(0), Some(1), None, None, None, None, None];
        let y = [Some(2.0), Some(0.5), Some(-0.3), None, None, None, None, None];
        let data = CohortDataset::new(CohortColumns {
            spec: spec(),
            ids: None,
            s: s.to_vec(),
            d: d.to_vec(),
            a: a.to_vec(),
            y: y.to_vec(),
            x1: vec![Covariate::new("z1", vec![0.0; 8])],
            x2: vec![],
        })
        .unwrap();
        let nuis = ArmNuisance {
            b: vec![1.2, 0.9, 0.1, 0.8, -0.2, 0.5, 1.5, 2.0],
            c: vec![1.0, 1.0, 1.0, 0.4, 0.25, 0.4, 0.25, 0.8],
            g: vec![Some(1.8), Some(0.7), Some(0.2), Some(1.1), Some(0.3), None, None, Some(1.4)],
            p: vec![Some(0.6), Some(0.4), Some(0.25), Some(0.3), Some(0.1), None, None, Some(0.2)],
            e: vec![Some(0.5), Some(0.5), Some(0.4), Some(0.5), Some(0.5), None, None, Some(0.5)],
        };
        (data, nuis)
    }

    #[test]
    fn eight_row_formula_oracle() {
        // Evaluated by hand with exact rationals: 149/240.
        let (data, nuis) = eight_rows();
        let est = psi_from_values(&data, 1, &nuis, None).unwrap();
        assert!((est.psi - 149.0 / 240.0).abs() < 1e-10, "{}", est.psi);
        let expected_terms = [2.0 + 1.4 / 3.0, 0.7, -4.8, 1.55, 1.8, 0.5, 1.5, 1.25];
        for (t, e) in est.ic.values.iter().zip(expected_terms) {
            assert!((t - e).abs() < 1e-12, "{t} vs {e}");
        }
    }

    #[test]
    fn ic_mean_is_the_estimate() {
        let (data, nuis) = eight_rows();
        let est = psi_from_values(&data, 1, &nuis, None).unwrap();
        assert!((stats::mean(&est.ic.values) - est.psi).abs() < 1e-10);
        assert!(stats::mean(&est.ic.centered()).abs() < 1e-10);
    }

    #[test]
    fn degenerate_weight_is_an_error_unless_clipped() {
        let (data, mut nuis) = eight_rows();
        nuis.p[0] = Some(1e-14);
        assert!(matches!(
            psi_from_values(&data, 1, &nuis, None),
            Err(EstimateError::DegenerateWeight { row: 0, .. })
        ));
        let est = psi_from_values(&data, 1, &nuis, Some(0.01)).unwrap();
        assert_eq!(est.clipped, 1);
        nuis.p[0] = Some(0.6);
        nuis.c[3] = 0.0;
        assert!(matches!(
            psi_from_values(&data, 1, &nuis, None),
            Err(EstimateError::DegenerateWeight { row: 3, .. })
        ));
    }

    #[test]
    fn nosub_rejects_incomplete_data_and_missing_arm() {
        let (data, nuis) = eight_rows();
        assert!(matches!(
            psi_nosub_from_values(&data, 1, &nuis, None),
            Err(EstimateError::NotCensus { row: 5 })
        ));
        assert!(matches!(psi_from_values(&data, 4, &nuis, None), Err(EstimateError::EmptyArm(4))));
    }

    #[test]
    fn census_reduces_to_nosub() {
        let (data, nuis) = eight_rows();
        let census: Vec<usize> = (0..8).filter(|&i| data.d()[i]).collect();
        let data = data.select_rows(&census);
        let pick = |v: &[Option<f64>]| census.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let nuis = ArmNuisance {
            b: census.iter().map(|&i| nuis.b[i]).collect(),
            c: vec![1.0; census.len()],
            g: pick(&nuis.g),
            p: pick(&nuis.p),
            e: pick(&nuis.e),
        };
        let a = psi_from_values(&data, 1, &nuis, None).unwrap();
        let b = psi_nosub_from_values(&data, 1, &nuis, None).unwrap();
        assert!((a.psi - b.psi).abs() < 1e-12);
    }

    #[test]
    fn contrast_with_itself_is_zero() {
        let (data, nuis) = eight_rows();
        let est = psi_from_values(&data, 1, &nuis, None).unwrap();
        let c = contrast(&est, &est).unwrap();
        assert_eq!(c.estimate, 0.0);
        assert!(c.ic.values.iter().all(|&v| v == 0.0));
        assert_eq!(ic_standard_error(&c.ic, IcMode::Centered), 0.0);
    }

    #[test]
    fn contrast_rejects_other_data() {
        let (data, nuis) = eight_rows();
        let est = psi_from_values(&data, 1, &nuis, None).unwrap();
        let mut cols = data.columns().clone();
        cols.y[0] = Some(9.0);
        let other = CohortDataset::new(cols).unwrap();
        let est2 = psi_from_values(&other, 1, &nuis, None).unwrap();
        assert!(matches!(contrast(&est, &est2), Err(EstimateError::MismatchedData(_))));
    }

    #[test]
    fn standard_error_modes() {
        let ic = InfluenceCurve {
            estimate: 2.0,
            values: vec![1.0, 3.0, 2.0, 2.0],
        };
        assert!((ic_standard_error(&ic, IcMode::Centered) - 2f64.sqrt() / 4.0).abs() < 1e-15);
        assert!((ic_standard_error(&ic, IcMode::PaperLiteral) - 18f64.sqrt() / 4.0).abs() < 1e-15);
        let flat = InfluenceCurve {
            estimate: 0.5,
            values: vec![0.5; 10],
        };
        assert_eq!(ic_standard_error(&flat, IcMode::Centered), 0.0);
    }

    #[test]
    fn wald_interval_width() {
        let (lo, hi) = wald_interval(1.0, 0.5, 0.05);
        assert!((hi - 1.0 - 1.959963984540054 * 0.5).abs() < 1e-9);
        assert!((1.0 - lo - (hi - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn bootstrap_is_reproducible_and_counts_failures() {
        let (data, _) = eight_rows();
        let mean_y = |d: &CohortDataset| -> Result<Vec<f64>, crate::Error> {
            let ys: Vec<f64> = d.y().iter().flatten().copied().collect();
            if ys.is_empty() {
                return Err(EstimateError::EmptyArm(1).into());
            }
            Ok(vec![stats::mean(&ys)])
        };
        let a = bootstrap(&data, 1, 42, 0.05, mean_y).unwrap();
        let b = bootstrap(&data, 1, 42, 0.05, mean_y).unwrap();
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.standard_errors, vec![0.0]);

        let always_fail = |_: &CohortDataset| -> Result<Vec<f64>, crate::Error> { Err(EstimateError::EmptyArm(1).into()) };
        assert!(matches!(
            bootstrap(&data, 20, 1, 0.05, always_fail),
            Err(EstimateError::TooManyFailures { failures: 20, replicates: 20 })
        ));
        assert!(bootstrap(&data, 0, 1, 0.05, mean_y).is_err());
    }

    #[test]
    fn avar_penalty_vanishes_for_census_and_matching_b() {
        let (data, nuis) = eight_rows();
        let av = avar_components(&data, 1, &nuis).unwrap();
        assert!(av.penalty_hat > 0.0);
        assert!((av.avar2_hat - av.avar1_hat - av.penalty_hat).abs() < 1e-15);

        let mut same_b = nuis.clone();
        for i in 0..8 {
            if let Some(g) = nuis.g[i] {
                same_b.b[i] = g;
            }
        }
        assert_eq!(avar_components(&data, 1, &same_b).unwrap().penalty_hat, 0.0);

        let mut census = nuis.clone();
        census.c = vec![1.0; 8];
        assert_eq!(avar_components(&data, 1, &census).unwrap().penalty_hat, 0.0);
    }

    #[test]
    fn avar_hand_values() {
        let (data, nuis) = eight_rows();
        let av = avar_components(&data, 1, &nuis).unwrap();
        // residuals (0.2, -0.5) -> v = 0.145
        assert!((av.residual_variance - 0.145).abs() < 1e-15);
        let rows = [0usize, 1, 2, 3, 4, 7];
        let w: Vec<f64> = rows.iter().map(|&i| 1.0 / nuis.c[i]).collect();
        let g: Vec<f64> = rows.iter().map(|&i| nuis.g[i].unwrap()).collect();
        let sw: f64 = w.iter().sum();
        let mg: f64 = w.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() / sw;
        let vg: f64 = w.iter().zip(&g).map(|(a, b)| a * (b - mg).powi(2)).sum::<f64>() / sw;
        let first: f64 = rows
            .iter()
            .map(|&i| 0.145 / (nuis.c[i] * nuis.p[i].unwrap() * nuis.e[i].unwrap()))
            .sum::<f64>()
            / 8.0;
        assert!((av.avar1_hat - (first + vg)).abs() < 1e-12);
    }
}
