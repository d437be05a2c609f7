//! Monte Carlo harness: data generation for nested trials with sub-sampling,
//! intercept calibration, replicate grids and bias/variance/MSE tables.
//!
//! Data-generating process, with `Z = (1, Z1, Z2, Z3)`:
//!
//! - `Z1 ~ N(0, 1)` or `Bernoulli(0.5)`, `Z2, Z3 ~ N(0, 1)`;
//! - `S | Z ~ Bernoulli(expit(gamma0 + Z1 + Z2 + Z3))`;
//! - `A | S = 1 ~ Bernoulli(0.5)`;
//! - `Y^a = theta^a . Z + eps^a`, `eps^a ~ N(0, sd^2)`, `Y = A Y^1 + (1 - A) Y^0`;
//! - `D = 1` when `S = 1`; otherwise `D ~ Bernoulli(expit(zeta0 + Z1))`
//!   (covariate dependent) or `Bernoulli(q)` (simple random).
//!
//! Stage-one covariates are `{z1}`, stage-two covariates `{z2, z3}`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CohortColumns, CohortDataset, ColumnSpec, Covariate, SamplingKind};
use crate::estimator::{self, ArmEstimate, IcMode};
use crate::glm::DesignSpec;
use crate::nuisance::{self, NuisanceSet, NuisanceSpec, RegressionSpec, SamplingSpec, TreatmentSpec};
use crate::rng::{self, StreamRng};
use crate::stats::{self, expit};

/// Draws used by the intercept solvers.
pub const DEFAULT_SOLVER_DRAWS: usize = 10_000_000;
/// Seed of the common random numbers used by the intercept solvers.
pub const DEFAULT_SOLVER_SEED: u64 = 20_190_101;
/// Largest accepted `|achieved - target|` marginal probability.
pub const SOLVER_TOLERANCE: f64 = 5e-4;
/// Largest tolerated share of failed replicates.
pub const MAX_FAILURE_RATE: f64 = 0.01;

const SOLVER_CHUNK: usize = 1 << 16;
const BRACKET: (f64, f64) = (-20.0, 20.0);

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("target {target} lies outside [{low}, {high}], reachable with intercepts in [-20, 20]")]
    BracketFailure { target: f64, low: f64, high: f64 },
    #[error("achieved marginal {achieved} misses target {target} by more than {SOLVER_TOLERANCE}")]
    SolverTolerance { target: f64, achieved: f64 },
    #[error("{failures} of {replicates} replicates failed (first failure: {first})")]
    TooManyFailures {
        failures: usize,
        replicates: usize,
        first: String,
    },
    #[error("unknown scenario or grid `{0}`")]
    UnknownScenario(String),
    #[error("cannot parse metrics: {0}")]
    Parse(String),
    #[error("cannot parse scenario: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Z1Kind {
    Continuous,
    Binary,
}

impl Z1Kind {
    pub fn mean(self) -> f64 {
        match self {
            Z1Kind::Continuous => 0.0,
            Z1Kind::Binary => 0.5,
        }
    }

    fn draw(self, rng: &mut StreamRng) -> f64 {
        match self {
            Z1Kind::Continuous => rng.sample(StandardNormal),
            Z1Kind::Binary => f64::from(u8::from(rng.random::<f64>() < 0.5)),
        }
    }

    fn label(self) -> &'static str {
        match self {
            Z1Kind::Continuous => "continuous",
            Z1Kind::Binary => "binary",
        }
    }
}

/// Which working models are deliberately wrong: a wrong model keeps only `z1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Misspecification {
    #[default]
    None,
    WrongG,
    WrongP,
    Both,
}

/// How the treatment probability is obtained by the working models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentWorkingModel {
    /// Logistic regression on the main effects of all covariates.
    #[default]
    Fitted,
    /// The known randomization probability 0.5.
    Known,
}

/// One marginal sampling probability among non-participants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingLevel {
    pub q: f64,
    /// Intercept of the covariate-dependent sampling model; unused otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta0: Option<f64>,
}

fn theta0_default() -> [f64; 4] {
    [1.0, 1.0, 1.0, 1.0]
}

fn theta1_default() -> [f64; 4] {
    [0.0, 0.0, 0.0, 1.0]
}

fn one() -> f64 {
    1.0
}

/// A simulation cell. Every sampling level is applied to the same generated
/// cohort within a replicate, so comparisons across levels are paired.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Expected trial size, for labelling only.
    pub trial_size: usize,
    pub cohort_n: usize,
    pub z1_kind: Z1Kind,
    pub sampling_kind: SamplingKind,
    pub gamma0: f64,
    pub levels: Vec<SamplingLevel>,
    #[serde(default = "theta0_default")]
    pub theta0: [f64; 4],
    #[serde(default = "theta1_default")]
    pub theta1: [f64; 4],
    #[serde(default = "one")]
    pub error_sd: f64,
    #[serde(default)]
    pub treatment_model: TreatmentWorkingModel,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(format!("{}: {m}", self.name)));
        if self.cohort_n < 10 {
            return bad(format!("cohort size {} is below 10", self.cohort_n));
        }
        if self.levels.is_empty() {
            return bad("no sampling levels".into());
        }
        if !self.gamma0.is_finite() || !(self.error_sd >= 0.0 && self.error_sd.is_finite()) {
            return bad("gamma0 and error_sd must be finite, error_sd non-negative".into());
        }
        for l in &self.levels {
            if !(l.q > 0.0 && l.q <= 1.0) {
                return bad(format!("sampling probability {} not in (0, 1]", l.q));
            }
            match self.sampling_kind {
                SamplingKind::Census if l.q != 1.0 => return bad("census requires q = 1".into()),
                SamplingKind::CovariateDependent if l.q < 1.0 && !l.zeta0.is_some_and(f64::is_finite) => {
                    return bad(format!("level q = {} has no sampling intercept", l.q));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// `(psi(1), psi(0), psi(1) - psi(0))` implied by the linear outcome models.
    pub fn truths(&self) -> [f64; 3] {
        let m = self.z1_kind.mean();
        let psi = |t: &[f64; 4]| t[0] + t[1] * m;
        let (p1, p0) = (psi(&self.theta1), psi(&self.theta0));
        [p1, p0, p1 - p0]
    }

    fn sampling_probability(&self, level: &SamplingLevel, z1: f64) -> f64 {
        if level.q >= 1.0 {
            return 1.0;
        }
        match self.sampling_kind {
            SamplingKind::Census => 1.0,
            SamplingKind::SimpleRandom => level.q,
            SamplingKind::CovariateDependent => expit(level.zeta0.expect("validated") + z1),
        }
    }
}

/// A fully observed generated cohort, including the potential outcomes that
/// estimators never see.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCohort {
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub z3: Vec<f64>,
    pub s: Vec<bool>,
    pub a: Vec<Option<i64>>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    /// Uniform draw deciding second-stage measurement of non-participants,
    /// shared by all sampling levels.
    pub u_sample: Vec<f64>,
}

/// Column names of generated datasets.
pub fn column_spec() -> ColumnSpec {
    ColumnSpec {
        s: "s".into(),
        d: "d".into(),
        a: "a".into(),
        y: "y".into(),
        x1: vec!["z1".into()],
        x2: vec!["z2".into(), "z3".into()],
        id: None,
    }
}

pub fn generate_cohort(scenario: &Scenario, rng: &mut StreamRng) -> GeneratedCohort {
    let n = scenario.cohort_n;
    let mut g = GeneratedCohort {
        z1: Vec::with_capacity(n),
        z2: Vec::with_capacity(n),
        z3: Vec::with_capacity(n),
        s: Vec::with_capacity(n),
        a: Vec::with_capacity(n),
        y0: Vec::with_capacity(n),
        y1: Vec::with_capacity(n),
        u_sample: Vec::with_capacity(n),
    };
    let lin = |t: &[f64; 4], z: [f64; 3]| t[0] + t[1] * z[0] + t[2] * z[1] + t[3] * z[2];
    for _ in 0..n {
        // Every unit consumes the same draws, whatever its S.
        let z1 = scenario.z1_kind.draw(rng);
        let z2: f64 = rng.sample(StandardNormal);
        let z3: f64 = rng.sample(StandardNormal);
        let u_s: f64 = rng.random();
        let u_a: f64 = rng.random();
        let e0: f64 = rng.sample(StandardNormal);
        let e1: f64 = rng.sample(StandardNormal);
        let u_d: f64 = rng.random();
        let s = u_s < expit(scenario.gamma0 + z1 + z2 + z3);
        let z = [z1, z2, z3];
        g.z1.push(z1);
        g.z2.push(z2);
        g.z3.push(z3);
        g.s.push(s);
        g.a.push(s.then_some(i64::from(u8::from(u_a < 0.5))));
        g.y0.push(lin(&scenario.theta0, z) + scenario.error_sd * e0);
        g.y1.push(lin(&scenario.theta1, z) + scenario.error_sd * e1);
        g.u_sample.push(u_d);
    }
    g
}

impl GeneratedCohort {
    pub fn n_units(&self) -> usize {
        self.s.len()
    }

    fn dataset(&self, d: Vec<bool>) -> CohortDataset {
        let masked = |v: &[f64]| v.iter().zip(&d).map(|(&x, &di)| di.then_some(x)).collect();
        let y = self
            .a
            .iter()
            .enumerate()
            .map(|(i, a)| a.map(|a| if a == 1 { self.y1[i] } else { self.y0[i] }))
            .collect();
        let cols = CohortColumns {
            spec: column_spec(),
            ids: None,
            s: self.s.clone(),
            a: self.a.clone(),
            y,
            x1: vec![Covariate::new("z1", self.z1.clone())],
            x2: vec![Covariate::new("z2", masked(&self.z2)), Covariate::new("z3", masked(&self.z3))],
            d,
        };
        CohortDataset::new(cols).expect("generated data satisfy the missingness pattern")
    }

    /// Every unit measured.
    pub fn census(&self) -> CohortDataset {
        self.dataset(vec![true; self.n_units()])
    }

    /// Non-participants measured with the level's sampling probability.
    pub fn subsample(&self, scenario: &Scenario, level: &SamplingLevel) -> CohortDataset {
        let d = (0..self.n_units())
            .map(|i| self.s[i] || self.u_sample[i] < scenario.sampling_probability(level, self.z1[i]))
            .collect();
        self.dataset(d)
    }
}

/// Working models used for every replicate.
pub fn working_models(scenario: &Scenario, misspecification: Misspecification) -> NuisanceSpec {
    let all = DesignSpec::main_effects(&["z1", "z2", "z3"]).expect("valid design");
    let z1 = DesignSpec::main_effects(&["z1"]).expect("valid design");
    let wrong_g = matches!(misspecification, Misspecification::WrongG | Misspecification::Both);
    let wrong_p = matches!(misspecification, Misspecification::WrongP | Misspecification::Both);
    NuisanceSpec {
        participation: Some(if wrong_p { z1.clone() } else { all.clone() }),
        outcome: RegressionSpec {
            design: Some(if wrong_g { z1.clone() } else { all.clone() }),
            ..RegressionSpec::default()
        },
        pseudo_outcome: RegressionSpec {
            design: Some(DesignSpec::new(&["z1", "s", "z1:s"], true).expect("valid design")),
            ..RegressionSpec::default()
        },
        sampling: SamplingSpec::Fitted { design: Some(z1) },
        treatment: match scenario.treatment_model {
            TreatmentWorkingModel::Fitted => TreatmentSpec::Fitted { design: Some(all) },
            TreatmentWorkingModel::Known => TreatmentSpec::Known {
                probabilities: BTreeMap::from([(0, 0.5), (1, 0.5)]),
            },
        },
        clip_floor: None,
    }
}

/// A point estimate with its centered influence-curve standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

/// Estimates of `(psi(1), psi(0), psi(1) - psi(0))`.
pub type Triple = [Estimate; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    /// No-sub-sampling estimator on the census version of the cohort.
    pub nosub: Triple,
    /// Sub-sampling estimator, one entry per scenario level.
    pub sub: Vec<Triple>,
}

fn triple(a1: &ArmEstimate, a0: &ArmEstimate) -> Result<Triple, crate::Error> {
    let c = estimator::contrast(a1, a0)?;
    let se = |ic| estimator::ic_standard_error(ic, IcMode::Centered);
    Ok([
        Estimate {
            value: a1.psi,
            se: se(&a1.ic),
        },
        Estimate {
            value: a0.psi,
            se: se(&a0.ic),
        },
        Estimate {
            value: c.estimate,
            se: se(&c.ic),
        },
    ])
}

/// Generates one replicate and applies both estimators.
///
/// The treatment and outcome models only see trial participants, who are the
/// same rows at every sampling level, so they are fitted once per replicate;
/// refitting them per level would give identical coefficients.
pub fn run_replicate(
    scenario: &Scenario,
    spec: &NuisanceSpec,
    rng: &mut StreamRng,
) -> Result<ReplicateOutcome, crate::Error> {
    let cohort = generate_cohort(scenario, rng);
    let census = cohort.census();
    let treatment = nuisance::fit_treatment(&census, &spec.treatment)?;
    let outcome_design = spec.outcome_design(&census)?;
    let mut outcome = BTreeMap::new();
    for arm in [0, 1] {
        outcome.insert(arm, nuisance::fit_outcome(&census, arm, &outcome_design, spec.outcome.family)?);
    }
    let participation_design = spec.participation_design(&census)?;
    let pseudo_design = spec.pseudo_outcome_design(&census)?;
    let fit = |data: &CohortDataset| -> Result<NuisanceSet, crate::Error> {
        let sampling = nuisance::fit_sampling(data, &spec.sampling)?;
        let participation = nuisance::fit_participation(data, &participation_design, &sampling)?;
        let mut pseudo_outcome = BTreeMap::new();
        for (&arm, g) in &outcome {
            pseudo_outcome.insert(
                arm,
                nuisance::fit_pseudo_outcome(data, g, &pseudo_design, spec.pseudo_outcome.family)?,
            );
        }
        Ok(NuisanceSet {
            sampling,
            treatment: treatment.clone(),
            participation,
            outcome: outcome.clone(),
            pseudo_outcome,
            clip_floor: None,
        })
    };

    let set = fit(&census)?;
    let nosub = triple(
        &estimator::estimate_psi_nosub(&census, 1, &set)?,
        &estimator::estimate_psi_nosub(&census, 0, &set)?,
    )?;
    let mut sub = Vec::with_capacity(scenario.levels.len());
    for level in &scenario.levels {
        let data = cohort.subsample(scenario, level);
        let set = fit(&data)?;
        sub.push(triple(
            &estimator::estimate_psi(&data, 1, &set)?,
            &estimator::estimate_psi(&data, 0, &set)?,
        )?);
    }
    Ok(ReplicateOutcome { nosub, sub })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimand {
    #[serde(rename = "psi1")]
    Psi1,
    #[serde(rename = "psi0")]
    Psi0,
    #[serde(rename = "psi1_minus_psi0")]
    Contrast,
}

impl Estimand {
    pub const ALL: [Estimand; 3] = [Estimand::Psi1, Estimand::Psi0, Estimand::Contrast];

    fn label(self) -> &'static str {
        match self {
            Estimand::Psi1 => "psi1",
            Estimand::Psi0 => "psi0",
            Estimand::Contrast => "psi1_minus_psi0",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Sub,
    Nosub,
}

/// Bias, variance (divisor `R - 1`), MSE and the Monte Carlo standard error
/// `sqrt(variance / R)` of the bias, for one estimand, estimator and level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub estimand: Estimand,
    pub trial_size: usize,
    pub n: usize,
    pub z1_kind: Z1Kind,
    pub sampling_kind: SamplingKind,
    pub q: f64,
    pub estimator: EstimatorKind,
    pub bias: f64,
    pub variance: f64,
    pub mse: f64,
    pub replicates: usize,
    pub mc_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn get(&self, estimand: Estimand, estimator: EstimatorKind, q: f64) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.estimand == estimand && r.estimator == estimator && (estimator == EstimatorKind::Nosub || r.q == q))
    }
}

fn metrics(values: &[f64], truth: f64) -> (f64, f64, f64, f64) {
    let r = values.len() as f64;
    let mean = stats::mean(values);
    let variance = stats::sample_variance(values);
    let mse = stats::sum(values.iter().map(|v| (v - truth).powi(2))) / r;
    (mean - truth, variance, mse, (variance / r).sqrt())
}

/// Summarises successful replicates. The no-sub-sampling rows carry `q = 1`.
pub fn summarize(scenario: &Scenario, outcomes: &[ReplicateOutcome]) -> MetricsTable {
    let truths = scenario.truths();
    let mut rows = Vec::new();
    let mut push = |k: usize, estimator: EstimatorKind, q: f64, values: Vec<f64>| {
        let (bias, variance, mse, mc_se) = metrics(&values, truths[k]);
        rows.push(MetricsRow {
            estimand: Estimand::ALL[k],
            trial_size: scenario.trial_size,
            n: scenario.cohort_n,
            z1_kind: scenario.z1_kind,
            sampling_kind: scenario.sampling_kind,
            q,
            estimator,
            bias,
            variance,
            mse,
            replicates: values.len(),
            mc_se,
        });
    };
    for k in 0..3 {
        for (l, level) in scenario.levels.iter().enumerate() {
            push(k, EstimatorKind::Sub, level.q, outcomes.iter().map(|o| o.sub[l][k].value).collect());
        }
        push(k, EstimatorKind::Nosub, 1.0, outcomes.iter().map(|o| o.nosub[k].value).collect());
    }
    MetricsTable { rows }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioRun {
    pub scenario: Scenario,
    pub misspecification: Misspecification,
    pub seed: u64,
    pub requested: usize,
    pub failures: usize,
    /// Successful replicates in replicate order.
    pub outcomes: Vec<ReplicateOutcome>,
    pub metrics: MetricsTable,
}

/// Runs `replicates` independent replicates; replicate `r` uses RNG stream
/// `(seed, r)`, and aggregation follows replicate order, so the result does
/// not depend on the thread count.
pub fn run_scenario(
    scenario: &Scenario,
    replicates: usize,
    seed: u64,
    misspecification: Misspecification,
) -> Result<ScenarioRun, SimError> {
    scenario.validate()?;
    if replicates == 0 {
        return Err(SimError::InvalidScenario("at least one replicate is required".into()));
    }
    let spec = working_models(scenario, misspecification);
    let results: Vec<Result<ReplicateOutcome, String>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, r as u64);
            run_replicate(scenario, &spec, &mut rng).map_err(|e| e.to_string())
        })
        .collect();
    let failures = results.iter().filter(|r| r.is_err()).count();
    if failures as f64 > MAX_FAILURE_RATE * replicates as f64 || failures == replicates {
        let first = results.iter().find_map(|r| r.as_ref().err().cloned()).unwrap_or_default();
        return Err(SimError::TooManyFailures {
            failures,
            replicates,
            first,
        });
    }
    let outcomes: Vec<ReplicateOutcome> = results.into_iter().filter_map(Result::ok).collect();
    let metrics = summarize(scenario, &outcomes);
    Ok(ScenarioRun {
        scenario: scenario.clone(),
        misspecification,
        seed,
        requested: replicates,
        failures,
        outcomes,
        metrics,
    })
}

/// Common random numbers for the intercept solvers: `z1` and `z2 + z3`.
pub struct InterceptSolver {
    z1: Vec<f64>,
    rest: Vec<f64>,
}

impl InterceptSolver {
    /// Draws are generated in fixed-size chunks, chunk `k` from stream
    /// `(seed, k)`, so the draws do not depend on the thread count.
    pub fn new(z1_kind: Z1Kind, draws: usize, seed: u64) -> Self {
        let chunks: Vec<(Vec<f64>, Vec<f64>)> = (0..draws.div_ceil(SOLVER_CHUNK))
            .into_par_iter()
            .map(|k| {
                let len = SOLVER_CHUNK.min(draws - k * SOLVER_CHUNK);
                let mut rng = rng::stream(seed, k as u64);
                let mut z1 = Vec::with_capacity(len);
                let mut rest = Vec::with_capacity(len);
                for _ in 0..len {
                    z1.push(z1_kind.draw(&mut rng));
                    let z2: f64 = rng.sample(StandardNormal);
                    let z3: f64 = rng.sample(StandardNormal);
                    rest.push(z2 + z3);
                }
                (z1, rest)
            })
            .collect();
        let mut z1 = Vec::with_capacity(draws);
        let mut rest = Vec::with_capacity(draws);
        for (a, b) in chunks {
            z1.extend(a);
            rest.extend(b);
        }
        InterceptSolver { z1, rest }
    }

    pub fn draws(&self) -> usize {
        self.z1.len()
    }

    /// Chunked sum of `f(i)` with a fixed reduction order.
    fn chunked_sum(&self, f: impl Fn(usize) -> f64 + Sync) -> f64 {
        let n = self.z1.len();
        let partial: Vec<f64> = (0..n.div_ceil(SOLVER_CHUNK))
            .into_par_iter()
            .map(|k| stats::sum((k * SOLVER_CHUNK..n.min((k + 1) * SOLVER_CHUNK)).map(&f)))
            .collect();
        stats::sum(partial)
    }

    /// `Pr[S = 1]` for intercept `gamma0`.
    pub fn participation_marginal(&self, gamma0: f64) -> f64 {
        self.chunked_sum(|i| expit(gamma0 + self.z1[i] + self.rest[i])) / self.draws() as f64
    }

    /// `Pr[D = 1 | S = 0]` for intercepts `gamma0`, `zeta0`, integrating `S` out.
    pub fn sampling_marginal(&self, gamma0: f64, zeta0: f64) -> f64 {
        let w = |i: usize| 1.0 - expit(gamma0 + self.z1[i] + self.rest[i]);
        self.chunked_sum(|i| w(i) * expit(zeta0 + self.z1[i])) / self.chunked_sum(w)
    }

    pub fn solve_participation(&self, target: f64) -> Result<f64, SimError> {
        bisect(target, |g| self.participation_marginal(g))
    }

    pub fn solve_sampling(&self, target: f64, gamma0: f64) -> Result<f64, SimError> {
        let w: Vec<f64> = (0..self.draws())
            .map(|i| 1.0 - expit(gamma0 + self.z1[i] + self.rest[i]))
            .collect();
        let total = self.chunked_sum(|i| w[i]);
        bisect(target, |z| self.chunked_sum(|i| w[i] * expit(z + self.z1[i])) / total)
    }
}

/// Bisection for an increasing `f` on the fixed bracket.
fn bisect(target: f64, f: impl Fn(f64) -> f64) -> Result<f64, SimError> {
    if !(target > 0.0 && target < 1.0) {
        return Err(SimError::InvalidScenario(format!("target probability {target} not in (0, 1)")));
    }
    let (mut lo, mut hi) = BRACKET;
    let (f_lo, f_hi) = (f(lo), f(hi));
    if !(f_lo <= target && target <= f_hi) {
        return Err(SimError::BracketFailure {
            target,
            low: f_lo,
            high: f_hi,
        });
    }
    while hi - lo > 1e-7 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let x = 0.5 * (lo + hi);
    let achieved = f(x);
    if (achieved - target).abs() > SOLVER_TOLERANCE {
        return Err(SimError::SolverTolerance { target, achieved });
    }
    Ok(x)
}

/// `gamma0` giving marginal participation `target`, with the default draws.
pub fn solve_participation_intercept(target: f64, z1_kind: Z1Kind) -> Result<f64, SimError> {
    InterceptSolver::new(z1_kind, DEFAULT_SOLVER_DRAWS, DEFAULT_SOLVER_SEED).solve_participation(target)
}

/// `zeta0` giving `Pr[D = 1 | S = 0] = target` under participation intercept `gamma0`.
pub fn solve_sampling_intercept(target: f64, z1_kind: Z1Kind, gamma0: f64) -> Result<f64, SimError> {
    InterceptSolver::new(z1_kind, DEFAULT_SOLVER_DRAWS, DEFAULT_SOLVER_SEED).solve_sampling(target, gamma0)
}

/// `(trial size, cohort size)` rows of the published grids, in table order.
pub const SIZE_ROWS: [(usize, usize); 6] = [
    (1000, 2000),
    (1000, 5000),
    (1000, 10000),
    (2000, 5000),
    (2000, 10000),
    (2000, 20000),
];

/// Published participation and sampling intercepts per `(z1 kind, trial, n)`.
fn published_intercepts(z1: Z1Kind, trial: usize, n: usize) -> (f64, [f64; 9]) {
    const C50: (f64, [f64; 9]) = (
        0.0,
        [-2.1953125, -1.2929688, -0.6761070, -0.1483765, 0.3237305, 0.8099365, 1.3345490, 1.9550781, 2.8554688],
    );
    const C20: (f64, [f64; 9]) = (
        -2.055969,
        [-2.3974609, -1.4904175, -0.8675537, -0.3417969, 0.1408870, 0.6245117, 1.1464232, 1.7731247, 2.6875000],
    );
    const C10: (f64, [f64; 9]) = (
        -3.154297,
        [
            -2.47167969, -1.56103516, -0.93359375, -0.40990990, 0.07421875, 0.56357574, 1.08593750, 1.71679688,
            2.62744141,
        ],
    );
    const C40: (f64, [f64; 9]) = (
        -0.612793,
        [-2.2607422, -1.3611903, -0.7357330, -0.2153320, 0.2639160, 0.7441406, 1.2669601, 1.8906250, 2.7956066],
    );
    const B50: (f64, [f64; 9]) = (
        -0.4973936,
        [
            -2.70117188, -1.87109375, -1.30666184, -0.83532715, -0.40234375, 0.02183144, 0.48690367, 1.04687500,
            1.88330555,
        ],
    );
    const B20: (f64, [f64; 9]) = (
        -2.4145508,
        [-2.7578125, -1.9258423, -1.3582602, -0.8906250, -0.4609375, -0.0312500, 0.4363470, 0.9983544, 1.8328857],
    );
    const B10: (f64, [f64; 9]) = (
        -3.460083,
        [
            -2.77343750, -1.93980408, -1.37890625, -0.91027832, -0.48046875, -0.05080032, 0.41790675, 0.98059082,
            1.81640625,
        ],
    );
    const B40: (f64, [f64; 9]) = (
        -1.072715,
        [-2.7205811, -1.8925781, -1.3217773, -0.8562012, -0.4282227, 0.0078125, 0.4677734, 1.0312500, 1.8676951],
    );
    let share = trial as f64 / n as f64;
    let pick = |p50, p40, p20, p10| match share {
        0.5 => p50,
        0.4 => p40,
        0.2 => p20,
        _ => p10,
    };
    match z1 {
        Z1Kind::Continuous => pick(C50, C40, C20, C10),
        Z1Kind::Binary => pick(B50, B40, B20, B10),
    }
}

fn kind_label(kind: SamplingKind) -> &'static str {
    match kind {
        SamplingKind::Census => "census",
        SamplingKind::SimpleRandom => "srs",
        SamplingKind::CovariateDependent => "dependent",
    }
}

/// A bundled cell: sampling levels 0.1 to 0.9 with the published intercepts.
pub fn published_scenario(z1_kind: Z1Kind, sampling_kind: SamplingKind, trial_size: usize, cohort_n: usize) -> Scenario {
    let (gamma0, zetas) = published_intercepts(z1_kind, trial_size, cohort_n);
    let levels = (1..=9)
        .map(|k| SamplingLevel {
            q: k as f64 / 10.0,
            zeta0: (sampling_kind == SamplingKind::CovariateDependent).then_some(zetas[k - 1]),
        })
        .collect();
    Scenario {
        name: format!(
            "{}_{}_t{trial_size}_n{cohort_n}",
            z1_kind.label(),
            kind_label(sampling_kind)
        ),
        trial_size,
        cohort_n,
        z1_kind,
        sampling_kind,
        gamma0,
        levels,
        theta0: theta0_default(),
        theta1: theta1_default(),
        error_sd: 1.0,
        treatment_model: TreatmentWorkingModel::default(),
    }
}

/// The four design variants, in grid-name order.
const VARIANTS: [(Z1Kind, SamplingKind); 4] = [
    (Z1Kind::Continuous, SamplingKind::CovariateDependent),
    (Z1Kind::Continuous, SamplingKind::SimpleRandom),
    (Z1Kind::Binary, SamplingKind::CovariateDependent),
    (Z1Kind::Binary, SamplingKind::SimpleRandom),
];

/// Every bundled cell.
pub fn bundled_scenarios() -> Vec<Scenario> {
    VARIANTS
        .iter()
        .flat_map(|&(z, k)| SIZE_ROWS.iter().map(move |&(t, n)| published_scenario(z, k, t, n)))
        .collect()
}

/// Resolves a bundled scenario or grid name. Accepted names are cell names
/// such as `continuous_dependent_t1000_n2000`, `table_e1`/`table_e2` (the
/// intercept tables), `table_e3`..`table_e10` (bias then variance tables,
/// four design variants each) and single rows such as `table_e3_row1`.
pub fn bundled_grid(name: &str) -> Result<Vec<Scenario>, SimError> {
    let unknown = || SimError::UnknownScenario(name.to_string());
    if let Some(s) = bundled_scenarios().into_iter().find(|s| s.name == name) {
        return Ok(vec![s]);
    }
    let rest = name.strip_prefix("table_e").ok_or_else(unknown)?;
    let (table, row) = match rest.split_once("_row") {
        Some((t, r)) => (t, Some(r.parse::<usize>().map_err(|_| unknown())?)),
        None => (rest, None),
    };
    let table: usize = table.parse().map_err(|_| unknown())?;
    let (z, k) = match table {
        1 => VARIANTS[0],
        2 => VARIANTS[2],
        3..=10 => VARIANTS[(table - 3) % 4],
        _ => return Err(unknown()),
    };
    let cells: Vec<Scenario> = SIZE_ROWS.iter().map(|&(t, n)| published_scenario(z, k, t, n)).collect();
    match row {
        None => Ok(cells),
        Some(r) if (1..=6).contains(&r) => Ok(vec![cells[r - 1].clone()]),
        Some(_) => Err(unknown()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableLayout {
    LongCsv,
    AppendixGrid,
}

pub fn write_long_csv<W: Write>(tables: &[MetricsTable], writer: W) -> Result<(), SimError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    for t in tables {
        for row in &t.rows {
            w.serialize(row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_long_csv<R: Read>(reader: R) -> Result<Vec<MetricsRow>, SimError> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .collect::<Result<Vec<MetricsRow>, _>>()
        .map_err(|e| SimError::Parse(e.to_string()))
}

/// Writes one grid per design variant and metric: rows are estimand, trial
/// size and cohort size; columns are the sampling levels, then `1` for the
/// no-sub-sampling estimator.
fn write_grids(tables: &[MetricsTable], dir: &Path) -> Result<Vec<PathBuf>, SimError> {
    type Key = (Z1Kind, SamplingKind);
    let mut groups: Vec<(Key, Vec<&MetricsRow>)> = Vec::new();
    for row in tables.iter().flat_map(|t| &t.rows) {
        let key = (row.z1_kind, row.sampling_kind);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, rows)) => rows.push(row),
            None => groups.push((key, vec![row])),
        }
    }
    let mut paths = Vec::new();
    for ((z, k), rows) in groups {
        let mut qs: Vec<f64> = rows.iter().filter(|r| r.estimator == EstimatorKind::Sub).map(|r| r.q).collect();
        qs.sort_by(f64::total_cmp);
        qs.dedup();
        let mut sizes: Vec<(usize, usize)> = Vec::new();
        for r in &rows {
            if !sizes.contains(&(r.trial_size, r.n)) {
                sizes.push((r.trial_size, r.n));
            }
        }
        type Metric = (&'static str, fn(&MetricsRow) -> f64);
        let metrics: [Metric; 3] =
            [("bias", |r| r.bias), ("variance", |r| r.variance), ("mse", |r| r.mse)];
        for (metric, value) in metrics {
            let path = dir.join(format!("grid_{}_{}_{metric}.csv", z.label(), kind_label(k)));
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_path(&path)?;
            let mut header = vec!["estimand".to_string(), "trial_size".into(), "n".into()];
            header.extend(qs.iter().map(|q| q.to_string()));
            header.push("1".into());
            w.write_record(&header)?;
            for e in Estimand::ALL {
                for &(t, n) in &sizes {
                    let cell = |est: EstimatorKind, q: Option<f64>| {
                        rows.iter()
                            .find(|r| {
                                r.estimand == e
                                    && r.trial_size == t
                                    && r.n == n
                                    && r.estimator == est
                                    && q.is_none_or(|q| r.q == q)
                            })
                            .map(|r| format!("{:.4}", value(r)))
                            .unwrap_or_else(|| "NA".into())
                    };
                    let mut rec = vec![e.label().to_string(), t.to_string(), n.to_string()];
                    rec.extend(qs.iter().map(|&q| cell(EstimatorKind::Sub, Some(q))));
                    rec.push(cell(EstimatorKind::Nosub, None));
                    w.write_record(&rec)?;
                }
            }
            w.flush()?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Writes `metrics.csv` (long layout) or the per-variant grids into `dir`.
pub fn emit_tables(tables: &[MetricsTable], layout: TableLayout, dir: &Path) -> Result<Vec<PathBuf>, SimError> {
    if tables.iter().all(|t| t.rows.is_empty()) {
        return Err(SimError::InvalidScenario("no metrics to write".into()));
    }
    fs::create_dir_all(dir)?;
    match layout {
        TableLayout::LongCsv => {
            let path = dir.join("metrics.csv");
            write_long_csv(tables, fs::File::create(&path)?)?;
            Ok(vec![path])
        }
        TableLayout::AppendixGrid => write_grids(tables, dir),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: SamplingKind) -> Scenario {
        let mut s = published_scenario(Z1Kind::Continuous, SamplingKind::CovariateDependent, 1000, 2000);
        s.cohort_n = 400;
        s.levels = vec![
            SamplingLevel { q: 0.3, zeta0: Some(-0.6761070) },
            SamplingLevel { q: 1.0, zeta0: None },
        ];
        s.sampling_kind = kind;
        s
    }

    #[test]
    fn truths_follow_outcome_models() {
        let c = published_scenario(Z1Kind::Continuous, SamplingKind::CovariateDependent, 1000, 2000);
        assert_eq!(c.truths(), [0.0, 1.0, -1.0]);
        let b = published_scenario(Z1Kind::Binary, SamplingKind::SimpleRandom, 1000, 2000);
        assert_eq!(b.truths(), [0.0, 1.5, -1.5]);
    }

    #[test]
    fn validation() {
        let mut s = small(SamplingKind::CovariateDependent);
        assert!(s.validate().is_ok());
        s.levels[0].zeta0 = None;
        assert!(s.validate().is_err());
        s.sampling_kind = SamplingKind::SimpleRandom;
        assert!(s.validate().is_ok());
        s.sampling_kind = SamplingKind::Census;
        assert!(s.validate().is_err());
        s.levels[0].q = 1.0;
        assert!(s.validate().is_ok());
    }

    #[test]
    fn generated_cohorts_are_valid_and_nested() {
        let s = small(SamplingKind::CovariateDependent);
        let cohort = generate_cohort(&s, &mut rng::stream(3, 0));
        let census = cohort.census();
        assert!(census.is_census());
        let sub = cohort.subsample(&s, &s.levels[0]);
        for i in 0..cohort.n_units() {
            assert_eq!(sub.s()[i], census.s()[i]);
            if sub.s()[i] {
                assert!(sub.d()[i]);
            }
        }
        assert!(!sub.is_census());
        assert!(cohort.subsample(&s, &s.levels[1]).is_census());
        // Raising q can only add measured units.
        let mut higher = s.levels[0];
        higher.zeta0 = Some(0.5);
        let sub_hi = cohort.subsample(&s, &higher);
        assert!((0..cohort.n_units()).all(|i| !sub.d()[i] || sub_hi.d()[i]));
    }

    #[test]
    fn census_level_matches_nosub() {
        let s = small(SamplingKind::CovariateDependent);
        let spec = working_models(&s, Misspecification::None);
        let out = run_replicate(&s, &spec, &mut rng::stream(11, 0)).unwrap();
        for k in 0..3 {
            assert!((out.sub[1][k].value - out.nosub[k].value).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_trial_fits_match_full_refits() {
        let s = small(SamplingKind::CovariateDependent);
        let spec = working_models(&s, Misspecification::None);
        let out = run_replicate(&s, &spec, &mut rng::stream(2, 9)).unwrap();
        let cohort = generate_cohort(&s, &mut rng::stream(2, 9));
        let data = cohort.subsample(&s, &s.levels[0]);
        let set = nuisance::fit_nuisance(&data, &spec, &[0, 1]).unwrap();
        assert_eq!(out.sub[0][0].value, estimator::estimate_psi(&data, 1, &set).unwrap().psi);
        assert_eq!(out.sub[0][1].value, estimator::estimate_psi(&data, 0, &set).unwrap().psi);
    }

    #[test]
    fn metrics_identities() {
        let s = small(SamplingKind::SimpleRandom);
        let run = run_scenario(&s, 30, 5, Misspecification::None).unwrap();
        assert_eq!(run.metrics.rows.len(), 9);
        for r in &run.metrics.rows {
            let rr = r.replicates as f64;
            assert!((r.mse - (r.bias * r.bias + r.variance * (rr - 1.0) / rr)).abs() < 1e-12);
            assert!((r.mc_se - (r.variance / rr).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn bundled_names() {
        assert_eq!(bundled_scenarios().len(), 24);
        let row = bundled_grid("table_e3_row1").unwrap();
        assert_eq!(row[0].name, "continuous_dependent_t1000_n2000");
        assert_eq!(row[0].gamma0, 0.0);
        assert_eq!(bundled_grid("table_e7").unwrap(), bundled_grid("table_e3").unwrap());
        let srs = bundled_grid("table_e6_row4").unwrap();
        assert_eq!(srs[0].gamma0, -1.072715);
        assert!(srs[0].levels.iter().all(|l| l.zeta0.is_none()));
        assert_eq!(bundled_grid("binary_dependent_t2000_n20000").unwrap()[0].gamma0, -3.460083);
        assert!(bundled_grid("table_e11").is_err());
        assert!(bundled_grid("table_e3_row7").is_err());
    }

    #[test]
    fn scenario_json_round_trip() {
        let s = published_scenario(Z1Kind::Binary, SamplingKind::CovariateDependent, 2000, 5000);
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(Scenario::from_json(&text).unwrap(), s);
    }

    #[test]
    fn bisection_brackets() {
        let solver = InterceptSolver::new(Z1Kind::Continuous, 20_000, 1);
        assert!(matches!(solver.solve_participation(0.5), Ok(g) if g.abs() < 0.05));
        assert!(solver.solve_participation(1.5).is_err());
        let g = solver.solve_sampling(0.3, 0.0).unwrap();
        assert!((solver.sampling_marginal(0.0, g) - 0.3).abs() < 1e-6);
    }
}
