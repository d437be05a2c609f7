//! The five nuisance functions of the estimator:
//!
//! - `c(x1, s) = Pr[D = 1 | X1, S]`, identically one for trial participants;
//! - `e_a(x) = Pr[A = a | X, S = 1]`;
//! - `p(x) = Pr[S = 1 | X]` in the whole cohort, fit by weighted
//!   pseudo-likelihood among measured rows;
//! - `g_a(x) = E[Y | X, S = 1, A = a]`;
//! - `b_a(x1, s)`, the regression of `g_a(X)` on stage-one covariates and `S`
//!   among measured rows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CohortDataset, DataError, ResolvedSampling, SubsamplingDesign};
use crate::glm::{self, DesignSpec, Family, FitOptions, FittedGlm, GlmError, GlmFit};

/// Smallest admissible `c(x1, 0)` after fitting.
pub const MIN_SAMPLING_PROBABILITY: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum NuisanceError {
    #[error("{model} model: {source}")]
    Glm {
        model: String,
        #[source]
        source: GlmError,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("sampling probability {value:e} at row {row} is below {MIN_SAMPLING_PROBABILITY:e}")]
    DegenerateSampling { row: usize, value: f64 },
    #[error("empty stratum: {0}")]
    EmptyStratum(String),
    #[error("no trial participant received arm {0}")]
    EmptyArm(i64),
    #[error("pseudo-outcome design may only use stage-one covariates and S, found `{0}`")]
    StageTwoInPseudoDesign(String),
    #[error("invalid treatment probabilities: {0}")]
    InvalidTreatmentProbabilities(String),
}

fn glm_err(model: &str) -> impl FnOnce(GlmError) -> NuisanceError + '_ {
    move |source| NuisanceError::Glm {
        model: model.to_string(),
        source,
    }
}

/// How `c(x1, 0)` is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SamplingSpec {
    /// Known design probabilities.
    Design { design: SubsamplingDesign },
    /// Known logistic function of stage-one covariates.
    KnownLogistic {
        design: DesignSpec,
        coefficients: Vec<f64>,
    },
    /// Marginal fraction measured among `S = 0` rows.
    Empirical,
    /// Logistic regression of `D` on stage-one covariates among `S = 0` rows;
    /// defaults to main effects of all stage-one columns.
    Fitted {
        #[serde(default)]
        design: Option<DesignSpec>,
    },
}

impl Default for SamplingSpec {
    fn default() -> Self {
        SamplingSpec::Fitted { design: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SamplingModel {
    Design { resolved: ResolvedSampling },
    Empirical { probability: f64 },
    Logistic { model: FittedGlm, known: bool },
}

impl SamplingModel {
    /// `c(x1_i, s_i)` for every row.
    pub fn evaluate(&self, data: &CohortDataset) -> Result<Vec<f64>, NuisanceError> {
        let n = data.n_units();
        let s = data.s();
        let mut c = vec![1.0; n];
        let rows0: Vec<usize> = (0..n).filter(|&i| !s[i]).collect();
        match self {
            SamplingModel::Design { resolved } => {
                for &i in &rows0 {
                    c[i] = resolved.probability(data, i)?;
                }
            }
            SamplingModel::Empirical { probability } => {
                for &i in &rows0 {
                    c[i] = *probability;
                }
            }
            SamplingModel::Logistic { model, .. } => {
                let pred = model.predict_mean(data, &rows0).map_err(glm_err("sampling"))?;
                for (&i, v) in rows0.iter().zip(pred) {
                    c[i] = v;
                }
            }
        }
        Ok(c)
    }
}

fn stage_one_design(data: &CohortDataset, design: Option<&DesignSpec>, model: &str) -> Result<DesignSpec, NuisanceError> {
    let design = match design {
        Some(d) => d.clone(),
        None => DesignSpec::main_effects(&data.spec().x1).map_err(glm_err(model))?,
    };
    design.validate(data).map_err(glm_err(model))?;
    if !design.uses_only_stage_one(data).map_err(glm_err(model))? {
        let bad = design
            .referenced_columns()
            .into_iter()
            .find(|c| data.covariate(c).is_some_and(|c| !c.always_observed()))
            .unwrap_or_default()
            .to_string();
        return Err(NuisanceError::StageTwoInPseudoDesign(bad));
    }
    Ok(design)
}

/// Fits or resolves the sampling function.
pub fn fit_sampling(data: &CohortDataset, spec: &SamplingSpec) -> Result<SamplingModel, NuisanceError> {
    let s = data.s();
    let d = data.d();
    let rows0: Vec<usize> = (0..data.n_units()).filter(|&i| !s[i]).collect();
    let all_measured = rows0.iter().all(|&i| d[i]);
    let model = match spec {
        SamplingSpec::Design { design } => SamplingModel::Design {
            resolved: design.resolve(data)?,
        },
        SamplingSpec::KnownLogistic { design, coefficients } => {
            let design = stage_one_design(data, Some(design), "sampling")?;
            if coefficients.len() != design.width() {
                return Err(NuisanceError::Glm {
                    model: "sampling".into(),
                    source: GlmError::LengthMismatch(format!(
                        "{} coefficients for design width {}",
                        coefficients.len(),
                        design.width()
                    )),
                });
            }
            SamplingModel::Logistic {
                model: FittedGlm {
                    design,
                    fit: GlmFit {
                        family: Family::Logistic,
                        coefficients: coefficients.clone(),
                        converged: true,
                        iterations: 0,
                        gradient_norm: 0.0,
                        objective: 0.0,
                        n_obs: 0,
                    },
                },
                known: true,
            }
        }
        SamplingSpec::Empirical => {
            let measured = rows0.iter().filter(|&&i| d[i]).count();
            let probability = if rows0.is_empty() {
                1.0
            } else {
                measured as f64 / rows0.len() as f64
            };
            SamplingModel::Empirical { probability }
        }
        // Nothing to model when every non-randomized row was measured.
        SamplingSpec::Fitted { .. } if all_measured => SamplingModel::Empirical { probability: 1.0 },
        SamplingSpec::Fitted { design } => {
            let design = stage_one_design(data, design.as_ref(), "sampling")?;
            let response: Vec<f64> = rows0.iter().map(|&i| f64::from(u8::from(d[i]))).collect();
            let model = glm::fit(
                Family::Logistic,
                &design,
                data,
                &rows0,
                &response,
                &vec![1.0; rows0.len()],
                &FitOptions::default(),
            )
            .map_err(glm_err("sampling"))?;
            SamplingModel::Logistic { model, known: false }
        }
    };
    let c = model.evaluate(data)?;
    for &i in &rows0 {
        if !(c[i] >= MIN_SAMPLING_PROBABILITY) {
            return Err(NuisanceError::DegenerateSampling { row: i, value: c[i] });
        }
    }
    Ok(model)
}

/// How `e_a(x)` is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TreatmentSpec {
    /// Known randomization probabilities per arm.
    Known {
        #[serde(with = "arm_keyed")]
        probabilities: BTreeMap<i64, f64>,
    },
    /// One-vs-rest logistic regressions among trial participants, normalised
    /// across arms; the default design is intercept-only.
    Fitted {
        #[serde(default)]
        design: Option<DesignSpec>,
    },
}

impl Default for TreatmentSpec {
    fn default() -> Self {
        TreatmentSpec::Fitted { design: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TreatmentModel {
    Known {
        #[serde(with = "arm_keyed")]
        probabilities: BTreeMap<i64, f64>,
    },
    Fitted { models: BTreeMap<i64, FittedGlm> },
    /// Only one arm was observed in the trial.
    SingleArm { arm: i64 },
}

impl TreatmentModel {
    /// `e_arm(x_i)` for each of `rows`.
    pub fn evaluate(&self, data: &CohortDataset, arm: i64, rows: &[usize]) -> Result<Vec<f64>, NuisanceError> {
        match self {
            TreatmentModel::Known { probabilities } => {
                let p = probabilities.get(&arm).copied().ok_or(NuisanceError::EmptyArm(arm))?;
                Ok(vec![p; rows.len()])
            }
            TreatmentModel::SingleArm { arm: only } => {
                if *only == arm {
                    Ok(vec![1.0; rows.len()])
                } else {
                    Err(NuisanceError::EmptyArm(arm))
                }
            }
            TreatmentModel::Fitted { models } => {
                if !models.contains_key(&arm) {
                    return Err(NuisanceError::EmptyArm(arm));
                }
                let mut total = vec![0.0; rows.len()];
                let mut own = Vec::new();
                for (&k, m) in models {
                    let pred = m.predict_mean(data, rows).map_err(glm_err("treatment"))?;
                    for (t, v) in total.iter_mut().zip(&pred) {
                        *t += v;
                    }
                    if k == arm {
                        own = pred;
                    }
                }
                Ok(own.iter().zip(&total).map(|(o, t)| o / t).collect())
            }
        }
    }
}

pub fn fit_treatment(data: &CohortDataset, spec: &TreatmentSpec) -> Result<TreatmentModel, NuisanceError> {
    let arms = data.arms();
    match spec {
        TreatmentSpec::Known { probabilities } => {
            for a in &arms {
                if !probabilities.contains_key(a) {
                    return Err(NuisanceError::InvalidTreatmentProbabilities(format!(
                        "no probability given for observed arm {a}"
                    )));
                }
            }
            if probabilities.values().any(|&p| !(p > 0.0 && p <= 1.0)) {
                return Err(NuisanceError::InvalidTreatmentProbabilities(
                    "probabilities must lie in (0, 1]".into(),
                ));
            }
            let total: f64 = probabilities.values().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(NuisanceError::InvalidTreatmentProbabilities(format!(
                    "probabilities sum to {total}, not 1"
                )));
            }
            Ok(TreatmentModel::Known {
                probabilities: probabilities.clone(),
            })
        }
        TreatmentSpec::Fitted { design } => {
            let design = design.clone().unwrap_or_else(DesignSpec::intercept_only);
            design.validate(data).map_err(glm_err("treatment"))?;
            match arms.as_slice() {
                [] => return Err(NuisanceError::EmptyStratum("no trial participants".into())),
                [only] => return Ok(TreatmentModel::SingleArm { arm: *only }),
                _ => {}
            }
            let rows: Vec<usize> = (0..data.n_units()).filter(|&i| data.s()[i]).collect();
            let mut models = BTreeMap::new();
            for &arm in &arms {
                let response: Vec<f64> = rows
                    .iter()
                    .map(|&i| f64::from(u8::from(data.a()[i] == Some(arm))))
                    .collect();
                let m = glm::fit(
                    Family::Logistic,
                    &design,
                    data,
                    &rows,
                    &response,
                    &vec![1.0; rows.len()],
                    &FitOptions::default(),
                )
                .map_err(glm_err("treatment"))?;
                models.insert(arm, m);
            }
            Ok(TreatmentModel::Fitted { models })
        }
    }
}

/// JSON object keyed by arm label. Needed because internally tagged enums
/// buffer their content and lose serde_json's integer-key coercion.
pub(crate) mod arm_keyed {
    use std::collections::BTreeMap;

    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<T: Serialize, S: Serializer>(map: &BTreeMap<i64, T>, ser: S) -> Result<S::Ok, S::Error> {
        let keyed: BTreeMap<String, &T> = map.iter().map(|(k, v)| (k.to_string(), v)).collect();
        keyed.serialize(ser)
    }

    pub fn deserialize<'de, T: Deserialize<'de>, D: Deserializer<'de>>(de: D) -> Result<BTreeMap<i64, T>, D::Error> {
        BTreeMap::<String, T>::deserialize(de)?
            .into_iter()
            .map(|(k, v)| {
                k.trim()
                    .parse::<i64>()
                    .map(|k| (k, v))
                    .map_err(|_| D::Error::custom(format!("arm label `{k}` is not an integer")))
            })
            .collect()
    }
}

/// Population participation model `p(x; gamma)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticipationModel {
    pub model: FittedGlm,
}

impl ParticipationModel {
    pub fn evaluate(&self, data: &CohortDataset, rows: &[usize]) -> Result<Vec<f64>, NuisanceError> {
        self.model.predict_mean(data, rows).map_err(glm_err("participation"))
    }
}

/// Measured rows and their pseudo-likelihood weights `S + (1 - S) / c(x1, 0)`.
pub fn participation_weights(data: &CohortDataset, c: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let s = data.s();
    let rows: Vec<usize> = (0..data.n_units()).filter(|&i| data.d()[i]).collect();
    let weights = rows
        .iter()
        .map(|&i| if s[i] { 1.0 } else { 1.0 / c[i] })
        .collect();
    (rows, weights)
}

/// Maximises the weighted pseudo-likelihood for `Pr[S = 1 | X]` among `D = 1` rows.
pub fn fit_participation(
    data: &CohortDataset,
    design: &DesignSpec,
    sampling: &SamplingModel,
) -> Result<ParticipationModel, NuisanceError> {
    design.validate(data).map_err(glm_err("participation"))?;
    let c = sampling.evaluate(data)?;
    let (rows, weights) = participation_weights(data, &c);
    let s = data.s();
    if !rows.iter().any(|&i| s[i]) || !rows.iter().any(|&i| !s[i]) {
        return Err(NuisanceError::EmptyStratum(
            "measured rows must include both trial participants and non-participants".into(),
        ));
    }
    let response: Vec<f64> = rows.iter().map(|&i| f64::from(u8::from(s[i]))).collect();
    let model = glm::fit(
        Family::Logistic,
        design,
        data,
        &rows,
        &response,
        &weights,
        &FitOptions::default(),
    )
    .map_err(glm_err("participation"))?;
    Ok(ParticipationModel { model })
}

/// `g_a(x)`, fit among trial participants assigned to `arm`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutcomeModel {
    pub arm: i64,
    pub model: FittedGlm,
}

pub fn fit_outcome(
    data: &CohortDataset,
    arm: i64,
    design: &DesignSpec,
    family: Family,
) -> Result<OutcomeModel, NuisanceError> {
    design.validate(data).map_err(glm_err("outcome"))?;
    let rows: Vec<usize> = (0..data.n_units())
        .filter(|&i| data.s()[i] && data.a()[i] == Some(arm))
        .collect();
    if rows.is_empty() {
        return Err(NuisanceError::EmptyArm(arm));
    }
    let y: Vec<f64> = rows.iter().map(|&i| data.y()[i].expect("trial rows have outcomes")).collect();
    let model = glm::fit(family, design, data, &rows, &y, &vec![1.0; rows.len()], &FitOptions::default())
        .map_err(glm_err("outcome"))?;
    Ok(OutcomeModel { arm, model })
}

/// `b_a(x1, s)`, a function of stage-one covariates and `S` only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PseudoOutcomeModel {
    pub arm: i64,
    pub model: FittedGlm,
}

impl PseudoOutcomeModel {
    pub fn evaluate(&self, data: &CohortDataset) -> Result<Vec<f64>, NuisanceError> {
        let rows: Vec<usize> = (0..data.n_units()).collect();
        self.model.predict_mean(data, &rows).map_err(glm_err("pseudo-outcome"))
    }
}

/// Regresses `g_a(X_i)` on the stage-one design among `D = 1` rows (unweighted).
pub fn fit_pseudo_outcome(
    data: &CohortDataset,
    outcome: &OutcomeModel,
    design: &DesignSpec,
    family: Family,
) -> Result<PseudoOutcomeModel, NuisanceError> {
    let design = stage_one_design(data, Some(design), "pseudo-outcome")?;
    let rows: Vec<usize> = (0..data.n_units()).filter(|&i| data.d()[i]).collect();
    let g = outcome.model.predict_mean(data, &rows).map_err(glm_err("outcome"))?;
    let model = glm::fit(family, &design, data, &rows, &g, &vec![1.0; rows.len()], &FitOptions::default())
        .map_err(glm_err("pseudo-outcome"))?;
    Ok(PseudoOutcomeModel {
        arm: outcome.arm,
        model,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSpec {
    #[serde(default)]
    pub design: Option<DesignSpec>,
    #[serde(default = "linear")]
    pub family: Family,
}

fn linear() -> Family {
    Family::Linear
}

impl Default for RegressionSpec {
    fn default() -> Self {
        RegressionSpec {
            design: None,
            family: Family::Linear,
        }
    }
}

/// Working-model choices for all nuisance functions. Unset designs default to
/// main effects of every covariate (participation, outcome) and
/// `x1 + s + x1:s` (pseudo-outcome).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NuisanceSpec {
    #[serde(default)]
    pub participation: Option<DesignSpec>,
    #[serde(default)]
    pub outcome: RegressionSpec,
    #[serde(default)]
    pub pseudo_outcome: RegressionSpec,
    #[serde(default)]
    pub sampling: SamplingSpec,
    #[serde(default)]
    pub treatment: TreatmentSpec,
    /// Opt-in floor for probabilities entering inverse weights.
    #[serde(default)]
    pub clip_floor: Option<f64>,
}

impl NuisanceSpec {
    pub fn participation_design(&self, data: &CohortDataset) -> Result<DesignSpec, NuisanceError> {
        match &self.participation {
            Some(d) => Ok(d.clone()),
            None => all_covariates(data).map_err(glm_err("participation")),
        }
    }

    pub fn outcome_design(&self, data: &CohortDataset) -> Result<DesignSpec, NuisanceError> {
        match &self.outcome.design {
            Some(d) => Ok(d.clone()),
            None => all_covariates(data).map_err(glm_err("outcome")),
        }
    }

    pub fn pseudo_outcome_design(&self, data: &CohortDataset) -> Result<DesignSpec, NuisanceError> {
        match &self.pseudo_outcome.design {
            Some(d) => Ok(d.clone()),
            None => default_pseudo_design(data).map_err(glm_err("pseudo-outcome")),
        }
    }
}

fn all_covariates(data: &CohortDataset) -> Result<DesignSpec, GlmError> {
    let spec = data.spec();
    let cols: Vec<&String> = spec.x1.iter().chain(&spec.x2).collect();
    DesignSpec::main_effects(&cols)
}

/// Main effects of stage-one covariates, `S`, and every `x1:S` interaction.
pub fn default_pseudo_design(data: &CohortDataset) -> Result<DesignSpec, GlmError> {
    let spec = data.spec();
    let mut terms: Vec<String> = spec.x1.clone();
    terms.push(spec.s.clone());
    terms.extend(spec.x1.iter().map(|x| format!("{x}:{}", spec.s)));
    let refs: Vec<&str> = terms.iter().map(String::as_str).collect();
    DesignSpec::new(&refs, true)
}

/// All fitted nuisance functions for a set of arms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NuisanceSet {
    pub sampling: SamplingModel,
    pub treatment: TreatmentModel,
    pub participation: ParticipationModel,
    pub outcome: BTreeMap<i64, OutcomeModel>,
    pub pseudo_outcome: BTreeMap<i64, PseudoOutcomeModel>,
    pub clip_floor: Option<f64>,
}

/// Per-unit nuisance values for one arm. `g`, `p` and `e` are only defined
/// on measured rows (they need stage-two covariates).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmNuisance {
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub g: Vec<Option<f64>>,
    pub p: Vec<Option<f64>>,
    pub e: Vec<Option<f64>>,
}

impl NuisanceSet {
    pub fn arms(&self) -> Vec<i64> {
        self.outcome.keys().copied().collect()
    }

    pub fn evaluate(&self, data: &CohortDataset, arm: i64) -> Result<ArmNuisance, NuisanceError> {
        let outcome = self.outcome.get(&arm).ok_or(NuisanceError::EmptyArm(arm))?;
        let pseudo = self.pseudo_outcome.get(&arm).ok_or(NuisanceError::EmptyArm(arm))?;
        let n = data.n_units();
        let measured: Vec<usize> = (0..n).filter(|&i| data.d()[i]).collect();
        let scatter = |vals: Vec<f64>| {
            let mut out = vec![None; n];
            for (&i, v) in measured.iter().zip(vals) {
                out[i] = Some(v);
            }
            out
        };
        Ok(ArmNuisance {
            b: pseudo.evaluate(data)?,
            c: self.sampling.evaluate(data)?,
            g: scatter(outcome.model.predict_mean(data, &measured).map_err(glm_err("outcome"))?),
            p: scatter(self.participation.evaluate(data, &measured)?),
            e: scatter(self.treatment.evaluate(data, arm, &measured)?),
        })
    }
}

/// Fits every nuisance model needed for `arms`.
pub fn fit_nuisance(data: &CohortDataset, spec: &NuisanceSpec, arms: &[i64]) -> Result<NuisanceSet, NuisanceError> {
    let sampling = fit_sampling(data, &spec.sampling)?;
    let treatment = fit_treatment(data, &spec.treatment)?;
    let participation = fit_participation(data, &spec.participation_design(data)?, &sampling)?;
    let outcome_design = spec.outcome_design(data)?;
    let pseudo_design = spec.pseudo_outcome_design(data)?;
    let mut outcome = BTreeMap::new();
    let mut pseudo_outcome = BTreeMap::new();
    for &arm in arms {
        let g = fit_outcome(data, arm, &outcome_design, spec.outcome.family)?;
        let b = fit_pseudo_outcome(data, &g, &pseudo_design, spec.pseudo_outcome.family)?;
        outcome.insert(arm, g);
        pseudo_outcome.insert(arm, b);
    }
    Ok(NuisanceSet {
        sampling,
        treatment,
        participation,
        outcome,
        pseudo_outcome,
        clip_floor: spec.clip_floor,
    })
}
