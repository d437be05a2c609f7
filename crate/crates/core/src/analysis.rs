//! JSON analysis configuration and the end-to-end estimation driver.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CohortDataset, ColumnSpec};
use crate::estimator::{
    self, ArmEstimate, AvarComponents, BootstrapSummary, ContrastEstimate, EstimateError, IcMode,
};
use crate::nuisance::{self, arm_keyed, ArmNuisance, NuisanceSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot parse analysis config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("cannot read analysis config: {0}")]
    Io(#[from] std::io::Error),
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("no arms requested")]
    NoArms,
    #[error("arm {0} listed twice")]
    DuplicateArm(i64),
    #[error("contrast refers to arm {0}, which is not in `arms`")]
    UnknownContrastArm(i64),
    #[error("bootstrap requested without a `bootstrap` block")]
    MissingBootstrap,
    #[error("bootstrap needs at least one replicate")]
    NoReplicates,
    #[error("fixed nuisance values: {0}")]
    FixedNuisance(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeMethod {
    Ic,
    Bootstrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
}

/// `psi(arm) - psi(reference)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastSpec {
    pub arm: i64,
    pub reference: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub columns: ColumnSpec,
    pub arms: Vec<i64>,
    /// Defaults to every later arm against the first one.
    #[serde(default)]
    pub contrasts: Option<Vec<ContrastSpec>>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub nuisance: NuisanceSpec,
    #[serde(default = "default_methods")]
    pub se_methods: Vec<SeMethod>,
    #[serde(default)]
    pub ic_mode: IcMode,
    #[serde(default)]
    pub bootstrap: Option<BootstrapConfig>,
    /// Per-arm, per-row nuisance values used instead of fitted models.
    #[serde(default, with = "optional_arm_keyed")]
    pub fixed_nuisance: Option<BTreeMap<i64, ArmNuisance>>,
}

fn default_alpha() -> f64 {
    0.05
}

fn default_methods() -> Vec<SeMethod> {
    vec![SeMethod::Ic]
}

mod optional_arm_keyed {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::nuisance::ArmNuisance;

    pub fn serialize<S: Serializer>(map: &Option<BTreeMap<i64, ArmNuisance>>, ser: S) -> Result<S::Ok, S::Error> {
        match map {
            Some(m) => {
                let keyed: BTreeMap<String, &ArmNuisance> = m.iter().map(|(k, v)| (k.to_string(), v)).collect();
                keyed.serialize(ser)
            }
            None => ser.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Option<BTreeMap<i64, ArmNuisance>>, D::Error> {
        #[derive(Deserialize)]
        struct Wrap(#[serde(with = "super::arm_keyed")] BTreeMap<i64, ArmNuisance>);
        Ok(Option::<Wrap>::deserialize(de)?.map(|w| w.0))
    }
}

impl AnalysisConfig {
    pub fn new(columns: ColumnSpec, arms: Vec<i64>) -> Self {
        AnalysisConfig {
            columns,
            arms,
            contrasts: None,
            alpha: default_alpha(),
            nuisance: NuisanceSpec::default(),
            se_methods: default_methods(),
            ic_mode: IcMode::default(),
            bootstrap: None,
            fixed_nuisance: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, crate::Error> {
        let cfg: AnalysisConfig = serde_json::from_str(text).map_err(ConfigError::from)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, crate::Error> {
        let text = std::fs::read_to_string(path).map_err(ConfigError::from)?;
        Self::from_json(&text)
    }

    /// Checks that do not need the data.
    pub fn validate(&self) -> Result<(), crate::Error> {
        self.columns.validate()?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(ConfigError::InvalidAlpha(self.alpha).into());
        }
        if self.arms.is_empty() {
            return Err(ConfigError::NoArms.into());
        }
        for (i, a) in self.arms.iter().enumerate() {
            if self.arms[..i].contains(a) {
                return Err(ConfigError::DuplicateArm(*a).into());
            }
        }
        for c in self.contrasts() {
            for a in [c.arm, c.reference] {
                if !self.arms.contains(&a) {
                    return Err(ConfigError::UnknownContrastArm(a).into());
                }
            }
        }
        if self.se_methods.contains(&SeMethod::Bootstrap) {
            match self.bootstrap {
                None => return Err(ConfigError::MissingBootstrap.into()),
                Some(b) if b.replicates == 0 => return Err(ConfigError::NoReplicates.into()),
                Some(_) => {}
            }
            if self.fixed_nuisance.is_some() {
                return Err(ConfigError::FixedNuisance("cannot be combined with the bootstrap".into()).into());
            }
        }
        if let Some(fixed) = &self.fixed_nuisance {
            for a in &self.arms {
                if !fixed.contains_key(a) {
                    return Err(ConfigError::FixedNuisance(format!("no values for arm {a}")).into());
                }
            }
        }
        Ok(())
    }

    /// Checks that the configuration can be applied to `data`: every design
    /// column exists and every requested arm was assigned in the trial.
    pub fn validate_against(&self, data: &CohortDataset) -> Result<(), crate::Error> {
        self.validate()?;
        let present = data.arms();
        for &a in &self.arms {
            if !present.contains(&a) {
                return Err(EstimateError::EmptyArm(a).into());
            }
        }
        if let Some(fixed) = &self.fixed_nuisance {
            let n = data.n_units();
            for (arm, v) in fixed {
                let lens = [v.b.len(), v.c.len(), v.g.len(), v.p.len(), v.e.len()];
                if lens.iter().any(|&l| l != n) {
                    return Err(ConfigError::FixedNuisance(format!(
                        "arm {arm}: value lengths {lens:?} do not match {n} rows"
                    ))
                    .into());
                }
            }
            return Ok(());
        }
        let spec = &self.nuisance;
        for design in [
            spec.participation_design(data)?,
            spec.outcome_design(data)?,
            spec.pseudo_outcome_design(data)?,
        ] {
            design.validate(data)?;
        }
        Ok(())
    }

    pub fn contrasts(&self) -> Vec<ContrastSpec> {
        match &self.contrasts {
            Some(c) => c.clone(),
            None => self
                .arms
                .iter()
                .skip(1)
                .map(|&arm| ContrastSpec {
                    arm,
                    reference: self.arms[0],
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl From<(f64, f64)> for Interval {
    fn from((lower, upper): (f64, f64)) -> Self {
        Interval { lower, upper }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StandardErrors {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Intervals {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ic_wald: Option<Interval>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap_wald: Option<Interval>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap_percentile: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: i64,
    pub psi: f64,
    /// Only for census data.
    pub psi_nosub: Option<f64>,
    pub se: StandardErrors,
    pub ci: Intervals,
    pub avar: AvarComponents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastResult {
    pub arm: i64,
    pub reference: i64,
    pub estimate: f64,
    pub estimate_nosub: Option<f64>,
    pub se: StandardErrors,
    pub ci: Intervals,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    fn of(values: impl IntoIterator<Item = f64>) -> Option<Range> {
        values.into_iter().fold(None, |acc, v| {
            Some(match acc {
                None => Range { min: v, max: v },
                Some(r) => Range {
                    min: r.min.min(v),
                    max: r.max.max(v),
                },
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Participation probability over measured rows.
    pub p: Option<Range>,
    /// Sampling probability over non-participants.
    pub c: Option<Range>,
    /// Treatment probability over trial participants, all arms.
    pub e: Option<Range>,
    /// Units whose weights were raised to the clipping floor, summed over arms.
    pub clipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub replicates: usize,
    pub failures: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub n_units: usize,
    pub n_trial: usize,
    pub n_measured: usize,
    pub census: bool,
    pub alpha: f64,
    pub ic_mode: IcMode,
    pub arms: Vec<ArmResult>,
    pub contrasts: Vec<ContrastResult>,
    pub diagnostics: Diagnostics,
    pub bootstrap: Option<BootstrapReport>,
}

/// Point estimates and influence curves before any inference.
pub struct PointEstimates {
    pub arms: Vec<ArmEstimate>,
    pub nosub: Option<Vec<ArmEstimate>>,
    pub contrasts: Vec<ContrastEstimate>,
    pub nosub_contrasts: Option<Vec<ContrastEstimate>>,
    pub values: BTreeMap<i64, ArmNuisance>,
}

impl PointEstimates {
    /// Per-arm estimates followed by contrasts, in configuration order.
    pub fn flat(&self) -> Vec<f64> {
        self.arms
            .iter()
            .map(|a| a.psi)
            .chain(self.contrasts.iter().map(|c| c.estimate))
            .collect()
    }
}

fn arm_values(data: &CohortDataset, config: &AnalysisConfig) -> Result<(BTreeMap<i64, ArmNuisance>, Option<f64>), crate::Error> {
    if let Some(fixed) = &config.fixed_nuisance {
        let values = config.arms.iter().map(|a| (*a, fixed[a].clone())).collect();
        return Ok((values, config.nuisance.clip_floor));
    }
    let set = nuisance::fit_nuisance(data, &config.nuisance, &config.arms)?;
    let mut values = BTreeMap::new();
    for &a in &config.arms {
        values.insert(a, set.evaluate(data, a)?);
    }
    Ok((values, set.clip_floor))
}

/// Fits the nuisance models (or takes the fixed values) and computes every
/// point estimate the configuration asks for.
pub fn point_estimates(data: &CohortDataset, config: &AnalysisConfig) -> Result<PointEstimates, crate::Error> {
    let (values, clip) = arm_values(data, config)?;
    let census = data.is_census();
    let mut arms = Vec::new();
    let mut nosub = census.then(Vec::new);
    for &a in &config.arms {
        arms.push(estimator::psi_from_values(data, a, &values[&a], clip)?);
        if let Some(ns) = nosub.as_mut() {
            ns.push(estimator::psi_nosub_from_values(data, a, &values[&a], clip)?);
        }
    }
    let find = |list: &[ArmEstimate], arm: i64| list.iter().position(|e| e.arm == arm).expect("validated arm");
    let contrast_list = |list: &[ArmEstimate]| -> Result<Vec<ContrastEstimate>, EstimateError> {
        config
            .contrasts()
            .iter()
            .map(|c| estimator::contrast(&list[find(list, c.arm)], &list[find(list, c.reference)]))
            .collect()
    };
    let contrasts = contrast_list(&arms)?;
    let nosub_contrasts = nosub.as_deref().map(contrast_list).transpose()?;
    Ok(PointEstimates {
        arms,
        nosub,
        contrasts,
        nosub_contrasts,
        values,
    })
}

/// Runs the full analysis: point estimates, the requested standard errors and
/// intervals, plug-in variances and diagnostics.
pub fn run_analysis(data: &CohortDataset, config: &AnalysisConfig) -> Result<EstimateResult, crate::Error> {
    config.validate_against(data)?;
    let est = point_estimates(data, config)?;
    let alpha = config.alpha;
    let use_ic = config.se_methods.contains(&SeMethod::Ic);

    let boot: Option<BootstrapSummary> = match (config.se_methods.contains(&SeMethod::Bootstrap), config.bootstrap) {
        (true, Some(b)) => Some(estimator::bootstrap(data, b.replicates, b.seed, alpha, |d| {
            point_estimates(d, config).map(|e| e.flat())
        })?),
        _ => None,
    };

    let inference = |index: usize, estimate: f64, ic: &estimator::InfluenceCurve| {
        let mut se = StandardErrors::default();
        let mut ci = Intervals::default();
        if use_ic {
            let s = estimator::ic_standard_error(ic, config.ic_mode);
            se.ic = Some(s);
            ci.ic_wald = Some(estimator::wald_interval(estimate, s, alpha).into());
        }
        if let Some(b) = &boot {
            let s = b.standard_errors[index];
            se.bootstrap = Some(s);
            ci.bootstrap_wald = Some(estimator::wald_interval(estimate, s, alpha).into());
            ci.bootstrap_percentile = Some(b.intervals[index].into());
        }
        (se, ci)
    };

    let mut arms = Vec::new();
    for (k, a) in est.arms.iter().enumerate() {
        let (se, ci) = inference(k, a.psi, &a.ic);
        arms.push(ArmResult {
            arm: a.arm,
            psi: a.psi,
            psi_nosub: est.nosub.as_ref().map(|ns| ns[k].psi),
            se,
            ci,
            avar: estimator::avar_components(data, a.arm, &est.values[&a.arm])?,
        });
    }
    let mut contrasts = Vec::new();
    for (k, c) in est.contrasts.iter().enumerate() {
        let (se, ci) = inference(est.arms.len() + k, c.estimate, &c.ic);
        contrasts.push(ContrastResult {
            arm: c.arm,
            reference: c.reference,
            estimate: c.estimate,
            estimate_nosub: est.nosub_contrasts.as_ref().map(|ns| ns[k].estimate),
            se,
            ci,
        });
    }

    let s = data.s();
    let nonparticipants = |v: &ArmNuisance| (0..v.c.len()).filter(|&i| !s[i]).map(|i| v.c[i]).collect::<Vec<_>>();
    let all = || est.values.values();
    let diagnostics = Diagnostics {
        p: Range::of(all().flat_map(|v| v.p.iter().flatten().copied())),
        c: Range::of(all().flat_map(nonparticipants)),
        e: Range::of(all().flat_map(|v| (0..v.e.len()).filter(|&i| s[i]).filter_map(|i| v.e[i]))),
        clipped: est.arms.iter().map(|a| a.clipped).sum(),
    };

    Ok(EstimateResult {
        n_units: data.n_units(),
        n_trial: s.iter().filter(|&&x| x).count(),
        n_measured: data.d().iter().filter(|&&x| x).count(),
        census: data.is_census(),
        alpha,
        ic_mode: config.ic_mode,
        arms,
        contrasts,
        diagnostics,
        bootstrap: boot.map(|b| BootstrapReport {
            replicates: b.replicates,
            failures: b.failures,
            seed: config.bootstrap.expect("validated").seed,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_validation() {
        let cfg = AnalysisConfig::from_json(
            r#"{"columns": {"s": "s", "d": "d", "a": "a", "y": "y", "x1": ["z1"], "x2": ["z2"]},
                "arms": [0, 1]}"#,
        )
        .unwrap();
        assert_eq!(cfg.alpha, 0.05);
        assert_eq!(cfg.se_methods, vec![SeMethod::Ic]);
        assert_eq!(cfg.contrasts(), vec![ContrastSpec { arm: 1, reference: 0 }]);

        let mut bad = cfg.clone();
        bad.alpha = 1.0;
        assert!(matches!(bad.validate(), Err(crate::Error::Config(ConfigError::InvalidAlpha(_)))));
        let mut bad = cfg.clone();
        bad.se_methods.push(SeMethod::Bootstrap);
        assert!(matches!(bad.validate(), Err(crate::Error::Config(ConfigError::MissingBootstrap))));
        let mut bad = cfg.clone();
        bad.contrasts = Some(vec![ContrastSpec { arm: 2, reference: 0 }]);
        assert!(matches!(bad.validate(), Err(crate::Error::Config(ConfigError::UnknownContrastArm(2)))));
        let mut bad = cfg;
        bad.arms = vec![1, 1];
        assert!(matches!(bad.validate(), Err(crate::Error::Config(ConfigError::DuplicateArm(1)))));
    }

    #[test]
    fn fixed_nuisance_parses_with_nulls() {
        let cfg = AnalysisConfig::from_json(
            r#"{"columns": {"s": "s", "d": "d", "a": "a", "y": "y", "x1": ["z1"]},
                "arms": [1],
                "fixed_nuisance": {"1": {"b": [0.5, 1.0], "c": [1.0, 0.5],
                                         "g": [0.4, null], "p": [0.5, null], "e": [0.5, null]}}}"#,
        )
        .unwrap();
        let fixed = cfg.fixed_nuisance.as_ref().unwrap();
        assert_eq!(fixed[&1].g, vec![Some(0.4), None]);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(AnalysisConfig::from_json(&text).unwrap(), cfg);
    }
}
