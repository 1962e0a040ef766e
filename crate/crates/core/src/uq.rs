//! Energy-aware ensemble selection and ensemble uncertainty.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, Prediction, ReferenceModel};
use crate::record::GraphRecord;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum UqError {
    #[error("invalid selection policy: {0}")]
    Policy(String),
    #[error("empty ensemble")]
    NoMembers,
    #[error("member {member}: {message}")]
    Member { member: usize, message: String },
    #[error("dataset std for {source_tag:?} must be positive, got {value}")]
    NonPositiveStd { source_tag: String, value: f64 },
    #[error("no dataset std entry for source {0:?}")]
    UnknownSource(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionPolicy {
    pub tau1: f64,
    pub tau2: f64,
    pub k2: usize,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        Self { tau1: 0.10, tau2: 0.125, k2: 11 }
    }
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<(), UqError> {
        if !(self.tau1 > 0.0 && self.tau1 < self.tau2 && self.tau2.is_finite()) {
            return Err(UqError::Policy(format!("need 0 < tau1 < tau2, got tau1={} tau2={}", self.tau1, self.tau2)));
        }
        Ok(())
    }
}

/// What selection needs to know about a finished trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialScore {
    pub trial_id: u64,
    pub validation_mae: f64,
    pub energy_kwh: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub trial_id: u64,
    pub tier: Tier,
    pub validation_mae: f64,
    pub energy_kwh: f64,
}

/// Tier 1: every trial with MAE below `tau1`, by MAE. Tier 2: the `k2`
/// lowest-energy trials with MAE in `[tau1, tau2]`, by energy. Ties go to the
/// lower trial id. Trials with non-finite scores are skipped.
pub fn select_ensemble(trials: &[TrialScore], policy: &SelectionPolicy) -> Result<Vec<Member>, UqError> {
    policy.validate()?;
    let ok: Vec<&TrialScore> =
        trials.iter().filter(|t| t.validation_mae.is_finite() && t.energy_kwh.is_finite()).collect();
    let mut tier1: Vec<&TrialScore> = ok.iter().copied().filter(|t| t.validation_mae < policy.tau1).collect();
    tier1.sort_by(|a, b| a.validation_mae.total_cmp(&b.validation_mae).then(a.trial_id.cmp(&b.trial_id)));
    let mut band: Vec<&TrialScore> = ok
        .iter()
        .copied()
        .filter(|t| t.validation_mae >= policy.tau1 && t.validation_mae <= policy.tau2)
        .collect();
    band.sort_by(|a, b| a.energy_kwh.total_cmp(&b.energy_kwh).then(a.trial_id.cmp(&b.trial_id)));
    band.truncate(policy.k2);
    let member = |t: &TrialScore, tier| Member {
        trial_id: t.trial_id,
        tier,
        validation_mae: t.validation_mae,
        energy_kwh: t.energy_kwh,
    };
    Ok(tier1.into_iter().map(|t| member(t, Tier::One)).chain(band.into_iter().map(|t| member(t, Tier::Two))).collect())
}

/// Indices of the points not dominated when minimizing both coordinates, ascending.
pub fn pareto_front<T: Scalar>(points: &[(T, T)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (points[i], points[j]);
        a.0.partial_cmp(&b.0).unwrap().then(a.1.partial_cmp(&b.1).unwrap())
    });
    let mut front = Vec::new();
    let mut best = T::infinity();
    let mut k = 0;
    while k < order.len() {
        // a group shares the first coordinate; only its minimal second coordinate can survive
        let x = points[order[k]].0;
        let group_min = points[order[k]].1;
        let mut end = k;
        while end < order.len() && points[order[end]].0 == x {
            end += 1;
        }
        if group_min < best {
            front.extend(order[k..end].iter().copied().filter(|&i| points[i].1 == group_min));
            best = group_min;
        }
        k = end;
    }
    front.sort_unstable();
    front
}

/// Population mean and standard deviation (divisor K).
///
/// The mean is accumulated relative to the first value so identical inputs give
/// exactly that value and a zero spread.
pub fn mean_std<T: Scalar>(values: &[T]) -> (T, T) {
    let Some(&x0) = values.first() else {
        return (T::nan(), T::nan());
    };
    let k = T::of_usize(values.len());
    let mean = x0 + values.iter().map(|&x| x - x0).sum::<T>() / k;
    let var = values.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / k;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForceReduction {
    #[default]
    Max,
    Mean,
    L2,
}

impl std::str::FromStr for ForceReduction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "max" => Ok(Self::Max),
            "mean" => Ok(Self::Mean),
            "l2" => Ok(Self::L2),
            _ => Err(format!("unknown force reduction {s:?} (max|mean|l2)")),
        }
    }
}

impl ForceReduction {
    pub fn reduce<T: Scalar>(self, sigmas: impl Iterator<Item = T>) -> T {
        let v: Vec<T> = sigmas.collect();
        if v.is_empty() {
            return T::zero();
        }
        match self {
            Self::Max => v.iter().copied().fold(T::zero(), T::max),
            Self::Mean => v.iter().copied().sum::<T>() / T::of_usize(v.len()),
            Self::L2 => v.iter().map(|&s| s * s).sum::<T>().sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction<T> {
    pub energy: T,
    pub energy_std: T,
    pub forces: Vec<[T; 3]>,
    pub force_std: Vec<[T; 3]>,
    pub members: usize,
}

impl<T: Scalar> EnsemblePrediction<T> {
    pub fn force_std_summary(&self, reduction: ForceReduction) -> T {
        reduction.reduce(self.force_std.iter().flat_map(|r| r.iter().copied()))
    }
}

/// Combines member outputs for one structure.
pub fn combine_predictions<T: Scalar>(preds: &[Prediction<T>]) -> Result<EnsemblePrediction<T>, UqError> {
    let first = preds.first().ok_or(UqError::NoMembers)?;
    let n = first.forces.len();
    if let Some(m) = preds.iter().position(|p| p.forces.len() != n) {
        return Err(UqError::Member { member: m, message: format!("{} force rows, expected {n}", preds[m].forces.len()) });
    }
    let energies: Vec<T> = preds.iter().map(|p| p.energy).collect();
    let (energy, energy_std) = mean_std(&energies);
    let mut forces = vec![[T::zero(); 3]; n];
    let mut force_std = vec![[T::zero(); 3]; n];
    let mut col = Vec::with_capacity(preds.len());
    for a in 0..n {
        for c in 0..3 {
            col.clear();
            col.extend(preds.iter().map(|p| p.forces[a][c]));
            (forces[a][c], force_std[a][c]) = mean_std(&col);
        }
    }
    Ok(EnsemblePrediction { energy, energy_std, forces, force_std, members: preds.len() })
}

pub fn ensemble_predict<T: Scalar>(
    members: &[ReferenceModel<T>],
    record: &GraphRecord,
) -> Result<EnsemblePrediction<T>, UqError> {
    let preds: Vec<Prediction<T>> = members.iter().map(|m| m.predict(record)).collect();
    combine_predictions(&preds)
}

pub fn relative_uncertainty<T: Scalar>(sigma: T, dataset_std: T) -> Result<T, UqError> {
    if !(dataset_std > T::zero()) {
        return Err(UqError::NonPositiveStd { source_tag: String::new(), value: dataset_std.as_f64() });
    }
    Ok(sigma / dataset_std)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceStd {
    pub energy: f64,
    pub force: f64,
}

/// Per-source spread of targets, used to make uncertainties comparable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DatasetStd {
    pub sources: BTreeMap<String, SourceStd>,
}

impl DatasetStd {
    /// Energy and force STDs of the five public pre-training sources.
    pub fn builtin() -> Self {
        let rows = [
            ("ANI1x", 6.48e-3, 7.83e-2),
            ("QM7-X", 1.70e-1, 1.62),
            ("OC2020", 2.64e-1, 4.37e-1),
            ("OC2022", 4.26e-1, 3.77e-1),
            ("MPTrj", 6.93e-1, 7.23e-1),
        ];
        Self {
            sources: rows
                .into_iter()
                .map(|(k, energy, force)| (k.to_string(), SourceStd { energy, force }))
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let t: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        t.validate().map_err(|e| e.to_string())?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), UqError> {
        for (k, s) in &self.sources {
            for v in [s.energy, s.force] {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(UqError::NonPositiveStd { source_tag: k.clone(), value: v });
                }
            }
        }
        Ok(())
    }

    /// Exact match first, then case-insensitive.
    pub fn lookup(&self, source_tag: &str) -> Result<SourceStd, UqError> {
        self.sources
            .get(source_tag)
            .or_else(|| self.sources.iter().find(|(k, _)| k.eq_ignore_ascii_case(source_tag)).map(|(_, v)| v))
            .copied()
            .ok_or_else(|| UqError::UnknownSource(source_tag.to_string()))
    }
}

/// Mean absolute and root-mean-square of residuals. RMSE is never reported
/// below MAE; they can only cross by rounding.
pub fn mae_rmse<T: Scalar>(residuals: &[T]) -> (T, T) {
    if residuals.is_empty() {
        return (T::zero(), T::zero());
    }
    let n = T::of_usize(residuals.len());
    let mae = residuals.iter().map(|r| r.abs()).sum::<T>() / n;
    let rmse = (residuals.iter().map(|&r| r * r).sum::<T>() / n).sqrt();
    (mae, rmse.max(mae))
}

/// Residuals of one structure.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureResidual {
    pub split: String,
    pub source_tag: String,
    /// Predicted minus target energy, per atom.
    pub energy_per_atom: f64,
    /// Predicted minus target, every force component.
    pub forces: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub split: String,
    pub source: String,
    pub structures: usize,
    pub energy_mae: f64,
    pub energy_rmse: f64,
    pub force_mae: f64,
    pub force_rmse: f64,
}

pub const ALL_SOURCES: &str = "all";

/// One row per (split, source) and one pooled `all` row per split. Splits in
/// `expected_splits` without residuals produce a notice instead of a row.
pub fn split_metrics(residuals: &[StructureResidual], expected_splits: &[&str]) -> (Vec<MetricRow>, Vec<String>) {
    let mut groups: BTreeMap<(String, String), Vec<&StructureResidual>> = BTreeMap::new();
    for r in residuals {
        groups.entry((r.split.clone(), r.source_tag.clone())).or_default().push(r);
        groups.entry((r.split.clone(), ALL_SOURCES.to_string())).or_default().push(r);
    }
    let rows = groups
        .into_iter()
        .map(|((split, source), rs)| {
            let e: Vec<f64> = rs.iter().map(|r| r.energy_per_atom).collect();
            let f: Vec<f64> = rs.iter().flat_map(|r| r.forces.iter().copied()).collect();
            let (energy_mae, energy_rmse) = mae_rmse(&e);
            let (force_mae, force_rmse) = mae_rmse(&f);
            MetricRow { split, source, structures: rs.len(), energy_mae, energy_rmse, force_mae, force_rmse }
        })
        .collect();
    let notices = expected_splits
        .iter()
        .filter(|s| !residuals.iter().any(|r| r.split == **s))
        .map(|s| format!("split {s} is empty; no metrics row"))
        .collect();
    (rows, notices)
}

pub fn load_members<T: Scalar>(
    checkpoints: &[crate::checkpoint::Checkpoint],
) -> Result<Vec<ReferenceModel<T>>, UqError> {
    checkpoints
        .iter()
        .enumerate()
        .map(|(member, c)| c.model::<T>().map_err(|e: ModelError| UqError::Member { member, message: e.to_string() }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn std_of_one_two_three() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[0.3f64; 7]), (0.3, 0.0));
        assert_eq!(mean_std(&[5.0f32]), (5.0, 0.0));
    }

    #[test]
    fn pareto_examples() {
        assert_eq!(pareto_front(&[(1.0, 3.0), (2.0, 2.0), (3.0, 1.0)]), vec![0, 1, 2]);
        assert_eq!(pareto_front(&[(1.0, 1.0), (2.0, 2.0)]), vec![0]);
        assert_eq!(pareto_front(&[(1.0, 1.0), (1.0, 1.0), (1.0, 2.0), (0.5, 1.0)]), vec![3]);
        assert!(pareto_front::<f64>(&[]).is_empty());
    }

    #[test]
    fn policy_checks() {
        assert!(SelectionPolicy { tau1: 0.2, tau2: 0.1, k2: 1 }.validate().is_err());
        assert!(SelectionPolicy::default().validate().is_ok());
        let trials = [TrialScore { trial_id: 0, validation_mae: 0.5, energy_kwh: 1.0 }];
        assert!(select_ensemble(&trials, &SelectionPolicy::default()).unwrap().is_empty());
    }

    #[test]
    fn relative_and_table() {
        assert_eq!(relative_uncertainty(0.0, 2.0), Ok(0.0));
        assert_eq!(relative_uncertainty(2.0, 2.0), Ok(1.0));
        assert!(relative_uncertainty(1.0, 0.0).is_err());
        let t = DatasetStd::builtin();
        assert_eq!(t.lookup("ANI1x").unwrap().energy, 6.48e-3);
        assert_eq!(t.lookup("mptrj").unwrap().force, 7.23e-1);
        assert!(t.lookup("nope").is_err());
        let back = DatasetStd::from_json(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
        assert!(DatasetStd::from_json(r#"{"x":{"energy":0.0,"force":1.0}}"#).is_err());
    }

    #[test]
    fn metric_examples() {
        assert_eq!(mae_rmse(&[0.0, 0.0]), (0.0, 0.0));
        assert_eq!(mae_rmse(&[1.0, -1.0]), (1.0, 1.0));
        let r = |split: &str, src: &str, e| StructureResidual {
            split: split.into(),
            source_tag: src.into(),
            energy_per_atom: e,
            forces: vec![e, -e, 0.0],
        };
        let (rows, notices) = split_metrics(&[r("testset", "a", 1.0), r("testset", "b", -3.0)], &["testset", "valset"]);
        assert_eq!(rows.len(), 3);
        let all = rows.iter().find(|x| x.source == ALL_SOURCES).unwrap();
        assert_eq!(all.energy_mae, 2.0);
        assert_eq!(all.energy_rmse, 5.0f64.sqrt());
        assert_eq!(notices.len(), 1);
    }

    #[test]
    fn reductions() {
        let v = [3.0, 4.0];
        assert_eq!(ForceReduction::Max.reduce(v.iter().copied()), 4.0);
        assert_eq!(ForceReduction::Mean.reduce(v.iter().copied()), 3.5);
        assert_eq!(ForceReduction::L2.reduce(v.iter().copied()), 5.0);
    }

    proptest! {
        #[test]
        fn rmse_not_below_mae(r in prop::collection::vec(-1e3f64..1e3, 1..100)) {
            let (mae, rmse) = mae_rmse(&r);
            prop_assert!(rmse >= mae);
        }

        #[test]
        fn std_nonnegative_and_order_free(v in prop::collection::vec(-10f64..10.0, 1..20)) {
            let (m, s) = mean_std(&v);
            let mut rev = v.clone();
            rev.reverse();
            let (m2, s2) = mean_std(&rev);
            prop_assert!(s >= 0.0);
            prop_assert!((m - m2).abs() < 1e-12 && (s - s2).abs() < 1e-12);
        }
    }
}
