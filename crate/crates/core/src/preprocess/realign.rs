use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::elements::MAX_Z;
use crate::linalg::cholesky_solve;
use crate::record::GraphRecord;

/// Diagonal damping added to the normal equations.
pub const TIKHONOV_DAMPING: f64 = 1e-10;

/// Per-element reference energies `C_Z` (eV/atom) fit by linear least squares
/// on element counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEnergyTable {
    pub coefficients: Vec<f64>,
    pub fit_residual_norm: f64,
}

impl ReferenceEnergyTable {
    pub fn zeros() -> Self {
        Self { coefficients: vec![0.0; MAX_Z], fit_residual_norm: 0.0 }
    }

    pub fn coefficient(&self, z: u8) -> f64 {
        self.coefficients[z as usize - 1]
    }

    /// `sum_Z C_Z n_Z` for one record.
    pub fn baseline(&self, record: &GraphRecord) -> f64 {
        record.atomic_numbers.iter().map(|&z| self.coefficient(z)).sum()
    }
}

/// Minimizes `sum_i (e_i - sum_Z C_Z n_Z^i)^2` via damped normal equations.
/// Elements absent from `records` get `C_Z = 0`.
pub fn fit_reference_energies(records: &[GraphRecord]) -> ReferenceEnergyTable {
    assert!(!records.is_empty(), "fit needs at least one record");
    let mut ata = vec![0.0f64; MAX_Z * MAX_Z];
    let mut atb = vec![0.0f64; MAX_Z];
    for r in records {
        let counts = r.element_counts();
        let nz: Vec<usize> = (0..MAX_Z).filter(|&z| counts[z] > 0).collect();
        for &a in &nz {
            atb[a] += counts[a] as f64 * r.energy;
            for &b in &nz {
                ata[a * MAX_Z + b] += counts[a] as f64 * counts[b] as f64;
            }
        }
    }
    for z in 0..MAX_Z {
        ata[z * MAX_Z + z] += TIKHONOV_DAMPING;
    }
    let coefficients = cholesky_solve(&ata, &atb, MAX_Z).expect("damped normal matrix is positive definite");
    let mut table = ReferenceEnergyTable { coefficients, fit_residual_norm: 0.0 };
    table.fit_residual_norm = records
        .iter()
        .map(|r| (r.energy - table.baseline(r)).powi(2))
        .sum::<f64>()
        .sqrt();
    table
}

/// Returns records with `e' = e - sum_Z C_Z n_Z`; every other field is untouched.
pub fn realign_energies(mut records: Vec<GraphRecord>, table: &ReferenceEnergyTable) -> Vec<GraphRecord> {
    for r in &mut records {
        r.energy -= table.baseline(r);
    }
    records
}

/// One table per `source_tag`.
pub fn fit_per_source(records: &[GraphRecord]) -> BTreeMap<String, ReferenceEnergyTable> {
    let mut by_tag: BTreeMap<&str, Vec<GraphRecord>> = BTreeMap::new();
    for r in records {
        by_tag.entry(&r.source_tag).or_default().push(r.clone());
    }
    by_tag.into_iter().map(|(tag, recs)| (tag.to_string(), fit_reference_energies(&recs))).collect()
}

/// Realigns each record with the table of its own source; records of unknown
/// sources are left unchanged.
pub fn realign_per_source(
    mut records: Vec<GraphRecord>,
    tables: &BTreeMap<String, ReferenceEnergyTable>,
) -> Vec<GraphRecord> {
    for r in &mut records {
        if let Some(t) = tables.get(&r.source_tag) {
            r.energy -= t.baseline(r);
        }
    }
    records
}
