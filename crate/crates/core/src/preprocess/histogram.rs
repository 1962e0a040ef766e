use serde::{Deserialize, Serialize};

use super::{spectral_norm, PreprocessError};
use crate::elements::MAX_Z;
use crate::record::GraphRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HistField {
    AtomsPerGraph,
    EdgesPerGraph,
    EnergyPerAtom,
    ForceL2Norm,
}

impl HistField {
    pub fn value(self, r: &GraphRecord) -> f64 {
        match self {
            HistField::AtomsPerGraph => r.n_atoms() as f64,
            HistField::EdgesPerGraph => r.edge_count() as f64,
            HistField::EnergyPerAtom => r.energy / r.n_atoms() as f64,
            HistField::ForceL2Norm => spectral_norm(&r.forces),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub field: HistField,
    pub edges: Vec<f64>,
    pub normalized: bool,
}

impl HistogramSpec {
    pub fn uniform(field: HistField, lo: f64, hi: f64, bins: usize, normalized: bool) -> Self {
        let edges = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
        Self { field, edges, normalized }
    }
}

/// Bins are `[e_k, e_{k+1})`, the last one closed on the right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub spec: HistogramSpec,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    pub fn in_range(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts divided by the in-range total when `HistogramSpec::normalized` is set.
    pub fn values(&self) -> Vec<f64> {
        let total = self.in_range();
        if self.spec.normalized && total > 0 {
            self.counts.iter().map(|&c| c as f64 / total as f64).collect()
        } else {
            self.counts.iter().map(|&c| c as f64).collect()
        }
    }

    /// Bin-wise addition of a histogram computed on another slice.
    pub fn merge(&mut self, other: &Histogram) {
        assert_eq!(self.spec, other.spec, "merging histograms with different specs");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.underflow += other.underflow;
        self.overflow += other.overflow;
    }
}

pub fn compute_histograms(records: &[GraphRecord], spec: &HistogramSpec) -> Result<Histogram, PreprocessError> {
    let e = &spec.edges;
    if e.len() < 2 || e.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(PreprocessError::BadBins);
    }
    let bins = e.len() - 1;
    let mut h = Histogram { spec: spec.clone(), counts: vec![0; bins], underflow: 0, overflow: 0 };
    for r in records {
        let v = spec.field.value(r);
        if v < e[0] || v.is_nan() {
            h.underflow += 1;
        } else if v > e[bins] {
            h.overflow += 1;
        } else {
            // first edge strictly greater than v, minus one
            let k = e.partition_point(|&x| x <= v).saturating_sub(1).min(bins - 1);
            h.counts[k] += 1;
        }
    }
    Ok(h)
}

/// Atom counts per element over a dataset, indexed by `Z - 1`.
pub fn element_occurrence(records: &[GraphRecord]) -> Vec<u64> {
    let mut out = vec![0u64; MAX_Z];
    for r in records {
        for (o, c) in out.iter_mut().zip(r.element_counts()) {
            *o += c as u64;
        }
    }
    out
}
