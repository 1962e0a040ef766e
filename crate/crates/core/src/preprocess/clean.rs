use nalgebra::Matrix3;

use crate::record::GraphRecord;

/// eV/angstrom.
pub const DEFAULT_FORCE_THRESHOLD: f64 = 100.0;

/// Largest singular value of the `n x 3` force tensor.
pub fn spectral_norm(forces: &[[f64; 3]]) -> f64 {
    let mut gram = Matrix3::<f64>::zeros();
    for f in forces {
        for a in 0..3 {
            for b in 0..3 {
                gram[(a, b)] += f[a] * f[b];
            }
        }
    }
    let eig = gram.symmetric_eigenvalues();
    eig.max().max(0.0).sqrt()
}

/// Drops records whose force tensor has spectral norm strictly above `threshold`.
pub fn filter_by_force_norm(records: Vec<GraphRecord>, threshold: f64) -> (Vec<GraphRecord>, usize) {
    assert!(threshold > 0.0, "force threshold must be positive");
    let before = records.len();
    let kept: Vec<_> = records.into_iter().filter(|r| spectral_norm(&r.forces) <= threshold).collect();
    let removed = before - kept.len();
    (kept, removed)
}
