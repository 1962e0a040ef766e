use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PreprocessError;
use crate::container::Group;
use crate::record::GraphRecord;

pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

/// Guards `floor(r * n)` against products like `0.29 * 100 = 28.999999999999996`.
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub ratios: [f64; 3],
    pub seed: u64,
    /// Group label per input record.
    pub labels: Vec<Group>,
    /// Input indices in shuffled order.
    pub order: Vec<usize>,
}

impl SplitAssignment {
    pub fn sizes(&self) -> [usize; 3] {
        let mut s = [0; 3];
        for g in &self.labels {
            s[g.id() as usize] += 1;
        }
        s
    }

    /// Groups records in shuffled order.
    pub fn apply(&self, records: Vec<GraphRecord>) -> BTreeMap<Group, Vec<GraphRecord>> {
        assert_eq!(records.len(), self.labels.len());
        let mut slots: Vec<Option<GraphRecord>> = records.into_iter().map(Some).collect();
        let mut out: BTreeMap<Group, Vec<GraphRecord>> = Group::ALL.iter().map(|&g| (g, Vec::new())).collect();
        for &i in &self.order {
            out.get_mut(&self.labels[i]).unwrap().push(slots[i].take().unwrap());
        }
        out
    }
}

/// Seeded shuffle, then train = floor(r1 N), val = floor(r2 N), test = rest.
pub fn split_dataset(n: usize, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment, PreprocessError> {
    if n == 0 {
        return Err(PreprocessError::EmptyDataset);
    }
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(PreprocessError::BadRatios(ratios));
    }
    let n_train = ((ratios[0] * n as f64) + FLOOR_SLACK).floor() as usize;
    let n_val = ((ratios[1] * n as f64) + FLOOR_SLACK).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labels = vec![Group::Test; n];
    for (pos, &i) in order.iter().enumerate() {
        labels[i] = if pos < n_train {
            Group::Train
        } else if pos < n_train + n_val {
            Group::Val
        } else {
            Group::Test
        };
    }
    Ok(SplitAssignment { ratios, seed, labels, order })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn floor_rule_examples() {
        assert_eq!(split_dataset(10, DEFAULT_RATIOS, 0).unwrap().sizes(), [8, 1, 1]);
        assert_eq!(split_dataset(7, DEFAULT_RATIOS, 0).unwrap().sizes(), [5, 0, 2]);
        assert_eq!(split_dataset(100, [0.29, 0.31, 0.4], 0).unwrap().sizes(), [29, 31, 40]);
    }

    #[test]
    fn errors() {
        assert!(matches!(split_dataset(0, DEFAULT_RATIOS, 0), Err(PreprocessError::EmptyDataset)));
        assert!(split_dataset(5, [0.5, 0.5, 0.1], 0).is_err());
        assert!(split_dataset(5, [1.0, 0.0, 0.0], 0).is_err());
    }

    #[test]
    fn seeds_control_permutation() {
        let a = split_dataset(50, DEFAULT_RATIOS, 1).unwrap();
        let b = split_dataset(50, DEFAULT_RATIOS, 1).unwrap();
        let c = split_dataset(50, DEFAULT_RATIOS, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.order, c.order);
        assert_eq!(a.sizes(), c.sizes());
    }

    proptest! {
        #[test]
        fn sizes_depend_only_on_n(n in 1usize..500, s1 in any::<u64>(), s2 in any::<u64>()) {
            let a = split_dataset(n, DEFAULT_RATIOS, s1).unwrap();
            let b = split_dataset(n, DEFAULT_RATIOS, s2).unwrap();
            prop_assert_eq!(a.sizes(), b.sizes());
            prop_assert_eq!(a.sizes().iter().sum::<usize>(), n);
        }
    }
}
