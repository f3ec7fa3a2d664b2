//! Scenario trees with a robust horizon and their non-anticipativity structure.
//!
//! Scenarios are enumerated lexicographically over the realization indices of
//! the first `N_R` stages; after the robust horizon the last realization is held.

use crate::error::ScenarioError;

/// Default upper bound on the number of scenarios a tree may have.
pub const DEFAULT_SCENARIO_CAP: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioTree {
    /// Prediction horizon (number of stages).
    pub n: usize,
    /// Robust horizon.
    pub n_r: usize,
    /// Number of realizations per branching.
    pub n_d: usize,
    /// `sequences[c][i]` is the realization index acting at stage i of scenario c.
    pub sequences: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
    /// For each stage i < N_R, the partition of scenarios sharing input nu_i.
    pub nac_groups: Vec<Vec<Vec<usize>>>,
}

/// One non-anticipativity equality nu_stage^a = nu_stage^b.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NacPair {
    pub stage: usize,
    pub a: usize,
    pub b: usize,
}

impl ScenarioTree {
    pub fn n_scenarios(&self) -> usize {
        self.sequences.len()
    }

    /// Leaf realization r(c) of scenario c.
    pub fn leaf_realization(&self, c: usize) -> usize {
        self.sequences[c][self.n - 1]
    }

    /// Index of the scenario with the given realization prefix over the robust horizon.
    pub fn index_of(&self, prefix: &[usize]) -> usize {
        prefix.iter().take(self.n_r).fold(0, |acc, &r| acc * self.n_d + r)
    }
}

/// Builds the tree for horizon `n`, robust horizon `n_r` and the realization probabilities.
pub fn build_tree(
    n: usize,
    n_r: usize,
    n_realizations: usize,
    probabilities: &[f64],
) -> Result<ScenarioTree, ScenarioError> {
    build_tree_with_cap(n, n_r, n_realizations, probabilities, DEFAULT_SCENARIO_CAP)
}

pub fn build_tree_with_cap(
    n: usize,
    n_r: usize,
    n_realizations: usize,
    probabilities: &[f64],
    cap: usize,
) -> Result<ScenarioTree, ScenarioError> {
    if n_r < 1 || n_r > n {
        return Err(ScenarioError::RobustHorizon { n, n_r });
    }
    if n_realizations < 1 {
        return Err(ScenarioError::Invalid("at least one realization is required".into()));
    }
    if probabilities.len() != n_realizations {
        return Err(ScenarioError::Invalid(format!(
            "{} probabilities for {} realizations",
            probabilities.len(),
            n_realizations
        )));
    }
    let count = (n_realizations as u128)
        .checked_pow(n_r as u32)
        .filter(|&c| c <= cap as u128)
        .ok_or(ScenarioError::TooManyScenarios { count: (n_realizations as u128).saturating_pow(n_r as u32), cap })?;
    let count = count as usize;

    let mut sequences = Vec::with_capacity(count);
    let mut weights = Vec::with_capacity(count);
    for c in 0..count {
        let mut prefix = vec![0; n_r];
        let mut rem = c;
        for i in (0..n_r).rev() {
            prefix[i] = rem % n_realizations;
            rem /= n_realizations;
        }
        let w: f64 = prefix.iter().map(|&r| probabilities[r]).product();
        let last = prefix[n_r - 1];
        let mut seq = prefix;
        seq.resize(n, last);
        sequences.push(seq);
        weights.push(w);
    }

    // Scenarios sharing the first i realizations form contiguous blocks of
    // size N_D^(N_R - i) in lexicographic order.
    let mut nac_groups = Vec::with_capacity(n_r);
    for i in 0..n_r {
        let block = n_realizations.pow((n_r - i) as u32);
        let groups = (0..count / block).map(|g| (g * block..(g + 1) * block).collect()).collect();
        nac_groups.push(groups);
    }

    Ok(ScenarioTree { n, n_r, n_d: n_realizations, sequences, weights, nac_groups })
}

/// Minimal spanning pairing of every NAC group: a group of size g gives g - 1 pairs.
pub fn nac_pairs(tree: &ScenarioTree) -> Vec<NacPair> {
    let mut pairs = Vec::new();
    for (stage, groups) in tree.nac_groups.iter().enumerate() {
        for group in groups {
            for w in group.windows(2) {
                pairs.push(NacPair { stage, a: w[0], b: w[1] });
            }
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform(n: usize) -> Vec<f64> {
        vec![1.0 / n as f64; n]
    }

    #[test]
    fn nine_and_6561_scenarios() {
        assert_eq!(build_tree(5, 2, 3, &uniform(3)).unwrap().n_scenarios(), 9);
        assert_eq!(build_tree(8, 8, 3, &uniform(3)).unwrap().n_scenarios(), 6561);
    }

    #[test]
    fn degenerate_single_realization() {
        let t = build_tree(4, 3, 1, &[1.0]).unwrap();
        assert_eq!(t.n_scenarios(), 1);
        assert!(nac_pairs(&t).is_empty());
    }

    #[test]
    fn pair_counts_small_trees() {
        let t = build_tree(3, 1, 3, &uniform(3)).unwrap();
        assert_eq!(nac_pairs(&t).len(), 2);
        let t = build_tree(5, 2, 3, &uniform(3)).unwrap();
        let p = nac_pairs(&t);
        assert_eq!(p.iter().filter(|p| p.stage == 0).count(), 8);
        assert_eq!(p.iter().filter(|p| p.stage == 1).count(), 6);
    }

    #[test]
    fn robust_horizon_validation() {
        assert!(matches!(build_tree(2, 3, 3, &uniform(3)), Err(ScenarioError::RobustHorizon { .. })));
        assert!(matches!(build_tree(2, 0, 3, &uniform(3)), Err(ScenarioError::RobustHorizon { .. })));
        assert!(matches!(
            build_tree_with_cap(9, 9, 3, &uniform(3), 10_000),
            Err(ScenarioError::TooManyScenarios { count: 19683, .. })
        ));
    }

    #[test]
    fn weights_are_path_products() {
        let p = [0.5, 0.3, 0.2];
        let t = build_tree(3, 2, 3, &p).unwrap();
        let c = t.index_of(&[2, 1]);
        assert_eq!(t.sequences[c], vec![2, 1, 1]);
        assert!((t.weights[c] - 0.06).abs() < 1e-15);
        assert!((t.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn tree_invariants(n_d in 1usize..4, n_r in 1usize..4, extra in 0usize..3) {
            let n = n_r + extra;
            let t = build_tree(n, n_r, n_d, &uniform(n_d)).unwrap();
            prop_assert_eq!(t.n_scenarios(), n_d.pow(n_r as u32));
            prop_assert!((t.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for s in &t.sequences {
                for i in n_r..n {
                    prop_assert_eq!(s[i], s[n_r - 1]);
                }
            }
            // Brute-force grouping by realization prefix.
            for i in 0..n_r {
                for a in 0..t.n_scenarios() {
                    for b in 0..t.n_scenarios() {
                        let same_prefix = t.sequences[a][..i] == t.sequences[b][..i];
                        let same_group = t.nac_groups[i].iter().any(|g| g.contains(&a) && g.contains(&b));
                        prop_assert_eq!(same_prefix, same_group);
                    }
                }
            }
            let expected: usize = (0..n_r).map(|i| n_d.pow(n_r as u32) - n_d.pow(i as u32)).sum();
            prop_assert_eq!(nac_pairs(&t).len(), expected);
        }
    }
}
