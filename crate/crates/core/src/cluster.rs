//! Equal-size clustering of a candidate pool by cross-entropy affinity.
//!
//! `k` seed examples get their own target models; every candidate is scored
//! under every seed model; a single greedy pass over (example, model) pairs
//! sorted by target cross-entropy fills clusters up to capacity. Each cluster
//! keeps its seed as centroid, then gets a fresh model trained on all members.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ced::ScoreMatrix;
use crate::corpus::{Example, Pool};
use crate::lm::{adapt, AdaptConfig, BaseModel, LmError, TargetModel};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub k: usize,
    /// Largest cluster size, `ceil(n / k)`.
    pub capacity: usize,
    pub seed_ids: Vec<String>,
    /// Member ids per cluster in pool order; the seed is always a member.
    pub members: Vec<Vec<String>>,
    /// One model per cluster after [`retrain`]; empty before.
    pub models: Vec<TargetModel>,
}

impl ClusterAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    pub fn cluster_of(&self, id: &str) -> Option<usize> {
        self.members.iter().position(|m| m.iter().any(|x| x == id))
    }

    /// Checks the partition and size invariants against `pool`'s candidates.
    pub fn validate(&self, pool: &Pool) -> Result<(), ClusterError> {
        if self.members.len() != self.k || self.seed_ids.len() != self.k {
            return Err(ClusterError::InvalidPartition("cluster count differs from k"));
        }
        let mut seen = BTreeMap::new();
        for (i, m) in self.members.iter().enumerate() {
            for id in m {
                if seen.insert(id.as_str(), i).is_some() {
                    return Err(ClusterError::InvalidPartition("example in two clusters"));
                }
            }
            if !m.contains(&self.seed_ids[i]) {
                return Err(ClusterError::InvalidPartition("seed missing from its cluster"));
            }
        }
        let cands: Vec<&Example> = pool.candidates().collect();
        if cands.len() != seen.len() || cands.iter().any(|e| !seen.contains_key(e.id.as_str())) {
            return Err(ClusterError::InvalidPartition("clusters do not cover the candidates"));
        }
        let sizes = self.sizes();
        let (lo, hi) = (sizes.iter().min(), sizes.iter().max());
        if let (Some(lo), Some(hi)) = (lo, hi) {
            if hi - lo > 1 {
                return Err(ClusterError::InvalidPartition("cluster sizes differ by more than one"));
            }
        }
        Ok(())
    }
}

/// Draws `k` distinct candidate ids uniformly; returned in pool order.
pub fn seed_clusters(pool: &Pool, k: usize, seed: u64) -> Result<Vec<String>, ClusterError> {
    let cands: Vec<&Example> = pool.candidates().collect();
    if k == 0 || k > cands.len() {
        return Err(ClusterError::InvalidK { k, n: cands.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, cands.len(), k).into_vec();
    picks.sort_unstable();
    Ok(picks.into_iter().map(|i| cands[i].id.clone()).collect())
}

/// Greedy same-size assignment. Rows of `scores` are pool examples, columns
/// the `k` seed models named by seed id.
///
/// Seeds are placed in their own clusters first. Remaining pairs are visited
/// ascending by target cross-entropy (ties: example row, then model column)
/// and an example joins the first model that still has room. Until
/// `n mod k` clusters have reached `ceil(n/k)` every cluster may grow that
/// large; after that the rest are capped at `floor(n/k)`.
pub fn assign_equal(scores: &ScoreMatrix, k: usize) -> Result<ClusterAssignment, ClusterError> {
    let n = scores.test_ids().len();
    let seeds = scores.candidate_ids();
    if seeds.len() != k || k == 0 {
        return Err(ClusterError::IncompleteMatrix {
            expected: k,
            found: seeds.len(),
        });
    }
    if k > n {
        return Err(ClusterError::InvalidK { k, n });
    }
    let floor = n / k;
    let ceil = n.div_ceil(k);
    let mut big_left = n % k;

    let mut cluster_of: Vec<Option<usize>> = alloc::vec![None; n];
    let mut sizes = alloc::vec![0usize; k];
    for (c, sid) in seeds.iter().enumerate() {
        let row = scores
            .row_index(sid)
            .map_err(|_| ClusterError::SeedNotInPool(sid.clone()))?;
        cluster_of[row] = Some(c);
        sizes[c] = 1;
    }

    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * k);
    for (r, placed) in cluster_of.iter().enumerate() {
        if placed.is_some() {
            continue;
        }
        for (c, cell) in scores.row(r).iter().enumerate() {
            pairs.push((cell.target_ce, r, c));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let cap = |size: usize, big_left: usize| if big_left > 0 { size < ceil } else { size < floor };
    for (_, r, c) in pairs {
        if cluster_of[r].is_some() || !cap(sizes[c], big_left) {
            continue;
        }
        cluster_of[r] = Some(c);
        sizes[c] += 1;
        if ceil != floor && sizes[c] == ceil {
            big_left -= 1;
        }
    }

    let mut members = alloc::vec![Vec::new(); k];
    for (r, c) in cluster_of.iter().enumerate() {
        let c = c.expect("every example is assigned");
        members[c].push(scores.test_ids()[r].clone());
    }
    Ok(ClusterAssignment {
        k,
        capacity: ceil,
        seed_ids: seeds.to_vec(),
        members,
        models: Vec::new(),
    })
}

/// Trains one model per cluster on all its members; models are named by seed id.
pub fn retrain(
    pool: &Pool,
    base: &BaseModel,
    assignment: &ClusterAssignment,
    cfg: &AdaptConfig,
) -> Result<ClusterAssignment, ClusterError> {
    let models = (0..assignment.k)
        .map(|i| retrain_one(pool, base, assignment, i, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ClusterAssignment {
        models,
        ..assignment.clone()
    })
}

/// Model for cluster `index`; exposed so callers can parallelize over clusters.
pub fn retrain_one(
    pool: &Pool,
    base: &BaseModel,
    assignment: &ClusterAssignment,
    index: usize,
    cfg: &AdaptConfig,
) -> Result<TargetModel, ClusterError> {
    let members = assignment
        .members
        .get(index)
        .ok_or(ClusterError::IndexOutOfRange { index, k: assignment.k })?;
    let examples = members
        .iter()
        .map(|id| pool.get(id).ok_or_else(|| ClusterError::UnknownExample(id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut model = adapt(base, &examples, cfg).map_err(|source| ClusterError::Adapt { index, source })?;
    model.name = assignment.seed_ids[index].clone();
    Ok(model)
}

/// The seed of cluster `index`, which serves as its demonstration.
pub fn centroid_icd<'p>(
    pool: &'p Pool,
    assignment: &ClusterAssignment,
    index: usize,
) -> Result<&'p Example, ClusterError> {
    let id = assignment
        .seed_ids
        .get(index)
        .ok_or(ClusterError::IndexOutOfRange { index, k: assignment.k })?;
    pool.get(id).ok_or_else(|| ClusterError::UnknownExample(id.clone()))
}

/// How a cluster is turned into a demonstration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoMode {
    Centroid,
    RandomMember,
}

/// Demonstration for cluster `index`; random members are drawn from `rng`.
pub fn cluster_demo<'p, R: Rng>(
    pool: &'p Pool,
    assignment: &ClusterAssignment,
    index: usize,
    mode: DemoMode,
    rng: &mut R,
) -> Result<&'p Example, ClusterError> {
    match mode {
        DemoMode::Centroid => centroid_icd(pool, assignment, index),
        DemoMode::RandomMember => {
            let members = assignment
                .members
                .get(index)
                .ok_or(ClusterError::IndexOutOfRange { index, k: assignment.k })?;
            let id = &members[rng.random_range(0..members.len())];
            pool.get(id).ok_or_else(|| ClusterError::UnknownExample(id.clone()))
        }
    }
}

/// Share of examples whose cluster's majority label matches their own label.
pub fn purity(assignment: &ClusterAssignment, label: impl Fn(&str) -> String) -> f64 {
    let mut agree = 0;
    let mut total = 0;
    for m in &assignment.members {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for id in m {
            *counts.entry(label(id)).or_insert(0) += 1;
        }
        agree += counts.values().max().copied().unwrap_or(0);
        total += m.len();
    }
    if total == 0 {
        0.0
    } else {
        agree as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClusterError {
    #[error("k = {k} is invalid for {n} candidates")]
    InvalidK { k: usize, n: usize },
    #[error("score matrix has {found} seed models, expected {expected}")]
    IncompleteMatrix { expected: usize, found: usize },
    #[error("seed {0:?} is not a row of the score matrix")]
    SeedNotInPool(String),
    #[error("cluster index {index} out of range for k = {k}")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("unknown example id {0:?}")]
    UnknownExample(String),
    #[error("invalid partition: {0}")]
    InvalidPartition(&'static str),
    #[error("adapting cluster {index}: {source}")]
    Adapt { index: usize, source: LmError },
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ced::Cell;
    use alloc::format;
    use alloc::vec;

    fn scores(rows: &[&[f64]], seeds: &[&str]) -> ScoreMatrix {
        ScoreMatrix::new(
            (1..=rows.len()).map(|i| format!("e{i}")).collect(),
            seeds.iter().map(|s| String::from(*s)).collect(),
            rows.iter()
                .map(|r| r.iter().map(|&v| Cell::new(0.0, v)).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn separable_case() {
        let m = scores(&[&[0.1, 0.9], &[0.2, 0.8], &[0.9, 0.1], &[0.8, 0.3]], &["e1", "e3"]);
        let a = assign_equal(&m, 2).unwrap();
        assert_eq!(a.members, vec![vec!["e1", "e2"], vec!["e3", "e4"]]);
        assert_eq!(a.capacity, 2);
    }

    #[test]
    fn tie_flood_fills_in_id_order() {
        let row: &[f64] = &[1.0, 1.0];
        let m = scores(&[row; 4], &["e1", "e2"]);
        let a = assign_equal(&m, 2).unwrap();
        assert_eq!(a.sizes(), vec![2, 2]);
        assert_eq!(a.members, vec![vec!["e1", "e3"], vec!["e2", "e4"]]);
    }

    #[test]
    fn uneven_split_caps_late_clusters_at_floor() {
        // everyone prefers model 0; n = 10, k = 4 must give sizes 3,3,2,2
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![0.0, 1.0 + i as f64, 2.0, 3.0]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let m = scores(&refs, &["e1", "e2", "e3", "e4"]);
        let a = assign_equal(&m, 4).unwrap();
        let mut sizes = a.sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 3, 3]);
        assert_eq!(a.sizes()[0], 3);
    }

    #[test]
    fn matrix_width_must_match_k() {
        let m = scores(&[&[1.0], &[2.0]], &["e1"]);
        assert!(matches!(assign_equal(&m, 2), Err(ClusterError::IncompleteMatrix { .. })));
        let m = scores(&[&[1.0], &[2.0]], &["zz"]);
        assert!(matches!(assign_equal(&m, 1), Err(ClusterError::SeedNotInPool(_))));
    }

    #[test]
    fn purity_counts_majorities() {
        let a = ClusterAssignment {
            k: 2,
            capacity: 2,
            seed_ids: vec!["a1".into(), "b1".into()],
            members: vec![vec!["a1".into(), "a2".into()], vec!["b1".into(), "a3".into()]],
            models: vec![],
        };
        assert_eq!(purity(&a, |id| String::from(&id[..1])), 0.75);
    }
}
