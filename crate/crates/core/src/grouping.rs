//! Rank-based quantile groups of a scoring rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Membership of each unit in one of `k` equal-sized score groups.
///
/// Groups are labelled `1..=k`; group `k` holds the largest scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub group_of: Vec<usize>,
    /// `cutoffs[j]` is the `n(j+1)/k`-th smallest score.
    pub cutoffs: Vec<f64>,
    pub k: usize,
}

impl GroupAssignment {
    pub fn n(&self) -> usize {
        self.group_of.len()
    }

    /// Zero-based group of unit `i`.
    pub fn index_of(&self, i: usize) -> usize {
        self.group_of[i] - 1
    }

    /// Units in group `k` (one-based), ascending.
    pub fn members(&self, k: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.group_of[i] == k).collect()
    }
}

/// Sorts units by score (stable, so ties keep input order) and cuts the
/// ranking into `k` blocks of `n/k`.
pub fn assign_groups(scores: &[f64], k: usize) -> Result<GroupAssignment> {
    let n = scores.len();
    if n == 0 {
        return Err(Error::InvalidArgument("score vector is empty".into()));
    }
    if k == 0 || !n.is_multiple_of(k) {
        return Err(Error::InvalidArgument(format!(
            "group count K = {k} must divide the number of scores n = {n}"
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Validation(format!("score at row {} is NaN", i + 1)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let size = n / k;
    let mut group_of = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        group_of[i] = rank / size + 1;
    }
    let cutoffs = (1..k).map(|j| scores[order[j * size - 1]]).collect();
    Ok(GroupAssignment { group_of, cutoffs, k })
}

/// 0/1 indicator of membership in group `k` (one-based).
pub fn group_indicator(g: &GroupAssignment, k: usize) -> Result<Vec<u8>> {
    if k == 0 || k > g.k {
        return Err(Error::InvalidArgument(format!(
            "group index {k} outside 1..={}",
            g.k
        )));
    }
    Ok(g.group_of.iter().map(|&gi| u8::from(gi == k)).collect())
}
