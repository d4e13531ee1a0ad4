//! K-Medoids extraction of representative daily load patterns, silhouette
//! validation and per-household pattern distributions.
//!
//! The fit follows the classic alternating scheme: random distinct initial
//! medoids, nearest-medoid assignment, then per-cluster medoid update to the
//! member with the smallest summed distance to its clustermates, repeated
//! while the cluster score keeps decreasing.
//!
//! Tie rules (needed for reproducibility):
//! * assignment ties go to the lowest cluster index;
//! * medoid-update ties go to the lowest profile index.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ingest::{DayClass, DayProfile};

/// Default memory budget for the cached pairwise distance matrix.
pub const DEFAULT_DISTANCE_BUDGET_BYTES: usize = 512 * 1024 * 1024;

/// Fresh-seed retries after an empty cluster before giving up.
const EMPTY_CLUSTER_RETRIES: u64 = 5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ClusterError {
    #[error("vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {k} distinct profiles, found {distinct}")]
    TooFewProfiles { k: usize, distinct: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("max_iter must be at least 1")]
    ZeroIterations,
    #[error("cluster {cluster} became empty after a medoid update")]
    EmptyClusterAfterUpdate { cluster: usize },
    #[error("silhouette needs at least two clusters")]
    SingleCluster,
    #[error("assignments cover {got} profiles, expected {expected}")]
    AssignmentMismatch { expected: usize, got: usize },
    #[error("k range [{lo}, {hi}] invalid for {n} profiles (must lie within [2, n-1])")]
    InvalidKRange { lo: usize, hi: usize, n: usize },
    #[error("household {0} has no assigned days")]
    NoDays(String),
}

/// Euclidean distance between two load vectors.
pub fn distance(a: &[f64], b: &[f64]) -> Result<f64, ClusterError> {
    if a.len() != b.len() {
        return Err(ClusterError::LengthMismatch(a.len(), b.len()));
    }
    Ok(euclid(a, b))
}

#[inline]
fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Pairwise distances over a profile set: a cached N x N matrix when it fits
/// the memory budget, on-demand evaluation otherwise.
pub struct Distances<'a, P> {
    profiles: &'a [P],
    cache: Option<Vec<f64>>,
}

impl<'a, P: AsRef<[f64]> + Sync> Distances<'a, P> {
    pub fn new(profiles: &'a [P]) -> Result<Self, ClusterError> {
        Self::with_budget(profiles, DEFAULT_DISTANCE_BUDGET_BYTES)
    }

    pub fn with_budget(profiles: &'a [P], budget_bytes: usize) -> Result<Self, ClusterError> {
        if let Some(first) = profiles.first() {
            let len = first.as_ref().len();
            if let Some(bad) = profiles.iter().find(|p| p.as_ref().len() != len) {
                return Err(ClusterError::LengthMismatch(len, bad.as_ref().len()));
            }
        }
        let n = profiles.len();
        let bytes = n
            .checked_mul(n)
            .and_then(|c| c.checked_mul(std::mem::size_of::<f64>()));
        let cache = match bytes {
            Some(b) if b <= budget_bytes => {
                let rows: Vec<Vec<f64>> = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let a = profiles[i].as_ref();
                        (0..n).map(|j| euclid(a, profiles[j].as_ref())).collect()
                    })
                    .collect();
                let mut flat = Vec::with_capacity(n * n);
                for row in rows {
                    flat.extend(row);
                }
                Some(flat)
            }
            _ => None,
        };
        Ok(Self { profiles, cache })
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn is_cached(&self) -> bool {
        self.cache.is_some()
    }

    pub fn profiles(&self) -> &'a [P] {
        self.profiles
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        match &self.cache {
            Some(m) => m[i * self.profiles.len() + j],
            None => euclid(self.profiles[i].as_ref(), self.profiles[j].as_ref()),
        }
    }

    /// Sum of distances from `i` to every index in `members`.
    #[inline]
    fn sum_to(&self, i: usize, members: &[usize]) -> f64 {
        match &self.cache {
            Some(m) => {
                let row = &m[i * self.profiles.len()..(i + 1) * self.profiles.len()];
                members.iter().map(|&j| row[j]).sum()
            }
            None => members.iter().map(|&j| self.get(i, j)).sum(),
        }
    }
}

/// Result of one K-Medoids fit. Cluster ids in `assignments` are 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSet {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub day_class: Option<DayClass>,
    pub k: usize,
    pub medoids: Vec<Vec<f64>>,
    pub medoid_indices: Vec<usize>,
    pub assignments: Vec<usize>,
    pub cluster_score: f64,
    pub seed: u64,
    pub iterations: usize,
    /// Cluster score after initialization and after every accepted iteration.
    pub score_trace: Vec<f64>,
}

impl PatternSet {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// Recomputes the total member-to-medoid distance from the stored fields.
    pub fn recompute_score<P: AsRef<[f64]>>(&self, profiles: &[P]) -> f64 {
        profiles
            .iter()
            .zip(&self.assignments)
            .map(|(p, &a)| euclid(p.as_ref(), &self.medoids[a]))
            .sum()
    }
}

fn assign<P: AsRef<[f64]> + Sync>(dist: &Distances<'_, P>, medoids: &[usize]) -> (Vec<usize>, f64) {
    let mut labels = Vec::with_capacity(dist.len());
    let mut score = 0.0;
    for i in 0..dist.len() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, &m) in medoids.iter().enumerate() {
            let d = dist.get(i, m);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        labels.push(best);
        score += best_d;
    }
    (labels, score)
}

fn members_of(labels: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); k];
    for (i, &c) in labels.iter().enumerate() {
        members[c].push(i);
    }
    members
}

fn update_medoids<P: AsRef<[f64]> + Sync>(
    dist: &Distances<'_, P>,
    members: &[Vec<usize>],
    current: &[usize],
) -> Vec<usize> {
    members
        .iter()
        .zip(current)
        .map(|(cluster, &old)| {
            let mut best = old;
            let mut best_sum = f64::INFINITY;
            for &candidate in cluster {
                let s = dist.sum_to(candidate, cluster);
                if s < best_sum {
                    best_sum = s;
                    best = candidate;
                }
            }
            best
        })
        .collect()
}

/// Draws `k` initial medoids with pairwise-distinct values.
fn initial_medoids<P: AsRef<[f64]> + Sync>(
    dist: &Distances<'_, P>,
    k: usize,
    seed: u64,
) -> Result<Vec<usize>, ClusterError> {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let profiles = dist.profiles();
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for i in order {
        if chosen
            .iter()
            .all(|&c| profiles[c].as_ref() != profiles[i].as_ref())
        {
            chosen.push(i);
            if chosen.len() == k {
                return Ok(chosen);
            }
        }
    }
    Err(ClusterError::TooFewProfiles {
        k,
        distinct: chosen.len(),
    })
}

/// Runs the alternating iteration from a given set of initial medoid indices.
pub fn kmedoids_from<P: AsRef<[f64]> + Sync>(
    dist: &Distances<'_, P>,
    initial: &[usize],
    max_iter: usize,
) -> Result<PatternSet, ClusterError> {
    if initial.is_empty() {
        return Err(ClusterError::ZeroK);
    }
    if max_iter == 0 {
        return Err(ClusterError::ZeroIterations);
    }
    let k = initial.len();
    let mut medoids = initial.to_vec();
    let (mut labels, mut score) = assign(dist, &medoids);
    let mut trace = vec![score];
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        let members = members_of(&labels, k);
        if let Some(c) = members.iter().position(Vec::is_empty) {
            return Err(ClusterError::EmptyClusterAfterUpdate { cluster: c });
        }
        let next_medoids = update_medoids(dist, &members, &medoids);
        let (next_labels, next_score) = assign(dist, &next_medoids);
        if next_score > score {
            // Only reachable through summation-order rounding; keep the better state.
            break;
        }
        let stalled = next_score == score;
        medoids = next_medoids;
        labels = next_labels;
        score = next_score;
        trace.push(score);
        if stalled {
            break;
        }
    }

    if let Some(c) = members_of(&labels, k).iter().position(Vec::is_empty) {
        return Err(ClusterError::EmptyClusterAfterUpdate { cluster: c });
    }
    let profiles = dist.profiles();
    Ok(PatternSet {
        day_class: None,
        k,
        medoids: medoids
            .iter()
            .map(|&m| profiles[m].as_ref().to_vec())
            .collect(),
        medoid_indices: medoids,
        assignments: labels,
        cluster_score: score,
        seed: 0,
        iterations,
        score_trace: trace,
    })
}

/// One seeded K-Medoids fit. An empty cluster triggers a bounded number of
/// retries with fresh seeds.
pub fn kmedoids_fit<P: AsRef<[f64]> + Sync>(
    dist: &Distances<'_, P>,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<PatternSet, ClusterError> {
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if max_iter == 0 {
        return Err(ClusterError::ZeroIterations);
    }
    let mut last_err = None;
    for attempt in 0..=EMPTY_CLUSTER_RETRIES {
        let s = seed.wrapping_add(attempt.wrapping_mul(0xD1B5_4A32_D192_ED03));
        let init = initial_medoids(dist, k, s)?;
        match kmedoids_from(dist, &init, max_iter) {
            Ok(mut set) => {
                set.seed = s;
                return Ok(set);
            }
            Err(e @ ClusterError::EmptyClusterAfterUpdate { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or(ClusterError::ZeroK))
}

/// Seed for restart `r` of a multi-start fit.
pub fn restart_seed(seed: u64, restart: usize) -> u64 {
    seed.wrapping_add((restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Best of `restarts` seeded fits by cluster score; ties keep the earliest.
pub fn kmedoids_best<P: AsRef<[f64]> + Sync>(
    dist: &Distances<'_, P>,
    k: usize,
    seed: u64,
    restarts: usize,
    max_iter: usize,
) -> Result<PatternSet, ClusterError> {
    let mut best: Option<PatternSet> = None;
    for r in 0..restarts.max(1) {
        let fit = kmedoids_fit(dist, k, restart_seed(seed, r), max_iter)?;
        if best
            .as_ref()
            .is_none_or(|b| fit.cluster_score < b.cluster_score)
        {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Per-profile silhouette values. Members of singleton clusters score 0, as
/// does any profile with a = b = 0.
pub fn silhouette_samples<P: AsRef<[f64]> + Sync>(
    dist: &Distances<'_, P>,
    assignments: &[usize],
    k: usize,
) -> Result<Vec<f64>, ClusterError> {
    if assignments.len() != dist.len() {
        return Err(ClusterError::AssignmentMismatch {
            expected: dist.len(),
            got: assignments.len(),
        });
    }
    let members = members_of(assignments, k);
    if members.iter().filter(|m| !m.is_empty()).count() < 2 {
        return Err(ClusterError::SingleCluster);
    }
    Ok((0..dist.len())
        .into_par_iter()
        .map(|i| {
            let own = assignments[i];
            if members[own].len() < 2 {
                return 0.0;
            }
            let mut a = 0.0;
            let mut b = f64::INFINITY;
            for (c, cluster) in members.iter().enumerate() {
                if cluster.is_empty() {
                    continue;
                }
                let total = dist.sum_to(i, cluster);
                if c == own {
                    // d(i, i) = 0 contributes nothing to the sum.
                    a = total / (cluster.len() - 1) as f64;
                } else {
                    b = b.min(total / cluster.len() as f64);
                }
            }
            let denom = a.max(b);
            if denom == 0.0 {
                0.0
            } else {
                ((b - a) / denom).clamp(-1.0, 1.0)
            }
        })
        .collect())
}

/// Mean silhouette coefficient over all profiles.
pub fn silhouette<P: AsRef<[f64]> + Sync>(
    dist: &Distances<'_, P>,
    set: &PatternSet,
) -> Result<f64, ClusterError> {
    let samples = silhouette_samples(dist, &set.assignments, set.k)?;
    Ok(samples.iter().sum::<f64>() / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub mean_sc: f64,
}

#[derive(Debug, Clone)]
pub struct KSelection {
    pub best_k: usize,
    pub curve: Vec<CurvePoint>,
    /// Best-scoring fit for every K in the scanned range.
    pub fits: Vec<PatternSet>,
}

impl KSelection {
    pub fn best_fit(&self) -> &PatternSet {
        self.fits
            .iter()
            .find(|f| f.k == self.best_k)
            .expect("best K is in the scanned range")
    }
}

/// Scans K over `k_range` (inclusive), keeping for each K the lowest-score fit
/// among `restarts` seeds, and returns the K with maximal mean silhouette
/// (ties toward smaller K).
pub fn select_k<P: AsRef<[f64]> + Sync>(
    dist: &Distances<'_, P>,
    k_range: (usize, usize),
    restarts: usize,
    seed: u64,
    max_iter: usize,
) -> Result<KSelection, ClusterError> {
    let (lo, hi) = k_range;
    let n = dist.len();
    if lo < 2 || hi < lo || hi + 1 > n {
        return Err(ClusterError::InvalidKRange { lo, hi, n });
    }
    let results: Vec<Result<(PatternSet, f64), ClusterError>> = (lo..=hi)
        .into_par_iter()
        .map(|k| {
            let fit = kmedoids_best(dist, k, seed, restarts, max_iter)?;
            let sc = silhouette(dist, &fit)?;
            Ok((fit, sc))
        })
        .collect();

    let mut fits = Vec::new();
    let mut curve = Vec::new();
    for r in results {
        let (fit, sc) = r?;
        curve.push(CurvePoint {
            k: fit.k,
            mean_sc: sc,
        });
        fits.push(fit);
    }
    let best_k = curve
        .iter()
        .fold(None::<CurvePoint>, |best, p| match best {
            Some(b) if b.mean_sc >= p.mean_sc => Some(b),
            _ => Some(*p),
        })
        .map(|p| p.k)
        .expect("non-empty range");
    Ok(KSelection {
        best_k,
        curve,
        fits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternDistribution {
    pub household_id: String,
    pub day_class: DayClass,
    pub probs: Vec<f64>,
}

/// Fraction of a household's days falling in each of the `k` clusters.
pub fn pattern_distribution(
    household_id: &str,
    day_class: DayClass,
    k: usize,
    labels: impl IntoIterator<Item = usize>,
) -> Result<PatternDistribution, ClusterError> {
    let mut counts = vec![0usize; k];
    for l in labels {
        counts[l] += 1;
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(ClusterError::NoDays(household_id.to_string()));
    }
    Ok(PatternDistribution {
        household_id: household_id.to_string(),
        day_class,
        probs: counts
            .into_iter()
            .map(|c| c as f64 / total as f64)
            .collect(),
    })
}

/// Pattern distributions for every household appearing in `profiles`,
/// ordered by household id.
pub fn pattern_distributions(
    profiles: &[DayProfile],
    set: &PatternSet,
    day_class: DayClass,
) -> Vec<PatternDistribution> {
    let mut by_household: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (p, &label) in profiles.iter().zip(&set.assignments) {
        by_household
            .entry(p.household_id.as_str())
            .or_default()
            .push(label);
    }
    by_household
        .into_iter()
        .map(|(id, labels)| {
            pattern_distribution(id, day_class, set.k, labels).expect("household has days")
        })
        .collect()
}
