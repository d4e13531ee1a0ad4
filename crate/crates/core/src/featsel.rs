//! Entropy-based filter selection of socioeconomic features per load pattern,
//! plus the Pearson correlation matrix used for interpretation.
//!
//! All information quantities use log base 2 over empirical (plug-in)
//! distributions of discrete labels.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Default number of quantile bins for continuous columns.
pub const DEFAULT_BINS: usize = 5;

/// Merits closer than this are treated as tied.
const MERIT_TIE_EPS: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FeatselError {
    #[error("bins must be at least 2, got {0}")]
    TooFewBins(usize),
    #[error("columns differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty column")]
    Empty,
    #[error("feature subset must be non-empty")]
    EmptySubset,
    #[error("need at least 2 households, got {0}")]
    TooFewHouseholds(usize),
    #[error("too many features for exhaustive search: {0}")]
    TooManyFeatures(usize),
    #[error("unknown feature index {0}")]
    UnknownFeature(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Discrete,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureColumn {
    pub name: String,
    pub kind: ColumnKind,
    pub values: Vec<f64>,
}

/// Equal-frequency binning into at most `bins` labels. Equal values always
/// share a label; a constant column collapses to the single label 0.
pub fn discretize(values: &[f64], bins: usize) -> Result<Vec<i64>, FeatselError> {
    if bins < 2 {
        return Err(FeatselError::TooFewBins(bins));
    }
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let cuts: Vec<f64> = (1..bins)
        .map(|j| sorted[((j * n).div_ceil(bins)).min(n - 1)])
        .collect();
    let raw: Vec<usize> = values
        .iter()
        .map(|&v| cuts.iter().filter(|&&c| c <= v).count())
        .collect();
    // Dense relabeling so the labels are 0..distinct.
    let mut used: Vec<usize> = raw.clone();
    used.sort_unstable();
    used.dedup();
    Ok(raw
        .into_iter()
        .map(|r| used.binary_search(&r).expect("present") as i64)
        .collect())
}

/// Discrete labels for a feature column: integer-valued columns pass
/// through, continuous ones are quantile-binned.
pub fn discretize_column(column: &FeatureColumn, bins: usize) -> Result<Vec<i64>, FeatselError> {
    match column.kind {
        ColumnKind::Discrete => Ok(column.values.iter().map(|&v| v.round() as i64).collect()),
        ColumnKind::Continuous => discretize(&column.values, bins),
    }
}

fn counts<T: Ord + Copy>(xs: impl IntoIterator<Item = T>) -> BTreeMap<T, usize> {
    let mut m = BTreeMap::new();
    for x in xs {
        *m.entry(x).or_insert(0) += 1;
    }
    m
}

fn entropy_of_counts<'a>(counts: impl IntoIterator<Item = &'a usize>, n: usize) -> f64 {
    let n = n as f64;
    -counts
        .into_iter()
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>()
}

/// Shannon entropy in bits.
pub fn entropy(x: &[i64]) -> Result<f64, FeatselError> {
    if x.is_empty() {
        return Err(FeatselError::Empty);
    }
    Ok(entropy_of_counts(counts(x.iter().copied()).values(), x.len()).max(0.0))
}

/// Mutual information in bits, summed cell by cell over the joint table.
pub fn mutual_info(x: &[i64], y: &[i64]) -> Result<f64, FeatselError> {
    if x.len() != y.len() {
        return Err(FeatselError::LengthMismatch(x.len(), y.len()));
    }
    if x.is_empty() {
        return Err(FeatselError::Empty);
    }
    let n = x.len() as f64;
    let px = counts(x.iter().copied());
    let py = counts(y.iter().copied());
    let joint = counts(x.iter().copied().zip(y.iter().copied()));
    let mut terms: Vec<f64> = joint
        .iter()
        .map(|(&(a, b), &c)| {
            let pxy = c as f64 / n;
            let pa = px[&a] as f64 / n;
            let pb = py[&b] as f64 / n;
            pxy * (pxy / (pa * pb)).log2()
        })
        .collect();
    // Value order makes the sum independent of which argument comes first.
    terms.sort_by(f64::total_cmp);
    Ok(terms.iter().sum::<f64>().max(0.0))
}

/// 2 MI / (H(X) + H(Y)), clamped to [0, 1]; 0 when both columns are constant.
pub fn symmetric_uncertainty(x: &[i64], y: &[i64]) -> Result<f64, FeatselError> {
    let mi = mutual_info(x, y)?;
    let h = entropy(x)? + entropy(y)?;
    if h == 0.0 {
        return Ok(0.0);
    }
    Ok((2.0 * mi / h).clamp(0.0, 1.0))
}

/// How the redundancy term treats the SU(U, U) diagonal.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeritMode {
    /// Unrestricted double sum, diagonal included.
    #[default]
    WithDiagonal,
    /// Off-diagonal pairs only; a zero redundancy term leaves the numerator unscaled.
    OffDiagonal,
}

/// Pairwise SU among features and between each feature and the target,
/// computed once and shared by every subset evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SuTable {
    pub feature_target: Vec<f64>,
    pub feature_feature: Vec<Vec<f64>>,
}

impl SuTable {
    pub fn new(features: &[Vec<i64>], target: &[i64]) -> Result<Self, FeatselError> {
        let f = features.len();
        let mut feature_feature = vec![vec![0.0; f]; f];
        for i in 0..f {
            for j in i..f {
                let su = symmetric_uncertainty(&features[i], &features[j])?;
                feature_feature[i][j] = su;
                feature_feature[j][i] = su;
            }
        }
        let feature_target = features
            .iter()
            .map(|col| symmetric_uncertainty(col, target))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            feature_target,
            feature_feature,
        })
    }

    /// Subset merit: summed target relevance over the square root of summed
    /// pairwise redundancy.
    pub fn merit(&self, subset: &[usize], mode: MeritMode) -> Result<f64, FeatselError> {
        if subset.is_empty() {
            return Err(FeatselError::EmptySubset);
        }
        if let Some(&bad) = subset.iter().find(|&&i| i >= self.feature_target.len()) {
            return Err(FeatselError::UnknownFeature(bad));
        }
        let relevance: f64 = subset.iter().map(|&u| self.feature_target[u]).sum();
        let mut redundancy = 0.0;
        for &u in subset {
            for &v in subset {
                if mode == MeritMode::WithDiagonal || u != v {
                    redundancy += self.feature_feature[u][v];
                }
            }
        }
        Ok(if redundancy > 0.0 {
            relevance / redundancy.sqrt()
        } else if mode == MeritMode::OffDiagonal {
            relevance
        } else {
            0.0
        })
    }
}

/// Merit of `subset` (indices into `features`) against a discretized target.
pub fn merit(
    features: &[Vec<i64>],
    subset: &[usize],
    target: &[i64],
    mode: MeritMode,
) -> Result<f64, FeatselError> {
    let picked: Vec<Vec<i64>> = subset
        .iter()
        .map(|&i| features.get(i).cloned().ok_or(FeatselError::UnknownFeature(i)))
        .collect::<Result<_, _>>()?;
    let table = SuTable::new(&picked, target)?;
    let local: Vec<usize> = (0..picked.len()).collect();
    table.merit(&local, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSubset {
    /// Selected feature names, in input column order.
    pub members: Vec<String>,
    pub merit: f64,
    /// Set when the best merit does not beat the best merit obtained on
    /// permuted targets.
    pub low_confidence: bool,
    /// Largest best-subset merit over the target permutations.
    pub noise_floor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectOptions {
    pub bins: usize,
    pub mode: MeritMode,
    /// Target permutations used to estimate the no-signal merit level.
    pub permutations: usize,
    pub seed: u64,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            mode: MeritMode::WithDiagonal,
            permutations: 20,
            seed: 0,
        }
    }
}

/// Best subset by exhaustive search over all non-empty subsets. Ties prefer
/// smaller subsets, then the lexicographically smaller sorted name list, so
/// the result does not depend on column order.
fn best_subset(
    table: &SuTable,
    names: &[&str],
    mode: MeritMode,
) -> Result<(Vec<usize>, f64), FeatselError> {
    let f = names.len();
    let mut best: Option<(Vec<usize>, f64, Vec<&str>)> = None;
    for mask in 1u32..(1u32 << f) {
        let subset: Vec<usize> = (0..f).filter(|&i| mask & (1 << i) != 0).collect();
        // Name order keeps the floating-point summation order column-order independent.
        let mut by_name = subset.clone();
        by_name.sort_by_key(|&i| names[i]);
        let m = table.merit(&by_name, mode)?;
        let key: Vec<&str> = by_name.iter().map(|&i| names[i]).collect();
        let better = match &best {
            None => true,
            Some((bs, bm, bkey)) => {
                if m > bm + MERIT_TIE_EPS {
                    true
                } else if m < bm - MERIT_TIE_EPS {
                    false
                } else {
                    (subset.len(), &key) < (bs.len(), bkey)
                }
            }
        };
        if better {
            best = Some((subset, m, key));
        }
    }
    let (s, m, _) = best.expect("at least one subset");
    Ok((s, m))
}

/// Selects the merit-maximizing feature subset for one pattern target.
pub fn select_subset(
    features: &[FeatureColumn],
    target: &[f64],
    opts: &SelectOptions,
) -> Result<FeatureSubset, FeatselError> {
    if features.is_empty() {
        return Err(FeatselError::EmptySubset);
    }
    if features.len() > 16 {
        return Err(FeatselError::TooManyFeatures(features.len()));
    }
    let n = target.len();
    if n < 2 {
        return Err(FeatselError::TooFewHouseholds(n));
    }
    for c in features {
        if c.values.len() != n {
            return Err(FeatselError::LengthMismatch(c.values.len(), n));
        }
    }
    let discrete: Vec<Vec<i64>> = features
        .iter()
        .map(|c| discretize_column(c, opts.bins))
        .collect::<Result<_, _>>()?;
    let labels = discretize(target, opts.bins)?;
    let names: Vec<&str> = features.iter().map(|c| c.name.as_str()).collect();
    let table = SuTable::new(&discrete, &labels)?;
    let (subset, merit) = best_subset(&table, &names, opts.mode)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut shuffled = labels.clone();
    let mut noise_floor = 0.0f64;
    for _ in 0..opts.permutations {
        shuffled.shuffle(&mut rng);
        let feature_target = discrete
            .iter()
            .map(|col| symmetric_uncertainty(col, &shuffled))
            .collect::<Result<_, _>>()?;
        let permuted = SuTable {
            feature_target,
            feature_feature: table.feature_feature.clone(),
        };
        noise_floor = noise_floor.max(best_subset(&permuted, &names, opts.mode)?.1);
    }

    Ok(FeatureSubset {
        members: subset.iter().map(|&i| features[i].name.clone()).collect(),
        merit,
        low_confidence: opts.permutations > 0 && merit <= noise_floor,
        noise_floor,
    })
}

/// Pearson correlation, `None` when either column is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    /// Row-major; `None` marks entries involving a constant column.
    pub values: Vec<Vec<Option<f64>>>,
}

impl CorrelationMatrix {
    /// CSV with a header row and a leading name column; undefined cells read `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (name, row) in self.names.iter().zip(&self.values) {
            out.push_str(name);
            for v in row {
                out.push(',');
                match v {
                    Some(r) => out.push_str(&format!("{r:.6}")),
                    None => out.push_str("NA"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Pearson r for every pair of named columns; the diagonal of a
/// non-constant column is exactly 1.
pub fn pearson_matrix(columns: &[(String, Vec<f64>)]) -> CorrelationMatrix {
    let k = columns.len();
    let mut values = vec![vec![None; k]; k];
    for i in 0..k {
        for j in i..k {
            let r = if i == j {
                pearson(&columns[i].1, &columns[i].1).map(|_| 1.0)
            } else {
                pearson(&columns[i].1, &columns[j].1)
            };
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    CorrelationMatrix {
        names: columns.iter().map(|(n, _)| n.clone()).collect(),
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_bins_are_even() {
        let values: Vec<f64> = (1..=100).map(f64::from).collect();
        let labels = discretize(&values, 5).unwrap();
        let c = counts(labels.iter().copied());
        assert_eq!(c.values().copied().collect::<Vec<_>>(), vec![20; 5]);
        assert!(labels.windows(2).all(|w| w[0] <= w[1]));

        assert_eq!(discretize(&[3.3; 10], 5).unwrap(), vec![0; 10]);
        assert_eq!(discretize(&[1.0], 1), Err(FeatselError::TooFewBins(1)));
        // Ties never straddle a bin boundary.
        let tied = discretize(&[1.0, 1.0, 1.0, 2.0, 3.0], 2).unwrap();
        assert_eq!(tied[0], tied[1]);
        assert_eq!(tied[1], tied[2]);
    }

    #[test]
    fn discrete_columns_pass_through() {
        let col = FeatureColumn {
            name: "education".into(),
            kind: ColumnKind::Discrete,
            values: vec![1.0, 4.0, 2.0, 3.0, 4.0],
        };
        assert_eq!(discretize_column(&col, 2).unwrap(), vec![1, 4, 2, 3, 4]);
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[0, 1, 0, 1]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(entropy(&[7; 9]).unwrap(), 0.0);
        let h = entropy(&[0, 1, 1, 1]).unwrap();
        // -0.25 log2 0.25 - 0.75 log2 0.75
        let expected = 0.5 + 0.75 * (4.0f64 / 3.0).log2();
        assert!((h - expected).abs() < 1e-12);
        assert!((h - 0.811278).abs() < 1e-6);
        assert_eq!(entropy(&[]), Err(FeatselError::Empty));
    }

    #[test]
    fn mutual_info_examples() {
        // Product table: x and y empirically independent.
        let x = [0, 0, 1, 1];
        let y = [0, 1, 0, 1];
        assert_eq!(mutual_info(&x, &y).unwrap(), 0.0);
        let z = [0, 1, 2, 0, 1, 2, 3];
        assert!((mutual_info(&z, &z).unwrap() - entropy(&z).unwrap()).abs() < 1e-12);

        // {(0,0):0.4,(0,1):0.1,(1,0):0.1,(1,1):0.4}
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (a, b, c) in [(0, 0, 4), (0, 1, 1), (1, 0, 1), (1, 1, 4)] {
            for _ in 0..c {
                x.push(a);
                y.push(b);
            }
        }
        let expected = 0.8 * (0.4f64 / 0.25).log2() + 0.2 * (0.1f64 / 0.25).log2();
        let mi = mutual_info(&x, &y).unwrap();
        assert!((mi - expected).abs() < 1e-12);
        assert!((mi - 0.278072).abs() < 1e-6);
        let su = symmetric_uncertainty(&x, &y).unwrap();
        assert!((su - 0.278072).abs() < 1e-6);
        assert_eq!(
            mutual_info(&[1, 2], &[1]),
            Err(FeatselError::LengthMismatch(2, 1))
        );
    }

    #[test]
    fn su_edge_cases() {
        let x = [0, 1, 2, 1, 0];
        assert!((symmetric_uncertainty(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(symmetric_uncertainty(&[1, 1, 1], &[2, 2, 2]).unwrap(), 0.0);
        assert_eq!(
            symmetric_uncertainty(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(),
            0.0
        );
    }

    #[test]
    fn merit_examples() {
        // Singleton: merit equals the target SU.
        let u = vec![0, 1, 0, 1, 1, 0, 0, 1];
        let target = vec![0, 1, 0, 1, 1, 0, 1, 0];
        let m = merit(&[u.clone()], &[0], &target, MeritMode::WithDiagonal).unwrap();
        assert!((m - symmetric_uncertainty(&u, &target).unwrap()).abs() < 1e-15);

        // Two mutually independent features with equal relevance s: merit = s * sqrt 2.
        let table = SuTable {
            feature_target: vec![0.3, 0.3],
            feature_feature: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        };
        let m = table.merit(&[0, 1], MeritMode::WithDiagonal).unwrap();
        assert!((m - 0.3 * 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(
            table.merit(&[], MeritMode::WithDiagonal),
            Err(FeatselError::EmptySubset)
        );
        // Off-diagonal: independent features carry no redundancy penalty.
        assert!((table.merit(&[0, 1], MeritMode::OffDiagonal).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn three_feature_merit_matches_su_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng;
        let n = 200;
        let cols: Vec<Vec<i64>> = (0..3)
            .map(|_| (0..n).map(|_| rng.random_range(0..4)).collect())
            .collect();
        let target: Vec<i64> = (0..n)
            .map(|i| (cols[0][i] + cols[1][i] + rng.random_range(0..2)) / 2)
            .collect();
        let mut num = 0.0;
        let mut den = 0.0;
        for u in &cols {
            num += symmetric_uncertainty(u, &target).unwrap();
            for v in &cols {
                den += symmetric_uncertainty(u, v).unwrap();
            }
        }
        let m = merit(&cols, &[0, 1, 2], &target, MeritMode::WithDiagonal).unwrap();
        assert!((m - num / den.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        let y = [2.0, 4.0, 5.0, 9.0];
        // Centered: dx = (-1.5, -0.5, 0.5, 1.5), dy = (-3, -1, 0, 4); sxy = 11, sxx = 5, syy = 26.
        let expected = 11.0 / 130f64.sqrt();
        assert!((pearson(&x, &y).unwrap() - expected).abs() < 1e-12);
        assert!((pearson(&x, &y).unwrap() - 0.964764).abs() < 1e-6);
        assert_eq!(pearson(&x, &[1.0; 4]), None);

        let m = pearson_matrix(&[
            ("x".into(), x.to_vec()),
            ("c".into(), vec![2.0; 4]),
            ("y".into(), y.to_vec()),
        ]);
        assert_eq!(m.values[0][0], Some(1.0));
        assert_eq!(m.values[1][1], None);
        assert_eq!(m.values[0][2], m.values[2][0]);
        let csv = m.to_csv();
        assert!(csv.starts_with("name,x,c,y\n"));
        assert!(csv.contains("NA"));
    }

    #[test]
    fn independent_target_flags_low_confidence() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 300;
        let features: Vec<FeatureColumn> = ["a", "b", "c"]
            .iter()
            .map(|name| FeatureColumn {
                name: (*name).into(),
                kind: ColumnKind::Discrete,
                values: (0..n).map(|_| rng.random_range(0..3) as f64).collect(),
            })
            .collect();
        let target: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let sel = select_subset(&features, &target, &SelectOptions::default()).unwrap();
        assert!(sel.low_confidence, "{sel:?}");
    }
}
