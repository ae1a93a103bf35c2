//! Random forest classifier over the summary table.
//!
//! Trees are grown to purity with Gini splits. Binary columns split at 0.5,
//! the AGE column at midpoints between consecutive observed ages, and at every
//! node a fresh random subset of `ceil(mtry_fraction * n_features)` columns is
//! considered. Rows whose value is `<= threshold` go left.
//!
//! Split quality is compared exactly in integer arithmetic so that tie-breaking
//! (lower feature id, then lower threshold) never depends on rounding.

use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix, rng_from, Rng};
use crate::tabulate::{FeatureId, FeatureKey, FeatureMatrix, AGE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub mtry_fraction: f64,
    pub bootstrap: bool,
    pub min_samples_split: usize,
    pub max_depth: Option<usize>,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 500,
            mtry_fraction: 0.10,
            bootstrap: true,
            min_samples_split: 2,
            max_depth: None,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Config("n_trees must be >= 1".into()));
        }
        if !(self.mtry_fraction > 0.0 && self.mtry_fraction <= 1.0) {
            return Err(Error::Config("mtry_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Candidate features per split for a table of `n_features` columns.
    pub fn mtry(&self, n_features: usize) -> usize {
        ((self.mtry_fraction * n_features as f64).ceil() as usize).clamp(1, n_features.max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Internal {
        feature: FeatureId,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        positive_fraction: f64,
        n: u32,
    },
}

/// Arena of nodes; the root is node 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

/// Borrowed view of one table row.
#[derive(Clone, Copy, Debug)]
pub struct Row<'a> {
    pub age: u32,
    /// Ascending ids of binary columns set to 1.
    pub active: &'a [FeatureId],
}

impl Row<'_> {
    fn value(&self, feature: FeatureId) -> f64 {
        if feature == AGE {
            f64::from(self.age)
        } else if self.active.binary_search(&feature).is_ok() {
            1.0
        } else {
            0.0
        }
    }
}

impl Tree {
    pub fn leaf_for(&self, row: Row<'_>) -> &TreeNode {
        let mut node = &self.nodes[0];
        while let TreeNode::Internal {
            feature,
            threshold,
            left,
            right,
        } = node
        {
            let next = if row.value(*feature) <= *threshold { left } else { right };
            node = &self.nodes[*next as usize];
        }
        node
    }

    pub fn predict(&self, row: Row<'_>) -> f64 {
        match self.leaf_for(row) {
            TreeNode::Leaf {
                positive_fraction, ..
            } => *positive_fraction,
            TreeNode::Internal { .. } => unreachable!("leaf_for stops at leaves"),
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Internal { left, right, .. } => {
                    1 + walk(t, *left as usize).max(walk(t, *right as usize))
                }
            }
        }
        walk(self, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub catalog: Vec<FeatureKey>,
}

impl Forest {
    /// Mean over trees of the reached leaf's positive fraction.
    pub fn predict_proba(&self, row: Row<'_>) -> Result<f64> {
        let width = self.catalog.len() as FeatureId;
        if row.active.iter().any(|&c| c == AGE || c >= width)
            || row.active.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::CatalogMismatch(format!(
                "active columns outside 1..{width} or unsorted"
            )));
        }
        let sum: f64 = self.trees.iter().map(|t| t.predict(row)).sum();
        Ok(sum / self.trees.len() as f64)
    }

    /// Scores every row of a table built over the same catalog.
    pub fn predict_matrix(&self, matrix: &FeatureMatrix) -> Result<Vec<f64>> {
        if matrix.catalog() != self.catalog.as_slice() {
            return Err(Error::CatalogMismatch("table catalog differs".into()));
        }
        (0..matrix.n_rows())
            .map(|r| self.predict_proba(matrix_row(matrix, r)))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub fn matrix_row(matrix: &FeatureMatrix, r: usize) -> Row<'_> {
    Row {
        age: matrix.age(r),
        active: matrix.active(r),
    }
}

/// `1 - p0^2 - p1^2` over a multiset of 0/1 labels.
pub fn gini_impurity(labels: &[u8]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let n = labels.len() as f64;
    let p1 = labels.iter().filter(|&&l| l == 1).count() as f64 / n;
    let p0 = 1.0 - p1;
    Ok(1.0 - p0 * p0 - p1 * p1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Split {
    pub feature: FeatureId,
    pub threshold: f64,
    pub impurity_decrease: f64,
}

/// Weighted child impurity up to the constant factor `2/n`:
/// `pL*qL/nL + pR*qR/nR`, held as an exact fraction.
#[derive(Clone, Copy, Debug)]
struct ChildScore {
    num: u128,
    den: u128,
}

impl ChildScore {
    fn new(n_left: u64, p_left: u64, n_right: u64, p_right: u64) -> ChildScore {
        let (nl, pl, nr, pr) = (
            u128::from(n_left),
            u128::from(p_left),
            u128::from(n_right),
            u128::from(p_right),
        );
        ChildScore {
            num: pl * (nl - pl) * nr + pr * (nr - pr) * nl,
            den: nl * nr,
        }
    }

    fn parent(n: u64, p: u64) -> ChildScore {
        ChildScore {
            num: u128::from(p) * u128::from(n - p),
            den: u128::from(n),
        }
    }

    fn cmp(&self, other: &ChildScore) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }

    fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// Column-major dense copy of the training table.
struct TrainView<'a> {
    n_rows: usize,
    n_features: usize,
    /// `columns[f * n_rows + r]` for binary column f; column 0 unused.
    columns: Vec<u8>,
    ages: &'a [u32],
    labels: &'a [u8],
}

impl<'a> TrainView<'a> {
    fn new(matrix: &'a FeatureMatrix, labels: &'a [u8]) -> TrainView<'a> {
        let n_rows = matrix.n_rows();
        let n_features = matrix.n_features();
        let mut columns = vec![0u8; n_rows * n_features];
        for r in 0..n_rows {
            for &c in matrix.active(r) {
                columns[c as usize * n_rows + r] = 1;
            }
        }
        TrainView {
            n_rows,
            n_features,
            columns,
            ages: matrix.ages(),
            labels,
        }
    }

    #[inline]
    fn column(&self, f: FeatureId) -> &[u8] {
        let start = f as usize * self.n_rows;
        &self.columns[start..start + self.n_rows]
    }

    /// Best split of `samples` (row ids, duplicates allowed) over `candidates`
    /// visited in ascending order. `scratch` is reused for the AGE sort.
    fn best_split(
        &self,
        samples: &[u32],
        n_pos: u64,
        candidates: &[FeatureId],
        scratch: &mut Vec<(u32, u8)>,
    ) -> Option<(FeatureId, f64, ChildScore)> {
        let n = samples.len() as u64;
        let parent = ChildScore::parent(n, n_pos);
        let mut best: Option<(FeatureId, f64, ChildScore)> = None;
        let consider = |f: FeatureId, t: f64, s: ChildScore, best: &mut Option<(FeatureId, f64, ChildScore)>| {
            if s.cmp(&parent) != Ordering::Less {
                return;
            }
            if best.is_none_or(|(_, _, b)| s.cmp(&b) == Ordering::Less) {
                *best = Some((f, t, s));
            }
        };
        for &f in candidates {
            if f == AGE {
                scratch.clear();
                scratch.extend(samples.iter().map(|&s| (self.ages[s as usize], self.labels[s as usize])));
                scratch.sort_unstable();
                let (mut nl, mut pl) = (0u64, 0u64);
                for i in 0..scratch.len() - 1 {
                    nl += 1;
                    pl += u64::from(scratch[i].1);
                    let (a, b) = (scratch[i].0, scratch[i + 1].0);
                    if a != b {
                        let t = (f64::from(a) + f64::from(b)) / 2.0;
                        consider(f, t, ChildScore::new(nl, pl, n - nl, n_pos - pl), &mut best);
                    }
                }
            } else {
                let col = self.column(f);
                let (mut n1, mut p1) = (0u64, 0u64);
                for &s in samples {
                    let v = col[s as usize];
                    n1 += u64::from(v);
                    p1 += u64::from(v & self.labels[s as usize]);
                }
                if n1 == 0 || n1 == n {
                    continue;
                }
                consider(f, 0.5, ChildScore::new(n - n1, n_pos - p1, n1, p1), &mut best);
            }
        }
        best
    }

    fn goes_left(&self, s: u32, feature: FeatureId, threshold: f64) -> bool {
        if feature == AGE {
            f64::from(self.ages[s as usize]) <= threshold
        } else {
            self.column(feature)[s as usize] == 0
        }
    }
}

/// Best split of `rows` over `candidate_features`, or `None` when no split
/// lowers the weighted Gini impurity.
pub fn best_split(
    matrix: &FeatureMatrix,
    labels: &[u8],
    rows: &[usize],
    candidate_features: &[FeatureId],
) -> Option<Split> {
    if rows.len() < 2 {
        return None;
    }
    let view = TrainView::new(matrix, labels);
    let samples: Vec<u32> = rows.iter().map(|&r| r as u32).collect();
    let n_pos = samples.iter().map(|&s| u64::from(labels[s as usize])).sum();
    let mut candidates = candidate_features.to_vec();
    candidates.sort_unstable();
    candidates.dedup();
    let n = samples.len() as f64;
    let parent = 2.0 * ChildScore::parent(samples.len() as u64, n_pos).value() / n;
    view.best_split(&samples, n_pos, &candidates, &mut Vec::new())
        .map(|(feature, threshold, s)| Split {
            feature,
            threshold,
            impurity_decrease: parent - 2.0 * s.value() / n,
        })
}

fn grow_tree(view: &TrainView<'_>, params: &ForestParams, mtry: usize, rng: &mut Rng) -> Tree {
    let n = view.n_rows;
    let mut samples: Vec<u32> = if params.bootstrap {
        (0..n).map(|_| rng.random_range(0..n as u32)).collect()
    } else {
        (0..n as u32).collect()
    };

    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut scratch = Vec::with_capacity(n);
    let mut candidates = Vec::with_capacity(mtry);
    // (node slot, sample range, depth); left children are pushed last so the
    // tree is built depth-first, left first.
    let mut stack = vec![(0usize, 0usize, samples.len(), 0usize)];
    nodes.push(TreeNode::Leaf {
        positive_fraction: 0.0,
        n: 0,
    });
    while let Some((slot, start, end, depth)) = stack.pop() {
        let node_samples = &mut samples[start..end];
        let size = node_samples.len() as u64;
        let n_pos: u64 = node_samples
            .iter()
            .map(|&s| u64::from(view.labels[s as usize]))
            .sum();
        let leaf = TreeNode::Leaf {
            positive_fraction: n_pos as f64 / size as f64,
            n: size as u32,
        };
        let stop = n_pos == 0
            || n_pos == size
            || (size as usize) < params.min_samples_split
            || params.max_depth.is_some_and(|d| depth >= d);
        if stop {
            nodes[slot] = leaf;
            continue;
        }
        candidates.clear();
        candidates.extend(
            sample(rng, view.n_features, mtry)
                .into_iter()
                .map(|f| f as FeatureId),
        );
        candidates.sort_unstable();
        let Some((feature, threshold, _)) = view.best_split(node_samples, n_pos, &candidates, &mut scratch)
        else {
            nodes[slot] = leaf;
            continue;
        };
        // in-place partition: left block first
        let mut mid = 0;
        for i in 0..node_samples.len() {
            if view.goes_left(node_samples[i], feature, threshold) {
                node_samples.swap(i, mid);
                mid += 1;
            }
        }
        let left = nodes.len();
        nodes.push(TreeNode::Leaf {
            positive_fraction: 0.0,
            n: 0,
        });
        let right = nodes.len();
        nodes.push(TreeNode::Leaf {
            positive_fraction: 0.0,
            n: 0,
        });
        nodes[slot] = TreeNode::Internal {
            feature,
            threshold,
            left: left as u32,
            right: right as u32,
        };
        stack.push((right, start + mid, end, depth + 1));
        stack.push((left, start, start + mid, depth + 1));
    }
    Tree { nodes }
}

/// Trains `params.n_trees` trees; tree `i` draws from a generator seeded by
/// `mix(params.seed, i)`.
pub fn train_forest(matrix: &FeatureMatrix, labels: &[u8], params: &ForestParams) -> Result<Forest> {
    params.validate()?;
    if labels.len() != matrix.n_rows() {
        return Err(Error::Config(format!(
            "{} labels for {} rows",
            labels.len(),
            matrix.n_rows()
        )));
    }
    if labels.len() < 2 {
        return Err(Error::DegenerateCohort);
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() || labels.iter().any(|&l| l > 1) {
        return Err(Error::DegenerateCohort);
    }
    let view = TrainView::new(matrix, labels);
    let mtry = params.mtry(view.n_features);
    let trees = (0..params.n_trees)
        .map(|i| {
            let mut rng = rng_from(mix(params.seed, i as u64));
            grow_tree(&view, params, mtry, &mut rng)
        })
        .collect();
    Ok(Forest {
        trees,
        catalog: matrix.catalog().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::EventKind;

    fn dx(code: u32) -> FeatureKey {
        FeatureKey::Event {
            kind: EventKind::Diagnosis,
            code,
            band: None,
        }
    }

    fn matrix(ages: Vec<u32>, bits: Vec<Vec<FeatureId>>, labels: Vec<u8>, width: u32) -> FeatureMatrix {
        let mut catalog = vec![FeatureKey::Age];
        catalog.extend((1..width).map(dx));
        FeatureMatrix::from_parts(catalog, ages, bits, labels).unwrap()
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini_impurity(&[1, 1, 1]).unwrap(), 0.0);
        assert_eq!(gini_impurity(&[0, 1]).unwrap(), 0.5);
        let g = gini_impurity(&[1, 1, 0, 0, 0, 0]).unwrap();
        assert!((g - 4.0 / 9.0).abs() < 1e-15);
        assert!(gini_impurity(&[]).is_err());
    }

    #[test]
    fn perfect_separator_is_chosen() {
        let labels = vec![1, 1, 0, 0];
        let m = matrix(vec![30; 4], vec![vec![2], vec![2], vec![1], vec![]], labels.clone(), 3);
        let s = best_split(&m, &labels, &[0, 1, 2, 3], &[0, 1, 2]).unwrap();
        assert_eq!(s.feature, 2);
        assert_eq!(s.threshold, 0.5);
        assert!((s.impurity_decrease - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_features_give_no_split() {
        let labels = vec![1, 0, 1];
        let m = matrix(vec![30; 3], vec![vec![1], vec![1], vec![1]], labels.clone(), 2);
        assert_eq!(best_split(&m, &labels, &[0, 1, 2], &[0, 1]), None);
    }

    #[test]
    fn age_split_at_midpoint() {
        let labels = vec![0, 0, 1, 1];
        let m = matrix(vec![20, 22, 40, 44], vec![vec![]; 4], labels.clone(), 1);
        let s = best_split(&m, &labels, &[0, 1, 2, 3], &[0]).unwrap();
        assert_eq!((s.feature, s.threshold), (0, 31.0));
    }

    #[test]
    fn degenerate_labels_rejected() {
        let m = matrix(vec![1, 2], vec![vec![], vec![]], vec![1, 1], 1);
        assert!(matches!(
            train_forest(&m, &[1, 1], &ForestParams::default()),
            Err(Error::DegenerateCohort)
        ));
    }

    #[test]
    fn single_tree_reduces_to_decision_tree() {
        let labels = vec![1, 0, 1, 0, 1, 0];
        let m = matrix(
            vec![50, 51, 60, 30, 70, 20],
            vec![vec![1], vec![], vec![1, 2], vec![2], vec![], vec![1]],
            labels.clone(),
            3,
        );
        let params = ForestParams {
            n_trees: 1,
            bootstrap: false,
            mtry_fraction: 1.0,
            ..ForestParams::default()
        };
        let a = train_forest(&m, &labels, &params).unwrap();
        let b = train_forest(&m, &labels, &ForestParams { seed: 77, ..params.clone() }).unwrap();
        assert_eq!(a, b);
        let probs = a.predict_matrix(&m).unwrap();
        let as_labels: Vec<u8> = probs.iter().map(|&p| (p > 0.5) as u8).collect();
        assert_eq!(as_labels, labels);
    }

    #[test]
    fn predict_averages_leaves() {
        let leaf = |p| Tree {
            nodes: vec![TreeNode::Leaf {
                positive_fraction: p,
                n: 1,
            }],
        };
        let f = Forest {
            trees: vec![leaf(0.2), leaf(0.6)],
            catalog: vec![FeatureKey::Age],
        };
        let row = Row { age: 3, active: &[] };
        assert!((f.predict_proba(row).unwrap() - 0.4).abs() < 1e-15);
        let ones = Forest {
            trees: vec![leaf(1.0); 3],
            catalog: vec![FeatureKey::Age],
        };
        assert_eq!(ones.predict_proba(row).unwrap(), 1.0);
        assert!(ones.predict_proba(Row { age: 3, active: &[1] }).is_err());
    }

    #[test]
    fn json_dump_round_trips() {
        let labels = vec![1, 0, 1, 0];
        let m = matrix(vec![50, 51, 60, 30], vec![vec![1], vec![], vec![1], vec![]], labels.clone(), 2);
        let f = train_forest(&m, &labels, &ForestParams { n_trees: 3, ..ForestParams::default() }).unwrap();
        let back: Forest = serde_json::from_str(&f.to_json().unwrap()).unwrap();
        assert_eq!(back, f);
    }
}
