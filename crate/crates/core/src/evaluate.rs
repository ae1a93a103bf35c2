//! Pair-preserving cross-validation, AUC, and summaries of AUC distributions.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ehr::Code;
use crate::error::{Error, Result};
use crate::forest::{train_forest, ForestParams};
use crate::rng::{mix, rng_from};
use crate::tabulate::FeatureMatrix;

pub const DEFAULT_FOLDS: usize = 10;
pub const DEFAULT_FLAG_THRESHOLD: f64 = 0.9167;
pub const KDE_POINTS: usize = 512;
/// Grid half-margin, in bandwidths, beyond the sample extremes.
const KDE_MARGIN: f64 = 4.0;

/// Assignment of matched pairs to folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    /// `assignment[pair]` is the fold id of that pair.
    pub assignment: Vec<usize>,
}

impl FoldPlan {
    pub fn pairs_in(&self, fold: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter(move |&(_, &f)| f == fold)
            .map(|(p, _)| p)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Shuffles pair indices with a seeded generator and deals them round-robin.
pub fn make_folds(n_pairs: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config("k must be >= 2".into()));
    }
    if n_pairs < k {
        return Err(Error::TooFewPairs { n_pairs, k });
    }
    let mut order: Vec<usize> = (0..n_pairs).collect();
    order.shuffle(&mut rng_from(seed));
    let mut assignment = vec![0; n_pairs];
    for (i, &pair) in order.iter().enumerate() {
        assignment[pair] = i % k;
    }
    Ok(FoldPlan { k, assignment })
}

fn check_binary(scores: &[f64], labels: &[u8]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::Config("scores and labels differ in length".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.iter().filter(|&&l| l == 0).count() as u64;
    if pos + neg != labels.len() as u64 {
        return Err(Error::Config("labels must be 0 or 1".into()));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::Empty("one class"));
    }
    Ok((pos, neg))
}

fn sorted_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    order
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let order = sorted_by_score(scores);
    // twice the U statistic, kept integral
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut q) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                p += 1;
            } else {
                q += 1;
            }
            j += 1;
        }
        twice_u += 2 * p * neg_below + p * q;
        neg_below += q;
        i = j;
    }
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// Empirical ROC curve as `(fpr, tpr)` points from (0,0) to (1,1), one point
/// per distinct score threshold.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order = sorted_by_score(scores);
    order.reverse();
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

pub fn trapezoid_auc(curve: &[(f64, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Cross-validated outcome of one (generic, window) model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub generic: Code,
    pub window_days: u32,
    pub n_pairs: usize,
    pub n_features_postfilter: usize,
    pub fold_aucs: Vec<f64>,
    pub mean_auc: f64,
    pub std_auc: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains on every fold but one and scores the held-out fold. Pair `i`
/// occupies rows `2i` and `2i + 1`, so both members always share a fold.
pub fn cross_validate(
    matrix: &FeatureMatrix,
    labels: &[u8],
    plan: &FoldPlan,
    params: &ForestParams,
) -> Result<ModelResult> {
    if matrix.n_rows() != 2 * plan.assignment.len() || labels.len() != matrix.n_rows() {
        return Err(Error::Config(format!(
            "table has {} rows, {} labels, plan covers {} pairs",
            matrix.n_rows(),
            labels.len(),
            plan.assignment.len()
        )));
    }
    let mut fold_aucs = Vec::with_capacity(plan.k);
    for fold in 0..plan.k {
        let (mut train_rows, mut test_rows) = (Vec::new(), Vec::new());
        for (pair, &f) in plan.assignment.iter().enumerate() {
            let rows = if f == fold { &mut test_rows } else { &mut train_rows };
            rows.extend([2 * pair, 2 * pair + 1]);
        }
        let train = matrix.select_rows(&train_rows);
        let train_labels: Vec<u8> = train_rows.iter().map(|&r| labels[r]).collect();
        let test = matrix.select_rows(&test_rows);
        let test_labels: Vec<u8> = test_rows.iter().map(|&r| labels[r]).collect();

        let fold_params = ForestParams {
            seed: mix(params.seed, fold as u64),
            ..params.clone()
        };
        let forest = train_forest(&train, &train_labels, &fold_params)?;
        let scores = forest.predict_matrix(&test)?;
        let fold_auc = auc(&scores, &test_labels).map_err(|_| Error::DegenerateFold(fold))?;
        fold_aucs.push(fold_auc);
    }
    let (mean_auc, std_auc) = mean_std(&fold_aucs);
    Ok(ModelResult {
        generic: matrix.generic,
        window_days: matrix.window_days,
        n_pairs: plan.assignment.len(),
        n_features_postfilter: matrix.n_features(),
        fold_aucs,
        mean_auc,
        std_auc,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl KdeCurve {
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
            .sum()
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman's rule: `0.9 * min(sd, IQR / 1.34) * n^(-1/5)`, falling back to
/// `sd * n^(-1/5)` when the IQR is zero.
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Empty("fewer than two values"));
    }
    if values.iter().all(|&v| v == values[0]) {
        return Err(Error::ZeroVariance);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let factor = n.powf(-0.2);
    Ok(if iqr > 0.0 {
        0.9 * sd.min(iqr / 1.34) * factor
    } else {
        sd * factor
    })
}

pub fn gaussian_density(x: f64, values: &[f64], bandwidth: f64) -> f64 {
    let norm = 1.0 / (values.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    norm * values
        .iter()
        .map(|v| {
            let u = (x - v) / bandwidth;
            (-0.5 * u * u).exp()
        })
        .sum::<f64>()
}

/// Gaussian KDE on 512 evenly spaced points spanning the sample plus four
/// bandwidths on each side.
pub fn kde_curve(values: &[f64], bandwidth: Option<f64>) -> Result<KdeCurve> {
    if values.len() < 2 {
        return Err(Error::Empty("fewer than two values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("non-finite value".into()));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(_) => return Err(Error::Config("bandwidth must be positive".into())),
        None => silverman_bandwidth(values)?,
    };
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min) - KDE_MARGIN * h;
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max) + KDE_MARGIN * h;
    let step = (hi - lo) / (KDE_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..KDE_POINTS).map(|i| lo + step * i as f64).collect();
    let density = grid.iter().map(|&x| gaussian_density(x, values, h)).collect();
    Ok(KdeCurve {
        grid,
        density,
        bandwidth: h,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Mean and population std of `mean_auc` across the models of one window.
pub fn window_summary(results: &[ModelResult]) -> Result<WindowSummary> {
    if results.is_empty() {
        return Err(Error::Empty("results"));
    }
    let aucs: Vec<f64> = results.iter().map(|r| r.mean_auc).collect();
    let (mean, std) = mean_std(&aucs);
    Ok(WindowSummary {
        mean,
        std,
        count: results.len(),
    })
}

/// Generics whose mean AUC reaches `threshold`, highest first.
pub fn flag_separable(results: &[ModelResult], threshold: f64) -> Vec<Code> {
    let mut hits: Vec<&ModelResult> = results.iter().filter(|r| r.mean_auc >= threshold).collect();
    hits.sort_by(|a, b| {
        b.mean_auc
            .partial_cmp(&a.mean_auc)
            .unwrap_or(Ordering::Equal)
            .then(a.generic.cmp(&b.generic))
    });
    hits.into_iter().map(|r| r.generic).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if si > sj {
                        num += 1.0;
                    } else if si == sj {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 1, 0]).unwrap(), 0.5);
        let s = [0.1, 0.4, 0.35, 0.8];
        let l = [0, 0, 1, 1];
        assert_eq!(pairwise_auc(&s, &l), 0.75);
        assert_eq!(auc(&s, &l).unwrap(), 0.75);
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn roc_trapezoid_matches_rank_form() {
        let s = [0.1, 0.4, 0.35, 0.8, 0.4, 0.4];
        let l = [0, 0, 1, 1, 1, 0];
        let t = trapezoid_auc(&roc_curve(&s, &l).unwrap());
        assert!((t - auc(&s, &l).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn fold_balance() {
        let p = make_folds(10, 10, 1).unwrap();
        assert_eq!(p.fold_sizes(), vec![1; 10]);
        let p = make_folds(23, 10, 1).unwrap();
        let mut sizes = p.fold_sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 2, 2, 2, 2, 2, 3, 3, 3]);
        assert_eq!(make_folds(23, 10, 1).unwrap(), p);
        assert!(matches!(make_folds(9, 10, 1), Err(Error::TooFewPairs { .. })));
    }

    #[test]
    fn kde_symmetry_and_mass() {
        let eps = 0.01;
        let k = kde_curve(&[0.5, 0.5 + eps], Some(0.1)).unwrap();
        let center = 0.5 + eps / 2.0;
        for (x, d) in k.grid.iter().zip(&k.density) {
            let mirror = gaussian_density(2.0 * center - x, &[0.5, 0.5 + eps], 0.1);
            assert!((d - mirror).abs() < 1e-12);
        }
        assert!((k.integral() - 1.0).abs() < 1e-3);
        assert_eq!(k.grid.len(), KDE_POINTS);
        assert!(matches!(kde_curve(&[0.7, 0.7, 0.7], None), Err(Error::ZeroVariance)));
        assert!(kde_curve(&[0.7, 0.7], Some(0.05)).is_ok());
    }

    #[test]
    fn summaries() {
        let r = |g, m| ModelResult {
            generic: g,
            window_days: 30,
            n_pairs: 10,
            n_features_postfilter: 3,
            fold_aucs: vec![m],
            mean_auc: m,
            std_auc: 0.0,
        };
        assert_eq!(
            window_summary(&[r(1, 0.7)]).unwrap(),
            WindowSummary { mean: 0.7, std: 0.0, count: 1 }
        );
        let s = window_summary(&[r(1, 0.6), r(2, 0.8)]).unwrap();
        assert!((s.mean - 0.7).abs() < 1e-15 && (s.std - 0.1).abs() < 1e-15 && s.count == 2);
        assert!(window_summary(&[]).is_err());

        let rs = [r(1, 0.95), r(2, 0.90), r(3, 0.92)];
        assert_eq!(flag_separable(&rs, 0.9167), vec![1, 3]);
        assert!(flag_separable(&rs, 1.01).is_empty());
    }
}
