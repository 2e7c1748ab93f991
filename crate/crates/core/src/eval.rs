//! Evaluation metrics: MCC with optimal permutation matching, target-domain
//! prediction quality and label-distribution KL.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Task};
use crate::error::{Error, Result};
use crate::lcsvae::{Model, Prediction};

/// Above this size `match_components` switches from enumeration to the
/// Hungarian algorithm.
pub const EXHAUSTIVE_MAX_DIM: usize = 8;

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid(format!(
            "pearson needs two series of equal length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::invalid("pearson: zero variance series"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Row `i` is matched to column `perm[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    pub perm: Vec<usize>,
    pub scores: Vec<f64>,
    pub total: f64,
}

fn check_square(m: &[Vec<f64>]) -> Result<usize> {
    let d = m.len();
    if d == 0 || m.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("match_components needs a non-empty square matrix"));
    }
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("match_components: non-finite score"));
    }
    Ok(d)
}

fn matching_from(m: &[Vec<f64>], perm: Vec<usize>) -> Matching {
    let scores: Vec<f64> = perm.iter().enumerate().map(|(i, &j)| m[i][j]).collect();
    let total = scores.iter().sum();
    Matching { perm, scores, total }
}

/// Permutation maximizing the total matched score.
pub fn match_components(scores: &[Vec<f64>]) -> Result<Matching> {
    let d = check_square(scores)?;
    if d <= EXHAUSTIVE_MAX_DIM {
        match_exhaustive(scores)
    } else {
        match_hungarian(scores)
    }
}

/// Enumerates every permutation in lexicographic order, keeping the first
/// best one.
pub fn match_exhaustive(scores: &[Vec<f64>]) -> Result<Matching> {
    let d = check_square(scores)?;
    let mut perm: Vec<usize> = (0..d).collect();
    let mut best = perm.clone();
    let mut best_total = f64::NEG_INFINITY;
    loop {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| scores[i][j]).sum();
        if total > best_total {
            best_total = total;
            best.clone_from(&perm);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(matching_from(scores, best))
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Maximum-weight assignment via the O(n³) potentials formulation of the
/// Hungarian algorithm.
pub fn match_hungarian(scores: &[Vec<f64>]) -> Result<Matching> {
    let n = check_square(scores)?;
    let top = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    // 1-based arrays; column 0 is the virtual start.
    let cost = |i: usize, j: usize| top - scores[i - 1][j - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    Ok(matching_from(scores, perm))
}

/// Mean absolute Pearson correlation between matched columns of `truth`
/// and `estimate` (both `n × d`, rows are samples).
pub fn mcc(truth: &[Vec<f64>], estimate: &[Vec<f64>]) -> Result<(f64, Matching)> {
    let n = truth.len();
    let d = truth.first().map_or(0, Vec::len);
    if n < 3 || estimate.len() != n || d == 0 {
        return Err(Error::invalid(format!(
            "mcc needs matching n x d inputs with n >= 3 (got {n} and {})",
            estimate.len()
        )));
    }
    if truth.iter().chain(estimate).any(|r| r.len() != d) {
        return Err(Error::invalid("mcc: inconsistent column counts"));
    }
    let col = |m: &[Vec<f64>], j: usize| m.iter().map(|r| r[j]).collect::<Vec<_>>();
    let tcols: Vec<Vec<f64>> = (0..d).map(|j| col(truth, j)).collect();
    let ecols: Vec<Vec<f64>> = (0..d).map(|j| col(estimate, j)).collect();
    let mut corr = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            corr[i][j] = pearson(&tcols[i], &ecols[j])
                .map_err(|_| Error::invalid(format!("mcc: constant column (true {i} / est {j})")))?
                .abs();
        }
    }
    let m = match_components(&corr)?;
    Ok((m.total / d as f64, m))
}

/// `Σ p_k ln(p_k / q_k)`, infinite when `q_k = 0 < p_k`.
pub fn label_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::invalid("label_kl: distributions over different supports"));
    }
    if p.iter().chain(q).any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid("label_kl: entries must be finite and non-negative"));
    }
    let mut kl = 0.0;
    for (&pk, &qk) in p.iter().zip(q) {
        if pk == 0.0 {
            continue;
        }
        if qk == 0.0 {
            return Ok(f64::INFINITY);
        }
        kl += pk * (pk / qk).ln();
    }
    Ok(kl.max(0.0))
}

pub fn r_squared(truth: &[f64], pred: &[f64]) -> Result<f64> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::invalid("r_squared: length mismatch"));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::invalid("r_squared: constant targets"));
    }
    Ok(1.0 - ss_res / ss_tot)
}

pub fn accuracy(truth: &[usize], pred: &[usize]) -> Result<f64> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::invalid("accuracy: length mismatch"));
    }
    let hits = truth.iter().zip(pred).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Target-domain quality of anything that predicts from `(x, domain)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMetric {
    R2(f64),
    Accuracy(f64),
}

impl TargetMetric {
    pub fn value(self) -> f64 {
        match self {
            TargetMetric::R2(v) | TargetMetric::Accuracy(v) => v,
        }
    }
}

/// Scores `predict` on the target rows against their withheld labels.
pub fn target_metric_with<F>(ds: &Dataset, mut predict: F) -> Result<TargetMetric>
where
    F: FnMut(&[f64], usize) -> Result<Prediction>,
{
    let idx = ds.target_indices();
    if idx.is_empty() {
        return Err(Error::invalid("dataset has no target domain rows"));
    }
    let mut truth = Vec::with_capacity(idx.len());
    let mut preds = Vec::with_capacity(idx.len());
    for &i in &idx {
        let label = ds.eval_labels[i]
            .ok_or_else(|| Error::invalid(format!("target row {i} has no withheld label")))?;
        truth.push(label);
        preds.push(predict(&ds.samples[i].x, ds.samples[i].domain)?);
    }
    match ds.task {
        Task::Regression => {
            let t: Vec<f64> = truth.iter().map(|l| l.as_f64()).collect();
            let p: Vec<f64> = preds.iter().map(Prediction::point).collect();
            Ok(TargetMetric::R2(r_squared(&t, &p)?))
        }
        Task::Classification { .. } => {
            let t: Vec<usize> = truth
                .iter()
                .map(|l| l.class().ok_or_else(|| Error::invalid("regression label in classification task")))
                .collect::<Result<_>>()?;
            let p: Vec<usize> = preds.iter().map(Prediction::argmax).collect();
            Ok(TargetMetric::Accuracy(accuracy(&t, &p)?))
        }
    }
}

pub fn target_metrics(model: &Model, ds: &Dataset) -> Result<TargetMetric> {
    target_metric_with(ds, |x, u| model.predict(x, u))
}

/// MCC between true `n_c` and the posterior mean of `n_c` over all rows.
pub fn content_mcc(model: &Model, ds: &Dataset) -> Result<(f64, Matching)> {
    let latents = ds
        .latents
        .as_ref()
        .ok_or_else(|| Error::invalid("dataset has no ground-truth latents"))?;
    let truth: Vec<Vec<f64>> = latents.iter().map(|l| l.n_c.clone()).collect();
    let est = model.content_means(ds)?;
    mcc(&truth, &est)
}

/// Empirical label distribution per domain (using withheld labels too).
pub fn label_distributions(ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    let counts = ds.class_counts()?;
    Ok(counts
        .iter()
        .map(|row| {
            let n: usize = row.iter().sum();
            row.iter()
                .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
                .collect()
        })
        .collect())
}

pub fn label_kl_matrix(dists: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    dists
        .iter()
        .map(|p| dists.iter().map(|q| label_kl(p, q)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mcc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matching: Option<Matching>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_r2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
    /// Pairwise label KL between domains; empty for regression tasks.
    pub label_kl_matrix: Vec<Vec<f64>>,
}

pub fn report(model: &Model, ds: &Dataset) -> Result<MetricReport> {
    let (mcc, matching) = match ds.latents {
        Some(_) => {
            let (m, matching) = content_mcc(model, ds)?;
            (Some(m), Some(matching))
        }
        None => (None, None),
    };
    let has_target_labels = ds
        .target_indices()
        .iter()
        .any(|&i| ds.eval_labels[i].is_some());
    let tm = if has_target_labels {
        Some(target_metrics(model, ds)?)
    } else {
        None
    };
    let label_kl_matrix = match ds.task {
        Task::Classification { .. } => label_kl_matrix(&label_distributions(ds)?)?,
        Task::Regression => Vec::new(),
    };
    Ok(MetricReport {
        mcc,
        matching,
        target_r2: match tm {
            Some(TargetMetric::R2(v)) => Some(v),
            _ => None,
        },
        target_accuracy: match tm {
            Some(TargetMetric::Accuracy(v)) => Some(v),
            _ => None,
        },
        label_kl_matrix,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_basics() {
        let a = [1.0, 2.0, 3.0, 5.0];
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        let r = pearson(&[1.0, -1.0, 1.0, -1.0], &[1.0, 1.0, -1.0, -1.0]).unwrap();
        assert_eq!(r, 0.0);
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn matching_small_cases() {
        let id = vec![vec![0.9, 0.1, 0.2], vec![0.0, 0.8, 0.3], vec![0.1, 0.2, 0.7]];
        assert_eq!(match_components(&id).unwrap().perm, vec![0, 1, 2]);
        let swap = vec![vec![0.1, 0.9], vec![0.8, 0.2]];
        let m = match_components(&swap).unwrap();
        assert_eq!(m.perm, vec![1, 0]);
        assert!((m.total - 1.7).abs() < 1e-15);
        assert!(match_components(&[vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn hungarian_agrees_with_enumeration() {
        use rand::Rng;
        let mut rng = crate::rng::stream(1, "match-test", 0);
        for _ in 0..200 {
            let d = rng.random_range(1..=6);
            let m: Vec<Vec<f64>> = (0..d)
                .map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect();
            let a = match_exhaustive(&m).unwrap();
            let b = match_hungarian(&m).unwrap();
            assert!((a.total - b.total).abs() < 1e-12, "{m:?}");
        }
    }

    #[test]
    fn hungarian_used_above_eight() {
        let d = 10;
        let m: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| if j == (i + 3) % d { 1.0 } else { 0.1 }).collect())
            .collect();
        let r = match_components(&m).unwrap();
        assert_eq!(r.perm, (0..d).map(|i| (i + 3) % d).collect::<Vec<_>>());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(label_kl(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        let direct = 0.5 * (0.5_f64 / 0.25).ln() + 0.5 * (0.5_f64 / 0.75).ln();
        let kl = label_kl(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((kl - direct).abs() < 1e-15);
        assert!((kl - 0.14384).abs() < 1e-5);
        assert!(label_kl(&[1.0, 0.0], &[0.0, 1.0]).unwrap().is_infinite());
        assert!(label_kl(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn r2_definition() {
        let t = [1.0, 2.0, 4.0];
        assert_eq!(r_squared(&t, &t).unwrap(), 1.0);
        let mean = 7.0 / 3.0;
        assert!(r_squared(&t, &[mean; 3]).unwrap().abs() < 1e-15);
        assert!(r_squared(&t, &[10.0; 3]).unwrap() < 0.0);
        assert_eq!(accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
    }
}
