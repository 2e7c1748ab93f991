//! Label-shift resampling: pick per-domain class marginals with a prescribed
//! pairwise KL, then subsample a labeled dataset to match them.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Label, Task};
use crate::error::{Error, Result};
use crate::eval::label_kl;
use crate::ndiff::{Adam, AdamState, Graph, Tensor, Var};
use crate::rng::stream;

/// Every marginal entry is at least this large.
pub const MIN_MASS: f64 = 1e-6;
/// Largest accepted `|KL − target|` over ordered pairs.
pub const KL_TOLERANCE: f64 = 0.05;
/// The solver stops early once the residual drops below this.
const CONVERGED: f64 = 1e-3;
const MAX_ITERATIONS: usize = 4000;
const RESTARTS: usize = 5;
const DIRICHLET_ALPHA: f64 = 5.0;
const SOLVER_LR: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResampleSpec {
    pub num_domains: usize,
    pub num_classes: usize,
    pub target_kl: f64,
    pub seed: u64,
}

impl ResampleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains == 0 {
            return Err(Error::config("resample.num_domains", "must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("resample.num_classes", "must be positive"));
        }
        if !(self.target_kl >= 0.0 && self.target_kl.is_finite()) {
            return Err(Error::config("resample.target_kl", "must be finite and non-negative"));
        }
        if self.num_classes == 1 && self.target_kl > 0.0 {
            return Err(Error::config(
                "resample.target_kl",
                "a single class always gives KL 0; a positive target is infeasible",
            ));
        }
        if MIN_MASS * self.num_classes as f64 >= 1.0 {
            return Err(Error::config("resample.num_classes", "too many classes for the mass floor"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalSet {
    pub distributions: Vec<Vec<f64>>,
    /// `kl_matrix[i][j] = KL(p_i ‖ p_j)`.
    pub kl_matrix: Vec<Vec<f64>>,
    pub target_kl: f64,
    /// `max_{i≠j} |KL(p_i ‖ p_j) − target_kl|`.
    pub max_residual: f64,
}

impl MarginalSet {
    /// Builds the set from explicit distributions and recomputes the KLs.
    pub fn from_distributions(distributions: Vec<Vec<f64>>, target_kl: f64) -> Result<Self> {
        let c = distributions.first().map_or(0, Vec::len);
        if c == 0 || distributions.iter().any(|p| p.len() != c) {
            return Err(Error::invalid("marginals must be non-empty and share one support"));
        }
        for (u, p) in distributions.iter().enumerate() {
            let s: f64 = p.iter().sum();
            if p.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("marginal {u} is not a distribution")));
            }
        }
        let kl_matrix: Vec<Vec<f64>> = distributions
            .iter()
            .map(|p| distributions.iter().map(|q| label_kl(p, q)).collect())
            .collect::<Result<_>>()?;
        let max_residual = residual(&kl_matrix, target_kl);
        Ok(Self {
            distributions,
            kl_matrix,
            target_kl,
            max_residual,
        })
    }
}

fn residual(kl: &[Vec<f64>], target: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in kl.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                worst = worst.max((v - target).abs());
            }
        }
    }
    worst
}

/// `p = MIN_MASS + (1 − C·MIN_MASS)·softmax(scores)`.
fn marginal_vars(g: &mut Graph, scores: &[Var], c: usize) -> Result<(Vec<Var>, Vec<Var>)> {
    let slack = 1.0 - c as f64 * MIN_MASS;
    let floor = g.constant(Tensor::filled(&[1, c], MIN_MASS)?);
    let mut ps = Vec::with_capacity(scores.len());
    let mut logs = Vec::with_capacity(scores.len());
    for &s in scores {
        let sm = g.softmax_rows(s)?;
        let sm = g.scale(sm, slack)?;
        let p = g.add(sm, floor)?;
        logs.push(g.log(p)?);
        ps.push(p);
    }
    Ok((ps, logs))
}

fn solve_once(spec: &ResampleSpec, attempt: u64) -> Result<(Vec<Vec<f64>>, f64)> {
    let (k, c, t) = (spec.num_domains, spec.num_classes, spec.target_kl);
    let mut rng = stream(spec.seed, "marginal_init", attempt);
    let gamma = Gamma::new(DIRICHLET_ALPHA, 1.0).expect("valid gamma parameters");
    let mut params: Vec<Tensor> = (0..k)
        .map(|_| {
            let draws: Vec<f64> = (0..c).map(|_| rng.sample(gamma)).collect();
            let total: f64 = draws.iter().sum();
            Tensor::matrix(1, c, draws.iter().map(|d| (d / total).ln()).collect())
        })
        .collect::<std::result::Result<_, _>>()?;
    let adam = Adam::with_lr(SOLVER_LR);
    let mut state = AdamState::new(&params);
    let mut best: Option<(Vec<Vec<f64>>, f64)> = None;
    for _ in 0..MAX_ITERATIONS {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let (ps, logs) = marginal_vars(&mut g, &vars, c)?;
        let mut loss: Option<Var> = None;
        let mut kl = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                let d = g.sub(logs[i], logs[j])?;
                let w = g.mul(ps[i], d)?;
                let kl_ij = g.sum(w)?;
                kl[i][j] = g.value(kl_ij).item()?;
                let tv = g.scalar(t);
                let r = g.sub(kl_ij, tv)?;
                let sq = g.square(r)?;
                loss = Some(match loss {
                    Some(l) => g.add(l, sq)?,
                    None => sq,
                });
            }
        }
        let res = residual(&kl, t);
        if best.as_ref().is_none_or(|(_, b)| res < *b) {
            let dists = ps.iter().map(|&p| g.value(p).data().to_vec()).collect();
            best = Some((dists, res));
        }
        if res < CONVERGED {
            break;
        }
        let Some(loss) = loss else { break };
        let mut grads = g.backward(loss)?;
        let grads: Vec<Vec<f64>> = vars.iter().map(|&v| grads.take(v).expect("trainable")).collect();
        adam.step(&mut params, &grads, &mut state)?;
    }
    Ok(best.expect("at least one iteration"))
}

/// Finds `K` class marginals whose ordered-pair KLs all sit near the target.
pub fn solve_marginals(spec: &ResampleSpec) -> Result<MarginalSet> {
    spec.validate()?;
    let (k, c) = (spec.num_domains, spec.num_classes);
    if spec.target_kl == 0.0 || k == 1 {
        return MarginalSet::from_distributions(vec![vec![1.0 / c as f64; c]; k], spec.target_kl);
    }
    let mut best_residual = f64::INFINITY;
    for attempt in 0..RESTARTS as u64 {
        let (dists, _) = solve_once(spec, attempt)?;
        let set = MarginalSet::from_distributions(dists, spec.target_kl)?;
        if set.max_residual <= KL_TOLERANCE {
            return Ok(set);
        }
        best_residual = best_residual.min(set.max_residual);
    }
    Err(Error::NoConvergence {
        what: "solve_marginals",
        iterations: MAX_ITERATIONS * RESTARTS,
        residual: best_residual,
    })
}

/// A subsampled dataset plus the rows it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Resampled {
    pub dataset: Dataset,
    /// Indices into the input, ascending.
    pub indices: Vec<usize>,
    /// The scale `N_u` chosen for each domain.
    pub scales: Vec<usize>,
    /// `counts[u][k] = ⌊N_u·p_u(k)⌋`.
    pub counts: Vec<Vec<usize>>,
}

fn per_class_count(n: usize, p: f64) -> usize {
    (n as f64 * p).floor() as usize
}

/// Largest `N` with `⌊N·p_k⌋ ≤ available_k` for every class.
pub fn domain_scale(p: &[f64], available: &[usize]) -> usize {
    let mut n = usize::MAX;
    for (&pk, &ak) in p.iter().zip(available) {
        if pk <= 0.0 {
            continue;
        }
        let guess = ((ak as f64 + 1.0) / pk).ceil();
        let mut m = if guess >= 1e18 { usize::MAX / 2 } else { guess as usize };
        // The float guess can be off by one either way.
        while m > 0 && per_class_count(m, pk) > ak {
            m -= 1;
        }
        while per_class_count(m + 1, pk) <= ak && m < usize::MAX / 2 {
            m += 1;
        }
        n = n.min(m);
    }
    n
}

fn row_class(ds: &Dataset, i: usize) -> Option<usize> {
    match ds.samples[i].y.or(ds.eval_labels[i]) {
        Some(Label::Class(c)) => Some(c),
        _ => None,
    }
}

/// Keeps `⌊N_u·p_u(k)⌋` rows of every class in every domain, chosen uniformly
/// without replacement. Classes with more than twice the mass floor must be
/// present in the input.
pub fn subsample(ds: &Dataset, marginals: &MarginalSet, seed: u64) -> Result<Resampled> {
    let Task::Classification { num_classes } = ds.task else {
        return Err(Error::invalid("subsample needs a classification dataset"));
    };
    if marginals.distributions.len() != ds.num_domains {
        return Err(Error::invalid(format!(
            "{} marginals for {} domains",
            marginals.distributions.len(),
            ds.num_domains
        )));
    }
    if marginals.distributions.iter().any(|p| p.len() != num_classes) {
        return Err(Error::invalid("marginals and dataset disagree on the class count"));
    }
    let mut pools = vec![vec![Vec::new(); num_classes]; ds.num_domains];
    for i in 0..ds.len() {
        let c = row_class(ds, i).ok_or_else(|| Error::invalid(format!("row {i} has no class label")))?;
        pools[ds.samples[i].domain][c].push(i);
    }
    let mut indices = Vec::new();
    let mut scales = Vec::with_capacity(ds.num_domains);
    let mut counts = Vec::with_capacity(ds.num_domains);
    for (u, (p, pool)) in marginals.distributions.iter().zip(&pools).enumerate() {
        for (k, (&pk, rows)) in p.iter().zip(pool).enumerate() {
            if rows.is_empty() && pk > 2.0 * MIN_MASS {
                return Err(Error::invalid(format!(
                    "domain {u} has no samples of class {k}, which its marginal requires (p = {pk})"
                )));
            }
        }
        let available: Vec<usize> = pool.iter().map(Vec::len).collect();
        let n = domain_scale(p, &available);
        let mut row_counts = Vec::with_capacity(num_classes);
        for (k, (&pk, rows)) in p.iter().zip(pool).enumerate() {
            let take = per_class_count(n, pk);
            let mut rows = rows.clone();
            rows.shuffle(&mut stream(seed, "subsample", (u * num_classes + k) as u64));
            indices.extend_from_slice(&rows[..take]);
            row_counts.push(take);
        }
        scales.push(n);
        counts.push(row_counts);
    }
    indices.sort_unstable();
    Ok(Resampled {
        dataset: ds.select(&indices),
        indices,
        scales,
        counts,
    })
}

/// Turns a regression dataset into `num_classes` classes by label quantiles
/// over every row (withheld labels included).
pub fn discretize(ds: &Dataset, num_classes: usize) -> Result<Dataset> {
    if ds.task != Task::Regression {
        return Err(Error::invalid("discretize expects a regression dataset"));
    }
    if num_classes < 2 {
        return Err(Error::config("resample.num_classes", "need at least 2 classes"));
    }
    let labels: Vec<f64> = (0..ds.len())
        .map(|i| {
            ds.samples[i]
                .y
                .or(ds.eval_labels[i])
                .map(Label::as_f64)
                .ok_or_else(|| Error::invalid(format!("row {i} has no label")))
        })
        .collect::<Result<_>>()?;
    let mut sorted = labels.clone();
    sorted.sort_by(f64::total_cmp);
    let edges: Vec<f64> = (1..num_classes)
        .map(|q| sorted[q * sorted.len() / num_classes])
        .collect();
    let class_of = |y: f64| edges.iter().filter(|&&e| y >= e).count();
    let mut out = ds.clone();
    out.task = Task::Classification { num_classes };
    for (i, s) in out.samples.iter_mut().enumerate() {
        let c = Label::Class(class_of(labels[i]));
        if s.y.is_some() {
            s.y = Some(c);
        }
        if out.eval_labels[i].is_some() {
            out.eval_labels[i] = Some(c);
        }
    }
    Ok(out)
}
