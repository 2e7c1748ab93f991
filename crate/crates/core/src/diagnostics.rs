//! Finite-difference checks over every differentiable op and every loss.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Label, LabeledSample, Task};
use crate::error::{Error, Result};
use crate::lcsvae::{kl_gaussian_vars, Batch, Bound, GaussVars, Model, ModelConfig, Preset};
use crate::ndiff::{grad_check, Graph, NdiffError, OpKind, Tensor, Var};
use crate::rng::stream;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const FD_EPS: f64 = 1e-5;
const TRIALS_PER_OP: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    /// Worst relative error per op over several random points.
    pub ops: BTreeMap<String, f64>,
    pub losses: BTreeMap<String, f64>,
    pub max_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

/// Draws away from `kinks` so the finite difference never straddles one.
fn away_from(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64, kinks: &[f64]) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| loop {
            let v: f64 = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > 1e-2) {
                break v;
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

fn to_ndiff(e: Error) -> NdiffError {
    match e {
        Error::Ndiff(n) => n,
        other => NdiffError::InvalidArgument(other.to_string()),
    }
}

/// Random points for `kind`, with a fixed weight matrix that turns the op's
/// output into a scalar.
fn op_case(kind: OpKind, rng: &mut impl Rng) -> (Vec<Tensor>, Tensor) {
    let (r, c) = (3, 4);
    let inputs = match kind {
        OpKind::MatMul => vec![uniform(rng, r, 5, -1.0, 1.0), uniform(rng, 5, c, -1.0, 1.0)],
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            vec![uniform(rng, r, c, -1.0, 1.0), uniform(rng, 1, c, -1.0, 1.0)]
        }
        OpKind::Div => vec![uniform(rng, r, c, -1.0, 1.0), uniform(rng, r, c, 0.5, 2.0)],
        OpKind::Log => vec![uniform(rng, r, c, 0.2, 3.0)],
        OpKind::LeakyRelu => vec![away_from(rng, r, c, -2.0, 2.0, &[0.0])],
        OpKind::Clamp { lo, hi } => vec![away_from(rng, r, c, -2.0, 2.0, &[lo, hi])],
        OpKind::ConcatCols => vec![uniform(rng, r, 2, -1.0, 1.0), uniform(rng, r, 3, -1.0, 1.0)],
        _ => vec![uniform(rng, r, c, -2.0, 2.0)],
    };
    let out_cols = match kind {
        OpKind::ConcatCols => 5,
        OpKind::SliceCols { start, end } => end - start,
        _ => c,
    };
    let weight = uniform(rng, r, out_cols, -1.0, 1.0);
    (inputs, weight)
}

pub fn all_ops() -> Vec<OpKind> {
    vec![
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Tanh,
        OpKind::LeakyRelu,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Square,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SoftmaxRows,
        OpKind::LogSoftmaxRows,
        OpKind::ConcatCols,
        OpKind::SliceCols { start: 1, end: 3 },
        OpKind::Clamp { lo: -0.5, hi: 0.5 },
    ]
}

pub fn check_op(kind: OpKind, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS_PER_OP {
        let mut rng = stream(seed, kind.name(), trial);
        let (inputs, weight) = op_case(kind, &mut rng);
        let err = grad_check(
            |g: &mut Graph, v: &[Var]| {
                let out = g.apply(kind, v)?;
                if matches!(kind, OpKind::Sum | OpKind::Mean) {
                    return Ok(out);
                }
                let w = g.constant(weight.clone());
                let prod = g.mul(out, w)?;
                g.sum(prod)
            },
            &inputs,
            FD_EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn toy_dataset(task: Task, seed: u64) -> Dataset {
    let mut rng = stream(seed, "gradcheck_data", 0);
    let samples: Vec<LabeledSample> = (0..12)
        .map(|i| {
            let domain = i % 3;
            let y = match task {
                Task::Regression => Label::Value(rng.random_range(-2.0..2.0)),
                Task::Classification { num_classes } => Label::Class(rng.random_range(0..num_classes)),
            };
            LabeledSample {
                x: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                y: (domain != 2).then_some(y),
                domain,
            }
        })
        .collect();
    let eval_labels = samples.iter().map(|s| s.y).collect();
    Dataset {
        task,
        num_domains: 3,
        target_domain: Some(2),
        samples,
        latents: None,
        eval_labels,
    }
}

/// Finite-difference errors of each loss term over all model parameters,
/// for both a regression and a classification model.
pub fn check_losses(seed: u64) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (tag, task) in [
        ("regression", Task::Regression),
        ("classification", Task::Classification { num_classes: 3 }),
    ] {
        let mut cfg = ModelConfig::preset(Preset::Synthetic, 3, 1, 2, 3, task);
        cfg.hidden = 5;
        if task != Task::Regression {
            cfg.gamma = 0.3;
        }
        let model = Model::init(cfg, seed)?;
        let ds = toy_dataset(task, seed);
        let ell = model.config().latent_dim();
        let mut rng = stream(seed, "gradcheck_eps", 0);
        let src = Batch::from_dataset(&ds, &ds.labeled_indices()[..5], ell, &mut rng)?;
        let tgt = Batch::from_dataset(&ds, &ds.target_indices(), ell, &mut rng)?;
        type Term<'a> = Box<dyn Fn(&mut Graph, &Bound) -> Result<Var> + 'a>;
        let mut terms: Vec<(&str, Term)> = vec![
            ("elbo", Box::new(|g, b| model.loss_elbo(g, b, &src))),
            (
                "mi",
                Box::new(|g, b| {
                    let f = model.forward_batch(g, b, &src)?;
                    model.loss_mi(g, b, &f, &src)
                }),
            ),
            ("objective", Box::new(|g, b| Ok(model.total_objective(g, b, &src, &tgt)?.total))),
        ];
        if task != Task::Regression {
            terms.push((
                "entropy",
                Box::new(|g, b| {
                    let f = model.forward_batch(g, b, &tgt)?;
                    model.loss_entropy(g, b, &f)
                }),
            ));
        }
        for (name, term) in &terms {
            let err = grad_check(
                |g, vars| term(g, &Bound { vars: vars.to_vec() }).map_err(to_ndiff),
                model.params(),
                FD_EPS,
            )?;
            out.insert(format!("{name}_{tag}"), err);
        }
    }
    let mut rng = stream(seed, "gradcheck_kl", 0);
    let point: Vec<Tensor> = (0..4).map(|_| uniform(&mut rng, 2, 3, -1.5, 1.5)).collect();
    let err = grad_check(
        |g, v| {
            let q = GaussVars { mean: v[0], log_var: v[1] };
            let p = GaussVars { mean: v[2], log_var: v[3] };
            kl_gaussian_vars(g, &q, &p).map_err(to_ndiff)
        },
        &point,
        FD_EPS,
    )?;
    out.insert("kl_gaussian".into(), err);
    Ok(out)
}

pub fn gradcheck_report(seed: u64) -> Result<GradcheckReport> {
    let mut ops = BTreeMap::new();
    for kind in all_ops() {
        ops.insert(kind.name().to_string(), check_op(kind, seed)?);
    }
    let losses = check_losses(seed)?;
    let max_error = ops.values().chain(losses.values()).cloned().fold(0.0, f64::max);
    Ok(GradcheckReport {
        ops,
        losses,
        max_error,
        tolerance: GRADCHECK_TOLERANCE,
        pass: max_error < GRADCHECK_TOLERANCE,
    })
}
