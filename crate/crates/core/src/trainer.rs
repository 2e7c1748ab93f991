//! Training loops: the domain-conditioned VAE and a plain ERM baseline.
//!
//! Every random draw is keyed on `(seed, epoch, step)`, so a run can be
//! stopped, checkpointed with [`TrainState`] and resumed without changing a
//! single bit of the result.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Label, Task};
use crate::error::{Error, Result};
use crate::eval::{self, TargetMetric};
use crate::lcsvae::{Batch, Checkpoint, LabelScaling, Model, ModelConfig, Prediction, Preset};
use crate::ndiff::{Adam, AdamState, Graph, Tensor, Var};
use crate::rng::{derive_seed, stream};

pub const TRAIN_STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub preset: Preset,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Epochs between history snapshots; the last epoch is always recorded.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-3,
            seed: 0,
            preset: Preset::Synthetic,
            beta: None,
            lambda: None,
            gamma: None,
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive and finite"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("train.eval_every", "must be at least 1"));
        }
        for (name, v) in [("beta", self.beta), ("lambda", self.lambda), ("gamma", self.gamma)] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::config(format!("train.{name}"), "must be finite and non-negative"));
                }
            }
        }
        Ok(())
    }

    /// Preset architecture for `ds` with the configured overrides applied.
    /// Regression labels are standardized with source-row statistics.
    pub fn model_config(&self, ds: &Dataset, d_c: usize, d_s: usize) -> Result<ModelConfig> {
        let mut c = ModelConfig::preset(self.preset, ds.d_x(), d_c, d_s, ds.num_domains, ds.task);
        c.label_scaling = source_label_scaling(ds)?;
        if let Some(b) = self.beta {
            c.beta = b;
        }
        if let Some(l) = self.lambda {
            c.lambda = l;
        }
        if let Some(g) = self.gamma {
            c.gamma = g;
        }
        c.validate()?;
        Ok(c)
    }
}

/// One history record; loss terms are means over the steps of that epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub epoch: usize,
    pub elbo: f64,
    pub mi: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub entropy: Option<f64>,
    pub objective: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mcc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target_metric: Option<TargetMetric>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub snapshots: Vec<Snapshot>,
}

impl History {
    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn last(&self) -> Option<&Snapshot> {
        self.snapshots.last()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for s in &self.snapshots {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut snapshots = Vec::new();
        for line in input.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                snapshots.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { snapshots })
    }
}

fn source_label_scaling(ds: &Dataset) -> Result<Option<LabelScaling>> {
    if ds.task != Task::Regression {
        return Ok(None);
    }
    let ys: Vec<f64> = ds.samples.iter().filter_map(|s| s.y.map(Label::as_f64)).collect();
    if ys.is_empty() {
        return Err(Error::invalid("no labeled source rows"));
    }
    LabelScaling::fit(&ys).map(Some)
}

fn shuffled_chunks(indices: &[usize], batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Row indices of `ds` split into batches, reshuffled per `(seed, epoch)`.
/// The last batch may be short.
pub fn minibatches(ds: &Dataset, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot batch an empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::config("train.batch_size", "must be at least 1"));
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    Ok(shuffled_chunks(&all, batch_size, &mut stream(seed, "minibatches", epoch as u64)))
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub format_version: u32,
    pub train_config: TrainConfig,
    pub model: Checkpoint,
    pub adam: AdamState,
    pub epochs_done: usize,
    pub history: History,
}

pub struct Trainer<'a> {
    ds: &'a Dataset,
    config: TrainConfig,
    model: Model,
    adam: Adam,
    state: AdamState,
    epochs_done: usize,
    history: History,
    source: Vec<usize>,
    target: Vec<usize>,
}

fn split_domains(ds: &Dataset) -> Result<(Vec<usize>, Vec<usize>)> {
    ds.validate()?;
    if ds.target_domain.is_none() {
        return Err(Error::invalid("training needs a target domain"));
    }
    let source = ds.labeled_indices();
    let target = ds.target_indices();
    if source.is_empty() {
        return Err(Error::invalid("no labeled source rows"));
    }
    if target.is_empty() {
        return Err(Error::invalid("the target domain has no rows"));
    }
    Ok((source, target))
}

impl<'a> Trainer<'a> {
    pub fn new(ds: &'a Dataset, config: TrainConfig, model_config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if model_config.d_x != ds.d_x() || model_config.num_domains != ds.num_domains || model_config.task != ds.task {
            return Err(Error::invalid("model config does not match the dataset"));
        }
        let (source, target) = split_domains(ds)?;
        let model = Model::init(model_config, derive_seed(config.seed, "model", 0))?;
        let state = AdamState::new(model.params());
        Ok(Self {
            ds,
            adam: Adam::with_lr(config.learning_rate),
            config,
            model,
            state,
            epochs_done: 0,
            history: History::default(),
            source,
            target,
        })
    }

    pub fn resume(ds: &'a Dataset, saved: TrainState) -> Result<Self> {
        if saved.format_version != TRAIN_STATE_VERSION {
            return Err(Error::invalid(format!(
                "unsupported train state format_version {}",
                saved.format_version
            )));
        }
        saved.train_config.validate()?;
        let (source, target) = split_domains(ds)?;
        let model = Model::from_checkpoint(&saved.model)?;
        let sizes_match = saved.adam.m.len() == model.params().len()
            && saved.adam.v.len() == model.params().len()
            && model
                .params()
                .iter()
                .zip(saved.adam.m.iter().zip(&saved.adam.v))
                .all(|(p, (m, v))| m.len() == p.numel() && v.len() == p.numel());
        if !sizes_match {
            return Err(Error::invalid("optimizer state does not match the model"));
        }
        Ok(Self {
            ds,
            adam: Adam::with_lr(saved.train_config.learning_rate),
            config: saved.train_config,
            model,
            state: saved.adam,
            epochs_done: saved.epochs_done,
            history: saved.history,
            source,
            target,
        })
    }

    pub fn save(&self) -> TrainState {
        TrainState {
            format_version: TRAIN_STATE_VERSION,
            train_config: self.config.clone(),
            model: self.model.to_checkpoint(),
            adam: self.state.clone(),
            epochs_done: self.epochs_done,
            history: self.history.clone(),
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn into_parts(self) -> (Model, History) {
        (self.model, self.history)
    }

    /// Runs until `config.epochs` epochs are done.
    pub fn run(&mut self) -> Result<()> {
        while self.epochs_done < self.config.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }

    /// Moves the stopping point; other settings stay as saved.
    pub fn set_epochs(&mut self, epochs: usize) -> Result<()> {
        if epochs < self.epochs_done {
            return Err(Error::config(
                "train.epochs",
                format!("{} epochs already done", self.epochs_done),
            ));
        }
        // The stopping epoch always gets a snapshot; drop it when the run goes
        // on so the history matches an uninterrupted one.
        let done = self.epochs_done;
        let off_grid = done % self.config.eval_every != 0;
        if epochs > done && off_grid && self.history.snapshots.last().is_some_and(|s| s.epoch == done) {
            self.history.snapshots.pop();
        }
        self.config.epochs = epochs;
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Runs at most `n` further epochs.
    pub fn run_epochs(&mut self, n: usize) -> Result<()> {
        for _ in 0..n {
            if self.epochs_done >= self.config.epochs {
                break;
            }
            self.run_epoch()?;
        }
        Ok(())
    }

    fn run_epoch(&mut self) -> Result<()> {
        let epoch = self.epochs_done;
        let seed = self.config.seed;
        let bs = self.config.batch_size;
        let e = epoch as u64;
        let src_batches = shuffled_chunks(&self.source, bs, &mut stream(seed, "source_batches", e));
        let tgt_batches = shuffled_chunks(&self.target, bs, &mut stream(seed, "target_batches", e));
        let ell = self.model.config().latent_dim();
        let has_entropy = matches!(self.ds.task, Task::Classification { .. });

        let mut sums = [0.0; 4];
        for (step, src_idx) in src_batches.iter().enumerate() {
            let tgt_idx = &tgt_batches[step % tgt_batches.len()];
            let mut rng = stream(derive_seed(seed, "reparam", e), "step", step as u64);
            let src = Batch::from_dataset(self.ds, src_idx, ell, &mut rng)?;
            let tgt = Batch::from_dataset(self.ds, tgt_idx, ell, &mut rng)?;

            let mut g = Graph::new();
            let bound = self.model.bind(&mut g, true);
            let obj = self.model.total_objective(&mut g, &bound, &src, &tgt)?;
            let mut terms: Vec<(&str, Var)> = vec![("mi", obj.mi), ("elbo", obj.elbo)];
            if let Some(h) = obj.entropy {
                terms.push(("entropy", h));
            }
            terms.push(("objective", obj.total));
            let mut values = [0.0; 4];
            for (k, (name, v)) in terms.iter().enumerate() {
                let x = g.value(*v).item()?;
                if !x.is_finite() {
                    return Err(Error::NonFinite {
                        term: (*name).to_string(),
                        epoch,
                        step,
                        value: x,
                    });
                }
                values[k] = x;
            }
            // Adam descends, the objective is maximized.
            let loss = g.scale(obj.total, -1.0)?;
            let mut grads = g.backward(loss)?;
            let grads: Vec<Vec<f64>> = bound
                .vars
                .iter()
                .map(|&v| grads.take(v).expect("parameters are trainable leaves"))
                .collect();
            if let Some(bad) = grads.iter().flatten().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    term: "gradient".into(),
                    epoch,
                    step,
                    value: *bad,
                });
            }
            self.adam.step(self.model.params_mut(), &grads, &mut self.state)?;

            sums[0] += values[0];
            sums[1] += values[1];
            if has_entropy {
                sums[2] += values[2];
                sums[3] += values[3];
            } else {
                sums[3] += values[2];
            }
        }

        self.epochs_done += 1;
        let done = self.epochs_done;
        if done % self.config.eval_every == 0 || done == self.config.epochs {
            let steps = src_batches.len() as f64;
            let mcc = match self.ds.latents {
                Some(_) => Some(eval::content_mcc(&self.model, self.ds)?.0),
                None => None,
            };
            let has_target_labels = self.target.iter().any(|&i| self.ds.eval_labels[i].is_some());
            let target_metric = if has_target_labels {
                Some(eval::target_metrics(&self.model, self.ds)?)
            } else {
                None
            };
            self.history.snapshots.push(Snapshot {
                epoch: done,
                elbo: sums[1] / steps,
                mi: sums[0] / steps,
                entropy: has_entropy.then(|| sums[2] / steps),
                objective: sums[3] / steps,
                mcc,
                target_metric,
            });
        }
        Ok(())
    }
}

/// Trains the VAE for `train_config.epochs` epochs from a fresh init.
pub fn train(ds: &Dataset, train_config: &TrainConfig, model_config: &ModelConfig) -> Result<(Model, History)> {
    let mut t = Trainer::new(ds, train_config.clone(), model_config.clone())?;
    t.run()?;
    Ok(t.into_parts())
}

/// Supervised MLP on raw `x`, trained on pooled source rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErmModel {
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_scaling: Option<LabelScaling>,
    pub sizes: Vec<usize>,
    /// `[w0, b0, w1, b1, ...]` with weights stored `[in, out]`.
    pub params: Vec<Tensor>,
}

impl ErmModel {
    fn init(task: Task, label_scaling: Option<LabelScaling>, sizes: Vec<usize>, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, "erm_init", 0);
        let mut params = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
            params.push(Tensor::matrix(fan_in, fan_out, data)?);
            params.push(Tensor::matrix(1, fan_out, vec![0.0; fan_out])?);
        }
        Ok(Self {
            task,
            label_scaling,
            sizes,
            params,
        })
    }

    fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        let layers = vars.len() / 2;
        for l in 0..layers {
            h = g.matmul(h, vars[2 * l])?;
            h = g.add(h, vars[2 * l + 1])?;
            if l + 1 != layers {
                h = g.leaky_relu(h)?;
            }
        }
        Ok(h)
    }

    /// Mean negative log-likelihood of a batch: squared error or cross-entropy.
    fn loss(&self, g: &mut Graph, vars: &[Var], x: &Tensor, y: &[Label]) -> Result<Var> {
        let n = y.len();
        let xv = g.constant(x.clone());
        let out = self.forward(g, vars, xv)?;
        match self.task {
            Task::Regression => {
                let ys = y
                    .iter()
                    .map(|l| self.label_scaling.map_or(l.as_f64(), |s| s.forward(l.as_f64())))
                    .collect();
                let t = g.constant(Tensor::matrix(n, 1, ys)?);
                let d = g.sub(out, t)?;
                let sq = g.square(d)?;
                let m = g.mean(sq)?;
                Ok(g.scale(m, 0.5)?)
            }
            Task::Classification { num_classes } => {
                let mut mask = vec![0.0; n * num_classes];
                for (i, l) in y.iter().enumerate() {
                    let c = l
                        .class()
                        .filter(|&c| c < num_classes)
                        .ok_or_else(|| Error::invalid(format!("bad class label {l:?}")))?;
                    mask[i * num_classes + c] = 1.0;
                }
                let logp = g.log_softmax_rows(out)?;
                let mask = g.constant(Tensor::matrix(n, num_classes, mask)?);
                let picked = g.mul(logp, mask)?;
                let s = g.sum(picked)?;
                Ok(g.scale(s, -1.0 / n as f64)?)
            }
        }
    }

    pub fn predict_rows(&self, rows: &[&[f64]]) -> Result<Vec<Prediction>> {
        let d_x = self.sizes[0];
        if rows.is_empty() || rows.iter().any(|r| r.len() != d_x) {
            return Err(Error::invalid(format!("expected non-empty rows of {d_x} features")));
        }
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        let x = g.constant(Tensor::matrix(rows.len(), d_x, rows.concat())?);
        let out = self.forward(&mut g, &vars, x)?;
        let out = g.value(out);
        Ok((0..rows.len())
            .map(|i| match self.task {
                Task::Regression => {
                    let v = out.get(i, 0);
                    Prediction::Value(self.label_scaling.map_or(v, |s| s.inverse(v)))
                }
                Task::Classification { .. } => {
                    let row = out.row(i);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                    let s: f64 = e.iter().sum();
                    Prediction::Probs(e.iter().map(|v| v / s).collect())
                }
            })
            .collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        Ok(self.predict_rows(&[x])?.remove(0))
    }

    pub fn target_metric(&self, ds: &Dataset) -> Result<TargetMetric> {
        eval::target_metric_with(ds, |x, _| self.predict(x))
    }
}

/// ERM baseline with the classifier's architecture but fed raw `x`.
/// Returns the model and the mean training loss of every epoch.
pub fn train_erm(ds: &Dataset, config: &TrainConfig) -> Result<(ErmModel, Vec<f64>)> {
    config.validate()?;
    ds.validate()?;
    let source = ds.labeled_indices();
    if source.is_empty() {
        return Err(Error::invalid("no labeled source rows"));
    }
    let arch = ModelConfig::preset(config.preset, ds.d_x(), 1, 1, ds.num_domains, ds.task);
    let mut sizes = vec![ds.d_x()];
    sizes.extend(std::iter::repeat_n(arch.hidden, arch.layers - 1));
    sizes.push(arch.classifier_out());
    let mut model = ErmModel::init(ds.task, source_label_scaling(ds)?, sizes, config.seed)?;
    let adam = Adam::with_lr(config.learning_rate);
    let mut state = AdamState::new(&model.params);
    let d_x = ds.d_x();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let batches = shuffled_chunks(&source, config.batch_size, &mut stream(config.seed, "erm_batches", epoch as u64));
        let mut total = 0.0;
        for (step, idx) in batches.iter().enumerate() {
            let x: Vec<f64> = idx.iter().flat_map(|&i| ds.samples[i].x.iter().copied()).collect();
            let x = Tensor::matrix(idx.len(), d_x, x)?;
            let y: Vec<Label> = idx.iter().map(|&i| ds.samples[i].y.expect("labeled")).collect();
            let mut g = Graph::new();
            let vars: Vec<Var> = model.params.iter().map(|p| g.param(p.clone())).collect();
            let loss = model.loss(&mut g, &vars, &x, &y)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    term: "erm_loss".into(),
                    epoch,
                    step,
                    value,
                });
            }
            let mut grads = g.backward(loss)?;
            let grads: Vec<Vec<f64>> = vars.iter().map(|&v| grads.take(v).expect("trainable")).collect();
            adam.step(&mut model.params, &grads, &mut state)?;
            total += value;
        }
        losses.push(total / batches.len() as f64);
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::{generate, ScmConfig};

    fn small_data(seed: u64) -> Dataset {
        let mut c = ScmConfig::paper_replication(seed);
        c.samples_per_domain = 120;
        generate(&c).unwrap()
    }

    fn quick(seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 64,
            seed,
            eval_every: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn minibatches_partition_rows() {
        let ds = small_data(1);
        let b = minibatches(&ds, 64, 3, 0).unwrap();
        let mut all: Vec<usize> = b.concat();
        assert_eq!(b.last().unwrap().len(), ds.len() % 64);
        all.sort_unstable();
        assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
        assert_eq!(b, minibatches(&ds, 64, 3, 0).unwrap());
        assert_ne!(b, minibatches(&ds, 64, 3, 1).unwrap());
        assert!(minibatches(&ds, 0, 3, 0).is_err());
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let ds = small_data(2);
        let tc = quick(5, 0);
        let mc = tc.model_config(&ds, 1, 1).unwrap();
        let (model, history) = train(&ds, &tc, &mc).unwrap();
        assert!(history.is_empty());
        assert_eq!(model, Model::init(mc, derive_seed(5, "model", 0)).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small_data(3);
        let tc = quick(7, 4);
        let mc = tc.model_config(&ds, 1, 1).unwrap();
        let (m1, h1) = train(&ds, &tc, &mc).unwrap();
        let (m2, h2) = train(&ds, &tc, &mc).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
        assert_eq!(h1.snapshots.iter().map(|s| s.epoch).collect::<Vec<_>>(), vec![2, 4]);
        assert!(h1.snapshots[0].mcc.is_some());
        assert!(matches!(h1.snapshots[0].target_metric, Some(TargetMetric::R2(_))));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let ds = small_data(4);
        let tc = quick(8, 5);
        let mc = tc.model_config(&ds, 1, 1).unwrap();
        let (full_model, full_history) = train(&ds, &tc, &mc).unwrap();

        let mut t = Trainer::new(&ds, tc.clone(), mc).unwrap();
        t.run_epochs(3).unwrap();
        let text = serde_json::to_string(&t.save()).unwrap();
        let saved: TrainState = serde_json::from_str(&text).unwrap();
        let mut resumed = Trainer::resume(&ds, saved).unwrap();
        assert_eq!(resumed.epochs_done(), 3);
        resumed.run().unwrap();
        let (m, h) = resumed.into_parts();
        assert_eq!(h, full_history);
        assert_eq!(m, full_model);
    }

    #[test]
    fn history_jsonl_round_trip() {
        let ds = small_data(5);
        let tc = quick(9, 2);
        let mc = tc.model_config(&ds, 1, 1).unwrap();
        let (_, h) = train(&ds, &tc, &mc).unwrap();
        let mut buf = Vec::new();
        h.write_jsonl(&mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), h.snapshots.len());
        assert_eq!(History::read_jsonl(buf.as_slice()).unwrap(), h);
    }

    #[test]
    fn missing_target_domain_is_rejected() {
        let mut ds = small_data(6);
        let tc = quick(1, 1);
        let mc = tc.model_config(&ds, 1, 1).unwrap();
        ds.target_domain = None;
        assert!(Trainer::new(&ds, tc, mc).is_err());
    }

    #[test]
    fn non_finite_loss_names_the_term() {
        let mut ds = small_data(7);
        let tc = TrainConfig {
            batch_size: 10_000,
            ..quick(1, 1)
        };
        let mc = tc.model_config(&ds, 1, 1).unwrap();
        for s in ds.samples.iter_mut().filter(|s| s.y.is_some()).take(1) {
            s.y = Some(Label::Value(f64::INFINITY));
        }
        let mut t = Trainer::new(&ds, tc, mc).unwrap();
        match t.run() {
            Err(Error::NonFinite { term, epoch, step, .. }) => {
                assert_eq!((term.as_str(), epoch, step), ("mi", 0, 0));
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "train.batch_size"));
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let json = r#"{"epochs":1,"batch_size":2,"learning_rate":0.1,"seed":0,"preset":"synthetic","eval_every":1,"typo":3}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
    }

    #[test]
    fn erm_is_deterministic_and_learns() {
        let ds = small_data(8);
        let tc = quick(2, 10);
        let (m1, l1) = train_erm(&ds, &tc).unwrap();
        let (m2, l2) = train_erm(&ds, &tc).unwrap();
        assert_eq!((m1, l1.clone()), (m2, l2));
        assert!(l1[9] < l1[0]);
    }
}
