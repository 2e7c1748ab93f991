//! Domain-conditioned VAE over latent content/style noise.
//!
//! Four MLPs share one parameter list:
//!
//! - prior: domain one-hot → Gaussian over `(n_c, n_s)`
//! - encoder: `x ⧺ one-hot` → Gaussian posterior over `(n_c, n_s)`
//! - decoder: `(n_c, n_s)` → `x̂`
//! - classifier: `n_c` → logits or a regression mean
//!
//! Gaussian heads emit `[mean_c, mean_s, logvar_c, logvar_s]` columns with
//! log-variances clamped to `[−8, 8]`. Training maximizes
//! `L_MI + λ·L_ELBO ∓ γ·H`, see [`Model::total_objective`].

mod checkpoint;

pub use checkpoint::{decode_f64s, encode_f64s, Checkpoint, ParamEntry, FORMAT_VERSION};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Label, Task};
use crate::error::{Error, Result};
use crate::ndiff::{Graph, Tensor, Var};
use crate::rng::stream;

pub const LOG_VAR_MIN: f64 = -8.0;
pub const LOG_VAR_MAX: f64 = 8.0;

/// How the target-entropy term enters the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropySign {
    /// `− γ·H`: pushes target predictions towards determinism.
    #[default]
    Penalty,
    /// `+ γ·H`, the sign as literally written in the objective.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 3-layer nets with 30 hidden units; β=1, γ=0, λ=1e-2.
    Synthetic,
    /// 2-layer nets over precomputed features; β=4, γ=0.1, λ=1e-4.
    Feature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_x: usize,
    pub d_c: usize,
    pub d_s: usize,
    pub num_domains: usize,
    pub task: Task,
    pub hidden: usize,
    /// Weight layers per network.
    pub layers: usize,
    pub beta: f64,
    pub lambda: f64,
    pub gamma: f64,
    #[serde(default)]
    pub entropy_sign: EntropySign,
    /// Regression only: the classifier fits standardized labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_scaling: Option<LabelScaling>,
}

/// `y ↦ (y − shift) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelScaling {
    pub shift: f64,
    pub scale: f64,
}

impl LabelScaling {
    /// Mean and population standard deviation of `ys`.
    pub fn fit(ys: &[f64]) -> Result<Self> {
        if ys.is_empty() {
            return Err(Error::invalid("cannot fit label scaling to no labels"));
        }
        let n = ys.len() as f64;
        let shift = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - shift).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        let s = Self { shift, scale };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.shift.is_finite() || !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config(
                "model.label_scaling",
                "shift must be finite and scale positive",
            ));
        }
        Ok(())
    }

    pub fn forward(&self, y: f64) -> f64 {
        (y - self.shift) / self.scale
    }

    pub fn inverse(&self, v: f64) -> f64 {
        self.shift + self.scale * v
    }
}

impl ModelConfig {
    pub fn preset(preset: Preset, d_x: usize, d_c: usize, d_s: usize, num_domains: usize, task: Task) -> Self {
        let (hidden, layers, beta, lambda, gamma) = match preset {
            Preset::Synthetic => (30, 3, 1.0, 1e-2, 0.0),
            Preset::Feature => (256, 2, 4.0, 1e-4, 0.1),
        };
        let gamma = if task == Task::Regression { 0.0 } else { gamma };
        Self {
            d_x,
            d_c,
            d_s,
            num_domains,
            task,
            hidden,
            layers,
            beta,
            lambda,
            gamma,
            entropy_sign: EntropySign::Penalty,
            label_scaling: None,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.d_c + self.d_s
    }

    pub fn classifier_out(&self) -> usize {
        match self.task {
            Task::Regression => 1,
            Task::Classification { num_classes } => num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("model.{field}"), msg));
        if self.d_x == 0 {
            return bad("d_x", "must be positive");
        }
        if self.d_c == 0 || self.d_s == 0 {
            return bad("d_c", "content and style dimensions must be positive");
        }
        if self.num_domains < 2 {
            return bad("num_domains", "need at least 2 domains");
        }
        if self.hidden == 0 {
            return bad("hidden", "must be positive");
        }
        if self.layers == 0 {
            return bad("layers", "must be positive");
        }
        if let Task::Classification { num_classes } = self.task {
            if num_classes < 2 {
                return bad("task.num_classes", "need at least 2 classes");
            }
        }
        for (name, v) in [("beta", self.beta), ("lambda", self.lambda), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(name, "must be a non-negative number");
            }
        }
        if self.task == Task::Regression && self.gamma != 0.0 {
            return bad("gamma", "the entropy term is undefined for regression; set gamma = 0");
        }
        if let Some(ls) = &self.label_scaling {
            if self.task != Task::Regression {
                return bad("label_scaling", "only applies to regression");
            }
            ls.validate()?;
        }
        Ok(())
    }
}

/// Diagonal Gaussian with clamped log-variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, log_variance: Vec<f64>) -> Result<Self> {
        if mean.len() != log_variance.len() {
            return Err(Error::invalid("mean and log_variance lengths differ"));
        }
        let log_variance = log_variance
            .into_iter()
            .map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
            .collect();
        Ok(Self { mean, log_variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_variance.iter().map(|v| v.exp()).collect()
    }
}

/// Closed-form `KL(q ‖ p)` for diagonal Gaussians.
pub fn kl_gaussian(q: &GaussianParams, p: &GaussianParams) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::invalid(format!(
            "kl_gaussian: dims {} vs {}",
            q.dim(),
            p.dim()
        )));
    }
    let mut kl = 0.0;
    for i in 0..q.dim() {
        let (lq, lp) = (q.log_variance[i], p.log_variance[i]);
        let dm = q.mean[i] - p.mean[i];
        kl += 0.5 * (lp - lq) + (lq.exp() + dm * dm) / (2.0 * lp.exp()) - 0.5;
    }
    Ok(kl.max(0.0))
}

/// `mean + sqrt(variance) ⊙ draws`.
pub fn reparameterize(gp: &GaussianParams, draws: &[f64]) -> Result<Vec<f64>> {
    if draws.len() != gp.dim() {
        return Err(Error::invalid(format!(
            "reparameterize: {} draws for a {}-dim Gaussian",
            draws.len(),
            gp.dim()
        )));
    }
    Ok(gp
        .mean
        .iter()
        .zip(&gp.log_variance)
        .zip(draws)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Shannon entropy in nats with `0·ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

pub fn one_hot(domain: usize, num_domains: usize) -> Vec<f64> {
    let mut v = vec![0.0; num_domains];
    v[domain] = 1.0;
    v
}

fn check_one_hot(u: &[f64], num_domains: usize) -> Result<()> {
    let ones = u.iter().filter(|&&v| v == 1.0).count();
    let zeros = u.iter().filter(|&&v| v == 0.0).count();
    if u.len() != num_domains || ones != 1 || zeros != num_domains - 1 {
        return Err(Error::invalid(format!(
            "domain indicator must be one-hot over {num_domains} domains, got {u:?}"
        )));
    }
    Ok(())
}

/// Predictive output of the classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Prediction {
    Value(f64),
    Probs(Vec<f64>),
}

impl Prediction {
    /// Regression mean, or the most likely class as a number.
    pub fn point(&self) -> f64 {
        match self {
            Prediction::Value(v) => *v,
            Prediction::Probs(_) => self.argmax() as f64,
        }
    }

    pub fn argmax(&self) -> usize {
        match self {
            Prediction::Value(v) => v.round().max(0.0) as usize,
            Prediction::Probs(p) => p
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Net {
    layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
struct Nets {
    prior: Net,
    encoder: Net,
    decoder: Net,
    classifier: Net,
}

/// Posterior or prior block as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct GaussVars {
    pub mean: Var,
    pub log_var: Var,
}

/// A minibatch: observations, domain one-hots, optional labels and the
/// standard-normal draws used for reparameterization.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub u: Tensor,
    pub y: Vec<Option<Label>>,
    pub eps: Tensor,
}

impl Batch {
    /// Rows `idx` of `ds` with labels taken from the training view.
    pub fn from_dataset<R: Rng>(ds: &Dataset, idx: &[usize], latent_dim: usize, rng: &mut R) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let d_x = ds.d_x();
        let mut x = Vec::with_capacity(idx.len() * d_x);
        let mut u = Vec::with_capacity(idx.len() * ds.num_domains);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            let s = &ds.samples[i];
            x.extend_from_slice(&s.x);
            u.extend(one_hot(s.domain, ds.num_domains));
            y.push(s.y);
        }
        let normal = rand_distr::StandardNormal;
        let eps: Vec<f64> = (0..idx.len() * latent_dim)
            .map(|_| rng.sample::<f64, _>(normal))
            .collect();
        Ok(Self {
            x: Tensor::matrix(idx.len(), d_x, x)?,
            u: Tensor::matrix(idx.len(), ds.num_domains, u)?,
            y,
            eps: Tensor::matrix(idx.len(), latent_dim, eps)?,
        })
    }

    pub fn rows(&self) -> usize {
        self.x.dims().0
    }

    pub fn is_source(&self) -> Vec<bool> {
        self.y.iter().map(Option::is_some).collect()
    }
}

/// Graph nodes produced by one encoder/decoder pass over a batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchVars {
    pub post_c: GaussVars,
    pub post_s: GaussVars,
    pub prior_c: GaussVars,
    pub prior_s: GaussVars,
    /// Reparameterized `(n_c, n_s)` sample, `rows × ℓ`.
    pub sample: Var,
    pub n_c: Var,
    pub recon: Var,
    pub rows: usize,
}

/// The pieces of the training objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub total: Var,
    pub elbo: Var,
    pub mi: Var,
    pub entropy: Option<Var>,
}

/// Parameter nodes of a model inside one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    nets: Nets,
}

impl Model {
    /// Xavier-uniform weights and zero biases, except that the prior's final
    /// layer starts at zero so every domain prior is initially `N(0, I)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        let ell = config.latent_dim();
        let specs: [(&str, usize, usize, bool); 4] = [
            ("prior", config.num_domains, 2 * ell, true),
            ("encoder", config.d_x + config.num_domains, 2 * ell, false),
            ("decoder", ell, config.d_x, false),
            ("classifier", config.d_c, config.classifier_out(), false),
        ];
        let mut nets = Vec::with_capacity(4);
        for (k, (name, input, output, zero_last)) in specs.into_iter().enumerate() {
            let mut rng = stream(seed, "init", k as u64);
            let mut sizes = vec![input];
            sizes.extend(std::iter::repeat_n(config.hidden, config.layers - 1));
            sizes.push(output);
            let mut layers = Vec::with_capacity(config.layers);
            for l in 0..config.layers {
                let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let last = l + 1 == config.layers;
                let w: Vec<f64> = (0..fan_in * fan_out)
                    .map(|_| {
                        if zero_last && last {
                            0.0
                        } else {
                            rng.random_range(-limit..limit)
                        }
                    })
                    .collect();
                names.push(format!("{name}.{l}.weight"));
                params.push(Tensor::matrix(fan_in, fan_out, w)?);
                names.push(format!("{name}.{l}.bias"));
                params.push(Tensor::matrix(1, fan_out, vec![0.0; fan_out])?);
                layers.push(Layer {
                    weight: params.len() - 2,
                    bias: params.len() - 1,
                });
            }
            nets.push(Net { layers });
        }
        let mut it = nets.into_iter();
        let nets = Nets {
            prior: it.next().unwrap(),
            encoder: it.next().unwrap(),
            decoder: it.next().unwrap(),
            classifier: it.next().unwrap(),
        };
        Ok(Self {
            config,
            names,
            params,
            nets,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Puts every parameter into `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    fn run_net(&self, g: &mut Graph, b: &Bound, net: &Net, input: Var) -> Result<Var> {
        let mut h = input;
        let last = net.layers.len() - 1;
        for (k, layer) in net.layers.iter().enumerate() {
            h = g.matmul(h, b.vars[layer.weight])?;
            h = g.add(h, b.vars[layer.bias])?;
            if k != last {
                h = g.leaky_relu(h)?;
            }
        }
        Ok(h)
    }

    fn split_heads(&self, g: &mut Graph, out: Var) -> Result<(GaussVars, GaussVars)> {
        let (d_c, ell) = (self.config.d_c, self.config.latent_dim());
        let mean_c = g.slice_cols(out, 0, d_c)?;
        let mean_s = g.slice_cols(out, d_c, ell)?;
        let lv = g.slice_cols(out, ell, 2 * ell)?;
        let lv = g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX)?;
        let lv_c = g.slice_cols(lv, 0, d_c)?;
        let lv_s = g.slice_cols(lv, d_c, ell)?;
        Ok((
            GaussVars {
                mean: mean_c,
                log_var: lv_c,
            },
            GaussVars {
                mean: mean_s,
                log_var: lv_s,
            },
        ))
    }

    pub fn prior_vars(&self, g: &mut Graph, b: &Bound, u: Var) -> Result<(GaussVars, GaussVars)> {
        let out = self.run_net(g, b, &self.nets.prior, u)?;
        self.split_heads(g, out)
    }

    pub fn encode_vars(&self, g: &mut Graph, b: &Bound, x: Var, u: Var) -> Result<(GaussVars, GaussVars)> {
        let input = g.concat_cols(&[x, u])?;
        let out = self.run_net(g, b, &self.nets.encoder, input)?;
        self.split_heads(g, out)
    }

    pub fn decode_vars(&self, g: &mut Graph, b: &Bound, n: Var) -> Result<Var> {
        self.run_net(g, b, &self.nets.decoder, n)
    }

    /// The classifier only ever sees the content block.
    pub fn classify_vars(&self, g: &mut Graph, b: &Bound, n_c: Var) -> Result<Var> {
        self.run_net(g, b, &self.nets.classifier, n_c)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let n = batch.rows();
        let c = &self.config;
        if batch.x.dims() != (n, c.d_x)
            || batch.u.dims() != (n, c.num_domains)
            || batch.eps.dims() != (n, c.latent_dim())
            || batch.y.len() != n
        {
            return Err(Error::invalid(format!(
                "batch dims x{:?} u{:?} eps{:?} do not match model (d_x={}, M={}, ℓ={})",
                batch.x.shape(),
                batch.u.shape(),
                batch.eps.shape(),
                c.d_x,
                c.num_domains,
                c.latent_dim()
            )));
        }
        Ok(())
    }

    /// Encoder, prior, one reparameterized sample and the decoder.
    pub fn forward_batch(&self, g: &mut Graph, b: &Bound, batch: &Batch) -> Result<BatchVars> {
        self.check_batch(batch)?;
        let x = g.constant(batch.x.clone());
        let u = g.constant(batch.u.clone());
        let eps = g.constant(batch.eps.clone());
        let (post_c, post_s) = self.encode_vars(g, b, x, u)?;
        let (prior_c, prior_s) = self.prior_vars(g, b, u)?;
        let d_c = self.config.d_c;
        let ell = self.config.latent_dim();
        let eps_c = g.slice_cols(eps, 0, d_c)?;
        let eps_s = g.slice_cols(eps, d_c, ell)?;
        let n_c = reparameterize_vars(g, &post_c, eps_c)?;
        let n_s = reparameterize_vars(g, &post_s, eps_s)?;
        let sample = g.concat_cols(&[n_c, n_s])?;
        let recon = self.decode_vars(g, b, sample)?;
        Ok(BatchVars {
            post_c,
            post_s,
            prior_c,
            prior_s,
            sample,
            n_c,
            recon,
            rows: batch.rows(),
        })
    }

    /// `Σ_rows [−½‖x − x̂‖² − β·(KL_c + KL_s)]`.
    pub fn elbo_sum(&self, g: &mut Graph, fwd: &BatchVars, batch: &Batch) -> Result<Var> {
        let x = g.constant(batch.x.clone());
        let diff = g.sub(x, fwd.recon)?;
        let sq = g.square(diff)?;
        let sse = g.sum(sq)?;
        let recon_ll = g.scale(sse, -0.5)?;
        let kl_c = kl_gaussian_vars(g, &fwd.post_c, &fwd.prior_c)?;
        let kl_s = kl_gaussian_vars(g, &fwd.post_s, &fwd.prior_s)?;
        let kl = g.add(kl_c, kl_s)?;
        let kl = g.scale(kl, self.config.beta)?;
        Ok(g.sub(recon_ll, kl)?)
    }

    /// Batch mean of the ELBO; source and target rows alike.
    pub fn loss_elbo(&self, g: &mut Graph, b: &Bound, batch: &Batch) -> Result<Var> {
        let fwd = self.forward_batch(g, b, batch)?;
        let s = self.elbo_sum(g, &fwd, batch)?;
        Ok(g.scale(s, 1.0 / fwd.rows as f64)?)
    }

    /// Mean log-likelihood of the labels given the sampled content block.
    pub fn loss_mi(&self, g: &mut Graph, b: &Bound, fwd: &BatchVars, batch: &Batch) -> Result<Var> {
        let n = fwd.rows;
        let labels: Vec<Label> = batch
            .y
            .iter()
            .enumerate()
            .map(|(i, y)| y.ok_or_else(|| Error::invalid(format!("loss_mi: row {i} has no label"))))
            .collect::<Result<_>>()?;
        let out = self.classify_vars(g, b, fwd.n_c)?;
        match self.config.task {
            Task::Regression => {
                let scaling = self.config.label_scaling;
                let y: Vec<f64> = labels
                    .iter()
                    .map(|l| scaling.map_or(l.as_f64(), |s| s.forward(l.as_f64())))
                    .collect();
                let y = g.constant(Tensor::matrix(n, 1, y)?);
                let diff = g.sub(y, out)?;
                let sq = g.square(diff)?;
                let m = g.mean(sq)?;
                Ok(g.scale(m, -0.5)?)
            }
            Task::Classification { num_classes } => {
                let mut mask = vec![0.0; n * num_classes];
                for (i, l) in labels.iter().enumerate() {
                    let c = l
                        .class()
                        .filter(|&c| c < num_classes)
                        .ok_or_else(|| Error::invalid(format!("loss_mi: bad class label {l:?}")))?;
                    mask[i * num_classes + c] = 1.0;
                }
                let logp = g.log_softmax_rows(out)?;
                let mask = g.constant(Tensor::matrix(n, num_classes, mask)?);
                let picked = g.mul(logp, mask)?;
                let s = g.sum(picked)?;
                Ok(g.scale(s, 1.0 / n as f64)?)
            }
        }
    }

    /// Mean Shannon entropy of the predictive distribution over the batch.
    pub fn loss_entropy(&self, g: &mut Graph, b: &Bound, fwd: &BatchVars) -> Result<Var> {
        if self.config.task == Task::Regression {
            return Err(Error::invalid("the entropy term is undefined for regression"));
        }
        let out = self.classify_vars(g, b, fwd.n_c)?;
        let logp = g.log_softmax_rows(out)?;
        let p = g.softmax_rows(out)?;
        let plogp = g.mul(p, logp)?;
        let s = g.sum(plogp)?;
        Ok(g.scale(s, -1.0 / fwd.rows as f64)?)
    }

    /// `L_MI + λ·L_ELBO ∓ γ·H`, with the ELBO averaged over the union of
    /// both batches, `L_MI` over the source batch and `H` over the target.
    pub fn total_objective(&self, g: &mut Graph, b: &Bound, source: &Batch, target: &Batch) -> Result<ObjectiveVars> {
        let fs = self.forward_batch(g, b, source)?;
        let ft = self.forward_batch(g, b, target)?;
        let es = self.elbo_sum(g, &fs, source)?;
        let et = self.elbo_sum(g, &ft, target)?;
        let e = g.add(es, et)?;
        let elbo = g.scale(e, 1.0 / (fs.rows + ft.rows) as f64)?;
        let mi = self.loss_mi(g, b, &fs, source)?;
        let weighted = g.scale(elbo, self.config.lambda)?;
        let mut total = g.add(mi, weighted)?;
        let entropy = match self.config.task {
            Task::Classification { .. } => {
                let h = self.loss_entropy(g, b, &ft)?;
                let sign = match self.config.entropy_sign {
                    EntropySign::Penalty => -1.0,
                    EntropySign::Literal => 1.0,
                };
                let term = g.scale(h, sign * self.config.gamma)?;
                total = g.add(total, term)?;
                Some(h)
            }
            Task::Regression => None,
        };
        Ok(ObjectiveVars {
            total,
            elbo,
            mi,
            entropy,
        })
    }

    fn frozen_rows(&self, x_rows: &[&[f64]], domains: &[usize]) -> Result<(Graph, Bound, Var, Var)> {
        let n = x_rows.len();
        let d_x = self.config.d_x;
        if n == 0 {
            return Err(Error::invalid("no rows to evaluate"));
        }
        if let Some(r) = x_rows.iter().find(|r| r.len() != d_x) {
            return Err(Error::invalid(format!(
                "expected {d_x} features, got {}",
                r.len()
            )));
        }
        if let Some(u) = domains.iter().find(|&&u| u >= self.config.num_domains) {
            return Err(Error::invalid(format!("domain {u} out of range")));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(Tensor::matrix(n, d_x, x_rows.concat())?);
        let u: Vec<f64> = domains
            .iter()
            .flat_map(|&d| one_hot(d, self.config.num_domains))
            .collect();
        let u = g.constant(Tensor::matrix(n, self.config.num_domains, u)?);
        Ok((g, b, x, u))
    }

    pub fn prior(&self, u: &[f64]) -> Result<(GaussianParams, GaussianParams)> {
        check_one_hot(u, self.config.num_domains)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let uv = g.constant(Tensor::matrix(1, u.len(), u.to_vec())?);
        let (c, s) = self.prior_vars(&mut g, &b, uv)?;
        Ok((read_gauss(&g, &c)?, read_gauss(&g, &s)?))
    }

    pub fn encode(&self, x: &[f64], u: &[f64]) -> Result<(GaussianParams, GaussianParams)> {
        check_one_hot(u, self.config.num_domains)?;
        let domain = u.iter().position(|&v| v == 1.0).expect("checked one-hot");
        let (mut g, b, xv, uv) = self.frozen_rows(&[x], &[domain])?;
        let (c, s) = self.encode_vars(&mut g, &b, xv, uv)?;
        Ok((read_gauss(&g, &c)?, read_gauss(&g, &s)?))
    }

    fn head_to_prediction(&self, out: &Tensor) -> Vec<Prediction> {
        let (rows, _) = out.dims();
        (0..rows)
            .map(|i| match self.config.task {
                Task::Regression => {
                    let v = out.get(i, 0);
                    Prediction::Value(self.config.label_scaling.map_or(v, |s| s.inverse(v)))
                }
                Task::Classification { .. } => {
                    let row = out.row(i);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                    let s: f64 = e.iter().sum();
                    Prediction::Probs(e.iter().map(|v| v / s).collect())
                }
            })
            .collect()
    }

    /// Prediction from the posterior mean of `n_c` (no sampling).
    pub fn predict(&self, x: &[f64], domain: usize) -> Result<Prediction> {
        Ok(self.predict_rows(&[x], &[domain])?.remove(0))
    }

    pub fn predict_rows(&self, x_rows: &[&[f64]], domains: &[usize]) -> Result<Vec<Prediction>> {
        let (mut g, b, x, u) = self.frozen_rows(x_rows, domains)?;
        let (c, _) = self.encode_vars(&mut g, &b, x, u)?;
        let out = self.classify_vars(&mut g, &b, c.mean)?;
        Ok(self.head_to_prediction(g.value(out)))
    }

    /// Classifier output for a full latent vector `(n_c, n_s)`; only the
    /// content slice is read.
    pub fn predict_from_latent(&self, n: &[f64]) -> Result<Prediction> {
        if n.len() != self.config.latent_dim() {
            return Err(Error::invalid("latent vector has the wrong dimension"));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let nc = g.constant(Tensor::matrix(1, self.config.d_c, n[..self.config.d_c].to_vec())?);
        let out = self.classify_vars(&mut g, &b, nc)?;
        Ok(self.head_to_prediction(g.value(out)).remove(0))
    }

    /// Posterior means of `n_c` for every row of `ds`.
    pub fn content_means(&self, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
        let rows: Vec<&[f64]> = ds.samples.iter().map(|s| s.x.as_slice()).collect();
        let domains: Vec<usize> = ds.samples.iter().map(|s| s.domain).collect();
        let (mut g, b, x, u) = self.frozen_rows(&rows, &domains)?;
        let (c, _) = self.encode_vars(&mut g, &b, x, u)?;
        let m = g.value(c.mean);
        Ok((0..m.dims().0).map(|i| m.row(i).to_vec()).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            params: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(n, t)| ParamEntry::new(n, t))
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint format_version {}",
                ck.format_version
            )));
        }
        let mut model = Model::init(ck.config.clone(), 0)?;
        if ck.params.len() != model.params.len() {
            return Err(Error::invalid(format!(
                "checkpoint holds {} parameters, model needs {}",
                ck.params.len(),
                model.params.len()
            )));
        }
        for ((name, slot), entry) in model.names.iter().zip(model.params.iter_mut()).zip(&ck.params) {
            if &entry.name != name || entry.shape != slot.shape() {
                return Err(Error::invalid(format!(
                    "checkpoint entry {} {:?} does not match {} {:?}",
                    entry.name,
                    entry.shape,
                    name,
                    slot.shape()
                )));
            }
            *slot = entry.to_tensor()?;
        }
        Ok(model)
    }
}

fn read_gauss(g: &Graph, v: &GaussVars) -> Result<GaussianParams> {
    GaussianParams::new(
        g.value(v.mean).data().to_vec(),
        g.value(v.log_var).data().to_vec(),
    )
}

/// `mean + exp(½·logvar) ⊙ eps` as graph nodes.
pub fn reparameterize_vars(g: &mut Graph, gp: &GaussVars, eps: Var) -> Result<Var> {
    let half = g.scale(gp.log_var, 0.5)?;
    let std = g.exp(half)?;
    let noise = g.mul(std, eps)?;
    Ok(g.add(gp.mean, noise)?)
}

/// Closed-form diagonal Gaussian KL summed over every row and dimension.
pub fn kl_gaussian_vars(g: &mut Graph, q: &GaussVars, p: &GaussVars) -> Result<Var> {
    let lv_diff = g.sub(p.log_var, q.log_var)?;
    let var_q = g.exp(q.log_var)?;
    let var_p = g.exp(p.log_var)?;
    let dm = g.sub(q.mean, p.mean)?;
    let dm2 = g.square(dm)?;
    let num = g.add(var_q, dm2)?;
    let ratio = g.div(num, var_p)?;
    let inner = g.add(lv_diff, ratio)?;
    let s = g.sum(inner)?;
    let elems = g.value(q.mean).numel() as f64;
    let s = g.scale(s, 0.5)?;
    let half = g.scalar(0.5 * elems);
    Ok(g.sub(s, half)?)
}
