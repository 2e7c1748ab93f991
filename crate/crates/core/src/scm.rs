//! Synthetic data from the latent causal model
//!
//! ```text
//! n | u  ~  N(means(u), variances(u))      (per dimension, content then style)
//! z_c  =  g_c(n_c)
//! z_s  =  g_s2(g_s1(z_c) + n_s)
//! x    =  f(z_c, z_s) + ε
//! y    =  Σ_i z_c,i³
//! ```
//!
//! `PaperCubic` fixes `g_c` and `g_s2` to the identity and `g_s1(z) = z³`;
//! `PostNonlinear` draws strictly monotone `g_c`, `g_s2` and a random cubic
//! coupling for `g_s1`. The mixing `f` is an MLP of leaky-ReLU layers.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Label, LabeledSample, LatentSample, Task};
use crate::error::{Error, Result};
use crate::eval::pearson;
use crate::ndiff::LEAKY_RELU_SLOPE;
use crate::rng::{derive_seed, stream};

pub const MEAN_RANGE: (f64, f64) = (1.0, 2.0);
pub const VARIANCE_RANGE: (f64, f64) = (0.3, 1.0);
/// Mixing matrices are redrawn until their condition number is below this.
pub const MAX_MIXING_CONDITION: f64 = 1e3;
pub const MIXING_ATTEMPTS: usize = 100;
/// Relative threshold below which the variability matrix counts as singular.
pub const SINGULAR_TOLERANCE: f64 = 1e-10;

/// Gaussian noise parameters of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    domain_id: usize,
    means: Vec<f64>,
    variances: Vec<f64>,
}

impl DomainSpec {
    pub fn new(domain_id: usize, means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        if means.len() != variances.len() || means.is_empty() {
            return Err(Error::invalid(format!(
                "domain {domain_id}: {} means vs {} variances",
                means.len(),
                variances.len()
            )));
        }
        if let Some(v) = variances.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!(
                "domain {domain_id}: variance must be positive and finite, got {v}"
            )));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid(format!("domain {domain_id}: non-finite mean")));
        }
        Ok(Self {
            domain_id,
            means,
            variances,
        })
    }

    pub fn domain_id(&self) -> usize {
        self.domain_id
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    /// Natural parameters `(μ/σ², −1/(2σ²))` for each dimension, flattened.
    pub fn natural_params(&self) -> Vec<f64> {
        self.means
            .iter()
            .zip(&self.variances)
            .flat_map(|(&m, &v)| [m / v, -1.0 / (2.0 * v)])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    PaperCubic,
    PostNonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmConfig {
    pub d_c: usize,
    pub d_s: usize,
    pub d_x: usize,
    pub num_domains: usize,
    pub target_domain: usize,
    pub samples_per_domain: usize,
    pub family: Family,
    #[serde(default)]
    pub obs_noise_std: f64,
    #[serde(default)]
    pub label_noise_std: f64,
    pub mixing_depth: usize,
    pub seed: u64,
}

impl ScmConfig {
    /// Five segments of 1000 samples, one content and one style dimension,
    /// last segment as the unlabeled target.
    pub fn paper_replication(seed: u64) -> Self {
        Self {
            d_c: 1,
            d_s: 1,
            d_x: 2,
            num_domains: 5,
            target_domain: 4,
            samples_per_domain: 1000,
            family: Family::PaperCubic,
            obs_noise_std: 0.0,
            label_noise_std: 0.0,
            mixing_depth: 3,
            seed,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.d_c + self.d_s
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: String| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("scm.{field}"), msg))
            }
        };
        check(self.d_c >= 1, "d_c", "must be at least 1".into())?;
        check(self.d_s >= 1, "d_s", "must be at least 1".into())?;
        check(
            self.d_x >= self.latent_dim(),
            "d_x",
            format!("must be at least d_c + d_s = {}", self.latent_dim()),
        )?;
        check(self.num_domains >= 2, "num_domains", "need at least 2 domains".into())?;
        check(
            self.target_domain < self.num_domains,
            "target_domain",
            format!("must be below num_domains = {}", self.num_domains),
        )?;
        check(self.samples_per_domain >= 1, "samples_per_domain", "must be positive".into())?;
        check(self.mixing_depth >= 1, "mixing_depth", "must be positive".into())?;
        check(
            self.obs_noise_std >= 0.0 && self.obs_noise_std.is_finite(),
            "obs_noise_std",
            "must be a non-negative number".into(),
        )?;
        check(
            self.label_noise_std >= 0.0 && self.label_noise_std.is_finite(),
            "label_noise_std",
            "must be a non-negative number".into(),
        )
    }
}

/// Per-domain means ~ U[1,2] and variances ~ U[0.3,1], one pair per
/// latent noise dimension.
pub fn sample_domain_specs(config: &ScmConfig) -> Result<Vec<DomainSpec>> {
    config.validate()?;
    let ell = config.latent_dim();
    let mut rng = stream(config.seed, "domain_specs", 0);
    let means = Uniform::new_inclusive(MEAN_RANGE.0, MEAN_RANGE.1).expect("valid range");
    let vars = Uniform::new_inclusive(VARIANCE_RANGE.0, VARIANCE_RANGE.1).expect("valid range");
    (0..config.num_domains)
        .map(|u| {
            let m = (0..ell).map(|_| means.sample(&mut rng)).collect();
            let v = (0..ell).map(|_| vars.sample(&mut rng)).collect();
            DomainSpec::new(u, m, v)
        })
        .collect()
}

/// `n` i.i.d. draws of the domain's noise vector, one row per draw.
pub fn sample_noise(spec: &DomainSpec, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::invalid("sample_noise needs n >= 1"));
    }
    let mut rng = stream(seed, "noise_draws", spec.domain_id as u64);
    let dists: Vec<Normal<f64>> = spec
        .means
        .iter()
        .zip(&spec.variances)
        .map(|(&m, &v)| Normal::new(m, v.sqrt()).map_err(|e| Error::invalid(e.to_string())))
        .collect::<Result<_>>()?;
    Ok((0..n)
        .map(|_| dists.iter().map(|d| d.sample(&mut rng)).collect())
        .collect())
}

/// `t ↦ scale·t + shift + bend·tanh(t)` with `|bend| < scale`, so the slope
/// stays within `[scale − |bend|, scale + |bend|]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonotoneMap {
    pub scale: f64,
    pub shift: f64,
    pub bend: f64,
}

impl MonotoneMap {
    pub const IDENTITY: MonotoneMap = MonotoneMap {
        scale: 1.0,
        shift: 0.0,
        bend: 0.0,
    };

    pub fn apply(&self, t: f64) -> f64 {
        self.scale * t + self.shift + self.bend * t.tanh()
    }

    pub fn inverse(&self, y: f64) -> f64 {
        let target = y - self.shift;
        let h = |t: f64| self.scale * t + self.bend * t.tanh() - target;
        let (mut lo, mut hi) = (
            (target - self.bend.abs()) / self.scale,
            (target + self.bend.abs()) / self.scale,
        );
        let mut t = target / self.scale;
        for _ in 0..200 {
            let v = h(t);
            if v == 0.0 {
                return t;
            }
            if v < 0.0 {
                lo = t;
            } else {
                hi = t;
            }
            let sech2 = 1.0 - t.tanh().powi(2);
            let next = t - v / (self.scale + self.bend * sech2);
            let next = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
            if (next - t).abs() <= 1e-15 * (1.0 + t.abs()) {
                return next;
            }
            t = next;
        }
        t
    }
}

/// `g_s1(z_c)_j = Σ_i weights[j][i] · z_c,i³`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubicCoupling {
    pub weights: Vec<Vec<f64>>,
}

impl CubicCoupling {
    pub fn apply(&self, z_c: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|row| row.iter().zip(z_c).map(|(w, z)| w * z * z * z).sum())
            .collect()
    }
}

/// Fully specified generating functions `g_c`, `g_s1`, `g_s2`, `f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mechanism {
    pub family: Family,
    pub g_c: Vec<MonotoneMap>,
    pub g_s1: CubicCoupling,
    pub g_s2: Vec<MonotoneMap>,
    /// Row-major weight matrices, first `d_x × ℓ`, then `d_x × d_x`.
    pub mixing: Vec<DMatrix<f64>>,
}

impl Mechanism {
    pub fn draw(config: &ScmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, "mechanism", 0);
        let (d_c, d_s) = (config.d_c, config.d_s);
        let (g_c, g_s1, g_s2) = match config.family {
            Family::PaperCubic => {
                let weights = (0..d_s)
                    .map(|j| (0..d_c).map(|i| if i == j % d_c { 1.0 } else { 0.0 }).collect())
                    .collect();
                (
                    vec![MonotoneMap::IDENTITY; d_c],
                    CubicCoupling { weights },
                    vec![MonotoneMap::IDENTITY; d_s],
                )
            }
            Family::PostNonlinear => {
                let monotone = |rng: &mut rand_chacha::ChaCha8Rng| {
                    let scale = rng.random_range(0.5..1.5);
                    MonotoneMap {
                        scale,
                        shift: rng.random_range(-0.5..0.5),
                        bend: scale * rng.random_range(-0.6..0.6),
                    }
                };
                let g_c = (0..d_c).map(|_| monotone(&mut rng)).collect();
                let g_s2 = (0..d_s).map(|_| monotone(&mut rng)).collect();
                let weights = (0..d_s)
                    .map(|_| {
                        (0..d_c)
                            .map(|_| {
                                let mag = rng.random_range(0.5..1.5);
                                if rng.random_bool(0.5) { mag } else { -mag }
                            })
                            .collect()
                    })
                    .collect();
                (g_c, CubicCoupling { weights }, g_s2)
            }
        };
        let mut mixing = Vec::with_capacity(config.mixing_depth);
        for layer in 0..config.mixing_depth {
            let cols = if layer == 0 { config.latent_dim() } else { config.d_x };
            mixing.push(draw_well_conditioned(
                &mut rng,
                config.d_x,
                cols,
                MAX_MIXING_CONDITION,
                MIXING_ATTEMPTS,
            )?);
        }
        Ok(Self {
            family: config.family,
            g_c,
            g_s1,
            g_s2,
            mixing,
        })
    }

    pub fn latents(&self, n_c: &[f64], n_s: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let z_c: Vec<f64> = n_c.iter().zip(&self.g_c).map(|(&n, g)| g.apply(n)).collect();
        let pre = self.g_s1.apply(&z_c);
        let z_s = pre
            .iter()
            .zip(n_s)
            .zip(&self.g_s2)
            .map(|((p, n), g)| g.apply(p + n))
            .collect();
        (z_c, z_s)
    }

    /// `(n_c, n_s)` from `(z_c, z_s)` through `g_c⁻¹` and `g_s2⁻¹`.
    pub fn invert_latents(&self, z_c: &[f64], z_s: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n_c = z_c.iter().zip(&self.g_c).map(|(&z, g)| g.inverse(z)).collect();
        let pre = self.g_s1.apply(z_c);
        let n_s = z_s
            .iter()
            .zip(&self.g_s2)
            .zip(&pre)
            .map(|((&z, g), p)| g.inverse(z) - p)
            .collect();
        (n_c, n_s)
    }

    /// Noise-free mixing `f(z_c, z_s)`.
    pub fn mix(&self, z_c: &[f64], z_s: &[f64]) -> Vec<f64> {
        let mut h: Vec<f64> = z_c.iter().chain(z_s).copied().collect();
        let last = self.mixing.len() - 1;
        for (k, w) in self.mixing.iter().enumerate() {
            let mut next: Vec<f64> = (0..w.nrows())
                .map(|r| (0..w.ncols()).map(|c| w[(r, c)] * h[c]).sum())
                .collect();
            if k != last {
                for v in &mut next {
                    if *v <= 0.0 {
                        *v *= LEAKY_RELU_SLOPE;
                    }
                }
            }
            h = next;
        }
        h
    }

    pub fn label(&self, z_c: &[f64]) -> f64 {
        z_c.iter().map(|z| z * z * z).sum()
    }
}

pub(crate) fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Draws `U[-1,1]` matrices with unit-norm columns until one has condition number below `max_cond`.
pub fn draw_well_conditioned<R: Rng>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    max_cond: f64,
    attempts: usize,
) -> Result<DMatrix<f64>> {
    for _ in 0..attempts {
        let mut m = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        for mut c in m.column_iter_mut() {
            let norm = c.norm();
            if norm > 0.0 {
                c /= norm;
            }
        }
        if condition_number(&m) < max_cond {
            return Ok(m);
        }
    }
    Err(Error::invalid(format!(
        "no {rows}x{cols} mixing matrix with condition number < {max_cond} after {attempts} attempts"
    )))
}

/// Draws the full dataset. Target-domain labels are kept only in
/// `eval_labels`.
pub fn generate(config: &ScmConfig) -> Result<Dataset> {
    let specs = sample_domain_specs(config)?;
    let mech = Mechanism::draw(config)?;
    let (d_c, d_s) = (config.d_c, config.d_s);
    let n = config.samples_per_domain;
    let total = n * config.num_domains;
    let mut samples = Vec::with_capacity(total);
    let mut latents = Vec::with_capacity(total);
    let mut eval_labels = Vec::with_capacity(total);

    for spec in &specs {
        let u = spec.domain_id();
        let noise = sample_noise(spec, n, derive_seed(config.seed, "noise", u as u64))?;
        let mut obs_rng = stream(config.seed, "obs_noise", u as u64);
        let mut label_rng = stream(config.seed, "label_noise", u as u64);
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        for row in noise {
            let (n_c, n_s) = row.split_at(d_c);
            let (z_c, z_s) = mech.latents(n_c, n_s);
            let mut x = mech.mix(&z_c, &z_s);
            if config.obs_noise_std > 0.0 {
                for v in &mut x {
                    *v += config.obs_noise_std * std_normal.sample(&mut obs_rng);
                }
            }
            let mut y = mech.label(&z_c);
            if config.label_noise_std > 0.0 {
                y += config.label_noise_std * std_normal.sample(&mut label_rng);
            }
            let label = Label::Value(y);
            samples.push(LabeledSample {
                x,
                y: (u != config.target_domain).then_some(label),
                domain: u,
            });
            eval_labels.push(Some(label));
            debug_assert_eq!(n_s.len(), d_s);
            latents.push(LatentSample {
                n_c: n_c.to_vec(),
                n_s: n_s.to_vec(),
                z_c,
                z_s,
                domain: u,
            });
        }
    }
    Ok(Dataset {
        task: Task::Regression,
        num_domains: config.num_domains,
        target_domain: Some(config.target_domain),
        samples,
        latents: Some(latents),
        eval_labels,
    })
}

/// Alternative generator `z'_c = g_c(n_c)`, `z'_s = n_s` observed through
/// `f ∘ f'` with `f'(z') = [z'_c, g_s2(g_s1(z'_c) + z'_s)]`.
#[derive(Debug, Clone)]
pub struct Counterexample {
    pub mechanism: Mechanism,
    pub specs: Vec<DomainSpec>,
}

impl Counterexample {
    pub fn latents(&self, n_c: &[f64], n_s: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let z_c = n_c
            .iter()
            .zip(&self.mechanism.g_c)
            .map(|(&n, g)| g.apply(n))
            .collect();
        (z_c, n_s.to_vec())
    }

    /// `f'(z')`: the latent map feeding the original mixing.
    pub fn inner(&self, z_c: &[f64], z_s: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let pre = self.mechanism.g_s1.apply(z_c);
        let s = pre
            .iter()
            .zip(z_s)
            .zip(&self.mechanism.g_s2)
            .map(|((p, z), g)| g.apply(p + z))
            .collect();
        (z_c.to_vec(), s)
    }

    pub fn observe(&self, z_c: &[f64], z_s: &[f64]) -> Vec<f64> {
        let (a, b) = self.inner(z_c, z_s);
        self.mechanism.mix(&a, &b)
    }
}

pub fn build_counterexample(config: &ScmConfig, specs: &[DomainSpec]) -> Result<Counterexample> {
    if config.family != Family::PostNonlinear {
        return Err(Error::config(
            "scm.family",
            "the counterexample needs explicit g_c, g_s1, g_s2; use family = post_nonlinear",
        ));
    }
    if specs.len() != config.num_domains {
        return Err(Error::invalid(format!(
            "expected {} domain specs, got {}",
            config.num_domains,
            specs.len()
        )));
    }
    Ok(Counterexample {
        mechanism: Mechanism::draw(config)?,
        specs: specs.to_vec(),
    })
}

/// Outcome of running both generators on shared noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub samples: usize,
    /// Largest `|x − x'|` over all samples and coordinates.
    pub max_abs_diff: f64,
    /// Largest `|z'_c − z_c|`; zero by construction.
    pub max_content_diff: f64,
    /// Largest `|z'_s − z_s|`; positive whenever `g_s1` matters.
    pub max_style_diff: f64,
    /// Pearson correlation between the first content and first style
    /// coordinate under the original generator.
    pub corr_original: f64,
    pub corr_alternative: f64,
}

pub fn check_counterexample(config: &ScmConfig) -> Result<EquivalenceReport> {
    let specs = sample_domain_specs(config)?;
    let cx = build_counterexample(config, &specs)?;
    let d_c = config.d_c;
    let mut max_abs_diff = 0.0_f64;
    let mut max_content_diff = 0.0_f64;
    let mut max_style_diff = 0.0_f64;
    let (mut zc0, mut zs0, mut zc1, mut zs1) = (vec![], vec![], vec![], vec![]);
    for spec in &specs {
        let seed = derive_seed(config.seed, "noise", spec.domain_id() as u64);
        for row in sample_noise(spec, config.samples_per_domain, seed)? {
            let (n_c, n_s) = row.split_at(d_c);
            let (z_c, z_s) = cx.mechanism.latents(n_c, n_s);
            let x = cx.mechanism.mix(&z_c, &z_s);
            let (a_c, a_s) = cx.latents(n_c, n_s);
            let x_alt = cx.observe(&a_c, &a_s);
            for (p, q) in x.iter().zip(&x_alt) {
                max_abs_diff = max_abs_diff.max((p - q).abs());
            }
            for (p, q) in z_c.iter().zip(&a_c) {
                max_content_diff = max_content_diff.max((p - q).abs());
            }
            for (p, q) in z_s.iter().zip(&a_s) {
                max_style_diff = max_style_diff.max((p - q).abs());
            }
            zc0.push(z_c[0]);
            zs0.push(z_s[0]);
            zc1.push(a_c[0]);
            zs1.push(a_s[0]);
        }
    }
    Ok(EquivalenceReport {
        samples: zc0.len(),
        max_abs_diff,
        max_content_diff,
        max_style_diff,
        corr_original: pearson(&zc0, &zs0)?,
        corr_alternative: pearson(&zc1, &zs1)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariabilityReport {
    /// `2ℓ × 2ℓ`, column `k−1` is `η(u_k) − η(u_0)`.
    pub matrix: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    /// Infinite when flagged singular.
    pub condition_number: f64,
    pub singular: bool,
}

/// Builds the natural-parameter difference matrix from exactly `2ℓ + 1`
/// domains and reports whether it is invertible.
pub fn variability_matrix(specs: &[DomainSpec]) -> Result<VariabilityReport> {
    let ell = specs.first().map_or(0, DomainSpec::dim);
    if ell == 0 || specs.len() != 2 * ell + 1 {
        return Err(Error::invalid(format!(
            "need exactly 2ℓ+1 = {} domain specs, got {}",
            2 * ell + 1,
            specs.len()
        )));
    }
    if specs.iter().any(|s| s.dim() != ell) {
        return Err(Error::invalid("domain specs disagree on noise dimension"));
    }
    let base = specs[0].natural_params();
    let size = 2 * ell;
    let cols: Vec<Vec<f64>> = specs[1..]
        .iter()
        .map(|s| s.natural_params().iter().zip(&base).map(|(a, b)| a - b).collect())
        .collect();
    let m = DMatrix::from_fn(size, size, |r, c| cols[c][r]);
    let sv = m.clone().svd(false, false).singular_values;
    let mut singular_values: Vec<f64> = sv.iter().copied().collect();
    singular_values.sort_by(|a, b| b.total_cmp(a));
    let (max, min) = (singular_values[0], singular_values[size - 1]);
    let singular = max == 0.0 || min < SINGULAR_TOLERANCE * max;
    Ok(VariabilityReport {
        matrix: (0..size).map(|r| (0..size).map(|c| m[(r, c)]).collect()).collect(),
        singular_values,
        condition_number: if singular { f64::INFINITY } else { max / min },
        singular,
    })
}
