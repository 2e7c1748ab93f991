//! The `lcslab` command line: file-driven experiments with JSON configs,
//! CSV data and JSON reports on stdout.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Task};
use crate::diagnostics::gradcheck_report;
use crate::error::{Error, Result};
use crate::eval::{self, MetricReport};
use crate::lcsvae::{Checkpoint, Model};
use crate::resampler::{discretize, solve_marginals, subsample, ResampleSpec};
use crate::scm::{self, ScmConfig};
use crate::trainer::{train_erm, TrainConfig, TrainState, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "lcslab", version, about = "Latent covariate shift experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// JSON experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for output files.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic dataset and its ground-truth latents.
    Generate(Common),
    /// Train the VAE; writes a checkpoint, history and resumable state.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a saved train_state.json.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also fit the ERM baseline and report its target metric.
        #[arg(long)]
        erm: bool,
    },
    /// Score a checkpoint on the configured dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Solve label marginals and subsample the configured dataset.
    Resample(Common),
    /// Check the non-identifiability construction on shared noise.
    Counterexample(Common),
    /// Finite-difference check of every op and loss.
    Gradcheck(Common),
}

/// A dataset read from disk instead of generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub csv: PathBuf,
    #[serde(default)]
    pub latents: Option<PathBuf>,
    pub task: Task,
    #[serde(default)]
    pub target_domain: Option<usize>,
    #[serde(default)]
    pub num_domains: Option<usize>,
    pub d_c: usize,
    pub d_s: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResampleSection {
    pub num_classes: usize,
    pub target_kl: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub scm: Option<ScmConfig>,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub resample: Option<ResampleSection>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "<root>".to_string() } else { path };
            Error::config(field, e.into_inner().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Self::parse(&fs::read_to_string(path)?)?;
        // Relative data paths are taken from the config's directory.
        if let (Some(d), Some(base)) = (c.data.as_mut(), path.parent()) {
            d.csv = base.join(&d.csv);
            if let Some(l) = d.latents.as_mut() {
                *l = base.join(&*l);
            }
        }
        Ok(c)
    }

    pub fn override_seed(&mut self, seed: u64) {
        if let Some(s) = self.scm.as_mut() {
            s.seed = seed;
        }
        if let Some(t) = self.train.as_mut() {
            t.seed = seed;
        }
        if let Some(r) = self.resample.as_mut() {
            r.seed = seed;
        }
    }

    fn scm(&self) -> Result<&ScmConfig> {
        self.scm.as_ref().ok_or_else(|| Error::config("scm", "missing section"))
    }

    fn train(&self) -> Result<&TrainConfig> {
        self.train.as_ref().ok_or_else(|| Error::config("train", "missing section"))
    }

    /// The dataset plus its content and style dimensions.
    pub fn dataset(&self) -> Result<(Dataset, usize, usize)> {
        match (&self.scm, &self.data) {
            (Some(_), Some(_)) => Err(Error::config("data", "give either `scm` or `data`, not both")),
            (Some(s), None) => Ok((scm::generate(s)?, s.d_c, s.d_s)),
            (None, Some(d)) => {
                let mut ds = Dataset::read_csv(BufReader::new(File::open(&d.csv)?), d.task, d.target_domain)?;
                if let Some(m) = d.num_domains {
                    if m < ds.num_domains {
                        return Err(Error::config("data.num_domains", "smaller than the domains in the CSV"));
                    }
                    ds.num_domains = m;
                }
                if let Some(l) = &d.latents {
                    ds.attach_latents_csv(BufReader::new(File::open(l)?))?;
                }
                Ok((ds, d.d_c, d.d_s))
            }
            (None, None) => Err(Error::config("scm", "a dataset needs an `scm` or a `data` section")),
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Invalid(_) => EXIT_CONFIG,
        Error::NonFinite { .. } | Error::NoConvergence { .. } | Error::Ndiff(_) => EXIT_NUMERIC,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) => EXIT_IO,
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::config("--config", "this command needs a config file"))?;
    let mut c = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        c.override_seed(seed);
    }
    Ok(c)
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .ok_or_else(|| Error::config("--out", "this command writes files and needs an output directory"))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn emit<T: Serialize>(stdout: &mut dyn Write, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut *stdout, value)?;
    stdout.write_all(b"\n")?;
    Ok(())
}

#[derive(Serialize)]
struct GenerateSummary {
    rows: usize,
    domain_counts: Vec<usize>,
    target_domain: Option<usize>,
    dataset: String,
    latents: String,
}

fn cmd_generate(common: &Common, stdout: &mut dyn Write) -> Result<()> {
    let config = load_config(common)?;
    let ds = scm::generate(config.scm()?)?;
    let dir = out_dir(common)?;
    let data_path = dir.join("dataset.csv");
    let latent_path = dir.join("latents.csv");
    ds.write_csv(BufWriter::new(File::create(&data_path)?))?;
    ds.write_latents_csv(BufWriter::new(File::create(&latent_path)?))?;
    emit(
        stdout,
        &GenerateSummary {
            rows: ds.len(),
            domain_counts: ds.domain_counts(),
            target_domain: ds.target_domain,
            dataset: data_path.display().to_string(),
            latents: latent_path.display().to_string(),
        },
    )
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    last: Option<crate::trainer::Snapshot>,
    #[serde(skip_serializing_if = "Option::is_none")]
    erm_target_metric: Option<eval::TargetMetric>,
    checkpoint: String,
    history: String,
    state: String,
}

fn cmd_train(common: &Common, resume: Option<&Path>, erm: bool, stdout: &mut dyn Write) -> Result<()> {
    let config = load_config(common)?;
    let tc = config.train()?.clone();
    let (ds, d_c, d_s) = config.dataset()?;
    let dir = out_dir(common)?;
    let mut trainer = match resume {
        Some(p) => {
            let saved: TrainState = serde_json::from_reader(BufReader::new(File::open(p)?))?;
            let mut t = Trainer::resume(&ds, saved)?;
            let mut wanted = tc.clone();
            wanted.epochs = t.config().epochs;
            if &wanted != t.config() {
                return Err(Error::config("train", "differs from the saved state beyond `epochs`"));
            }
            t.set_epochs(tc.epochs)?;
            t
        }
        None => {
            let mc = tc.model_config(&ds, d_c, d_s)?;
            Trainer::new(&ds, tc.clone(), mc)?
        }
    };
    trainer.run()?;
    let paths = (
        dir.join("checkpoint.json"),
        dir.join("history.jsonl"),
        dir.join("train_state.json"),
    );
    write_json(&paths.0, &trainer.model().to_checkpoint())?;
    let mut h = BufWriter::new(File::create(&paths.1)?);
    trainer.history().write_jsonl(&mut h)?;
    h.flush()?;
    write_json(&paths.2, &trainer.save())?;
    let erm_target_metric = if erm {
        let (m, _) = train_erm(&ds, &tc)?;
        write_json(&dir.join("erm.json"), &m)?;
        Some(m.target_metric(&ds)?)
    } else {
        None
    };
    emit(
        stdout,
        &TrainSummary {
            epochs: trainer.epochs_done(),
            last: trainer.history().last().cloned(),
            erm_target_metric,
            checkpoint: paths.0.display().to_string(),
            history: paths.1.display().to_string(),
            state: paths.2.display().to_string(),
        },
    )
}

fn cmd_evaluate(common: &Common, checkpoint: &Path, stdout: &mut dyn Write) -> Result<()> {
    let config = load_config(common)?;
    let (ds, _, _) = config.dataset()?;
    let ck: Checkpoint = serde_json::from_reader(BufReader::new(File::open(checkpoint)?))?;
    let model = Model::from_checkpoint(&ck)?;
    let report: MetricReport = eval::report(&model, &ds)?;
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("metrics.json"), &report)?;
    }
    emit(stdout, &report)
}

#[derive(Serialize)]
struct ResampleSummary {
    target_kl: f64,
    max_residual: f64,
    scales: Vec<usize>,
    counts: Vec<Vec<usize>>,
    achieved_kl: Vec<f64>,
    dataset: String,
    marginals: String,
}

fn cmd_resample(common: &Common, stdout: &mut dyn Write) -> Result<()> {
    let config = load_config(common)?;
    let rs = config
        .resample
        .as_ref()
        .ok_or_else(|| Error::config("resample", "missing section"))?;
    let (ds, _, _) = config.dataset()?;
    let ds = match ds.task {
        Task::Regression => discretize(&ds, rs.num_classes)?,
        Task::Classification { num_classes } if num_classes == rs.num_classes => ds,
        Task::Classification { num_classes } => {
            return Err(Error::config(
                "resample.num_classes",
                format!("dataset has {num_classes} classes"),
            ))
        }
    };
    let marginals = solve_marginals(&ResampleSpec {
        num_domains: ds.num_domains,
        num_classes: rs.num_classes,
        target_kl: rs.target_kl,
        seed: rs.seed,
    })?;
    let out = subsample(&ds, &marginals, rs.seed)?;
    let achieved = eval::label_distributions(&out.dataset)?
        .iter()
        .zip(&marginals.distributions)
        .map(|(emp, p)| eval::label_kl(emp, p))
        .collect::<Result<Vec<_>>>()?;
    let dir = out_dir(common)?;
    let data_path = dir.join("resampled.csv");
    let marg_path = dir.join("marginals.json");
    out.dataset.write_csv(BufWriter::new(File::create(&data_path)?))?;
    write_json(&marg_path, &marginals)?;
    emit(
        stdout,
        &ResampleSummary {
            target_kl: marginals.target_kl,
            max_residual: marginals.max_residual,
            scales: out.scales,
            counts: out.counts,
            achieved_kl: achieved,
            dataset: data_path.display().to_string(),
            marginals: marg_path.display().to_string(),
        },
    )
}

fn cmd_counterexample(common: &Common, stdout: &mut dyn Write) -> Result<()> {
    let config = load_config(common)?;
    let report = scm::check_counterexample(config.scm()?)?;
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("counterexample.json"), &report)?;
    }
    emit(stdout, &report)
}

fn cmd_gradcheck(common: &Common, stdout: &mut dyn Write) -> Result<()> {
    let report = gradcheck_report(common.seed.unwrap_or(0))?;
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("gradcheck.json"), &report)?;
    }
    emit(stdout, &report)?;
    if !report.pass {
        return Err(Error::NoConvergence {
            what: "gradcheck",
            iterations: 0,
            residual: report.max_error,
        });
    }
    Ok(())
}

/// Runs one parsed command, writing its report to `stdout`.
pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Generate(c) => cmd_generate(c, stdout),
        Command::Train { common, resume, erm } => cmd_train(common, resume.as_deref(), *erm, stdout),
        Command::Evaluate { common, checkpoint } => cmd_evaluate(common, checkpoint, stdout),
        Command::Resample(c) => cmd_resample(c, stdout),
        Command::Counterexample(c) => cmd_counterexample(c, stdout),
        Command::Gradcheck(c) => cmd_gradcheck(c, stdout),
    }
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{e}");
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}
