//! Labeled multi-domain datasets and their CSV form.
//!
//! Observations: `domain,label,x0,...,x{d-1}` with an empty label for
//! unlabeled rows. Ground-truth latents go to a sibling file
//! `domain,nc0,...,ns0,...,zc0,...,zs0,...,y` aligned by row index; its `y`
//! column carries labels withheld from the observation file.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    Regression,
    Classification { num_classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Value(f64),
    Class(usize),
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Value(v) => v,
            Label::Class(c) => c as f64,
        }
    }

    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Value(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub y: Option<Label>,
    pub domain: usize,
}

/// Ground-truth latent noise and latent variables for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSample {
    pub n_c: Vec<f64>,
    pub n_s: Vec<f64>,
    pub z_c: Vec<f64>,
    pub z_s: Vec<f64>,
    pub domain: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub num_domains: usize,
    /// The unlabeled domain, if any.
    pub target_domain: Option<usize>,
    pub samples: Vec<LabeledSample>,
    /// Ground truth, aligned index-for-index with `samples`.
    pub latents: Option<Vec<LatentSample>>,
    /// True labels aligned with `samples`, including those stripped from
    /// target rows. Used only for evaluation.
    pub eval_labels: Vec<Option<Label>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn d_x(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x.len())
    }

    pub fn domain_indices(&self, domain: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.samples[i].domain == domain)
            .collect()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.samples[i].y.is_some())
            .collect()
    }

    /// Rows of source domains (every domain except the target).
    pub fn source_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| Some(self.samples[i].domain) != self.target_domain)
            .collect()
    }

    pub fn target_indices(&self) -> Vec<usize> {
        match self.target_domain {
            Some(t) => self.domain_indices(t),
            None => Vec::new(),
        }
    }

    pub fn domain_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_domains];
        for s in &self.samples {
            counts[s.domain] += 1;
        }
        counts
    }

    /// Per-domain, per-class counts of the labels a resampler may use.
    pub fn class_counts(&self) -> Result<Vec<Vec<usize>>> {
        let Task::Classification { num_classes } = self.task else {
            return Err(Error::invalid("class counts need a classification dataset"));
        };
        let mut counts = vec![vec![0; num_classes]; self.num_domains];
        for (s, y) in self.samples.iter().zip(&self.eval_labels) {
            if let Some(Label::Class(c)) = y.or(s.y) {
                counts[s.domain][c] += 1;
            }
        }
        Ok(counts)
    }

    /// Keeps the listed rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            task: self.task,
            num_domains: self.num_domains,
            target_domain: self.target_domain,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            latents: self
                .latents
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i].clone()).collect()),
            eval_labels: indices.iter().map(|&i| self.eval_labels[i]).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d_x = self.d_x();
        if self.eval_labels.len() != self.samples.len() {
            return Err(Error::invalid("eval_labels not aligned with samples"));
        }
        if let Some(l) = &self.latents {
            if l.len() != self.samples.len() {
                return Err(Error::invalid("latents not aligned with samples"));
            }
        }
        if let Some(t) = self.target_domain {
            if t >= self.num_domains {
                return Err(Error::invalid(format!(
                    "target domain {t} outside 0..{}",
                    self.num_domains
                )));
            }
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.x.len() != d_x {
                return Err(Error::invalid(format!("row {i}: expected {d_x} features")));
            }
            if s.domain >= self.num_domains {
                return Err(Error::invalid(format!("row {i}: domain {} out of range", s.domain)));
            }
            if s.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("row {i}: non-finite feature")));
            }
            let is_target = Some(s.domain) == self.target_domain;
            if is_target && s.y.is_some() {
                return Err(Error::invalid(format!("row {i}: target row carries a label")));
            }
            if let (Some(y), Task::Classification { num_classes }) = (s.y, self.task) {
                match y {
                    Label::Class(c) if c < num_classes => {}
                    _ => return Err(Error::invalid(format!("row {i}: bad class label {y:?}"))),
                }
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["domain".to_string(), "label".to_string()];
        header.extend((0..self.d_x()).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for s in &self.samples {
            let mut rec = vec![s.domain.to_string(), s.y.map(format_label).unwrap_or_default()];
            rec.extend(s.x.iter().map(|&v| format_f64(v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_latents_csv<W: Write>(&self, out: W) -> Result<()> {
        let latents = self
            .latents
            .as_ref()
            .ok_or_else(|| Error::invalid("dataset has no ground-truth latents"))?;
        let (d_c, d_s) = latents
            .first()
            .map_or((0, 0), |l| (l.n_c.len(), l.n_s.len()));
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["domain".to_string()];
        for (prefix, d) in [("nc", d_c), ("ns", d_s), ("zc", d_c), ("zs", d_s)] {
            header.extend((0..d).map(|j| format!("{prefix}{j}")));
        }
        header.push("y".into());
        w.write_record(&header)?;
        for (l, y) in latents.iter().zip(&self.eval_labels) {
            let mut rec = vec![l.domain.to_string()];
            for part in [&l.n_c, &l.n_s, &l.z_c, &l.z_s] {
                rec.extend(part.iter().map(|&v| format_f64(v)));
            }
            rec.push(y.map(format_label).unwrap_or_default());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the observation CSV. Labels found on `target_domain` rows are
    /// moved into `eval_labels` and stripped from the training view.
    pub fn read_csv<R: Read>(input: R, task: Task, target_domain: Option<usize>) -> Result<Dataset> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        if header.len() < 3 || &header[0] != "domain" || &header[1] != "label" {
            return Err(Error::invalid(
                "dataset CSV header must start with `domain,label,x0`",
            ));
        }
        for (j, name) in header.iter().skip(2).enumerate() {
            if name != format!("x{j}") {
                return Err(Error::invalid(format!("unexpected column `{name}`, wanted x{j}")));
            }
        }
        let mut samples = Vec::new();
        let mut eval_labels = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let domain: usize = rec[0]
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("row {i}: bad domain `{}`", &rec[0])))?;
            let label = parse_label(&rec[1], task).map_err(|m| Error::invalid(format!("row {i}: {m}")))?;
            let x = rec
                .iter()
                .skip(2)
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::invalid(format!("row {i}: {e}")))?;
            let is_target = Some(domain) == target_domain;
            eval_labels.push(label);
            samples.push(LabeledSample {
                x,
                y: if is_target { None } else { label },
                domain,
            });
        }
        let num_domains = samples
            .iter()
            .map(|s| s.domain + 1)
            .chain(target_domain.map(|t| t + 1))
            .max()
            .unwrap_or(0);
        let ds = Dataset {
            task,
            num_domains,
            target_domain,
            samples,
            latents: None,
            eval_labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Attaches a latent CSV written by [`Dataset::write_latents_csv`].
    pub fn attach_latents_csv<R: Read>(&mut self, input: R) -> Result<()> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let count = |p: &str| header.iter().filter(|h| h.starts_with(p)).count();
        let (d_c, d_s) = (count("nc"), count("ns"));
        if header.len() != 2 + 2 * (d_c + d_s) || &header[0] != "domain" {
            return Err(Error::invalid("malformed latent CSV header"));
        }
        let mut latents = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let num = |k: usize| -> Result<f64> {
                rec[k]
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("latent row {i}: bad number `{}`", &rec[k])))
            };
            let block = |start: usize, len: usize| (start..start + len).map(num).collect::<Result<Vec<_>>>();
            let domain = rec[0]
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("latent row {i}: bad domain")))?;
            let l = LatentSample {
                n_c: block(1, d_c)?,
                n_s: block(1 + d_c, d_s)?,
                z_c: block(1 + d_c + d_s, d_c)?,
                z_s: block(1 + 2 * d_c + d_s, d_s)?,
                domain,
            };
            let y = parse_label(&rec[header.len() - 1], self.task)
                .map_err(|m| Error::invalid(format!("latent row {i}: {m}")))?;
            if i < self.eval_labels.len() && self.eval_labels[i].is_none() {
                self.eval_labels[i] = y;
            }
            latents.push(l);
        }
        if latents.len() != self.samples.len() {
            return Err(Error::invalid(format!(
                "latent CSV has {} rows, dataset has {}",
                latents.len(),
                self.samples.len()
            )));
        }
        if latents.iter().zip(&self.samples).any(|(l, s)| l.domain != s.domain) {
            return Err(Error::invalid("latent CSV domains do not line up with dataset"));
        }
        self.latents = Some(latents);
        Ok(())
    }
}

/// 17 significant digits; enough to round-trip any `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn format_label(y: Label) -> String {
    match y {
        Label::Value(v) => format_f64(v),
        Label::Class(c) => c.to_string(),
    }
}

fn parse_label(field: &str, task: Task) -> std::result::Result<Option<Label>, String> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(None);
    }
    match task {
        Task::Regression => field
            .parse::<f64>()
            .map(|v| Some(Label::Value(v)))
            .map_err(|e| format!("bad label `{field}`: {e}")),
        Task::Classification { num_classes } => {
            let c: usize = field
                .parse()
                .map_err(|_| format!("bad class label `{field}`"))?;
            if c >= num_classes {
                return Err(format!("class {c} outside 0..{num_classes}"));
            }
            Ok(Some(Label::Class(c)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset {
            task: Task::Regression,
            num_domains: 2,
            target_domain: Some(1),
            samples: vec![
                LabeledSample {
                    x: vec![0.1, -2.0],
                    y: Some(Label::Value(1.0 / 3.0)),
                    domain: 0,
                },
                LabeledSample {
                    x: vec![1e-300, 5.5],
                    y: None,
                    domain: 1,
                },
            ],
            latents: Some(vec![
                LatentSample {
                    n_c: vec![1.0],
                    n_s: vec![2.0],
                    z_c: vec![1.0],
                    z_s: vec![3.0],
                    domain: 0,
                },
                LatentSample {
                    n_c: vec![0.5],
                    n_s: vec![-1.0],
                    z_c: vec![0.5],
                    z_s: vec![-0.875],
                    domain: 1,
                },
            ]),
            eval_labels: vec![Some(Label::Value(1.0 / 3.0)), Some(Label::Value(0.125))],
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = tiny();
        let mut obs = Vec::new();
        ds.write_csv(&mut obs).unwrap();
        let text = String::from_utf8(obs.clone()).unwrap();
        assert!(text.starts_with("domain,label,x0,x1\n"));
        assert!(text.contains("\n1,,"), "unlabeled row keeps an empty label: {text}");

        let mut lat = Vec::new();
        ds.write_latents_csv(&mut lat).unwrap();
        assert!(String::from_utf8(lat.clone())
            .unwrap()
            .starts_with("domain,nc0,ns0,zc0,zs0,y\n"));

        let mut back = Dataset::read_csv(obs.as_slice(), Task::Regression, Some(1)).unwrap();
        back.attach_latents_csv(lat.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn target_labels_are_stripped_on_read() {
        let text = "domain,label,x0\n0,1,0.5\n1,2,0.25\n";
        let ds = Dataset::read_csv(
            text.as_bytes(),
            Task::Classification { num_classes: 3 },
            Some(1),
        )
        .unwrap();
        assert_eq!(ds.samples[1].y, None);
        assert_eq!(ds.eval_labels[1], Some(Label::Class(2)));
        assert_eq!(ds.class_counts().unwrap(), vec![vec![0, 1, 0], vec![0, 0, 1]]);
    }

    #[test]
    fn rejects_bad_header_and_class() {
        assert!(Dataset::read_csv("d,label,x0\n".as_bytes(), Task::Regression, None).is_err());
        let bad = "domain,label,x0\n0,7,1.0\n";
        assert!(Dataset::read_csv(bad.as_bytes(), Task::Classification { num_classes: 3 }, None).is_err());
    }
}
