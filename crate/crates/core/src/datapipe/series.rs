use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::{Error, Result};

/// One simulation run: `m` samples of `n` variables, stored time-major
/// (`samples[t * n + v]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Run {
    /// Fault label, `1..=C`.
    pub label: usize,
    pub run_id: String,
    pub samples: Vec<f64>,
    /// Sampling period in minutes, when known.
    pub sampling_period: Option<f64>,
}

impl Run {
    pub fn len(&self, n: usize) -> usize {
        self.samples.len() / n
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Labelled multivariate runs sharing one variable count.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesSet {
    n: usize,
    pub variable_names: Vec<String>,
    runs: Vec<Run>,
}

impl SeriesSet {
    pub fn new(variable_names: Vec<String>, runs: Vec<Run>) -> Result<Self> {
        let n = variable_names.len();
        if n == 0 {
            return Err(Error::invalid("a series set needs at least one variable"));
        }
        for r in &runs {
            if r.label == 0 {
                return Err(Error::invalid(format!("run {}: fault labels start at 1", r.run_id)));
            }
            if r.samples.len() % n != 0 {
                return Err(Error::invalid(format!(
                    "run {}: {} values is not a multiple of {n} variables",
                    r.run_id,
                    r.samples.len()
                )));
            }
        }
        Ok(SeriesSet {
            n,
            variable_names,
            runs,
        })
    }

    pub fn variables(&self) -> usize {
        self.n
    }

    pub fn runs(&self) -> &[Run] {
        &self.runs
    }

    /// Largest fault label present (0 for an empty set).
    pub fn max_label(&self) -> usize {
        self.runs.iter().map(|r| r.label).max().unwrap_or(0)
    }

    pub fn total_samples(&self) -> usize {
        self.runs.iter().map(|r| r.len(self.n)).sum()
    }

    /// Iterates over every sample row of every run.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.runs.iter().flat_map(|r| r.samples.chunks_exact(self.n))
    }
}

/// Per-variable mean and population standard deviation of training data.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Variables that were constant; their `std` was replaced by 1.
    pub degenerate: Vec<usize>,
}

const STATS_MAGIC: &str = "gfcnn-normstats 1";

impl NormStats {
    /// Welford accumulation over all samples of all runs.
    pub fn compute(train: &SeriesSet) -> Result<Self> {
        let n = train.variables();
        if train.total_samples() < 2 {
            return Err(Error::invalid("normalisation statistics need at least 2 samples"));
        }
        let mut mean = vec![0.0; n];
        let mut m2 = vec![0.0; n];
        let mut count = 0.0;
        for row in train.rows() {
            count += 1.0;
            for v in 0..n {
                let delta = row[v] - mean[v];
                mean[v] += delta / count;
                m2[v] += delta * (row[v] - mean[v]);
            }
        }
        let mut degenerate = Vec::new();
        let std = m2
            .iter()
            .enumerate()
            .map(|(v, &s)| {
                let sd = (s / count).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    degenerate.push(v);
                    1.0
                }
            })
            .collect();
        Ok(NormStats { mean, std, degenerate })
    }

    /// `(x - mean) / std` per variable, for any set with the same variables.
    pub fn normalize(&self, series: &SeriesSet) -> Result<SeriesSet> {
        let n = series.variables();
        if n != self.mean.len() {
            return Err(Error::invalid(format!(
                "series has {n} variables, statistics have {}",
                self.mean.len()
            )));
        }
        let runs = series
            .runs()
            .iter()
            .map(|r| {
                let samples = r
                    .samples
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| (x - self.mean[i % n]) / self.std[i % n])
                    .collect();
                Run {
                    samples,
                    ..r.clone()
                }
            })
            .collect();
        SeriesSet::new(series.variable_names.clone(), runs)
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        writeln!(s, "{STATS_MAGIC}").unwrap();
        writeln!(s, "variables {}", self.mean.len()).unwrap();
        writeln!(s, "mean {}", join(&self.mean)).unwrap();
        writeln!(s, "std {}", join(&self.std)).unwrap();
        let deg: Vec<String> = self.degenerate.iter().map(|d| d.to_string()).collect();
        writeln!(s, "degenerate {}", deg.join(" ")).unwrap();
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |r: &str| Error::format("normalisation stats", r.to_string());
        let mut lines = text.lines();
        if lines.next() != Some(STATS_MAGIC) {
            return Err(bad("missing header"));
        }
        let (mut n, mut mean, mut std, mut degenerate) = (None, None, None, Vec::new());
        for line in lines {
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or("");
            let rest: Vec<&str> = parts.collect();
            let floats = || -> Result<Vec<f64>> {
                rest.iter()
                    .map(|x| x.parse::<f64>().map_err(|_| bad(&format!("{key}: bad number {x:?}"))))
                    .collect()
            };
            match key {
                "variables" => n = rest.first().and_then(|x| x.parse::<usize>().ok()),
                "mean" => mean = Some(floats()?),
                "std" => std = Some(floats()?),
                "degenerate" => {
                    degenerate = rest
                        .iter()
                        .map(|x| x.parse().map_err(|_| bad("degenerate: bad index")))
                        .collect::<Result<_>>()?
                }
                "" => {}
                other => return Err(bad(&format!("unknown key {other:?}"))),
            }
        }
        let n = n.ok_or_else(|| bad("missing variables"))?;
        let mean = mean.ok_or_else(|| bad("missing mean"))?;
        let std = std.ok_or_else(|| bad("missing std"))?;
        if mean.len() != n || std.len() != n {
            return Err(bad("vector lengths do not match variable count"));
        }
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(bad("standard deviations must be positive"));
        }
        Ok(NormStats { mean, std, degenerate })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// A non-overlapping window cut from one run, laid out `n × w`
/// (row = variable, column = time).
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesWindow {
    pub label: usize,
    pub run_id: String,
    pub index: usize,
    pub values: Vec<f64>,
}

/// Cuts every run into `floor(m / w)` windows of width `w`. Trailing
/// samples are dropped; windows never span two runs.
pub fn window_series(series: &SeriesSet, w: usize) -> Result<Vec<SeriesWindow>> {
    if w == 0 {
        return Err(Error::invalid("window width must be >= 1"));
    }
    let n = series.variables();
    let mut out = Vec::new();
    for run in series.runs() {
        for index in 0..run.len(n) / w {
            let mut values = vec![0.0; n * w];
            for t in 0..w {
                let row = &run.samples[(index * w + t) * n..(index * w + t + 1) * n];
                for (v, &x) in row.iter().enumerate() {
                    values[v * w + t] = x;
                }
            }
            out.push(SeriesWindow {
                label: run.label,
                run_id: run.run_id.clone(),
                index,
                values,
            });
        }
    }
    Ok(out)
}
