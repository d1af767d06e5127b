use rand::seq::SliceRandom;
use rand::RngExt;
use rand_distr::StandardNormal;

use super::series::{Run, SeriesSet};
use crate::seed::{self, SeedRng};
use crate::{Error, Result};

const STREAM_CLASS: u64 = 0x5359_4e43;
const STREAM_RUN: u64 = 0x5359_4e52;

/// Synthetic fault data.
///
/// Every variable carries a unit-variance AR(1) latent. Class `c` couples
/// `pairs` disjoint variable pairs `(i, j)` with `j - i >= ceil(n / 2)` by
/// replacing the latent of `j` with `(z_j + γ·s·z_i) / sqrt(1 + γ²)` for a
/// class-specific sign `s`, and (when `shift` is set) offsets a small
/// class-specific variable subset. The observed value is
/// `offset + σ·(sqrt(1 - white)·latent + sqrt(white)·ε)` with white noise `ε`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub classes: usize,
    pub runs_per_class: usize,
    pub samples_per_run: usize,
    /// Coupling strength γ.
    pub coupling: f64,
    /// Noise scale σ.
    pub noise: f64,
    /// Share of white noise in the unit-variance stochastic part.
    pub white: f64,
    /// AR(1) coefficient φ.
    pub ar: f64,
    pub pairs: usize,
    pub shift: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 50,
            classes: 4,
            runs_per_class: 5,
            samples_per_run: 400,
            coupling: 1.0,
            noise: 1.0,
            white: 0.1,
            ar: 0.5,
            pairs: 3,
            shift: true,
        }
    }
}

/// Hidden structure of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPattern {
    /// `(i, j, sign)`: `j` is driven by `i`.
    pub couplings: Vec<(usize, usize, f64)>,
    /// `(variable, offset)`.
    pub offsets: Vec<(usize, f64)>,
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.classes == 0 || self.runs_per_class == 0 || self.samples_per_run == 0 {
            return Err(Error::invalid("synthetic extents must be >= 1"));
        }
        if !(self.coupling >= 0.0 && self.coupling.is_finite()) {
            return Err(Error::invalid("coupling must be finite and >= 0"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.white) {
            return Err(Error::invalid("white noise share must be in [0, 1]"));
        }
        if !(self.ar.abs() < 1.0) {
            return Err(Error::invalid("AR coefficient must satisfy |φ| < 1"));
        }
        Ok(())
    }

    /// Smallest index distance of a coupled pair.
    pub fn min_distance(&self) -> usize {
        self.n.div_ceil(2)
    }

    /// The class structures `gen_synthetic` uses for `seed`.
    pub fn patterns(&self, seed: u64) -> Result<Vec<ClassPattern>> {
        self.validate()?;
        let mut used_shifts: Vec<Vec<usize>> = Vec::new();
        let mut out = Vec::with_capacity(self.classes);
        for c in 0..self.classes {
            let mut rng = seed::rng(seed::derive(seed, STREAM_CLASS, c as u64, 0));
            let couplings = if self.coupling > 0.0 { self.pick_pairs(&mut rng) } else { Vec::new() };
            let mut offsets = Vec::new();
            if self.shift {
                let k = (self.n / 10).max(1);
                let mut vars: Vec<usize> = (0..self.n).collect();
                let mut subset = Vec::new();
                for _ in 0..64 {
                    vars.shuffle(&mut rng);
                    subset = vars[..k].to_vec();
                    subset.sort_unstable();
                    if !used_shifts.contains(&subset) {
                        break;
                    }
                }
                offsets = subset.iter().map(|&v| (v, rng.random_range(1.0..2.0))).collect();
                used_shifts.push(subset);
            }
            out.push(ClassPattern { couplings, offsets });
        }
        Ok(out)
    }

    fn pick_pairs(&self, rng: &mut SeedRng) -> Vec<(usize, usize, f64)> {
        let d = self.min_distance();
        let mut candidates: Vec<(usize, usize)> = (0..self.n).flat_map(|i| (i + d..self.n).map(move |j| (i, j))).collect();
        candidates.shuffle(rng);
        let mut taken = vec![false; self.n];
        let mut pairs = Vec::new();
        for (i, j) in candidates {
            if pairs.len() == self.pairs {
                break;
            }
            if taken[i] || taken[j] {
                continue;
            }
            taken[i] = true;
            taken[j] = true;
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            pairs.push((i, j, sign));
        }
        pairs.sort_by_key(|&(i, j, _)| (i, j));
        pairs
    }
}

/// Generates `classes × runs_per_class` runs, labelled `1..=classes`, with
/// run ids `1..=runs_per_class`. Fully determined by `cfg` and `seed`.
pub fn gen_synthetic(cfg: &SynthConfig, seed: u64) -> Result<SeriesSet> {
    let patterns = cfg.patterns(seed)?;
    let n = cfg.n;
    let innovation = (1.0 - cfg.ar * cfg.ar).sqrt();
    let norm = (1.0 + cfg.coupling * cfg.coupling).sqrt();
    let (latent_w, white_w) = ((1.0 - cfg.white).sqrt(), cfg.white.sqrt());
    let mut base = vec![0.0; n];

    let mut runs = Vec::with_capacity(cfg.classes * cfg.runs_per_class);
    for (c, pattern) in patterns.iter().enumerate() {
        base.iter_mut().for_each(|b| *b = 0.0);
        for &(v, off) in &pattern.offsets {
            base[v] = off;
        }
        for r in 0..cfg.runs_per_class {
            let mut rng = seed::rng(seed::derive(seed, STREAM_RUN, c as u64, r as u64));
            let mut z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let mut samples = Vec::with_capacity(cfg.samples_per_run * n);
            let mut x = vec![0.0; n];
            for t in 0..cfg.samples_per_run {
                if t > 0 {
                    for zv in z.iter_mut() {
                        let e: f64 = rng.sample(StandardNormal);
                        *zv = cfg.ar * *zv + innovation * e;
                    }
                }
                x.copy_from_slice(&z);
                for &(i, j, s) in &pattern.couplings {
                    x[j] = (z[j] + cfg.coupling * s * z[i]) / norm;
                }
                for v in 0..n {
                    let e: f64 = rng.sample(StandardNormal);
                    samples.push(base[v] + cfg.noise * (latent_w * x[v] + white_w * e));
                }
            }
            runs.push(Run {
                label: c + 1,
                run_id: (r + 1).to_string(),
                samples,
                sampling_period: None,
            });
        }
    }
    SeriesSet::new((0..n).map(|v| format!("x{}", v + 1)).collect(), runs)
}
