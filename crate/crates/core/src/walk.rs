//! The twisted walk `S_n = e^{iβ}S_{n−1} + X_{n−1}`: checkpointed replica
//! ensembles, the group-embedding cross-check and the block reduction for
//! rational angles.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::group::{cocycle, Angle, GroupElement, GroupError, IndexedSequence, RationalAngle};
use crate::processes::{
    stream_rng, Field, IncrementStream, PreparedProcess, ProcessError, ProcessSpec,
};
use crate::spectral::geometric_grid;
use crate::stats::{binomial_se, mean_se, ComplexKahanSum, DiskRule, KahanSum};

pub const DEFAULT_ETA_GRID: [f64; 5] = [0.05, 0.1, 0.2, 0.3, 0.5];
/// Raw scaled samples kept across all checkpoints before switching to
/// streaming summaries.
pub const DEFAULT_SAMPLE_CAP: usize = 1 << 23;
/// Largest `replicas × n_max` accepted.
pub const DEFAULT_MAX_WORK: u64 = 100_000_000_000;
/// Replicas per unit of parallel work; fixed so results do not depend on
/// the worker count.
pub const CHUNK: usize = 256;
/// Points per ray of the characteristic-function grid.
pub const ECF_POINTS_PER_RAY: usize = 32;
/// Largest `|t|` on the characteristic-function grid.
pub const ECF_T_MAX: f64 = 4.0;

#[derive(Debug, Error)]
pub enum WalkError {
    #[error("invalid walk configuration: {0}")]
    InvalidConfig(String),
    #[error("resource cap exceeded: {work} steps requested, limit is {limit}")]
    ResourceCap { work: u64, limit: u64 },
    #[error("checkpoint {0} was not recorded")]
    UnknownCheckpoint(usize),
    #[error("raw samples were not retained at checkpoint {0}")]
    NoRawSamples(usize),
    #[error(transparent)]
    Process(#[from] ProcessError),
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// The twist angle, either a float or an exact rational multiple of 2π.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Beta {
    Radians(Angle),
    Rational(RationalAngle),
}

impl Beta {
    pub fn radians(x: f64) -> Self {
        Beta::Radians(Angle::new(x))
    }

    pub fn rational(p: i64, q: u64) -> Result<Self, WalkError> {
        Ok(Beta::Rational(RationalAngle::new(p, q)?))
    }

    pub fn angle(self) -> Angle {
        match self {
            Beta::Radians(a) => a,
            Beta::Rational(r) => r.angle(),
        }
    }

    /// `e^{iβ}`; for rational β taken from the exact residue.
    pub fn cis(self) -> Complex64 {
        match self {
            Beta::Radians(a) => a.cis(),
            Beta::Rational(r) => r.root_of_unity(r.numerator() as i64),
        }
    }

    /// `nβ mod 2π`, through integer arithmetic when β is rational.
    pub fn rotation_after(self, n: u64) -> Angle {
        match self {
            Beta::Radians(a) => Angle::new(a.radians() * n as f64),
            Beta::Rational(r) => r.angle_after(n),
        }
    }

    /// `(n·p) mod q` for rational β.
    pub fn residue_after(self, n: u64) -> Option<u64> {
        match self {
            Beta::Radians(_) => None,
            Beta::Rational(r) => Some(r.residue_after(n)),
        }
    }
}

impl fmt::Display for Beta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Beta::Radians(a) => write!(f, "{}", a.radians()),
            Beta::Rational(r) => write!(f, "{r}"),
        }
    }
}

impl FromStr for Beta {
    type Err = WalkError;

    /// Accepts a float in radians or the exact token `2pi*p/q`.
    fn from_str(s: &str) -> Result<Self, WalkError> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("2pi*") {
            let (p, q) = rest
                .split_once('/')
                .ok_or_else(|| WalkError::InvalidConfig(format!("expected 2pi*p/q, got {s:?}")))?;
            let p: i64 = p
                .trim()
                .parse()
                .map_err(|_| WalkError::InvalidConfig(format!("bad numerator in {s:?}")))?;
            let q: u64 = q
                .trim()
                .parse()
                .map_err(|_| WalkError::InvalidConfig(format!("bad denominator in {s:?}")))?;
            return Beta::rational(p, q);
        }
        let x: f64 = s
            .parse()
            .map_err(|_| WalkError::InvalidConfig(format!("cannot parse beta {s:?}")))?;
        if !x.is_finite() {
            return Err(WalkError::InvalidConfig("beta must be finite".into()));
        }
        Ok(Beta::radians(x))
    }
}

impl Serialize for Beta {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Beta {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(x) if x.is_finite() => Ok(Beta::radians(x)),
            Repr::Num(_) => Err(serde::de::Error::custom("beta must be finite")),
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkConfig {
    pub beta: Beta,
    pub n_max: usize,
    pub checkpoints: Vec<usize>,
    pub replicas: usize,
    pub seed: u64,
    pub eta_grid: Vec<f64>,
    #[serde(default = "default_sample_cap")]
    pub sample_cap: usize,
    #[serde(default = "default_max_work")]
    pub max_work: u64,
    /// Variance of a white component split off a Gaussian-spectral process
    /// and integrated out analytically in the unscaled small-ball estimate.
    /// Zero disables it.
    #[serde(default)]
    pub nugget: f64,
}

fn default_sample_cap() -> usize {
    DEFAULT_SAMPLE_CAP
}

fn default_max_work() -> u64 {
    DEFAULT_MAX_WORK
}

impl WalkConfig {
    /// Geometric checkpoints, the default η grid and caps.
    pub fn new(beta: Beta, n_max: usize, replicas: usize, seed: u64) -> Self {
        WalkConfig {
            beta,
            n_max,
            checkpoints: geometric_grid(n_max),
            replicas,
            seed,
            eta_grid: DEFAULT_ETA_GRID.to_vec(),
            sample_cap: DEFAULT_SAMPLE_CAP,
            max_work: DEFAULT_MAX_WORK,
            nugget: 0.0,
        }
    }

    pub fn dense(mut self) -> Self {
        self.checkpoints = (1..=self.n_max).collect();
        self
    }

    pub fn with_checkpoints(mut self, checkpoints: Vec<usize>) -> Self {
        self.checkpoints = checkpoints;
        self
    }

    pub fn with_eta_grid(mut self, eta_grid: Vec<f64>) -> Self {
        self.eta_grid = eta_grid;
        self
    }

    pub fn with_nugget(mut self, nugget: f64) -> Self {
        self.nugget = nugget;
        self
    }

    pub fn with_sample_cap(mut self, cap: usize) -> Self {
        self.sample_cap = cap;
        self
    }

    pub fn validate(&self) -> Result<(), WalkError> {
        let bad = |m: String| Err(WalkError::InvalidConfig(m));
        if self.n_max == 0 {
            return bad("n_max must be at least 1".into());
        }
        if self.replicas == 0 {
            return bad("replicas must be at least 1".into());
        }
        if self.checkpoints.is_empty() {
            return bad("checkpoints must be nonempty".into());
        }
        if self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return bad("checkpoints must be strictly increasing".into());
        }
        if self.checkpoints[0] == 0 || *self.checkpoints.last().unwrap() > self.n_max {
            return bad(format!("checkpoints must lie in [1, {}]", self.n_max));
        }
        if self.eta_grid.is_empty() {
            return bad("eta grid must be nonempty".into());
        }
        if self.eta_grid.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return bad("eta values must be positive and finite".into());
        }
        if self.eta_grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad("eta grid must be strictly increasing".into());
        }
        if !(self.nugget.is_finite() && self.nugget >= 0.0) {
            return bad("nugget must be nonnegative".into());
        }
        let work = self.replicas as u64 * self.n_max as u64;
        if work > self.max_work {
            return Err(WalkError::ResourceCap {
                work,
                limit: self.max_work,
            });
        }
        Ok(())
    }

    /// Whether every `k ≤ n` is a checkpoint.
    pub fn is_dense_through(&self, n: usize) -> bool {
        self.checkpoints.len() >= n
            && self.checkpoints[..n]
                .iter()
                .enumerate()
                .all(|(i, &c)| c == i + 1)
    }
}

/// One step of the recursion: `e^{iβ}s + x`.
pub fn step(s: Complex64, beta: Angle, x: Complex64) -> Complex64 {
    beta.cis() * s + x
}

/// Grid of characteristic-function arguments: `ECF_POINTS_PER_RAY` points on
/// the real ray and on the 45° ray, `|t|` up to `ECF_T_MAX`.
pub fn ecf_t_grid() -> Vec<Complex64> {
    [0.0, std::f64::consts::FRAC_PI_4]
        .iter()
        .flat_map(|&dir| {
            (1..=ECF_POINTS_PER_RAY).map(move |j| {
                Complex64::from_polar(ECF_T_MAX * j as f64 / ECF_POINTS_PER_RAY as f64, dir)
            })
        })
        .collect()
}

/// `e^{i⟨t, z⟩}` with `⟨t, z⟩ = Re(t̄ z)`.
pub fn char_term(t: Complex64, z: Complex64) -> Complex64 {
    let (s, c) = (t.conj() * z).re.sin_cos();
    Complex64::new(c, s)
}

/// Per-checkpoint summaries over the replica set.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointStats {
    pub n: usize,
    /// `nβ mod 2π`, carried alongside the walk.
    pub rotation: Angle,
    /// `(n·p) mod q` when β is rational.
    pub rotation_residue: Option<u64>,
    pub count: usize,
    /// Sums of `|n^{−1/2}S_n|²` and its square.
    pub sum_abs2: f64,
    pub sum_abs4: f64,
    /// Replicas with `|n^{−1/2}S_n| ≤ η`, per η.
    pub scaled_hits: Vec<u64>,
    /// Replicas with `|S_n| ≤ η`, per η.
    pub unscaled_hits: Vec<u64>,
    /// Conditional probabilities of `|S_n| ≤ η` given the non-white part,
    /// summed (and squared) over replicas, when a nugget is split off.
    pub conditional: Option<(Vec<f64>, Vec<f64>)>,
    /// Return counts `#{k ≤ n : |S_k| ≤ η}` summed over replicas.
    pub returns_sum: Vec<u64>,
    pub returns_sumsq: Vec<u128>,
    /// Sums of `e^{i⟨t, n^{−1/2}S_n⟩}` over the t grid.
    pub ecf_sum: Vec<Complex64>,
    /// Raw `n^{−1/2}S_n` in replica order, when within the sample cap.
    pub samples: Option<Vec<Complex64>>,
}

/// Point estimate with standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl CheckpointStats {
    /// Mean of `|n^{−1/2}S_n|²`.
    pub fn mean_abs2(&self) -> Estimate {
        let (value, se) = mean_se(self.sum_abs2, self.sum_abs4, self.count);
        Estimate { value, se }
    }

    pub fn scaled_small_ball(&self, eta_index: usize) -> Estimate {
        let p = self.scaled_hits[eta_index] as f64 / self.count as f64;
        Estimate {
            value: p,
            se: binomial_se(p, self.count),
        }
    }

    /// `P(|S_n| ≤ η)`, from the conditional estimator when available.
    pub fn unscaled_small_ball(&self, eta_index: usize) -> Estimate {
        match &self.conditional {
            Some((sum, sumsq)) => {
                let (value, se) = mean_se(sum[eta_index], sumsq[eta_index], self.count);
                Estimate { value, se }
            }
            None => {
                let p = self.unscaled_hits[eta_index] as f64 / self.count as f64;
                Estimate {
                    value: p,
                    se: binomial_se(p, self.count),
                }
            }
        }
    }

    pub fn mean_returns(&self, eta_index: usize) -> Estimate {
        let (value, se) = mean_se(
            self.returns_sum[eta_index] as f64,
            self.returns_sumsq[eta_index] as f64,
            self.count,
        );
        Estimate { value, se }
    }

    /// Empirical characteristic function on the t grid.
    pub fn ecf(&self) -> Vec<Complex64> {
        self.ecf_sum.iter().map(|z| z / self.count as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEnsemble {
    pub beta: Beta,
    pub n_max: usize,
    pub replicas: usize,
    pub eta_grid: Vec<f64>,
    pub t_grid: Vec<Complex64>,
    pub checkpoints: Vec<CheckpointStats>,
    /// Returns to `|S_k| ≤ η` with `n_max/2 < k ≤ n_max`, summed over replicas.
    pub tail_returns_sum: Vec<u64>,
    pub tail_returns_sumsq: Vec<u128>,
    pub max_abs: f64,
    pub nugget: f64,
    /// Set when a deadline stopped the run before all replicas were done.
    pub truncated: bool,
}

impl CheckpointEnsemble {
    pub fn index_of(&self, n: usize) -> Result<usize, WalkError> {
        self.checkpoints
            .binary_search_by_key(&n, |c| c.n)
            .map_err(|_| WalkError::UnknownCheckpoint(n))
    }

    pub fn checkpoint(&self, n: usize) -> Result<&CheckpointStats, WalkError> {
        Ok(&self.checkpoints[self.index_of(n)?])
    }

    pub fn samples(&self, n: usize) -> Result<&[Complex64], WalkError> {
        self.checkpoint(n)?
            .samples
            .as_deref()
            .ok_or(WalkError::NoRawSamples(n))
    }

    pub fn has_raw_samples(&self) -> bool {
        self.checkpoints.iter().all(|c| c.samples.is_some())
    }

    /// Returns in the last octave `(n_max/2, n_max]`, per η.
    pub fn tail_returns(&self, eta_index: usize) -> Estimate {
        let (value, se) = mean_se(
            self.tail_returns_sum[eta_index] as f64,
            self.tail_returns_sumsq[eta_index] as f64,
            self.replicas,
        );
        Estimate { value, se }
    }

    /// Bound on the accumulated rounding error of any recorded position,
    /// `n_max · ε · max|S|`.
    pub fn rounding_bound(&self) -> f64 {
        self.n_max as f64 * f64::EPSILON * self.max_abs
    }
}

/// Scheduling knobs that never change results, plus an optional deadline
/// after which no new replica chunk is started.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub workers: Option<usize>,
    pub deadline: Option<Instant>,
}

pub fn simulate(spec: &ProcessSpec, cfg: &WalkConfig) -> Result<CheckpointEnsemble, WalkError> {
    simulate_with(spec, cfg, RunOptions::default())
}

pub fn simulate_with_workers(
    spec: &ProcessSpec,
    cfg: &WalkConfig,
    workers: usize,
) -> Result<CheckpointEnsemble, WalkError> {
    simulate_with(
        spec,
        cfg,
        RunOptions {
            workers: Some(workers),
            deadline: None,
        },
    )
}

pub fn simulate_with(
    spec: &ProcessSpec,
    cfg: &WalkConfig,
    opts: RunOptions,
) -> Result<CheckpointEnsemble, WalkError> {
    cfg.validate()?;
    let ctx = Context::new(spec, cfg)?;
    let n_chunks = cfg.replicas.div_ceil(CHUNK);
    let run = || -> Vec<Option<Partial>> {
        (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                if opts.deadline.is_some_and(|d| Instant::now() > d) {
                    return None;
                }
                let lo = c * CHUNK;
                Some(ctx.run_chunk(lo, (lo + CHUNK).min(cfg.replicas)))
            })
            .collect()
    };
    let partials = match opts.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| WalkError::Pool(e.to_string()))?
            .install(run),
        None => run(),
    };

    let mut acc = ctx.empty_partial();
    let mut truncated = false;
    for p in partials {
        match p {
            Some(p) if !truncated => acc.merge(p),
            _ => truncated = true,
        }
    }
    if acc.replicas == 0 {
        return Err(WalkError::InvalidConfig(
            "deadline passed before any replica finished".into(),
        ));
    }
    Ok(ctx.finish(acc, truncated))
}

struct CondCheckpoint {
    cov: [f64; 3],
    /// Per η: whether the quadrature is used (white part wide enough).
    usable: Vec<bool>,
}

struct Context<'a> {
    cfg: &'a WalkConfig,
    process: PreparedProcess,
    rot: Complex64,
    eta2: Vec<f64>,
    /// Unit steps of the t grid along each ray.
    ecf_rays: Vec<Complex64>,
    keep_samples: bool,
    paired_streams: bool,
    nugget: Option<(Field, Vec<CondCheckpoint>, DiskRule)>,
}

struct Partial {
    replicas: usize,
    sum_abs2: Vec<KahanSum>,
    sum_abs4: Vec<KahanSum>,
    scaled_hits: Vec<Vec<u64>>,
    unscaled_hits: Vec<Vec<u64>>,
    cond_sum: Vec<Vec<KahanSum>>,
    cond_sumsq: Vec<Vec<KahanSum>>,
    returns_sum: Vec<Vec<u64>>,
    returns_sumsq: Vec<Vec<u128>>,
    ecf: Vec<Vec<ComplexKahanSum>>,
    samples: Vec<Vec<Complex64>>,
    tail_sum: Vec<u64>,
    tail_sumsq: Vec<u128>,
    max_abs2: f64,
}

impl Partial {
    fn merge(&mut self, other: Partial) {
        self.replicas += other.replicas;
        for c in 0..self.sum_abs2.len() {
            self.sum_abs2[c].add(other.sum_abs2[c].value());
            self.sum_abs4[c].add(other.sum_abs4[c].value());
            for e in 0..self.scaled_hits[c].len() {
                self.scaled_hits[c][e] += other.scaled_hits[c][e];
                self.unscaled_hits[c][e] += other.unscaled_hits[c][e];
                self.returns_sum[c][e] += other.returns_sum[c][e];
                self.returns_sumsq[c][e] += other.returns_sumsq[c][e];
            }
            for e in 0..self.cond_sum[c].len() {
                self.cond_sum[c][e].add(other.cond_sum[c][e].value());
                self.cond_sumsq[c][e].add(other.cond_sumsq[c][e].value());
            }
            for (a, b) in self.ecf[c].iter_mut().zip(&other.ecf[c]) {
                a.add(b.value());
            }
        }
        for (a, b) in self.samples.iter_mut().zip(other.samples) {
            a.extend(b);
        }
        for e in 0..self.tail_sum.len() {
            self.tail_sum[e] += other.tail_sum[e];
            self.tail_sumsq[e] += other.tail_sumsq[e];
        }
        self.max_abs2 = self.max_abs2.max(other.max_abs2);
    }
}

impl<'a> Context<'a> {
    fn new(spec: &ProcessSpec, cfg: &'a WalkConfig) -> Result<Self, WalkError> {
        let process = if cfg.nugget > 0.0 {
            spec.prepare_with_nugget(cfg.nugget)?
        } else {
            spec.prepare()?
        };
        let nugget = if cfg.nugget > 0.0 {
            let field = process.gaussian_plan().map(|p| p.field()).ok_or_else(|| {
                WalkError::InvalidConfig("nugget needs a gaussian-spectral process".into())
            })?;
            Some((
                field,
                conditional_checkpoints(cfg, field),
                DiskRule::new(8, 16),
            ))
        } else {
            None
        };
        let keep_samples =
            (cfg.replicas as u128 * cfg.checkpoints.len() as u128) <= cfg.sample_cap as u128;
        Ok(Context {
            cfg,
            paired_streams: process.gaussian_plan().is_some(),
            process,
            rot: cfg.beta.cis(),
            eta2: cfg.eta_grid.iter().map(|e| e * e).collect(),
            ecf_rays: [0.0, std::f64::consts::FRAC_PI_4]
                .iter()
                .map(|&d| Complex64::from_polar(ECF_T_MAX / ECF_POINTS_PER_RAY as f64, d))
                .collect(),
            keep_samples,
            nugget,
        })
    }

    fn empty_partial(&self) -> Partial {
        let nc = self.cfg.checkpoints.len();
        let ne = self.eta2.len();
        let ncond = if self.nugget.is_some() { ne } else { 0 };
        Partial {
            replicas: 0,
            sum_abs2: vec![KahanSum::default(); nc],
            sum_abs4: vec![KahanSum::default(); nc],
            scaled_hits: vec![vec![0; ne]; nc],
            unscaled_hits: vec![vec![0; ne]; nc],
            cond_sum: vec![vec![KahanSum::default(); ncond]; nc],
            cond_sumsq: vec![vec![KahanSum::default(); ncond]; nc],
            returns_sum: vec![vec![0; ne]; nc],
            returns_sumsq: vec![vec![0; ne]; nc],
            ecf: vec![
                vec![ComplexKahanSum::default(); self.ecf_rays.len() * ECF_POINTS_PER_RAY];
                nc
            ],
            samples: vec![Vec::new(); if self.keep_samples { nc } else { 0 }],
            tail_sum: vec![0; ne],
            tail_sumsq: vec![0; ne],
            max_abs2: 0.0,
        }
    }

    fn run_chunk(&self, lo: usize, hi: usize) -> Partial {
        let cfg = self.cfg;
        let ne = self.eta2.len();
        let eta2_max = *self.eta2.last().unwrap();
        let tail_start = cfg.n_max / 2;
        let mut part = self.empty_partial();
        let mut returns = vec![0u64; ne];
        let mut tail = vec![0u64; ne];
        let mut stream: Option<IncrementStream> = None;
        for r in lo..hi {
            let mut xs = if self.paired_streams {
                match stream.take() {
                    Some(mut s) if r % 2 == 1 => {
                        s.skip_to_block_boundary();
                        s
                    }
                    _ => self.process.stream(cfg.seed, (r / 2) as u64),
                }
            } else {
                self.process.stream(cfg.seed, r as u64)
            };
            let mut white = self.nugget.as_ref().map(|(field, _, _)| {
                let sd = match field {
                    Field::Real => cfg.nugget.sqrt(),
                    Field::Complex => (cfg.nugget / 2.0).sqrt(),
                };
                (stream_rng(cfg.seed, u64::MAX - r as u64), *field, sd)
            });
            returns.iter_mut().for_each(|c| *c = 0);
            tail.iter_mut().for_each(|c| *c = 0);
            let mut s = Complex64::new(0.0, 0.0);
            let mut sy = s;
            let mut sw = s;
            let mut ci = 0;
            let mut max_abs2: f64 = 0.0;
            for k in 1..=cfg.n_max {
                let x = xs.next_increment();
                match &mut white {
                    None => s = self.rot * s + x,
                    Some((rng, field, sd)) => {
                        let re: f64 = rng.sample(StandardNormal);
                        let w = match field {
                            Field::Real => Complex64::new(*sd * re, 0.0),
                            Field::Complex => {
                                let im: f64 = rng.sample(StandardNormal);
                                Complex64::new(*sd * re, *sd * im)
                            }
                        };
                        sy = self.rot * sy + x;
                        sw = self.rot * sw + w;
                        s = sy + sw;
                    }
                }
                let a2 = s.norm_sqr();
                max_abs2 = max_abs2.max(a2);
                if a2 <= eta2_max {
                    for e in 0..ne {
                        if a2 <= self.eta2[e] {
                            returns[e] += 1;
                            if k > tail_start {
                                tail[e] += 1;
                            }
                        }
                    }
                }
                if ci < cfg.checkpoints.len() && cfg.checkpoints[ci] == k {
                    self.record(&mut part, ci, k, s, sy, a2, &returns);
                    ci += 1;
                }
            }
            for (e, &t) in tail.iter().enumerate() {
                part.tail_sum[e] += t;
                part.tail_sumsq[e] += t as u128 * t as u128;
            }
            part.max_abs2 = part.max_abs2.max(max_abs2);
            part.replicas += 1;
            if self.paired_streams && r % 2 == 0 {
                stream = Some(xs);
            }
        }
        part
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        part: &mut Partial,
        ci: usize,
        n: usize,
        s: Complex64,
        sy: Complex64,
        a2: f64,
        returns: &[u64],
    ) {
        let z = s / (n as f64).sqrt();
        let z2 = z.norm_sqr();
        part.sum_abs2[ci].add(z2);
        part.sum_abs4[ci].add(z2 * z2);
        for (e, &eta2) in self.eta2.iter().enumerate() {
            if z2 <= eta2 {
                part.scaled_hits[ci][e] += 1;
            }
            if a2 <= eta2 {
                part.unscaled_hits[ci][e] += 1;
            }
            part.returns_sum[ci][e] += returns[e];
            part.returns_sumsq[ci][e] += returns[e] as u128 * returns[e] as u128;
        }
        let mut j = 0;
        for &unit in &self.ecf_rays {
            let step = char_term(unit, z);
            let mut term = step;
            for _ in 0..ECF_POINTS_PER_RAY {
                part.ecf[ci][j].add(term);
                term *= step;
                j += 1;
            }
        }
        if let Some((_, conds, rule)) = &self.nugget {
            let cc = &conds[ci];
            for (e, eta) in self.cfg.eta_grid.iter().enumerate() {
                let p = if cc.usable[e] {
                    rule.probability(sy, cc.cov, *eta)
                } else if a2 <= self.eta2[e] {
                    1.0
                } else {
                    0.0
                };
                part.cond_sum[ci][e].add(p);
                part.cond_sumsq[ci][e].add(p * p);
            }
        }
        if self.keep_samples {
            part.samples[ci].push(z);
        }
    }

    fn finish(&self, acc: Partial, truncated: bool) -> CheckpointEnsemble {
        let cfg = self.cfg;
        let mut checkpoints = Vec::with_capacity(cfg.checkpoints.len());
        let mut samples = acc.samples.into_iter();
        for (ci, &n) in cfg.checkpoints.iter().enumerate() {
            checkpoints.push(CheckpointStats {
                n,
                rotation: cfg.beta.rotation_after(n as u64),
                rotation_residue: cfg.beta.residue_after(n as u64),
                count: acc.replicas,
                sum_abs2: acc.sum_abs2[ci].value(),
                sum_abs4: acc.sum_abs4[ci].value(),
                scaled_hits: acc.scaled_hits[ci].clone(),
                unscaled_hits: acc.unscaled_hits[ci].clone(),
                conditional: self.nugget.as_ref().map(|_| {
                    (
                        acc.cond_sum[ci].iter().map(KahanSum::value).collect(),
                        acc.cond_sumsq[ci].iter().map(KahanSum::value).collect(),
                    )
                }),
                returns_sum: acc.returns_sum[ci].clone(),
                returns_sumsq: acc.returns_sumsq[ci].clone(),
                ecf_sum: acc.ecf[ci].iter().map(ComplexKahanSum::value).collect(),
                samples: samples.next(),
            });
        }
        CheckpointEnsemble {
            beta: cfg.beta,
            n_max: cfg.n_max,
            replicas: acc.replicas,
            eta_grid: cfg.eta_grid.clone(),
            t_grid: ecf_t_grid(),
            checkpoints,
            tail_returns_sum: acc.tail_sum,
            tail_returns_sumsq: acc.tail_sumsq,
            max_abs: acc.max_abs2.sqrt(),
            nugget: cfg.nugget,
            truncated,
        }
    }
}

/// Covariance of the white part `Σ_{j<n} e^{ijβ}W_j` at each checkpoint, as
/// `[Σ₁₁, Σ₁₂, Σ₂₂]` of its real and imaginary parts.
fn conditional_checkpoints(cfg: &WalkConfig, field: Field) -> Vec<CondCheckpoint> {
    let d = cfg.nugget;
    let mut out = Vec::with_capacity(cfg.checkpoints.len());
    // real field: Σ = (d/2)[n + Re D, Im D; Im D, n − Re D] with D = Σ_{j<n} e^{2ijβ}
    let mut dsum = ComplexKahanSum::default();
    let mut ci = 0;
    for n in 1..=cfg.n_max {
        dsum.add(cfg.beta.rotation_after(2 * (n as u64 - 1)).cis());
        if ci < cfg.checkpoints.len() && cfg.checkpoints[ci] == n {
            let nf = n as f64;
            let cov = match field {
                Field::Real => {
                    let dd = dsum.value();
                    [
                        0.5 * d * (nf + dd.re),
                        0.5 * d * dd.im,
                        0.5 * d * (nf - dd.re),
                    ]
                }
                Field::Complex => [0.5 * d * nf, 0.0, 0.5 * d * nf],
            };
            let [a, b, c] = cov;
            let lmin = 0.5 * (a + c) - (0.25 * (a - c).powi(2) + b * b).sqrt();
            let usable = cfg
                .eta_grid
                .iter()
                .map(|eta| lmin >= 4.0 * eta * eta)
                .collect();
            out.push(CondCheckpoint { cov, usable });
            ci += 1;
        }
    }
    out
}

/// Largest error of the group embedding `Y_n = (S_n, nβ)` over the given
/// prefix lengths of one path: the ℂ part relative to `Σ_{k<n}|X_k|`, the
/// rotation part as a circular distance.
pub fn group_embedding_check(
    spec: &ProcessSpec,
    beta: Beta,
    prefixes: &[usize],
    seed: u64,
) -> Result<(f64, f64), WalkError> {
    let n = prefixes.iter().copied().max().unwrap_or(0);
    let xs: Vec<Complex64> = spec.prepare()?.stream(seed, 0).take(n).collect();
    let elems = xs
        .iter()
        .map(|&x| GroupElement::new(x, beta.angle()))
        .collect::<Result<Vec<_>, _>>()?;
    let seq = IndexedSequence::from_zero(elems);
    let mut path = vec![Complex64::new(0.0, 0.0); n + 1];
    let mut mass = vec![0.0; n + 1];
    let rot = beta.cis();
    for k in 0..n {
        path[k + 1] = rot * path[k] + xs[k];
        mass[k + 1] = mass[k] + xs[k].norm();
    }
    let mut worst_z: f64 = 0.0;
    let mut worst_theta: f64 = 0.0;
    for &m in prefixes {
        let y = cocycle(&seq, m as i64)?;
        let scale = mass[m].max(f64::MIN_POSITIVE);
        worst_z = worst_z.max((y.z - path[m]).norm() / scale);
        let d = (y.theta - beta.rotation_after(m as u64)).radians();
        worst_theta = worst_theta.max(d.min(std::f64::consts::TAU - d));
    }
    Ok((worst_z, worst_theta))
}

/// Increments `X'_k = Σ_{m<q} e^{i(q−1−m)β}X_{kq+m}` of the q-step walk for
/// `β = 2πp/q`; the untwisted partial sums of `X'` are `S_{nq}`.
#[derive(Debug, Clone)]
pub struct BlockedWalk<I> {
    inner: I,
    weights: Vec<Complex64>,
}

impl<I: Iterator<Item = Complex64>> Iterator for BlockedWalk<I> {
    type Item = Complex64;

    fn next(&mut self) -> Option<Complex64> {
        let mut acc = Complex64::new(0.0, 0.0);
        for w in &self.weights {
            acc += w * self.inner.next()?;
        }
        Some(acc)
    }
}

impl<I> BlockedWalk<I> {
    pub fn block_len(&self) -> usize {
        self.weights.len()
    }
}

pub fn blocked_walk<I: Iterator<Item = Complex64>>(
    inner: I,
    p: i64,
    q: u64,
) -> Result<BlockedWalk<I>, WalkError> {
    let r = RationalAngle::new(p, q)?;
    let q = q as i64;
    let weights = (0..q)
        .map(|m| r.root_of_unity((q - 1 - m) * r.numerator() as i64))
        .collect();
    Ok(BlockedWalk { inner, weights })
}

/// Blocked increments over stream 0 of `spec`.
pub fn blocked_stream(
    spec: &ProcessSpec,
    p: i64,
    q: u64,
    seed: u64,
) -> Result<BlockedWalk<IncrementStream>, WalkError> {
    blocked_walk(spec.prepare()?.stream(seed, 0), p, q)
}

/// Largest relative gap between `Σ_{j<n}X'_j` and `S_{nq}` over `n ≤ blocks`,
/// relative to `Σ_{k<nq}|X_k|`.
pub fn blocked_identity_error(xs: &[Complex64], p: i64, q: u64) -> Result<f64, WalkError> {
    let beta = Beta::rational(p, q)?;
    let rot = beta.cis();
    let blocked: Vec<Complex64> = blocked_walk(xs.iter().copied(), p, q)?.collect();
    let q = q as usize;
    let mut s = Complex64::new(0.0, 0.0);
    let mut mass = 0.0;
    let mut partial = Complex64::new(0.0, 0.0);
    let mut worst: f64 = 0.0;
    for (j, xp) in blocked.iter().enumerate() {
        for x in &xs[j * q..(j + 1) * q] {
            s = rot * s + x;
            mass += x.norm();
        }
        partial += xp;
        worst = worst.max((partial - s).norm() / mass.max(f64::MIN_POSITIVE));
    }
    Ok(worst)
}
