//! Deterministic seeded simulation of the asynchronous algorithm.
//!
//! Random streams are split by purpose from one seed (ChaCha stream ids):
//! the scheduler, one stream per node for honest samples and one per node
//! for adversary policies. Adding nodes never perturbs existing streams.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{default_repel_magnitude, Policy, PolicyKind, QueryContext};
use crate::dynamics::step_in_place;
use crate::error::{Error, Result};
use crate::model::{sample_y, GroundTruth, ObservationMatrix, ProblemSpec, State, StepSchedule};
use crate::scalar::{dist, norm, Scalar};

const SCHEDULER_STREAM: u64 = 0;
const NODE_STREAM_BASE: u64 = 1;
const POLICY_STREAM_BASE: u64 = 1 << 32;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Random stream for node `i`'s honest samples.
pub fn node_stream(seed: u64, i: usize) -> ChaCha8Rng {
    stream(seed, NODE_STREAM_BASE + i as u64)
}

/// Random stream for node `i`'s adversary policy.
pub fn policy_stream(seed: u64, i: usize) -> ChaCha8Rng {
    stream(seed, POLICY_STREAM_BASE + i as u64)
}

/// Random stream for the server's node picks.
pub fn scheduler_stream(seed: u64) -> ChaCha8Rng {
    stream(seed, SCHEDULER_STREAM)
}

/// Which iterations get a trajectory row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recording {
    /// Every `k`-th iteration.
    Stride(u64),
    /// Roughly geometric spacing with at most `max_rows` rows.
    LogSpaced { max_rows: usize },
}

impl Default for Recording {
    fn default() -> Self {
        Self::LogSpaced { max_rows: 10_000 }
    }
}

impl Recording {
    /// Sorted iteration indices in `0..iterations` that are recorded.
    pub fn plan(&self, iterations: u64) -> Vec<u64> {
        match *self {
            Self::Stride(k) => (0..iterations).step_by(k.max(1) as usize).collect(),
            Self::LogSpaced { max_rows } => {
                let max_rows = max_rows.max(2);
                if iterations <= max_rows as u64 {
                    return (0..iterations).collect();
                }
                let last = (iterations - 1) as f64;
                let slots = (max_rows - 1) as f64;
                let mut out = vec![0u64];
                for k in 0..max_rows - 1 {
                    let v = (last.ln() * k as f64 / (slots - 1.0)).exp().round() as u64;
                    if v > *out.last().unwrap() {
                        out.push(v.min(iterations - 1));
                    }
                }
                if *out.last().unwrap() != iterations - 1 {
                    out.push(iterations - 1);
                }
                out.dedup();
                out
            }
        }
    }
}

/// Everything needed to run one seeded simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig<T> {
    pub matrix: ObservationMatrix<T>,
    pub spec: ProblemSpec<T>,
    pub schedule: StepSchedule<T>,
    /// One policy per node; nodes outside the adversary set must be honest.
    pub policies: Vec<PolicyKind>,
    pub x0: Vec<T>,
    pub y0: Vec<T>,
    pub iterations: u64,
    pub seed: u64,
    pub recording: Recording,
    /// Keep `x_0..x_n` for policies that read the history.
    pub keep_history: bool,
}

impl<T: Scalar> SimConfig<T> {
    /// Defaults: honest policies, `x0 = 0`, `y0 = 0`, `N = 2e5`, seed 0.
    pub fn new(matrix: ObservationMatrix<T>, spec: ProblemSpec<T>, schedule: StepSchedule<T>) -> Self {
        let (p, d) = (matrix.p(), matrix.d());
        Self {
            matrix,
            spec,
            schedule,
            policies: vec![PolicyKind::Honest; p],
            x0: vec![T::zero(); d],
            y0: vec![T::zero(); p],
            iterations: 200_000,
            seed: 0,
            recording: Recording::default(),
            keep_history: false,
        }
    }

    /// Give every node in the adversary set the same policy.
    pub fn with_adversary_policy(mut self, kind: PolicyKind) -> Self {
        for i in self.spec.adversaries().iter() {
            if i < self.policies.len() {
                self.policies[i] = kind.clone();
            }
        }
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_iterations(mut self, n: u64) -> Self {
        self.iterations = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (p, d) = (self.matrix.p(), self.matrix.d());
        self.spec.check_against(&self.matrix)?;
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if self.policies.len() != p {
            return Err(Error::InvalidConfig(format!(
                "{} policies for p={p} nodes",
                self.policies.len()
            )));
        }
        if let Some(i) = (0..p).find(|&i| !self.policies[i].is_honest() && !self.spec.adversaries().contains(i)) {
            return Err(Error::InvalidConfig(format!(
                "node {i} has an adversarial policy but is not in the adversary set"
            )));
        }
        if self.x0.len() != d || self.y0.len() != p {
            return Err(Error::InvalidConfig(format!(
                "x0 must have length {d} and y0 length {p}"
            )));
        }
        if self.x0.iter().chain(&self.y0).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("initial state must be finite".into()));
        }
        Ok(())
    }

    fn build_policies(&self) -> Vec<Policy> {
        let repel_default = default_repel_magnitude(&self.matrix, &self.x0, self.spec.mu()).to_f64_lossy();
        self.policies
            .iter()
            .enumerate()
            .map(|(i, kind)| {
                let kind = match kind {
                    PolicyKind::Repel { magnitude: None } => PolicyKind::Repel {
                        magnitude: Some(repel_default),
                    },
                    other => other.clone(),
                };
                Policy::new(kind, policy_stream(self.seed, i))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow<T> {
    pub n: u64,
    /// `||x_n - mu||`
    pub err_x: T,
    /// `||y_n - E[Y]||_{M^c}`
    pub err_y_mc: T,
    pub gamma: T,
    /// `err_y_mc / gamma`, absent while `gamma = 0`.
    pub ratio: Option<T>,
    /// `||A x_n - E[Y]||_1`, diagnostic only.
    pub l1_obj: T,
}

/// Running maximum of `||x_n||` over the whole run and over its first half.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormProbe<T> {
    pub max_full: T,
    pub max_first_half: T,
    pub argmax: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub rows: Vec<TrajectoryRow<T>>,
    pub final_state: State<T>,
    pub seed: u64,
    pub iterations: u64,
    pub probe: NormProbe<T>,
    pub honest_count: usize,
}

impl<T: Scalar> Trajectory<T> {
    /// `||x_N - mu||` for the final iterate.
    pub fn final_err(&self, mu: &[T]) -> T {
        dist(&self.final_state.x, mu)
    }

    /// Median `err_x` over recorded rows with `lo <= n < hi`.
    pub fn median_err_between(&self, lo: u64, hi: u64) -> Option<T> {
        let mut v: Vec<T> = self
            .rows
            .iter()
            .filter(|r| r.n >= lo && r.n < hi)
            .map(|r| r.err_x)
            .collect();
        median(&mut v)
    }
}

pub fn median<T: Scalar>(values: &mut [T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / T::lit(2.0)
    })
}

/// One applied update, as seen by a step observer.
pub struct StepEvent<'a, T> {
    pub n: u64,
    pub node: usize,
    pub sample: T,
    pub alpha: T,
    pub beta: T,
    pub sign: i8,
    pub before: &'a State<T>,
    pub after: &'a State<T>,
    pub truth: &'a GroundTruth<T>,
    pub matrix: &'a ObservationMatrix<T>,
}

/// Run one simulation.
pub fn run<T: Scalar>(config: &SimConfig<T>) -> Result<Trajectory<T>> {
    run_observed(config, |_| {})
}

/// Run one simulation, calling `observer` after every applied update.
pub fn run_observed<T: Scalar>(
    config: &SimConfig<T>,
    mut observer: impl FnMut(&StepEvent<'_, T>),
) -> Result<Trajectory<T>> {
    config.validate()?;
    let a = &config.matrix;
    let spec = &config.spec;
    let p = a.p();
    let truth = GroundTruth::new(spec, a)?;
    let mu = spec.mu();

    let mut scheduler = scheduler_stream(config.seed);
    let mut node_rngs: Vec<ChaCha8Rng> = (0..p).map(|i| node_stream(config.seed, i)).collect();
    let mut policies = config.build_policies();

    let mut state = State::new(config.x0.clone(), config.y0.clone());
    let mut before = state.clone();
    let mut history: Vec<T> = Vec::new();
    if config.keep_history {
        history.reserve((config.iterations as usize + 1) * a.d());
        history.extend_from_slice(&state.x);
    }

    let plan = config.recording.plan(config.iterations);
    let mut plan_iter = plan.iter().peekable();
    let mut rows = Vec::with_capacity(plan.len());
    let mut gammas = config.schedule.gamma_series();
    let half = config.iterations / 2;
    let mut probe = NormProbe {
        max_full: norm(&state.x),
        max_first_half: norm(&state.x),
        argmax: 0,
    };

    for n in 0..config.iterations {
        let gamma = gammas.next().unwrap_or_else(T::zero);
        if plan_iter.peek() == Some(&&n) {
            plan_iter.next();
            rows.push(make_row(n, &state, gamma, a, &truth));
        }

        let i = scheduler.random_range(0..p);
        let true_sample = sample_y(spec, a, i, &mut node_rngs[i])?;
        let sample = policies[i].respond(&QueryContext {
            node: i,
            state: &state,
            x_history: &history,
            matrix: a,
            mu,
            true_sample,
        });
        let alpha = config.schedule.alpha(n);
        let beta = config.schedule.beta(n);
        before.clone_from(&state);
        let sign = step_in_place(&mut state, i, sample, a, &config.schedule)?;
        observer(&StepEvent {
            n,
            node: i,
            sample,
            alpha,
            beta,
            sign,
            before: &before,
            after: &state,
            truth: &truth,
            matrix: a,
        });
        if config.keep_history {
            history.extend_from_slice(&state.x);
        }

        let r = norm(&state.x);
        if r > probe.max_full {
            probe.max_full = r;
            probe.argmax = n + 1;
        }
        if n < half && r > probe.max_first_half {
            probe.max_first_half = r;
        }
    }

    Ok(Trajectory {
        rows,
        final_state: state,
        seed: config.seed,
        iterations: config.iterations,
        probe,
        honest_count: truth.honest_count(),
    })
}

pub(crate) fn make_row<T: Scalar>(
    n: u64,
    state: &State<T>,
    gamma: T,
    a: &ObservationMatrix<T>,
    truth: &GroundTruth<T>,
) -> TrajectoryRow<T> {
    let err_y_mc = truth.honest_error(&state.y);
    TrajectoryRow {
        n,
        err_x: dist(&state.x, truth.mu()),
        err_y_mc,
        gamma,
        ratio: (gamma > T::zero()).then(|| err_y_mc / gamma),
        l1_obj: truth.l1_objective(a, &state.x),
    }
}

/// Run the same configuration for several seeds in parallel.
pub fn run_seeds<T: Scalar>(config: &SimConfig<T>, seeds: &[u64]) -> Result<Vec<Trajectory<T>>> {
    seeds
        .par_iter()
        .map(|&seed| run(&config.clone().with_seed(seed)))
        .collect()
}

/// Empirical rate constant: `sup_{n >= n_min} ||y_n - E[Y]||_{M^c} / gamma_n`.
pub fn estimate_rate_constant<T: Scalar>(traj: &Trajectory<T>, n_min: u64) -> Result<T> {
    let mut rows = traj.rows.iter().filter(|r| r.n >= n_min).peekable();
    if traj.honest_count == 0 {
        return Ok(T::zero());
    }
    if let Some(first) = rows.peek() {
        if first.gamma <= T::zero() {
            return Err(Error::GammaNotPositive(first.n));
        }
    }
    Ok(rows.filter_map(|r| r.ratio).fold(T::zero(), |a, b| a.max(b)))
}

/// `max_n ||x_n||` over the run.
pub fn boundedness_probe<T: Scalar>(traj: &Trajectory<T>) -> T {
    traj.probe.max_full
}

/// A sample applied by a server, in application order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AppliedUpdate {
    pub n: u64,
    pub node: usize,
    pub value: f64,
}

/// Re-apply a log of updates from `(x0, y0)`.
pub fn replay<T: Scalar>(
    a: &ObservationMatrix<T>,
    schedule: &StepSchedule<T>,
    x0: Vec<T>,
    y0: Vec<T>,
    log: &[AppliedUpdate],
) -> Result<State<T>> {
    let mut state = State::new(x0, y0);
    state.check_against(a)?;
    for entry in log {
        if entry.n != state.n {
            return Err(Error::InvalidConfig(format!(
                "log entry has n={} but replay is at n={}",
                entry.n, state.n
            )));
        }
        step_in_place(&mut state, entry.node, T::lit(entry.value), a, schedule)?;
    }
    Ok(state)
}

pub const CSV_HEADER: [&str; 6] = ["n", "err_x", "err_y_mc", "gamma", "ratio", "l1_obj"];

fn fmt_value<T: Scalar>(v: T) -> String {
    format!("{:.15e}", v.to_f64_lossy())
}

/// Write `n,err_x,err_y_mc,gamma,ratio,l1_obj`; `ratio` is empty while `gamma = 0`.
pub fn write_csv<T: Scalar, W: Write>(traj: &Trajectory<T>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in &traj.rows {
        w.write_record([
            r.n.to_string(),
            fmt_value(r.err_x),
            fmt_value(r.err_y_mc),
            fmt_value(r.gamma),
            r.ratio.map(fmt_value).unwrap_or_default(),
            fmt_value(r.l1_obj),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Read rows written by [`write_csv`].
pub fn read_csv<R: Read>(input: R) -> Result<Vec<TrajectoryRow<f64>>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::InvalidConfig(format!("unexpected CSV header {headers:?}")));
    }
    let parse = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|e| Error::InvalidConfig(format!("bad CSV value {s:?}: {e}")))
    };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(TrajectoryRow {
            n: rec[0]
                .parse()
                .map_err(|e| Error::InvalidConfig(format!("bad row index: {e}")))?,
            err_x: parse(&rec[1])?,
            err_y_mc: parse(&rec[2])?,
            gamma: parse(&rec[3])?,
            ratio: if rec[4].is_empty() { None } else { Some(parse(&rec[4])?) },
            l1_obj: parse(&rec[5])?,
        });
    }
    Ok(rows)
}
