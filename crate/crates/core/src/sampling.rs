//! Input signals and trajectory data collection.
//!
//! Datasets are ordered triplets `(x_k, u_k, y_k = F(x_k, u_k))` grouped into
//! trajectories. Collection is a pure function of the system, the
//! configuration, and the seeds; per-trajectory random streams keep
//! trajectories independent of each other while staying reproducible.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::control::FeedbackGain;
use crate::dynamics::{discrete_step, state_norm, DynamicalSystem, IntegrationConfig, SystemKind};
use crate::error::{Error, Result};
use crate::observables::Lifting;
use crate::training::KoopmanModel;
use crate::util::all_finite;

/// How the inputs of a dataset were produced.
#[derive(Debug, Clone, PartialEq)]
pub enum SignalKind {
    UniformRandom { lower: f64, upper: f64, seed: u64 },
    CosineFamily { omega: f64 },
    Zero,
    /// Inputs from `u_k = K·g(x_k)`; only arises inside closed-loop collection.
    Feedback,
}

/// An input signal together with the sampling period its discretization uses.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSignal {
    pub kind: SignalKind,
    pub dt: f64,
}

impl InputSignal {
    pub fn uniform(lower: f64, upper: f64, seed: u64, dt: f64) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite()) || lower >= upper {
            return Err(Error::InvalidArgument(format!(
                "uniform bounds must satisfy lower < upper, got [{lower}, {upper}]"
            )));
        }
        Ok(Self {
            kind: SignalKind::UniformRandom { lower, upper, seed },
            dt,
        })
    }

    pub fn cosine(omega: f64, dt: f64) -> Self {
        Self {
            kind: SignalKind::CosineFamily { omega },
            dt,
        }
    }

    pub fn zero(dt: f64) -> Self {
        Self {
            kind: SignalKind::Zero,
            dt,
        }
    }

    fn describe(&self) -> String {
        match &self.kind {
            SignalKind::UniformRandom { lower, upper, .. } => format!("uniform[{lower},{upper}]"),
            SignalKind::CosineFamily { omega } => format!("cosine(omega={omega})"),
            SignalKind::Zero => "zero".to_string(),
            SignalKind::Feedback => "feedback".to_string(),
        }
    }

    fn seed(&self) -> Option<u64> {
        match self.kind {
            SignalKind::UniformRandom { seed, .. } => Some(seed),
            _ => None,
        }
    }
}

/// One data triplet: state, input, successor `y = F(x, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    OpenLoop { signal: String, seed: Option<u64> },
    Feedback,
    Imported,
}

/// Per-trajectory bookkeeping: where it starts in the triplet list, its
/// length, group label, provenance, and stored initial state (used when a
/// trajectory is re-simulated with regenerated inputs).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMeta {
    pub start: usize,
    pub len: usize,
    pub group: i64,
    pub provenance: Provenance,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExcludedTrajectory {
    pub index: usize,
    pub step: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub n: usize,
    pub p: usize,
    pub triplets: Vec<Triplet>,
    pub trajectories: Vec<TrajectoryMeta>,
    /// Trajectories dropped during collection (non-finite states), reported
    /// rather than silently discarded.
    pub excluded: Vec<ExcludedTrajectory>,
}

/// A raw rollout: `states` has one more entry than `inputs`.
pub struct Rollout {
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub group: i64,
    pub provenance: Provenance,
}

impl TrajectoryDataset {
    pub fn empty(n: usize, p: usize) -> Self {
        Self {
            n,
            p,
            triplets: Vec::new(),
            trajectories: Vec::new(),
            excluded: Vec::new(),
        }
    }

    /// Builds a dataset from raw rollouts; consecutive triplets of one
    /// trajectory chain by construction (`y_k = x_{k+1}`).
    pub fn from_rollouts(n: usize, p: usize, rollouts: Vec<Rollout>) -> Result<Self> {
        let mut ds = Self::empty(n, p);
        for rollout in rollouts {
            ds.push_rollout(rollout)?;
        }
        Ok(ds)
    }

    pub fn push_rollout(&mut self, rollout: Rollout) -> Result<()> {
        if rollout.states.len() != rollout.inputs.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "rollout needs one more state than inputs, got {} states / {} inputs",
                rollout.states.len(),
                rollout.inputs.len()
            )));
        }
        if rollout.inputs.is_empty() {
            return Err(Error::InvalidArgument(
                "rollout must contain at least one step".to_string(),
            ));
        }
        for s in &rollout.states {
            if s.len() != self.n {
                return Err(Error::DimensionMismatch {
                    context: "rollout state",
                    expected: self.n,
                    found: s.len(),
                });
            }
        }
        for u in &rollout.inputs {
            if u.len() != self.p {
                return Err(Error::DimensionMismatch {
                    context: "rollout input",
                    expected: self.p,
                    found: u.len(),
                });
            }
        }
        let start = self.triplets.len();
        let len = rollout.inputs.len();
        let x0 = rollout.states[0].clone();
        for k in 0..len {
            self.triplets.push(Triplet {
                x: rollout.states[k].clone(),
                u: rollout.inputs[k].clone(),
                y: rollout.states[k + 1].clone(),
            });
        }
        self.trajectories.push(TrajectoryMeta {
            start,
            len,
            group: rollout.group,
            provenance: rollout.provenance,
            x0,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Start index of each trajectory.
    pub fn boundaries(&self) -> Vec<usize> {
        self.trajectories.iter().map(|t| t.start).collect()
    }

    pub fn trajectory_triplets(&self, index: usize) -> &[Triplet] {
        let meta = &self.trajectories[index];
        &self.triplets[meta.start..meta.start + meta.len]
    }

    pub fn has_feedback_data(&self) -> bool {
        self.trajectories
            .iter()
            .any(|t| t.provenance == Provenance::Feedback)
    }

    /// Checks that `y_k` is bitwise the stored `x_{k+1}` inside each trajectory.
    pub fn validate_chain(&self) -> Result<()> {
        for (ti, meta) in self.trajectories.iter().enumerate() {
            let ts = self.trajectory_triplets(ti);
            for k in 0..meta.len.saturating_sub(1) {
                if ts[k].y != ts[k + 1].x {
                    return Err(Error::InvalidArgument(format!(
                        "trajectory {ti} breaks the y_k = x_(k+1) chain at step {k}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Concatenation preserving trajectory boundaries, groups, and provenance.
    pub fn merge(&self, other: &TrajectoryDataset) -> Result<TrajectoryDataset> {
        if self.n != other.n {
            return Err(Error::DimensionMismatch {
                context: "merge state dimension",
                expected: self.n,
                found: other.n,
            });
        }
        if self.p != other.p {
            return Err(Error::DimensionMismatch {
                context: "merge input dimension",
                expected: self.p,
                found: other.p,
            });
        }
        let mut out = self.clone();
        let offset = out.triplets.len();
        let traj_offset = out.trajectories.len();
        out.triplets.extend(other.triplets.iter().cloned());
        for meta in &other.trajectories {
            let mut meta = meta.clone();
            meta.start += offset;
            out.trajectories.push(meta);
        }
        for ex in &other.excluded {
            let mut ex = ex.clone();
            ex.index += traj_offset;
            out.excluded.push(ex);
        }
        Ok(out)
    }

    /// CSV with columns `traj_id,k,x_1..x_n,u_1..u_p,y_1..y_n,group`.
    /// Lines starting with `#` before the header carry metadata.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "traj_id,k")?;
        for i in 1..=self.n {
            write!(w, ",x_{i}")?;
        }
        for i in 1..=self.p {
            write!(w, ",u_{i}")?;
        }
        for i in 1..=self.n {
            write!(w, ",y_{i}")?;
        }
        writeln!(w, ",group")?;
        for (ti, meta) in self.trajectories.iter().enumerate() {
            for (k, t) in self.trajectory_triplets(ti).iter().enumerate() {
                write!(w, "{ti},{k}")?;
                for v in &t.x {
                    write!(w, ",{v}")?;
                }
                for v in &t.u {
                    write!(w, ",{v}")?;
                }
                for v in &t.y {
                    write!(w, ",{v}")?;
                }
                writeln!(w, ",{}", meta.group)?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(reader: R) -> Result<TrajectoryDataset> {
        let mut lines = reader
            .lines()
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::InvalidArgument(format!("dataset read failed: {e}")))?
            .into_iter()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| Error::EmptyDataset("dataset CSV has no header".to_string()))?;
        let cols: Vec<&str> = header.split(',').collect();
        let n = cols.iter().filter(|c| c.starts_with("x_")).count();
        let p = cols.iter().filter(|c| c.starts_with("u_")).count();
        let ny = cols.iter().filter(|c| c.starts_with("y_")).count();
        if n == 0 || p == 0 || ny != n || cols.len() != 3 + 2 * n + p {
            return Err(Error::InvalidArgument(format!(
                "unrecognized dataset header `{header}`"
            )));
        }

        type Row = (usize, Vec<f64>, Vec<f64>, Vec<f64>, i64);
        let mut rows: Vec<Row> = Vec::new();
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(Error::InvalidArgument(format!(
                    "dataset row has {} fields, expected {}",
                    fields.len(),
                    cols.len()
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("bad number `{s}` in dataset")))
            };
            let traj: usize = fields[0]
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad traj_id `{}`", fields[0])))?;
            let mut at = 2;
            let mut x = Vec::with_capacity(n);
            for _ in 0..n {
                x.push(parse(fields[at])?);
                at += 1;
            }
            let mut u = Vec::with_capacity(p);
            for _ in 0..p {
                u.push(parse(fields[at])?);
                at += 1;
            }
            let mut y = Vec::with_capacity(n);
            for _ in 0..n {
                y.push(parse(fields[at])?);
                at += 1;
            }
            let group: i64 = fields[at]
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad group `{}`", fields[at])))?;
            rows.push((traj, x, u, y, group));
        }
        if rows.is_empty() {
            return Err(Error::EmptyDataset("dataset CSV has no rows".to_string()));
        }

        let mut ds = TrajectoryDataset::empty(n, p);
        let mut current: Option<usize> = None;
        for (traj, x, u, y, group) in rows {
            if current != Some(traj) {
                ds.trajectories.push(TrajectoryMeta {
                    start: ds.triplets.len(),
                    len: 0,
                    group,
                    provenance: Provenance::Imported,
                    x0: x.clone(),
                });
                current = Some(traj);
            }
            ds.triplets.push(Triplet { x, u, y });
            ds.trajectories.last_mut().unwrap().len += 1;
        }
        ds.validate_chain()?;
        Ok(ds)
    }
}

/// Generates `steps` inputs in `R^p` from a signal. Uniform signals reseed
/// from their stored seed, so repeat calls yield the identical sequence.
pub fn generate_inputs(signal: &InputSignal, steps: usize, p: usize) -> Result<Vec<Vec<f64>>> {
    if steps == 0 {
        return Err(Error::InvalidArgument(
            "steps must be at least 1".to_string(),
        ));
    }
    match &signal.kind {
        SignalKind::UniformRandom { lower, upper, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Ok((0..steps)
                .map(|_| (0..p).map(|_| rng.random_range(*lower..*upper)).collect())
                .collect())
        }
        SignalKind::CosineFamily { omega } => Ok((0..steps)
            .map(|k| vec![(omega * k as f64 * signal.dt).cos(); p])
            .collect()),
        SignalKind::Zero => Ok(vec![vec![0.0; p]; steps]),
        SignalKind::Feedback => Err(Error::Unsupported(
            "feedback inputs arise only inside closed-loop collection".to_string(),
        )),
    }
}

/// Uniform sampler over an axis-aligned box.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSampler {
    pub bounds: Vec<(f64, f64)>,
    pub seed: u64,
}

impl BoxSampler {
    pub fn new(bounds: Vec<(f64, f64)>, seed: u64) -> Result<Self> {
        for (lo, hi) in &bounds {
            if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
                return Err(Error::InvalidArgument(format!(
                    "box bounds must satisfy lo < hi, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { bounds, seed })
    }

    pub fn sample_batch(&self, count: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..count)
            .map(|_| {
                self.bounds
                    .iter()
                    .map(|(lo, hi)| rng.random_range(*lo..*hi))
                    .collect()
            })
            .collect()
    }
}

fn per_trajectory_inputs(
    signal: &InputSignal,
    traj_index: usize,
    steps: usize,
    p: usize,
) -> Result<Vec<Vec<f64>>> {
    match &signal.kind {
        SignalKind::UniformRandom { lower, upper, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            rng.set_stream(traj_index as u64);
            Ok((0..steps)
                .map(|_| (0..p).map(|_| rng.random_range(*lower..*upper)).collect())
                .collect())
        }
        _ => generate_inputs(signal, steps, p),
    }
}

/// Rolls out `count` trajectories of `steps` triplets each. Trajectories that
/// hit a non-finite state are excluded from the dataset and reported.
pub fn collect_trajectories(
    system: &DynamicalSystem,
    x0_sampler: &BoxSampler,
    signal: &InputSignal,
    steps: usize,
    cfg: &IntegrationConfig,
    count: usize,
) -> Result<TrajectoryDataset> {
    if count == 0 || steps == 0 {
        return Err(Error::InvalidArgument(
            "collect_trajectories needs count >= 1 and steps >= 1".to_string(),
        ));
    }
    let initial_states = x0_sampler.sample_batch(count);
    let mut ds = TrajectoryDataset::empty(system.n, system.p);
    for (ti, x0) in initial_states.into_iter().enumerate() {
        let inputs = per_trajectory_inputs(signal, ti, steps, system.p)?;
        match rollout_open_loop(system, &x0, &inputs, cfg) {
            Ok(states) => ds.push_rollout(Rollout {
                states,
                inputs,
                group: 0,
                provenance: Provenance::OpenLoop {
                    signal: signal.describe(),
                    seed: signal.seed(),
                },
            })?,
            Err((step, reason)) => ds.excluded.push(ExcludedTrajectory {
                index: ti,
                step,
                reason,
            }),
        }
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "all {count} trajectories were excluded (first reason: {})",
            ds.excluded
                .first()
                .map(|e| e.reason.clone())
                .unwrap_or_default()
        )));
    }
    Ok(ds)
}

fn rollout_open_loop(
    system: &DynamicalSystem,
    x0: &[f64],
    inputs: &[Vec<f64>],
    cfg: &IntegrationConfig,
) -> std::result::Result<Vec<Vec<f64>>, (usize, String)> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(x0.to_vec());
    for (k, u) in inputs.iter().enumerate() {
        match discrete_step(system, states.last().unwrap(), u, cfg) {
            Ok(y) if all_finite(&y) => states.push(y),
            Ok(_) => return Err((k, "non-finite state".to_string())),
            Err(e) => return Err((k, e.to_string())),
        }
    }
    Ok(states)
}

/// Relabels trajectories round-robin into `group_count` groups, regenerates
/// the inputs of group `i` as `cos(ω_i·k·dt)`, and re-simulates each
/// trajectory from its stored initial state.
pub fn split_into_groups(
    dataset: &TrajectoryDataset,
    system: &DynamicalSystem,
    cfg: Option<&IntegrationConfig>,
    group_count: usize,
    frequencies: &[f64],
    dt: f64,
) -> Result<TrajectoryDataset> {
    if group_count == 0 || frequencies.len() != group_count {
        return Err(Error::InvalidArgument(format!(
            "need one frequency per group, got {} frequencies for {} groups",
            frequencies.len(),
            group_count
        )));
    }
    let cfg = match (system.kind, cfg) {
        (SystemKind::Continuous, None) => {
            return Err(Error::InvalidArgument(
                "continuous-kind system requires an IntegrationConfig to re-simulate".to_string(),
            ))
        }
        (SystemKind::Continuous, Some(c)) => *c,
        (SystemKind::Discrete, c) => c.copied().unwrap_or_default(),
    };

    let mut out = TrajectoryDataset::empty(dataset.n, dataset.p);
    out.excluded = dataset.excluded.clone();
    for (ti, meta) in dataset.trajectories.iter().enumerate() {
        let group = ti % group_count;
        let signal = InputSignal::cosine(frequencies[group], dt);
        let inputs = generate_inputs(&signal, meta.len, dataset.p)?;
        let states = rollout_open_loop(system, &meta.x0, &inputs, &cfg)
            .map_err(|(step, reason)| Error::NonFinite {
                stage: format!("re-simulation of trajectory {ti} at step {step}: {reason}"),
            })?;
        out.push_rollout(Rollout {
            states,
            inputs,
            group: group as i64,
            provenance: Provenance::OpenLoop {
                signal: signal.describe(),
                seed: None,
            },
        })?;
    }
    Ok(out)
}

/// Rolls out the TRUE system under the feedback law `u_k = K·g(x_k)`.
/// Trajectories are truncated (prefix kept) once the state norm exceeds
/// `blow_up_radius` or turns non-finite.
#[allow(clippy::too_many_arguments)]
pub fn collect_closed_loop(
    system: &DynamicalSystem,
    model: &KoopmanModel,
    gain: &FeedbackGain,
    x0_sampler: &BoxSampler,
    steps: usize,
    cfg: &IntegrationConfig,
    count: usize,
    blow_up_radius: f64,
) -> Result<TrajectoryDataset> {
    if count == 0 || steps == 0 {
        return Err(Error::InvalidArgument(
            "collect_closed_loop needs count >= 1 and steps >= 1".to_string(),
        ));
    }
    if gain.k.ncols() != model.lifted_dim() {
        return Err(Error::DimensionMismatch {
            context: "feedback gain columns",
            expected: model.lifted_dim(),
            found: gain.k.ncols(),
        });
    }
    let initial_states = x0_sampler.sample_batch(count);
    let mut ds = TrajectoryDataset::empty(system.n, system.p);
    for (ti, x0) in initial_states.into_iter().enumerate() {
        let mut states = vec![x0.clone()];
        let mut inputs: Vec<Vec<f64>> = Vec::new();
        for k in 0..steps {
            let x = states.last().unwrap().clone();
            let lifted = model.observables.lift(&x)?;
            let u_vec = &gain.k * &lifted.values;
            let u: Vec<f64> = u_vec.iter().copied().collect();
            match discrete_step(system, &x, &u, cfg) {
                Ok(y) if all_finite(&y) => {
                    let blow_up = state_norm(&y) > blow_up_radius;
                    inputs.push(u);
                    states.push(y);
                    if blow_up {
                        break;
                    }
                }
                Ok(_) | Err(_) => {
                    let _ = k;
                    break;
                }
            }
        }
        if inputs.is_empty() {
            ds.excluded.push(ExcludedTrajectory {
                index: ti,
                step: 0,
                reason: "closed-loop rollout failed on the first step".to_string(),
            });
            continue;
        }
        ds.push_rollout(Rollout {
            states,
            inputs,
            group: 0,
            provenance: Provenance::Feedback,
        })?;
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset(
            "all closed-loop trajectories failed on their first step".to_string(),
        ));
    }
    Ok(ds)
}

/// Concatenation preserving boundaries and provenance (free-function form).
pub fn merge(a: &TrajectoryDataset, b: &TrajectoryDataset) -> Result<TrajectoryDataset> {
    a.merge(b)
}
