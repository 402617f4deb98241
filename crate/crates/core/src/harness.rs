//! Grid-swap scenarios, closed-loop simulation, metrics and their tabular files.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DiscretizationSpec, Dynamics, Vector};
use crate::error::{Error, Result};
use crate::game::{distance, AgentId, ConstraintSpec, CostSpec, CostWeights};
use crate::planner::{plan_step, LocalGameReport, PlanMemory, PlannerConfig, World};
use crate::selection::{InteractionSnapshot, SelectionScheme};

/// Agents per axis; two axes for planar scenarios, three for the cube.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    pub dims: Vec<usize>,
}

impl Grid {
    pub fn num_agents(&self) -> usize {
        self.dims.iter().product()
    }

    /// Node coordinates in row-major order (last axis fastest).
    pub fn nodes(&self, spacing: f64) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new()];
        for &d in &self.dims {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    (0..d).map(move |k| {
                        let mut p = prefix.clone();
                        p.push(k as f64 * spacing);
                        p
                    })
                })
                .collect();
        }
        out
    }
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let dims = s
            .split(['x', 'X'])
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::invalid(format!("grid `{s}` is not of the form AxB or AxBxC")))?;
        if !(2..=3).contains(&dims.len()) || dims.contains(&0) {
            return Err(Error::invalid(format!("grid `{s}` needs 2 or 3 positive sizes")));
        }
        if dims.iter().product::<usize>() < 2 {
            return Err(Error::invalid("a scenario needs at least two agents"));
        }
        Ok(Grid { dims })
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(usize::to_string).collect();
        f.write_str(&parts.join("x"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub grid: Grid,
    pub spacing: f64,
    pub dynamics: Dynamics,
    pub discretization: DiscretizationSpec,
    pub cost: CostWeights,
    /// Repulsion radius, also the normalization of the distance metric.
    pub repulsion_radius: f64,
    pub constraints: ConstraintSpec,
    /// Simulation length in steps.
    pub steps: usize,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::invalid("grid spacing must be > 0"));
        }
        if !(self.repulsion_radius > 0.0 && self.repulsion_radius.is_finite()) {
            return Err(Error::invalid("repulsion radius must be > 0"));
        }
        if self.grid.dims.len() > self.dynamics.spatial_dim() {
            return Err(Error::invalid(format!("a {}-D grid does not fit the {} model", self.grid.dims.len(), self.dynamics.name())));
        }
        self.discretization.validate(&self.dynamics)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub ids: Vec<AgentId>,
    pub initial_states: Vec<Vector>,
    /// Goal positions.
    pub goals: Vec<Vec<f64>>,
    pub costs: Vec<CostSpec>,
}

fn pad(position: &[f64], dim: usize) -> Vec<f64> {
    let mut p = position.to_vec();
    p.resize(dim, 0.0);
    p
}

/// Agents at rest on the grid nodes, goals a random derangement of the nodes drawn from `seed`.
pub fn make_scenario(config: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    config.validate()?;
    let dim = config.dynamics.spatial_dim();
    let nodes: Vec<Vec<f64>> = config.grid.nodes(config.spacing).iter().map(|p| pad(p, dim)).collect();
    let n = nodes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &j)| i != j) {
            break;
        }
    }
    let goals: Vec<Vec<f64>> = perm.iter().map(|&j| nodes[j].clone()).collect();
    let initial_states = nodes.iter().map(|p| config.dynamics.rest_state(p)).collect::<Result<Vec<_>>>()?;
    let costs = goals
        .iter()
        .map(|g| Ok(config.cost.cost_spec(&config.dynamics, config.dynamics.rest_state(g)?, config.repulsion_radius)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Scenario { ids: (0..n).map(AgentId).collect(), initial_states, goals, costs })
}

/// Everything that happened during one closed-loop simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub scheme: Option<SelectionScheme>,
    pub players: usize,
    pub ids: Vec<AgentId>,
    pub goals: Vec<Vec<f64>>,
    /// `states[k][a]`, `k = 0..=steps`.
    pub states: Vec<Vec<Vector>>,
    /// `controls[k][a]` applied between `states[k]` and `states[k + 1]`.
    pub controls: Vec<Vec<Vector>>,
    pub reports: Vec<Vec<LocalGameReport>>,
    /// Why the simulation stopped early, if it did.
    pub failure: Option<String>,
}

impl RunRecord {
    pub fn num_steps(&self) -> usize {
        self.controls.len()
    }

    /// Copy with wall-clock solve times zeroed, for exact comparisons.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        for r in out.reports.iter_mut().flatten() {
            r.solve_time = Duration::ZERO;
        }
        out
    }
}

/// Simulate the closed loop for `config.steps` steps with one planner config per agent.
///
/// A fatal simulation error ends the run early; the partial record carries the reason.
pub fn run(config: &ScenarioConfig, scenario: &Scenario, planners: &[PlannerConfig], seed: u64) -> Result<RunRecord> {
    config.validate()?;
    let n = scenario.ids.len();
    if planners.len() != n {
        return Err(Error::invalid("one planner config per agent"));
    }
    let model = &config.dynamics;
    let neutral = model.neutral_control();
    let mut record = RunRecord {
        seed,
        scheme: planners[0].scheme,
        players: planners[0].players,
        ids: scenario.ids.clone(),
        goals: scenario.goals.clone(),
        states: vec![scenario.initial_states.clone()],
        controls: Vec::new(),
        reports: Vec::new(),
        failure: None,
    };
    let mut memory = vec![PlanMemory::default(); n];
    let mut previous: Option<Vec<Vector>> = None;
    let mut last_controls = vec![neutral; n];
    for step in 0..config.steps {
        let current = record.states.last().expect("initial state").clone();
        let world = World {
            snapshot: InteractionSnapshot::new(
                model.clone(),
                config.discretization,
                scenario.ids.clone(),
                current.clone(),
                previous.clone(),
                last_controls.clone(),
            )?,
            costs: scenario.costs.clone(),
            constraints: config.constraints.clone(),
        };
        let plan = match plan_step(&world, planners, &memory) {
            Ok(plan) => plan,
            Err(e) => {
                record.failure = Some(format!("step {step}: planning failed: {e}"));
                break;
            }
        };
        let next: Result<Vec<Vector>> = current.iter().zip(&plan.controls).map(|(x, u)| model.step(&config.discretization, x, u)).collect();
        let next = match next {
            Ok(next) => next,
            Err(e) => {
                record.failure = Some(format!("step {step}: simulation failed: {e}"));
                break;
            }
        };
        log::trace!("seed {seed} step {step}: {} games converged", plan.reports.iter().filter(|r| r.converged).count());
        memory = plan.memory;
        last_controls = plan.controls.clone();
        previous = Some(current);
        record.controls.push(plan.controls);
        record.reports.push(plan.reports);
        record.states.push(next);
    }
    Ok(record)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub min_distance: f64,
    pub normalized_min_distance: f64,
    /// Final distance to goal, per agent.
    pub goal_errors: Vec<f64>,
    pub mean_solve_ms: f64,
    /// Fraction of solved local games that converged.
    pub convergence_rate: f64,
}

impl RunMetrics {
    pub fn mean_goal_error(&self) -> f64 {
        self.goal_errors.iter().sum::<f64>() / self.goal_errors.len().max(1) as f64
    }
}

/// Smallest distance between any two agents over all recorded states.
pub fn min_pairwise_distance(model: &Dynamics, states: &[Vec<Vector>]) -> f64 {
    let mut best = f64::INFINITY;
    for joint in states {
        for a in 0..joint.len() {
            for b in a + 1..joint.len() {
                best = best.min(distance(model.position(&joint[a]), model.position(&joint[b])));
            }
        }
    }
    best
}

pub fn compute_metrics(model: &Dynamics, record: &RunRecord, repulsion_radius: f64) -> Result<RunMetrics> {
    if record.states.is_empty() {
        return Err(Error::invalid("empty record"));
    }
    if !(repulsion_radius > 0.0) {
        return Err(Error::invalid("repulsion radius must be > 0"));
    }
    let min_distance = min_pairwise_distance(model, &record.states);
    let last = record.states.last().expect("non-empty");
    let goal_errors = last.iter().zip(&record.goals).map(|(x, g)| distance(model.position(x), g)).collect();
    let solved: Vec<&LocalGameReport> = record.reports.iter().flatten().filter(|r| r.solved).collect();
    let (mean_solve_ms, convergence_rate) = if solved.is_empty() {
        (0.0, 1.0)
    } else {
        let ms = solved.iter().map(|r| r.solve_time.as_secs_f64() * 1e3).sum::<f64>() / solved.len() as f64;
        let ok = solved.iter().filter(|r| r.converged).count() as f64 / solved.len() as f64;
        (ms, ok)
    };
    Ok(RunMetrics { min_distance, normalized_min_distance: min_distance / repulsion_radius, goal_errors, mean_solve_ms, convergence_rate })
}

/// Scheme column value: a selection scheme token or `full` for the full game.
pub fn scheme_label(scheme: Option<SelectionScheme>) -> &'static str {
    scheme.map_or("full", SelectionScheme::token)
}

pub fn parse_scheme_label(s: &str) -> Result<Option<SelectionScheme>> {
    if s.eq_ignore_ascii_case("full") {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scheme: String,
    pub p: usize,
    pub seed: u64,
    pub min_dist: f64,
    pub normalized_min_dist: f64,
    pub goal_err: f64,
    /// Empty unless wall-clock recording is enabled, so reruns stay byte-identical.
    pub mean_solve_ms: Option<f64>,
    pub convergence_rate: f64,
}

impl MetricsRow {
    pub fn new(record: &RunRecord, metrics: &RunMetrics, record_wall_time: bool) -> Self {
        Self {
            scheme: scheme_label(record.scheme).to_string(),
            p: record.players,
            seed: record.seed,
            min_dist: metrics.min_distance,
            normalized_min_dist: metrics.normalized_min_distance,
            goal_err: metrics.mean_goal_error(),
            mean_solve_ms: record_wall_time.then_some(metrics.mean_solve_ms),
            convergence_rate: metrics.convergence_rate,
        }
    }
}

/// One line of `summary.csv`: statistics of a `(scheme, p)` group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scheme: String,
    pub p: usize,
    pub runs: usize,
    pub mean_normalized_min_dist: f64,
    /// Population standard deviation.
    pub std_normalized_min_dist: f64,
    pub mean_min_dist: f64,
    pub mean_goal_err: f64,
    pub mean_convergence_rate: f64,
}

fn scheme_rank(label: &str) -> usize {
    match parse_scheme_label(label) {
        Ok(Some(s)) => SelectionScheme::ALL.iter().position(|&x| x == s).unwrap_or(0),
        Ok(None) => SelectionScheme::ALL.len(),
        Err(_) => SelectionScheme::ALL.len() + 1,
    }
}

/// Order-independent mean: values are summed in sorted order.
fn mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean and population standard deviation, both insensitive to the input order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    let m = mean(&mut v);
    let mut sq: Vec<f64> = v.iter().map(|x| (x - m) * (x - m)).collect();
    (m, mean(&mut sq).sqrt())
}

/// Group rows by `(scheme, p)`; groups come out in scheme order (`full` last), then by `p`.
pub fn aggregate(rows: &[MetricsRow]) -> Result<Vec<SummaryRow>> {
    if rows.is_empty() {
        return Err(Error::invalid("nothing to aggregate"));
    }
    let mut groups: BTreeMap<(usize, String, usize), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((scheme_rank(&r.scheme), r.scheme.clone(), r.p)).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|((_, scheme, p), rs)| {
            let pick = |f: fn(&MetricsRow) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (m, s) = mean_std(&pick(|r| r.normalized_min_dist));
            SummaryRow {
                scheme,
                p,
                runs: rs.len(),
                mean_normalized_min_dist: m,
                std_normalized_min_dist: s,
                mean_min_dist: mean(&mut pick(|r| r.min_dist)),
                mean_goal_err: mean(&mut pick(|r| r.goal_err)),
                mean_convergence_rate: mean(&mut pick(|r| r.convergence_rate)),
            }
        })
        .collect())
}

/// Write `contents` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("csv buffer: {e}")))
}

fn from_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{}: {other:?}", path.display())),
    })?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    to_csv(rows)
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    to_csv(rows)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    from_csv(path)
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    from_csv(path)
}

/// Names of the state columns in trajectory files.
pub fn state_columns(model: &Dynamics) -> &'static [&'static str] {
    match model {
        Dynamics::DoubleIntegrator => &["px", "py", "vx", "vy"],
        Dynamics::Quadrotor(_) => &["px", "py", "pz", "roll", "pitch", "yaw", "vx", "vy", "vz", "wx", "wy", "wz"],
    }
}

/// Trajectory file: one line per (step, agent) with the state, the players the agent had selected
/// for the control applied from that state (`;`-separated, empty on the last line) and whether
/// that game converged.
pub fn trajectory_csv(model: &Dynamics, record: &RunRecord) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["step", "agent"];
    header.extend_from_slice(state_columns(model));
    header.extend_from_slice(&["selected", "converged"]);
    w.write_record(&header)?;
    for (k, joint) in record.states.iter().enumerate() {
        for (a, x) in joint.iter().enumerate() {
            let mut line = vec![k.to_string(), record.ids[a].to_string()];
            line.extend(x.iter().map(|v| v.to_string()));
            match record.reports.get(k) {
                Some(reports) => {
                    let r = &reports[a];
                    line.push(r.selected.iter().map(|id| id.to_string()).collect::<Vec<_>>().join(";"));
                    line.push(r.converged.to_string());
                }
                None => line.extend([String::new(), String::new()]),
            }
            w.write_record(&line)?;
        }
    }
    w.into_inner().map_err(|e| Error::invalid(format!("csv buffer: {e}")))
}

/// One parsed line of a trajectory file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub agent: AgentId,
    pub state: Vec<f64>,
    pub selected: Vec<AgentId>,
    pub converged: Option<bool>,
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRow>> {
    let bad = |what: &str| Error::invalid(format!("{}: {what}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{}: {other:?}", path.display())),
    })?;
    let width = r.headers()?.len();
    if width < 4 {
        return Err(bad("too few columns"));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad("non-numeric state"));
        let selected = rec[width - 2]
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map(AgentId).map_err(|_| bad("bad selected id")))
            .collect::<Result<Vec<_>>>()?;
        let converged = match &rec[width - 1] {
            "" => None,
            s => Some(s.parse().map_err(|_| bad("bad converged flag"))?),
        };
        out.push(TrajectoryRow {
            step: rec[0].parse().map_err(|_| bad("bad step"))?,
            agent: AgentId(rec[1].parse().map_err(|_| bad("bad agent id"))?),
            state: (2..width - 2).map(num).collect::<Result<_>>()?,
            selected,
            converged,
        });
    }
    Ok(out)
}
