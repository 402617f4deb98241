//! Experiment configuration file (TOML).
//!
//! Every section and field is optional; omitted values take the defaults below. Errors name the
//! offending field as a dotted path, e.g. `selection.kappa`.
//!
//! ```toml
//! [scenario]
//! grid = "3x3"          # AxB (planar) or AxBxC (cube)
//! spacing = 2.0         # m
//! steps = 150
//! seed = 0              # first seed; runs use seed, seed+1, ...
//! runs = 20
//!
//! [dynamics]
//! model = "double_integrator"   # or "quadrotor"; default follows the grid dimension
//! dt = 0.1
//!
//! [dynamics.quadrotor]
//! mass = 1.0
//! inertia = [0.01, 0.01, 0.02]
//!
//! [cost]
//! q_position = 1.0
//! mu = 10.0
//! repulsion_radius = 0.8        # default 2 * spacing / 5
//!
//! [constraints]
//! min_distance = 0.0
//! control_lower = [-5.0, -5.0]
//! control_upper = [5.0, 5.0]
//!
//! [solver]
//! tolerance = 1e-6
//!
//! [planner]
//! horizon = 10
//! replan_period = 1
//! warm_start = true
//!
//! [selection]
//! kappa = 5.0                   # required when bf or cbf is swept
//! fd_step = 1e-4
//!
//! [sweep]
//! schemes = ["nn", "ce", "bf", "cbf"]
//! p = [1, 2, 3, 4]
//! full_game = true
//!
//! [output]
//! trajectories = false
//! record_wall_time = false
//! ```

use std::path::Path;

use nalgebra::Matrix3;
use serde::Deserialize;

use crate::dynamics::{DiscretizationSpec, Dynamics, QuadrotorParams, DEFAULT_DT};
use crate::error::{Error, Result};
use crate::game::{ConstraintSpec, ControlBounds, CostWeights};
use crate::harness::{Grid, ScenarioConfig};
use crate::planner::PlannerConfig;
use crate::selection::{SelectionParams, SelectionScheme, DEFAULT_FD_STEP};
use crate::solver::SolverConfig;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub grid: String,
    pub spacing: f64,
    pub steps: usize,
    pub seed: u64,
    pub runs: usize,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self { grid: "3x3".into(), spacing: 2.0, steps: 150, seed: 0, runs: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadrotorSection {
    pub mass: f64,
    pub inertia: [f64; 3],
    pub force_constant: f64,
    pub torque_constant: f64,
    pub arm_length: f64,
    pub gravity: f64,
    pub max_power_factor: f64,
}

impl Default for QuadrotorSection {
    fn default() -> Self {
        let p = QuadrotorParams::default();
        Self {
            mass: p.mass,
            inertia: [p.inertia[(0, 0)], p.inertia[(1, 1)], p.inertia[(2, 2)]],
            force_constant: p.force_constant,
            torque_constant: p.torque_constant,
            arm_length: p.arm_length,
            gravity: p.gravity,
            max_power_factor: p.max_power_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsSection {
    pub model: Option<String>,
    pub dt: f64,
    pub quadrotor: QuadrotorSection,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self { model: None, dt: DEFAULT_DT, quadrotor: QuadrotorSection::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintsSection {
    pub min_distance: f64,
    /// Both bounds or neither. Without them the quadrotor uses `[0, max power]` per motor.
    pub control_lower: Option<Vec<f64>>,
    pub control_upper: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerSection {
    pub horizon: usize,
    pub replan_period: usize,
    pub warm_start: bool,
}

impl Default for PlannerSection {
    fn default() -> Self {
        Self { horizon: 10, replan_period: 1, warm_start: true }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    pub kappa: Option<f64>,
    pub fd_step: f64,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self { kappa: None, fd_step: DEFAULT_FD_STEP }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub schemes: Vec<String>,
    pub p: Vec<usize>,
    /// Add a full-game row (every agent plays against all others).
    pub full_game: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { schemes: SelectionScheme::ALL.iter().map(|s| s.token().to_string()).collect(), p: vec![1, 2, 3, 4], full_game: false }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Write one trajectory file per run.
    pub trajectories: bool,
    /// Fill the `mean_solve_ms` column (makes reruns differ).
    pub record_wall_time: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub scenario: ScenarioSection,
    pub dynamics: DynamicsSection,
    pub cost: CostWeights,
    pub constraints: ConstraintsSection,
    pub solver: SolverConfig,
    pub planner: PlannerSection,
    pub selection: SelectionSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

fn field(path: &str, message: impl Into<String>) -> Error {
    Error::Config { path: path.to_string(), message: message.into() }
}

fn positive(path: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(field(path, format!("must be > 0, got {v}")))
    }
}

fn non_negative(path: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(field(path, format!("must be >= 0, got {v}")))
    }
}

/// One cell of a sweep; `scheme = None` is the full game.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub scheme: Option<SelectionScheme>,
    pub p: usize,
}

impl Config {
    /// Parse without semantic checks; syntax and type errors name the field.
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| field("", e.to_string().trim().to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let message = e.into_inner().to_string();
            field(if path == "." { "" } else { &path }, message.trim().to_string())
        })
    }

    /// Parse and validate a configuration file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config = Self::parse(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn grid(&self) -> Result<Grid> {
        self.scenario.grid.parse().map_err(|e: Error| field("scenario.grid", e.to_string()))
    }

    pub fn dynamics(&self) -> Result<Dynamics> {
        let model = match &self.dynamics.model {
            Some(m) => m.clone(),
            None if self.grid()?.dims.len() == 3 => "quadrotor".into(),
            None => "double_integrator".into(),
        };
        match model.as_str() {
            "double_integrator" => Ok(Dynamics::DoubleIntegrator),
            "quadrotor" => {
                let q = &self.dynamics.quadrotor;
                let params = QuadrotorParams {
                    mass: q.mass,
                    inertia: Matrix3::from_diagonal(&q.inertia.into()),
                    force_constant: q.force_constant,
                    torque_constant: q.torque_constant,
                    arm_length: q.arm_length,
                    gravity: q.gravity,
                    max_power_factor: q.max_power_factor,
                };
                Dynamics::quadrotor(params).map_err(|e| field("dynamics.quadrotor", e.to_string()))
            }
            other => Err(field("dynamics.model", format!("unknown model `{other}` (expected double_integrator or quadrotor)"))),
        }
    }

    pub fn repulsion_radius(&self) -> f64 {
        self.cost.repulsion_radius.unwrap_or(2.0 * self.scenario.spacing / 5.0)
    }

    pub fn schemes(&self) -> Result<Vec<SelectionScheme>> {
        self.sweep
            .schemes
            .iter()
            .enumerate()
            .map(|(i, s)| s.parse().map_err(|e: Error| field(&format!("sweep.schemes[{i}]"), e.to_string())))
            .collect()
    }

    /// Semantic checks for the sweep as configured.
    pub fn validate(&self) -> Result<()> {
        self.validate_for(&self.schemes()?)
    }

    /// Semantic checks when running `schemes` (which may differ from the configured sweep).
    pub fn validate_for(&self, schemes: &[SelectionScheme]) -> Result<()> {
        let grid = self.grid()?;
        positive("scenario.spacing", self.scenario.spacing)?;
        if self.scenario.runs == 0 {
            return Err(field("scenario.runs", "must be >= 1"));
        }
        let model = self.dynamics()?;
        if grid.dims.len() > model.spatial_dim() {
            return Err(field("scenario.grid", format!("a {}-D grid does not fit the {} model", grid.dims.len(), model.name())));
        }
        positive("dynamics.dt", self.dynamics.dt)?;

        let c = &self.cost;
        for (name, v) in [
            ("q_position", c.q_position),
            ("q_velocity", c.q_velocity),
            ("q_attitude", c.q_attitude),
            ("q_body_rates", c.q_body_rates),
            ("r_control", c.r_control),
            ("mu", c.mu),
            ("terminal_weight", c.terminal_weight),
        ] {
            non_negative(&format!("cost.{name}"), v)?;
        }
        if let Some(r) = c.repulsion_radius {
            positive("cost.repulsion_radius", r)?;
        }

        non_negative("constraints.min_distance", self.constraints.min_distance)?;
        self.control_bounds(&model)?;

        self.solver.validate().map_err(|e| field("solver", e.to_string()))?;
        if self.planner.horizon < 2 {
            return Err(field("planner.horizon", "must be >= 2"));
        }
        if self.planner.replan_period == 0 {
            return Err(field("planner.replan_period", "must be >= 1"));
        }

        match self.selection.kappa {
            Some(k) => positive("selection.kappa", k)?,
            None => {
                if let Some(s) = schemes.iter().find(|s| s.needs_kappa()) {
                    return Err(field("selection.kappa", format!("missing; required by scheme `{s}`")));
                }
            }
        }
        positive("selection.fd_step", self.selection.fd_step)?;
        if self.sweep.p.is_empty() && !self.sweep.full_game {
            return Err(field("sweep.p", "sweep has no cells"));
        }
        Ok(())
    }

    fn control_bounds(&self, model: &Dynamics) -> Result<Option<ControlBounds>> {
        let m = model.control_dim();
        match (&self.constraints.control_lower, &self.constraints.control_upper) {
            (None, None) => Ok(model.control_limits().map(|(lower, upper)| ControlBounds { lower, upper })),
            (Some(lo), Some(hi)) => {
                if lo.len() != m {
                    return Err(field("constraints.control_lower", format!("needs {m} entries")));
                }
                if hi.len() != m {
                    return Err(field("constraints.control_upper", format!("needs {m} entries")));
                }
                if lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
                    return Err(field("constraints.control_upper", "must be >= control_lower"));
                }
                Ok(Some(ControlBounds { lower: lo.clone().into(), upper: hi.clone().into() }))
            }
            (Some(_), None) => Err(field("constraints.control_upper", "missing; both bounds are required")),
            (None, Some(_)) => Err(field("constraints.control_lower", "missing; both bounds are required")),
        }
    }

    pub fn scenario_config(&self) -> Result<ScenarioConfig> {
        let dynamics = self.dynamics()?;
        Ok(ScenarioConfig {
            grid: self.grid()?,
            spacing: self.scenario.spacing,
            discretization: DiscretizationSpec::for_model(&dynamics, self.dynamics.dt),
            constraints: ConstraintSpec { min_distance: self.constraints.min_distance, control_bounds: self.control_bounds(&dynamics)? },
            dynamics,
            cost: self.cost.clone(),
            repulsion_radius: self.repulsion_radius(),
            steps: self.scenario.steps,
        })
    }

    pub fn planner_config(&self, cell: Cell) -> PlannerConfig {
        PlannerConfig {
            players: cell.p,
            scheme: cell.scheme,
            selection: SelectionParams {
                // Only read by the barrier schemes, for which validation requires it.
                kappa: self.selection.kappa.unwrap_or(crate::selection::DEFAULT_KAPPA),
                fd_step: self.selection.fd_step,
                mu: self.cost.mu,
                radius: self.repulsion_radius(),
            },
            horizon: self.planner.horizon,
            replan_period: self.planner.replan_period,
            solver: self.solver.clone(),
            warm_start: self.planner.warm_start,
        }
    }

    /// Sweep cells: every scheme against every `p`, then the full game if requested.
    pub fn cells(&self, schemes: &[SelectionScheme], ps: &[usize]) -> Result<Vec<Cell>> {
        let n = self.grid()?.num_agents();
        let mut cells: Vec<Cell> = schemes.iter().flat_map(|&s| ps.iter().map(move |&p| Cell { scheme: Some(s), p })).collect();
        if self.sweep.full_game {
            cells.push(Cell { scheme: None, p: n - 1 });
        }
        Ok(cells)
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.scenario.runs as u64).map(|r| self.scenario.seed + r).collect()
    }
}
