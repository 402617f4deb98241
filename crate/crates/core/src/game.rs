//! Data model of a local dynamic game and evaluation of its costs and constraints.
//!
//! Player `i` pays, at every step `k < T`,
//!
//! ```text
//! (x_i - g_i)' Q (x_i - g_i) + (u_i - u_ref)' R (u_i - u_ref) + sum_j mu/2 max(0, R_rad - |p_i - p_j|)^2
//! ```
//!
//! and a terminal cost equal to the goal term scaled by `terminal_weight`. Distances only use
//! the position sub-vector of each state.

use std::collections::HashSet;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DiscretizationSpec, Dynamics, Vector};
use crate::error::{Error, Result};

/// Distances below this are treated as coincident by the inverse-square proxy (m).
pub const COINCIDENCE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub usize);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Scalar cost parameters shared by homogeneous agents; expands into a [`CostSpec`] per goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostWeights {
    pub q_position: f64,
    pub q_velocity: f64,
    /// Quadrotor only.
    pub q_attitude: f64,
    /// Quadrotor only.
    pub q_body_rates: f64,
    pub r_control: f64,
    /// Collision weight `mu`.
    pub mu: f64,
    /// Repulsion radius (m). `None` means `2 * spacing / 5` of the scenario grid.
    pub repulsion_radius: Option<f64>,
    pub terminal_weight: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            q_position: 1.0,
            q_velocity: 0.1,
            q_attitude: 1.0,
            q_body_rates: 0.1,
            r_control: 0.1,
            mu: 10.0,
            repulsion_radius: None,
            terminal_weight: 10.0,
        }
    }
}

impl CostWeights {
    pub fn cost_spec(&self, model: &Dynamics, goal: Vector, repulsion_radius: f64) -> CostSpec {
        let q = match model {
            Dynamics::DoubleIntegrator => vec![self.q_position, self.q_position, self.q_velocity, self.q_velocity],
            Dynamics::Quadrotor(_) => [[self.q_position; 3], [self.q_attitude; 3], [self.q_velocity; 3], [self.q_body_rates; 3]].concat(),
        };
        let m = model.control_dim();
        CostSpec {
            state_weight: DMatrix::from_diagonal(&Vector::from_vec(q)),
            control_weight: DMatrix::identity(m, m) * self.r_control,
            goal,
            control_reference: model.neutral_control(),
            collision_weight: self.mu,
            repulsion_radius,
            terminal_weight: self.terminal_weight,
        }
    }
}

/// Per-player cost. The control term is measured from `control_reference` (zero for the
/// double integrator, the hover powers for the quadrotor).
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    /// Q
    pub state_weight: DMatrix<f64>,
    /// R
    pub control_weight: DMatrix<f64>,
    pub goal: Vector,
    pub control_reference: Vector,
    /// mu
    pub collision_weight: f64,
    pub repulsion_radius: f64,
    pub terminal_weight: f64,
}

fn is_psd(m: &DMatrix<f64>) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return false;
    }
    m.clone().symmetric_eigenvalues().iter().all(|&e| e >= -1e-12 * scale)
}

impl CostSpec {
    pub fn validate(&self, model: &Dynamics) -> Result<()> {
        let n = model.state_dim();
        let m = model.control_dim();
        if self.state_weight.shape() != (n, n) || self.goal.len() != n {
            return Err(Error::invalid("cost state weight / goal dimension mismatch"));
        }
        if self.control_weight.shape() != (m, m) || self.control_reference.len() != m {
            return Err(Error::invalid("cost control weight / reference dimension mismatch"));
        }
        if !is_psd(&self.state_weight) {
            return Err(Error::invalid("state weight must be symmetric positive semidefinite"));
        }
        if !is_psd(&self.control_weight) {
            return Err(Error::invalid("control weight must be symmetric positive semidefinite"));
        }
        if !(self.collision_weight.is_finite() && self.collision_weight >= 0.0) {
            return Err(Error::invalid("collision weight must be >= 0"));
        }
        if !(self.repulsion_radius.is_finite() && self.repulsion_radius > 0.0) {
            return Err(Error::invalid("repulsion radius must be > 0"));
        }
        if !(self.terminal_weight.is_finite() && self.terminal_weight >= 0.0) {
            return Err(Error::invalid("terminal weight must be >= 0"));
        }
        Ok(())
    }

    fn goal_term(&self, state: &Vector) -> f64 {
        let e = state - &self.goal;
        e.dot(&(&self.state_weight * &e))
    }

    fn control_term(&self, control: &Vector) -> f64 {
        let e = control - &self.control_reference;
        e.dot(&(&self.control_weight * &e))
    }

    pub fn terminal_cost(&self, state: &Vector) -> f64 {
        self.terminal_weight * self.goal_term(state)
    }
}

/// Soft repulsion `mu/2 * max(0, radius - distance)^2`.
pub fn collision_penalty(mu: f64, radius: f64, distance: f64) -> f64 {
    let gap = (radius - distance).max(0.0);
    0.5 * mu * gap * gap
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Running cost of one agent at one step, against the given other agents' states.
pub fn stage_cost(spec: &CostSpec, model: &Dynamics, state: &Vector, control: &Vector, others: &[&Vector]) -> Result<f64> {
    if state.len() != model.state_dim() || control.len() != model.control_dim() || spec.goal.len() != state.len() {
        return Err(Error::invalid("stage cost dimension mismatch"));
    }
    if !all_finite(state.as_slice()) || !all_finite(control.as_slice()) {
        return Err(Error::invalid("stage cost inputs must be finite"));
    }
    let p = model.position(state);
    let mut collision = 0.0;
    for other in others {
        if other.len() != state.len() || !all_finite(model.position(other)) {
            return Err(Error::invalid("other agent state must be finite and well-formed"));
        }
        collision += collision_penalty(spec.collision_weight, spec.repulsion_radius, distance(p, model.position(other)));
    }
    Ok(spec.goal_term(state) + spec.control_term(control) + collision)
}

/// Inverse-square collision proxy `sum_j mu / |p_i - p_j|^2`.
pub fn collision_proxy(mu: f64, ego: &[f64], others: &[&[f64]]) -> Result<f64> {
    let mut total = 0.0;
    for other in others {
        if other.len() != ego.len() {
            return Err(Error::invalid("position dimension mismatch"));
        }
        let d = distance(ego, other);
        if !(d >= COINCIDENCE_EPS) {
            return Err(Error::DegenerateGeometry { distance: d });
        }
        total += mu / (d * d);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub controls: Vec<Vector>,
}

impl Policy {
    pub fn constant(control: Vector, len: usize) -> Self {
        Self { controls: vec![control; len] }
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    /// Drop the first control and repeat the last one.
    pub fn shifted(&self) -> Self {
        let mut controls: Vec<Vector> = self.controls.iter().skip(1).cloned().collect();
        if let Some(last) = self.controls.last() {
            controls.push(last.clone());
        }
        Self { controls }
    }
}

/// Joint trajectory: `states[a][k]` is agent `a`'s state at step `k` (T steps),
/// `policies[a]` its T-1 controls.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTrajectory {
    pub states: Vec<Vec<Vector>>,
    pub policies: Vec<Policy>,
}

impl JointTrajectory {
    pub fn num_agents(&self) -> usize {
        self.states.len()
    }

    pub fn horizon(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    /// Largest `|x_{k+1} - f(x_k, u_k)|` entry over agents and steps.
    pub fn dynamics_residual(&self, model: &Dynamics, spec: &DiscretizationSpec) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (xs, pol) in self.states.iter().zip(&self.policies) {
            for (k, u) in pol.controls.iter().enumerate() {
                let pred = model.step(spec, &xs[k], u)?;
                worst = worst.max((&xs[k + 1] - pred).amax());
            }
        }
        Ok(worst)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlBounds {
    pub lower: Vector,
    pub upper: Vector,
}

/// Hard inequality constraints `C(X, pi) <= 0`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConstraintSpec {
    /// Pairwise minimum separation (m). Zero disables the pairwise constraints in practice.
    pub min_distance: f64,
    pub control_bounds: Option<ControlBounds>,
}

/// A fully assembled local game.
///
/// Participants are stored in ascending id order; `ego` indexes the planning agent.
#[derive(Debug, Clone, PartialEq)]
pub struct GameProblem {
    pub participants: Vec<AgentId>,
    pub ego: usize,
    /// Number of states per trajectory (T); policies have T-1 controls.
    pub horizon: usize,
    pub dynamics: Dynamics,
    pub discretization: DiscretizationSpec,
    pub costs: Vec<CostSpec>,
    pub initial_states: Vec<Vector>,
    pub constraints: ConstraintSpec,
}

impl GameProblem {
    pub fn validate(&self) -> Result<()> {
        let n = self.participants.len();
        if n == 0 {
            return Err(Error::invalid("a game needs at least one participant"));
        }
        if self.horizon < 2 {
            return Err(Error::invalid(format!("horizon must be >= 2, got {}", self.horizon)));
        }
        if self.ego >= n {
            return Err(Error::invalid("ego index out of range"));
        }
        let unique: HashSet<_> = self.participants.iter().collect();
        if unique.len() != n {
            return Err(Error::invalid("participant ids must be unique"));
        }
        if self.costs.len() != n || self.initial_states.len() != n {
            return Err(Error::invalid("one cost and one initial state per participant"));
        }
        self.discretization.validate(&self.dynamics)?;
        for (cost, x0) in self.costs.iter().zip(&self.initial_states) {
            cost.validate(&self.dynamics)?;
            if x0.len() != self.dynamics.state_dim() || !all_finite(x0.as_slice()) {
                return Err(Error::invalid("initial state must be finite with the model's dimension"));
            }
        }
        if !(self.constraints.min_distance.is_finite() && self.constraints.min_distance >= 0.0) {
            return Err(Error::invalid("min distance must be >= 0"));
        }
        if let Some(b) = &self.constraints.control_bounds {
            let m = self.dynamics.control_dim();
            if b.lower.len() != m || b.upper.len() != m || b.lower.iter().zip(b.upper.iter()).any(|(l, u)| !(l <= u)) {
                return Err(Error::invalid("control bounds must satisfy lower <= upper per coordinate"));
            }
        }
        Ok(())
    }

    pub fn num_players(&self) -> usize {
        self.participants.len()
    }

    pub fn index_of(&self, id: AgentId) -> Option<usize> {
        self.participants.iter().position(|&p| p == id)
    }

    pub fn neutral_policy(&self) -> Policy {
        Policy::constant(self.dynamics.neutral_control(), self.horizon - 1)
    }

    pub fn check_policies(&self, policies: &[Policy]) -> Result<()> {
        if policies.len() != self.num_players() {
            return Err(Error::invalid("one policy per participant"));
        }
        let m = self.dynamics.control_dim();
        for p in policies {
            if p.len() != self.horizon - 1 || p.controls.iter().any(|u| u.len() != m) {
                return Err(Error::invalid(format!("policies need {} controls of dimension {m}", self.horizon - 1)));
            }
        }
        Ok(())
    }

    /// Roll every participant forward under its policy.
    pub fn rollout(&self, policies: Vec<Policy>) -> Result<JointTrajectory> {
        self.check_policies(&policies)?;
        let states = self
            .initial_states
            .iter()
            .zip(&policies)
            .map(|(x0, p)| self.dynamics.rollout(&self.discretization, x0, &p.controls))
            .collect::<Result<Vec<_>>>()?;
        Ok(JointTrajectory { states, policies })
    }

    pub fn check_trajectory(&self, traj: &JointTrajectory) -> Result<()> {
        self.check_policies(&traj.policies)?;
        let n = self.dynamics.state_dim();
        if traj.states.len() != self.num_players()
            || traj.states.iter().any(|xs| xs.len() != self.horizon || xs.iter().any(|x| x.len() != n))
        {
            return Err(Error::invalid(format!("trajectory needs {} states per participant", self.horizon)));
        }
        Ok(())
    }

    /// Number of entries of [`inequality_residuals`]: `T * P(P-1)/2` pairwise terms plus two
    /// bound terms per control coordinate when bounds are set.
    pub fn inequality_count(&self) -> usize {
        let p = self.num_players();
        let pairs = self.horizon * p * (p.saturating_sub(1)) / 2;
        let bounds = if self.constraints.control_bounds.is_some() { 2 * p * (self.horizon - 1) * self.dynamics.control_dim() } else { 0 };
        pairs + bounds
    }
}

/// Total cost of participant `agent` along `traj`: stage costs for `k = 0..T-2` against all other
/// participants, plus the terminal cost at `T-1`.
pub fn total_cost(problem: &GameProblem, traj: &JointTrajectory, agent: usize) -> Result<f64> {
    problem.check_trajectory(traj)?;
    if agent >= problem.num_players() {
        return Err(Error::invalid("agent index out of range"));
    }
    let spec = &problem.costs[agent];
    let t = problem.horizon;
    let mut total = spec.terminal_cost(&traj.states[agent][t - 1]);
    for k in 0..t - 1 {
        let others: Vec<&Vector> = (0..problem.num_players()).filter(|&j| j != agent).map(|j| &traj.states[j][k]).collect();
        total += stage_cost(spec, &problem.dynamics, &traj.states[agent][k], &traj.policies[agent].controls[k], &others)?;
    }
    Ok(total)
}

/// Stacked values of `C(X, pi)`; entries are `<= 0` when satisfied.
///
/// Layout: for each step `k in 0..T`, for each pair `a < b`, `R_min^2 - |p_a - p_b|^2`; then, if
/// bounds are set, for each participant, step `k in 0..T-1` and coordinate `c`,
/// `lower_c - u_c` followed by `u_c - upper_c`.
pub fn inequality_residuals(problem: &GameProblem, traj: &JointTrajectory) -> Result<Vector> {
    problem.check_trajectory(traj)?;
    let model = &problem.dynamics;
    let p = problem.num_players();
    let rmin2 = problem.constraints.min_distance.powi(2);
    let mut out = Vec::with_capacity(problem.inequality_count());
    for k in 0..problem.horizon {
        for a in 0..p {
            for b in a + 1..p {
                let d = distance(model.position(&traj.states[a][k]), model.position(&traj.states[b][k]));
                out.push(rmin2 - d * d);
            }
        }
    }
    if let Some(bounds) = &problem.constraints.control_bounds {
        for pol in &traj.policies {
            for u in &pol.controls {
                for c in 0..u.len() {
                    out.push(bounds.lower[c] - u[c]);
                    out.push(u[c] - bounds.upper[c]);
                }
            }
        }
    }
    Ok(Vector::from_vec(out))
}
