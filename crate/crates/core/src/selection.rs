//! Pairwise interaction scores and top-`p` player selection.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DiscretizationSpec, Dynamics, Vector};
use crate::error::{Error, Result};
use crate::game::{collision_proxy, distance, AgentId};

/// Class-K scale used in all experiments.
pub const DEFAULT_KAPPA: f64 = 5.0;
pub const DEFAULT_FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SelectionScheme {
    #[serde(rename = "nn")]
    NearestNeighbor,
    #[serde(rename = "ce")]
    CostEvolution,
    #[serde(rename = "jacobian")]
    Jacobian,
    #[serde(rename = "hessian")]
    Hessian,
    #[serde(rename = "bf")]
    BarrierFunction,
    #[serde(rename = "cbf")]
    ControlBarrierFunction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Priority {
    /// Lower score is more important.
    Ascending,
    /// Higher score is more important.
    Descending,
}

impl SelectionScheme {
    pub const ALL: [SelectionScheme; 6] = [
        SelectionScheme::NearestNeighbor,
        SelectionScheme::CostEvolution,
        SelectionScheme::Jacobian,
        SelectionScheme::Hessian,
        SelectionScheme::BarrierFunction,
        SelectionScheme::ControlBarrierFunction,
    ];

    pub fn priority(self) -> Priority {
        match self {
            Self::NearestNeighbor | Self::BarrierFunction | Self::ControlBarrierFunction => Priority::Ascending,
            Self::CostEvolution | Self::Jacobian | Self::Hessian => Priority::Descending,
        }
    }

    /// Short name used in configuration files and CSV output.
    pub fn token(self) -> &'static str {
        match self {
            Self::NearestNeighbor => "nn",
            Self::CostEvolution => "ce",
            Self::Jacobian => "jacobian",
            Self::Hessian => "hessian",
            Self::BarrierFunction => "bf",
            Self::ControlBarrierFunction => "cbf",
        }
    }

    pub fn needs_kappa(self) -> bool {
        matches!(self, Self::BarrierFunction | Self::ControlBarrierFunction)
    }
}

impl fmt::Display for SelectionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for SelectionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|scheme| scheme.token().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown selection scheme `{s}` (expected one of nn, ce, jacobian, hessian, bf, cbf)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionParams {
    pub kappa: f64,
    pub fd_step: f64,
    /// Collision weight of the inverse-square proxy.
    pub mu: f64,
    /// Barrier radius.
    pub radius: f64,
}

impl SelectionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::invalid("kappa must be > 0"));
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return Err(Error::invalid("finite-difference step must be > 0"));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::invalid("mu must be >= 0"));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::invalid("barrier radius must be > 0"));
        }
        Ok(())
    }
}

/// What every agent observes when it chooses its players: the current joint state, the joint state
/// one step earlier (absent at the first step) and the controls applied during that step.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionSnapshot {
    pub dynamics: Dynamics,
    pub discretization: DiscretizationSpec,
    pub ids: Vec<AgentId>,
    pub states: Vec<Vector>,
    pub previous_states: Option<Vec<Vector>>,
    pub last_controls: Vec<Vector>,
}

impl InteractionSnapshot {
    pub fn new(
        dynamics: Dynamics,
        discretization: DiscretizationSpec,
        ids: Vec<AgentId>,
        states: Vec<Vector>,
        previous_states: Option<Vec<Vector>>,
        last_controls: Vec<Vector>,
    ) -> Result<Self> {
        let n = ids.len();
        let unique: std::collections::HashSet<_> = ids.iter().collect();
        if unique.len() != n {
            return Err(Error::invalid("agent ids must be unique"));
        }
        if states.len() != n || last_controls.len() != n || previous_states.as_ref().is_some_and(|p| p.len() != n) {
            return Err(Error::invalid("snapshot needs one state, previous state and control per agent"));
        }
        let sd = dynamics.state_dim();
        let cd = dynamics.control_dim();
        if states.iter().chain(previous_states.iter().flatten()).any(|x| x.len() != sd) || last_controls.iter().any(|u| u.len() != cd) {
            return Err(Error::invalid("snapshot state or control dimension mismatch"));
        }
        Ok(Self { dynamics, discretization, ids, states, previous_states, last_controls })
    }

    fn index(&self, id: AgentId) -> Result<usize> {
        self.ids.iter().position(|&a| a == id).ok_or(Error::UnknownAgent(id.0))
    }

    fn position(&self, i: usize) -> &[f64] {
        self.dynamics.position(&self.states[i])
    }

    fn pair(&self, ego: AgentId, other: AgentId) -> Result<(usize, usize)> {
        let (i, j) = (self.index(ego)?, self.index(other)?);
        if i == j {
            return Err(Error::invalid("ego and other must differ"));
        }
        Ok((i, j))
    }

    /// State the one-step propagation starts from: the previous state, or the current one at the
    /// first step.
    fn base_state(&self, i: usize) -> &Vector {
        self.previous_states.as_ref().map_or(&self.states[i], |p| &p[i])
    }

    fn propagated_position(&self, i: usize, control: &Vector) -> Result<Vec<f64>> {
        let next = self.dynamics.step(&self.discretization, self.base_state(i), control)?;
        Ok(self.dynamics.position(&next).to_vec())
    }

    fn acceleration(&self, i: usize) -> Result<Vector> {
        self.dynamics.acceleration(&self.states[i], &self.last_controls[i])
    }
}

/// Pairwise score tagged with the scheme that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionScore {
    pub scheme: SelectionScheme,
    pub value: f64,
}

impl SelectionScore {
    pub fn priority(&self) -> Priority {
        self.scheme.priority()
    }
}

pub fn score_nearest_neighbor(snapshot: &InteractionSnapshot, ego: AgentId, other: AgentId) -> Result<f64> {
    let (i, j) = snapshot.pair(ego, other)?;
    Ok(distance(snapshot.position(i), snapshot.position(j)))
}

/// Change of the inverse-square proxy over the last step; `None` at the first step.
pub fn score_cost_evolution(snapshot: &InteractionSnapshot, ego: AgentId, other: AgentId, mu: f64) -> Result<Option<f64>> {
    let (i, j) = snapshot.pair(ego, other)?;
    let Some(prev) = &snapshot.previous_states else {
        return Ok(None);
    };
    let model = &snapshot.dynamics;
    let now = collision_proxy(mu, snapshot.position(i), &[snapshot.position(j)])?;
    let before = collision_proxy(mu, model.position(&prev[i]), &[model.position(&prev[j])])?;
    Ok(Some(now - before))
}

/// Norm of the derivative of the ego's collision proxy with respect to the other agent's last
/// control, by central differences through one step from the previous state.
pub fn score_jacobian(snapshot: &InteractionSnapshot, ego: AgentId, other: AgentId, mu: f64, fd_step: f64) -> Result<f64> {
    let (i, j) = snapshot.pair(ego, other)?;
    let p_ego = snapshot.propagated_position(i, &snapshot.last_controls[i])?;
    let p_nominal = snapshot.propagated_position(j, &snapshot.last_controls[j])?;
    collision_proxy(mu, &p_ego, &[&p_nominal])?;
    let m = snapshot.dynamics.control_dim();
    let mut sq = 0.0;
    for c in 0..m {
        let mut value = [0.0; 2];
        for (slot, sign) in [1.0, -1.0].into_iter().enumerate() {
            let mut u = snapshot.last_controls[j].clone();
            u[c] += sign * fd_step;
            let p_other = snapshot.propagated_position(j, &u)?;
            value[slot] = collision_proxy(mu, &p_ego, &[&p_other])?;
        }
        let d = (value[0] - value[1]) / (2.0 * fd_step);
        sq += d * d;
    }
    Ok(sq.sqrt())
}

/// Mixed second derivative of the ego's collision proxy with respect to the ego's and the other
/// agent's last controls (`m x m`, rows indexed by the ego's control).
pub fn mixed_hessian(snapshot: &InteractionSnapshot, ego: AgentId, other: AgentId, mu: f64, fd_step: f64) -> Result<DMatrix<f64>> {
    let (i, j) = snapshot.pair(ego, other)?;
    let m = snapshot.dynamics.control_dim();
    collision_proxy(
        mu,
        &snapshot.propagated_position(i, &snapshot.last_controls[i])?,
        &[&snapshot.propagated_position(j, &snapshot.last_controls[j])?],
    )?;
    let perturbed = |agent: usize, c: usize, sign: f64| -> Result<Vec<f64>> {
        let mut u = snapshot.last_controls[agent].clone();
        u[c] += sign * fd_step;
        snapshot.propagated_position(agent, &u)
    };
    let ego_pos: Vec<[Vec<f64>; 2]> = (0..m).map(|a| Ok([perturbed(i, a, 1.0)?, perturbed(i, a, -1.0)?])).collect::<Result<_>>()?;
    let other_pos: Vec<[Vec<f64>; 2]> = (0..m).map(|b| Ok([perturbed(j, b, 1.0)?, perturbed(j, b, -1.0)?])).collect::<Result<_>>()?;
    let mut h = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in 0..m {
            let f = |s: usize, t: usize| collision_proxy(mu, &ego_pos[a][s], &[&other_pos[b][t]]);
            h[(a, b)] = (f(0, 0)? - f(0, 1)? - f(1, 0)? + f(1, 1)?) / (4.0 * fd_step * fd_step);
        }
    }
    Ok(h)
}

pub fn score_hessian(snapshot: &InteractionSnapshot, ego: AgentId, other: AgentId, mu: f64, fd_step: f64) -> Result<f64> {
    Ok(mixed_hessian(snapshot, ego, other, mu, fd_step)?.norm())
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `h = |p_i - p_j|^2 - R^2`
pub fn barrier_h(p_i: &[f64], p_j: &[f64], radius: f64) -> f64 {
    let r = diff(p_i, p_j);
    dot(&r, &r) - radius * radius
}

/// `dh/dt = 2 (p_i - p_j) . (v_i - v_j)`
pub fn barrier_hdot(p_i: &[f64], p_j: &[f64], v_i: &[f64], v_j: &[f64]) -> f64 {
    2.0 * dot(&diff(p_i, p_j), &diff(v_i, v_j))
}

/// `d2h/dt2 = 2 (|v_i - v_j|^2 + (p_i - p_j) . (a_i - a_j))`
pub fn barrier_hddot(p_i: &[f64], p_j: &[f64], v_i: &[f64], v_j: &[f64], a_i: &[f64], a_j: &[f64]) -> f64 {
    let dv = diff(v_i, v_j);
    2.0 * (dot(&dv, &dv) + dot(&diff(p_i, p_j), &diff(a_i, a_j)))
}

/// `(h, dh/dt)` for a pair of agents.
fn barrier_terms(snapshot: &InteractionSnapshot, i: usize, j: usize, radius: f64) -> (f64, f64) {
    let model = &snapshot.dynamics;
    let (pi, pj) = (snapshot.position(i), snapshot.position(j));
    let (vi, vj) = (model.velocity(&snapshot.states[i]), model.velocity(&snapshot.states[j]));
    (barrier_h(pi, pj, radius), barrier_hdot(pi, pj, vi, vj))
}

/// First-order barrier `dh/dt + kappa h`.
pub fn score_bf(snapshot: &InteractionSnapshot, ego: AgentId, other: AgentId, kappa: f64, radius: f64) -> Result<f64> {
    let (i, j) = snapshot.pair(ego, other)?;
    let (h, hdot) = barrier_terms(snapshot, i, j, radius);
    Ok(hdot + kappa * h)
}

/// Second-order barrier `d2h/dt2 + 2 kappa dh/dt + kappa^2 h`, accelerations from the last controls.
pub fn score_cbf(snapshot: &InteractionSnapshot, ego: AgentId, other: AgentId, kappa: f64, radius: f64) -> Result<f64> {
    let (i, j) = snapshot.pair(ego, other)?;
    let (h, hdot) = barrier_terms(snapshot, i, j, radius);
    let model = &snapshot.dynamics;
    let hddot = barrier_hddot(
        snapshot.position(i),
        snapshot.position(j),
        model.velocity(&snapshot.states[i]),
        model.velocity(&snapshot.states[j]),
        snapshot.acceleration(i)?.as_slice(),
        snapshot.acceleration(j)?.as_slice(),
    );
    Ok(hddot + 2.0 * kappa * hdot + kappa * kappa * h)
}

/// Score of `other` from `ego`'s point of view. Cost evolution falls back to the distance at the
/// first step.
pub fn score(
    snapshot: &InteractionSnapshot,
    scheme: SelectionScheme,
    params: &SelectionParams,
    ego: AgentId,
    other: AgentId,
) -> Result<SelectionScore> {
    let (scheme, value) = match scheme {
        SelectionScheme::NearestNeighbor => (scheme, score_nearest_neighbor(snapshot, ego, other)?),
        SelectionScheme::CostEvolution => match score_cost_evolution(snapshot, ego, other, params.mu)? {
            Some(v) => (scheme, v),
            None => (SelectionScheme::NearestNeighbor, score_nearest_neighbor(snapshot, ego, other)?),
        },
        SelectionScheme::Jacobian => (scheme, score_jacobian(snapshot, ego, other, params.mu, params.fd_step)?),
        SelectionScheme::Hessian => (scheme, score_hessian(snapshot, ego, other, params.mu, params.fd_step)?),
        SelectionScheme::BarrierFunction => (scheme, score_bf(snapshot, ego, other, params.kappa, params.radius)?),
        SelectionScheme::ControlBarrierFunction => (scheme, score_cbf(snapshot, ego, other, params.kappa, params.radius)?),
    };
    Ok(SelectionScore { scheme, value })
}

/// Order candidates `(id, score, distance)` by priority, then distance, then id, and keep the
/// first `p`.
pub fn rank(mut candidates: Vec<(AgentId, f64, f64)>, priority: Priority, p: usize) -> Vec<AgentId> {
    let key = |score: f64| match priority {
        Priority::Ascending => score,
        Priority::Descending => -score,
    };
    candidates.sort_by(|a, b| key(a.1).total_cmp(&key(b.1)).then_with(|| a.2.total_cmp(&b.2)).then_with(|| a.0.cmp(&b.0)));
    candidates.into_iter().take(p).map(|(id, _, _)| id).collect()
}

/// The `min(p, N-1)` most important other agents for `ego`, most important first.
///
/// Ties are broken by current distance, then by id. Pairs whose proxy is undefined because the
/// agents coincide rank first.
pub fn select_players(
    snapshot: &InteractionSnapshot,
    scheme: SelectionScheme,
    params: &SelectionParams,
    ego: AgentId,
    p: usize,
) -> Result<Vec<AgentId>> {
    let i = snapshot.index(ego)?;
    if p == 0 {
        return Ok(Vec::new());
    }
    let mut priority = scheme.priority();
    let mut candidates = Vec::with_capacity(snapshot.ids.len() - 1);
    for (j, &other) in snapshot.ids.iter().enumerate().filter(|&(j, _)| j != i) {
        let value = match score(snapshot, scheme, params, ego, other) {
            Ok(s) => {
                // Cost evolution falls back to distances for every pair at once.
                priority = s.priority();
                s.value
            }
            Err(Error::DegenerateGeometry { .. }) => match scheme.priority() {
                Priority::Ascending => f64::NEG_INFINITY,
                Priority::Descending => f64::INFINITY,
            },
            Err(e) => return Err(e),
        };
        candidates.push((other, value, distance(snapshot.position(i), snapshot.position(j))));
    }
    Ok(rank(candidates, priority, p))
}
