//! Decentralized receding-horizon planning: every agent picks its players, solves its own local
//! game and applies the first control of its own equilibrium policy.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::dynamics::Vector;
use crate::error::{Error, Result};
use crate::game::{AgentId, ConstraintSpec, CostSpec, GameProblem, JointTrajectory, Policy};
use crate::selection::{select_players, InteractionSnapshot, SelectionParams, SelectionScheme};
use crate::solver::{solve, EquilibriumSolution, SolverConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig {
    /// Number of other agents in the ego's game.
    pub players: usize,
    /// `None` plays the full game against every other agent.
    pub scheme: Option<SelectionScheme>,
    pub selection: SelectionParams,
    /// Number of states per planned trajectory.
    pub horizon: usize,
    /// Re-solve every this many steps; in between the stored plan is followed.
    pub replan_period: usize,
    pub solver: SolverConfig,
    pub warm_start: bool,
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(Error::invalid("planning horizon must be >= 2"));
        }
        if self.replan_period == 0 {
            return Err(Error::invalid("replan period must be >= 1"));
        }
        if self.scheme.is_some() {
            self.selection.validate()?;
        }
        self.solver.validate()
    }
}

/// Everything the agents observe at one step, plus the (shared, known) cost of every agent.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub snapshot: InteractionSnapshot,
    /// Aligned with `snapshot.ids`.
    pub costs: Vec<CostSpec>,
    pub constraints: ConstraintSpec,
}

impl World {
    pub fn num_agents(&self) -> usize {
        self.snapshot.ids.len()
    }

    fn index(&self, id: AgentId) -> Result<usize> {
        self.snapshot.ids.iter().position(|&a| a == id).ok_or(Error::UnknownAgent(id.0))
    }
}

/// What an agent carries from one step to the next.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlanMemory {
    /// Last equilibrium policies, shifted to start at the current step.
    pub warm: BTreeMap<AgentId, Policy>,
    /// Own remaining plan, padded with the neutral control.
    pub plan: Option<Policy>,
    pub steps_since_solve: usize,
    pub selected: Vec<AgentId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalGameReport {
    pub ego: AgentId,
    /// Other participants in ascending id order.
    pub selected: Vec<AgentId>,
    /// A game was solved at this step (false while following a stored plan).
    pub solved: bool,
    pub converged: bool,
    /// The solver failed and the previous plan was applied.
    pub fallback: bool,
    pub kkt_residual: f64,
    pub newton_iterations: usize,
    pub solve_time: Duration,
}

#[derive(Debug, Clone)]
pub struct StepPlan {
    pub controls: Vec<Vector>,
    pub reports: Vec<LocalGameReport>,
    pub memory: Vec<PlanMemory>,
}

/// Policies shifted by one step (last control repeated) with states re-rolled from the second
/// state of `solution`.
pub fn shift_warm_start(problem: &GameProblem, solution: &JointTrajectory) -> Result<JointTrajectory> {
    problem.check_trajectory(solution)?;
    let mut shifted = problem.clone();
    shifted.initial_states = solution.states.iter().map(|xs| xs[1].clone()).collect();
    shifted.rollout(solution.policies.iter().map(Policy::shifted).collect())
}

fn shift_padded(policy: &Policy, neutral: &Vector) -> Policy {
    let mut controls: Vec<Vector> = policy.controls.iter().skip(1).cloned().collect();
    controls.push(neutral.clone());
    Policy { controls }
}

/// One local game to solve; agents whose games coincide share a job.
struct Job {
    participants: Vec<AgentId>,
    horizon: usize,
    solver: SolverConfig,
    warm: Option<Vec<Policy>>,
    agents: Vec<usize>,
}

impl Job {
    fn same_game(&self, participants: &[AgentId], config: &PlannerConfig, warm: &Option<Vec<Policy>>) -> bool {
        let bits = |w: &Option<Vec<Policy>>| {
            w.as_ref().map(|ps| ps.iter().flat_map(|p| p.controls.iter().flat_map(|u| u.iter().map(|v| v.to_bits()))).collect::<Vec<_>>())
        };
        self.participants == participants
            && self.horizon == config.horizon
            && self.solver == config.solver
            && bits(&self.warm) == bits(warm)
    }
}

fn build_problem(world: &World, participants: &[AgentId], ego: AgentId, horizon: usize) -> Result<GameProblem> {
    let snap = &world.snapshot;
    let idx = participants.iter().map(|&id| world.index(id)).collect::<Result<Vec<_>>>()?;
    Ok(GameProblem {
        participants: participants.to_vec(),
        ego: participants.iter().position(|&id| id == ego).expect("ego participates"),
        horizon,
        dynamics: snap.dynamics.clone(),
        discretization: snap.discretization,
        costs: idx.iter().map(|&i| world.costs[i].clone()).collect(),
        initial_states: idx.iter().map(|&i| snap.states[i].clone()).collect(),
        constraints: world.constraints.clone(),
    })
}

/// Plan one simulation step for every agent.
///
/// `configs` and `memory` are aligned with `world.snapshot.ids`. Local games are solved in
/// parallel; identical games (same participants, settings and warm start) are solved once.
pub fn plan_step(world: &World, configs: &[PlannerConfig], memory: &[PlanMemory]) -> Result<StepPlan> {
    let n = world.num_agents();
    if configs.len() != n || memory.len() != n || world.costs.len() != n {
        return Err(Error::invalid("one planner config, memory and cost per agent"));
    }
    for c in configs {
        c.validate()?;
    }
    let snap = &world.snapshot;
    let neutral = snap.dynamics.neutral_control();

    let mut jobs: Vec<Job> = Vec::new();
    let mut selected: Vec<Vec<AgentId>> = vec![Vec::new(); n];
    let mut solving = vec![false; n];
    for i in 0..n {
        let config = &configs[i];
        let mem = &memory[i];
        if mem.plan.is_some() && !mem.steps_since_solve.is_multiple_of(config.replan_period) {
            selected[i] = mem.selected.clone();
            continue;
        }
        solving[i] = true;
        let ego = snap.ids[i];
        let mut others = match config.scheme {
            Some(scheme) if config.players < n - 1 => select_players(snap, scheme, &config.selection, ego, config.players)?,
            _ => snap.ids.iter().copied().filter(|&id| id != ego).collect(),
        };
        others.sort();
        let mut participants = others.clone();
        participants.push(ego);
        participants.sort();
        selected[i] = others;

        let warm = config.warm_start.then(|| {
            participants
                .iter()
                .map(|id| {
                    mem.warm
                        .get(id)
                        .filter(|p| p.len() == config.horizon - 1)
                        .cloned()
                        .unwrap_or_else(|| Policy::constant(neutral.clone(), config.horizon - 1))
                })
                .collect::<Vec<_>>()
        });
        match jobs.iter_mut().find(|j| j.same_game(&participants, config, &warm)) {
            Some(job) => job.agents.push(i),
            None => jobs.push(Job { participants, horizon: config.horizon, solver: config.solver.clone(), warm, agents: vec![i] }),
        }
    }

    let raw: Vec<(Result<EquilibriumSolution>, GameProblem, Duration)> = jobs
        .par_iter()
        .map(|job| {
            let ego = snap.ids[job.agents[0]];
            let problem = build_problem(world, &job.participants, ego, job.horizon)?;
            let start = Instant::now();
            let sol = solve(&problem, &job.solver, job.warm.as_deref());
            Ok((sol, problem, start.elapsed()))
        })
        .collect::<Result<_>>()?;
    // Numerical failures become fallbacks; anything else is a caller error.
    let mut results: Vec<(Option<EquilibriumSolution>, GameProblem, Duration)> = Vec::with_capacity(raw.len());
    for (sol, problem, time) in raw {
        match sol {
            Ok(sol) => results.push((Some(sol), problem, time)),
            Err(e @ Error::NumericalFailure { .. }) => {
                log::debug!("game {:?}: {e}", problem.participants);
                results.push((None, problem, time));
            }
            Err(e) => return Err(e),
        }
    }

    let mut controls = vec![neutral.clone(); n];
    let mut reports = Vec::with_capacity(n);
    let mut next_memory = memory.to_vec();
    let mut outcome: Vec<Option<usize>> = vec![None; n];
    for (j, job) in jobs.iter().enumerate() {
        for &i in &job.agents {
            outcome[i] = Some(j);
        }
    }

    for i in 0..n {
        let ego = snap.ids[i];
        let mem = &mut next_memory[i];
        let mut report = LocalGameReport {
            ego,
            selected: selected[i].clone(),
            solved: solving[i],
            converged: false,
            fallback: false,
            kkt_residual: f64::NAN,
            newton_iterations: 0,
            solve_time: Duration::ZERO,
        };
        let solved = outcome[i].map(|j| &results[j]);
        match solved {
            Some((Some(sol), problem, time)) => {
                let k = problem.index_of(ego).expect("ego participates");
                let own = &sol.trajectory.policies[k];
                controls[i] = own.controls[0].clone();
                mem.plan = Some(shift_padded(own, &neutral));
                mem.warm = problem.participants.iter().zip(&sol.trajectory.policies).map(|(&id, p)| (id, p.shifted())).collect();
                mem.steps_since_solve = 1;
                mem.selected = selected[i].clone();
                report.converged = sol.converged;
                report.kkt_residual = sol.kkt_residual;
                report.newton_iterations = sol.newton_iterations;
                report.solve_time = *time;
            }
            Some((None, _, _)) => {
                report.fallback = true;
                follow_plan(mem, &neutral, &mut controls[i]);
                mem.steps_since_solve = 0;
                mem.selected = selected[i].clone();
            }
            None => {
                follow_plan(mem, &neutral, &mut controls[i]);
                mem.steps_since_solve += 1;
            }
        }
        reports.push(report);
    }
    Ok(StepPlan { controls, reports, memory: next_memory })
}

fn follow_plan(mem: &mut PlanMemory, neutral: &Vector, control: &mut Vector) {
    if let Some(plan) = &mem.plan {
        *control = plan.controls.first().cloned().unwrap_or_else(|| neutral.clone());
        mem.plan = Some(shift_padded(plan, neutral));
    } else {
        *control = neutral.clone();
    }
    mem.warm = mem.warm.iter().map(|(&id, p)| (id, p.shifted())).collect();
}
