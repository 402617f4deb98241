//! Generalized Nash equilibria of a [`GameProblem`] by augmented-Lagrangian Newton iterations on
//! the stacked first-order conditions of every player.
//!
//! Player `i` minimizes its augmented cost
//!
//! ```text
//! L_i(X, pi) = C_i(X, pi_i) + sum_{c in K_i} psi(c(X, pi); y_c, rho)
//! psi(c; y, rho) = (max(0, y + rho c)^2 - y^2) / (2 rho)
//! ```
//!
//! subject to the shared dynamics `D(X, pi) = 0`, where `K_i` are the inequality constraints
//! that involve player `i` (its control bounds and every pairwise separation constraint it is part
//! of). The Newton system is formed in condensed form: `X` is eliminated by rolling out the
//! dynamics and the dynamics multipliers are recovered by a backward adjoint pass, so the
//! unknowns are the stacked policies and the residual is `g_i = dL_i/dpi_i` for every player.
//! The Jacobian `dg/dpi` is exact; for the quadrotor the curvature of the dynamics comes from
//! forward-mode AD of the RK4 step.
//!
//! Inner Newton steps are regularized with `lambda * I` and globalized by a non-monotone
//! backtracking line search on `|g|`, with a Levenberg-Marquardt step on `|g|^2` as a last resort.
//! Problems with control bounds are solved on unclamped dynamics; the bounds keep iterates
//! physical. Outer iterations update `y <- max(0, y + rho c)` and grow `rho` while constraints are
//! violated. When a first-order point fails the second-order test of some player's own block
//! (a saddle, typical of exactly symmetric encounters), the iterate is pushed along that block's
//! most negative curvature direction and re-solved.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::dynamics::{Dynamics, Vector};
use crate::error::{Error, Result};
use crate::game::{total_cost, GameProblem, JointTrajectory, Policy};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_outer_iterations: usize,
    pub max_newton_iterations: usize,
    /// Tolerance on the max-norm of the stationarity residual and on constraint violation.
    pub tolerance: f64,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub line_search_shrink: f64,
    /// Smallest Newton regularization; multiplied by 10 after each failed line search.
    pub regularization: f64,
    /// Leave saddle points along negative curvature instead of reporting them.
    pub symmetry_breaking: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_outer_iterations: 10,
            max_newton_iterations: 50,
            tolerance: 1e-6,
            initial_penalty: 1.0,
            penalty_growth: 10.0,
            line_search_shrink: 0.5,
            regularization: 1e-6,
            symmetry_breaking: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("solver tolerance must be > 0"));
        }
        if !(self.initial_penalty > 0.0) {
            return Err(Error::invalid("initial penalty must be > 0"));
        }
        if !(self.penalty_growth > 1.0) {
            return Err(Error::invalid("penalty growth must be > 1"));
        }
        if !(self.line_search_shrink > 0.0 && self.line_search_shrink < 1.0) {
            return Err(Error::invalid("line search shrink factor must lie in (0, 1)"));
        }
        if !(self.regularization > 0.0) {
            return Err(Error::invalid("regularization floor must be > 0"));
        }
        if self.max_outer_iterations == 0 {
            return Err(Error::invalid("need at least one outer iteration"));
        }
        Ok(())
    }
}

/// Multipliers of the stacked KKT system.
#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers {
    /// `dynamics[i][k]` multiplies `x_{k+1} - f(x_k, u_k)` (joint, all participants stacked) in
    /// player `i`'s Lagrangian, `k = 0..T-1`.
    pub dynamics: Vec<Vec<Vector>>,
    /// One entry per row of [`crate::game::inequality_residuals`].
    pub inequality: Vector,
}

impl Multipliers {
    pub fn zeros(problem: &GameProblem) -> Self {
        let joint = problem.num_players() * problem.dynamics.state_dim();
        Self {
            dynamics: vec![vec![Vector::zeros(joint); problem.horizon - 1]; problem.num_players()],
            inequality: Vector::zeros(problem.inequality_count()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSolution {
    pub trajectory: JointTrajectory,
    pub multipliers: Multipliers,
    /// Final penalty weight.
    pub penalty: f64,
    /// Penalty weight in force during each outer iteration.
    pub penalty_history: Vec<f64>,
    /// Max-norm of the stationarity residual at the returned iterate.
    pub kkt_residual: f64,
    /// Largest positive inequality residual.
    pub max_violation: f64,
    pub outer_iterations: usize,
    pub newton_iterations: usize,
    /// Every player's own block of the game Jacobian is positive semidefinite.
    pub local_nash: bool,
    pub converged: bool,
}

/// PHR augmented-Lagrangian term for `c <= 0`: value, first and second derivative in `c`.
fn phr(c: f64, y: f64, rho: f64) -> (f64, f64, f64) {
    let shifted = y + rho * c;
    if shifted > 0.0 {
        ((shifted * shifted - y * y) / (2.0 * rho), shifted, rho)
    } else {
        (-y * y / (2.0 * rho), 0.0, 0.0)
    }
}

/// Gradient and Hessian of `mu/2 max(0, R - |r|)^2` with respect to `r`.
fn repulsion_derivatives(mu: f64, radius: f64, r: &[f64]) -> Option<(Vector, DMatrix<f64>)> {
    let d = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    if d >= radius || mu == 0.0 {
        return None;
    }
    let dim = r.len();
    if d < 1e-12 {
        return Some((Vector::zeros(dim), DMatrix::zeros(dim, dim)));
    }
    let first = -mu * (radius - d);
    let e = Vector::from_fn(dim, |i, _| r[i] / d);
    let eet = &e * e.transpose();
    let hess = &eet * mu + (DMatrix::identity(dim, dim) - &eet) * (first / d);
    Some((e * first, hess))
}

fn pair_index(players: usize, a: usize, b: usize) -> usize {
    let (a, b) = if a < b { (a, b) } else { (b, a) };
    a * players - a * (a + 1) / 2 + (b - a - 1)
}

/// Everything that depends on the problem and the augmented-Lagrangian state `(y, rho)`.
struct Augmented<'a> {
    problem: &'a GameProblem,
    players: usize,
    n: usize,
    m: usize,
    dim: usize,
    steps: usize,
    block: usize,
    pairs: usize,
    y: Vector,
    rho: f64,
}

impl<'a> Augmented<'a> {
    fn new(problem: &'a GameProblem, y: Vector, rho: f64) -> Self {
        let players = problem.num_players();
        let m = problem.dynamics.control_dim();
        let steps = problem.horizon - 1;
        Self {
            problem,
            players,
            n: problem.dynamics.state_dim(),
            m,
            dim: problem.dynamics.spatial_dim(),
            steps,
            block: m * steps,
            pairs: players * players.saturating_sub(1) / 2,
            y,
            rho,
        }
    }

    fn pair_row(&self, k: usize, a: usize, b: usize) -> usize {
        k * self.pairs + pair_index(self.players, a, b)
    }

    fn bound_row(&self, agent: usize, k: usize, c: usize) -> usize {
        self.problem.horizon * self.pairs + ((agent * self.steps + k) * self.m + c) * 2
    }

    fn rmin2(&self) -> f64 {
        self.problem.constraints.min_distance.powi(2)
    }

    fn rel(&self, states: &[Vec<Vector>], a: usize, b: usize, k: usize) -> Vec<f64> {
        let model = &self.problem.dynamics;
        let pa = model.position(&states[a][k]);
        let pb = model.position(&states[b][k]);
        pa.iter().zip(pb).map(|(x, y)| x - y).collect()
    }

    /// Gradient of player `i`'s augmented cost with respect to agent `a`'s state at step `k`.
    fn state_gradient(&self, states: &[Vec<Vector>], i: usize, a: usize, k: usize) -> Vector {
        let spec = &self.problem.costs[i];
        let last = self.problem.horizon - 1;
        let mut g = Vector::zeros(self.n);
        if a == i {
            let w = if k == last { spec.terminal_weight } else { 1.0 };
            let e = &states[i][k] - &spec.goal;
            g += (&spec.state_weight * e) * (2.0 * w);
        }
        let others: Vec<usize> = if a == i { (0..self.players).filter(|&j| j != i).collect() } else { vec![a] };
        let rmin2 = self.rmin2();
        for j in others {
            // r = p_i - p_j; derivatives wrt p_a carry sign +1 for a = i, -1 for a = j.
            let r = self.rel(states, i, j, k);
            let sign = if a == i { 1.0 } else { -1.0 };
            if k < last {
                if let Some((gr, _)) = repulsion_derivatives(spec.collision_weight, spec.repulsion_radius, &r) {
                    for c in 0..self.dim {
                        g[c] += sign * gr[c];
                    }
                }
            }
            let c_val = rmin2 - r.iter().map(|x| x * x).sum::<f64>();
            let (_, dpsi, _) = phr(c_val, self.y[self.pair_row(k, i, j)], self.rho);
            if dpsi != 0.0 {
                for c in 0..self.dim {
                    g[c] += sign * dpsi * (-2.0 * r[c]);
                }
            }
        }
        g
    }

    /// Gradient of player `i`'s augmented cost with respect to its own control at step `k`.
    fn control_gradient(&self, u: &Vector, i: usize, k: usize) -> Vector {
        let spec = &self.problem.costs[i];
        let mut g = (&spec.control_weight * (u - &spec.control_reference)) * 2.0;
        if let Some(b) = &self.problem.constraints.control_bounds {
            for c in 0..self.m {
                let row = self.bound_row(i, k, c);
                let (_, lo, _) = phr(b.lower[c] - u[c], self.y[row], self.rho);
                let (_, hi, _) = phr(u[c] - b.upper[c], self.y[row + 1], self.rho);
                g[c] += hi - lo;
            }
        }
        g
    }

    fn control_hessian(&self, u: &Vector, i: usize, k: usize) -> DMatrix<f64> {
        let spec = &self.problem.costs[i];
        let mut h = &spec.control_weight * 2.0;
        if let Some(b) = &self.problem.constraints.control_bounds {
            for c in 0..self.m {
                let row = self.bound_row(i, k, c);
                let (_, _, lo) = phr(b.lower[c] - u[c], self.y[row], self.rho);
                let (_, _, hi) = phr(u[c] - b.upper[c], self.y[row + 1], self.rho);
                h[(c, c)] += lo + hi;
            }
        }
        h
    }

    /// Hessian blocks of player `i`'s augmented cost at step `k`: the own-state block (`n x n`)
    /// and, for every other participant `j`, the `dim x dim` position block `d2/dp_i dp_j`.
    fn state_hessians(&self, states: &[Vec<Vector>], i: usize, k: usize) -> (DMatrix<f64>, Vec<Option<DMatrix<f64>>>) {
        let spec = &self.problem.costs[i];
        let last = self.problem.horizon - 1;
        let w = if k == last { spec.terminal_weight } else { 1.0 };
        let mut own = &spec.state_weight * (2.0 * w);
        let mut cross = vec![None; self.players];
        let rmin2 = self.rmin2();
        for j in (0..self.players).filter(|&j| j != i) {
            let r = self.rel(states, i, j, k);
            let mut h = DMatrix::<f64>::zeros(self.dim, self.dim);
            let mut any = false;
            if k < last {
                if let Some((_, hr)) = repulsion_derivatives(spec.collision_weight, spec.repulsion_radius, &r) {
                    h += hr;
                    any = true;
                }
            }
            let c_val = rmin2 - r.iter().map(|x| x * x).sum::<f64>();
            let (_, dpsi, d2psi) = phr(c_val, self.y[self.pair_row(k, i, j)], self.rho);
            if dpsi != 0.0 || d2psi != 0.0 {
                let rv = Vector::from_column_slice(&r);
                h += (&rv * rv.transpose()) * (4.0 * d2psi) - DMatrix::identity(self.dim, self.dim) * (2.0 * dpsi);
                any = true;
            }
            if any {
                let mut top = own.view_mut((0, 0), (self.dim, self.dim));
                top += &h;
                cross[j] = Some(-h);
            }
        }
        (own, cross)
    }

    /// Player `i`'s augmented cost on an arbitrary (not necessarily feasible) trajectory.
    fn cost(&self, traj: &JointTrajectory, i: usize) -> Result<f64> {
        let mut total = total_cost(self.problem, traj, i)?;
        let rmin2 = self.rmin2();
        for k in 0..self.problem.horizon {
            for j in (0..self.players).filter(|&j| j != i) {
                let r = self.rel(&traj.states, i, j, k);
                let c = rmin2 - r.iter().map(|x| x * x).sum::<f64>();
                total += phr(c, self.y[self.pair_row(k, i, j)], self.rho).0;
            }
        }
        if let Some(b) = &self.problem.constraints.control_bounds {
            for (k, u) in traj.policies[i].controls.iter().enumerate() {
                for c in 0..self.m {
                    let row = self.bound_row(i, k, c);
                    total += phr(b.lower[c] - u[c], self.y[row], self.rho).0;
                    total += phr(u[c] - b.upper[c], self.y[row + 1], self.rho).0;
                }
            }
        }
        Ok(total)
    }
}

fn flatten(policies: &[Policy]) -> Vector {
    Vector::from_iterator(
        policies.iter().map(|p| p.controls.iter().map(|u| u.len()).sum::<usize>()).sum(),
        policies.iter().flat_map(|p| p.controls.iter().flat_map(|u| u.iter().copied())),
    )
}

fn unflatten(pi: &Vector, players: usize, steps: usize, m: usize) -> Vec<Policy> {
    (0..players)
        .map(|i| Policy {
            controls: (0..steps).map(|k| Vector::from_column_slice(&pi.as_slice()[(i * steps + k) * m..(i * steps + k + 1) * m])).collect(),
        })
        .collect()
}

/// A point of the condensed iteration: policies, rolled-out states, linearizations and the
/// stacked stationarity residual.
struct Iterate {
    pi: Vector,
    states: Vec<Vec<Vector>>,
    /// `lin[a][k] = (A, B)` at `(x_k, u_k)`.
    lin: Vec<Vec<(DMatrix<f64>, DMatrix<f64>)>>,
    /// `sens[a][k] = dx_k / dpi_a` (`n x block`).
    sens: Vec<Vec<DMatrix<f64>>>,
    grad: Vector,
}

impl Iterate {
    fn trajectory(&self, aug: &Augmented) -> JointTrajectory {
        JointTrajectory { states: self.states.clone(), policies: unflatten(&self.pi, aug.players, aug.steps, aug.m) }
    }

    fn residual_max(&self) -> f64 {
        self.grad.amax()
    }
}

struct Condensed<'a> {
    aug: Augmented<'a>,
    /// Shared by all agents when the dynamics are affine.
    fixed: Option<(Vec<(DMatrix<f64>, DMatrix<f64>)>, Vec<DMatrix<f64>>)>,
}

impl<'a> Condensed<'a> {
    fn new(aug: Augmented<'a>) -> Result<Self> {
        let problem = aug.problem;
        let fixed = if problem.dynamics.is_linear() {
            let x0 = &problem.initial_states[0];
            let u0 = problem.dynamics.neutral_control();
            let ab = problem.dynamics.linearize(&problem.discretization, x0, &u0)?;
            let lin = vec![ab; aug.steps];
            let sens = Self::sensitivities(&lin, aug.n, aug.m, aug.block);
            Some((lin, sens))
        } else {
            None
        };
        Ok(Self { aug, fixed })
    }

    fn sensitivities(lin: &[(DMatrix<f64>, DMatrix<f64>)], n: usize, m: usize, block: usize) -> Vec<DMatrix<f64>> {
        let mut sens = Vec::with_capacity(lin.len() + 1);
        sens.push(DMatrix::zeros(n, block));
        for (k, (a, b)) in lin.iter().enumerate() {
            let mut next = a * sens.last().expect("non-empty");
            let mut cols = next.view_mut((0, k * m), (n, m));
            cols += b;
            sens.push(next);
        }
        sens
    }

    fn lin(&self, it: &'a Iterate, a: usize) -> &[(DMatrix<f64>, DMatrix<f64>)] {
        match (&self.fixed, it.lin.get(a)) {
            (Some((lin, _)), _) => lin,
            (None, Some(l)) => l,
            (None, None) => unreachable!("nonlinear iterate without linearization"),
        }
    }

    fn sens<'b>(&'b self, it: &'b Iterate, a: usize) -> &'b [DMatrix<f64>] {
        match &self.fixed {
            Some((_, s)) => s,
            None => &it.sens[a],
        }
    }

    fn evaluate(&self, pi: Vector) -> Result<Iterate> {
        let aug = &self.aug;
        let problem = aug.problem;
        if !pi.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite policy"));
        }
        let policies = unflatten(&pi, aug.players, aug.steps, aug.m);
        let mut states = Vec::with_capacity(aug.players);
        for (x0, p) in problem.initial_states.iter().zip(&policies) {
            states.push(problem.dynamics.rollout(&problem.discretization, x0, &p.controls)?);
        }
        let (lin, sens) = if self.fixed.is_some() {
            (Vec::new(), Vec::new())
        } else {
            let mut lin = Vec::with_capacity(aug.players);
            let mut sens = Vec::with_capacity(aug.players);
            for (xs, p) in states.iter().zip(&policies) {
                let l = xs
                    .iter()
                    .zip(&p.controls)
                    .map(|(x, u)| problem.dynamics.linearize(&problem.discretization, x, u))
                    .collect::<Result<Vec<_>>>()?;
                sens.push(Self::sensitivities(&l, aug.n, aug.m, aug.block));
                lin.push(l);
            }
            (lin, sens)
        };
        let mut it = Iterate { pi, states, lin, sens, grad: Vector::zeros(0) };
        it.grad = self.gradient(&it, &policies);
        if !it.grad.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite residual"));
        }
        Ok(it)
    }

    fn gradient(&self, it: &Iterate, policies: &[Policy]) -> Vector {
        let aug = &self.aug;
        let mut g = Vector::zeros(aug.players * aug.block);
        for i in 0..aug.players {
            let sens = self.sens(it, i);
            let mut gi = g.rows_mut(i * aug.block, aug.block);
            for k in 1..aug.problem.horizon {
                let sx = aug.state_gradient(&it.states, i, i, k);
                gi += sens[k].tr_mul(&sx);
            }
            for (k, u) in policies[i].controls.iter().enumerate() {
                let gu = aug.control_gradient(u, i, k);
                let mut seg = gi.rows_mut(k * aug.m, aug.m);
                seg += gu;
            }
        }
        g
    }

    /// Condensed game Jacobian `dg/dpi`.
    fn jacobian(&self, it: &Iterate) -> DMatrix<f64> {
        let aug = &self.aug;
        let (p, block, dim) = (aug.players, aug.block, aug.dim);
        let mut jac = DMatrix::zeros(p * block, p * block);
        let policies = unflatten(&it.pi, p, aug.steps, aug.m);
        for i in 0..p {
            let si = self.sens(it, i);
            for k in 1..aug.problem.horizon {
                let (own, cross) = aug.state_hessians(&it.states, i, k);
                let hs = &own * &si[k];
                let mut jii = jac.view_mut((i * block, i * block), (block, block));
                jii += si[k].tr_mul(&hs);
                let si_pos = si[k].rows(0, dim);
                for (j, h) in cross.iter().enumerate() {
                    if let Some(h) = h {
                        let sj_pos = self.sens(it, j)[k].rows(0, dim);
                        let mut jij = jac.view_mut((i * block, j * block), (block, block));
                        jij += si_pos.tr_mul(&(h * sj_pos));
                    }
                }
            }
            for (k, u) in policies[i].controls.iter().enumerate() {
                let hu = aug.control_hessian(u, i, k);
                let off = i * block + k * aug.m;
                let mut view = jac.view_mut((off, off), (aug.m, aug.m));
                view += hu;
            }
            if self.fixed.is_none() {
                let mut jii = jac.view_mut((i * block, i * block), (block, block));
                jii += self.dynamics_curvature(it, i, &policies[i]);
            }
        }
        jac
    }

    /// Second-order dynamics term of player `i`'s own block: `sum_k Z_k' H_k Z_k` with `H_k` the
    /// Hessian of `lambda_{k+1} . f(x_k, u_k)` and `Z_k = d(x_k, u_k) / dpi_i`.
    fn dynamics_curvature(&self, it: &Iterate, i: usize, policy: &Policy) -> DMatrix<f64> {
        let aug = &self.aug;
        let problem = aug.problem;
        let (n, m, block) = (aug.n, aug.m, aug.block);
        let t = problem.horizon;
        let lin = self.lin(it, i);
        let sens = self.sens(it, i);
        let mut out = DMatrix::zeros(block, block);
        let mut costate = aug.state_gradient(&it.states, i, i, t - 1);
        for k in (0..t - 1).rev() {
            let h = problem
                .dynamics
                .step_hessian(&problem.discretization, &it.states[i][k], &policy.controls[k], &costate)
                .expect("iterate was evaluated at the same points");
            let mut z = DMatrix::zeros(n + m, block);
            z.view_mut((0, 0), (n, block)).copy_from(&sens[k]);
            z.view_mut((n, k * m), (m, m)).fill_with_identity();
            out += z.tr_mul(&(h * &z));
            if k > 0 {
                costate = aug.state_gradient(&it.states, i, i, k) + lin[k].0.tr_mul(&costate);
            }
        }
        out
    }

    /// Joint dynamics multipliers of every player by a backward adjoint pass.
    fn dynamics_multipliers(&self, it: &Iterate) -> Vec<Vec<Vector>> {
        let aug = &self.aug;
        let t = aug.problem.horizon;
        let joint = aug.players * aug.n;
        (0..aug.players)
            .map(|i| {
                let mut lambda = vec![Vector::zeros(joint); aug.steps];
                for a in 0..aug.players {
                    let lin = self.lin(it, a);
                    let mut next = -aug.state_gradient(&it.states, i, a, t - 1);
                    lambda[t - 2].rows_mut(a * aug.n, aug.n).copy_from(&next);
                    for k in (1..t - 1).rev() {
                        next = -aug.state_gradient(&it.states, i, a, k) + lin[k].0.tr_mul(&next);
                        lambda[k - 1].rows_mut(a * aug.n, aug.n).copy_from(&next);
                    }
                }
                lambda
            })
            .collect()
    }

    fn constraint_values(&self, it: &Iterate) -> Vector {
        let traj = it.trajectory(&self.aug);
        crate::game::inequality_residuals(self.aug.problem, &traj).expect("iterate is well-formed")
    }

    /// Smallest eigenvalue of each player's symmetrized own block.
    fn own_block_min_eigen(&self, jac: &DMatrix<f64>) -> Vec<(f64, Vector, f64)> {
        let block = self.aug.block;
        (0..self.aug.players)
            .map(|i| {
                let b = jac.view((i * block, i * block), (block, block));
                let sym = (b + b.transpose()) * 0.5;
                let scale = sym.amax().max(1.0);
                let eig = SymmetricEigen::new(sym);
                let (idx, &val) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).expect("non-empty block");
                (val, eig.eigenvectors.column(idx).into_owned(), scale)
            })
            .collect()
    }
}

enum NewtonOutcome {
    Converged,
    Exhausted,
    Stalled,
}

fn line_search(cond: &Condensed, it: &Iterate, step: &Vector, norm0: f64, shrink: f64) -> Option<Iterate> {
    if !step.iter().all(|v| v.is_finite()) {
        return None;
    }
    let mut alpha = 1.0;
    while alpha >= MIN_STEP {
        if let Ok(trial) = cond.evaluate(&it.pi + step * alpha) {
            if trial.grad.norm() <= (1.0 - 1e-4 * alpha) * norm0 {
                return Some(trial);
            }
        }
        alpha *= shrink;
    }
    None
}

const MIN_STEP: f64 = 1e-4;
/// Trial residuals are compared against the largest of this many recent norms.
const NONMONOTONE: usize = 5;

// Regularized Newton on the stacked residual with a nonmonotone line search. The shift starts a
// decade below the last accepted one (never under the configured floor). If no shift of the Jacobian gives a decrease,
// fall back to Levenberg-Marquardt steps, which always descend on |g|^2.
fn newton(cond: &Condensed, mut it: Iterate, config: &SolverConfig, budget: usize, iterations: &mut usize) -> (Iterate, NewtonOutcome) {
    let mut shift = config.regularization;
    let mut recent = std::collections::VecDeque::new();
    for _ in 0..budget {
        if it.residual_max() <= config.tolerance {
            return (it, NewtonOutcome::Converged);
        }
        let jac = cond.jacobian(&it);
        recent.push_back(it.grad.norm());
        if recent.len() > NONMONOTONE {
            recent.pop_front();
        }
        let norm0 = recent.iter().fold(0.0f64, |a, &b| a.max(b));
        let dim = jac.nrows();
        let rhs = -&it.grad;
        let mut accepted = None;
        let mut lambda = shift;
        while lambda <= 1e10 {
            if let Some(step) = (&jac + DMatrix::identity(dim, dim) * lambda).lu().solve(&rhs) {
                accepted = line_search(cond, &it, &step, norm0, config.line_search_shrink);
            }
            if accepted.is_some() {
                shift = (lambda / 10.0).max(config.regularization);
                break;
            }
            lambda *= 10.0;
        }
        if accepted.is_none() {
            let normal = jac.transpose() * &jac;
            let rhs = jac.transpose() * &rhs;
            let scale = normal.diagonal().amax().max(1.0);
            let mut lambda = config.regularization * scale;
            while accepted.is_none() && lambda <= 1e10 * scale {
                if let Some(step) = (&normal + DMatrix::identity(dim, dim) * lambda).cholesky().map(|c| c.solve(&rhs)) {
                    accepted = line_search(cond, &it, &step, norm0, config.line_search_shrink);
                }
                lambda *= 10.0;
            }
        }
        *iterations += 1;
        match accepted {
            Some(next) => it = next,
            None => return (it, NewtonOutcome::Stalled),
        }
    }
    let outcome = if it.residual_max() <= config.tolerance { NewtonOutcome::Converged } else { NewtonOutcome::Exhausted };
    (it, outcome)
}

const MAX_ESCAPES: usize = 3;

/// Lowest `max(|g|, violation)` seen, with the multipliers it was measured under.
struct Best {
    merit: f64,
    pi: Vector,
    y: Vector,
    rho: f64,
    violation: f64,
}

impl Best {
    fn new(it: &Iterate, y: &Vector, rho: f64, violation: f64) -> Self {
        Self { merit: it.residual_max().max(violation), pi: it.pi.clone(), y: y.clone(), rho, violation }
    }
}

/// Solve for a generalized Nash equilibrium, optionally warm-started from `warm_start`.
///
/// Returns the best iterate with `converged = false` when the iteration budget runs out.
pub fn solve(problem: &GameProblem, config: &SolverConfig, warm_start: Option<&[Policy]>) -> Result<EquilibriumSolution> {
    problem.validate()?;
    config.validate()?;
    if let Some(ws) = warm_start {
        problem.check_policies(ws)?;
    }
    let relaxed;
    let problem = match &problem.dynamics {
        Dynamics::Quadrotor(q) if q.is_clamped() && problem.constraints.control_bounds.is_some() => {
            relaxed = GameProblem { dynamics: Dynamics::Quadrotor(q.unclamped()), ..problem.clone() };
            &relaxed
        }
        _ => problem,
    };

    let mut y = Vector::zeros(problem.inequality_count());
    let mut rho = config.initial_penalty;
    let mut cond = Condensed::new(Augmented::new(problem, y.clone(), rho))?;

    let neutral: Vec<Policy> = vec![problem.neutral_policy(); problem.num_players()];
    let start = warm_start.map(flatten);
    let mut it = match start.map(|pi| cond.evaluate(pi)) {
        Some(Ok(it)) => it,
        _ => match cond.evaluate(flatten(&neutral)) {
            Ok(it) => it,
            Err(e) => {
                let states = problem.initial_states.iter().map(|x| vec![x.clone(); problem.horizon]).collect();
                return Err(Error::NumericalFailure {
                    message: format!("could not evaluate the initial iterate: {e}"),
                    last_iterate: Box::new(JointTrajectory { states, policies: neutral }),
                });
            }
        },
    };

    let mut newton_iterations = 0;
    let mut outer_iterations = 0;
    let mut escapes = 0;
    let mut penalty_history = Vec::new();
    let mut local_nash = false;
    let mut first_order = false;
    let mut violation = cond.constraint_values(&it).iter().fold(0.0f64, |acc, &v| acc.max(v));
    let mut best = Best::new(&it, &y, rho, violation);

    while outer_iterations < config.max_outer_iterations {
        outer_iterations += 1;
        penalty_history.push(rho);
        let (next, outcome) = newton(&cond, it, config, config.max_newton_iterations, &mut newton_iterations);
        it = next;
        let c = cond.constraint_values(&it);
        violation = c.iter().fold(0.0f64, |acc, &v| acc.max(v));
        let inner_ok = matches!(outcome, NewtonOutcome::Converged);
        if it.residual_max().max(violation) < best.merit {
            best = Best::new(&it, &y, rho, violation);
        }

        if inner_ok && violation <= config.tolerance {
            first_order = true;
            let jac = cond.jacobian(&it);
            let eig = cond.own_block_min_eigen(&jac);
            let worst = eig.iter().enumerate().filter(|(_, (val, _, scale))| *val < -1e-9 * scale).min_by(|a, b| a.1 .0.total_cmp(&b.1 .0));
            match worst {
                None => {
                    local_nash = true;
                    break;
                }
                Some((player, (_, dir, _))) if config.symmetry_breaking && escapes < MAX_ESCAPES => {
                    escapes += 1;
                    first_order = false;
                    outer_iterations -= 1;
                    penalty_history.pop();
                    let size = (1 << (escapes - 1)) as f64;
                    it = escape(&cond, it, player, dir.clone(), size)?;
                    continue;
                }
                Some(_) => break,
            }
        }

        if violation <= config.tolerance {
            if matches!(outcome, NewtonOutcome::Stalled) {
                break;
            }
            continue;
        }
        {
            y = Vector::from_iterator(y.len(), y.iter().zip(c.iter()).map(|(&yi, &ci)| (yi + rho * ci).max(0.0)));
            rho *= config.penalty_growth;
            cond.aug.y = y.clone();
            cond.aug.rho = rho;
            it = cond.evaluate(it.pi.clone())?;
        }
    }

    let converged = first_order && (local_nash || !config.symmetry_breaking);
    if !converged && best.merit < it.residual_max().max(violation) {
        (y, rho, violation) = (best.y, best.rho, best.violation);
        cond.aug.y = y.clone();
        cond.aug.rho = rho;
        it = cond.evaluate(best.pi)?;
    }
    let multipliers = Multipliers { dynamics: cond.dynamics_multipliers(&it), inequality: y };
    Ok(EquilibriumSolution {
        kkt_residual: it.residual_max(),
        trajectory: it.trajectory(&cond.aug),
        multipliers,
        penalty: rho,
        penalty_history,
        max_violation: violation,
        outer_iterations,
        newton_iterations,
        local_nash,
        converged,
    })
}

/// Move player `player`'s policy by `size` along `dir`, on whichever side lowers its cost.
fn escape(cond: &Condensed, it: Iterate, player: usize, dir: Vector, size: f64) -> Result<Iterate> {
    let aug = &cond.aug;
    let mut best: Option<(f64, Iterate)> = None;
    for sign in [1.0, -1.0] {
        let mut pi = it.pi.clone();
        let mut seg = pi.rows_mut(player * aug.block, aug.block);
        seg += &dir * (sign * size);
        if let Ok(trial) = cond.evaluate(pi) {
            let cost = aug.cost(&trial.trajectory(aug), player)?;
            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                best = Some((cost, trial));
            }
        }
    }
    Ok(best.map_or(it, |(_, t)| t))
}

/// Player `player`'s augmented cost on an arbitrary trajectory, for the given inequality
/// multipliers and penalty.
pub fn augmented_cost(
    problem: &GameProblem,
    traj: &JointTrajectory,
    player: usize,
    inequality_multipliers: &Vector,
    penalty: f64,
) -> Result<f64> {
    problem.validate()?;
    problem.check_trajectory(traj)?;
    if inequality_multipliers.len() != problem.inequality_count() {
        return Err(Error::invalid("one inequality multiplier per constraint"));
    }
    if player >= problem.num_players() {
        return Err(Error::invalid("player index out of range"));
    }
    Augmented::new(problem, inequality_multipliers.clone(), penalty).cost(traj, player)
}

/// Stacked KKT residual.
///
/// Layout: for each player `i`, the gradient of its Lagrangian with respect to the joint states
/// `x_1 .. x_{T-1}` (each `P * n`, agents stacked) followed by its gradient with respect to its own
/// policy (`(T-1) * m`); then the joint dynamics residual `x_{k+1} - f(x_k, u_k)` for
/// `k = 0..T-1`.
pub fn kkt_residual(problem: &GameProblem, candidate: &JointTrajectory, multipliers: &Multipliers, penalty: f64) -> Result<Vector> {
    problem.validate()?;
    problem.check_trajectory(candidate)?;
    let aug = Augmented::new(problem, multipliers.inequality.clone(), penalty);
    if multipliers.inequality.len() != problem.inequality_count() {
        return Err(Error::invalid("one inequality multiplier per constraint"));
    }
    let joint = aug.players * aug.n;
    if multipliers.dynamics.len() != aug.players
        || multipliers.dynamics.iter().any(|l| l.len() != aug.steps || l.iter().any(|v| v.len() != joint))
    {
        return Err(Error::invalid("dynamics multipliers have the wrong shape"));
    }
    let model = &problem.dynamics;
    let disc = &problem.discretization;
    let t = problem.horizon;
    let lin: Vec<Vec<(DMatrix<f64>, DMatrix<f64>)>> = candidate
        .states
        .iter()
        .zip(&candidate.policies)
        .map(|(xs, p)| p.controls.iter().enumerate().map(|(k, u)| model.linearize(disc, &xs[k], u)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;

    let mut out = Vec::new();
    for i in 0..aug.players {
        let lambda = &multipliers.dynamics[i];
        for k in 1..t {
            for a in 0..aug.players {
                let mut g = aug.state_gradient(&candidate.states, i, a, k);
                g += lambda[k - 1].rows(a * aug.n, aug.n);
                if k < t - 1 {
                    g -= lin[a][k].0.tr_mul(&lambda[k].rows(a * aug.n, aug.n).into_owned());
                }
                out.extend(g.iter());
            }
        }
        for (k, u) in candidate.policies[i].controls.iter().enumerate() {
            let g = aug.control_gradient(u, i, k) - lin[i][k].1.tr_mul(&lambda[k].rows(i * aug.n, aug.n).into_owned());
            out.extend(g.iter());
        }
    }
    for k in 0..t - 1 {
        for a in 0..aug.players {
            let pred = model.step(disc, &candidate.states[a][k], &candidate.policies[a].controls[k])?;
            out.extend((&candidate.states[a][k + 1] - pred).iter());
        }
    }
    Ok(Vector::from_vec(out))
}

/// Change in player `agent`'s augmented cost when it alone switches to `trial`, the other
/// policies held at the solution and the states re-rolled. Non-negative for all small
/// perturbations at a local Nash equilibrium.
pub fn unilateral_deviation_gap(problem: &GameProblem, solution: &EquilibriumSolution, agent: usize, trial: &Policy) -> Result<f64> {
    if agent >= problem.num_players() {
        return Err(Error::invalid("agent index out of range"));
    }
    let mut policies = solution.trajectory.policies.clone();
    policies[agent] = trial.clone();
    let deviated = problem.rollout(policies)?;
    let y = &solution.multipliers.inequality;
    let base = augmented_cost(problem, &solution.trajectory, agent, y, solution.penalty)?;
    let dev = augmented_cost(problem, &deviated, agent, y, solution.penalty)?;
    Ok(dev - base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{DiscretizationSpec, QuadrotorParams};
    use crate::game::{AgentId, ConstraintSpec, CostWeights};

    #[test]
    fn condensed_jacobian_matches_differenced_gradient() {
        let Dynamics::Quadrotor(quad) = Dynamics::quadrotor(QuadrotorParams::default()).unwrap() else { unreachable!() };
        let model = Dynamics::Quadrotor(quad.unclamped());
        let w = CostWeights::default();
        let rest = |p: [f64; 3]| model.rest_state(&p).unwrap();
        let problem = GameProblem {
            participants: vec![AgentId(0), AgentId(1)],
            ego: 0,
            horizon: 5,
            discretization: DiscretizationSpec::for_model(&model, 0.1),
            costs: vec![w.cost_spec(&model, rest([2.0, 0.0, 0.0]), 0.8), w.cost_spec(&model, rest([0.0, 0.0, 0.0]), 0.8)],
            initial_states: vec![rest([0.0, 0.0, 0.0]), rest([0.5, 0.3, 0.1])],
            dynamics: model.clone(),
            constraints: ConstraintSpec::default(),
        };
        let cond = Condensed::new(Augmented::new(&problem, Vector::zeros(problem.inequality_count()), 1.0)).unwrap();
        let mut pi = flatten(&vec![problem.neutral_policy(); 2]);
        for (k, v) in pi.iter_mut().enumerate() {
            *v += 0.3 * (k as f64 * 1.7).sin();
        }
        let jac = cond.jacobian(&cond.evaluate(pi.clone()).unwrap());
        let h = 1e-6;
        let mut fd = DMatrix::zeros(jac.nrows(), jac.ncols());
        for c in 0..pi.len() {
            let (mut p, mut q) = (pi.clone(), pi.clone());
            p[c] += h;
            q[c] -= h;
            fd.set_column(c, &((cond.evaluate(p).unwrap().grad - cond.evaluate(q).unwrap().grad) / (2.0 * h)));
        }
        assert!((&jac - &fd).amax() < 1e-5 * fd.amax());
    }
}
