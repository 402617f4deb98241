//! Continuous-time motion models and their fixed-step discretization.
//!
//! Two models are provided:
//!
//! * a planar double integrator, state `[p_x, p_y, v_x, v_y]`, control `[a_x, a_y]`;
//! * a 12-state quadrotor, state `[x, y, z, phi, theta, psi, v_x, v_y, v_z, w_phi, w_theta, w_psi]`,
//!   control = four motor powers.
//!
//! The quadrotor follows
//!
//! ```text
//! x' = v          q' = W(phi, theta) w
//! v' = F / m      w' = I^-1 (tau - w x (I w))
//! F   = m g + R(phi, theta, psi) [0, 0, k_f (w1 + w2 + w3 + w4)]
//! tau = [L k_f (w2 - w4), L k_f (w3 - w1), k_m (w1 - w2 + w3 - w4)]
//! ```
//!
//! with a ZYX Euler convention. States are flat `DVector`s so the solver can treat every
//! model uniformly; [`DoubleIntegratorState`] and [`QuadrotorState`] are typed views.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, DVector, Matrix3, SVector, Vector2, Vector3};
use num_dual::{hessian, jacobian, Dual2SVec64, DualNum, DualSVec64};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;

/// Default simulation and planning step (s).
pub const DEFAULT_DT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleIntegratorState {
    pub position: Vector2<f64>,
    pub velocity: Vector2<f64>,
}

impl DoubleIntegratorState {
    pub fn to_vector(&self) -> Vector {
        Vector::from_column_slice(&[self.position.x, self.position.y, self.velocity.x, self.velocity.y])
    }

    pub fn from_slice(s: &[f64]) -> Result<Self> {
        if s.len() != 4 {
            return Err(Error::invalid(format!("double integrator state has 4 entries, got {}", s.len())));
        }
        Ok(Self { position: Vector2::new(s[0], s[1]), velocity: Vector2::new(s[2], s[3]) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadrotorState {
    pub position: Vector3<f64>,
    /// Roll, pitch, yaw (rad).
    pub euler: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub body_rates: Vector3<f64>,
}

impl QuadrotorState {
    /// Level, motionless vehicle at `position`.
    pub fn hover_at(position: Vector3<f64>) -> Self {
        Self { position, euler: Vector3::zeros(), velocity: Vector3::zeros(), body_rates: Vector3::zeros() }
    }

    pub fn to_vector(&self) -> Vector {
        let mut v = Vector::zeros(12);
        v.fixed_rows_mut::<3>(0).copy_from(&self.position);
        v.fixed_rows_mut::<3>(3).copy_from(&self.euler);
        v.fixed_rows_mut::<3>(6).copy_from(&self.velocity);
        v.fixed_rows_mut::<3>(9).copy_from(&self.body_rates);
        v
    }

    pub fn from_slice(s: &[f64]) -> Result<Self> {
        if s.len() != 12 {
            return Err(Error::invalid(format!("quadrotor state has 12 entries, got {}", s.len())));
        }
        Ok(Self {
            position: Vector3::new(s[0], s[1], s[2]),
            euler: Vector3::new(s[3], s[4], s[5]),
            velocity: Vector3::new(s[6], s[7], s[8]),
            body_rates: Vector3::new(s[9], s[10], s[11]),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadrotorParams {
    /// kg
    pub mass: f64,
    /// Body inertia (kg m^2), symmetric positive definite.
    pub inertia: Matrix3<f64>,
    /// Motor force constant k_f (N per unit power).
    pub force_constant: f64,
    /// Motor torque constant k_m (N m per unit power).
    pub torque_constant: f64,
    /// Arm length L (m).
    pub arm_length: f64,
    /// m/s^2
    pub gravity: f64,
    /// Motor power saturation, as a multiple of the hover power.
    pub max_power_factor: f64,
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            inertia: Matrix3::from_diagonal(&Vector3::new(0.01, 0.01, 0.02)),
            force_constant: 1.0,
            torque_constant: 0.0245,
            arm_length: 0.175,
            gravity: 9.81,
            max_power_factor: 4.0,
        }
    }
}

impl QuadrotorParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("force_constant", self.force_constant),
            ("torque_constant", self.torque_constant),
            ("arm_length", self.arm_length),
            ("gravity", self.gravity),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::invalid(format!("quadrotor {name} must be > 0, got {value}")));
            }
        }
        if !(self.max_power_factor.is_finite() && self.max_power_factor > 1.0) {
            return Err(Error::invalid(format!("quadrotor max_power_factor must exceed 1 (hover), got {}", self.max_power_factor)));
        }
        let asym = (self.inertia - self.inertia.transpose()).abs().max();
        if asym > 1e-12 * self.inertia.abs().max().max(1.0) {
            return Err(Error::invalid("quadrotor inertia must be symmetric"));
        }
        if self.inertia.cholesky().is_none() {
            return Err(Error::invalid("quadrotor inertia must be positive definite"));
        }
        Ok(())
    }
}

/// Quadrotor model with its inverse inertia cached.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadrotor {
    params: QuadrotorParams,
    inertia_inv: Matrix3<f64>,
    clamped: bool,
}

impl Quadrotor {
    pub fn new(params: QuadrotorParams) -> Result<Self> {
        params.validate()?;
        let inertia_inv = params.inertia.try_inverse().ok_or_else(|| Error::invalid("quadrotor inertia is singular"))?;
        Ok(Self { params, inertia_inv, clamped: true })
    }

    /// Same model with motor powers passed through unclamped. Used by the solver when the
    /// power limits are enforced as constraints instead, so the residual stays smooth.
    pub fn unclamped(&self) -> Self {
        Self { clamped: false, ..self.clone() }
    }

    pub fn is_clamped(&self) -> bool {
        self.clamped
    }

    pub fn params(&self) -> &QuadrotorParams {
        &self.params
    }

    /// Per-motor power that balances gravity with level attitude.
    pub fn hover_power(&self) -> f64 {
        self.params.mass * self.params.gravity / (4.0 * self.params.force_constant)
    }

    pub fn max_power(&self) -> f64 {
        self.params.max_power_factor * self.hover_power()
    }

    fn saturate<T: DualNum<Primitive = f64> + Copy>(&self, u: &[T; 4]) -> [T; 4] {
        if !self.clamped {
            return *u;
        }
        let hi = self.max_power();
        u.map(|w| {
            if w.re() < 0.0 {
                T::from(0.0)
            } else if w.re() > hi {
                T::from(hi)
            } else {
                w
            }
        })
    }

    fn thrust_direction<T: DualNum<Primitive = f64> + Copy>(euler: &[T; 3]) -> [T; 3] {
        let (sphi, cphi) = euler[0].sin_cos();
        let (stheta, ctheta) = euler[1].sin_cos();
        let (spsi, cpsi) = euler[2].sin_cos();
        [cpsi * stheta * cphi + spsi * sphi, spsi * stheta * cphi - cpsi * sphi, ctheta * cphi]
    }

    fn linear_acceleration<T: DualNum<Primitive = f64> + Copy>(&self, euler: &[T; 3], u: &[T; 4]) -> [T; 3] {
        let p = &self.params;
        let scale = (u[0] + u[1] + u[2] + u[3]) * (p.force_constant / p.mass);
        let d = Self::thrust_direction(euler);
        [d[0] * scale, d[1] * scale, d[2] * scale - p.gravity]
    }

    fn derivative<T: DualNum<Primitive = f64> + Copy>(&self, x: &[T; 12], u: &[T; 4]) -> Result<[T; 12]> {
        let theta = x[4];
        if !(theta.re().abs() < FRAC_PI_2) {
            return Err(Error::Singularity { pitch: theta.re() });
        }
        let (sphi, cphi) = x[3].sin_cos();
        let ctheta = theta.cos();
        let ttheta = theta.tan();
        let w = [x[9], x[10], x[11]];

        let u = self.saturate(u);
        let p = &self.params;
        let acc = self.linear_acceleration(&[x[3], x[4], x[5]], &u);
        let lkf = p.arm_length * p.force_constant;
        let torque = [(u[1] - u[3]) * lkf, (u[2] - u[0]) * lkf, (u[0] - u[1] + u[2] - u[3]) * p.torque_constant];
        let iw = mat_vec(&p.inertia, &w);
        let rhs = [
            torque[0] - (w[1] * iw[2] - w[2] * iw[1]),
            torque[1] - (w[2] * iw[0] - w[0] * iw[2]),
            torque[2] - (w[0] * iw[1] - w[1] * iw[0]),
        ];
        let ang = mat_vec(&self.inertia_inv, &rhs);

        Ok([
            x[6],
            x[7],
            x[8],
            w[0] + sphi * ttheta * w[1] + cphi * ttheta * w[2],
            cphi * w[1] - sphi * w[2],
            (sphi * w[1] + cphi * w[2]) / ctheta,
            acc[0],
            acc[1],
            acc[2],
            ang[0],
            ang[1],
            ang[2],
        ])
    }

    fn rk4<T: DualNum<Primitive = f64> + Copy>(&self, x: &[T; 12], u: &[T; 4], dt: f64) -> Result<[T; 12]> {
        let shifted = |k: &[T; 12], h: f64| std::array::from_fn(|i| x[i] + k[i] * h);
        let k1 = self.derivative(x, u)?;
        let k2 = self.derivative(&shifted(&k1, 0.5 * dt), u)?;
        let k3 = self.derivative(&shifted(&k2, 0.5 * dt), u)?;
        let k4 = self.derivative(&shifted(&k3, dt), u)?;
        let next: [T; 12] = std::array::from_fn(|i| x[i] + (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (dt / 6.0));
        if !(next[4].re().abs() < FRAC_PI_2) {
            return Err(Error::Singularity { pitch: next[4].re() });
        }
        Ok(next)
    }
}

fn mat_vec<T: DualNum<Primitive = f64> + Copy>(m: &Matrix3<f64>, v: &[T; 3]) -> [T; 3] {
    std::array::from_fn(|r| v[0] * m[(r, 0)] + v[1] * m[(r, 1)] + v[2] * m[(r, 2)])
}

fn quad_args(state: &Vector, control: &Vector) -> ([f64; 12], [f64; 4]) {
    (std::array::from_fn(|i| state[i]), std::array::from_fn(|i| control[i]))
}

/// Which fixed-step map realizes `x_{k+1} = f(x_k, u_k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    /// Closed-form constant-acceleration map; double integrator only.
    Exact,
    RungeKutta4,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscretizationSpec {
    pub dt: f64,
    pub integrator: Integrator,
}

impl DiscretizationSpec {
    /// The default integrator for `model`: exact for the double integrator, RK4 otherwise.
    pub fn for_model(model: &Dynamics, dt: f64) -> Self {
        let integrator = match model {
            Dynamics::DoubleIntegrator => Integrator::Exact,
            Dynamics::Quadrotor(_) => Integrator::RungeKutta4,
        };
        Self { dt, integrator }
    }

    pub fn validate(&self, model: &Dynamics) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::invalid(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.integrator == Integrator::Exact && !matches!(model, Dynamics::DoubleIntegrator) {
            return Err(Error::invalid("exact integration is only defined for the double integrator"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics {
    DoubleIntegrator,
    Quadrotor(Quadrotor),
}

fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} contains non-finite entries")))
    }
}

impl Dynamics {
    pub fn quadrotor(params: QuadrotorParams) -> Result<Self> {
        Ok(Dynamics::Quadrotor(Quadrotor::new(params)?))
    }

    /// Physical control limits, `[0, max_power]` per motor for the quadrotor.
    pub fn control_limits(&self) -> Option<(Vector, Vector)> {
        match self {
            Dynamics::DoubleIntegrator => None,
            Dynamics::Quadrotor(q) => Some((Vector::zeros(4), Vector::from_element(4, q.max_power()))),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Dynamics::DoubleIntegrator => 4,
            Dynamics::Quadrotor(_) => 12,
        }
    }

    pub fn control_dim(&self) -> usize {
        match self {
            Dynamics::DoubleIntegrator => 2,
            Dynamics::Quadrotor(_) => 4,
        }
    }

    /// Dimension of the position (and velocity) sub-vector.
    pub fn spatial_dim(&self) -> usize {
        match self {
            Dynamics::DoubleIntegrator => 2,
            Dynamics::Quadrotor(_) => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Dynamics::DoubleIntegrator => "double_integrator",
            Dynamics::Quadrotor(_) => "quadrotor",
        }
    }

    pub fn position<'a>(&self, state: &'a Vector) -> &'a [f64] {
        &state.as_slice()[..self.spatial_dim()]
    }

    pub fn velocity<'a>(&self, state: &'a Vector) -> &'a [f64] {
        let s = state.as_slice();
        match self {
            Dynamics::DoubleIntegrator => &s[2..4],
            Dynamics::Quadrotor(_) => &s[6..9],
        }
    }

    /// Offset of the velocity block inside the state vector.
    pub fn velocity_offset(&self) -> usize {
        match self {
            Dynamics::DoubleIntegrator => 2,
            Dynamics::Quadrotor(_) => 6,
        }
    }

    /// Control that keeps a resting agent at rest.
    pub fn neutral_control(&self) -> Vector {
        match self {
            Dynamics::DoubleIntegrator => Vector::zeros(2),
            Dynamics::Quadrotor(q) => Vector::from_element(4, q.hover_power()),
        }
    }

    /// Motionless state at `position` (level attitude for the quadrotor).
    pub fn rest_state(&self, position: &[f64]) -> Result<Vector> {
        if position.len() != self.spatial_dim() {
            return Err(Error::invalid(format!("{} position has {} entries, got {}", self.name(), self.spatial_dim(), position.len())));
        }
        let mut x = Vector::zeros(self.state_dim());
        x.as_mut_slice()[..position.len()].copy_from_slice(position);
        Ok(x)
    }

    fn check(&self, state: &Vector, control: &Vector) -> Result<()> {
        if state.len() != self.state_dim() {
            return Err(Error::invalid(format!("{} state has {} entries, got {}", self.name(), self.state_dim(), state.len())));
        }
        if control.len() != self.control_dim() {
            return Err(Error::invalid(format!("{} control has {} entries, got {}", self.name(), self.control_dim(), control.len())));
        }
        check_finite("state", state.as_slice())?;
        check_finite("control", control.as_slice())
    }

    pub fn continuous_derivative(&self, state: &Vector, control: &Vector) -> Result<Vector> {
        self.check(state, control)?;
        match self {
            Dynamics::DoubleIntegrator => Ok(Vector::from_column_slice(&[state[2], state[3], control[0], control[1]])),
            Dynamics::Quadrotor(q) => {
                let (x, u) = quad_args(state, control);
                Ok(Vector::from_column_slice(&q.derivative(&x, &u)?))
            }
        }
    }

    /// Acceleration of the position sub-vector produced by `control` at `state`.
    /// For the quadrotor this is `F / m` with the saturated motor powers.
    pub fn acceleration(&self, state: &Vector, control: &Vector) -> Result<Vector> {
        self.check(state, control)?;
        match self {
            Dynamics::DoubleIntegrator => Ok(control.clone()),
            Dynamics::Quadrotor(q) => {
                let (x, u) = quad_args(state, control);
                let a = q.linear_acceleration(&[x[3], x[4], x[5]], &q.saturate(&u));
                Ok(Vector::from_column_slice(&a))
            }
        }
    }

    pub fn step(&self, spec: &DiscretizationSpec, state: &Vector, control: &Vector) -> Result<Vector> {
        self.check(state, control)?;
        self.step_unchecked(spec, state, control)
    }

    fn step_unchecked(&self, spec: &DiscretizationSpec, state: &Vector, control: &Vector) -> Result<Vector> {
        let dt = spec.dt;
        match (self, spec.integrator) {
            (Dynamics::DoubleIntegrator, Integrator::Exact) => {
                let h = 0.5 * dt * dt;
                Ok(Vector::from_column_slice(&[
                    state[0] + state[2] * dt + control[0] * h,
                    state[1] + state[3] * dt + control[1] * h,
                    state[2] + control[0] * dt,
                    state[3] + control[1] * dt,
                ]))
            }
            (Dynamics::DoubleIntegrator, Integrator::RungeKutta4) => {
                let f = |x: &Vector| Vector::from_column_slice(&[x[2], x[3], control[0], control[1]]);
                let k1 = f(state);
                let k2 = f(&(state + &k1 * (0.5 * dt)));
                let k3 = f(&(state + &k2 * (0.5 * dt)));
                let k4 = f(&(state + &k3 * dt));
                Ok(state + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
            }
            (Dynamics::Quadrotor(q), Integrator::RungeKutta4) => {
                let (x, u) = quad_args(state, control);
                Ok(Vector::from_column_slice(&q.rk4(&x, &u, dt)?))
            }
            (Dynamics::Quadrotor(_), Integrator::Exact) => {
                Err(Error::invalid("exact integration is only defined for the double integrator"))
            }
        }
    }

    /// States `x_0 .. x_{K}` produced by applying `controls` (length K) from `initial`.
    pub fn rollout(&self, spec: &DiscretizationSpec, initial: &Vector, controls: &[Vector]) -> Result<Vec<Vector>> {
        let mut states = Vec::with_capacity(controls.len() + 1);
        states.push(initial.clone());
        for u in controls {
            let next = self.step(spec, states.last().expect("non-empty"), u)?;
            states.push(next);
        }
        Ok(states)
    }

    /// Whether the discrete map is affine in `(x, u)` (Jacobians are constant).
    pub fn is_linear(&self) -> bool {
        matches!(self, Dynamics::DoubleIntegrator)
    }

    /// Jacobians `(A, B) = (df/dx, df/du)` of the discrete step.
    ///
    /// Closed form for the double integrator; forward-mode automatic differentiation of the RK4
    /// step for the quadrotor.
    pub fn linearize(&self, spec: &DiscretizationSpec, state: &Vector, control: &Vector) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check(state, control)?;
        match self {
            Dynamics::DoubleIntegrator => {
                let dt = spec.dt;
                let mut a = DMatrix::identity(4, 4);
                a[(0, 2)] = dt;
                a[(1, 3)] = dt;
                let mut b = DMatrix::zeros(4, 2);
                b[(0, 0)] = 0.5 * dt * dt;
                b[(1, 1)] = 0.5 * dt * dt;
                b[(2, 0)] = dt;
                b[(3, 1)] = dt;
                Ok((a, b))
            }
            Dynamics::Quadrotor(q) => {
                let (x, u) = quad_args(state, control);
                // The real-valued pass reports singularities; the dual pass repeats it exactly.
                q.rk4(&x, &u, spec.dt)?;
                let z = SVector::<f64, 16>::from_fn(|i, _| if i < 12 { x[i] } else { u[i - 12] });
                let (_, jac) = jacobian(
                    |z: SVector<DualSVec64<16>, 16>| {
                        let x = std::array::from_fn(|i| z[i]);
                        let u = std::array::from_fn(|i| z[12 + i]);
                        let next = q.rk4(&x, &u, spec.dt).unwrap_or([DualSVec64::from(f64::NAN); 12]);
                        SVector::<DualSVec64<16>, 12>::from_fn(|i, _| next[i])
                    },
                    &z,
                );
                let a = DMatrix::from_fn(12, 12, |r, c| jac[(r, c)]);
                let b = DMatrix::from_fn(12, 4, |r, c| jac[(r, 12 + c)]);
                Ok((a, b))
            }
        }
    }

    /// Hessian of `weights . f(x, u)` with respect to the stacked `(x, u)`, where `f` is the
    /// discrete step. Zero for the double integrator.
    pub fn step_hessian(&self, spec: &DiscretizationSpec, state: &Vector, control: &Vector, weights: &Vector) -> Result<DMatrix<f64>> {
        self.check(state, control)?;
        if weights.len() != self.state_dim() {
            return Err(Error::invalid("step Hessian weights must have the state dimension"));
        }
        match self {
            Dynamics::DoubleIntegrator => Ok(DMatrix::zeros(6, 6)),
            Dynamics::Quadrotor(q) => {
                let (x, u) = quad_args(state, control);
                q.rk4(&x, &u, spec.dt)?;
                // Positions and velocities enter the step affinely, so only the attitude, body rate
                // and motor coordinates carry curvature.
                const CURVED: [usize; 10] = [3, 4, 5, 9, 10, 11, 12, 13, 14, 15];
                let z = SVector::<f64, 10>::from_fn(|i, _| if CURVED[i] < 12 { x[CURVED[i]] } else { u[CURVED[i] - 12] });
                let (_, _, h) = hessian(
                    |z: SVector<Dual2SVec64<10>, 10>| {
                        let mut xd = x.map(Dual2SVec64::from);
                        let mut ud = u.map(Dual2SVec64::from);
                        for (zi, &c) in z.iter().zip(&CURVED) {
                            if c < 12 {
                                xd[c] = *zi;
                            } else {
                                ud[c - 12] = *zi;
                            }
                        }
                        match q.rk4(&xd, &ud, spec.dt) {
                            Ok(next) => next.iter().zip(weights.iter()).fold(Dual2SVec64::from(0.0), |acc, (v, &w)| acc + *v * w),
                            Err(_) => Dual2SVec64::from(f64::NAN),
                        }
                    },
                    &z,
                );
                let mut out = DMatrix::zeros(16, 16);
                for (a, &ra) in CURVED.iter().enumerate() {
                    for (b, &rb) in CURVED.iter().enumerate() {
                        out[(ra, rb)] = h[(a, b)];
                    }
                }
                Ok(out)
            }
        }
    }
}
