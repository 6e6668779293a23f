//! Discrete-time systems `x(k+1) = f(x(k), u(k))`, trajectory rollout and
//! forward sensitivities.
//!
//! Continuous models enter through [`VectorField`] and are discretized with
//! one classical RK4 step per sample, input held constant over the step.
//! Linear models are discretized exactly with a zero-order hold.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Points};
use crate::error::{Error, Result};
use crate::input::InputSignal;
use crate::linalg::expm;

/// A discrete-time state-space model.
pub trait DiscreteSystem: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// Sampling period in seconds.
    fn sample_time(&self) -> f64;
    fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>>;

    fn has_jacobians(&self) -> bool {
        false
    }

    /// `(∂f/∂x, ∂f/∂u)` at `(x, u)`.
    fn jacobians(&self, _x: &[f64], _u: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Err(Error::Capability(format!(
            "system `{}` provides no Jacobians",
            self.name()
        )))
    }
}

/// Zero-order-hold discretization `(A_d, B_d)` of `ẋ = Ax + Bu`, computed
/// from the exponential of the block matrix `[[A, B], [0, 0]]·T_s`.
pub fn zoh_discretize(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    ts: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !a.is_square() {
        return Err(Error::invalid("A must be square"));
    }
    if b.nrows() != a.nrows() {
        return Err(Error::invalid(format!(
            "B has {} rows, A has {}",
            b.nrows(),
            a.nrows()
        )));
    }
    if !(ts.is_finite() && ts > 0.0) {
        return Err(Error::invalid(format!(
            "sample time must be positive, got {ts}"
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite entry in A or B"));
    }
    let (n, m) = (a.nrows(), b.ncols());
    let mut block = DMatrix::zeros(n + m, n + m);
    block.view_mut((0, 0), (n, n)).copy_from(&(a * ts));
    block.view_mut((0, n), (n, m)).copy_from(&(b * ts));
    let e = expm(&block);
    Ok((
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
    ))
}

/// `x(k+1) = A_d x(k) + B_d u(k)`.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    name: String,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    ts: f64,
}

impl LinearSystem {
    pub fn new(name: impl Into<String>, a: DMatrix<f64>, b: DMatrix<f64>, ts: f64) -> Result<Self> {
        if !a.is_square() || b.nrows() != a.nrows() {
            return Err(Error::invalid("inconsistent A/B dimensions"));
        }
        Ok(LinearSystem {
            name: name.into(),
            a,
            b,
            ts,
        })
    }

    /// Discretizes a continuous model with a zero-order hold.
    pub fn from_continuous(
        name: impl Into<String>,
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        ts: f64,
    ) -> Result<Self> {
        let (ad, bd) = zoh_discretize(a, b, ts)?;
        Self::new(name, ad, bd, ts)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
}

impl DiscreteSystem for LinearSystem {
    fn name(&self) -> &str {
        &self.name
    }

    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn sample_time(&self) -> f64 {
        self.ts
    }

    fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let next =
            &self.a * DVector::from_column_slice(x) + &self.b * DVector::from_column_slice(u);
        Ok(next.as_slice().to_vec())
    }

    fn has_jacobians(&self) -> bool {
        true
    }

    fn jacobians(&self, _x: &[f64], _u: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.a.clone(), self.b.clone()))
    }
}

/// A continuous-time vector field `ẋ = F(x, u)`.
pub trait VectorField: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn eval(&self, x: &[f64], u: &[f64]) -> Vec<f64>;

    /// `(∂F/∂x, ∂F/∂u)`, when available.
    fn jacobian(&self, _x: &[f64], _u: &[f64]) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        None
    }
}

fn axpy(x: &[f64], h: f64, k: &[f64]) -> Vec<f64> {
    x.iter().zip(k).map(|(a, b)| a + h * b).collect()
}

/// One classical Runge–Kutta step with `u` held over `[0, dt]`.
pub fn rk4_step<F: VectorField + ?Sized>(
    field: &F,
    x: &[f64],
    u: &[f64],
    dt: f64,
) -> Result<Vec<f64>> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid(format!("step must be positive, got {dt}")));
    }
    let k1 = field.eval(x, u);
    let k2 = field.eval(&axpy(x, 0.5 * dt, &k1), u);
    let k3 = field.eval(&axpy(x, 0.5 * dt, &k2), u);
    let k4 = field.eval(&axpy(x, dt, &k3), u);
    let next: Vec<f64> = (0..x.len())
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::IntegrationDiverged);
    }
    Ok(next)
}

/// Exact derivative of the RK4 map with respect to `x` and `u`, obtained by
/// differentiating each stage.
pub fn rk4_step_jacobians<F: VectorField + ?Sized>(
    field: &F,
    x: &[f64],
    u: &[f64],
    dt: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = x.len();
    let missing = || Error::Capability("vector field provides no Jacobian".into());
    let eye = DMatrix::<f64>::identity(n, n);

    let k1 = field.eval(x, u);
    let (a1, b1) = field.jacobian(x, u).ok_or_else(missing)?;
    let x2 = axpy(x, 0.5 * dt, &k1);
    let k2 = field.eval(&x2, u);
    let (a2, b2) = field.jacobian(&x2, u).ok_or_else(missing)?;
    let x3 = axpy(x, 0.5 * dt, &k2);
    let k3 = field.eval(&x3, u);
    let (a3, b3) = field.jacobian(&x3, u).ok_or_else(missing)?;
    let x4 = axpy(x, dt, &k3);
    let (a4, b4) = field.jacobian(&x4, u).ok_or_else(missing)?;

    let dk1x = a1;
    let dk1u = b1;
    let dk2x = &a2 * (&eye + &dk1x * (0.5 * dt));
    let dk2u = &a2 * &dk1u * (0.5 * dt) + b2;
    let dk3x = &a3 * (&eye + &dk2x * (0.5 * dt));
    let dk3u = &a3 * &dk2u * (0.5 * dt) + b3;
    let dk4x = &a4 * (&eye + &dk3x * dt);
    let dk4u = &a4 * &dk3u * dt + b4;

    let fx = &eye + (dk1x + dk2x * 2.0 + dk3x * 2.0 + dk4x) * (dt / 6.0);
    let fu = (dk1u + dk2u * 2.0 + dk3u * 2.0 + dk4u) * (dt / 6.0);
    Ok((fx, fu))
}

/// A vector field sampled by one RK4 step per period.
pub struct Rk4System<F> {
    name: String,
    field: F,
    dt: f64,
}

impl<F: VectorField> Rk4System<F> {
    pub fn new(name: impl Into<String>, field: F, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid(format!("step must be positive, got {dt}")));
        }
        Ok(Rk4System {
            name: name.into(),
            field,
            dt,
        })
    }

    pub fn field(&self) -> &F {
        &self.field
    }
}

impl<F: VectorField> DiscreteSystem for Rk4System<F> {
    fn name(&self) -> &str {
        &self.name
    }

    fn state_dim(&self) -> usize {
        self.field.state_dim()
    }

    fn input_dim(&self) -> usize {
        self.field.input_dim()
    }

    fn sample_time(&self) -> f64 {
        self.dt
    }

    fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        rk4_step(&self.field, x, u, self.dt)
    }

    fn has_jacobians(&self) -> bool {
        let x = vec![0.0; self.state_dim()];
        let u = vec![0.0; self.input_dim()];
        self.field.jacobian(&x, &u).is_some()
    }

    fn jacobians(&self, x: &[f64], u: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        rk4_step_jacobians(&self.field, x, u, self.dt)
    }
}

/// Physical parameters of the rail-guided mass hung from a spring with free
/// length `l` anchored at height `a` above the rail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsdParams {
    /// Spring free length, m.
    pub l: f64,
    /// Vertical offset of the spring anchor, m.
    pub a: f64,
    /// Mass, kg.
    pub m: f64,
    /// Spring stiffness, N/m.
    pub b: f64,
    /// Viscous damping, N·s/m.
    pub c: f64,
}

impl Default for MsdParams {
    fn default() -> Self {
        MsdParams {
            l: 0.17,
            a: 0.25,
            m: 5.0,
            b: 800.0,
            c: 10.0,
        }
    }
}

impl MsdParams {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("l", self.l),
            ("a", self.a),
            ("m", self.m),
            ("b", self.b),
            ("c", self.c),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!(
                    "mass-spring-damper parameter {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Spring length `η(x₁) = √(x₁² + a²)`.
    pub fn eta(&self, x1: f64) -> f64 {
        x1.hypot(self.a)
    }

    /// Horizontal spring force `b (1 − l/η) x₁`.
    pub fn spring_force(&self, x1: f64) -> f64 {
        self.b * (1.0 - self.l / self.eta(x1)) * x1
    }
}

/// `(ẋ₁, ẋ₂)` of the mass-spring-damper driven by force `force`.
pub fn msd_vector_field(x: [f64; 2], force: f64, params: &MsdParams) -> Result<[f64; 2]> {
    if !(params.m.is_finite() && params.m > 0.0) {
        return Err(Error::invalid(format!(
            "mass must be positive, got {}",
            params.m
        )));
    }
    if params.a.is_nan() || params.a <= 0.0 {
        return Err(Error::invalid("spring anchor offset a must be positive"));
    }
    Ok(msd_rhs(x, force, params))
}

fn msd_rhs(x: [f64; 2], force: f64, p: &MsdParams) -> [f64; 2] {
    [x[1], (force - p.spring_force(x[0]) - p.c * x[1]) / p.m]
}

/// Mass-spring-damper as a [`VectorField`] with state `(position, velocity)`
/// and input force.
#[derive(Debug, Clone, Copy)]
pub struct MassSpringDamper {
    params: MsdParams,
}

impl MassSpringDamper {
    pub fn new(params: MsdParams) -> Result<Self> {
        params.validate()?;
        Ok(MassSpringDamper { params })
    }

    pub fn params(&self) -> &MsdParams {
        &self.params
    }
}

impl VectorField for MassSpringDamper {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn eval(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        msd_rhs([x[0], x[1]], u[0], &self.params).to_vec()
    }

    fn jacobian(&self, x: &[f64], _u: &[f64]) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        let p = &self.params;
        let eta = p.eta(x[0]);
        // d/dx₁ [b (1 − l/η) x₁] = b (1 − l a² / η³)
        let dspring = p.b * (1.0 - p.l * p.a * p.a / (eta * eta * eta));
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -dspring / p.m, -p.c / p.m]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0 / p.m]);
        Some((a, b))
    }
}

/// States `x(0..=N)`, inputs `u(0..=N)` and optional `∂x(k)/∂θ`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub sensitivities: Option<Vec<DMatrix<f64>>>,
}

impl Trajectory {
    /// Writes `k, x_1..x_nx, u_1..u_nu` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let nx = self.states.first().map_or(0, Vec::len);
        let nu = self.inputs.first().map_or(0, Vec::len);
        let mut header = vec!["k".to_string()];
        header.extend((1..=nx).map(|i| format!("x{i}")));
        header.extend((1..=nu).map(|i| format!("u{i}")));
        let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record(&header).map_err(csv_err)?;
        for (k, (x, u)) in self.states.iter().zip(&self.inputs).enumerate() {
            let mut row = vec![k.to_string()];
            row.extend(x.iter().chain(u).map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Result of [`rollout`].
#[derive(Debug, Clone)]
pub struct Rollout {
    pub trajectory: Trajectory,
    /// `z_j = vec(x(j), u(j))` for `j = 1..=N`.
    pub dataset: Dataset,
    /// `∂z_j/∂θ` for `j = 1..=N`, each `n_z × n_θ`.
    pub point_sensitivities: Option<Vec<DMatrix<f64>>>,
}

/// Simulates `x(j+1) = f(x(j), u(j; θ))` from `x(0) = x0`, `u(0) = u0`.
///
/// The signal is evaluated at `k = 1..=n`. The dataset collects
/// `z_j = vec(x(j), u(j))` for `j = 1..=n`; `u(n)` only enters `z_n`.
pub fn rollout(
    system: &dyn DiscreteSystem,
    signal: &InputSignal,
    x0: &[f64],
    u0: &[f64],
    n: usize,
    with_sensitivities: bool,
) -> Result<Rollout> {
    let (nx, nu) = (system.state_dim(), system.input_dim());
    if n == 0 {
        return Err(Error::invalid("rollout length must be at least 1"));
    }
    if x0.len() != nx || u0.len() != nu {
        return Err(Error::invalid(format!(
            "initial condition has {}/{} entries, system expects {nx}/{nu}",
            x0.len(),
            u0.len()
        )));
    }
    if signal.n_u() != nu {
        return Err(Error::invalid(format!(
            "signal drives {} inputs, system has {nu}",
            signal.n_u()
        )));
    }
    if with_sensitivities && !system.has_jacobians() {
        return Err(Error::Capability(format!(
            "system `{}` provides no Jacobians",
            system.name()
        )));
    }
    let n_theta = signal.n_theta();

    let mut states = Vec::with_capacity(n + 1);
    let mut inputs = Vec::with_capacity(n + 1);
    states.push(x0.to_vec());
    inputs.push(u0.to_vec());
    for k in 1..=n {
        inputs.push(signal.evaluate(k)?);
    }

    let mut sens = with_sensitivities.then(|| {
        let mut v = Vec::with_capacity(n + 1);
        v.push(DMatrix::zeros(nx, n_theta));
        v
    });
    let mut input_jac = Vec::new();
    if with_sensitivities {
        input_jac.push(DMatrix::zeros(nu, n_theta));
        for k in 1..=n {
            input_jac.push(signal.theta_jacobian(k)?);
        }
    }

    for k in 0..n {
        let (x, u) = (&states[k], &inputs[k]);
        let next = system.step(x, u).map_err(|e| match e {
            Error::IntegrationDiverged => Error::TrajectoryDiverged { step: k + 1 },
            other => other,
        })?;
        if next.len() != nx || next.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrajectoryDiverged { step: k + 1 });
        }
        if let Some(s) = sens.as_mut() {
            let (fx, fu) = system.jacobians(x, u)?;
            let s_next = &fx * &s[k] + &fu * &input_jac[k];
            s.push(s_next);
        }
        states.push(next);
    }

    let mut coords = Vec::with_capacity(n * (nx + nu));
    for j in 1..=n {
        coords.extend_from_slice(&states[j]);
        coords.extend_from_slice(&inputs[j]);
    }
    let dataset = Dataset {
        points: Points::from_flat(nx + nu, coords)?,
        theta: Some(signal.theta().to_vec()),
    };
    let point_sensitivities = sens.as_ref().map(|s| {
        (1..=n)
            .map(|j| {
                let mut dz = DMatrix::zeros(nx + nu, n_theta);
                dz.view_mut((0, 0), (nx, n_theta)).copy_from(&s[j]);
                dz.view_mut((nx, 0), (nu, n_theta)).copy_from(&input_jac[j]);
                dz
            })
            .collect()
    });
    Ok(Rollout {
        trajectory: Trajectory {
            states,
            inputs,
            sensitivities: sens,
        },
        dataset,
        point_sensitivities,
    })
}

/// Outcome of comparing a data length against `M × (T_d + 1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReachabilityAdvisory {
    pub required: usize,
    pub sufficient: bool,
}

impl ReachabilityAdvisory {
    pub fn message(&self, n: usize) -> Option<String> {
        (!self.sufficient).then(|| {
            format!(
                "data length {n} is below M × (T_d + 1) = {}; not every anchor can be visited",
                self.required
            )
        })
    }
}

/// Checks `N ≥ M (T_d + 1)` for a user-supplied reach horizon `T_d`. Never
/// fails; an insufficient length is logged as a warning.
pub fn reachability_advisory(n: usize, m: usize, t_d: usize) -> ReachabilityAdvisory {
    let required = m.saturating_mul(t_d.saturating_add(1));
    let adv = ReachabilityAdvisory {
        required,
        sufficient: n >= required,
    };
    if let Some(msg) = adv.message(n) {
        log::warn!("{msg}");
    }
    adv
}
