//! The input design problem: parameters to trajectory to dataset to cost
//! `W(θ) = V(D_N(θ))`, with analytic and finite-difference gradients.
//!
//! All functions here take the *decision vector* of the signal. For most
//! families it equals `θ`; with a shared multisine amplitude the tied
//! amplitudes collapse into one leading coordinate.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{AnchorSet, Dataset, Points};
use crate::dynamics::{rollout, DiscreteSystem, Rollout};
use crate::error::{Error, Result};
use crate::gp::{cost_v, cost_v_with_gradient, KernelConfig};
use crate::input::InputSignal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMethod {
    #[default]
    Analytic,
    CentralFd,
}

/// Everything needed to evaluate `W`: the system, the signal template
/// (family and bounds), initial conditions, data length, anchors and kernel.
#[derive(Clone)]
pub struct DesignProblem {
    system: Arc<dyn DiscreteSystem>,
    signal: InputSignal,
    x0: Vec<f64>,
    u0: Vec<f64>,
    n: usize,
    anchors: AnchorSet,
    kernel: KernelConfig,
    coordinates: Vec<usize>,
}

impl std::fmt::Debug for DesignProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DesignProblem")
            .field("system", &self.system.name())
            .field("signal", &self.signal)
            .field("n", &self.n)
            .field("anchors", &self.anchors.len())
            .field("coordinates", &self.coordinates)
            .finish()
    }
}

/// Builder for [`DesignProblem`]. Initial conditions default to zero and
/// the design space to the full joint space `(x, u)`.
pub struct DesignProblemBuilder {
    system: Arc<dyn DiscreteSystem>,
    signal: InputSignal,
    x0: Option<Vec<f64>>,
    u0: Option<Vec<f64>>,
    n: usize,
    anchors: Option<AnchorSet>,
    kernel: Option<KernelConfig>,
    coordinates: Option<Vec<usize>>,
}

impl DesignProblemBuilder {
    pub fn initial_state(mut self, x0: Vec<f64>) -> Self {
        self.x0 = Some(x0);
        self
    }

    pub fn initial_input(mut self, u0: Vec<f64>) -> Self {
        self.u0 = Some(u0);
        self
    }

    pub fn anchors(mut self, anchors: AnchorSet) -> Self {
        self.anchors = Some(anchors);
        self
    }

    pub fn kernel(mut self, kernel: KernelConfig) -> Self {
        self.kernel = Some(kernel);
        self
    }

    /// Restricts the design space to the listed joint coordinates, e.g.
    /// `[0, 1]` to cover the states of a two-state system only.
    pub fn coordinates(mut self, coordinates: Vec<usize>) -> Self {
        self.coordinates = Some(coordinates);
        self
    }

    pub fn build(self) -> Result<DesignProblem> {
        let (nx, nu) = (self.system.state_dim(), self.system.input_dim());
        let problem = DesignProblem {
            x0: self.x0.unwrap_or_else(|| vec![0.0; nx]),
            u0: self.u0.unwrap_or_else(|| vec![0.0; nu]),
            n: self.n,
            anchors: self
                .anchors
                .ok_or_else(|| Error::invalid("design problem needs anchors"))?,
            kernel: self
                .kernel
                .ok_or_else(|| Error::invalid("design problem needs a kernel"))?,
            coordinates: self.coordinates.unwrap_or_else(|| (0..nx + nu).collect()),
            system: self.system,
            signal: self.signal,
        };
        problem.validate()?;
        Ok(problem)
    }
}

impl DesignProblem {
    /// Starts a problem of data length `n`.
    pub fn builder(
        system: Arc<dyn DiscreteSystem>,
        signal: InputSignal,
        n: usize,
    ) -> DesignProblemBuilder {
        DesignProblemBuilder {
            system,
            signal,
            x0: None,
            u0: None,
            n,
            anchors: None,
            kernel: None,
            coordinates: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let (nx, nu) = (self.system.state_dim(), self.system.input_dim());
        if self.n == 0 {
            return Err(Error::invalid("data length must be at least 1"));
        }
        if self.x0.len() != nx || self.u0.len() != nu {
            return Err(Error::invalid(format!(
                "initial condition has {}/{} entries, system expects {nx}/{nu}",
                self.x0.len(),
                self.u0.len()
            )));
        }
        if self.signal.n_u() != nu {
            return Err(Error::invalid(format!(
                "signal drives {} inputs, system has {nu}",
                self.signal.n_u()
            )));
        }
        let (_, last) = self.signal.horizon();
        if last < self.n {
            return Err(Error::invalid(format!(
                "signal horizon ends at {last}, rollout needs {}",
                self.n
            )));
        }
        if self.coordinates.is_empty() || self.coordinates.iter().any(|&c| c >= nx + nu) {
            return Err(Error::invalid(format!(
                "design coordinates {:?} must index the {}-dimensional joint space",
                self.coordinates,
                nx + nu
            )));
        }
        let d = self.coordinates.len();
        if self.anchors.is_empty() || self.anchors.points.dim() != d {
            return Err(Error::invalid(format!(
                "anchors must be non-empty and {d}-dimensional"
            )));
        }
        if self.kernel.dim() != d {
            return Err(Error::invalid(format!(
                "kernel has {} lengthscales for a {d}-dimensional design space",
                self.kernel.dim()
            )));
        }
        Ok(())
    }

    pub fn system(&self) -> &dyn DiscreteSystem {
        self.system.as_ref()
    }

    pub fn signal(&self) -> &InputSignal {
        &self.signal
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn kernel(&self) -> &KernelConfig {
        &self.kernel
    }

    pub fn coordinates(&self) -> &[usize] {
        &self.coordinates
    }

    /// Same problem under a different kernel.
    pub fn with_kernel(&self, kernel: KernelConfig) -> Result<Self> {
        let mut p = self.clone();
        p.kernel = kernel;
        p.validate()?;
        Ok(p)
    }

    pub fn n_params(&self) -> usize {
        self.signal.decision_len()
    }

    /// Decision vector of the template signal.
    pub fn initial_params(&self) -> Vec<f64> {
        self.signal.to_decision()
    }

    pub fn signal_for(&self, params: &[f64]) -> Result<InputSignal> {
        self.signal.from_decision(params)
    }

    /// Projection of a decision vector onto the feasible set.
    pub fn project(&self, params: &[f64]) -> Result<Vec<f64>> {
        Ok(self.signal_for(params)?.project().to_decision())
    }

    pub fn is_feasible(&self, params: &[f64]) -> bool {
        self.signal_for(params)
            .map(|s| s.bounds().contains(s.theta()))
            .unwrap_or(false)
    }

    pub fn rollout(&self, params: &[f64], with_sensitivities: bool) -> Result<Rollout> {
        let signal = self.signal_for(params)?;
        rollout(
            self.system.as_ref(),
            &signal,
            &self.x0,
            &self.u0,
            self.n,
            with_sensitivities,
        )
    }

    /// The rollout's dataset restricted to the design coordinates.
    pub fn design_dataset(&self, rollout: &Rollout) -> Result<Dataset> {
        Ok(Dataset {
            points: self.design_points(&rollout.dataset.points)?,
            theta: rollout.dataset.theta.clone(),
        })
    }

    fn design_points(&self, joint: &Points) -> Result<Points> {
        if self.coordinates.len() == joint.dim()
            && self.coordinates.iter().enumerate().all(|(i, &c)| i == c)
        {
            Ok(joint.clone())
        } else {
            joint.select(&self.coordinates)
        }
    }
}

/// `W(θ)` and the design-space dataset it was computed from.
pub fn cost_w(params: &[f64], problem: &DesignProblem) -> Result<(f64, Dataset)> {
    let r = problem.rollout(params, false)?;
    let data = problem.design_dataset(&r)?;
    let cost = cost_v(&data.points, &problem.anchors, &problem.kernel)?;
    Ok((cost, data))
}

/// `∇W` with respect to the decision vector.
pub fn cost_w_gradient(
    params: &[f64],
    problem: &DesignProblem,
    method: GradientMethod,
) -> Result<Vec<f64>> {
    Ok(cost_w_with_gradient(params, problem, method)?.1)
}

/// `W(θ)` and `∇W` from a single rollout when the gradient is analytic.
pub fn cost_w_with_gradient(
    params: &[f64],
    problem: &DesignProblem,
    method: GradientMethod,
) -> Result<(f64, Vec<f64>)> {
    match method {
        GradientMethod::Analytic => analytic(params, problem),
        GradientMethod::CentralFd => {
            let cost = cost_w(params, problem)?.0;
            Ok((cost, central_difference(params, problem)?))
        }
    }
}

fn analytic(params: &[f64], problem: &DesignProblem) -> Result<(f64, Vec<f64>)> {
    let signal = problem.signal_for(params)?;
    let r = rollout(
        problem.system.as_ref(),
        &signal,
        &problem.x0,
        &problem.u0,
        problem.n,
        true,
    )?;
    let points = problem.design_points(&r.dataset.points)?;
    let (cost, g) = cost_v_with_gradient(&points, &problem.anchors, &problem.kernel)?;
    let sens = r
        .point_sensitivities
        .expect("rollout with sensitivities returns them");
    let mut grad = vec![0.0; signal.n_theta()];
    for (j, dz) in sens.iter().enumerate() {
        for (c, &row) in problem.coordinates.iter().enumerate() {
            let gjc = g[(j, c)];
            if gjc == 0.0 {
                continue;
            }
            for (t, out) in grad.iter_mut().enumerate() {
                *out += gjc * dz[(row, t)];
            }
        }
    }
    Ok((cost, signal.reduce_gradient(&grad)))
}

/// Finite-difference step for coordinate value `v`.
pub fn fd_step(v: f64) -> f64 {
    (1e-6 * v.abs()).max(1e-6)
}

fn central_difference(params: &[f64], problem: &DesignProblem) -> Result<Vec<f64>> {
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let h = fd_step(params[i]);
        p[i] = params[i] + h;
        let up = cost_w(&p, problem)?.0;
        p[i] = params[i] - h;
        let down = cost_w(&p, problem)?.0;
        p[i] = params[i];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Relative ℓ∞ discrepancy `‖g_a − g_fd‖∞ / max(‖g_a‖∞, ‖g_fd‖∞)` between
/// the analytic and central-difference gradients; 0 when both vanish.
pub fn gradient_check(params: &[f64], problem: &DesignProblem) -> Result<f64> {
    if params.is_empty() {
        return Ok(0.0);
    }
    let a = cost_w_gradient(params, problem, GradientMethod::Analytic)?;
    let f = cost_w_gradient(params, problem, GradientMethod::CentralFd)?;
    Ok(relative_linf(&a, &f))
}

pub(crate) fn relative_linf(a: &[f64], b: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = inf(a).max(inf(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
