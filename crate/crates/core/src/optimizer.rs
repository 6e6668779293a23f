//! Projected gradient descent on the decision vector of a
//! [`DesignProblem`].

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::design::{cost_w_with_gradient, DesignProblem, GradientMethod};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepPolicy {
    /// `θ ← P(θ − α∇W)` with a constant `α`.
    Fixed { alpha: f64 },
    /// Armijo backtracking along the projected path. Each line search
    /// starts from the Barzilai-Borwein step `sᵀs / sᵀy` of the last two
    /// iterates, or from `grow` times the previous step when that is
    /// unavailable or not positive.
    Backtracking {
        initial: f64,
        shrink: f64,
        armijo: f64,
        #[serde(default = "default_grow")]
        grow: f64,
    },
}

fn default_grow() -> f64 {
    2.0
}

impl Default for StepPolicy {
    fn default() -> Self {
        StepPolicy::Backtracking {
            initial: 1.0,
            shrink: 0.5,
            armijo: 1e-4,
            grow: default_grow(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub step_policy: StepPolicy,
    /// Stop once `‖θ⁺ − θ‖ < stop_threshold`.
    #[serde(default = "default_stop")]
    pub stop_threshold: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    /// Also stop after `plateau_window` consecutive iterations whose
    /// relative cost change is below `plateau_tolerance`.
    #[serde(default = "default_plateau_tolerance")]
    pub plateau_tolerance: f64,
    #[serde(default = "default_plateau_window")]
    pub plateau_window: usize,
    #[serde(default)]
    pub gradient_method: GradientMethod,
    /// Keep a copy of every accepted iterate in the trace.
    #[serde(default)]
    pub record_theta: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_stop() -> f64 {
    1e-6
}

fn default_max_iterations() -> usize {
    2000
}

fn default_plateau_tolerance() -> f64 {
    1e-10
}

fn default_plateau_window() -> usize {
    50
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step_policy: StepPolicy::default(),
            stop_threshold: default_stop(),
            max_iterations: default_max_iterations(),
            plateau_tolerance: default_plateau_tolerance(),
            plateau_window: default_plateau_window(),
            gradient_method: GradientMethod::default(),
            record_theta: false,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    /// Every violated constraint, one message each.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let positive = |x: f64| x.is_finite() && x > 0.0;
        match self.step_policy {
            StepPolicy::Fixed { alpha } => {
                if !positive(alpha) {
                    v.push(format!(
                        "optimizer.step_policy.alpha must be positive, got {alpha}"
                    ));
                }
            }
            StepPolicy::Backtracking {
                initial,
                shrink,
                armijo,
                grow,
            } => {
                if !positive(initial) {
                    v.push(format!(
                        "optimizer.step_policy.initial must be positive, got {initial}"
                    ));
                }
                if !(shrink > 0.0 && shrink < 1.0) {
                    v.push(format!(
                        "optimizer.step_policy.shrink must lie in (0, 1), got {shrink}"
                    ));
                }
                if !(armijo > 0.0 && armijo < 1.0) {
                    v.push(format!(
                        "optimizer.step_policy.armijo must lie in (0, 1), got {armijo}"
                    ));
                }
                if !(grow.is_finite() && grow >= 1.0) {
                    v.push(format!(
                        "optimizer.step_policy.grow must be at least 1, got {grow}"
                    ));
                }
            }
        }
        if !positive(self.stop_threshold) {
            v.push(format!(
                "optimizer.stop_threshold must be positive, got {}",
                self.stop_threshold
            ));
        }
        if self.max_iterations == 0 {
            v.push("optimizer.max_iterations must be at least 1".into());
        }
        if !(self.plateau_tolerance.is_finite() && self.plateau_tolerance >= 0.0) {
            v.push(format!(
                "optimizer.plateau_tolerance must be non-negative, got {}",
                self.plateau_tolerance
            ));
        }
        if self.plateau_window == 0 {
            v.push("optimizer.plateau_window must be at least 1".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIters,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub grad_norm: f64,
    /// Step length used to reach this iterate; 0 for the starting point.
    pub step: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub records: Vec<IterationRecord>,
    pub status: Status,
    /// Why the last step failed when `status` is `Diverged`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl OptimizationTrace {
    /// Number of completed iterations, not counting the starting point.
    pub fn iterations(&self) -> usize {
        self.records.last().map_or(0, |r| r.iteration)
    }

    /// Writes `iteration,cost,grad_norm,step` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record(["iteration", "cost", "grad_norm", "step"])
            .map_err(err)?;
        for r in &self.records {
            w.write_record([
                r.iteration.to_string(),
                r.cost.to_string(),
                r.grad_norm.to_string(),
                r.step.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OptimizationResult {
    /// Best decision vector seen.
    pub theta_hat: Vec<f64>,
    pub cost: f64,
    pub trace: OptimizationTrace,
}

/// Writes `index,theta` rows.
pub fn write_theta_csv<W: Write>(theta: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(["index", "theta"]).map_err(err)?;
    for (i, t) in theta.iter().enumerate() {
        w.write_record([i.to_string(), t.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn is_divergence(e: &Error) -> bool {
    matches!(
        e,
        Error::TrajectoryDiverged { .. }
            | Error::IntegrationDiverged
            | Error::IllConditionedGram { .. }
    )
}

/// Minimizes `W` from `theta0` (a decision vector, projected first).
///
/// Returns the best iterate. A divergent cost evaluation at the starting
/// point, or any divergence under a fixed step, ends the run with status
/// [`Status::Diverged`]; backtracking shrinks the step instead.
pub fn optimize(
    theta0: &[f64],
    problem: &DesignProblem,
    cfg: &OptimizerConfig,
) -> Result<OptimizationResult> {
    cfg.validate()?;
    if theta0.len() != problem.n_params() {
        return Err(Error::invalid(format!(
            "initial decision vector has {} entries, problem has {}",
            theta0.len(),
            problem.n_params()
        )));
    }
    let method = cfg.gradient_method;
    let eval = |x: &[f64]| cost_w_with_gradient(x, problem, method);
    let snapshot = |x: &[f64]| cfg.record_theta.then(|| x.to_vec());

    let mut x = problem.project(theta0)?;
    let (mut f, mut g) = match eval(&x) {
        Ok(v) => v,
        Err(e) if is_divergence(&e) => {
            return Ok(OptimizationResult {
                cost: f64::INFINITY,
                theta_hat: x,
                trace: OptimizationTrace {
                    records: Vec::new(),
                    status: Status::Diverged,
                    failure: Some(e.to_string()),
                },
            })
        }
        Err(e) => return Err(e),
    };
    let mut records = vec![IterationRecord {
        iteration: 0,
        cost: f,
        grad_norm: norm(&g),
        step: 0.0,
        theta: snapshot(&x),
    }];
    let mut best = (x.clone(), f);
    let mut status = Status::MaxIters;
    let mut failure = None;
    let mut flat_run = 0usize;
    let mut bb_step: Option<f64> = None;
    let mut step = match cfg.step_policy {
        StepPolicy::Fixed { alpha } => alpha,
        StepPolicy::Backtracking { initial, .. } => initial,
    };

    for iteration in 1..=cfg.max_iterations {
        let trial = |t: f64| -> Result<Vec<f64>> {
            let raw: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - t * gi).collect();
            problem.project(&raw)
        };
        let accepted = match cfg.step_policy {
            StepPolicy::Fixed { alpha } => {
                let xn = trial(alpha)?;
                if xn == x {
                    Some((xn, f, g.clone()))
                } else {
                    match eval(&xn) {
                        Ok((fn_, gn)) => Some((xn, fn_, gn)),
                        Err(e) if is_divergence(&e) => {
                            failure = Some(e.to_string());
                            None
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
            StepPolicy::Backtracking {
                shrink,
                armijo,
                grow,
                ..
            } => {
                let mut t = bb_step.unwrap_or(step * grow);
                let mut found = None;
                // 1074 halvings take any finite step below the smallest
                // subnormal, so the loop always ends.
                for _ in 0..2000 {
                    let xn = trial(t)?;
                    let d: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
                    if d.iter().all(|v| *v == 0.0) {
                        found = Some((xn, f, g.clone()));
                        break;
                    }
                    let slope: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
                    match eval(&xn) {
                        Ok((fn_, gn)) if fn_ <= f + armijo * slope => {
                            found = Some((xn, fn_, gn));
                            break;
                        }
                        Ok(_) => {}
                        Err(e) if is_divergence(&e) => {}
                        Err(e) => return Err(e),
                    }
                    t *= shrink;
                    if t == 0.0 {
                        break;
                    }
                }
                step = t;
                // No acceptable step at all: the current point is
                // stationary to working precision.
                Some(found.unwrap_or_else(|| (x.clone(), f, g.clone())))
            }
        };
        let Some((xn, fn_, gn)) = accepted else {
            status = Status::Diverged;
            break;
        };
        let delta = norm(&xn.iter().zip(&x).map(|(a, b)| a - b).collect::<Vec<_>>());
        let change = (f - fn_).abs() / f.abs().max(f64::MIN_POSITIVE);
        flat_run = if change < cfg.plateau_tolerance {
            flat_run + 1
        } else {
            0
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let sy: f64 = s
            .iter()
            .zip(gn.iter().zip(&g))
            .map(|(si, (a, b))| si * (a - b))
            .sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        bb_step = (sy > 0.0 && ss > 0.0)
            .then(|| ss / sy)
            .filter(|t| t.is_finite());
        x = xn;
        f = fn_;
        g = gn;
        records.push(IterationRecord {
            iteration,
            cost: f,
            grad_norm: norm(&g),
            step: if delta == 0.0 { 0.0 } else { step },
            theta: snapshot(&x),
        });
        if f < best.1 {
            best = (x.clone(), f);
        }
        if delta < cfg.stop_threshold || flat_run >= cfg.plateau_window {
            status = Status::Converged;
            break;
        }
    }

    Ok(OptimizationResult {
        theta_hat: best.0,
        cost: best.1,
        trace: OptimizationTrace {
            records,
            status,
            failure,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AnchorSet, Points};
    use crate::dynamics::DiscreteSystem;
    use crate::gp::KernelConfig;
    use crate::input::{Bounds, InputSignal};
    use nalgebra::DMatrix;
    use std::sync::Arc;

    struct Frozen;

    impl DiscreteSystem for Frozen {
        fn name(&self) -> &str {
            "frozen"
        }
        fn state_dim(&self) -> usize {
            1
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn sample_time(&self) -> f64 {
            1.0
        }
        fn step(&self, _x: &[f64], _u: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![0.0])
        }
        fn has_jacobians(&self) -> bool {
            true
        }
        fn jacobians(&self, _x: &[f64], _u: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
            Ok((DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)))
        }
    }

    /// One free input point `u_1` covering anchors in u-space.
    fn static_problem(anchors: &[f64], bounds: Option<Bounds>) -> DesignProblem {
        let rows: Vec<[f64; 1]> = anchors.iter().map(|a| [*a]).collect();
        let sig = InputSignal::new(
            crate::input::InputFamily::FreeForm {
                horizon: 1,
                channels: 1,
            },
            vec![0.0],
            bounds,
        )
        .unwrap();
        DesignProblem::builder(Arc::new(Frozen), sig, 1)
            .anchors(AnchorSet {
                points: Points::from_rows(&rows).unwrap(),
                epsilon: 0.0,
            })
            .kernel(KernelConfig::new(1.0, vec![1.0], 0.0).unwrap())
            .coordinates(vec![1])
            .build()
            .unwrap()
    }

    #[test]
    fn flat_cost_returns_start() {
        let p = static_problem(&[1e9], None);
        let r = optimize(&[0.3], &p, &OptimizerConfig::default()).unwrap();
        assert_eq!(r.theta_hat, vec![0.3]);
        assert_eq!(r.trace.status, Status::Converged);
        assert_eq!(r.trace.iterations(), 1);
    }

    #[test]
    fn single_point_moves_onto_anchor() {
        let p = static_problem(&[0.8], None);
        let cfg = OptimizerConfig {
            max_iterations: 500,
            stop_threshold: 1e-9,
            ..OptimizerConfig::default()
        };
        let r = optimize(&[-0.5], &p, &cfg).unwrap();
        assert!((r.theta_hat[0] - 0.8).abs() < 1e-6, "{:?}", r.theta_hat);
        assert!(r.trace.iterations() <= 500);
        for w in r.trace.records.windows(2) {
            assert!(w[1].cost <= w[0].cost);
        }
        assert!(r.trace.records.iter().all(|rec| r.cost <= rec.cost));
    }

    #[test]
    fn fixed_step_descends() {
        let p = static_problem(&[0.8], None);
        let cfg = OptimizerConfig {
            step_policy: StepPolicy::Fixed { alpha: 0.5 },
            max_iterations: 2000,
            ..OptimizerConfig::default()
        };
        let r = optimize(&[0.2], &p, &cfg).unwrap();
        assert!((r.theta_hat[0] - 0.8).abs() < 1e-4, "{:?}", r.theta_hat);
    }

    #[test]
    fn iterates_respect_bounds() {
        let bounds = Bounds {
            lower: vec![-1.0],
            upper: vec![0.5],
        };
        let p = static_problem(&[0.8], Some(bounds));
        let cfg = OptimizerConfig {
            record_theta: true,
            ..OptimizerConfig::default()
        };
        let r = optimize(&[3.0], &p, &cfg).unwrap();
        for rec in &r.trace.records {
            let t = rec.theta.as_ref().unwrap();
            assert!((-1.0..=0.5).contains(&t[0]));
        }
        assert_eq!(r.theta_hat, vec![0.5]);
    }

    #[test]
    fn identical_runs_have_identical_traces() {
        let p = static_problem(&[0.8, -0.4], None);
        let cfg = OptimizerConfig::default();
        let a = optimize(&[0.1], &p, &cfg).unwrap();
        let b = optimize(&[0.1], &p, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.theta_hat, b.theta_hat);
    }

    #[test]
    fn invalid_config_lists_every_problem() {
        let cfg = OptimizerConfig {
            step_policy: StepPolicy::Backtracking {
                initial: -1.0,
                shrink: 2.0,
                armijo: 1e-4,
                grow: 2.0,
            },
            stop_threshold: 0.0,
            max_iterations: 0,
            ..OptimizerConfig::default()
        };
        let Err(Error::Config(v)) = cfg.validate() else {
            panic!("expected a config error");
        };
        assert_eq!(v.len(), 4, "{v:?}");
    }

    #[test]
    fn trace_csv_layout() {
        let trace = OptimizationTrace {
            records: vec![IterationRecord {
                iteration: 0,
                cost: 0.5,
                grad_norm: 2.0,
                step: 0.0,
                theta: None,
            }],
            status: Status::Converged,
            failure: None,
        };
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "iteration,cost,grad_norm,step\n0,0.5,2,0\n"
        );
        let mut buf = Vec::new();
        write_theta_csv(&[1.5, -2.0], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "index,theta\n0,1.5\n1,-2\n"
        );
    }
}
