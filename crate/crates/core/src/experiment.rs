//! Configuration-driven experiments: Monte-Carlo optimization runs over one
//! or more anchor grids, with JSON/CSV reporting.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::anchors::{
    largest_empty_ball, load_points_csv, uniform_anchor_grid, write_points_csv, MetricWeight,
    RegionOfInterest, DEFAULT_EVAL_POINTS,
};
use crate::data::{AnchorSet, Points};
use crate::design::{cost_w, gradient_check, DesignProblem};
use crate::dynamics::{
    reachability_advisory, rollout, DiscreteSystem, LinearSystem, MassSpringDamper, MsdParams,
    Rk4System,
};
use crate::error::{Error, Result};
use crate::gp::{KernelConfig, DEFAULT_RELATIVE_JITTER};
use crate::input::{schroeder_multisine, Bounds, InputFamily, InputSignal};
use crate::optimizer::{optimize, write_theta_csv, OptimizerConfig, Status};

/// Scalar distribution for initial parameter draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Normal { mean: f64, std: f64 },
    Uniform { low: f64, high: f64 },
    Constant { value: f64 },
}

impl Distribution {
    fn violations(&self, path: &str) -> Vec<String> {
        let mut v = Vec::new();
        match *self {
            Distribution::Normal { mean, std } => {
                if !mean.is_finite() || !(std.is_finite() && std >= 0.0) {
                    v.push(format!(
                        "{path}: normal needs a finite mean and non-negative std"
                    ));
                }
            }
            Distribution::Uniform { low, high } => {
                if !(low.is_finite() && high.is_finite() && low < high) {
                    v.push(format!("{path}: uniform needs finite low < high"));
                }
            }
            Distribution::Constant { value } => {
                if !value.is_finite() {
                    v.push(format!("{path}: constant must be finite"));
                }
            }
        }
        v
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Distribution::Normal { mean, std } => {
                if std == 0.0 {
                    mean
                } else {
                    Normal::new(mean, std)
                        .expect("validated normal parameters")
                        .sample(rng)
                }
            }
            Distribution::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            Distribution::Constant { value } => value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemSpec {
    /// `ẋ = Ax + Bu` discretized with a zero-order hold, or used as is
    /// when `continuous = false`.
    Lti {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        sample_time: f64,
        #[serde(default = "yes")]
        continuous: bool,
    },
    /// Mass-spring-damper integrated with one RK4 step per sample.
    Msd { dt: f64, params: MsdParams },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSpec {
    /// `u(k) = θ_k` for `k = 1..=data_length`.
    FreeForm {
        init: Distribution,
        #[serde(default)]
        lower: Option<f64>,
        #[serde(default)]
        upper: Option<f64>,
    },
    /// Bins `first_bin..=last_bin` of the base frequency `f_s / period`.
    Multisine {
        first_bin: usize,
        last_bin: usize,
        period: usize,
        amplitude_init: Distribution,
        #[serde(default)]
        amplitude_bounds: Option<[f64; 2]>,
        phase_init: Distribution,
        #[serde(default)]
        phase_bounds: Option<[f64; 2]>,
        #[serde(default)]
        shared_amplitude: bool,
    },
    /// Levels on the fixed windows `[switching[l], switching[l+1])`.
    PiecewiseConstant {
        switching: Vec<usize>,
        init: Distribution,
        #[serde(default)]
        lower: Option<f64>,
        #[serde(default)]
        upper: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    /// Joint coordinates `(x, u)` spanned by the region; all by default.
    #[serde(default)]
    pub coordinates: Option<Vec<usize>>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// One sub-experiment per grid; each entry lists points per dimension.
    pub anchor_grids: Vec<Vec<usize>>,
    /// Diagonal of `Q`.
    pub metric_weight: Vec<f64>,
    #[serde(default = "default_eval_points")]
    pub eval_points: usize,
}

fn default_eval_points() -> usize {
    DEFAULT_EVAL_POINTS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub signal_variance: f64,
    /// Diagonal of `Λ^{1/2}`, in design-coordinate order.
    pub lengthscales: Vec<f64>,
    /// Defaults to `1e-8 · signal_variance`.
    #[serde(default)]
    pub jitter: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub runs: usize,
    /// `N`, the number of dataset points per trajectory.
    pub data_length: usize,
    #[serde(default)]
    pub initial_state: Option<Vec<f64>>,
    #[serde(default)]
    pub initial_input: Option<Vec<f64>>,
    /// User-supplied `T_d` for the data-length advisory.
    #[serde(default)]
    pub reachability_horizon: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub system: SystemSpec,
    pub input: InputSpec,
    pub design: DesignSpec,
    pub kernel: KernelSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn finite_all(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, source: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| {
                text[..s.start.min(text.len())].lines().count().max(1)
            });
            Error::Parse {
                path: source.to_path_buf(),
                line,
                message: e.message().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("toml: {e}")))
    }

    /// `(n_x, n_u)` implied by the system section, when it is well formed.
    fn dims(&self) -> Option<(usize, usize)> {
        match &self.system {
            SystemSpec::Lti { a, b, .. } => {
                let nx = a.len();
                let nu = b.first().map_or(0, |r| r.len());
                (nx > 0 && nu > 0).then_some((nx, nu))
            }
            SystemSpec::Msd { .. } => Some((2, 1)),
        }
    }

    /// Every constraint the config violates. Empty means valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.data_length == 0 {
            v.push("data_length must be at least 1".into());
        }
        if self.reachability_horizon == Some(0) {
            v.push("reachability_horizon must be at least 1".into());
        }
        match &self.system {
            SystemSpec::Lti {
                a, b, sample_time, ..
            } => {
                let n = a.len();
                if n == 0 || a.iter().any(|r| r.len() != n) {
                    v.push("system.a must be a non-empty square matrix".into());
                }
                let m = b.first().map_or(0, |r| r.len());
                if b.len() != n || m == 0 || b.iter().any(|r| r.len() != m) {
                    v.push(format!(
                        "system.b must have {n} rows of equal, non-zero length"
                    ));
                }
                if !a.iter().chain(b).all(|r| finite_all(r)) {
                    v.push("system matrices must be finite".into());
                }
                if !(sample_time.is_finite() && *sample_time > 0.0) {
                    v.push(format!(
                        "system.sample_time must be positive, got {sample_time}"
                    ));
                }
            }
            SystemSpec::Msd { dt, params } => {
                if !(dt.is_finite() && *dt > 0.0) {
                    v.push(format!("system.dt must be positive, got {dt}"));
                }
                if let Err(e) = params.validate() {
                    v.push(format!("system.params: {e}"));
                }
            }
        }
        let dims = self.dims();
        if let Some((nx, nu)) = dims {
            if let Some(x0) = &self.initial_state {
                if x0.len() != nx || !finite_all(x0) {
                    v.push(format!("initial_state must hold {nx} finite values"));
                }
            }
            if let Some(u0) = &self.initial_input {
                if u0.len() != nu || !finite_all(u0) {
                    v.push(format!("initial_input must hold {nu} finite values"));
                }
            }
        }
        let nu = dims.map(|d| d.1);
        let bound_pair = |v: &mut Vec<String>, path: &str, lo: Option<f64>, hi: Option<f64>| {
            let lo = lo.unwrap_or(f64::NEG_INFINITY);
            let hi = hi.unwrap_or(f64::INFINITY);
            if lo.is_nan() || hi.is_nan() || lo > hi {
                v.push(format!("{path}: lower bound exceeds upper bound"));
            }
        };
        match &self.input {
            InputSpec::FreeForm { init, lower, upper } => {
                v.extend(init.violations("input.init"));
                bound_pair(&mut v, "input", *lower, *upper);
            }
            InputSpec::Multisine {
                first_bin,
                last_bin,
                period,
                amplitude_init,
                amplitude_bounds,
                phase_init,
                phase_bounds,
                ..
            } => {
                if nu.is_some_and(|nu| nu != 1) {
                    v.push("multisine input drives a single input channel".into());
                }
                if *first_bin == 0 || first_bin > last_bin {
                    v.push(format!(
                        "input bins must satisfy 1 <= first_bin <= last_bin, got {first_bin}..{last_bin}"
                    ));
                }
                if *period == 0 {
                    v.push("input.period must be at least 1".into());
                }
                v.extend(amplitude_init.violations("input.amplitude_init"));
                v.extend(phase_init.violations("input.phase_init"));
                if let Some([lo, hi]) = amplitude_bounds {
                    bound_pair(&mut v, "input.amplitude_bounds", Some(*lo), Some(*hi));
                }
                if let Some([lo, hi]) = phase_bounds {
                    bound_pair(&mut v, "input.phase_bounds", Some(*lo), Some(*hi));
                }
            }
            InputSpec::PiecewiseConstant {
                switching,
                init,
                lower,
                upper,
            } => {
                if nu.is_some_and(|nu| nu != 1) {
                    v.push("piecewise-constant input drives a single input channel".into());
                }
                if switching.len() < 2 || switching.windows(2).any(|w| w[0] >= w[1]) {
                    v.push(
                        "input.switching needs at least two strictly increasing instants".into(),
                    );
                }
                v.extend(init.violations("input.init"));
                bound_pair(&mut v, "input", *lower, *upper);
            }
        }

        let d = &self.design;
        let dim = match (&d.coordinates, dims) {
            (Some(c), Some((nx, nu))) => {
                let mut seen = c.clone();
                seen.sort_unstable();
                seen.dedup();
                if c.is_empty() || seen.len() != c.len() || c.iter().any(|&i| i >= nx + nu) {
                    v.push(format!(
                        "design.coordinates must be distinct indices below {}",
                        nx + nu
                    ));
                }
                c.len()
            }
            (Some(c), None) => c.len(),
            (None, Some((nx, nu))) => nx + nu,
            (None, None) => d.lower.len(),
        };
        if d.lower.len() != dim || d.upper.len() != dim {
            v.push(format!(
                "design.lower and design.upper must hold {dim} values"
            ));
        } else if let Err(e) = RegionOfInterest::new(d.lower.clone(), d.upper.clone()) {
            v.push(format!("design region: {e}"));
        }
        if d.anchor_grids.is_empty() {
            v.push("design.anchor_grids must list at least one grid".into());
        }
        for (i, g) in d.anchor_grids.iter().enumerate() {
            if g.len() != dim || g.iter().any(|&c| c < 2) {
                v.push(format!(
                    "design.anchor_grids[{i}] must hold {dim} counts of at least 2"
                ));
            }
        }
        if d.metric_weight.len() != dim || MetricWeight::new(d.metric_weight.clone()).is_err() {
            v.push(format!(
                "design.metric_weight must hold {dim} positive values"
            ));
        }
        if d.eval_points < 2 {
            v.push("design.eval_points must be at least 2".into());
        }

        let k = &self.kernel;
        if k.lengthscales.len() != dim {
            v.push(format!("kernel.lengthscales must hold {dim} values"));
        }
        if let Err(e) = KernelConfig::new(
            k.signal_variance,
            k.lengthscales.clone(),
            k.jitter.unwrap_or(0.0),
        ) {
            v.push(format!("kernel: {e}"));
        }
        v.extend(self.optimizer.violations());
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

    /// The config with every default spelled out, as echoed in reports.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let Some((nx, nu)) = self.dims() {
            c.initial_state.get_or_insert_with(|| vec![0.0; nx]);
            c.initial_input.get_or_insert_with(|| vec![0.0; nu]);
            c.design
                .coordinates
                .get_or_insert_with(|| (0..nx + nu).collect());
        }
        c.kernel
            .jitter
            .get_or_insert(DEFAULT_RELATIVE_JITTER * self.kernel.signal_variance);
        c
    }

    pub fn build_system(&self) -> Result<Arc<dyn DiscreteSystem>> {
        Ok(match &self.system {
            SystemSpec::Lti {
                a,
                b,
                sample_time,
                continuous,
            } => {
                let to_matrix = |rows: &Vec<Vec<f64>>| {
                    let cols = rows.first().map_or(0, |r| r.len());
                    DMatrix::from_row_iterator(rows.len(), cols, rows.iter().flatten().copied())
                };
                let (am, bm) = (to_matrix(a), to_matrix(b));
                Arc::new(if *continuous {
                    LinearSystem::from_continuous(&self.name, &am, &bm, *sample_time)?
                } else {
                    LinearSystem::new(self.name.clone(), am, bm, *sample_time)?
                })
            }
            SystemSpec::Msd { dt, params } => Arc::new(Rk4System::new(
                self.name.clone(),
                MassSpringDamper::new(*params)?,
                *dt,
            )?),
        })
    }

    pub fn region(&self) -> Result<RegionOfInterest> {
        RegionOfInterest::new(self.design.lower.clone(), self.design.upper.clone())
    }

    pub fn metric(&self) -> Result<MetricWeight> {
        MetricWeight::new(self.design.metric_weight.clone())
    }

    pub fn kernel_config(&self) -> Result<KernelConfig> {
        let k = &self.kernel;
        KernelConfig::new(
            k.signal_variance,
            k.lengthscales.clone(),
            k.jitter
                .unwrap_or(DEFAULT_RELATIVE_JITTER * k.signal_variance),
        )
    }

    /// The signal family with all-zero parameters and the configured
    /// bounds.
    pub fn template_signal(&self) -> Result<InputSignal> {
        let n = self.data_length;
        let nu = self.dims().map_or(1, |d| d.1);
        let uniform = |len: usize, lo: Option<f64>, hi: Option<f64>| Bounds {
            lower: vec![lo.unwrap_or(f64::NEG_INFINITY); len],
            upper: vec![hi.unwrap_or(f64::INFINITY); len],
        };
        match &self.input {
            InputSpec::FreeForm { lower, upper, .. } => {
                let family = InputFamily::FreeForm {
                    horizon: n,
                    channels: nu,
                };
                let len = family.n_theta();
                InputSignal::new(family, vec![0.0; len], Some(uniform(len, *lower, *upper)))
            }
            InputSpec::Multisine {
                first_bin,
                last_bin,
                period,
                amplitude_bounds,
                phase_bounds,
                shared_amplitude,
                ..
            } => {
                let bins: Vec<usize> = (*first_bin..=*last_bin).collect();
                let nf = bins.len();
                let a = uniform(
                    nf,
                    amplitude_bounds.map(|b| b[0]),
                    amplitude_bounds.map(|b| b[1]),
                );
                let p = uniform(nf, phase_bounds.map(|b| b[0]), phase_bounds.map(|b| b[1]));
                let bounds = Bounds {
                    lower: a.lower.into_iter().chain(p.lower).collect(),
                    upper: a.upper.into_iter().chain(p.upper).collect(),
                };
                InputSignal::new(
                    InputFamily::Multisine {
                        bins,
                        base_fraction: 1.0 / *period as f64,
                        horizon: n,
                        shared_amplitude: *shared_amplitude,
                    },
                    vec![0.0; 2 * nf],
                    Some(bounds),
                )
            }
            InputSpec::PiecewiseConstant {
                switching,
                lower,
                upper,
                ..
            } => {
                let len = switching.len().saturating_sub(1);
                InputSignal::new(
                    InputFamily::PiecewiseConstant {
                        switching: switching.clone(),
                        horizon: n,
                    },
                    vec![0.0; len],
                    Some(uniform(len, *lower, *upper)),
                )
            }
        }
    }

    /// Draws an initial decision vector for `template`, projected onto the
    /// bounds.
    pub fn draw_initial<R: Rng>(&self, template: &InputSignal, rng: &mut R) -> Result<Vec<f64>> {
        let theta = match &self.input {
            InputSpec::FreeForm { init, .. } | InputSpec::PiecewiseConstant { init, .. } => {
                (0..template.n_theta()).map(|_| init.sample(rng)).collect()
            }
            InputSpec::Multisine {
                amplitude_init,
                phase_init,
                shared_amplitude,
                ..
            } => {
                let nf = template.n_theta() / 2;
                let amps: Vec<f64> = if *shared_amplitude {
                    vec![amplitude_init.sample(rng); nf]
                } else {
                    (0..nf).map(|_| amplitude_init.sample(rng)).collect()
                };
                let phases = (0..nf).map(|_| phase_init.sample(rng));
                amps.into_iter().chain(phases).collect()
            }
        };
        Ok(template.with_theta(theta)?.project().to_decision())
    }

    /// Design problem and anchor set for anchor grid `grid`.
    pub fn problem(&self, grid: usize) -> Result<DesignProblem> {
        let resolved = self.resolved();
        let counts = self.design.anchor_grids.get(grid).ok_or_else(|| {
            Error::invalid(format!(
                "anchor grid {grid} does not exist ({} configured)",
                self.design.anchor_grids.len()
            ))
        })?;
        let anchors = uniform_anchor_grid(
            &self.region()?,
            counts,
            &self.metric()?,
            self.design.eval_points,
        )?;
        let system = self.build_system()?;
        DesignProblem::builder(system, self.template_signal()?, self.data_length)
            .initial_state(resolved.initial_state.unwrap_or_default())
            .initial_input(resolved.initial_input.unwrap_or_default())
            .anchors(anchors)
            .kernel(self.kernel_config()?)
            .coordinates(resolved.design.coordinates.unwrap_or_default())
            .build()
    }
}

/// Generator for run `run` of anchor grid `grid`: ChaCha8 keyed by the
/// master seed, on stream `grid · 2³² + run`.
pub fn run_rng(seed: u64, grid: usize, run: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((grid as u64) << 32) | run as u64);
    rng
}

/// Five-number summary plus mean. Quartiles interpolate linearly between
/// order statistics at position `p · (n − 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
        };
        Some(Stats {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub initial_cost: Option<f64>,
    pub final_cost: Option<f64>,
    pub initial_rho: Option<f64>,
    pub final_rho: Option<f64>,
    /// Centre of the largest empty ball of the optimized dataset.
    pub final_ball_center: Option<Vec<f64>>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub completed: usize,
    pub diverged: usize,
    /// Completed runs with final `ρ` strictly below the anchor `ε`.
    pub below_epsilon: usize,
    pub initial_rho: Option<Stats>,
    pub final_rho: Option<Stats>,
    pub final_cost: Option<Stats>,
}

impl Summary {
    pub fn of(runs: &[RunRecord], epsilon: f64) -> Summary {
        let finals: Vec<f64> = runs.iter().filter_map(|r| r.final_rho).collect();
        let initials: Vec<f64> = runs.iter().filter_map(|r| r.initial_rho).collect();
        let costs: Vec<f64> = runs.iter().filter_map(|r| r.final_cost).collect();
        Summary {
            completed: finals.len(),
            diverged: runs.len() - finals.len(),
            below_epsilon: finals.iter().filter(|r| **r < epsilon).count(),
            initial_rho: Stats::of(&initials),
            final_rho: Stats::of(&finals),
            final_cost: Stats::of(&costs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub anchor_counts: Vec<usize>,
    pub anchors: usize,
    pub epsilon: f64,
    pub runs: Vec<RunRecord>,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advisory: Option<String>,
    pub groups: Vec<GroupReport>,
}

impl ExperimentReport {
    /// Whether every run of every group diverged (and there was at least
    /// one run).
    pub fn all_diverged(&self) -> bool {
        let total: usize = self.groups.iter().map(|g| g.runs.len()).sum();
        total > 0
            && self
                .groups
                .iter()
                .all(|g| g.runs.iter().all(|r| r.status == Status::Diverged))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Writes `anchors,epsilon,min,q1,median,q3,max` rows of final `ρ`.
    pub fn write_boxplot_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record(["anchors", "epsilon", "min", "q1", "median", "q3", "max"])
            .map_err(err)?;
        for g in &self.groups {
            let Some(s) = &g.summary.final_rho else {
                continue;
            };
            w.write_record(
                [
                    g.anchors as f64,
                    g.epsilon,
                    s.min,
                    s.q1,
                    s.median,
                    s.q3,
                    s.max,
                ]
                .iter()
                .map(|v| v.to_string()),
            )
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; 0 and 1 both mean sequential.
    pub jobs: usize,
    /// Where to write report and per-run files; nothing is written when
    /// `None`.
    pub output_dir: Option<PathBuf>,
}

fn write_file<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(BufWriter<fs::File>) -> Result<()>,
{
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    body(BufWriter::new(f))
}

fn is_divergence(e: &Error) -> bool {
    matches!(
        e,
        Error::TrajectoryDiverged { .. }
            | Error::IntegrationDiverged
            | Error::IllConditionedGram { .. }
    )
}

struct GroupSetup {
    problem: DesignProblem,
    region: RegionOfInterest,
    metric: MetricWeight,
    dir: Option<PathBuf>,
}

fn execute_run(
    cfg: &ExperimentConfig,
    setup: &GroupSetup,
    grid: usize,
    run: usize,
) -> Result<RunRecord> {
    let problem = &setup.problem;
    let eval = cfg.design.eval_points;
    let mut rng = run_rng(cfg.seed, grid, run);
    let theta0 = cfg.draw_initial(problem.signal(), &mut rng)?;
    let mut record = RunRecord {
        run,
        status: Status::Diverged,
        failure: None,
        initial_cost: None,
        final_cost: None,
        initial_rho: None,
        final_rho: None,
        final_ball_center: None,
        iterations: 0,
    };
    let rho = |points: &Points| largest_empty_ball(points, &setup.region, &setup.metric, eval);

    match cost_w(&theta0, problem) {
        Ok((c, data)) => {
            record.initial_cost = Some(c);
            record.initial_rho = Some(rho(&data.points)?.1);
        }
        Err(e) if is_divergence(&e) => {
            record.failure = Some(e.to_string());
            return Ok(record);
        }
        Err(e) => return Err(e),
    }
    if let Some(dir) = &setup.dir {
        let r = problem.rollout(&theta0, false)?;
        write_file(
            &dir.join(format!("run_{run}_initial_trajectory.csv")),
            |w| r.trajectory.write_csv(w),
        )?;
    }

    let result = optimize(&theta0, problem, &cfg.optimizer)?;
    record.status = result.trace.status;
    record.failure = result.trace.failure.clone();
    record.iterations = result.trace.iterations();
    if result.cost.is_finite() {
        let r = problem.rollout(&result.theta_hat, false)?;
        let data = problem.design_dataset(&r)?;
        let (center, radius) = rho(&data.points)?;
        record.final_cost = Some(result.cost);
        record.final_rho = Some(radius);
        record.final_ball_center = Some(center);
        if let Some(dir) = &setup.dir {
            write_file(&dir.join(format!("run_{run}_trajectory.csv")), |w| {
                r.trajectory.write_csv(w)
            })?;
            let theta = problem.signal_for(&result.theta_hat)?;
            write_file(&dir.join(format!("theta_hat_{run}.csv")), |w| {
                write_theta_csv(theta.theta(), w)
            })?;
        }
    }
    if let Some(dir) = &setup.dir {
        write_file(&dir.join(format!("run_{run}_trace.csv")), |w| {
            result.trace.write_csv(w)
        })?;
    }
    Ok(record)
}

/// Runs every Monte-Carlo realization for every anchor grid.
///
/// Runs are independent: run `i` of grid `g` draws its initial parameters
/// from [`run_rng`]`(seed, g, i)` only, so results do not depend on the
/// number of runs, the thread count or the execution order. Aggregation is
/// by index.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport> {
    cfg.validate()?;
    let resolved = cfg.resolved();
    let mut report = ExperimentReport {
        config: resolved.clone(),
        advisory: None,
        groups: Vec::new(),
    };
    if let Some(dir) = &opts.output_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    if cfg.runs > 0 {
        let region = resolved.region()?;
        let metric = resolved.metric()?;
        let mut setups = Vec::new();
        for (g, counts) in resolved.design.anchor_grids.iter().enumerate() {
            let problem = resolved.problem(g)?;
            let m = problem.anchors().len();
            if let Some(td) = resolved.reachability_horizon {
                if let Some(msg) =
                    reachability_advisory(cfg.data_length, m, td).message(cfg.data_length)
                {
                    let line = format!("M = {m}: {msg}");
                    report.advisory = Some(match report.advisory.take() {
                        Some(prev) => format!("{prev}; {line}"),
                        None => line,
                    });
                }
            }
            let dir = match &opts.output_dir {
                Some(root) => {
                    let d = root.join(format!("m{m}"));
                    fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
                    write_file(&d.join("anchors.csv"), |w| {
                        write_points_csv(&problem.anchors().points, w)
                    })?;
                    Some(d)
                }
                None => None,
            };
            log::info!(
                "grid {counts:?}: M = {m}, epsilon = {:.4}",
                problem.anchors().epsilon
            );
            setups.push(GroupSetup {
                problem,
                region: region.clone(),
                metric: metric.clone(),
                dir,
            });
        }

        let tasks: Vec<(usize, usize)> = (0..setups.len())
            .flat_map(|g| (0..cfg.runs).map(move |r| (g, r)))
            .collect();
        type Slot = Option<Result<(RunRecord, f64)>>;
        let slots: Mutex<Vec<Slot>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let worker = || loop {
            let i = next.fetch_add(1, Ordering::SeqCst);
            let Some(&(g, r)) = tasks.get(i) else {
                break;
            };
            let start = Instant::now();
            let out = execute_run(&resolved, &setups[g], g, r)
                .map(|rec| (rec, start.elapsed().as_secs_f64()));
            if let Ok((rec, secs)) = &out {
                log::info!(
                    "grid {g} run {r}: {:?}, rho {:?} -> {:?} in {secs:.1}s",
                    rec.status,
                    rec.initial_rho,
                    rec.final_rho
                );
            }
            slots.lock().expect("no worker panicked")[i] = Some(out);
        };
        let jobs = opts.jobs.max(1).min(tasks.len());
        if jobs <= 1 {
            worker();
        } else {
            std::thread::scope(|s| {
                for _ in 0..jobs {
                    s.spawn(worker);
                }
            });
        }
        let results = slots.into_inner().expect("no worker panicked");

        let mut timing = Vec::new();
        let mut per_group: Vec<Vec<RunRecord>> = vec![Vec::new(); setups.len()];
        for (slot, &(g, _)) in results.into_iter().zip(&tasks) {
            let (rec, secs) = slot.expect("every task ran")?;
            timing.push((g, rec.run, secs));
            per_group[g].push(rec);
        }
        for ((setup, runs), counts) in setups
            .iter()
            .zip(per_group)
            .zip(&resolved.design.anchor_grids)
        {
            let epsilon = setup.problem.anchors().epsilon;
            report.groups.push(GroupReport {
                anchor_counts: counts.clone(),
                anchors: setup.problem.anchors().len(),
                epsilon,
                summary: Summary::of(&runs, epsilon),
                runs,
            });
        }
        if let Some(dir) = &opts.output_dir {
            write_file(&dir.join("timing.csv"), |out| {
                let mut w = csv::Writer::from_writer(out);
                let err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
                w.write_record(["anchors", "run", "seconds"]).map_err(err)?;
                for (g, r, s) in &timing {
                    let m = report.groups[*g].anchors;
                    w.write_record([m.to_string(), r.to_string(), s.to_string()])
                        .map_err(err)?;
                }
                w.flush().map_err(|e| Error::io("<csv>", e))?;
                Ok(())
            })?;
        }
    }

    if let Some(dir) = &opts.output_dir {
        let json = report.to_json()?;
        let path = dir.join("report.json");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        write_file(&dir.join("boxplot.csv"), |w| report.write_boxplot_csv(w))?;
    }
    Ok(report)
}

/// Filling distance of a stored dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoReport {
    pub points: usize,
    pub rho: f64,
    pub center: Vec<f64>,
}

/// Loads points from `path` (optionally keeping only `columns`) and
/// measures their filling distance.
pub fn evaluate_dataset(
    path: &Path,
    columns: Option<&[usize]>,
    region: &RegionOfInterest,
    weight: &MetricWeight,
    eval_points: usize,
) -> Result<RhoReport> {
    let mut points = load_points_csv(path)?;
    if let Some(c) = columns {
        points = points.select(c)?;
    }
    let (center, rho) = largest_empty_ball(&points, region, weight, eval_points)?;
    Ok(RhoReport {
        points: points.len(),
        rho,
        center,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub amplitude: f64,
    pub rho: f64,
    pub center: Vec<f64>,
}

/// Filling distance of the Schroeder-phase multisine with the configured
/// bins and a shared amplitude. Without `amplitude`, the mean of the
/// configured amplitude initialization is used.
pub fn schroeder_baseline(
    cfg: &ExperimentConfig,
    amplitude: Option<f64>,
) -> Result<BaselineReport> {
    cfg.validate()?;
    let InputSpec::Multisine {
        first_bin,
        last_bin,
        period,
        amplitude_init,
        ..
    } = &cfg.input
    else {
        return Err(Error::invalid(
            "the Schroeder baseline needs a multisine input section",
        ));
    };
    let amplitude = amplitude.unwrap_or(match *amplitude_init {
        Distribution::Constant { value } => value,
        Distribution::Normal { mean, .. } => mean,
        Distribution::Uniform { low, high } => 0.5 * (low + high),
    });
    let signal = schroeder_multisine(
        amplitude,
        (*first_bin..=*last_bin).collect(),
        1.0 / *period as f64,
        cfg.data_length,
    )?;
    let resolved = cfg.resolved();
    let system = cfg.build_system()?;
    let r = rollout(
        system.as_ref(),
        &signal,
        resolved.initial_state.as_deref().unwrap_or_default(),
        resolved.initial_input.as_deref().unwrap_or_default(),
        cfg.data_length,
        false,
    )?;
    let coords = resolved.design.coordinates.unwrap_or_default();
    let points = r.dataset.points.select(&coords)?;
    let (center, rho) = largest_empty_ball(
        &points,
        &cfg.region()?,
        &cfg.metric()?,
        cfg.design.eval_points,
    )?;
    Ok(BaselineReport {
        amplitude,
        rho,
        center,
    })
}

/// Analytic-versus-finite-difference discrepancy at `samples` initial draws
/// for anchor grid `grid`; sample `i` uses the generator of run `i`.
pub fn gradcheck_samples(cfg: &ExperimentConfig, grid: usize, samples: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    let problem = cfg.problem(grid)?;
    (0..samples)
        .map(|i| {
            let mut rng = run_rng(cfg.seed, grid, i);
            let theta = cfg.draw_initial(problem.signal(), &mut rng)?;
            gradient_check(&theta, &problem)
        })
        .collect()
}

/// Anchor set of grid `grid` without building the rest of the problem.
pub fn anchor_set(cfg: &ExperimentConfig, grid: usize) -> Result<AnchorSet> {
    let counts = cfg
        .design
        .anchor_grids
        .get(grid)
        .ok_or_else(|| Error::invalid(format!("anchor grid {grid} does not exist")))?;
    uniform_anchor_grid(
        &cfg.region()?,
        counts,
        &cfg.metric()?,
        cfg.design.eval_points,
    )
}
