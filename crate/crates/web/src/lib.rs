//! Browser demo: the two-state linear example on [-2, 2]², driven from a
//! static page.

use wasm_bindgen::prelude::*;

use spacefill::anchors::{largest_empty_ball, DEFAULT_EVAL_POINTS};
use spacefill::experiment::{run_rng, ExperimentConfig};
use spacefill::gp::GpPosterior;
use spacefill::optimizer::optimize;
use spacefill::{KernelConfig, MetricWeight, Points, RegionOfInterest, Result};

const PRESET: &str = include_str!("../../../presets/lti_fig1.toml");
const HALF_WIDTH: f64 = 2.0;

/// Initial and optimized state clouds for one run.
#[wasm_bindgen]
pub struct Design {
    initial: Vec<f64>,
    optimized: Vec<f64>,
    anchors: Vec<f64>,
    rho_initial: f64,
    rho_optimized: f64,
    epsilon: f64,
    iterations: usize,
}

#[wasm_bindgen]
impl Design {
    /// Flat `x1, x2` pairs before optimization.
    #[wasm_bindgen(getter)]
    pub fn initial(&self) -> Vec<f64> {
        self.initial.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn optimized(&self) -> Vec<f64> {
        self.optimized.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn anchors(&self) -> Vec<f64> {
        self.anchors.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn rho_initial(&self) -> f64 {
        self.rho_initial
    }

    #[wasm_bindgen(getter)]
    pub fn rho_optimized(&self) -> f64 {
        self.rho_optimized
    }

    #[wasm_bindgen(getter)]
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    #[wasm_bindgen(getter)]
    pub fn iterations(&self) -> usize {
        self.iterations
    }
}

fn preset() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(PRESET, "lti_fig1.toml".as_ref())
        .expect("bundled preset parses")
}

fn square() -> RegionOfInterest {
    RegionOfInterest::symmetric(&[HALF_WIDTH, HALF_WIDTH]).expect("valid square")
}

fn to_points(flat: &[f64]) -> Result<Points> {
    Points::from_flat(2, flat.to_vec())
}

/// Optimizes one free-form input for `per_dim`² anchors.
pub fn run_design(
    per_dim: usize,
    data_length: usize,
    lengthscale: f64,
    seed: u64,
    max_iterations: usize,
) -> Result<Design> {
    let mut cfg = preset();
    cfg.data_length = data_length;
    cfg.seed = seed;
    cfg.design.anchor_grids = vec![vec![per_dim, per_dim]];
    cfg.kernel.lengthscales = vec![lengthscale; 2];
    cfg.optimizer.max_iterations = max_iterations;
    cfg.validate()?;

    let problem = cfg.problem(0)?;
    let theta0 = cfg.draw_initial(problem.signal(), &mut run_rng(seed, 0, 0))?;
    let result = optimize(&theta0, &problem, &cfg.optimizer)?;
    let region = cfg.region()?;
    let q = cfg.metric()?;
    let eval = cfg.design.eval_points;
    let cloud = |theta: &[f64]| -> Result<(Vec<f64>, f64)> {
        let data = problem.design_dataset(&problem.rollout(theta, false)?)?;
        let rho = largest_empty_ball(&data.points, &region, &q, eval)?.1;
        Ok((data.points.coords().to_vec(), rho))
    };
    let (initial, rho_initial) = cloud(&theta0)?;
    let (optimized, rho_optimized) = cloud(&result.theta_hat)?;
    Ok(Design {
        initial,
        optimized,
        anchors: problem.anchors().points.coords().to_vec(),
        rho_initial,
        rho_optimized,
        epsilon: problem.anchors().epsilon,
        iterations: result.trace.iterations(),
    })
}

/// Posterior variance on a `resolution`² grid over the square, row by row
/// from the bottom, for data given as flat pairs.
pub fn variance_grid(points: &[f64], lengthscale: f64, resolution: usize) -> Result<Vec<f64>> {
    let data = to_points(points)?;
    let cfg = KernelConfig::with_default_jitter(1.0, vec![lengthscale; 2])?;
    let gp = GpPosterior::fit(&data, &cfg)?;
    let step = 2.0 * HALF_WIDTH / (resolution.max(2) - 1) as f64;
    let mut out = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        for j in 0..resolution {
            let q = [-HALF_WIDTH + j as f64 * step, -HALF_WIDTH + i as f64 * step];
            out.push(gp.variance(&q)?);
        }
    }
    Ok(out)
}

/// `[rho, center_x1, center_x2]` of flat pairs over the square.
pub fn empty_ball(points: &[f64]) -> Result<Vec<f64>> {
    let (c, r) = largest_empty_ball(
        &to_points(points)?,
        &square(),
        &MetricWeight::identity(2),
        DEFAULT_EVAL_POINTS,
    )?;
    Ok(vec![r, c[0], c[1]])
}

fn js(e: spacefill::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn design(
    per_dim: usize,
    data_length: usize,
    lengthscale: f64,
    seed: u64,
    max_iterations: usize,
) -> Result<Design, JsError> {
    run_design(per_dim, data_length, lengthscale, seed, max_iterations).map_err(js)
}

#[wasm_bindgen]
pub fn variance_field(
    points: &[f64],
    lengthscale: f64,
    resolution: usize,
) -> Result<Vec<f64>, JsError> {
    variance_grid(points, lengthscale, resolution).map_err(js)
}

#[wasm_bindgen]
pub fn filling_distance(points: &[f64]) -> Result<Vec<f64>, JsError> {
    empty_ball(points).map_err(js)
}
