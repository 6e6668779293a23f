//! Parameterized input signals `u(k, θ)`.
//!
//! Three families are provided:
//!
//! * free-form: one parameter per input channel and time step, `u(k) = θ_k`;
//! * multisine: `Σ_l A_l sin(2π l (f₀/f_s) k + φ_l)` over a set of excited
//!   bins, with `θ = (A_0..A_{N_f-1}, φ_0..φ_{N_f-1})`;
//! * piecewise constant: amplitude levels held between fixed integer
//!   switching instants. Only the levels are parameters.
//!
//! All families produce a single input channel except free-form, which can
//! drive several.
//!
//! The optimizer works on a *decision vector*. It equals `θ` unless the
//! multisine amplitudes are tied, in which case the shared amplitude is one
//! coordinate followed by the phases.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputFamily {
    /// `u(k) = θ_k` for `k = 1..=horizon`.
    FreeForm { horizon: usize, channels: usize },
    /// Excited bins `l` at frequency `l · f₀`, evaluated for `k = 0..=horizon`.
    Multisine {
        bins: Vec<usize>,
        /// `f₀ / f_s`.
        base_fraction: f64,
        horizon: usize,
        #[serde(default)]
        shared_amplitude: bool,
    },
    /// Levels held on `[p_l, p_{l+1})`; `switching` holds `p_0 < .. < p_{N_p}`.
    PiecewiseConstant {
        switching: Vec<usize>,
        horizon: usize,
    },
}

impl InputFamily {
    pub fn n_theta(&self) -> usize {
        match self {
            InputFamily::FreeForm { horizon, channels } => horizon * channels,
            InputFamily::Multisine { bins, .. } => 2 * bins.len(),
            InputFamily::PiecewiseConstant { switching, .. } => switching.len().saturating_sub(1),
        }
    }

    pub fn n_u(&self) -> usize {
        match self {
            InputFamily::FreeForm { channels, .. } => *channels,
            _ => 1,
        }
    }

    /// First and last admissible time index.
    pub fn horizon(&self) -> (usize, usize) {
        match self {
            InputFamily::FreeForm { horizon, .. } => (1, *horizon),
            InputFamily::Multisine { horizon, .. } => (0, *horizon),
            InputFamily::PiecewiseConstant { horizon, .. } => (0, *horizon),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            InputFamily::FreeForm { horizon, channels } => {
                if *horizon == 0 || *channels == 0 {
                    return Err(Error::invalid(
                        "free-form input needs a positive horizon and channel count",
                    ));
                }
            }
            InputFamily::Multisine {
                bins,
                base_fraction,
                ..
            } => {
                if bins.is_empty() {
                    return Err(Error::invalid("multisine needs at least one excited bin"));
                }
                if !(base_fraction.is_finite() && *base_fraction > 0.0) {
                    return Err(Error::invalid("multisine base fraction must be positive"));
                }
            }
            InputFamily::PiecewiseConstant { switching, .. } => {
                if switching.len() < 2 {
                    return Err(Error::invalid(
                        "piecewise-constant input needs at least two switching instants",
                    ));
                }
                if switching.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::invalid("switching instants must increase strictly"));
                }
            }
        }
        Ok(())
    }
}

/// Box constraints `Θ` on the full parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Bounds {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(t, (lo, hi))| *lo <= *t && *t <= *hi)
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::invalid(format!(
                "bounds have {}/{} entries for {n} parameters",
                self.lower.len(),
                self.upper.len()
            )));
        }
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(Error::invalid(format!("bound {i} is empty: [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// A member of a parameterized signal family.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSignal {
    family: InputFamily,
    theta: Vec<f64>,
    bounds: Bounds,
}

impl InputSignal {
    pub fn new(family: InputFamily, theta: Vec<f64>, bounds: Option<Bounds>) -> Result<Self> {
        family.validate()?;
        let n = family.n_theta();
        if theta.len() != n {
            return Err(Error::invalid(format!(
                "family expects {n} parameters, got {}",
                theta.len()
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("non-finite signal parameter"));
        }
        let bounds = bounds.unwrap_or_else(|| Bounds::unbounded(n));
        bounds.validate(n)?;
        Ok(InputSignal {
            family,
            theta,
            bounds,
        })
    }

    pub fn free_form(theta: Vec<f64>) -> Result<Self> {
        let horizon = theta.len();
        Self::new(
            InputFamily::FreeForm {
                horizon,
                channels: 1,
            },
            theta,
            None,
        )
    }

    pub fn family(&self) -> &InputFamily {
        &self.family
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn n_theta(&self) -> usize {
        self.theta.len()
    }

    pub fn n_u(&self) -> usize {
        self.family.n_u()
    }

    pub fn horizon(&self) -> (usize, usize) {
        self.family.horizon()
    }

    /// Same family and bounds, new parameters.
    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        Self::new(self.family.clone(), theta, Some(self.bounds.clone()))
    }

    /// Counts of amplitude levels and switching instants of a
    /// piecewise-constant signal. Only the levels are optimized.
    pub fn piecewise_counts(&self) -> Option<(usize, usize)> {
        match &self.family {
            InputFamily::PiecewiseConstant { switching, .. } => {
                Some((switching.len() - 1, switching.len()))
            }
            _ => None,
        }
    }

    fn check_k(&self, k: usize) -> Result<()> {
        let (first, last) = self.horizon();
        if k < first || k > last {
            return Err(Error::OutOfRange { k, first, last });
        }
        Ok(())
    }

    fn multisine_arg(bin: usize, base_fraction: f64, k: usize) -> f64 {
        2.0 * PI * bin as f64 * base_fraction * k as f64
    }

    /// `u(k, θ)`.
    pub fn evaluate(&self, k: usize) -> Result<Vec<f64>> {
        self.check_k(k)?;
        Ok(match &self.family {
            InputFamily::FreeForm { channels, .. } => {
                self.theta[(k - 1) * channels..k * channels].to_vec()
            }
            InputFamily::Multisine {
                bins,
                base_fraction,
                ..
            } => {
                let nf = bins.len();
                let (amps, phases) = self.theta.split_at(nf);
                let u = bins
                    .iter()
                    .zip(amps.iter().zip(phases))
                    .map(|(&l, (a, p))| a * (Self::multisine_arg(l, *base_fraction, k) + p).sin())
                    .sum();
                vec![u]
            }
            InputFamily::PiecewiseConstant { switching, .. } => {
                let level = switching
                    .windows(2)
                    .position(|w| w[0] <= k && k < w[1])
                    .map_or(0.0, |l| self.theta[l]);
                vec![level]
            }
        })
    }

    /// `∂u(k, θ)/∂θ` as an `n_u × n_θ` matrix.
    pub fn theta_jacobian(&self, k: usize) -> Result<DMatrix<f64>> {
        self.check_k(k)?;
        let mut jac = DMatrix::zeros(self.n_u(), self.n_theta());
        match &self.family {
            InputFamily::FreeForm { channels, .. } => {
                for c in 0..*channels {
                    jac[(c, (k - 1) * channels + c)] = 1.0;
                }
            }
            InputFamily::Multisine {
                bins,
                base_fraction,
                ..
            } => {
                let nf = bins.len();
                for (i, &l) in bins.iter().enumerate() {
                    let arg = Self::multisine_arg(l, *base_fraction, k) + self.theta[nf + i];
                    jac[(0, i)] = arg.sin();
                    jac[(0, nf + i)] = self.theta[i] * arg.cos();
                }
            }
            InputFamily::PiecewiseConstant { switching, .. } => {
                if let Some(l) = switching.windows(2).position(|w| w[0] <= k && k < w[1]) {
                    jac[(0, l)] = 1.0;
                }
            }
        }
        Ok(jac)
    }

    fn tied_amplitudes(&self) -> Option<usize> {
        match &self.family {
            InputFamily::Multisine {
                bins,
                shared_amplitude: true,
                ..
            } => Some(bins.len()),
            _ => None,
        }
    }

    /// Projection onto `Θ`: tied amplitudes are replaced by their mean, then
    /// every coordinate is clipped to its bounds.
    pub fn project(&self) -> InputSignal {
        let mut theta = self.theta.clone();
        if let Some(nf) = self.tied_amplitudes() {
            let mean = theta[..nf].iter().sum::<f64>() / nf as f64;
            theta[..nf].fill(mean);
        }
        for (t, (lo, hi)) in theta
            .iter_mut()
            .zip(self.bounds.lower.iter().zip(&self.bounds.upper))
        {
            *t = t.clamp(*lo, *hi);
        }
        InputSignal {
            family: self.family.clone(),
            theta,
            bounds: self.bounds.clone(),
        }
    }

    pub fn decision_len(&self) -> usize {
        match self.tied_amplitudes() {
            Some(nf) => 1 + nf,
            None => self.n_theta(),
        }
    }

    pub fn to_decision(&self) -> Vec<f64> {
        match self.tied_amplitudes() {
            Some(nf) => {
                let mean = self.theta[..nf].iter().sum::<f64>() / nf as f64;
                std::iter::once(mean)
                    .chain(self.theta[nf..].iter().copied())
                    .collect()
            }
            None => self.theta.clone(),
        }
    }

    /// Expands a decision vector into a full parameter vector.
    pub fn theta_from_decision(&self, decision: &[f64]) -> Result<Vec<f64>> {
        if decision.len() != self.decision_len() {
            return Err(Error::invalid(format!(
                "decision vector has {} entries, expected {}",
                decision.len(),
                self.decision_len()
            )));
        }
        Ok(match self.tied_amplitudes() {
            Some(nf) => std::iter::repeat_n(decision[0], nf)
                .chain(decision[1..].iter().copied())
                .collect(),
            None => decision.to_vec(),
        })
    }

    pub fn from_decision(&self, decision: &[f64]) -> Result<InputSignal> {
        self.with_theta(self.theta_from_decision(decision)?)
    }

    /// Chain rule from `∂W/∂θ` to the decision vector: a tied coordinate
    /// receives the sum of its members' gradients.
    pub fn reduce_gradient(&self, grad: &[f64]) -> Vec<f64> {
        match self.tied_amplitudes() {
            Some(nf) => std::iter::once(grad[..nf].iter().sum())
                .chain(grad[nf..].iter().copied())
                .collect(),
            None => grad.to_vec(),
        }
    }

    /// Writes `k, u_1..u_nu` rows for every admissible `k`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["k".to_string()];
        header.extend((1..=self.n_u()).map(|c| format!("u{c}")));
        w.write_record(&header).map_err(csv_err)?;
        let (first, last) = self.horizon();
        for k in first..=last {
            let mut row = vec![k.to_string()];
            row.extend(self.evaluate(k)?.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

/// Schroeder phases `φ_l = −π l (l−1) / N_f`, `l = 0..N_f`.
pub fn schroeder_phases(n_f: usize) -> Vec<f64> {
    (0..n_f)
        .map(|l| -PI * (l * l.saturating_sub(1)) as f64 / n_f as f64)
        .collect()
}

/// Multisine with one shared amplitude over `bins` and Schroeder phases.
pub fn schroeder_multisine(
    amplitude: f64,
    bins: Vec<usize>,
    base_fraction: f64,
    horizon: usize,
) -> Result<InputSignal> {
    let n_f = bins.len();
    if n_f == 0 {
        return Err(Error::invalid("Schroeder multisine needs n_f >= 1"));
    }
    if !amplitude.is_finite() {
        return Err(Error::invalid("amplitude must be finite"));
    }
    let mut theta = vec![amplitude; n_f];
    theta.extend(schroeder_phases(n_f));
    InputSignal::new(
        InputFamily::Multisine {
            bins,
            base_fraction,
            horizon,
            shared_amplitude: true,
        },
        theta,
        None,
    )
}
