//! SEARD kernel, Gram matrices and the GP posterior quantities behind the
//! space-filling cost.
//!
//! Every inverse of the Gram matrix is applied through its Cholesky factor.
//! A small diagonal jitter keeps the factorization well defined when
//! trajectory points coincide; a zero jitter is accepted and reported as
//! [`Error::IllConditionedGram`] when the factorization breaks down.

use nalgebra::{DMatrix, DVector};

use crate::data::{AnchorSet, Points};
use crate::error::{Error, Result};
use crate::linalg::{lower_outer, CholeskyFactor};

/// Jitter added to the Gram diagonal, relative to the signal variance.
pub const DEFAULT_RELATIVE_JITTER: f64 = 1e-8;

/// Hyperparameters of the squared-exponential ARD kernel.
///
/// `lengthscales` holds the diagonal of `Λ^{1/2}`, one entry per coordinate
/// of the joint space.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelConfig {
    signal_variance: f64,
    lengthscales: Vec<f64>,
    jitter: f64,
    inv_sq: Vec<f64>,
}

impl KernelConfig {
    pub fn new(signal_variance: f64, lengthscales: Vec<f64>, jitter: f64) -> Result<Self> {
        if !(signal_variance.is_finite() && signal_variance > 0.0) {
            return Err(Error::invalid(format!(
                "signal variance must be positive, got {signal_variance}"
            )));
        }
        if lengthscales.is_empty() {
            return Err(Error::invalid("at least one lengthscale is required"));
        }
        if let Some(l) = lengthscales.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::invalid(format!(
                "lengthscales must be positive, got {l}"
            )));
        }
        if !(jitter.is_finite() && jitter >= 0.0) {
            return Err(Error::invalid(format!(
                "jitter must be non-negative, got {jitter}"
            )));
        }
        let inv_sq = lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
        Ok(KernelConfig {
            signal_variance,
            lengthscales,
            jitter,
            inv_sq,
        })
    }

    /// Kernel with the default jitter of `1e-8 · σ_f²`.
    pub fn with_default_jitter(signal_variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        Self::new(
            signal_variance,
            lengthscales,
            DEFAULT_RELATIVE_JITTER * signal_variance,
        )
    }

    pub fn signal_variance(&self) -> f64 {
        self.signal_variance
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn with_jitter(&self, jitter: f64) -> Result<Self> {
        Self::new(self.signal_variance, self.lengthscales.clone(), jitter)
    }

    /// Multiplies `σ_f²` and the jitter by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.signal_variance * factor,
            self.lengthscales.clone(),
            self.jitter * factor,
        )
    }

    pub(crate) fn check_dim(&self, dim: usize) -> Result<()> {
        if dim != self.dim() {
            return Err(Error::invalid(format!(
                "point dimension {dim} does not match {} lengthscales",
                self.dim()
            )));
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut q = 0.0;
        for ((x, y), w) in a.iter().zip(b).zip(&self.inv_sq) {
            let d = x - y;
            q += d * d * w;
        }
        self.signal_variance * (-0.5 * q).exp()
    }

    pub(crate) fn inv_sq(&self) -> &[f64] {
        &self.inv_sq
    }
}

/// `σ_f² exp(-½ (a-b)ᵀ Λ⁻¹ (a-b))`.
pub fn seard_kernel(a: &[f64], b: &[f64], cfg: &KernelConfig) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "points have different dimensions ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    cfg.check_dim(a.len())?;
    Ok(cfg.eval(a, b))
}

/// Gram matrix `K_N + jitter·I`.
pub fn gram_matrix(points: &Points, cfg: &KernelConfig) -> Result<DMatrix<f64>> {
    if points.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.check_dim(points.dim())?;
    Ok(gram_unchecked(points, cfg))
}

fn gram_unchecked(points: &Points, cfg: &KernelConfig) -> DMatrix<f64> {
    let n = points.len();
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        let zj = points.point(j);
        k[(j, j)] = cfg.signal_variance + cfg.jitter;
        for i in (j + 1)..n {
            let v = cfg.eval(points.point(i), zj);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// `N × M` cross-covariance between data rows and query columns.
fn cross_covariance(data: &Points, queries: &Points, cfg: &KernelConfig) -> DMatrix<f64> {
    let (n, m) = (data.len(), queries.len());
    let mut k = DMatrix::zeros(n, m);
    for i in 0..m {
        let q = queries.point(i);
        let col = &mut k.as_mut_slice()[i * n..(i + 1) * n];
        for (j, slot) in col.iter_mut().enumerate() {
            *slot = cfg.eval(data.point(j), q);
        }
    }
    k
}

fn factor(points: &Points, cfg: &KernelConfig) -> Result<CholeskyFactor> {
    CholeskyFactor::new(gram_unchecked(points, cfg)).ok_or(Error::IllConditionedGram {
        n: points.len(),
        jitter: cfg.jitter,
    })
}

fn clamp_variance(v: f64, prior: f64) -> f64 {
    v.clamp(0.0, prior)
}

/// A conditioned GP: the Cholesky factor of the Gram matrix over a fixed
/// set of training inputs, reusable across queries.
pub struct GpPosterior<'a> {
    data: &'a Points,
    cfg: &'a KernelConfig,
    chol: Option<CholeskyFactor>,
}

impl<'a> GpPosterior<'a> {
    pub fn fit(data: &'a Points, cfg: &'a KernelConfig) -> Result<Self> {
        if data.is_empty() {
            return Ok(GpPosterior {
                data,
                cfg,
                chol: None,
            });
        }
        cfg.check_dim(data.dim())?;
        Ok(GpPosterior {
            data,
            cfg,
            chol: Some(factor(data, cfg)?),
        })
    }

    fn cross(&self, q: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.data.len(),
            self.data.iter().map(|z| self.cfg.eval(z, q)),
        )
    }

    /// Unclamped `κ(q,q) − κ(q,Z) K_N⁻¹ κ(q,Z)ᵀ`.
    pub fn raw_variance(&self, q: &[f64]) -> Result<f64> {
        self.cfg.check_dim(q.len())?;
        let prior = self.cfg.signal_variance;
        let Some(chol) = &self.chol else {
            return Ok(prior);
        };
        let mut w = {
            let k = self.cross(q);
            DMatrix::from_column_slice(k.len(), 1, k.as_slice())
        };
        chol.solve_lower_in_place(&mut w);
        Ok(prior - w.norm_squared())
    }

    /// Posterior variance clamped to `[0, κ(q,q)]`.
    pub fn variance(&self, q: &[f64]) -> Result<f64> {
        Ok(clamp_variance(
            self.raw_variance(q)?,
            self.cfg.signal_variance,
        ))
    }

    /// Posterior mean `κ(q,Z) K_N⁻¹ H` for training targets `h`.
    pub fn mean(&self, q: &[f64], h: &[f64]) -> Result<f64> {
        self.cfg.check_dim(q.len())?;
        if h.len() != self.data.len() {
            return Err(Error::invalid(format!(
                "{} targets for {} training points",
                h.len(),
                self.data.len()
            )));
        }
        let Some(chol) = &self.chol else {
            return Err(Error::EmptyDataset);
        };
        let alpha = chol.solve(&DMatrix::from_column_slice(h.len(), 1, h));
        Ok(self.cross(q).dot(&alpha.column(0)))
    }
}

/// Posterior variance at `query` given training inputs `data`.
///
/// Returns the prior variance `σ_f²` for an empty dataset.
pub fn posterior_variance(query: &[f64], data: &Points, cfg: &KernelConfig) -> Result<f64> {
    GpPosterior::fit(data, cfg)?.variance(query)
}

/// Posterior mean at `query`. Only used to validate the GP algebra; the
/// design cost never looks at targets.
pub fn posterior_mean(query: &[f64], data: &Points, h: &[f64], cfg: &KernelConfig) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    GpPosterior::fit(data, cfg)?.mean(query, h)
}

/// Space-filling cost `V(D) = (1/M) Σ_i Var(z̃_i | D)`.
///
/// Anchors are summed in index order.
pub fn cost_v(data: &Points, anchors: &AnchorSet, cfg: &KernelConfig) -> Result<f64> {
    Ok(VarianceTerms::new(data, &anchors.points, cfg)?.cost())
}

/// `V(D)` together with `∂V/∂z_j` for every data point, as an `N × n_z`
/// matrix.
pub fn cost_v_with_gradient(
    data: &Points,
    anchors: &AnchorSet,
    cfg: &KernelConfig,
) -> Result<(f64, DMatrix<f64>)> {
    let terms = VarianceTerms::new(data, &anchors.points, cfg)?;
    let cost = terms.cost();
    Ok((cost, terms.gradient()?))
}

/// Shared intermediate results for the cost and its gradient.
struct VarianceTerms<'a> {
    data: &'a Points,
    anchors: &'a Points,
    cfg: &'a KernelConfig,
    /// `Ka`, data × anchors.
    cross: DMatrix<f64>,
    /// `L⁻¹ Ka`.
    whitened: Option<DMatrix<f64>>,
    chol: Option<CholeskyFactor>,
}

impl<'a> VarianceTerms<'a> {
    fn new(data: &'a Points, anchors: &'a Points, cfg: &'a KernelConfig) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::invalid("anchor set is empty"));
        }
        cfg.check_dim(anchors.dim())?;
        if data.is_empty() {
            return Ok(VarianceTerms {
                data,
                anchors,
                cfg,
                cross: DMatrix::zeros(0, anchors.len()),
                whitened: None,
                chol: None,
            });
        }
        cfg.check_dim(data.dim())?;
        let chol = factor(data, cfg)?;
        let cross = cross_covariance(data, anchors, cfg);
        let mut whitened = cross.clone();
        chol.solve_lower_in_place(&mut whitened);
        Ok(VarianceTerms {
            data,
            anchors,
            cfg,
            cross,
            whitened: Some(whitened),
            chol: Some(chol),
        })
    }

    fn variances(&self) -> Vec<f64> {
        let prior = self.cfg.signal_variance;
        match &self.whitened {
            None => vec![prior; self.anchors.len()],
            Some(w) => w
                .column_iter()
                .map(|c| clamp_variance(prior - c.norm_squared(), prior))
                .collect(),
        }
    }

    fn cost(&self) -> f64 {
        let v = self.variances();
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn gradient(&self) -> Result<DMatrix<f64>> {
        let n = self.data.len();
        let d = self.anchors.dim();
        let (Some(chol), Some(whitened)) = (&self.chol, &self.whitened) else {
            return Ok(DMatrix::zeros(0, d));
        };
        let m = self.anchors.len() as f64;
        // B = K⁻¹ Ka, P = B Bᵀ.
        let mut b = whitened.clone();
        chol.solve_upper_in_place(&mut b);
        let p = lower_outer(&b);

        // Anchor pull: Σ_i B_ji Ka_ji (z_j − a_i).
        let w_anchor = b.component_mul(&self.cross);
        let anchor_mat = points_matrix(self.anchors);
        let data_mat = points_matrix(self.data);
        let mut grad = DMatrix::zeros(n, d);
        let anchor_proj = &w_anchor * &anchor_mat;
        for j in 0..n {
            let s: f64 = w_anchor.row(j).sum();
            for c in 0..d {
                grad[(j, c)] = s * data_mat[(j, c)] - anchor_proj[(j, c)];
            }
        }
        // Data repulsion: Σ_l P_jl K_jl (z_j − z_l). The diagonal term
        // vanishes because z_j − z_j = 0, and each symmetric pair is
        // visited once.
        let mut row_sum = vec![0.0; n];
        let mut data_proj = DMatrix::<f64>::zeros(n, d);
        for l in 0..n {
            let zl = self.data.point(l);
            for j in l + 1..n {
                let zj = self.data.point(j);
                let w = p[(j, l)] * self.cfg.eval(zj, zl);
                row_sum[j] += w;
                row_sum[l] += w;
                for c in 0..d {
                    data_proj[(j, c)] += w * zl[c];
                    data_proj[(l, c)] += w * zj[c];
                }
            }
        }
        for j in 0..n {
            for c in 0..d {
                grad[(j, c)] -= row_sum[j] * data_mat[(j, c)] - data_proj[(j, c)];
            }
        }
        let inv_sq = self.cfg.inv_sq();
        for (c, w) in inv_sq.iter().enumerate() {
            grad.column_mut(c).scale_mut(2.0 / m * w);
        }
        Ok(grad)
    }
}

fn points_matrix(points: &Points) -> DMatrix<f64> {
    DMatrix::from_row_slice(points.len(), points.dim(), points.coords())
}
