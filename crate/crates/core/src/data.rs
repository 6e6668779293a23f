//! Point containers for the joint input-state space.
//!
//! Points are stored row-major in a flat buffer. The canonical coordinate
//! order of a joint point is state first, then input: `(x_1..x_nx, u_1..u_nu)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A row-major set of points sharing one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Points {
    dim: usize,
    coords: Vec<f64>,
}

impl Points {
    pub fn empty(dim: usize) -> Self {
        Points {
            dim,
            coords: Vec::new(),
        }
    }

    pub fn from_flat(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("point dimension must be positive"));
        }
        if !coords.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "{} coordinates do not split into points of dimension {dim}",
                coords.len()
            )));
        }
        if let Some(bad) = coords.iter().position(|c| !c.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite coordinate in point {}",
                bad / dim
            )));
        }
        Ok(Points { dim, coords })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or(Error::EmptyDataset)?;
        let mut coords = Vec::with_capacity(dim * rows.len());
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::invalid(format!(
                    "row {i} has {} coordinates, expected {dim}",
                    row.len()
                )));
            }
            coords.extend_from_slice(row);
        }
        Points::from_flat(dim, coords)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.coords.chunks_exact(self.dim.max(1))
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn push(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim {
            return Err(Error::invalid(format!(
                "point has {} coordinates, expected {}",
                p.len(),
                self.dim
            )));
        }
        if p.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("non-finite coordinate"));
        }
        self.coords.extend_from_slice(p);
        Ok(())
    }

    /// Keeps only the listed coordinates of every point, in the given order.
    pub fn select(&self, columns: &[usize]) -> Result<Points> {
        if let Some(&c) = columns.iter().find(|&&c| c >= self.dim) {
            return Err(Error::invalid(format!(
                "column {c} out of range for dimension {}",
                self.dim
            )));
        }
        let coords = self
            .iter()
            .flat_map(|p| columns.iter().map(move |&c| p[c]))
            .collect();
        Ok(Points {
            dim: columns.len(),
            coords,
        })
    }
}

/// Dataset `D_N`: the joint points visited by a trajectory, plus the
/// parameter vector that generated it when known.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Points,
    pub theta: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(points: Points) -> Self {
        Dataset {
            points,
            theta: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.dim()
    }
}

/// Anchor dataset `D_I` together with its own filling distance.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub points: Points,
    pub epsilon: f64,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}
