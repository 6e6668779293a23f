//! Region of interest, anchor grids and the filling distance
//! `ρ(D) = max_ς min_j ‖ς − z_j‖_Q` over an endpoint-inclusive evaluation
//! grid.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AnchorSet, Points};
use crate::error::{Error, Result};

/// Evaluation points per dimension used for `ρ` unless configured otherwise.
pub const DEFAULT_EVAL_POINTS: usize = 100;

/// Axis-aligned box in the joint space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionOfInterest {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl RegionOfInterest {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::invalid(format!(
                "region bounds have {} and {} entries",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid(format!(
                    "region dimension {i} is not a proper interval: [{lo}, {hi}]"
                )));
            }
        }
        Ok(RegionOfInterest { lower, upper })
    }

    /// `[-h_i, h_i]` in every dimension.
    pub fn symmetric(half_widths: &[f64]) -> Result<Self> {
        Self::new(
            half_widths.iter().map(|h| -h).collect(),
            half_widths.to_vec(),
        )
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim()
            && p.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| lo <= v && v <= hi)
    }

    fn axis(&self, d: usize, count: usize) -> Vec<f64> {
        let (lo, hi) = (self.lower[d], self.upper[d]);
        (0..count)
            .map(|i| {
                if i + 1 == count {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (count - 1) as f64
                }
            })
            .collect()
    }
}

/// Diagonal weight `Q` of the normalized distance `‖v‖_Q = √(vᵀ Q v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricWeight {
    diag: Vec<f64>,
}

impl MetricWeight {
    pub fn new(diag: Vec<f64>) -> Result<Self> {
        if diag.is_empty() {
            return Err(Error::invalid("metric weight needs at least one entry"));
        }
        if let Some(q) = diag.iter().find(|q| !(q.is_finite() && **q > 0.0)) {
            return Err(Error::invalid(format!(
                "metric weights must be positive, got {q}"
            )));
        }
        Ok(MetricWeight { diag })
    }

    pub fn identity(dim: usize) -> Self {
        MetricWeight {
            diag: vec![1.0; dim],
        }
    }

    /// `Q = diag(1/h_i²)`, which maps a symmetric box to `[-1, 1]ⁿ`.
    pub fn from_half_widths(half_widths: &[f64]) -> Result<Self> {
        Self::new(half_widths.iter().map(|h| 1.0 / (h * h)).collect())
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    #[inline]
    fn dist_sq(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for ((x, y), q) in a.iter().zip(b).zip(&self.diag) {
            let d = x - y;
            s += q * d * d;
        }
        s
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        self.dist_sq(a, b).sqrt()
    }
}

fn check_counts(region: &RegionOfInterest, counts: &[usize]) -> Result<()> {
    if counts.len() != region.dim() {
        return Err(Error::invalid(format!(
            "{} grid counts for a {}-dimensional region",
            counts.len(),
            region.dim()
        )));
    }
    if let Some(c) = counts.iter().find(|c| **c < 2) {
        return Err(Error::invalid(format!(
            "every grid dimension needs at least 2 points, got {c}"
        )));
    }
    Ok(())
}

/// Cartesian product of endpoint-inclusive, equally spaced axes. The last
/// dimension varies fastest.
pub fn grid_points(region: &RegionOfInterest, counts: &[usize]) -> Result<Points> {
    check_counts(region, counts)?;
    let axes: Vec<Vec<f64>> = (0..region.dim())
        .map(|d| region.axis(d, counts[d]))
        .collect();
    let total: usize = counts.iter().product();
    let mut coords = Vec::with_capacity(total * region.dim());
    let mut idx = vec![0usize; region.dim()];
    for _ in 0..total {
        coords.extend(idx.iter().enumerate().map(|(d, &i)| axes[d][i]));
        advance(&mut idx, counts);
    }
    Points::from_flat(region.dim(), coords)
}

fn advance(idx: &mut [usize], counts: &[usize]) {
    for d in (0..idx.len()).rev() {
        idx[d] += 1;
        if idx[d] < counts[d] {
            return;
        }
        idx[d] = 0;
    }
}

fn check_metric(region: &RegionOfInterest, weight: &MetricWeight, dim: usize) -> Result<()> {
    if region.dim() != dim || weight.dim() != dim {
        return Err(Error::invalid(format!(
            "dimension mismatch: data {dim}, region {}, metric {}",
            region.dim(),
            weight.dim()
        )));
    }
    Ok(())
}

/// Arg-max of the filling distance: the evaluation point farthest from
/// every data point, and its distance. Ties go to the lowest grid index.
pub fn largest_empty_ball(
    data: &Points,
    region: &RegionOfInterest,
    weight: &MetricWeight,
    eval_points: usize,
) -> Result<(Vec<f64>, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = data.dim();
    check_metric(region, weight, dim)?;
    let counts = vec![eval_points; dim];
    check_counts(region, &counts)?;
    let axes: Vec<Vec<f64>> = (0..dim).map(|d| region.axis(d, eval_points)).collect();
    let total = eval_points.pow(dim as u32);

    let n = data.len();
    let mut idx = vec![0usize; dim];
    let mut q = vec![0.0; dim];
    let mut best = f64::NEG_INFINITY;
    let mut best_point = vec![0.0; dim];
    let mut hint = 0usize;
    for _ in 0..total {
        for d in 0..dim {
            q[d] = axes[d][idx[d]];
        }
        // A grid point only matters if its nearest-neighbour distance
        // exceeds the running maximum, so the scan stops at the first data
        // point that is at least as close as `best`.
        let mut nearest = weight.dist_sq(&q, data.point(hint));
        if nearest > best {
            for j in 0..n {
                let d = weight.dist_sq(&q, data.point(j));
                if d < nearest {
                    nearest = d;
                    hint = j;
                    if nearest <= best {
                        break;
                    }
                }
            }
            if nearest > best {
                best = nearest;
                best_point.copy_from_slice(&q);
            }
        }
        advance(&mut idx, &counts);
    }
    Ok((best_point, best.sqrt()))
}

/// Filling distance of `data` over `region` under `weight`.
pub fn filling_distance(
    data: &Points,
    region: &RegionOfInterest,
    weight: &MetricWeight,
    eval_points: usize,
) -> Result<f64> {
    largest_empty_ball(data, region, weight, eval_points).map(|(_, r)| r)
}

/// Filling distance of an anchor set; every anchor must lie in the region.
pub fn anchor_epsilon(
    anchors: &Points,
    region: &RegionOfInterest,
    weight: &MetricWeight,
    eval_points: usize,
) -> Result<f64> {
    if let Some(i) = (0..anchors.len()).find(|&i| !region.contains(anchors.point(i))) {
        return Err(Error::invalid(format!(
            "anchor {i} lies outside the region of interest"
        )));
    }
    filling_distance(anchors, region, weight, eval_points)
}

/// Uniform anchor grid with `counts[d]` points along dimension `d`,
/// including both box faces, and its filling distance.
pub fn uniform_anchor_grid(
    region: &RegionOfInterest,
    counts: &[usize],
    weight: &MetricWeight,
    eval_points: usize,
) -> Result<AnchorSet> {
    let points = grid_points(region, counts)?;
    let epsilon = anchor_epsilon(&points, region, weight, eval_points)?;
    Ok(AnchorSet { points, epsilon })
}

/// Reads one point per row. A header row is allowed if it is not numeric.
pub fn read_points_csv<R: Read>(input: R, source: &Path) -> Result<Points> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(input);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| Error::Parse {
            path: source.to_path_buf(),
            line: e.position().map_or(line, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(row) => {
                if let Some(first) = rows.first() {
                    if first.len() != row.len() {
                        return Err(Error::Parse {
                            path: source.to_path_buf(),
                            line,
                            message: format!(
                                "expected {} columns, found {}",
                                first.len(),
                                row.len()
                            ),
                        });
                    }
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Parse {
                        path: source.to_path_buf(),
                        line,
                        message: "non-finite value".into(),
                    });
                }
                rows.push(row);
            }
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(Error::Parse {
                    path: source.to_path_buf(),
                    line,
                    message: e.to_string(),
                })
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Points::from_rows(&rows)
}

pub fn load_points_csv(path: &Path) -> Result<Points> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_points_csv(std::io::BufReader::new(file), path)
}

/// Writes one point per row, preceded by a `z1..zn` header.
pub fn write_points_csv<W: Write>(points: &Points, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    let header: Vec<String> = (1..=points.dim()).map(|i| format!("z{i}")).collect();
    w.write_record(&header).map_err(csv_err)?;
    for p in points.iter() {
        w.write_record(p.iter().map(|v| v.to_string()))
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
