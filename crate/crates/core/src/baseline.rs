//! Trilinear-interpolation benchmark over the measured subgrid.

use std::ops::{Add, Mul};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::par;
use crate::protocol::{gain_db, SelectionGrid, DB_FLOOR};
use crate::sim::{grid_position, ChannelMap};

/// Values on a rectilinear grid of measured positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Subgrid<V> {
    /// Sorted coordinates per axis (x, y, z), meters.
    pub axes: [Vec<f64>; 3],
    /// Flat index `a + nx·(b + ny·c)`.
    pub values: Vec<V>,
}

impl<V> Subgrid<V>
where
    V: Copy + Add<Output = V> + Mul<f64, Output = V>,
{
    pub fn new(axes: [Vec<f64>; 3], values: Vec<V>) -> Result<Self> {
        for (a, axis) in axes.iter().enumerate() {
            ensure!(
                axis.len() >= 2,
                DegenerateGrid,
                "axis {a} has {} point(s); interpolation needs at least 2",
                axis.len()
            );
            ensure!(
                axis.windows(2).all(|w| w[0] < w[1]) && axis.iter().all(|v| v.is_finite()),
                DegenerateGrid,
                "axis {a} coordinates are not strictly increasing"
            );
        }
        let count = axes.iter().map(Vec::len).product::<usize>();
        ensure!(
            values.len() == count,
            Dimension,
            "{} values for a {}×{}×{} subgrid",
            values.len(),
            axes[0].len(),
            axes[1].len(),
            axes[2].len()
        );
        Ok(Self { axes, values })
    }

    #[inline]
    fn at(&self, a: usize, b: usize, c: usize) -> V {
        let (nx, ny) = (self.axes[0].len(), self.axes[1].len());
        self.values[a + nx * (b + ny * c)]
    }

    /// Trilinear blend of the 8 corners of the cell enclosing `query`.
    /// Queries outside the bounding box are clamped onto it.
    pub fn trilinear(&self, query: [f64; 3]) -> V {
        let mut lo = [0usize; 3];
        let mut w = [0.0f64; 3];
        for d in 0..3 {
            (lo[d], w[d]) = locate(&self.axes[d], query[d]);
        }
        let mut acc: Option<V> = None;
        for corner in 0..8 {
            let (ox, oy, oz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
            let weight = [ox, oy, oz]
                .iter()
                .zip(&w)
                .map(|(&o, &t)| if o == 1 { t } else { 1.0 - t })
                .product::<f64>();
            let v = self.at(lo[0] + ox, lo[1] + oy, lo[2] + oz) * weight;
            acc = Some(match acc {
                Some(a) => a + v,
                None => v,
            });
        }
        acc.expect("eight corners")
    }
}

/// Cell index and fractional offset of `x` on a sorted axis, clamped.
fn locate(axis: &[f64], x: f64) -> (usize, f64) {
    let last = axis.len() - 1;
    if !(x > axis[0]) {
        return (0, 0.0);
    }
    if x >= axis[last] {
        return (last - 1, 1.0);
    }
    // First node strictly greater than x; x lies in [axis[hi-1], axis[hi]).
    let hi = axis.partition_point(|&v| v <= x);
    let lo = hi - 1;
    (lo, (x - axis[lo]) / (axis[lo + 1] - axis[lo]))
}

/// What the benchmark interpolates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Real and imaginary parts, then dB conversion downstream.
    #[default]
    Complex,
    /// dB gains directly; phase still comes from the complex interpolant.
    Db,
}

/// Measured subgrid of a map.
pub fn measured_subgrid(map: &ChannelMap, grid: &SelectionGrid) -> Result<Subgrid<Complex64>> {
    ensure!(
        map.n == grid.n,
        Dimension,
        "map of size {} for a grid of {}",
        map.n,
        grid.n
    );
    let axis: Vec<f64> = grid
        .selected_indices
        .iter()
        .map(|&i| i as f64 * map.spacing_m)
        .collect();
    let values = grid.full_indices().into_iter().map(|f| map.values[f]).collect();
    Subgrid::new([axis.clone(), axis.clone(), axis], values)
}

/// Evaluates the interpolant at every point of an `n³` grid.
pub fn reconstruct_map_trilinear(subgrid: &Subgrid<Complex64>, n: usize, spacing_m: f64) -> Result<ChannelMap> {
    let planes = par::map_range(n, |k| {
        let mut plane = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                plane.push(subgrid.trilinear(grid_position(spacing_m, i, j, k)));
            }
        }
        plane
    });
    ChannelMap::new(n, spacing_m, planes.concat())
}

/// Benchmark reconstruction of `measured` from its selected points.
pub fn trilinear_baseline(measured: &ChannelMap, grid: &SelectionGrid, mode: Interpolation) -> Result<ChannelMap> {
    let sub = measured_subgrid(measured, grid)?;
    let complex = reconstruct_map_trilinear(&sub, measured.n, measured.spacing_m)?;
    match mode {
        Interpolation::Complex => Ok(complex),
        Interpolation::Db => {
            let db = Subgrid::new(
                sub.axes.clone(),
                sub.values.iter().map(|&h| gain_db(h, DB_FLOOR)).collect(),
            )?;
            let n = measured.n;
            let d = measured.spacing_m;
            let values = complex
                .values
                .iter()
                .enumerate()
                .map(|(f, &h)| {
                    let (i, j, k) = (f % n, (f / n) % n, f / (n * n));
                    let g = db.trilinear(grid_position(d, i, j, k));
                    Complex64::from_polar(10f64.powf(g / 20.0), h.arg())
                })
                .collect();
            ChannelMap::new(n, d, values)
        }
    }
}
