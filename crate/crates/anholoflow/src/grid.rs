//! Four-axis grid charts and scalar fields with second-order stencils.
//!
//! Axis order is fixed as `[x1, x2, t, y4]`: two horizontal coordinates,
//! the anisotropy coordinate `t = y3`, and the Killing coordinate `y4`.
//! Storage is row-major with the last axis fastest.  All derivative
//! stencils are second-order accurate: central in the interior, one-sided
//! at Dirichlet edges, wrapped on periodic axes (whose stored endpoint
//! duplicates the first point).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis indices by role.
pub const AX_X1: usize = 0;
pub const AX_X2: usize = 1;
pub const AX_T: usize = 2;
pub const AX_Y4: usize = 3;

/// Canonical axis names, in storage order.
pub const AXIS_NAMES: [&str; 4] = ["x1", "x2", "t", "y4"];

/// Boundary treatment of a grid axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryKind {
    Dirichlet,
    Periodic,
}

/// One uniformly spaced axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub count: usize,
    pub boundary: BoundaryKind,
}

impl Axis {
    pub fn new(name: &str, min: f64, max: f64, count: usize, boundary: BoundaryKind) -> Result<Self> {
        let axis = Axis { name: name.to_string(), min, max, count, boundary };
        axis.validate()?;
        Ok(axis)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite()) || self.max <= self.min {
            return Err(Error::Config(format!(
                "axis {}: extent [{}, {}] is not a finite increasing interval",
                self.name, self.min, self.max
            )));
        }
        if self.count < 3 {
            return Err(Error::Config(format!(
                "axis {}: count {} < 3",
                self.name, self.count
            )));
        }
        Ok(())
    }

    /// Grid spacing, `(max - min) / (count - 1)`.
    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.count - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        self.min + self.spacing() * i as f64
    }

    /// Trapezoid quadrature weights; on a periodic axis the duplicated
    /// endpoint gets weight zero so one full period is covered.
    pub fn quad_weights(&self) -> Vec<f64> {
        let d = self.spacing();
        let n = self.count;
        let mut w = vec![d; n];
        match self.boundary {
            BoundaryKind::Dirichlet => {
                w[0] = 0.5 * d;
                w[n - 1] = 0.5 * d;
            }
            BoundaryKind::Periodic => {
                w[n - 1] = 0.0;
            }
        }
        w
    }
}

/// A four-axis product chart.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridChart {
    pub axes: [Axis; 4],
}

impl GridChart {
    pub fn new(axes: [Axis; 4]) -> Result<Self> {
        for axis in &axes {
            axis.validate()?;
        }
        Ok(GridChart { axes })
    }

    /// Cube chart `[0,1]^4`, Dirichlet everywhere, for tests.
    pub fn unit(counts: [usize; 4]) -> Arc<Self> {
        let axes = [
            Axis::new("x1", 0.0, 1.0, counts[0], BoundaryKind::Dirichlet).unwrap(),
            Axis::new("x2", 0.0, 1.0, counts[1], BoundaryKind::Dirichlet).unwrap(),
            Axis::new("t", 0.0, 1.0, counts[2], BoundaryKind::Dirichlet).unwrap(),
            Axis::new("y4", 0.0, 1.0, counts[3], BoundaryKind::Dirichlet).unwrap(),
        ];
        Arc::new(GridChart { axes })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.axes[0].count, self.axes[1].count, self.axes[2].count, self.axes[3].count]
    }

    pub fn len(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn strides(&self) -> [usize; 4] {
        let d = self.dims();
        [d[1] * d[2] * d[3], d[2] * d[3], d[3], 1]
    }

    pub fn flat(&self, idx: [usize; 4]) -> usize {
        let s = self.strides();
        idx[0] * s[0] + idx[1] * s[1] + idx[2] * s[2] + idx[3]
    }

    pub fn unflat(&self, flat: usize) -> [usize; 4] {
        let d = self.dims();
        let i4 = flat % d[3];
        let r = flat / d[3];
        let i3 = r % d[2];
        let r = r / d[2];
        let i2 = r % d[1];
        let i1 = r / d[1];
        [i1, i2, i3, i4]
    }

    /// Coordinates of a grid node.
    pub fn point(&self, idx: [usize; 4]) -> [f64; 4] {
        [
            self.axes[0].point(idx[0]),
            self.axes[1].point(idx[1]),
            self.axes[2].point(idx[2]),
            self.axes[3].point(idx[3]),
        ]
    }

    pub fn spacings(&self) -> [f64; 4] {
        [
            self.axes[0].spacing(),
            self.axes[1].spacing(),
            self.axes[2].spacing(),
            self.axes[3].spacing(),
        ]
    }

    /// Iterate all multi-indices in storage order.
    pub fn indices(&self) -> impl Iterator<Item = [usize; 4]> + '_ {
        (0..self.len()).map(move |f| self.unflat(f))
    }

    /// Product trapezoid weight of a node.
    pub fn quad_weight(&self, idx: [usize; 4], per_axis: &[Vec<f64>; 4]) -> f64 {
        per_axis[0][idx[0]] * per_axis[1][idx[1]] * per_axis[2][idx[2]] * per_axis[3][idx[3]]
    }

    pub fn quad_weights(&self) -> [Vec<f64>; 4] {
        [
            self.axes[0].quad_weights(),
            self.axes[1].quad_weights(),
            self.axes[2].quad_weights(),
            self.axes[3].quad_weights(),
        ]
    }

    /// First-derivative stencil at a node along an axis: up to three
    /// `(index, weight)` pairs whose weighted sum reproduces exactly what
    /// [`Field::deriv`] computes.  Lets callers differentiate quantities
    /// that are evaluated pointwise rather than stored in a field.
    pub fn deriv_points(&self, idx: [usize; 4], axis: usize) -> ([([usize; 4], f64); 3], usize) {
        let ax = &self.axes[axis];
        let d = ax.spacing();
        let n = ax.count;
        let i = idx[axis];
        let shift = |off: isize| -> [usize; 4] {
            let mut nid = idx;
            match ax.boundary {
                BoundaryKind::Dirichlet => nid[axis] = (i as isize + off) as usize,
                BoundaryKind::Periodic => {
                    let p = (n - 1) as isize;
                    nid[axis] = ((i as isize).rem_euclid(p) + off).rem_euclid(p) as usize;
                }
            }
            nid
        };
        let half = 1.0 / (2.0 * d);
        let mut pts = [([0usize; 4], 0.0); 3];
        let count;
        let interior = match ax.boundary {
            BoundaryKind::Periodic => true,
            BoundaryKind::Dirichlet => i > 0 && i < n - 1,
        };
        if interior {
            pts[0] = (shift(-1), -half);
            pts[1] = (shift(1), half);
            count = 2;
        } else if i == 0 {
            pts[0] = (shift(0), -3.0 * half);
            pts[1] = (shift(1), 4.0 * half);
            pts[2] = (shift(2), -half);
            count = 3;
        } else {
            pts[0] = (shift(0), 3.0 * half);
            pts[1] = (shift(-1), -4.0 * half);
            pts[2] = (shift(-2), half);
            count = 3;
        }
        (pts, count)
    }

    /// Charts are compatible when axes match exactly.
    pub fn same_layout(&self, other: &GridChart) -> bool {
        self.axes.iter().zip(other.axes.iter()).all(|(a, b)| {
            a.name == b.name
                && a.min == b.min
                && a.max == b.max
                && a.count == b.count
                && a.boundary == b.boundary
        })
    }
}

/// Scalar field sampled on a chart.
#[derive(Debug, Clone)]
pub struct Field {
    chart: Arc<GridChart>,
    pub data: Vec<f64>,
}

impl Field {
    pub fn zeros(chart: &Arc<GridChart>) -> Self {
        Field { chart: Arc::clone(chart), data: vec![0.0; chart.len()] }
    }

    pub fn constant(chart: &Arc<GridChart>, value: f64) -> Self {
        Field { chart: Arc::clone(chart), data: vec![value; chart.len()] }
    }

    pub fn from_fn(chart: &Arc<GridChart>, mut f: impl FnMut([f64; 4]) -> f64) -> Self {
        let mut data = Vec::with_capacity(chart.len());
        for idx in chart.indices() {
            data.push(f(chart.point(idx)));
        }
        Field { chart: Arc::clone(chart), data }
    }

    pub fn from_vec(chart: &Arc<GridChart>, data: Vec<f64>) -> Result<Self> {
        if data.len() != chart.len() {
            return Err(Error::Config(format!(
                "field length {} does not match chart size {}",
                data.len(),
                chart.len()
            )));
        }
        Ok(Field { chart: Arc::clone(chart), data })
    }

    pub fn chart(&self) -> &Arc<GridChart> {
        &self.chart
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> f64 {
        self.data[self.chart.flat(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], v: f64) {
        let f = self.chart.flat(idx);
        self.data[f] = v;
    }

    /// Neighbor flat index along `axis` with offset `off`, handling wrap.
    /// Returns `None` when the neighbor falls outside a Dirichlet axis.
    #[inline]
    fn neighbor(&self, idx: [usize; 4], axis: usize, off: isize) -> Option<usize> {
        let ax = &self.chart.axes[axis];
        let n = ax.count as isize;
        let i = idx[axis] as isize;
        match ax.boundary {
            BoundaryKind::Dirichlet => {
                let j = i + off;
                if j < 0 || j >= n {
                    None
                } else {
                    let mut nid = idx;
                    nid[axis] = j as usize;
                    Some(self.chart.flat(nid))
                }
            }
            BoundaryKind::Periodic => {
                let p = n - 1; // duplicated endpoint
                let j = (i.rem_euclid(p) + off).rem_euclid(p);
                let mut nid = idx;
                nid[axis] = j as usize;
                Some(self.chart.flat(nid))
            }
        }
    }

    /// First derivative along `axis`, second order.
    pub fn deriv(&self, idx: [usize; 4], axis: usize) -> f64 {
        let ax = &self.chart.axes[axis];
        let d = ax.spacing();
        let n = ax.count;
        let i = idx[axis];
        let v = |off: isize| -> f64 { self.data[self.neighbor(idx, axis, off).unwrap()] };
        match ax.boundary {
            BoundaryKind::Periodic => (v(1) - v(-1)) / (2.0 * d),
            BoundaryKind::Dirichlet => {
                if i == 0 {
                    (-3.0 * v(0) + 4.0 * v(1) - v(2)) / (2.0 * d)
                } else if i == n - 1 {
                    (3.0 * v(0) - 4.0 * v(-1) + v(-2)) / (2.0 * d)
                } else {
                    (v(1) - v(-1)) / (2.0 * d)
                }
            }
        }
    }

    /// Second derivative along `axis`, second order.
    pub fn deriv2(&self, idx: [usize; 4], axis: usize) -> f64 {
        let ax = &self.chart.axes[axis];
        let d = ax.spacing();
        let n = ax.count;
        let i = idx[axis];
        let v = |off: isize| -> f64 { self.data[self.neighbor(idx, axis, off).unwrap()] };
        let dd = d * d;
        match ax.boundary {
            BoundaryKind::Periodic => (v(1) - 2.0 * v(0) + v(-1)) / dd,
            BoundaryKind::Dirichlet => {
                if i == 0 {
                    if n >= 4 {
                        (2.0 * v(0) - 5.0 * v(1) + 4.0 * v(2) - v(3)) / dd
                    } else {
                        (v(0) - 2.0 * v(1) + v(2)) / dd
                    }
                } else if i == n - 1 {
                    if n >= 4 {
                        (2.0 * v(0) - 5.0 * v(-1) + 4.0 * v(-2) - v(-3)) / dd
                    } else {
                        (v(0) - 2.0 * v(-1) + v(-2)) / dd
                    }
                } else {
                    (v(1) - 2.0 * v(0) + v(-1)) / dd
                }
            }
        }
    }

    /// Whole-field derivative along an axis.
    pub fn deriv_field(&self, axis: usize) -> Field {
        let mut out = Field::zeros(&self.chart);
        for idx in self.chart.indices() {
            let f = self.chart.flat(idx);
            out.data[f] = self.deriv(idx, axis);
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }

    /// Trapezoid integral of the field (no metric weight).
    pub fn integrate(&self) -> f64 {
        let w = self.chart.quad_weights();
        let mut acc = 0.0;
        for idx in self.chart.indices() {
            acc += self.at(idx) * self.chart.quad_weight(idx, &w);
        }
        acc
    }
}
