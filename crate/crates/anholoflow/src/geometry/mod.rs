//! Distinguished metrics, connections and curvature on 2+2 charts.
//!
//! A `DMetric` carries the horizontal block `g_ij(x,y)`, vertical block
//! `h_ab(x,y)` and nonlinear-connection coefficients `N_i^a(x,y)`.  The
//! tilted horizontal frame is `e_i = d/dx^i - N_i^a d/dy^a`; all h-block
//! Christoffel-type coefficients use these elongated derivatives while the
//! v-block uses plain fiber derivatives.
//!
//! Curvature is evaluated pointwise by transforming the distinguished
//! connection to the coordinate frame, applying the standard curvature
//! formula by nested finite differences, and projecting the Ricci tensor
//! back onto the tilted frame.

pub mod curvature;
pub mod sasaki;

pub use curvature::{
    curvature_at, curvature_bundle, distortion_norm, einstein_mixed_at, einstein_residual,
    gamma_canonical_coord_at, gamma_lc_coord_at, lc_scalar_at, CurvatureAt, CurvatureBundle,
    ScalarDerivs, ScalarLaplacian,
};
pub use sasaki::sasaki_lift;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{Field, GridChart, AX_T, AX_Y4};

/// Symmetric 2x2 block stored as `[c00, c01, c11]`.
pub type Sym2 = [f64; 3];

/// Determinant of a symmetric 2x2 block.
#[inline]
pub fn sym2_det(m: &Sym2) -> f64 {
    m[0] * m[2] - m[1] * m[1]
}

/// Inverse of a symmetric 2x2 block.
#[inline]
pub fn sym2_inv(m: &Sym2) -> Sym2 {
    let det = sym2_det(m);
    [m[2] / det, -m[1] / det, m[0] / det]
}

#[inline]
pub fn sym2_get(m: &Sym2, i: usize, j: usize) -> f64 {
    match (i, j) {
        (0, 0) => m[0],
        (1, 1) => m[2],
        _ => m[1],
    }
}

/// Metric signature marker.  The vertical block may carry a Lorentz sign;
/// elliptic machinery (eigen-solves, SPDE runs) demands `Riemannian`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignatureFlag {
    Riemannian,
    LorentzV,
}

/// Distinguished metric: h-block, v-block and N-connection fields.
#[derive(Debug, Clone)]
pub struct DMetric {
    chart: Arc<GridChart>,
    /// g_11, g_12, g_22
    pub g: [Field; 3],
    /// h_33, h_34, h_44
    pub h: [Field; 3],
    /// N_i^a indexed `[i][a]` with i in {1,2}, a in {3,4}
    pub n: [[Field; 2]; 2],
    pub signature: SignatureFlag,
}

impl DMetric {
    pub fn new(chart: &Arc<GridChart>, g: [Field; 3], h: [Field; 3], n: [[Field; 2]; 2]) -> Result<Self> {
        for f in g.iter().chain(h.iter()).chain(n.iter().flatten()) {
            if !f.chart().same_layout(chart) {
                return Err(Error::Config("metric component field on mismatched chart".into()));
            }
        }
        Ok(DMetric { chart: Arc::clone(chart), g, h, n, signature: SignatureFlag::Riemannian })
    }

    pub fn with_signature(mut self, signature: SignatureFlag) -> Self {
        self.signature = signature;
        self
    }

    /// Metric with identity blocks and zero N.
    pub fn flat(chart: &Arc<GridChart>) -> Self {
        let one = || Field::constant(chart, 1.0);
        let zero = || Field::zeros(chart);
        DMetric {
            chart: Arc::clone(chart),
            g: [one(), zero(), one()],
            h: [one(), zero(), one()],
            n: [[zero(), zero()], [zero(), zero()]],
            signature: SignatureFlag::Riemannian,
        }
    }

    pub fn chart(&self) -> &Arc<GridChart> {
        &self.chart
    }

    #[inline]
    pub fn g_at(&self, idx: [usize; 4]) -> Sym2 {
        [self.g[0].at(idx), self.g[1].at(idx), self.g[2].at(idx)]
    }

    #[inline]
    pub fn h_at(&self, idx: [usize; 4]) -> Sym2 {
        [self.h[0].at(idx), self.h[1].at(idx), self.h[2].at(idx)]
    }

    /// N_i^a at a node, indexed `[i][a]`.
    #[inline]
    pub fn n_at(&self, idx: [usize; 4]) -> [[f64; 2]; 2] {
        [
            [self.n[0][0].at(idx), self.n[0][1].at(idx)],
            [self.n[1][0].at(idx), self.n[1][1].at(idx)],
        ]
    }

    /// Volume density `sqrt(|det g| * |det h|)`.
    pub fn vol_at(&self, idx: [usize; 4]) -> f64 {
        (sym2_det(&self.g_at(idx)).abs() * sym2_det(&self.h_at(idx)).abs()).sqrt()
    }

    /// Both blocks must be nondegenerate everywhere.
    pub fn check_nondegenerate(&self, tol: f64) -> Result<()> {
        for idx in self.chart.indices() {
            if sym2_det(&self.g_at(idx)).abs() < tol || sym2_det(&self.h_at(idx)).abs() < tol {
                return Err(Error::Numeric(format!(
                    "degenerate metric block at index {idx:?}"
                )));
            }
        }
        Ok(())
    }

    /// Elongated horizontal derivative `e_i f = d_i f - N_i^3 d_t f - N_i^4 d_y4 f`
    /// of a scalar field at a node; `i` is 0 or 1.
    pub fn elongated_deriv(&self, f: &Field, idx: [usize; 4], i: usize) -> f64 {
        let n = self.n_at(idx);
        f.deriv(idx, i) - n[i][0] * f.deriv(idx, AX_T) - n[i][1] * f.deriv(idx, AX_Y4)
    }

    /// Whole-field elongated derivative.
    pub fn elongated_deriv_field(&self, f: &Field, i: usize) -> Field {
        let mut out = Field::zeros(&self.chart);
        for idx in self.chart.indices() {
            let v = self.elongated_deriv(f, idx, i);
            out.set(idx, v);
        }
        out
    }

    /// Frame derivative along any of the four tilted frame directions:
    /// `e_1`, `e_2` elongated, `e_3 = d_t`, `e_4 = d_y4` plain.
    pub fn adapted_deriv(&self, f: &Field, idx: [usize; 4], dir: usize) -> f64 {
        if dir < 2 {
            self.elongated_deriv(f, idx, dir)
        } else {
            f.deriv(idx, dir)
        }
    }

    /// Gradient squared `g^{ij} e_i f e_j f + h^{ab} d_a f d_b f`.
    pub fn grad_sq_at(&self, f: &Field, idx: [usize; 4]) -> f64 {
        let gi = sym2_inv(&self.g_at(idx));
        let hi = sym2_inv(&self.h_at(idx));
        let eh = [self.elongated_deriv(f, idx, 0), self.elongated_deriv(f, idx, 1)];
        let ev = [f.deriv(idx, AX_T), f.deriv(idx, AX_Y4)];
        let mut s = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                s += sym2_get(&gi, i, j) * eh[i] * eh[j];
                s += sym2_get(&hi, i, j) * ev[i] * ev[j];
            }
        }
        s
    }

    /// Coordinate-frame metric components
    /// `G_ij = g_ij + h_ab N_i^a N_j^b`, `G_ia = h_ab N_i^b`, `G_ab = h_ab`.
    pub fn coord_metric_at(&self, idx: [usize; 4]) -> [[f64; 4]; 4] {
        let g = self.g_at(idx);
        let h = self.h_at(idx);
        let n = self.n_at(idx);
        let mut gm = [[0.0; 4]; 4];
        for i in 0..2 {
            for j in 0..2 {
                let mut v = sym2_get(&g, i, j);
                for a in 0..2 {
                    for b in 0..2 {
                        v += sym2_get(&h, a, b) * n[i][a] * n[j][b];
                    }
                }
                gm[i][j] = v;
            }
        }
        for i in 0..2 {
            for a in 0..2 {
                let mut v = 0.0;
                for b in 0..2 {
                    v += sym2_get(&h, a, b) * n[i][b];
                }
                gm[i][2 + a] = v;
                gm[2 + a][i] = v;
            }
        }
        for a in 0..2 {
            for b in 0..2 {
                gm[2 + a][2 + b] = sym2_get(&h, a, b);
            }
        }
        gm
    }
}

/// N-adapted connection coefficients at one node.
///
/// Index convention: `l_h[i][j][k] = L^i_jk` (h-output, direction k),
/// `l_v[a][b][k] = L^a_bk`, `c_h[i][j][c] = C^i_jc`, `c_v[a][b][c] = C^a_bc`,
/// with all small indices in 0..2 (v-indices offset by 2 on the chart).
#[derive(Debug, Clone, Copy, Default)]
pub struct ConnCoeffs {
    pub l_h: [[[f64; 2]; 2]; 2],
    pub l_v: [[[f64; 2]; 2]; 2],
    pub c_h: [[[f64; 2]; 2]; 2],
    pub c_v: [[[f64; 2]; 2]; 2],
}

/// First coordinate derivatives of the metric component fields at a node,
/// plus the elongated combinations used by the canonical connection.
struct MetricDerivs {
    /// dg[mu][comp]: coordinate derivative of g components along axis mu
    dg: [[f64; 3]; 4],
    dh: [[f64; 3]; 4],
    /// dn[mu][i][a]
    dn: [[[f64; 2]; 2]; 4],
}

impl DMetric {
    fn metric_derivs(&self, idx: [usize; 4]) -> MetricDerivs {
        let mut dg = [[0.0; 3]; 4];
        let mut dh = [[0.0; 3]; 4];
        let mut dn = [[[0.0; 2]; 2]; 4];
        for mu in 0..4 {
            for c in 0..3 {
                dg[mu][c] = self.g[c].deriv(idx, mu);
                dh[mu][c] = self.h[c].deriv(idx, mu);
            }
            for i in 0..2 {
                for a in 0..2 {
                    dn[mu][i][a] = self.n[i][a].deriv(idx, mu);
                }
            }
        }
        MetricDerivs { dg, dh, dn }
    }

    /// Canonical distinguished connection coefficients at a node:
    /// metric-compatible, with vanishing pure-h and pure-v torsion.
    pub fn canonical_coeffs_at(&self, idx: [usize; 4]) -> ConnCoeffs {
        let g = self.g_at(idx);
        let h = self.h_at(idx);
        let n = self.n_at(idx);
        let gi = sym2_inv(&g);
        let hi = sym2_inv(&h);
        let d = self.metric_derivs(idx);

        // Elongated derivative of a symmetric-2x2 component along e_k.
        let eg = |k: usize, i: usize, j: usize| -> f64 {
            let c = if i == 0 && j == 0 {
                0
            } else if i == 1 && j == 1 {
                2
            } else {
                1
            };
            d.dg[k][c] - n[k][0] * d.dg[2][c] - n[k][1] * d.dg[3][c]
        };
        let eh = |k: usize, a: usize, b: usize| -> f64 {
            let c = if a == 0 && b == 0 {
                0
            } else if a == 1 && b == 1 {
                2
            } else {
                1
            };
            d.dh[k][c] - n[k][0] * d.dh[2][c] - n[k][1] * d.dh[3][c]
        };
        // Plain fiber derivative of block components along y^c (axis 2+c).
        let vg = |c: usize, i: usize, j: usize| -> f64 {
            let s = if i == 0 && j == 0 {
                0
            } else if i == 1 && j == 1 {
                2
            } else {
                1
            };
            d.dg[2 + c][s]
        };
        let vh = |c: usize, a: usize, b: usize| -> f64 {
            let s = if a == 0 && b == 0 {
                0
            } else if a == 1 && b == 1 {
                2
            } else {
                1
            };
            d.dh[2 + c][s]
        };

        let mut cc = ConnCoeffs::default();

        // L^i_jk = 1/2 g^{ir} (e_k g_jr + e_j g_kr - e_r g_jk)
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let mut v = 0.0;
                    for r in 0..2 {
                        v += sym2_get(&gi, i, r) * (eg(k, j, r) + eg(j, k, r) - eg(r, j, k));
                    }
                    cc.l_h[i][j][k] = 0.5 * v;
                }
            }
        }
        // L^a_bk = d_b N_k^a + 1/2 h^{ac} (e_k h_bc - h_dc d_b N_k^d - h_db d_c N_k^d)
        for a in 0..2 {
            for b in 0..2 {
                for k in 0..2 {
                    let mut v = d.dn[2 + b][k][a];
                    for c in 0..2 {
                        let mut inner = eh(k, b, c);
                        for dd in 0..2 {
                            inner -= sym2_get(&h, dd, c) * d.dn[2 + b][k][dd];
                            inner -= sym2_get(&h, dd, b) * d.dn[2 + c][k][dd];
                        }
                        v += 0.5 * sym2_get(&hi, a, c) * inner;
                    }
                    cc.l_v[a][b][k] = v;
                }
            }
        }
        // C^i_jc = 1/2 g^{ik} d_c g_jk
        for i in 0..2 {
            for j in 0..2 {
                for c in 0..2 {
                    let mut v = 0.0;
                    for k in 0..2 {
                        v += sym2_get(&gi, i, k) * vg(c, j, k);
                    }
                    cc.c_h[i][j][c] = 0.5 * v;
                }
            }
        }
        // C^a_bc = 1/2 h^{ad} (d_c h_bd + d_b h_cd - d_d h_bc)
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    let mut v = 0.0;
                    for dd in 0..2 {
                        v += sym2_get(&hi, a, dd) * (vh(c, b, dd) + vh(b, c, dd) - vh(dd, b, c));
                    }
                    cc.c_v[a][b][c] = 0.5 * v;
                }
            }
        }
        cc
    }
}

/// How a distinguished connection is realized.
#[derive(Debug, Clone)]
enum ConnKind {
    /// Canonical connection of the owning metric.
    Canonical,
    /// Block projection of the Levi-Civita connection of the full metric.
    LeviCivita,
    /// Explicitly sampled coefficient fields (tests, external data).
    Sampled(Box<SampledCoeffs>),
}

#[derive(Debug, Clone)]
struct SampledCoeffs {
    l_h: Vec<Field>,
    l_v: Vec<Field>,
    c_h: Vec<Field>,
    c_v: Vec<Field>,
}

/// A distinguished connection bound to a metric.
#[derive(Debug, Clone)]
pub struct DConnection {
    metric: Arc<DMetric>,
    kind: ConnKind,
}

/// Canonical distinguished connection of a metric.
pub fn canonical_dconnection(metric: &Arc<DMetric>) -> DConnection {
    DConnection { metric: Arc::clone(metric), kind: ConnKind::Canonical }
}

/// Levi-Civita connection of the full coordinate metric, projected onto the
/// four distinguished blocks of the tilted frame.
pub fn levi_civita(metric: &Arc<DMetric>) -> DConnection {
    DConnection { metric: Arc::clone(metric), kind: ConnKind::LeviCivita }
}

impl DConnection {
    pub fn metric(&self) -> &Arc<DMetric> {
        &self.metric
    }

    /// Build a connection from explicit coefficient fields, each block a
    /// row-major `[2][2][2]` list of fields.
    pub fn from_fields(
        metric: &Arc<DMetric>,
        l_h: Vec<Field>,
        l_v: Vec<Field>,
        c_h: Vec<Field>,
        c_v: Vec<Field>,
    ) -> Result<Self> {
        for block in [&l_h, &l_v, &c_h, &c_v] {
            if block.len() != 8 {
                return Err(Error::Config("connection block needs 8 coefficient fields".into()));
            }
        }
        Ok(DConnection {
            metric: Arc::clone(metric),
            kind: ConnKind::Sampled(Box::new(SampledCoeffs { l_h, l_v, c_h, c_v })),
        })
    }

    /// Coefficients at a node.
    pub fn at(&self, idx: [usize; 4]) -> ConnCoeffs {
        match &self.kind {
            ConnKind::Canonical => self.metric.canonical_coeffs_at(idx),
            ConnKind::LeviCivita => curvature::lc_block_coeffs_at(&self.metric, idx),
            ConnKind::Sampled(s) => {
                let mut cc = ConnCoeffs::default();
                for a in 0..2 {
                    for b in 0..2 {
                        for c in 0..2 {
                            let f = (a * 2 + b) * 2 + c;
                            cc.l_h[a][b][c] = s.l_h[f].at(idx);
                            cc.l_v[a][b][c] = s.l_v[f].at(idx);
                            cc.c_h[a][b][c] = s.c_h[f].at(idx);
                            cc.c_v[a][b][c] = s.c_v[f].at(idx);
                        }
                    }
                }
                cc
            }
        }
    }

    /// Materialize one coefficient field of a block
    /// (`block` is one of "l_h", "l_v", "c_h", "c_v").
    pub fn coefficient_field(&self, block: &str, a: usize, b: usize, c: usize) -> Result<Field> {
        if a > 1 || b > 1 || c > 1 {
            return Err(Error::Config("connection coefficient index out of range".into()));
        }
        let chart = self.metric.chart();
        let mut out = Field::zeros(chart);
        for idx in chart.indices() {
            let cc = self.at(idx);
            let v = match block {
                "l_h" => cc.l_h[a][b][c],
                "l_v" => cc.l_v[a][b][c],
                "c_h" => cc.c_h[a][b][c],
                "c_v" => cc.c_v[a][b][c],
                _ => return Err(Error::Config(format!("unknown connection block '{block}'"))),
            };
            out.set(idx, v);
        }
        Ok(out)
    }
}

/// Max-norm of the covariant derivative of both metric blocks under a
/// distinguished connection; zero (to rounding) for the canonical one.
pub fn metric_compat_residual(metric: &DMetric, conn: &DConnection) -> f64 {
    let chart = metric.chart();
    let mut worst = 0.0_f64;
    for idx in chart.indices() {
        let cc = conn.at(idx);
        let g = metric.g_at(idx);
        let h = metric.h_at(idx);
        let d = metric.metric_derivs(idx);
        let n = metric.n_at(idx);

        let comp = |i: usize, j: usize| -> usize {
            if i == 0 && j == 0 {
                0
            } else if i == 1 && j == 1 {
                2
            } else {
                1
            }
        };

        // Dk g_ij = e_k g_ij - L^m_ik g_mj - L^m_jk g_im
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let c = comp(i, j);
                    let ekg = d.dg[k][c] - n[k][0] * d.dg[2][c] - n[k][1] * d.dg[3][c];
                    let mut v = ekg;
                    for m in 0..2 {
                        v -= cc.l_h[m][i][k] * sym2_get(&g, m, j);
                        v -= cc.l_h[m][j][k] * sym2_get(&g, i, m);
                    }
                    worst = worst.max(v.abs());
                }
            }
        }
        // Dc g_ij = d_c g_ij - C^m_ic g_mj - C^m_jc g_im
        for c in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let s = comp(i, j);
                    let mut v = d.dg[2 + c][s];
                    for m in 0..2 {
                        v -= cc.c_h[m][i][c] * sym2_get(&g, m, j);
                        v -= cc.c_h[m][j][c] * sym2_get(&g, i, m);
                    }
                    worst = worst.max(v.abs());
                }
            }
        }
        // Dk h_ab = e_k h_ab - L^c_ak h_cb - L^c_bk h_ac
        for k in 0..2 {
            for a in 0..2 {
                for b in 0..2 {
                    let s = comp(a, b);
                    let ekh = d.dh[k][s] - n[k][0] * d.dh[2][s] - n[k][1] * d.dh[3][s];
                    let mut v = ekh;
                    for cch in 0..2 {
                        v -= cc.l_v[cch][a][k] * sym2_get(&h, cch, b);
                        v -= cc.l_v[cch][b][k] * sym2_get(&h, a, cch);
                    }
                    worst = worst.max(v.abs());
                }
            }
        }
        // Dc h_ab = d_c h_ab - C^d_ac h_db - C^d_bc h_ad
        for c in 0..2 {
            for a in 0..2 {
                for b in 0..2 {
                    let s = comp(a, b);
                    let mut v = d.dh[2 + c][s];
                    for dd in 0..2 {
                        v -= cc.c_v[dd][a][c] * sym2_get(&h, dd, b);
                        v -= cc.c_v[dd][b][c] * sym2_get(&h, a, dd);
                    }
                    worst = worst.max(v.abs());
                }
            }
        }
    }
    worst
}

/// Max-norms of the four zero-torsion (Levi-Civita reduction) constraints
/// in ansatz variables `w_i = N_i^3`, `n_i = N_i^4`, `h4 = h_44`:
///
/// 1. `d_t w_i - e_i ln|h4|`
/// 2. `e_2 w_1 - e_1 w_2`
/// 3. `d_t n_i`
/// 4. `d_1 n_2 - d_2 n_1`
#[derive(Debug, Clone, serde::Serialize)]
pub struct LcConstraintResidual {
    pub w_t_vs_dlnh4: f64,
    pub w_curl: f64,
    pub n_t: f64,
    pub n_curl: f64,
}

impl LcConstraintResidual {
    pub fn max(&self) -> f64 {
        self.w_t_vs_dlnh4.max(self.w_curl).max(self.n_t).max(self.n_curl)
    }
}

pub fn lc_constraint_residual(metric: &DMetric) -> LcConstraintResidual {
    let chart = metric.chart();
    let mut r = LcConstraintResidual { w_t_vs_dlnh4: 0.0, w_curl: 0.0, n_t: 0.0, n_curl: 0.0 };
    // ln|h4| as a field for elongated differentiation
    let mut ln_h4 = Field::zeros(chart);
    for idx in chart.indices() {
        ln_h4.set(idx, metric.h[2].at(idx).abs().ln());
    }
    for idx in chart.indices() {
        for i in 0..2 {
            let w_t = metric.n[i][0].deriv(idx, AX_T);
            let e_i_lnh4 = metric.elongated_deriv(&ln_h4, idx, i);
            r.w_t_vs_dlnh4 = r.w_t_vs_dlnh4.max((w_t - e_i_lnh4).abs());
            r.n_t = r.n_t.max(metric.n[i][1].deriv(idx, AX_T).abs());
        }
        let curl_w = metric.elongated_deriv(&metric.n[1][0], idx, 0)
            - metric.elongated_deriv(&metric.n[0][0], idx, 1);
        r.w_curl = r.w_curl.max(curl_w.abs());
        let curl_n = metric.n[1][1].deriv(idx, 0) - metric.n[0][1].deriv(idx, 1);
        r.n_curl = r.n_curl.max(curl_n.abs());
    }
    r
}

/// Diagonal mixed-index source `diag[lambda_h, lambda_h, lambda_v, lambda_v]`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SourceSpec {
    pub lambda_h: f64,
    pub lambda_v: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Smooth, safely nondegenerate metric family driven by six amplitudes.
    fn bumpy_metric(a: [f64; 6]) -> Arc<DMetric> {
        let chart = GridChart::unit([7, 5, 5, 3]);
        let g11 = Field::from_fn(&chart, |p| 1.0 + a[0] * (p[0] + 0.7 * p[2]).sin());
        let g12 = Field::from_fn(&chart, |p| a[1] * (p[1] + p[3]).cos());
        let g22 = Field::from_fn(&chart, |p| 1.0 + a[2] * (p[1] * p[2]).sin());
        let h33 = Field::from_fn(&chart, |p| 1.0 + a[3] * (p[2] + p[0]).cos());
        let h34 = Field::from_fn(&chart, |p| a[4] * (p[3] * p[0]).sin());
        let h44 = Field::from_fn(&chart, |p| 1.0 + a[5] * (p[3] - p[1]).sin());
        let n13 = Field::from_fn(&chart, |p| a[0] * (p[0] * p[2]).cos());
        let n14 = Field::from_fn(&chart, |p| a[1] * (p[1] + p[2]).sin());
        let n23 = Field::from_fn(&chart, |p| a[2] * (p[0] - p[3]).sin());
        let n24 = Field::from_fn(&chart, |p| a[3] * (p[1] * p[3]).cos());
        Arc::new(
            DMetric::new(&chart, [g11, g12, g22], [h33, h34, h44], [[n13, n14], [n23, n24]])
                .unwrap(),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        /// The canonical connection annihilates both metric blocks for any
        /// smooth nondegenerate metric, down to rounding.
        #[test]
        fn canonical_compatibility_is_universal(
            amps in proptest::array::uniform6(-0.3..0.3f64),
        ) {
            let m = bumpy_metric(amps);
            let conn = canonical_dconnection(&m);
            let r = metric_compat_residual(&m, &conn);
            prop_assert!(r < 1e-10, "compatibility residual {}", r);
        }

        /// Volume density matches the determinant of the coordinate metric:
        /// the N-elongation is unimodular.
        #[test]
        fn coordinate_determinant_factorizes(
            amps in proptest::array::uniform6(-0.3..0.3f64),
        ) {
            let m = bumpy_metric(amps);
            let idx = [3, 2, 2, 1];
            let gm = m.coord_metric_at(idx);
            let det4 = nalgebra::Matrix4::from_fn(|r, c| gm[r][c]).determinant();
            let blocks = sym2_det(&m.g_at(idx)) * sym2_det(&m.h_at(idx));
            prop_assert!((det4 - blocks).abs() < 1e-10 * blocks.abs().max(1.0));
        }
    }
}
