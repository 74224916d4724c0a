//! Pointwise curvature of distinguished connections.
//!
//! The distinguished connection is transformed to the coordinate frame,
//! where the standard curvature formula applies with plain partial
//! derivatives; the contracted Ricci tensor is then projected back onto
//! the tilted frame.  Everything is evaluated per node so no rank-3
//! coefficient fields are ever materialized, which keeps large charts
//! affordable.

use std::sync::Arc;

use crate::grid::{Field, GridChart, AX_T, AX_Y4};

use super::{sym2_get, sym2_inv, ConnCoeffs, DMetric, SourceSpec, Sym2};

/// Coordinate-frame connection coefficients at one node:
/// `gamma[mu][nu][rho]` is the `d/dx^rho` component of the derivative of
/// `d/dx^nu` along `d/dx^mu`.
pub type Gamma = [[[f64; 4]; 4]; 4];

/// Canonical distinguished connection pushed to the coordinate frame.
pub fn gamma_canonical_coord_at(m: &DMetric, idx: [usize; 4]) -> Gamma {
    let cc = m.canonical_coeffs_at(idx);
    let n = m.n_at(idx);
    let dn = |mu: usize, i: usize, a: usize| m.n[i][a].deriv(idx, mu);

    let mut g = [[[0.0; 4]; 4]; 4];
    // mu, nu both horizontal
    for mm in 0..2 {
        for nn in 0..2 {
            // h-frame output L^i_{nn,mm} + N_mm^c C^i_{nn,c}, then convert
            // e_i = d_i - N_i^a d_a to coordinates.
            let mut ti = [0.0; 2];
            for i in 0..2 {
                let mut v = cc.l_h[i][nn][mm];
                for c in 0..2 {
                    v += n[mm][c] * cc.c_h[i][nn][c];
                }
                ti[i] = v;
            }
            for i in 0..2 {
                g[mm][nn][i] = ti[i];
            }
            for a in 0..2 {
                let mut v = dn(mm, nn, a);
                for i in 0..2 {
                    v -= n[i][a] * ti[i];
                }
                for b in 0..2 {
                    v += n[nn][b] * cc.l_v[a][b][mm];
                    for c in 0..2 {
                        v += n[mm][c] * n[nn][b] * cc.c_v[a][b][c];
                    }
                }
                g[mm][nn][2 + a] = v;
            }
        }
        // mu horizontal, nu vertical: output stays vertical
        for e in 0..2 {
            for a in 0..2 {
                let mut v = cc.l_v[a][e][mm];
                for c in 0..2 {
                    v += n[mm][c] * cc.c_v[a][e][c];
                }
                g[mm][2 + e][2 + a] = v;
            }
        }
    }
    // mu vertical
    for e in 0..2 {
        for nn in 0..2 {
            for i in 0..2 {
                g[2 + e][nn][i] = cc.c_h[i][nn][e];
            }
            for a in 0..2 {
                let mut v = dn(2 + e, nn, a);
                for i in 0..2 {
                    v -= n[i][a] * cc.c_h[i][nn][e];
                }
                for b in 0..2 {
                    v += n[nn][b] * cc.c_v[a][b][e];
                }
                g[2 + e][nn][2 + a] = v;
            }
        }
        for dd in 0..2 {
            for a in 0..2 {
                g[2 + e][2 + dd][2 + a] = cc.c_v[a][dd][e];
            }
        }
    }
    g
}

/// Coordinate metric and its four coordinate derivatives at a node,
/// assembled by the product rule from the block component derivatives.
fn coord_metric_with_derivs(m: &DMetric, idx: [usize; 4]) -> ([[f64; 4]; 4], [[[f64; 4]; 4]; 4]) {
    let gm = m.coord_metric_at(idx);
    let h = m.h_at(idx);
    let n = m.n_at(idx);
    let d = m.metric_derivs(idx);
    let comp = |i: usize, j: usize| -> usize {
        if i == 0 && j == 0 {
            0
        } else if i == 1 && j == 1 {
            2
        } else {
            1
        }
    };
    let mut dgm = [[[0.0; 4]; 4]; 4];
    for mu in 0..4 {
        for i in 0..2 {
            for j in i..2 {
                let mut v = d.dg[mu][comp(i, j)];
                for a in 0..2 {
                    for b in 0..2 {
                        v += d.dh[mu][comp(a, b)] * n[i][a] * n[j][b]
                            + sym2_get(&h, a, b) * (d.dn[mu][i][a] * n[j][b] + n[i][a] * d.dn[mu][j][b]);
                    }
                }
                dgm[mu][i][j] = v;
                dgm[mu][j][i] = v;
            }
            for a in 0..2 {
                let mut v = 0.0;
                for b in 0..2 {
                    v += d.dh[mu][comp(a, b)] * n[i][b] + sym2_get(&h, a, b) * d.dn[mu][i][b];
                }
                dgm[mu][i][2 + a] = v;
                dgm[mu][2 + a][i] = v;
            }
        }
        for a in 0..2 {
            for b in a..2 {
                let v = d.dh[mu][comp(a, b)];
                dgm[mu][2 + a][2 + b] = v;
                dgm[mu][2 + b][2 + a] = v;
            }
        }
    }
    (gm, dgm)
}

/// Exact blockwise inverse of the coordinate metric.
fn coord_metric_inv(m: &DMetric, idx: [usize; 4]) -> [[f64; 4]; 4] {
    let gi = sym2_inv(&m.g_at(idx));
    let hi = sym2_inv(&m.h_at(idx));
    let n = m.n_at(idx);
    let mut inv = [[0.0; 4]; 4];
    for i in 0..2 {
        for j in 0..2 {
            inv[i][j] = sym2_get(&gi, i, j);
        }
        for a in 0..2 {
            let mut v = 0.0;
            for j in 0..2 {
                v -= sym2_get(&gi, i, j) * n[j][a];
            }
            inv[i][2 + a] = v;
            inv[2 + a][i] = v;
        }
    }
    for a in 0..2 {
        for b in 0..2 {
            let mut v = sym2_get(&hi, a, b);
            for i in 0..2 {
                for j in 0..2 {
                    v += n[i][a] * sym2_get(&gi, i, j) * n[j][b];
                }
            }
            inv[2 + a][2 + b] = v;
        }
    }
    inv
}

/// Levi-Civita connection of the full coordinate metric at one node.
pub fn gamma_lc_coord_at(m: &DMetric, idx: [usize; 4]) -> Gamma {
    let (_, dgm) = coord_metric_with_derivs(m, idx);
    let inv = coord_metric_inv(m, idx);
    let mut g = [[[0.0; 4]; 4]; 4];
    for mu in 0..4 {
        for nu in 0..4 {
            for rho in 0..4 {
                let mut v = 0.0;
                for si in 0..4 {
                    v += inv[rho][si] * (dgm[mu][si][nu] + dgm[nu][si][mu] - dgm[si][mu][nu]);
                }
                g[mu][nu][rho] = 0.5 * v;
            }
        }
    }
    g
}

/// Distinguished blocks of the Levi-Civita connection in the tilted frame.
pub(super) fn lc_block_coeffs_at(m: &DMetric, idx: [usize; 4]) -> ConnCoeffs {
    let g = gamma_lc_coord_at(m, idx);
    let n = m.n_at(idx);
    let en = |k: usize, j: usize, a: usize| -> f64 {
        // e_k N_j^a
        m.n[j][a].deriv(idx, k) - n[k][0] * m.n[j][a].deriv(idx, AX_T) - n[k][1] * m.n[j][a].deriv(idx, AX_Y4)
    };
    // nabla_{e_k} e_j in coordinates, then contract with the dual frame.
    let cov_h = |k: usize, j: usize| -> [f64; 4] {
        let mut out = [0.0; 4];
        for b in 0..2 {
            out[2 + b] -= en(k, j, b);
        }
        for rho in 0..4 {
            let mut v = g[k][j][rho];
            for c in 0..2 {
                v -= n[k][c] * g[2 + c][j][rho];
            }
            for b in 0..2 {
                v -= n[j][b] * g[k][2 + b][rho];
                for c in 0..2 {
                    v += n[k][c] * n[j][b] * g[2 + c][2 + b][rho];
                }
            }
            out[rho] += v;
        }
        out
    };
    let cov_hv = |k: usize, b: usize| -> [f64; 4] {
        // nabla_{e_k} d_b
        let mut out = [0.0; 4];
        for rho in 0..4 {
            let mut v = g[k][2 + b][rho];
            for c in 0..2 {
                v -= n[k][c] * g[2 + c][2 + b][rho];
            }
            out[rho] = v;
        }
        out
    };
    let mut cc = ConnCoeffs::default();
    for j in 0..2 {
        for k in 0..2 {
            let v = cov_h(k, j);
            for i in 0..2 {
                cc.l_h[i][j][k] = v[i];
            }
        }
    }
    for b in 0..2 {
        for k in 0..2 {
            let v = cov_hv(k, b);
            for a in 0..2 {
                let mut w = v[2 + a];
                for i in 0..2 {
                    w += n[i][a] * v[i];
                }
                cc.l_v[a][b][k] = w;
            }
        }
    }
    for j in 0..2 {
        for c in 0..2 {
            for i in 0..2 {
                let mut v = g[2 + c][j][i];
                for b in 0..2 {
                    v -= n[j][b] * g[2 + c][2 + b][i];
                }
                cc.c_h[i][j][c] = v;
            }
        }
    }
    for b in 0..2 {
        for c in 0..2 {
            for a in 0..2 {
                let mut v = g[2 + c][2 + b][2 + a];
                for i in 0..2 {
                    v += n[i][a] * g[2 + c][2 + b][i];
                }
                cc.c_v[a][b][c] = v;
            }
        }
    }
    cc
}

/// Coordinate-frame Ricci tensor by nested finite differences of a
/// pointwise connection evaluator.
fn ricci_coord_at(
    chart: &GridChart,
    idx: [usize; 4],
    eval: &mut impl FnMut([usize; 4]) -> Gamma,
) -> [[f64; 4]; 4] {
    let g0 = eval(idx);
    let mut dg = [[[[0.0f64; 4]; 4]; 4]; 4];
    for mu in 0..4 {
        let (pts, cnt) = chart.deriv_points(idx, mu);
        for (p, w) in pts.iter().take(cnt) {
            let gp = if *p == idx { g0 } else { eval(*p) };
            for x in 0..4 {
                for y in 0..4 {
                    for z in 0..4 {
                        dg[mu][x][y][z] += w * gp[x][y][z];
                    }
                }
            }
        }
    }
    // R_sn = d_m G[n][s][m] - d_n G[m][s][m]
    //      + G[n][s][l] G[m][l][m] - G[m][s][l] G[n][l][m]
    let mut ric = [[0.0; 4]; 4];
    for s in 0..4 {
        for nn in 0..4 {
            let mut v = 0.0;
            for mm in 0..4 {
                v += dg[mm][nn][s][mm] - dg[nn][mm][s][mm];
                for l in 0..4 {
                    v += g0[nn][s][l] * g0[mm][l][mm] - g0[mm][s][l] * g0[nn][l][mm];
                }
            }
            ric[s][nn] = v;
        }
    }
    ric
}

/// Ricci blocks and curvature scalars of the canonical connection at a node,
/// expressed in the tilted frame.
#[derive(Debug, Clone, Copy, Default)]
pub struct CurvatureAt {
    /// `Ric(e_i, e_j)`
    pub ric_hh: [[f64; 2]; 2],
    /// `Ric(e_i, d_a)`
    pub ric_hv: [[f64; 2]; 2],
    /// `Ric(d_a, e_i)`
    pub ric_vh: [[f64; 2]; 2],
    /// `Ric(d_a, d_b)`
    pub ric_vv: [[f64; 2]; 2],
    pub scalar_h: f64,
    pub scalar_v: f64,
}

impl CurvatureAt {
    pub fn scalar(&self) -> f64 {
        self.scalar_h + self.scalar_v
    }
}

/// Canonical curvature at a node.
pub fn curvature_at(m: &DMetric, idx: [usize; 4]) -> CurvatureAt {
    let chart = Arc::clone(m.chart());
    let ric = ricci_coord_at(&chart, idx, &mut |p| gamma_canonical_coord_at(m, p));
    project_ricci(m, idx, &ric)
}

fn project_ricci(m: &DMetric, idx: [usize; 4], ric: &[[f64; 4]; 4]) -> CurvatureAt {
    let n = m.n_at(idx);
    let mut out = CurvatureAt::default();
    for i in 0..2 {
        for j in 0..2 {
            let mut v = ric[i][j];
            for b in 0..2 {
                v -= n[j][b] * ric[i][2 + b];
                v -= n[i][b] * ric[2 + b][j];
                for a in 0..2 {
                    v += n[i][a] * n[j][b] * ric[2 + a][2 + b];
                }
            }
            out.ric_hh[i][j] = v;
        }
        for a in 0..2 {
            let mut v = ric[i][2 + a];
            let mut w = ric[2 + a][i];
            for b in 0..2 {
                v -= n[i][b] * ric[2 + b][2 + a];
                w -= n[i][b] * ric[2 + a][2 + b];
            }
            out.ric_hv[i][a] = v;
            out.ric_vh[a][i] = w;
        }
    }
    for a in 0..2 {
        for b in 0..2 {
            out.ric_vv[a][b] = ric[2 + a][2 + b];
        }
    }
    let gi = sym2_inv(&m.g_at(idx));
    let hi = sym2_inv(&m.h_at(idx));
    for i in 0..2 {
        for j in 0..2 {
            out.scalar_h += sym2_get(&gi, i, j) * out.ric_hh[i][j];
            out.scalar_v += sym2_get(&hi, i, j) * out.ric_vv[i][j];
        }
    }
    out
}

/// Mixed-index Einstein tensor `E^alpha_beta = R^alpha_beta
/// - (R + S)/2 delta^alpha_beta` of the canonical connection at a node.
pub fn einstein_mixed_at(m: &DMetric, idx: [usize; 4]) -> [[f64; 4]; 4] {
    let cur = curvature_at(m, idx);
    einstein_mixed_from(m, idx, &cur)
}

fn einstein_mixed_from(m: &DMetric, idx: [usize; 4], cur: &CurvatureAt) -> [[f64; 4]; 4] {
    let gi = sym2_inv(&m.g_at(idx));
    let hi = sym2_inv(&m.h_at(idx));
    let half_scalar = 0.5 * (cur.scalar_h + cur.scalar_v);
    let mut e = [[0.0; 4]; 4];
    for i in 0..2 {
        for j in 0..2 {
            let mut up = 0.0;
            let mut mixed = 0.0;
            for k in 0..2 {
                up += sym2_get(&gi, i, k) * cur.ric_hh[k][j];
                mixed += sym2_get(&gi, i, k) * cur.ric_hv[k][j];
            }
            e[i][j] = up;
            e[i][2 + j] = mixed;
        }
        e[i][i] -= half_scalar;
    }
    for a in 0..2 {
        for b in 0..2 {
            let mut up = 0.0;
            let mut mixed = 0.0;
            for c in 0..2 {
                up += sym2_get(&hi, a, c) * cur.ric_vv[c][b];
                mixed += sym2_get(&hi, a, c) * cur.ric_vh[c][b];
            }
            e[2 + a][2 + b] = up;
            e[2 + a][b] = mixed;
        }
        e[2 + a][2 + a] -= half_scalar;
    }
    e
}

/// Pointwise max-abs deviation of the mixed Einstein tensor from the
/// diagonal source, as a field, together with its chart-wide max.
pub fn einstein_residual(m: &DMetric, source: SourceSpec) -> (Field, f64) {
    let chart = Arc::clone(m.chart());
    let mut out = Field::zeros(&chart);
    let mut worst = 0.0_f64;
    let src = [source.lambda_h, source.lambda_h, source.lambda_v, source.lambda_v];
    for idx in chart.indices() {
        let mut e = einstein_mixed_at(m, idx);
        for al in 0..4 {
            e[al][al] -= src[al];
        }
        let mut local = 0.0_f64;
        for row in &e {
            for v in row {
                local = local.max(v.abs());
            }
        }
        out.set(idx, local);
        worst = worst.max(local);
    }
    (out, worst)
}

/// Materialized curvature fields of the canonical connection.
#[derive(Debug, Clone)]
pub struct CurvatureBundle {
    /// Row-major `[i][j]` components of `Ric(e_i, e_j)`.
    pub ric_hh: Vec<Field>,
    /// Row-major `[i][a]` components of `Ric(e_i, d_a)`.
    pub ric_hv: Vec<Field>,
    /// Row-major `[a][i]` components of `Ric(d_a, e_i)`.
    pub ric_vh: Vec<Field>,
    /// Row-major `[a][b]` components of `Ric(d_a, d_b)`.
    pub ric_vv: Vec<Field>,
    pub scalar_h: Field,
    pub scalar_v: Field,
}

pub fn curvature_bundle(m: &DMetric) -> CurvatureBundle {
    let chart = Arc::clone(m.chart());
    let mut b = CurvatureBundle {
        ric_hh: (0..4).map(|_| Field::zeros(&chart)).collect(),
        ric_hv: (0..4).map(|_| Field::zeros(&chart)).collect(),
        ric_vh: (0..4).map(|_| Field::zeros(&chart)).collect(),
        ric_vv: (0..4).map(|_| Field::zeros(&chart)).collect(),
        scalar_h: Field::zeros(&chart),
        scalar_v: Field::zeros(&chart),
    };
    for idx in chart.indices() {
        let cur = curvature_at(m, idx);
        for i in 0..2 {
            for j in 0..2 {
                b.ric_hh[i * 2 + j].set(idx, cur.ric_hh[i][j]);
                b.ric_hv[i * 2 + j].set(idx, cur.ric_hv[i][j]);
                b.ric_vh[i * 2 + j].set(idx, cur.ric_vh[i][j]);
                b.ric_vv[i * 2 + j].set(idx, cur.ric_vv[i][j]);
            }
        }
        b.scalar_h.set(idx, cur.scalar_h);
        b.scalar_v.set(idx, cur.scalar_v);
    }
    b
}

/// Scalar curvature of the Levi-Civita connection of the full coordinate
/// metric at a node.
pub fn lc_scalar_at(m: &DMetric, idx: [usize; 4]) -> f64 {
    let chart = Arc::clone(m.chart());
    let ric = ricci_coord_at(&chart, idx, &mut |p| gamma_lc_coord_at(m, p));
    let inv = coord_metric_inv(m, idx);
    let mut s = 0.0;
    for a in 0..4 {
        for b in 0..4 {
            s += inv[a][b] * ric[a][b];
        }
    }
    s
}

/// Chart-wide max-abs component of the distortion
/// `Z = Gamma_canonical - Gamma_LC` in the coordinate frame.
pub fn distortion_norm(m: &DMetric) -> f64 {
    let chart = m.chart();
    let mut worst = 0.0_f64;
    for idx in chart.indices() {
        let gc = gamma_canonical_coord_at(m, idx);
        let gl = gamma_lc_coord_at(m, idx);
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    worst = worst.max((gc[a][b][c] - gl[a][b][c]).abs());
                }
            }
        }
    }
    worst
}

/// Laplace–Beltrami operator of the canonical connection acting on scalars,
/// with the inverse blocks and contracted connection coefficients
/// materialized once per metric.
#[derive(Debug, Clone)]
pub struct ScalarLaplacian {
    metric: Arc<DMetric>,
    gi: [Field; 3],
    hi: [Field; 3],
    /// `g^{ij} L^k_{ji}`
    tk: [Field; 2],
    /// `h^{ab} C^c_{ba}`
    tc: [Field; 2],
}

/// Precomputed first derivatives of one scalar, reused by Hessian requests.
#[derive(Debug, Clone)]
pub struct ScalarDerivs {
    /// Elongated horizontal derivatives `e_1 f`, `e_2 f`.
    pub ef: [Field; 2],
    /// Fiber derivative along `y4` (for the mixed vertical second derivative).
    pub fy: Field,
}

impl ScalarLaplacian {
    pub fn new(metric: &Arc<DMetric>) -> Self {
        let chart = Arc::clone(metric.chart());
        let mut gi = [Field::zeros(&chart), Field::zeros(&chart), Field::zeros(&chart)];
        let mut hi = [Field::zeros(&chart), Field::zeros(&chart), Field::zeros(&chart)];
        let mut tk = [Field::zeros(&chart), Field::zeros(&chart)];
        let mut tc = [Field::zeros(&chart), Field::zeros(&chart)];
        for idx in chart.indices() {
            let giv = sym2_inv(&metric.g_at(idx));
            let hiv = sym2_inv(&metric.h_at(idx));
            for c in 0..3 {
                gi[c].set(idx, giv[c]);
                hi[c].set(idx, hiv[c]);
            }
            let cc = metric.canonical_coeffs_at(idx);
            for k in 0..2 {
                let mut sh = 0.0;
                let mut sv = 0.0;
                for i in 0..2 {
                    for j in 0..2 {
                        sh += sym2_get(&giv, i, j) * cc.l_h[k][j][i];
                        sv += sym2_get(&hiv, i, j) * cc.c_v[k][j][i];
                    }
                }
                tk[k].set(idx, sh);
                tc[k].set(idx, sv);
            }
        }
        ScalarLaplacian { metric: Arc::clone(metric), gi, hi, tk, tc }
    }

    pub fn metric(&self) -> &Arc<DMetric> {
        &self.metric
    }

    pub fn derivs(&self, f: &Field) -> ScalarDerivs {
        ScalarDerivs {
            ef: [
                self.metric.elongated_deriv_field(f, 0),
                self.metric.elongated_deriv_field(f, 1),
            ],
            fy: f.deriv_field(AX_Y4),
        }
    }

    /// `Lap f` at a node, given the precomputed first derivatives.
    pub fn apply_at(&self, f: &Field, d: &ScalarDerivs, idx: [usize; 4]) -> f64 {
        let m = &self.metric;
        let gi: Sym2 = [self.gi[0].at(idx), self.gi[1].at(idx), self.gi[2].at(idx)];
        let hi: Sym2 = [self.hi[0].at(idx), self.hi[1].at(idx), self.hi[2].at(idx)];
        let mut acc = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                acc += sym2_get(&gi, i, j) * m.elongated_deriv(&d.ef[j], idx, i);
            }
        }
        for k in 0..2 {
            acc -= self.tk[k].at(idx) * d.ef[k].at(idx);
        }
        let hess_tt = f.deriv2(idx, AX_T);
        let hess_yy = f.deriv2(idx, AX_Y4);
        let hess_ty = d.fy.deriv(idx, AX_T);
        acc += hi[0] * hess_tt + 2.0 * hi[1] * hess_ty + hi[2] * hess_yy;
        acc -= self.tc[0].at(idx) * f.deriv(idx, AX_T) + self.tc[1].at(idx) * f.deriv(idx, AX_Y4);
        acc
    }

    /// Whole-field Laplacian.
    pub fn apply(&self, f: &Field) -> Field {
        let d = self.derivs(f);
        let chart = self.metric.chart();
        let mut out = Field::zeros(chart);
        for idx in chart.indices() {
            let v = self.apply_at(f, &d, idx);
            out.set(idx, v);
        }
        out
    }

    /// Horizontal covariant Hessian `e_i e_j f - L^k_{ji} e_k f`,
    /// symmetrized.
    pub fn hess_h_at(&self, d: &ScalarDerivs, idx: [usize; 4]) -> [[f64; 2]; 2] {
        let m = &self.metric;
        let cc = m.canonical_coeffs_at(idx);
        let mut hess = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let mut v = m.elongated_deriv(&d.ef[j], idx, i);
                for k in 0..2 {
                    v -= cc.l_h[k][j][i] * d.ef[k].at(idx);
                }
                hess[i][j] = v;
            }
        }
        let off = 0.5 * (hess[0][1] + hess[1][0]);
        hess[0][1] = off;
        hess[1][0] = off;
        hess
    }

    /// Vertical covariant Hessian `d_a d_b f - C^c_{ba} d_c f`.
    pub fn hess_v_at(&self, f: &Field, d: &ScalarDerivs, idx: [usize; 4]) -> [[f64; 2]; 2] {
        let m = &self.metric;
        let cc = m.canonical_coeffs_at(idx);
        let second = [
            [f.deriv2(idx, AX_T), d.fy.deriv(idx, AX_T)],
            [d.fy.deriv(idx, AX_T), f.deriv2(idx, AX_Y4)],
        ];
        let grad = [f.deriv(idx, AX_T), f.deriv(idx, AX_Y4)];
        let mut hess = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                let mut v = second[a][b];
                for c in 0..2 {
                    v -= cc.c_v[c][b][a] * grad[c];
                }
                hess[a][b] = v;
            }
        }
        let off = 0.5 * (hess[0][1] + hess[1][0]);
        hess[0][1] = off;
        hess[1][0] = off;
        hess
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{
        canonical_dconnection, levi_civita, lc_constraint_residual, metric_compat_residual,
        DConnection,
    };
    use crate::grid::{Axis, BoundaryKind};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    /// Polar cap of a radius-`r` round sphere in the horizontal block,
    /// flat vertical block, zero N-connection.
    fn sphere_product(n: usize, r: f64) -> Arc<DMetric> {
        let axes = [
            Axis::new("x1", 0.3 * PI, 0.7 * PI, n, BoundaryKind::Dirichlet).unwrap(),
            Axis::new("x2", 0.0, 1.0, 7, BoundaryKind::Dirichlet).unwrap(),
            Axis::new("t", 0.0, 1.0, 3, BoundaryKind::Dirichlet).unwrap(),
            Axis::new("y4", 0.0, 1.0, 3, BoundaryKind::Dirichlet).unwrap(),
        ];
        let chart = Arc::new(GridChart::new(axes).unwrap());
        let g11 = Field::constant(&chart, r * r);
        let g12 = Field::zeros(&chart);
        let g22 = Field::from_fn(&chart, |p| (r * p[0].sin()).powi(2));
        let one = Field::constant(&chart, 1.0);
        let zero = || Field::zeros(&chart);
        Arc::new(
            DMetric::new(
                &chart,
                [g11, g12, g22],
                [one.clone(), zero(), one],
                [[zero(), zero()], [zero(), zero()]],
            )
            .unwrap(),
        )
    }

    /// A smooth metric with nonzero N used for compatibility checks.
    fn warped_metric(counts: [usize; 4]) -> Arc<DMetric> {
        let chart = GridChart::unit(counts);
        let g11 = Field::from_fn(&chart, |p| 1.2 + 0.3 * (p[0] + 0.5 * p[2]).sin());
        let g12 = Field::from_fn(&chart, |p| 0.1 * (p[1] * p[3]).cos() - 0.05);
        let g22 = Field::from_fn(&chart, |p| 1.0 + 0.2 * (p[1] - 0.3 * p[2]).cos());
        let h33 = Field::from_fn(&chart, |p| 0.8 + 0.25 * (p[2] + p[0]).sin());
        let h34 = Field::from_fn(&chart, |p| 0.1 * (p[3] + p[1]).sin());
        let h44 = Field::from_fn(&chart, |p| 1.1 + 0.2 * (p[2] * p[3]).cos());
        let n13 = Field::from_fn(&chart, |p| 0.2 * (p[0] + p[2]).sin());
        let n14 = Field::from_fn(&chart, |p| 0.15 * (p[1] + p[3]).cos());
        let n23 = Field::from_fn(&chart, |p| -0.1 * (p[0] * p[1]).sin());
        let n24 = Field::from_fn(&chart, |p| 0.05 * (p[2] - p[1]).sin());
        Arc::new(
            DMetric::new(&chart, [g11, g12, g22], [h33, h34, h44], [[n13, n14], [n23, n24]])
                .unwrap(),
        )
    }

    #[test]
    fn flat_metric_has_no_connection_or_curvature() {
        let m = Arc::new(DMetric::flat(&GridChart::unit([7, 7, 5, 3])));
        let idx = [3, 3, 2, 1];
        let cc = m.canonical_coeffs_at(idx);
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    assert_eq!(cc.l_h[i][j][k], 0.0);
                    assert_eq!(cc.l_v[i][j][k], 0.0);
                    assert_eq!(cc.c_h[i][j][k], 0.0);
                    assert_eq!(cc.c_v[i][j][k], 0.0);
                }
            }
        }
        let cur = curvature_at(&m, idx);
        assert_eq!(cur.scalar(), 0.0);
        let (_, worst) = einstein_residual(&m, SourceSpec { lambda_h: 0.0, lambda_v: 0.0 });
        assert!(worst < 1e-12);
    }

    #[test]
    fn sphere_connection_matches_closed_form() {
        let m = sphere_product(33, 1.0);
        let idx = [20, 3, 1, 1];
        let theta = m.chart().point(idx)[0];
        let cc = m.canonical_coeffs_at(idx);
        // L^theta_phiphi = -sin cos, L^phi_thetaphi = cot
        assert_relative_eq!(cc.l_h[0][1][1], -theta.sin() * theta.cos(), epsilon = 2e-3);
        assert_relative_eq!(cc.l_h[1][0][1], theta.cos() / theta.sin(), epsilon = 2e-3);
        assert_relative_eq!(cc.l_h[1][1][0], theta.cos() / theta.sin(), epsilon = 2e-3);
        assert_relative_eq!(cc.l_h[0][0][0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn sphere_ricci_is_positive_round() {
        // Fixes the overall sign convention: the round sphere has
        // Ric = +(1/r^2) g and scalar curvature 2/r^2.
        for r in [1.0, 2.0] {
            let m = sphere_product(33, r);
            let idx = [16, 3, 1, 1];
            let theta = m.chart().point(idx)[0];
            let cur = curvature_at(&m, idx);
            assert_relative_eq!(cur.ric_hh[0][0], 1.0, max_relative = 2e-2);
            assert_relative_eq!(cur.ric_hh[1][1], theta.sin().powi(2), max_relative = 2e-2);
            assert_relative_eq!(cur.scalar_h, 2.0 / (r * r), max_relative = 2e-2);
            assert!(cur.scalar_v.abs() < 1e-10);
            assert!(cur.ric_hv[0][0].abs() < 1e-10);
        }
    }

    #[test]
    fn sphere_einstein_tensor_sits_in_vertical_slots() {
        // For the product of a round 2-sphere with a flat fiber the mixed
        // Einstein tensor is diag[0, 0, -1/r^2, -1/r^2].  The global max of
        // the residual sits on the chart edge where one-sided stencils have
        // a much larger truncation constant than the interior.
        let m = sphere_product(33, 1.0);
        let (field, worst) = einstein_residual(&m, SourceSpec { lambda_h: 0.0, lambda_v: -1.0 });
        assert!(field.at([16, 3, 1, 1]) < 1e-2, "interior residual {}", field.at([16, 3, 1, 1]));
        assert!(worst < 0.15, "edge residual {worst}");
    }

    #[test]
    fn canonical_connection_is_metric_compatible_to_rounding() {
        let m = warped_metric([9, 7, 7, 5]);
        let conn = canonical_dconnection(&m);
        let r = metric_compat_residual(&m, &conn);
        assert!(r < 1e-12, "canonical compatibility residual {r}");
    }

    #[test]
    fn sampled_closed_form_connection_is_compatible_to_truncation_only() {
        // Sampling the analytic sphere Christoffels gives a residual at the
        // finite-difference truncation level, well above the canonical one.
        let m = sphere_product(33, 1.0);
        let chart = m.chart();
        let mut l_h = Vec::new();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    l_h.push(Field::from_fn(chart, |p| {
                        let th = p[0];
                        match (i, j, k) {
                            (0, 1, 1) => -th.sin() * th.cos(),
                            (1, 0, 1) | (1, 1, 0) => th.cos() / th.sin(),
                            _ => 0.0,
                        }
                    }));
                }
            }
        }
        let zeros: Vec<Field> = (0..8).map(|_| Field::zeros(chart)).collect();
        let conn =
            DConnection::from_fields(&m, l_h, zeros.clone(), zeros.clone(), zeros).unwrap();
        let sampled = metric_compat_residual(&m, &conn);
        let canonical = metric_compat_residual(&m, &canonical_dconnection(&m));
        assert!(sampled > 1e-7 && sampled < 5e-3, "sampled residual {sampled}");
        assert!(sampled > 100.0 * canonical.max(1e-300));
    }

    #[test]
    fn product_metric_canonical_equals_levi_civita() {
        // With N = 0, g = g(x) and h = h(y) the canonical connection is the
        // Levi-Civita connection of the product, so the distortion vanishes.
        let chart = GridChart::unit([9, 7, 7, 5]);
        let g11 = Field::from_fn(&chart, |p| 1.0 + 0.3 * (p[0] + p[1]).sin());
        let g12 = Field::from_fn(&chart, |p| 0.1 * p[0] * p[1]);
        let g22 = Field::from_fn(&chart, |p| 1.2 - 0.2 * (p[1]).cos());
        let h33 = Field::from_fn(&chart, |p| 1.0 + 0.25 * (p[2] * p[3]).sin());
        let h34 = Field::from_fn(&chart, |p| 0.05 * p[2]);
        let h44 = Field::from_fn(&chart, |p| 0.9 + 0.1 * (p[3]).cos());
        let zero = || Field::zeros(&chart);
        let m = Arc::new(
            DMetric::new(
                &chart,
                [g11, g12, g22],
                [h33, h34, h44],
                [[zero(), zero()], [zero(), zero()]],
            )
            .unwrap(),
        );
        assert!(distortion_norm(&m) < 1e-11);
        let idx = [4, 3, 3, 2];
        let lc = levi_civita(&m).at(idx);
        let can = m.canonical_coeffs_at(idx);
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    assert_relative_eq!(lc.l_h[i][j][k], can.l_h[i][j][k], epsilon = 1e-11);
                    assert_relative_eq!(lc.c_v[i][j][k], can.c_v[i][j][k], epsilon = 1e-11);
                }
            }
        }
        // LC scalar curvature agrees with the canonical one here.
        let cur = curvature_at(&m, idx);
        assert_relative_eq!(lc_scalar_at(&m, idx), cur.scalar(), max_relative = 1e-6);
    }

    #[test]
    fn elongated_derivative_tilts_by_n() {
        let chart = GridChart::unit([7, 7, 7, 3]);
        let mut m = DMetric::flat(&chart);
        m.n[0][0] = Field::constant(&chart, 0.4);
        let f = Field::from_fn(&chart, |p| p[2]);
        assert_relative_eq!(m.elongated_deriv(&f, [3, 3, 3, 1], 0), -0.4, epsilon = 1e-12);
        assert_relative_eq!(m.elongated_deriv(&f, [3, 3, 3, 1], 1), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_torsion_constraints_vanish_on_trivial_metric() {
        let m = DMetric::flat(&GridChart::unit([7, 7, 5, 3]));
        let r = lc_constraint_residual(&m);
        assert_eq!(r.max(), 0.0);
    }

    #[test]
    fn laplacian_exact_on_quadratics_flat() {
        let chart = GridChart::unit([9, 7, 7, 5]);
        let m = Arc::new(DMetric::flat(&chart));
        let lap = ScalarLaplacian::new(&m);
        let f = Field::from_fn(&chart, |p| p[0] * p[0] + p[2] * p[2] - 0.5 * p[1] * p[3]);
        let out = lap.apply(&f);
        for idx in chart.indices() {
            assert_relative_eq!(out.at(idx), 4.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn laplacian_matches_sphere_eigenfunction() {
        // cos(theta) is an l = 1 spherical harmonic: Lap f = -2 f on the
        // unit sphere, with the flat fiber contributing nothing.
        let m = sphere_product(41, 1.0);
        let lap = ScalarLaplacian::new(&m);
        let f = Field::from_fn(m.chart(), |p| p[0].cos());
        let out = lap.apply(&f);
        let idx = [10, 3, 1, 1];
        let theta = m.chart().point(idx)[0];
        assert_relative_eq!(out.at(idx), -2.0 * theta.cos(), max_relative = 5e-3);
    }

    #[test]
    fn hessian_trace_reproduces_laplacian() {
        let m = warped_metric([9, 7, 7, 5]);
        let lap = ScalarLaplacian::new(&m);
        let f = Field::from_fn(m.chart(), |p| (p[0] + 0.5 * p[2]).sin() + 0.3 * p[1] * p[3]);
        let d = lap.derivs(&f);
        let idx = [4, 3, 3, 2];
        let hh = lap.hess_h_at(&d, idx);
        let hv = lap.hess_v_at(&f, &d, idx);
        let gi = sym2_inv(&m.g_at(idx));
        let hi = sym2_inv(&m.h_at(idx));
        let mut trace = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                trace += sym2_get(&gi, i, j) * hh[i][j] + sym2_get(&hi, i, j) * hv[i][j];
            }
        }
        assert_relative_eq!(trace, lap.apply_at(&f, &d, idx), epsilon = 1e-10);
    }
}
