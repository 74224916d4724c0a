//! Evolution of metric families in the flow parameter, and the coupled
//! potential equation.
//!
//! Three drivers live here: the ansatz v-block system (pointwise ODEs for
//! `h3`, `h4`), the general adapted flow `d g / d chi = -2 (Ric - lambda g)`
//! with the tilt frozen, and the two-pass scheme for the potential: the
//! metric flows forward while the conjugate density `omega = e^{-f}` is
//! integrated in decreasing `chi` (the well-posed direction), after which
//! `f = -ln omega`.

use std::sync::Arc;

use crate::ansatz::{build_w, AnsatzMetric, DEFAULT_EPS_PHI};
use crate::error::{Error, Result};
use crate::functionals::{integrate, node_weight, HALF_DIM};
use crate::geometry::{
    curvature_at, sym2_get, sym2_inv, DMetric, ScalarLaplacian, SourceSpec,
};
use crate::grid::{Field, AX_T};

/// One point of a coupled flow trajectory.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub metric: Arc<DMetric>,
    pub f_hat: Field,
    pub tau_hat: f64,
    pub chi: f64,
}

impl FlowState {
    pub fn new(metric: Arc<DMetric>, f_hat: Field, tau_hat: f64, chi: f64) -> Result<Self> {
        if !(tau_hat > 0.0 && tau_hat.is_finite()) {
            return Err(Error::Config(format!("flow state needs tau_hat > 0, got {tau_hat}")));
        }
        if !f_hat.chart().same_layout(metric.chart()) {
            return Err(Error::Config("f_hat lives on a different chart than the metric".into()));
        }
        Ok(FlowState { metric, f_hat, tau_hat, chi })
    }
}

/// RK4 update of the v-block pair
/// `d h3 / d chi = -h3 phi^* / h4`, `d h4 / d chi = -h4 phi^* / h3`
/// per grid point, with `phi` frozen over the step.  The tilt `w` is
/// refreshed from `phi`; `psi` and `n` ride along (they are rebuilt by the
/// family driver, which owns the integration functions).
pub fn flow_step_ansatz(am: &AnsatzMetric, phi: &Field, dchi: f64) -> Result<AnsatzMetric> {
    let chart = am.chart();
    if !phi.chart().same_layout(chart) {
        return Err(Error::Config("phi lives on a different chart".into()));
    }
    let mut h3 = am.h3.clone();
    let mut h4 = am.h4.clone();
    for idx in chart.indices() {
        let ps = phi.deriv(idx, AX_T);
        if ps.abs() < DEFAULT_EPS_PHI {
            let p = chart.point(idx);
            return Err(Error::Config(format!(
                "phi is frozen in t at {p:?}; the v-block flow divides by phi^*"
            )));
        }
        let y0 = [am.h3.at(idx), am.h4.at(idx)];
        let rhs = |y: [f64; 2]| [-y[0] * ps / y[1], -y[1] * ps / y[0]];
        let guard = |y: [f64; 2]| -> Result<[f64; 2]> {
            for (v, v0) in y.iter().zip(&y0) {
                if !v.is_finite() || v.abs() < 1e-12 || v.signum() != v0.signum() {
                    let p = chart.point(idx);
                    return Err(Error::Numeric(format!(
                        "h-block degenerates or changes sign within the step at {p:?}"
                    )));
                }
            }
            Ok(y)
        };
        let k1 = rhs(y0);
        let k2 = rhs(guard([y0[0] + 0.5 * dchi * k1[0], y0[1] + 0.5 * dchi * k1[1]])?);
        let k3 = rhs(guard([y0[0] + 0.5 * dchi * k2[0], y0[1] + 0.5 * dchi * k2[1]])?);
        let k4 = rhs(guard([y0[0] + dchi * k3[0], y0[1] + dchi * k3[1]])?);
        let y1 = guard([
            y0[0] + dchi / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            y0[1] + dchi / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ])?;
        h3.set(idx, y1[0]);
        h4.set(idx, y1[1]);
    }
    let w = {
        // build_w only reads phi and eps from the data; fabricate the
        // minimal carrier.
        let zero = Field::zeros(chart);
        let data = crate::ansatz::GeneratingData {
            phi: phi.clone(),
            lambda: 1.0,
            h4_0: zero.clone(),
            n1: [zero.clone(), zero.clone()],
            n2: [zero.clone(), zero],
            eps_phi: DEFAULT_EPS_PHI,
        };
        build_w(&data)
    };
    Ok(AnsatzMetric { psi: am.psi.clone(), h3, h4, w, n: am.n.clone() })
}

/// Centered-difference residual of the v-block flow equations over a
/// stored family with uniform spacing `dchi`; `None` below three samples.
pub fn eq2_residual(family: &[AnsatzMetric], phis: &[Field], dchi: f64) -> Option<f64> {
    if family.len() < 3 || phis.len() != family.len() {
        return None;
    }
    let chart = family[0].chart();
    let mut worst = 0.0_f64;
    for m in 1..family.len() - 1 {
        for idx in chart.indices() {
            let ps = phis[m].deriv(idx, AX_T);
            let h3 = family[m].h3.at(idx);
            let h4 = family[m].h4.at(idx);
            let d3 = (family[m + 1].h3.at(idx) - family[m - 1].h3.at(idx)) / (2.0 * dchi);
            let d4 = (family[m + 1].h4.at(idx) - family[m - 1].h4.at(idx)) / (2.0 * dchi);
            worst = worst.max((d3 + h3 * ps / h4).abs());
            worst = worst.max((d4 + h4 * ps / h3).abs());
        }
    }
    Some(worst)
}

/// Outcome of one general flow step.
#[derive(Debug, Clone)]
pub struct GeneralStep {
    pub state: FlowState,
    /// Max |Ric(e_i, d_a)|, |Ric(d_a, e_i)| at entry.
    pub mixed_residual: f64,
    /// Set when the mixed residual exceeded the tolerance.
    pub mixed_warning: bool,
}

/// Replace the two rim layers of every Dirichlet axis (with enough
/// nodes) by linear extrapolation from the first two clean interior
/// layers.  Nested curvature stencils are one-sided at layers 0 and 1,
/// where their error constant is ~50x the central one; feeding that
/// error back into an evolution equation makes the rims sag and blow up
/// in finite time.  Extrapolating the right-hand side instead keeps the
/// closure consistent to O(spacing^2) for smooth data and stable in
/// practice.  Axes shorter than six nodes are skipped: there are no
/// clean donor layers, and such axes carry constant data in every
/// supported configuration.
fn extrapolate_dirichlet_rims(f: &mut Field) {
    let chart = Arc::clone(f.chart());
    for ax in 0..4 {
        let axis = &chart.axes[ax];
        if axis.boundary != crate::grid::BoundaryKind::Dirichlet || axis.count < 6 {
            continue;
        }
        let c = axis.count;
        for idx in chart.indices() {
            if idx[ax] != 0 {
                continue;
            }
            let line = |i: usize| {
                let mut j = idx;
                j[ax] = i;
                j
            };
            let (r2, r3) = (f.at(line(2)), f.at(line(3)));
            f.set(line(1), 2.0 * r2 - r3);
            f.set(line(0), 3.0 * r2 - 2.0 * r3);
            let (s2, s3) = (f.at(line(c - 3)), f.at(line(c - 4)));
            f.set(line(c - 2), 2.0 * s2 - s3);
            f.set(line(c - 1), 3.0 * s2 - 2.0 * s3);
        }
    }
}

/// Max-norm of the mixed Ricci blocks, the constraint the adapted flow
/// assumes to stay block-diagonal.
pub fn mixed_ricci_residual(m: &DMetric) -> f64 {
    let mut worst = 0.0_f64;
    for idx in m.chart().indices() {
        let cur = curvature_at(m, idx);
        for i in 0..2 {
            for a in 0..2 {
                worst = worst.max(cur.ric_hv[i][a].abs()).max(cur.ric_vh[a][i].abs());
            }
        }
    }
    worst
}

/// RK4 update of both metric blocks under
/// `d g / d chi = -2 (Ric_h - lambda g)`, `d h / d chi = -2 (Ric_v - lambda h)`
/// with the tilt coefficients frozen.  `tau_hat` decreases at unit rate.
pub fn flow_step_general(
    fs: &FlowState,
    dchi: f64,
    source: SourceSpec,
    tol_mixed: f64,
) -> Result<GeneralStep> {
    let chart = Arc::clone(fs.metric.chart());
    let mixed_residual = mixed_ricci_residual(&fs.metric);
    let mixed_warning = mixed_residual > tol_mixed;

    // Six evolving component fields: g11, g12, g22, h33, h34, h44.
    let unpack = |m: &DMetric| -> [Field; 6] {
        [
            m.g[0].clone(), m.g[1].clone(), m.g[2].clone(),
            m.h[0].clone(), m.h[1].clone(), m.h[2].clone(),
        ]
    };
    let repack = |blocks: &[Field; 6]| -> Result<Arc<DMetric>> {
        let m = DMetric::new(
            &chart,
            [blocks[0].clone(), blocks[1].clone(), blocks[2].clone()],
            [blocks[3].clone(), blocks[4].clone(), blocks[5].clone()],
            [
                [fs.metric.n[0][0].clone(), fs.metric.n[0][1].clone()],
                [fs.metric.n[1][0].clone(), fs.metric.n[1][1].clone()],
            ],
        )?
        .with_signature(fs.metric.signature);
        m.check_nondegenerate(1e-12).map_err(|_| {
            Error::Numeric("metric degenerated during the flow step".into())
        })?;
        Ok(Arc::new(m))
    };
    // Symmetrized block derivative -2 (Ric - lambda block).
    let slope = |m: &Arc<DMetric>| -> [Field; 6] {
        let mut out = [
            Field::zeros(&chart), Field::zeros(&chart), Field::zeros(&chart),
            Field::zeros(&chart), Field::zeros(&chart), Field::zeros(&chart),
        ];
        for idx in chart.indices() {
            let cur = curvature_at(m, idx);
            let g = m.g_at(idx);
            let h = m.h_at(idx);
            out[0].set(idx, -2.0 * (cur.ric_hh[0][0] - source.lambda_h * sym2_get(&g, 0, 0)));
            out[1].set(idx, -2.0 * (0.5 * (cur.ric_hh[0][1] + cur.ric_hh[1][0]) - source.lambda_h * sym2_get(&g, 0, 1)));
            out[2].set(idx, -2.0 * (cur.ric_hh[1][1] - source.lambda_h * sym2_get(&g, 1, 1)));
            out[3].set(idx, -2.0 * (cur.ric_vv[0][0] - source.lambda_v * sym2_get(&h, 0, 0)));
            out[4].set(idx, -2.0 * (0.5 * (cur.ric_vv[0][1] + cur.ric_vv[1][0]) - source.lambda_v * sym2_get(&h, 0, 1)));
            out[5].set(idx, -2.0 * (cur.ric_vv[1][1] - source.lambda_v * sym2_get(&h, 1, 1)));
        }
        for f in out.iter_mut() {
            extrapolate_dirichlet_rims(f);
        }
        out
    };
    let shifted = |base: &[Field; 6], k: &[Field; 6], s: f64| -> [Field; 6] {
        std::array::from_fn(|c| {
            let mut f = base[c].clone();
            for (v, d) in f.data.iter_mut().zip(&k[c].data) {
                *v += s * d;
            }
            f
        })
    };

    let y0 = unpack(&fs.metric);
    let k1 = slope(&fs.metric);
    let k2 = slope(&repack(&shifted(&y0, &k1, 0.5 * dchi))?);
    let k3 = slope(&repack(&shifted(&y0, &k2, 0.5 * dchi))?);
    let k4 = slope(&repack(&shifted(&y0, &k3, dchi))?);
    let y1: [Field; 6] = std::array::from_fn(|c| {
        let mut f = y0[c].clone();
        for i in 0..f.data.len() {
            f.data[i] += dchi / 6.0
                * (k1[c].data[i] + 2.0 * k2[c].data[i] + 2.0 * k3[c].data[i] + k4[c].data[i]);
        }
        f
    });
    let metric = repack(&y1)?;
    let tau_hat = fs.tau_hat - dchi;
    if tau_hat <= 0.0 {
        return Err(Error::Numeric(format!(
            "tau_hat reached {tau_hat} at chi = {}; shorten the run",
            fs.chi + dchi
        )));
    }
    Ok(GeneralStep {
        state: FlowState {
            metric,
            f_hat: fs.f_hat.clone(),
            tau_hat,
            chi: fs.chi + dchi,
        },
        mixed_residual,
        mixed_warning,
    })
}

/// Which form of the potential equation the backward pass integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialVariant {
    /// `d f / d chi = -Lap f + |Df|^2 - R - S`.
    Plain,
    /// Same with the `+ n / tau` term; realized as the exact shift
    /// `f -> f - n ln(tau / tau_ref)` of the plain solution.
    TauTerm,
}

/// Result of the backward conjugate-density pass.
#[derive(Debug, Clone)]
pub struct PotentialRun {
    /// One potential per snapshot, aligned with the input order.
    pub f_hats: Vec<Field>,
    /// Worst relative drift of `int e^{-f} dV` across snapshots.
    pub mass_drift: f64,
    /// Smallest density value seen along the pass.
    pub min_omega: f64,
}

struct SnapshotOps {
    lap: ScalarLaplacian,
    rs: Field,
    /// Stability bound: max over nodes of the diagonal scale of `Lap`.
    diag: f64,
}

fn snapshot_ops(m: &Arc<DMetric>) -> SnapshotOps {
    let chart = m.chart();
    let sp = chart.spacings();
    let mut rs = Field::zeros(chart);
    let mut diag = 0.0_f64;
    for idx in chart.indices() {
        rs.set(idx, curvature_at(m, idx).scalar());
        let gi = sym2_inv(&m.g_at(idx));
        let hi = sym2_inv(&m.h_at(idx));
        let d = 2.0 * (gi[0].abs() / (sp[0] * sp[0])
            + gi[2].abs() / (sp[1] * sp[1])
            + hi[0].abs() / (sp[2] * sp[2])
            + hi[2].abs() / (sp[3] * sp[3]));
        diag = diag.max(d + rs.at(idx).abs());
    }
    SnapshotOps { lap: ScalarLaplacian::new(m), rs, diag }
}

/// Integrate the conjugate equation `d omega / d(-chi) = Lap omega
/// - (R + S) omega` from the last snapshot down to the first, seeding
/// `omega = e^{-f_hat}` of the final state.  Snapshots must be uniformly
/// spaced in `chi`.  Returns one potential per snapshot; the `TauTerm`
/// variant shifts by the exact integrating factor of the `n/tau` term.
pub fn f_evolution(
    snapshots: &[FlowState],
    variant: PotentialVariant,
    cfl: f64,
) -> Result<PotentialRun> {
    if snapshots.len() < 2 {
        return Err(Error::Config("f_evolution needs at least two snapshots".into()));
    }
    if !(cfl > 0.0 && cfl < 1.0) {
        return Err(Error::Config(format!("cfl must lie in (0, 1), got {cfl}")));
    }
    let chart = Arc::clone(snapshots[0].metric.chart());
    let dchi = snapshots[1].chi - snapshots[0].chi;
    for w in snapshots.windows(2) {
        if ((w[1].chi - w[0].chi) - dchi).abs() > 1e-10 * dchi.abs().max(1.0) || dchi <= 0.0 {
            return Err(Error::Config("snapshots must increase uniformly in chi".into()));
        }
        if !w[1].metric.chart().same_layout(&chart) {
            return Err(Error::Config("snapshots live on different charts".into()));
        }
    }

    let last = snapshots.len() - 1;
    let mut omega = Field::zeros(&chart);
    for (o, f) in omega.data.iter_mut().zip(&snapshots[last].f_hat.data) {
        *o = (-f).exp();
    }
    let mut min_omega = omega.data.iter().cloned().fold(f64::INFINITY, f64::min);

    let ops: Vec<SnapshotOps> = snapshots.iter().map(|s| snapshot_ops(&s.metric)).collect();
    let mut omegas: Vec<Option<Field>> = vec![None; snapshots.len()];
    omegas[last] = Some(omega.clone());

    for m in (0..last).rev() {
        // March backward over [chi_m, chi_{m+1}] in CFL-limited substeps,
        // blending the two snapshot operators linearly in chi.
        let diag = ops[m].diag.max(ops[m + 1].diag);
        let nsub = ((dchi * diag / cfl).ceil() as usize).max(1);
        let dt = dchi / nsub as f64;
        for s in 0..nsub {
            // theta = position inside the interval at the substep middle,
            // measured from snapshot m (theta = 1 is chi_{m+1}).
            let theta = 1.0 - (s as f64 + 0.5) / nsub as f64;
            let blend = |w: &Field| -> Field {
                let la = ops[m].lap.apply(w);
                let lb = ops[m + 1].lap.apply(w);
                let mut out = Field::zeros(&chart);
                for i in 0..out.data.len() {
                    let rs = (1.0 - theta) * ops[m].rs.data[i] + theta * ops[m + 1].rs.data[i];
                    out.data[i] = (1.0 - theta) * la.data[i] + theta * lb.data[i]
                        - rs * w.data[i];
                }
                out
            };
            // Heun step in backward time.
            let k1 = blend(&omega);
            let mut pred = omega.clone();
            for i in 0..pred.data.len() {
                pred.data[i] += dt * k1.data[i];
            }
            let k2 = blend(&pred);
            for i in 0..omega.data.len() {
                omega.data[i] += 0.5 * dt * (k1.data[i] + k2.data[i]);
            }
            let lo = omega.data.iter().cloned().fold(f64::INFINITY, f64::min);
            min_omega = min_omega.min(lo);
            if lo <= 0.0 {
                return Err(Error::Numeric(format!(
                    "conjugate density reached {lo} between snapshots {m} and {}; f is undefined",
                    m + 1
                )));
            }
        }
        omegas[m] = Some(omega.clone());
    }

    // Convert to potentials and measure the conserved-mass drift
    // against the seed snapshot.
    let tau_ref = snapshots[last].tau_hat;
    let mut f_hats = Vec::with_capacity(snapshots.len());
    let mass0 = {
        let om = omegas[last].as_ref().unwrap();
        integrate(&snapshots[last].metric, |idx| om.at(idx))
    };
    let mut mass_drift = 0.0_f64;
    for (m, snap) in snapshots.iter().enumerate() {
        let om = omegas[m].take().unwrap();
        let mass = integrate(&snap.metric, |idx| om.at(idx));
        mass_drift = mass_drift.max((mass - mass0).abs() / mass0.abs());
        let mut f = Field::zeros(&chart);
        let shift = match variant {
            PotentialVariant::Plain => 0.0,
            PotentialVariant::TauTerm => -HALF_DIM * (snap.tau_hat / tau_ref).ln(),
        };
        for (fv, ov) in f.data.iter_mut().zip(&om.data) {
            *fv = -(ov.ln()) + shift;
        }
        f_hats.push(f);
    }
    Ok(PotentialRun { f_hats, mass_drift, min_omega })
}

/// Per-snapshot scalars of the monotonicity theorems.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MonotonicityRow {
    pub chi: f64,
    pub tau: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "W")]
    pub w: f64,
    /// `2 int (|Ric_h + Hess_h f|^2 + |Ric_v + Hess_v f|^2) e^{-f} dV`.
    pub integrand: f64,
    pub sigma: f64,
    /// Centered finite difference of `F` (absent at the ends).
    pub fd_slope_f: Option<f64>,
    pub fd_slope_w: Option<f64>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MonotonicityReport {
    pub rows: Vec<MonotonicityRow>,
    /// |FD slope - integrand| / integrand at the middle snapshot.
    pub mid_rel_mismatch_f: f64,
    /// |sigma - tau^3 dW/dchi| / sigma at the middle snapshot.
    pub mid_rel_mismatch_sigma: f64,
}

fn block_norm_sq(inv: &[f64; 3], a: &[[f64; 2]; 2]) -> f64 {
    let mut s = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    s += sym2_get(inv, i, k) * sym2_get(inv, j, l) * a[i][j] * a[k][l];
                }
            }
        }
    }
    s
}

/// Evaluate `F`, `W`, the monotonicity integrand and `sigma` on each
/// snapshot, plus centered-difference slopes, in one pass per snapshot.
pub fn monotonicity_report(states: &[FlowState]) -> Result<MonotonicityReport> {
    if states.len() < 3 {
        return Err(Error::Config("monotonicity report needs at least 3 snapshots".into()));
    }
    let mut rows: Vec<MonotonicityRow> = Vec::with_capacity(states.len());
    for st in states {
        let m = &st.metric;
        let chart = m.chart();
        let lap = ScalarLaplacian::new(m);
        let d = lap.derivs(&st.f_hat);
        let tau = st.tau_hat;
        let pref = (4.0 * std::f64::consts::PI * tau).powf(-HALF_DIM);
        let (mut facc, mut wacc, mut iacc, mut sacc) = (0.0, 0.0, 0.0, 0.0);
        for idx in chart.indices() {
            let wq = node_weight(chart, idx);
            if wq == 0.0 {
                continue;
            }
            let dv = m.vol_at(idx) * wq;
            let cur = curvature_at(m, idx);
            let g = m.g_at(idx);
            let h = m.h_at(idx);
            let gi = sym2_inv(&g);
            let hi = sym2_inv(&h);
            let hess_h = lap.hess_h_at(&d, idx);
            let hess_v = lap.hess_v_at(&st.f_hat, &d, idx);
            let rs = cur.scalar();
            let gsq = m.grad_sq_at(&st.f_hat, idx);
            let fv = st.f_hat.at(idx);
            let ef = (-fv).exp();

            facc += (rs + gsq) * ef * dv;
            wacc += (tau * (rs + gsq) + fv - 2.0 * HALF_DIM) * pref * ef * dv;
            let mut ah = [[0.0; 2]; 2];
            let mut av = [[0.0; 2]; 2];
            let mut bh = [[0.0; 2]; 2];
            let mut bv = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    ah[i][j] = cur.ric_hh[i][j] + hess_h[i][j];
                    av[i][j] = cur.ric_vv[i][j] + hess_v[i][j];
                    bh[i][j] = ah[i][j] - sym2_get(&g, i, j) / (2.0 * tau);
                    bv[i][j] = av[i][j] - sym2_get(&h, i, j) / (2.0 * tau);
                }
            }
            iacc += 2.0 * (block_norm_sq(&gi, &ah) + block_norm_sq(&hi, &av)) * ef * dv;
            sacc += 2.0 * tau.powi(4)
                * (block_norm_sq(&gi, &bh) + block_norm_sq(&hi, &bv))
                * pref
                * ef
                * dv;
        }
        rows.push(MonotonicityRow {
            chi: st.chi,
            tau,
            f: facc,
            w: wacc,
            integrand: iacc,
            sigma: sacc,
            fd_slope_f: None,
            fd_slope_w: None,
        });
    }
    let dchi = states[1].chi - states[0].chi;
    for m in 1..rows.len() - 1 {
        rows[m].fd_slope_f = Some((rows[m + 1].f - rows[m - 1].f) / (2.0 * dchi));
        rows[m].fd_slope_w = Some((rows[m + 1].w - rows[m - 1].w) / (2.0 * dchi));
    }
    let mid = rows.len() / 2;
    let mid = mid.clamp(1, rows.len() - 2);
    let fd_f = rows[mid].fd_slope_f.unwrap();
    let mid_rel_mismatch_f = (fd_f - rows[mid].integrand).abs() / rows[mid].integrand.abs().max(1e-300);
    let fd_w = rows[mid].fd_slope_w.unwrap();
    let tau3_dw = rows[mid].tau.powi(3) * fd_w;
    let mid_rel_mismatch_sigma = (rows[mid].sigma - tau3_dw).abs() / rows[mid].sigma.abs().max(1e-300);
    Ok(MonotonicityReport { rows, mid_rel_mismatch_f, mid_rel_mismatch_sigma })
}
