//! Stochastic porous-media dynamics on a bounded chart:
//! `dU - Lap Psi(U) dchi` contains `sigma(U) dW`, with a multivalued
//! maximal monotone drift graph and multiplicative spectral noise.
//!
//! The drift graphs all carry a *centering point* `r0` with
//! `0 in Psi(r0)`; the solver works internally in `u = U - r0` with
//! homogeneous Dirichlet rims (so the boundary condition
//! `Psi(U) contains 0` holds exactly), and reports in the original
//! variable.  The implicit step's per-node equation collapses to a
//! resolvent of the graph itself, so no inner root-finding beyond the
//! graph's own (mostly closed-form) resolvent is needed.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::geometry::{sym2_inv, DMetric, SignatureFlag};
use crate::grid::{BoundaryKind, Field};

/// Gate below which nonnegative data counts as having stayed nonnegative.
pub const POSITIVITY_TOL: f64 = 1e-8;

/// Maximal monotone drift graphs, as printed.
///
/// `Stefan` is the phase-transition graph with plateau `[0, rho]` at
/// `chi0` and slopes `alpha1` (below) / `alpha2` (above).  `SignPower`
/// is `rho |r|^alpha sign r`; `alpha = 0` gives the sign graph (the
/// regularized singular-diffusion drift) and `rho = 0` the zero graph.
/// `HeavisideSOC` is `(Hev(r - c_u) + kappa)(r - c_u)`, single-valued
/// with a kink at the critical value `c_u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum MonotoneGraph {
    Stefan { chi0: f64, rho: f64, alpha1: f64, alpha2: f64 },
    SignPower { rho: f64, alpha: f64 },
    HeavisideSoc { kappa: f64, c_u: f64 },
}

impl MonotoneGraph {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            MonotoneGraph::Stefan { chi0, rho, alpha1, alpha2 } => {
                chi0 > 0.0 && rho > 0.0 && alpha1 > 0.0 && alpha2 > 0.0
            }
            MonotoneGraph::SignPower { rho, alpha } => {
                rho >= 0.0 && (0.0..=1.0).contains(&alpha)
            }
            MonotoneGraph::HeavisideSoc { kappa, c_u } => kappa > 0.0 && c_u > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("graph parameters out of range: {self:?}")))
        }
    }

    /// The full selection interval `[lo, hi]` of `Psi(r)`.
    pub fn selection(&self, r: f64) -> (f64, f64) {
        match *self {
            MonotoneGraph::Stefan { chi0, rho, alpha1, alpha2 } => {
                if r < chi0 {
                    let v = alpha1 * (r - chi0);
                    (v, v)
                } else if r > chi0 {
                    let v = alpha2 * (r - chi0) + rho;
                    (v, v)
                } else {
                    (0.0, rho)
                }
            }
            MonotoneGraph::SignPower { rho, alpha } => {
                if r == 0.0 {
                    if alpha == 0.0 {
                        // Sign graph: vertical segment [-rho, rho] at the
                        // origin (the paper's [-1, 1] is not maximal for
                        // rho != 1; see the notes ledger).
                        (-rho, rho)
                    } else {
                        (0.0, 0.0)
                    }
                } else {
                    let v = rho * r.abs().powf(alpha) * r.signum();
                    (v, v)
                }
            }
            MonotoneGraph::HeavisideSoc { kappa, c_u } => {
                let s = r - c_u;
                let v = kappa * s + s.max(0.0);
                (v, v)
            }
        }
    }

    /// The centering point `r0` with `0 in Psi(r0)`; shifting the graph
    /// by `r0` realizes the hypothesis `0 in Psi(0)` exactly.
    pub fn center(&self) -> f64 {
        match *self {
            MonotoneGraph::Stefan { chi0, .. } => chi0,
            MonotoneGraph::SignPower { .. } => 0.0,
            MonotoneGraph::HeavisideSoc { c_u, .. } => c_u,
        }
    }

    /// Declared polynomial growth `(C, a)` with
    /// `sup |Psi(r)| <= C (1 + |r|^a)`.
    pub fn growth(&self) -> (f64, f64) {
        match *self {
            MonotoneGraph::Stefan { chi0, rho, alpha1, alpha2 } => {
                (alpha1.max(alpha2) * (1.0 + chi0) + rho, 1.0)
            }
            MonotoneGraph::SignPower { rho, alpha } => (rho, alpha.max(f64::MIN_POSITIVE)),
            MonotoneGraph::HeavisideSoc { kappa, c_u } => ((1.0 + kappa) * (1.0 + c_u), 1.0),
        }
    }
}

/// Resolvent `J_eps(r)`: the unique `s` with `s + eps Psi(s) contains r`.
pub fn resolvent(graph: &MonotoneGraph, eps: f64, r: f64) -> f64 {
    debug_assert!(eps > 0.0);
    match *graph {
        MonotoneGraph::Stefan { chi0, rho, alpha1, alpha2 } => {
            if r < chi0 {
                (r + eps * alpha1 * chi0) / (1.0 + eps * alpha1)
            } else if r > chi0 + eps * rho {
                (r - eps * rho + eps * alpha2 * chi0) / (1.0 + eps * alpha2)
            } else {
                // Plateau absorbs everything landing on [chi0, chi0+eps rho].
                chi0
            }
        }
        MonotoneGraph::SignPower { rho, alpha } => {
            if rho == 0.0 {
                return r;
            }
            if alpha == 0.0 {
                // Soft threshold.
                let t = eps * rho;
                return if r > t {
                    r - t
                } else if r < -t {
                    r + t
                } else {
                    0.0
                };
            }
            if alpha == 1.0 {
                return r / (1.0 + eps * rho);
            }
            // Monotone scalar equation s + eps rho s^alpha = |r| on
            // s in [0, |r|], solved by bisection with a Newton polish;
            // the bracket cannot fail.
            let target = r.abs();
            if target == 0.0 {
                return 0.0;
            }
            let g = |s: f64| s + eps * rho * s.powf(alpha) - target;
            let (mut lo, mut hi) = (0.0_f64, target);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if g(mid) > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
                if hi - lo < 1e-16 * (1.0 + target) {
                    break;
                }
            }
            let mut s = 0.5 * (lo + hi);
            for _ in 0..4 {
                let d = 1.0 + eps * rho * alpha * s.powf(alpha - 1.0);
                if d.is_finite() && d > 0.0 {
                    s = (s - g(s) / d).clamp(lo, hi);
                }
            }
            s * r.signum()
        }
        MonotoneGraph::HeavisideSoc { kappa, c_u } => {
            // s + eps (kappa (s-c) + max(s-c, 0)) = r, piecewise linear
            // with the branch decided by which side of c_u the root lands.
            let below = (r + eps * kappa * c_u) / (1.0 + eps * kappa);
            if below <= c_u {
                below
            } else {
                (r + eps * (1.0 + kappa) * c_u) / (1.0 + eps * (1.0 + kappa))
            }
        }
    }
}

/// Yosida approximation `Psi_eps(r) = (r - J_eps(r)) / eps`; single
/// valued, monotone, Lipschitz with constant `1/eps`.
pub fn yosida(graph: &MonotoneGraph, eps: f64, r: f64) -> f64 {
    (r - resolvent(graph, eps, r)) / eps
}

/// A lattice of interior nodes of selected chart axes, with the flux
/// form of the scalar Laplace–Beltrami operator and the metric-weighted
/// inner product.  Inactive axes are pinned at their center index.
pub struct SpdeDomain {
    metric: Arc<DMetric>,
    active: Vec<usize>,
    /// Interior node count per active axis.
    shape: Vec<usize>,
    /// Full-chart index of each lattice node, lexicographic in `shape`.
    nodes: Vec<[usize; 4]>,
    /// Metric quadrature weight per node (volume element times spacings).
    weight: Vec<f64>,
    /// Per axis: transmissibility through the "upper" face of each node
    /// (towards index + 1 along that axis, including the rim face).
    trans_up: Vec<Vec<f64>>,
    /// Per axis: transmissibility through the lower face (rim included).
    trans_dn: Vec<Vec<f64>>,
}

impl SpdeDomain {
    /// Build the interior lattice over `active` axes (one to three of
    /// them).  Requires Riemannian signature, Dirichlet boundaries and
    /// at least five nodes on every active axis; metric blocks must be
    /// diagonal in any block with both of its axes active.
    pub fn new(metric: &Arc<DMetric>, active: &[usize]) -> Result<Self> {
        if metric.signature != SignatureFlag::Riemannian {
            return Err(Error::Config("diffusion needs a Riemannian chart".into()));
        }
        if active.is_empty() || active.len() > 3 {
            return Err(Error::Config(format!(
                "need one to three active axes, got {}",
                active.len()
            )));
        }
        let chart = metric.chart();
        let mut seen = [false; 4];
        for &a in active {
            if a > 3 || seen[a] {
                return Err(Error::Config(format!("bad active axis list {active:?}")));
            }
            seen[a] = true;
            let axis = &chart.axes[a];
            if axis.boundary != BoundaryKind::Dirichlet {
                return Err(Error::Config(format!(
                    "active axis {} must carry a Dirichlet boundary",
                    axis.name
                )));
            }
            if axis.count < 5 {
                return Err(Error::Config(format!(
                    "active axis {} needs at least 5 nodes, got {}",
                    axis.name, axis.count
                )));
            }
        }
        let off_diag_zero = |f: &Field| f.data.iter().all(|v| v.abs() < 1e-14);
        if seen[0] && seen[1] && !off_diag_zero(&metric.g[1]) {
            return Err(Error::Config("h-block must be diagonal when x1 and x2 are both active".into()));
        }
        if seen[2] && seen[3] && !off_diag_zero(&metric.h[1]) {
            return Err(Error::Config("v-block must be diagonal when t and y4 are both active".into()));
        }

        let dims = chart.dims();
        let shape: Vec<usize> = active.iter().map(|&a| dims[a] - 2).collect();
        let count: usize = shape.iter().product();
        let base: [usize; 4] = std::array::from_fn(|a| if seen[a] { 0 } else { dims[a] / 2 });
        let mut nodes = Vec::with_capacity(count);
        let mut lattice = vec![0usize; active.len()];
        loop {
            let mut idx = base;
            for (pos, &a) in active.iter().enumerate() {
                idx[a] = lattice[pos] + 1;
            }
            nodes.push(idx);
            // Lexicographic increment, last axis fastest.
            let mut pos = active.len();
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                lattice[pos] += 1;
                if lattice[pos] < shape[pos] {
                    break;
                }
                lattice[pos] = 0;
                if pos == 0 {
                    pos = usize::MAX;
                    break;
                }
            }
            if pos == usize::MAX {
                break;
            }
        }
        debug_assert_eq!(nodes.len(), count);

        let sp = chart.spacings();
        let dvol: f64 = active.iter().map(|&a| sp[a]).product();
        // Density rho_a = sqrt|g| g^{aa} per node and axis, face averages.
        let rho = |idx: [usize; 4], a: usize| -> f64 {
            let vol = metric.vol_at(idx);
            let inv_diag = match a {
                0 => sym2_inv(&metric.g_at(idx))[0],
                1 => sym2_inv(&metric.g_at(idx))[2],
                2 => sym2_inv(&metric.h_at(idx))[0],
                _ => sym2_inv(&metric.h_at(idx))[2],
            };
            vol * inv_diag
        };
        let weight: Vec<f64> = nodes.iter().map(|&idx| metric.vol_at(idx) * dvol).collect();
        let mut trans_up = Vec::with_capacity(active.len());
        let mut trans_dn = Vec::with_capacity(active.len());
        for &a in active {
            let mut up = Vec::with_capacity(count);
            let mut dn = Vec::with_capacity(count);
            for &idx in &nodes {
                let mut hi = idx;
                hi[a] += 1;
                let mut lo = idx;
                lo[a] -= 1;
                let scale = dvol / (sp[a] * sp[a]);
                up.push(0.5 * (rho(idx, a) + rho(hi, a)) * scale);
                dn.push(0.5 * (rho(idx, a) + rho(lo, a)) * scale);
            }
            trans_up.push(up);
            trans_dn.push(dn);
        }
        Ok(SpdeDomain {
            metric: Arc::clone(metric),
            active: active.to_vec(),
            shape,
            nodes,
            weight,
            trans_up,
            trans_dn,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn metric(&self) -> &Arc<DMetric> {
        &self.metric
    }

    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    /// Metric-weighted inner product of two lattice vectors.
    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        u.iter().zip(v).zip(&self.weight).map(|((a, b), w)| a * b * w).sum()
    }

    pub fn norm(&self, u: &[f64]) -> f64 {
        self.inner(u, u).sqrt()
    }

    /// Total metric volume of the lattice (interior cells).
    pub fn volume(&self) -> f64 {
        self.weight.iter().sum()
    }

    /// Stride of a unit move along active axis position `pos`.
    fn stride(&self, pos: usize) -> usize {
        self.shape[pos + 1..].iter().product()
    }

    fn lattice_coord(&self, flat: usize, pos: usize) -> usize {
        (flat / self.stride(pos)) % self.shape[pos]
    }

    /// Flux-form Laplace–Beltrami: `(1/sqrt|g|) d_a(sqrt|g| g^{aa} d_a u)`
    /// over the active axes, with zero Dirichlet ghosts at the rims.
    /// Self-adjoint in the weighted inner product by construction.
    pub fn laplacian(&self, u: &[f64], out: &mut [f64]) {
        debug_assert_eq!(u.len(), self.len());
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for pos in 0..self.active.len() {
                let c = self.lattice_coord(i, pos);
                let s = self.stride(pos);
                let up = if c + 1 < self.shape[pos] { u[i + s] } else { 0.0 };
                let dn = if c > 0 { u[i - s] } else { 0.0 };
                acc += self.trans_up[pos][i] * (up - u[i]) + self.trans_dn[pos][i] * (dn - u[i]);
            }
            *o = acc / self.weight[i];
        }
    }

    /// Diagonal of `-laplacian` (used for solver sweeps).
    fn neg_lap_diag(&self, i: usize) -> f64 {
        let mut d = 0.0;
        for pos in 0..self.active.len() {
            d += self.trans_up[pos][i] + self.trans_dn[pos][i];
        }
        d / self.weight[i]
    }

    /// Sample a full-chart field on the lattice.
    pub fn restrict(&self, f: &Field) -> Vec<f64> {
        self.nodes.iter().map(|&idx| f.at(idx)).collect()
    }

    /// Scatter a lattice vector back to a full-chart field; off-lattice
    /// nodes (rims and inactive slices) receive `fill`.
    pub fn extend(&self, u: &[f64], fill: f64) -> Field {
        let mut f = Field::constant(self.metric.chart(), fill);
        for (&idx, &v) in self.nodes.iter().zip(u) {
            f.set(idx, v);
        }
        f
    }
}

/// Eigensolver path selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EigenMethod {
    /// Choose by lattice size (dense up to 2 500 nodes).
    Auto,
    Dense,
    Lanczos,
}

const DENSE_LIMIT: usize = 2_500;
const EIGEN_TOL: f64 = 1e-8;

/// First `k` Dirichlet eigenpairs of `-laplacian`, ascending, with
/// eigenvectors orthonormal in the metric-weighted inner product.
pub fn eigensolve_laplacian(dom: &SpdeDomain, k: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    eigensolve_with(dom, k, EigenMethod::Auto)
}

pub fn eigensolve_with(
    dom: &SpdeDomain,
    k: usize,
    method: EigenMethod,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = dom.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("need 1..={n} eigenpairs, asked for {k}")));
    }
    let method = match method {
        EigenMethod::Auto if n <= DENSE_LIMIT => EigenMethod::Dense,
        EigenMethod::Auto => EigenMethod::Lanczos,
        m => m,
    };
    // Work with the similarity transform S = W^{1/2} (-L) W^{-1/2},
    // symmetric in the plain inner product; eigenvectors map back by
    // W^{-1/2}, which restores weighted orthonormality exactly.
    let sqw: Vec<f64> = dom.weight.iter().map(|w| w.sqrt()).collect();
    let apply_s = |v: &[f64], out: &mut [f64], scratch: &mut Vec<f64>| {
        scratch.clear();
        scratch.extend(v.iter().zip(&sqw).map(|(x, s)| x / s));
        dom.laplacian(scratch, out);
        for (o, s) in out.iter_mut().zip(&sqw) {
            *o *= -s;
        }
    };
    let (vals, mut vecs) = match method {
        EigenMethod::Dense => dense_eigen(dom, k, &apply_s)?,
        EigenMethod::Lanczos => lanczos_eigen(dom, k, &apply_s)?,
        EigenMethod::Auto => unreachable!(),
    };
    // Back-transform, fix signs, and verify the contract.
    for v in vecs.iter_mut() {
        for (x, s) in v.iter_mut().zip(&sqw) {
            *x /= s;
        }
        let lead = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if v[lead] < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
    }
    if !(vals[0] > 0.0) {
        return Err(Error::Numeric(format!(
            "smallest eigenvalue {} is not positive; operator lost ellipticity",
            vals[0]
        )));
    }
    let mut lap = vec![0.0; n];
    for (j, v) in vecs.iter().enumerate() {
        for (i, w) in vecs.iter().enumerate().skip(j) {
            let dot = dom.inner(v, w);
            let expect = if i == j { 1.0 } else { 0.0 };
            if (dot - expect).abs() > EIGEN_TOL {
                return Err(Error::Numeric(format!(
                    "eigenvectors {j},{i} lost orthonormality: <v,w> = {dot}"
                )));
            }
        }
        dom.laplacian(v, &mut lap);
        let mut res = 0.0;
        for i in 0..n {
            res += (-lap[i] - vals[j] * v[i]).powi(2) * dom.weight[i];
        }
        if res.sqrt() > EIGEN_TOL * vals[j] {
            return Err(Error::Numeric(format!(
                "eigenpair {j} residual {} exceeds {}",
                res.sqrt(),
                EIGEN_TOL * vals[j]
            )));
        }
    }
    Ok((vals, vecs))
}

fn dense_eigen(
    dom: &SpdeDomain,
    k: usize,
    apply_s: &impl Fn(&[f64], &mut [f64], &mut Vec<f64>),
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = dom.len();
    let mut mat = DMatrix::<f64>::zeros(n, n);
    let mut basis = vec![0.0; n];
    let mut col = vec![0.0; n];
    let mut scratch = Vec::with_capacity(n);
    for j in 0..n {
        basis[j] = 1.0;
        apply_s(&basis, &mut col, &mut scratch);
        basis[j] = 0.0;
        for i in 0..n {
            mat[(i, j)] = col[i];
        }
    }
    // Symmetrize away the last rounding bit so the solver sees an exact
    // symmetric matrix.
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (mat[(i, j)] + mat[(j, i)]);
            mat[(i, j)] = v;
            mat[(j, i)] = v;
        }
    }
    let eig = mat.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let vals: Vec<f64> = order.iter().take(k).map(|&i| eig.eigenvalues[i]).collect();
    let vecs: Vec<Vec<f64>> = order
        .iter()
        .take(k)
        .map(|&i| eig.eigenvectors.column(i).iter().cloned().collect())
        .collect();
    Ok((vals, vecs))
}

/// Shift-invert Lanczos with full reorthogonalization: iterate with
/// `S^{-1}` (inner conjugate-gradient solves), whose largest Ritz values
/// are the smallest eigenvalues of `S`.
fn lanczos_eigen(
    dom: &SpdeDomain,
    k: usize,
    apply_s: &impl Fn(&[f64], &mut [f64], &mut Vec<f64>),
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = dom.len();
    let m = (2 * k + 32).min(n);
    let mut scratch = Vec::with_capacity(n);
    // CG for S x = b; S is positive definite.
    let mut cg = |b: &[f64], x: &mut Vec<f64>| -> Result<()> {
        x.clear();
        x.resize(n, 0.0);
        let mut r = b.to_vec();
        let mut p = r.clone();
        let mut sp = vec![0.0; n];
        let b2: f64 = b.iter().map(|v| v * v).sum();
        let mut r2: f64 = b2;
        if b2 == 0.0 {
            return Ok(());
        }
        for _ in 0..20 * n {
            apply_s(&p, &mut sp, &mut scratch);
            let psp: f64 = p.iter().zip(&sp).map(|(a, b)| a * b).sum();
            let alpha = r2 / psp;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * sp[i];
            }
            let r2n: f64 = r.iter().map(|v| v * v).sum();
            if r2n <= 1e-28 * b2 {
                return Ok(());
            }
            let beta = r2n / r2;
            r2 = r2n;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
        }
        Err(Error::Numeric("inner conjugate-gradient solve stalled".into()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_1a2c);
    let mut v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let nv = (v.iter().map(|x| x * x).sum::<f64>()).sqrt();
    for x in v.iter_mut() {
        *x /= nv;
    }
    let mut basis: Vec<Vec<f64>> = vec![v];
    let mut alphas = Vec::new();
    let mut betas = Vec::new();
    let mut w = Vec::new();
    for j in 0..m {
        cg(&basis[j], &mut w)?;
        let alpha: f64 = w.iter().zip(&basis[j]).map(|(a, b)| a * b).sum();
        alphas.push(alpha);
        // Full reorthogonalization (twice for safety).
        for _ in 0..2 {
            for q in &basis {
                let d: f64 = w.iter().zip(q).map(|(a, b)| a * b).sum();
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= d * qi;
                }
            }
        }
        let beta = (w.iter().map(|x| x * x).sum::<f64>()).sqrt();
        if j + 1 == m || beta < 1e-14 {
            break;
        }
        betas.push(beta);
        basis.push(w.iter().map(|x| x / beta).collect());
    }
    let steps = alphas.len();
    if steps < k {
        return Err(Error::Numeric("eigensolver subspace collapsed early".into()));
    }
    // Dense solve of the small tridiagonal Ritz problem.
    let mut t = DMatrix::<f64>::zeros(steps, steps);
    for i in 0..steps {
        t[(i, i)] = alphas[i];
        if i + 1 < steps {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let eig = t.symmetric_eigen();
    // Largest Ritz values of S^{-1} = smallest eigenvalues of S.
    let mut order: Vec<usize> = (0..steps).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut vals = Vec::with_capacity(k);
    let mut vecs = Vec::with_capacity(k);
    for &ri in order.iter().take(k) {
        let mu = eig.eigenvalues[ri];
        if mu <= 0.0 {
            return Err(Error::Numeric("shift-invert spectrum lost positivity".into()));
        }
        vals.push(1.0 / mu);
        let mut y = vec![0.0; n];
        for (j, q) in basis.iter().enumerate() {
            let c = eig.eigenvectors[(j, ri)];
            for (yi, qi) in y.iter_mut().zip(q) {
                *yi += c * qi;
            }
        }
        vecs.push(y);
    }
    // Ascending to match the contract.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
    let vals_sorted: Vec<f64> = order.iter().map(|&i| vals[i]).collect();
    let vecs_sorted: Vec<Vec<f64>> = order.into_iter().map(|i| std::mem::take(&mut vecs[i])).collect();
    Ok((vals_sorted, vecs_sorted))
}

/// Rule generating the noise amplitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum NuRule {
    /// `nu_k = lambda_k^{-p}`; the default `p = 3/2` keeps
    /// `sum nu_k^2 lambda_k^2` converging with margin.
    PowerLaw { p: f64 },
    Explicit { values: Vec<f64> },
}

impl Default for NuRule {
    fn default() -> Self {
        NuRule::PowerLaw { p: 1.5 }
    }
}

/// Truncated spectral noise data: eigenpairs of `-laplacian`, the
/// amplitude sequence, the reference element's coefficients, and the
/// state offset entering the multiplicative factor.
pub struct NoiseSpec {
    pub k: usize,
    pub nu: Vec<f64>,
    pub lambda: Vec<f64>,
    pub modes: Vec<Vec<f64>>,
    /// Coefficients `<l, e_k>` of the reference element.
    pub l_coeff: Vec<f64>,
    /// The factor multiplying the noise is `U - shift` (the critical
    /// offset of the self-organized runs; zero for the plain form).
    pub shift: f64,
    /// Logged truncation `sum nu_k^2 lambda_k^2`.
    pub admissibility: f64,
}

impl NoiseSpec {
    /// Assemble the truncated forcing of the printed form.  `l` defaults
    /// to the ground mode.  Rejects amplitude sequences whose
    /// `nu_k lambda_k` fails to be non-increasing.
    pub fn new(
        dom: &SpdeDomain,
        k: usize,
        rule: &NuRule,
        l: Option<&Field>,
        shift: f64,
    ) -> Result<NoiseSpec> {
        let (lambda, modes) = eigensolve_laplacian(dom, k)?;
        let nu: Vec<f64> = match rule {
            NuRule::PowerLaw { p } => {
                if !(*p > 0.0) {
                    return Err(Error::Config(format!("power-law exponent must be positive, got {p}")));
                }
                lambda.iter().map(|l| l.powf(-p)).collect()
            }
            NuRule::Explicit { values } => {
                if values.len() != k {
                    return Err(Error::Config(format!(
                        "explicit nu needs {k} entries, got {}",
                        values.len()
                    )));
                }
                values.clone()
            }
        };
        if nu.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("nu entries must be finite and nonnegative".into()));
        }
        let products: Vec<f64> = nu.iter().zip(&lambda).map(|(n, l)| n * l).collect();
        for w in products.windows(2) {
            if w[1] > w[0] * (1.0 + 1e-12) {
                return Err(Error::Config(
                    "nu_k lambda_k must be non-increasing for an admissible noise truncation".into(),
                ));
            }
        }
        let admissibility = nu.iter().zip(&lambda).map(|(n, l)| (n * l).powi(2)).sum();
        let l_coeff: Vec<f64> = match l {
            None => {
                let mut c = vec![0.0; k];
                c[0] = 1.0;
                c
            }
            Some(f) => {
                let lv = dom.restrict(f);
                modes.iter().map(|e| dom.inner(&lv, e)).collect()
            }
        };
        Ok(NoiseSpec { k, nu, lambda, modes, l_coeff, shift, admissibility })
    }
}

/// One increment of the truncated multiplicative forcing:
/// `sum_k nu_k (U - shift) <l,e_k> e_k dbeta_k` with
/// `dbeta_k ~ N(0, dchi)`.
pub fn sample_noise(
    ns: &NoiseSpec,
    dom: &SpdeDomain,
    u: &[f64],
    dchi: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    debug_assert!(dchi > 0.0);
    let root = dchi.sqrt();
    let mut amp = vec![0.0; dom.len()];
    for k in 0..ns.k {
        let dbeta: f64 = root * rng.sample::<f64, _>(StandardNormal);
        let c = ns.nu[k] * ns.l_coeff[k] * dbeta;
        if c == 0.0 {
            continue;
        }
        for (a, e) in amp.iter_mut().zip(&ns.modes[k]) {
            *a += c * e;
        }
    }
    amp.iter_mut().zip(u).for_each(|(a, ui)| *a *= ui);
    amp
}

/// Evolution state: lattice values of the *centered* variable
/// `u = U - r0`, the flow parameter, the owning RNG stream, and the
/// current regularization parameter.
#[derive(Debug, Clone)]
pub struct SPDEState {
    pub u: Vec<f64>,
    pub chi: f64,
    pub stream: u64,
    pub eps: f64,
}

const SOLVER_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 50_000;

/// One implicit step `U+ - dchi Lap Psi_eps(U+) = U + noise`, solved by
/// nonlinear Gauss–Seidel sweeps whose per-node equation collapses to a
/// resolvent evaluation of the graph at parameter `c + eps`.
pub fn step(
    dom: &SpdeDomain,
    st: &SPDEState,
    dchi: f64,
    graph: &MonotoneGraph,
    ns: &NoiseSpec,
    rng: &mut ChaCha8Rng,
) -> Result<SPDEState> {
    if !(dchi > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {dchi}")));
    }
    let n = dom.len();
    let r0 = graph.center();
    let eps = st.eps;
    // Noise factor per the printed forcing: U - shift = u + (r0 - shift).
    let factor: Vec<f64> = st.u.iter().map(|u| u + (r0 - ns.shift)).collect();
    let noise = sample_noise(ns, dom, &factor, dchi, rng);
    let b: Vec<f64> = st.u.iter().zip(&noise).map(|(u, n)| u + n).collect();
    let bscale = b.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);

    // Centered Yosida: Psi_eps acting on u = U - r0.
    let yos = |r: f64| (r - (resolvent(graph, eps, r + r0) - r0)) / eps;
    let mut u = st.u.clone();
    let mut v: Vec<f64> = u.iter().map(|&x| yos(x)).collect();
    let mut converged = false;
    let mut worst = f64::INFINITY;
    let mut lap = vec![0.0; n];
    for _sweep in 0..MAX_SWEEPS {
        for i in 0..n {
            // Gather the off-diagonal drift contribution at node i.
            let mut offdiag = 0.0;
            for pos in 0..dom.active.len() {
                let c = dom.lattice_coord(i, pos);
                let s = dom.stride(pos);
                if c + 1 < dom.shape[pos] {
                    offdiag += dom.trans_up[pos][i] * v[i + s];
                }
                if c > 0 {
                    offdiag += dom.trans_dn[pos][i] * v[i - s];
                }
            }
            let cdiag = dchi * dom.neg_lap_diag(i);
            let q = b[i] + dchi * offdiag / dom.weight[i];
            // Solve u_i + cdiag Psi_eps(u_i) = q exactly: with
            // y = J_eps(u_i) the pair satisfies y + (cdiag+eps) Psi(y+r0)
            // contains q, i.e. y is a resolvent at cdiag + eps.
            let y = resolvent(graph, cdiag + eps, q + r0) - r0;
            let vi = (q - y) / (cdiag + eps);
            u[i] = q - cdiag * vi;
            v[i] = vi;
        }
        // Residual of the implicit system.
        worst = 0.0;
        dom.laplacian(&v, &mut lap);
        for i in 0..n {
            worst = worst.max((u[i] - dchi * lap[i] - b[i]).abs());
        }
        if worst <= SOLVER_TOL * bscale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "implicit solve stalled: residual {worst} after {MAX_SWEEPS} sweeps (scale {bscale})"
        )));
    }
    Ok(SPDEState { u, chi: st.chi + dchi, stream: st.stream, eps })
}

/// Per-step trajectory diagnostics in the original variable `U`.
#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryRow {
    pub chi: f64,
    pub l2: f64,
    pub min: f64,
    pub max: f64,
    /// Metric-weighted volume of the supercritical region `{U > r0}`.
    pub m: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryRecord {
    pub rows: Vec<TrajectoryRow>,
    pub positivity_ok: bool,
    pub converged: bool,
}

/// Deterministic parameters of a diffusion run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpdeConfig {
    pub graph: MonotoneGraph,
    pub dchi: f64,
    pub steps: usize,
    /// Regularization floor; the schedule is `eps = max(eps_min, eps_scale * dchi)`.
    pub eps_min: f64,
    pub eps_scale: f64,
}

impl SpdeConfig {
    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        if !(self.dchi > 0.0) || self.steps == 0 {
            return Err(Error::Config("need a positive step size and at least one step".into()));
        }
        if !(self.eps_min > 0.0) || !(self.eps_scale >= 0.0) {
            return Err(Error::Config("regularization schedule must be positive".into()));
        }
        Ok(())
    }

    pub fn eps(&self) -> f64 {
        self.eps_min.max(self.eps_scale * self.dchi)
    }
}

fn record_row(dom: &SpdeDomain, u: &[f64], r0: f64, chi: f64) -> TrajectoryRow {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut m = 0.0;
    let mut l2 = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        let big_u = ui + r0;
        min = min.min(big_u);
        max = max.max(big_u);
        if ui > 0.0 {
            m += dom.weight[i];
        }
        l2 += big_u * big_u * dom.weight[i];
    }
    TrajectoryRow { chi, l2: l2.sqrt(), min, max, m }
}

/// March one path.  The RNG stream is `seed`'s ChaCha stream `stream`,
/// so paths are reproducible and order-independent.
pub fn run(
    dom: &SpdeDomain,
    cfg: &SpdeConfig,
    ns: &NoiseSpec,
    u0: &Field,
    seed: u64,
    stream: u64,
) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let r0 = cfg.graph.center();
    let mut st = SPDEState {
        u: dom.restrict(u0).iter().map(|v| v - r0).collect(),
        chi: 0.0,
        stream,
        eps: cfg.eps(),
    };
    let mut rows = Vec::with_capacity(cfg.steps + 1);
    rows.push(record_row(dom, &st.u, r0, st.chi));
    let mut min_seen = rows[0].min;
    for _ in 0..cfg.steps {
        st = step(dom, &st, cfg.dchi, &cfg.graph, ns, &mut rng)?;
        let row = record_row(dom, &st.u, r0, st.chi);
        min_seen = min_seen.min(row.min);
        rows.push(row);
    }
    Ok(TrajectoryRecord { rows, positivity_ok: min_seen >= -POSITIVITY_TOL, converged: true })
}

/// March one path against externally supplied Wiener increments
/// (`increments[step][mode]`, already scaled to variance `dchi`).  This
/// is the hook for step-refinement studies on a shared path: the fine
/// table's pairwise sums reproduce the coarse path exactly.
pub fn run_on_increments(
    dom: &SpdeDomain,
    cfg: &SpdeConfig,
    ns: &NoiseSpec,
    u0: &Field,
    increments: &[Vec<f64>],
) -> Result<(Vec<f64>, TrajectoryRecord)> {
    cfg.validate()?;
    if increments.len() != cfg.steps {
        return Err(Error::Config(format!(
            "need {} increment rows, got {}",
            cfg.steps,
            increments.len()
        )));
    }
    let r0 = cfg.graph.center();
    let eps = cfg.eps();
    let mut u: Vec<f64> = dom.restrict(u0).iter().map(|v| v - r0).collect();
    let mut rows = Vec::with_capacity(cfg.steps + 1);
    let mut chi = 0.0;
    rows.push(record_row(dom, &u, r0, chi));
    let mut min_seen = rows[0].min;
    for inc in increments {
        if inc.len() != ns.k {
            return Err(Error::Config("increment row length must match the mode count".into()));
        }
        // Assemble the forcing directly from the supplied increments.
        let mut noise = vec![0.0; dom.len()];
        for k in 0..ns.k {
            let c = ns.nu[k] * ns.l_coeff[k] * inc[k];
            if c == 0.0 {
                continue;
            }
            for (a, e) in noise.iter_mut().zip(&ns.modes[k]) {
                *a += c * e;
            }
        }
        for (a, ui) in noise.iter_mut().zip(&u) {
            *a *= ui + (r0 - ns.shift);
        }
        let b: Vec<f64> = u.iter().zip(&noise).map(|(x, n)| x + n).collect();
        let st = SPDEState { u: b, chi, stream: 0, eps };
        // Reuse the implicit solve with pre-added noise: a zero-noise
        // step from the forced state.
        let zero_ns = NoiseSpec {
            k: ns.k,
            nu: vec![0.0; ns.k],
            lambda: ns.lambda.clone(),
            modes: ns.modes.clone(),
            l_coeff: ns.l_coeff.clone(),
            shift: ns.shift,
            admissibility: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let next = step(dom, &st, cfg.dchi, &cfg.graph, &zero_ns, &mut rng)?;
        u = next.u;
        chi = next.chi;
        let row = record_row(dom, &u, r0, chi);
        min_seen = min_seen.min(row.min);
        rows.push(row);
    }
    Ok((u, TrajectoryRecord { rows, positivity_ok: min_seen >= -POSITIVITY_TOL, converged: true }))
}

/// Ensemble diagnostics over successful paths.
#[derive(Debug, Clone, Serialize)]
pub struct EnsembleStats {
    pub paths: usize,
    pub failed: usize,
    /// Ensemble-mean supercritical measure per recorded step.
    pub m_bar: Vec<f64>,
    pub l2_mean: Vec<f64>,
    pub l2_q10: Vec<f64>,
    pub l2_q50: Vec<f64>,
    pub l2_q90: Vec<f64>,
    pub min_over_paths: f64,
    pub positivity_all: bool,
    #[serde(skip)]
    pub records: Vec<Option<TrajectoryRecord>>,
}

/// Run `paths` independent paths (stream = path index) and aggregate.
/// Step failures abort only their own path, which is recorded as failed.
pub fn ensemble_run(
    dom: &SpdeDomain,
    cfg: &SpdeConfig,
    ns: &NoiseSpec,
    u0: &Field,
    seed: u64,
    paths: usize,
) -> Result<EnsembleStats> {
    if paths == 0 {
        return Err(Error::Config("need at least one path".into()));
    }
    let records: Vec<Option<TrajectoryRecord>> = (0..paths)
        .map(|p| run(dom, cfg, ns, u0, seed, p as u64).ok())
        .collect();
    let good: Vec<&TrajectoryRecord> = records.iter().flatten().collect();
    if good.is_empty() {
        return Err(Error::Numeric("every path failed".into()));
    }
    let steps = good[0].rows.len();
    let mut m_bar = vec![0.0; steps];
    let mut l2_mean = vec![0.0; steps];
    let mut l2_q10 = vec![0.0; steps];
    let mut l2_q50 = vec![0.0; steps];
    let mut l2_q90 = vec![0.0; steps];
    let mut min_over_paths = f64::INFINITY;
    for s in 0..steps {
        let mut l2s: Vec<f64> = good.iter().map(|r| r.rows[s].l2).collect();
        l2s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |frac: f64| -> f64 {
            let pos = frac * (l2s.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            l2s[lo] + (l2s[hi] - l2s[lo]) * (pos - lo as f64)
        };
        l2_q10[s] = q(0.1);
        l2_q50[s] = q(0.5);
        l2_q90[s] = q(0.9);
        l2_mean[s] = good.iter().map(|r| r.rows[s].l2).sum::<f64>() / good.len() as f64;
        m_bar[s] = good.iter().map(|r| r.rows[s].m).sum::<f64>() / good.len() as f64;
        min_over_paths = good
            .iter()
            .map(|r| r.rows[s].min)
            .fold(min_over_paths, f64::min);
    }
    let positivity_all = good.iter().all(|r| r.positivity_ok);
    Ok(EnsembleStats {
        paths,
        failed: paths - good.len(),
        m_bar,
        l2_mean,
        l2_q10,
        l2_q50,
        l2_q90,
        min_over_paths,
        positivity_all,
        records,
    })
}

/// Absorption diagnostics of the supercritical region.
#[derive(Debug, Clone, Serialize)]
pub struct SocReport {
    pub m_bar: Vec<f64>,
    /// One-sided Spearman p-value for a decreasing trend after burn-in;
    /// absent when the series is too short or degenerate.
    pub trend_p: Option<f64>,
    /// True when the trend is significantly decreasing (5% level) and
    /// the final mean measure fell below a tenth of the initial one;
    /// `None` when the ensemble is too small to judge.
    pub absorption_flag: Option<bool>,
    /// Log-linear decay rate of the tail of `m_bar`, when defined.
    pub tail_slope: Option<f64>,
}

const BURN_IN_FRAC: f64 = 0.2;
const MIN_TREND_POINTS: usize = 8;
const MIN_ENSEMBLE: usize = 4;

/// One-sided Spearman rank test for a decreasing trend; `None` for
/// degenerate series.
fn spearman_p_decreasing(series: &[f64]) -> Option<f64> {
    let n = series.len();
    if n < 3 {
        return None;
    }
    // Average ranks with ties.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| series[a].partial_cmp(&series[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && series[order[j + 1]] == series[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let xm = (n as f64 + 1.0) / 2.0;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (k, r) in ranks.iter().enumerate() {
        let dx = (k + 1) as f64 - xm;
        let dy = r - xm;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if syy <= 0.0 {
        return None;
    }
    let rho = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    if rho.abs() >= 1.0 {
        return Some(if rho < 0.0 { 0.0 } else { 1.0 });
    }
    let df = (n - 2) as f64;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    Some(dist.cdf(t))
}

/// Assess the self-organized absorption of an ensemble, per the
/// supercritical-measure criterion: significantly decreasing mean after
/// burn-in and a final value below 10% of the initial one.
pub fn soc_statistics(stats: &EnsembleStats) -> SocReport {
    let m_bar = stats.m_bar.clone();
    let n = m_bar.len();
    let burn = ((n as f64) * BURN_IN_FRAC).floor() as usize;
    let tail = &m_bar[burn..];
    let m0 = m_bar[0];
    let enough = stats.paths - stats.failed >= MIN_ENSEMBLE && tail.len() >= MIN_TREND_POINTS;

    let trend_p = spearman_p_decreasing(tail);
    let shrunk = if m0 > 0.0 {
        *m_bar.last().unwrap() < 0.1 * m0
    } else {
        true
    };
    let absorption_flag = if m0 == 0.0 {
        // Nothing was ever supercritical: trivially absorbed.
        Some(true)
    } else if !enough {
        None
    } else {
        match trend_p {
            Some(p) => Some(p < 0.05 && shrunk),
            // Constant tail: decided by the shrink criterion alone
            // (an identically-zero tail is absorbed, a stuck positive
            // plateau is not).
            None => Some(shrunk && tail.iter().all(|&v| v == 0.0)),
        }
    };

    // Tail decay rate: least-squares slope of ln m over the last half,
    // where positive.
    let half = &m_bar[n / 2..];
    let pts: Vec<(f64, f64)> = half
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, &v)| (i as f64, v.ln()))
        .collect();
    let tail_slope = if pts.len() >= 3 {
        let nn = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let denom = nn * sxx - sx * sx;
        if denom > 0.0 {
            Some((nn * sxy - sx * sy) / denom)
        } else {
            None
        }
    } else {
        None
    };
    SocReport { m_bar, trend_p, absorption_flag, tail_slope }
}
