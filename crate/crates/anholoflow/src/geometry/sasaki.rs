//! Sasaki-type lift of a fiber-generating function to a distinguished metric.
//!
//! Given a generating function `L(x, y)` on the chart, the vertical block is
//! the fiber Hessian `h_ab = (1/2) d^2 L / dy^a dy^b`, the horizontal block is
//! its copy under the canonical base/fiber pairing `x^1 ~ y^3`, `x^2 ~ y^4`,
//! and the N-connection comes from the spray
//! `G^a = (1/4) h^{ab} (y^k d^2 L / dx^k dy^b - dL/dx^b)`, via
//! `N^a_j = dG^a / dy^j` (all base indices read through the pairing).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{Field, AX_T, AX_X1, AX_X2, AX_Y4};

use super::{sym2_det, sym2_get, sym2_inv, DMetric};

/// Lift a sampled generating function to a distinguished metric.
///
/// A user-supplied N-connection wins over the spray-derived one.  Fails
/// with a numeric error when the fiber Hessian degenerates anywhere on the
/// chart (`|det h| < delta_nd`).
pub fn sasaki_lift(
    l: &Field,
    delta_nd: f64,
    user_n: Option<[[Field; 2]; 2]>,
) -> Result<DMetric> {
    let chart = Arc::clone(l.chart());

    // Fiber Hessian: h_33, h_34, h_44.
    let ly3 = l.deriv_field(AX_T);
    let ly4 = l.deriv_field(AX_Y4);
    let mut h33 = Field::zeros(&chart);
    let mut h34 = Field::zeros(&chart);
    let mut h44 = Field::zeros(&chart);
    for idx in chart.indices() {
        h33.set(idx, 0.5 * l.deriv2(idx, AX_T));
        h34.set(idx, 0.5 * ly4.deriv(idx, AX_T));
        h44.set(idx, 0.5 * l.deriv2(idx, AX_Y4));
    }
    for idx in chart.indices() {
        let h = [h33.at(idx), h34.at(idx), h44.at(idx)];
        if sym2_det(&h).abs() < delta_nd {
            let p = chart.point(idx);
            return Err(Error::Numeric(format!(
                "generating function has a degenerate fiber Hessian at {p:?} (|det| < {delta_nd})"
            )));
        }
    }

    if let Some(n) = user_n {
        let g = [h33.clone(), h34.clone(), h44.clone()];
        return DMetric::new(&chart, g, [h33, h34, h44], n);
    }

    // Spray coefficients G^3, G^4 from the first fiber derivatives.
    let dly = [&ly3, &ly4];
    let mut spray = [Field::zeros(&chart), Field::zeros(&chart)];
    for idx in chart.indices() {
        let p = chart.point(idx);
        let y = [p[2], p[3]];
        let h = [h33.at(idx), h34.at(idx), h44.at(idx)];
        let hi = sym2_inv(&h);
        let dl_base = [l.deriv(idx, AX_X1), l.deriv(idx, AX_X2)];
        for a in 0..2 {
            let mut v = 0.0;
            for b in 0..2 {
                let mixed = y[0] * dly[b].deriv(idx, AX_X1) + y[1] * dly[b].deriv(idx, AX_X2);
                v += sym2_get(&hi, a, b) * (mixed - dl_base[b]);
            }
            spray[a].set(idx, 0.25 * v);
        }
    }

    // N_j^a = dG^a / dy^j with the pairing x^1 ~ y^3, x^2 ~ y^4.
    let mut n = [
        [Field::zeros(&chart), Field::zeros(&chart)],
        [Field::zeros(&chart), Field::zeros(&chart)],
    ];
    for idx in chart.indices() {
        for a in 0..2 {
            n[0][a].set(idx, spray[a].deriv(idx, AX_T));
            n[1][a].set(idx, spray[a].deriv(idx, AX_Y4));
        }
    }

    let g = [h33.clone(), h34.clone(), h44.clone()];
    DMetric::new(&chart, g, [h33, h34, h44], n)
}
