//! Adaptive composite Gauss–Legendre integration.

use std::num::NonZeroUsize;
use std::sync::OnceLock;

use gauss_quad::GaussLegendre;

use crate::error::{Error, Result};

const RULE_DEGREE: usize = 20;

fn rule() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(NonZeroUsize::new(RULE_DEGREE).unwrap()))
}

/// Integration outcome with the accumulated error estimate and panel count.
#[derive(Clone, Copy, Debug)]
pub struct Integral {
    pub value: f64,
    pub error: f64,
    pub panels: usize,
}

/// Integrates `f` over `[lo, hi]`, splitting first at every breakpoint strictly
/// inside the interval and then bisecting panels until the two-level estimate
/// agrees within `max(abs_tol·w/W, rel_tol·|panel|)`.
pub fn integrate<F: FnMut(f64) -> f64>(
    mut f: F,
    lo: f64,
    hi: f64,
    breakpoints: &[f64],
    abs_tol: f64,
    rel_tol: f64,
    max_panels: usize,
) -> Result<Integral> {
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::domain(format!("integration bounds must be finite: [{lo}, {hi}]")));
    }
    if hi <= lo {
        return Ok(Integral { value: 0.0, error: 0.0, panels: 0 });
    }
    let gl = rule();
    let mut cuts: Vec<f64> = breakpoints.iter().copied().filter(|&p| p > lo && p < hi).collect();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();
    let mut edges = Vec::with_capacity(cuts.len() + 2);
    edges.push(lo);
    edges.extend(cuts);
    edges.push(hi);

    let width = hi - lo;
    let mut stack: Vec<(f64, f64, f64)> = edges
        .windows(2)
        .map(|w| (w[0], w[1], gl.integrate(w[0], w[1], &mut f)))
        .collect();
    let mut total = 0.0;
    let mut error = 0.0;
    let mut panels = stack.len();
    while let Some((a, b, whole)) = stack.pop() {
        let mid = 0.5 * (a + b);
        let left = gl.integrate(a, mid, &mut f);
        let right = gl.integrate(mid, b, &mut f);
        let refined = left + right;
        let diff = (refined - whole).abs();
        let allowed = (abs_tol * (b - a) / width).max(rel_tol * refined.abs());
        if diff <= allowed || mid <= a || mid >= b {
            total += refined;
            error += diff;
            continue;
        }
        panels += 1;
        if panels > max_panels {
            return Err(Error::numerical(format!(
                "adaptive quadrature exceeded {max_panels} panels on [{lo}, {hi}] \
                 (stuck near [{a}, {b}], local discrepancy {diff:e})"
            )));
        }
        stack.push((a, mid, left));
        stack.push((mid, b, right));
    }
    Ok(Integral { value: total, error, panels })
}
