//! Small numerical helpers: quadrature on intervals and the half-line, and
//! golden-section search.

use crate::error::{Error, Result};

/// Default relative tolerance for quadrature of jump-size integrals.
pub const QUAD_REL_TOL: f64 = 1e-10;

/// Integral of `f` over `[a, b]` by double-exponential quadrature.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    // First pass fixes the scale, the second meets the relative tolerance.
    let rough = quadrature::double_exponential::integrate(&f, a, b, 1e-6);
    if !rough.integral.is_finite() {
        return Err(Error::NonIntegrable(format!("integrand not finite on [{a}, {b}]")));
    }
    let target = (rel_tol * rough.integral.abs()).max(1e-300);
    let out = quadrature::double_exponential::integrate(&f, a, b, target.max(1e-15 * (b - a).abs()));
    if !out.integral.is_finite() {
        return Err(Error::NonIntegrable(format!("integrand not finite on [{a}, {b}]")));
    }
    let scale = out.integral.abs().max(1e-12);
    if out.error_estimate > 1e3 * rel_tol * scale {
        return Err(Error::NonIntegrable(format!(
            "quadrature on [{a}, {b}] did not resolve: estimate {} +- {}",
            out.integral, out.error_estimate
        )));
    }
    Ok(out.integral)
}

/// Integral of `f` over `[a, ∞)` via the substitution `x = a + u/(1-u)`.
pub fn integrate_half_line<F: Fn(f64) -> f64>(f: F, a: f64, rel_tol: f64) -> Result<f64> {
    let g = |u: f64| {
        if u >= 1.0 {
            return 0.0;
        }
        let one_minus = 1.0 - u;
        let x = a + u / one_minus;
        let v = f(x) / (one_minus * one_minus);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    integrate(g, 0.0, 1.0, rel_tol)
}

/// Minimizer of a unimodal `f` on `[a, b]` by golden-section search.
///
/// Returns `(argmin, min)`.
pub fn golden_section_min<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut iter = 0;
    while (b - a).abs() > tol && iter < 400 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
        iter += 1;
    }
    let x = 0.5 * (a + b);
    let fx = f(x);
    // Keep the best point seen in the final bracket.
    [(x, fx), (c, fc), (d, fd)]
        .into_iter()
        .fold((x, fx), |best, p| if p.1 < best.1 { p } else { best })
}

/// Maximizer of a unimodal `f` on `[a, b]`.
pub fn golden_section_max<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> (f64, f64) {
    let (x, v) = golden_section_min(|x| -f(x), a, b, tol);
    (x, -v)
}

/// Coarse grid scan followed by golden-section polish around the best grid point.
pub fn grid_then_golden_min<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, points: usize, tol: f64) -> (f64, f64) {
    let points = points.max(3);
    let h = (b - a) / (points - 1) as f64;
    let mut best = (a, f(a));
    for i in 1..points {
        let x = a + i as f64 * h;
        let v = f(x);
        if v < best.1 {
            best = (x, v);
        }
    }
    let lo = (best.0 - h).max(a);
    let hi = (best.0 + h).min(b);
    let polished = golden_section_min(&mut f, lo, hi, tol);
    if polished.1 <= best.1 {
        polished
    } else {
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_mean_on_half_line() {
        let lam = 3.0;
        let v = integrate_half_line(|z| z * lam * (-lam * z).exp(), 0.0, 1e-12).unwrap();
        assert!((v - 1.0 / lam).abs() < 1e-12);
    }

    #[test]
    fn divergent_integral_is_flagged() {
        let r = integrate_half_line(|z| (2.0 * z).exp(), 0.0, 1e-10);
        assert!(r.is_err());
    }

    #[test]
    fn golden_section_finds_parabola_vertex() {
        let (x, v) = golden_section_min(|x| (x - 0.3).powi(2) + 1.0, -2.0, 2.0, 1e-12);
        assert!((x - 0.3).abs() < 1e-7);
        assert!((v - 1.0).abs() < 1e-14);
    }

    #[test]
    fn grid_then_golden_handles_multimodal_scan() {
        let (x, _) = grid_then_golden_min(|x| (x * x - 1.0).powi(2) + 0.1 * x, -2.0, 2.0, 101, 1e-12);
        assert!(x < 0.0);
    }
}
