//! Adaptive Simpson quadrature, used for user-supplied schedules and as an
//! independent cross-check of closed-form integrals.

/// Integrates `f` over `[a, b]` to roughly `tol` absolute accuracy, or to
/// rounding level where the integrand is too large for that.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    if b < a {
        return -integrate(f, b, a, tol);
    }
    // Split first so that narrow features are not missed by the initial rule.
    const PIECES: usize = 16;
    let h = (b - a) / PIECES as f64;
    (0..PIECES)
        .map(|i| {
            let lo = a + i as f64 * h;
            let hi = if i + 1 == PIECES { b } else { lo + h };
            let (flo, fmid, fhi) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            let whole = simpson(lo, hi, flo, fmid, fhi);
            recurse(&f, lo, hi, flo, fmid, fhi, whole, tol / PIECES as f64, 48)
        })
        .sum()
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn recurse<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol || delta.abs() <= 1e-13 * (left + right).abs() {
        left + right + delta / 15.0
    } else {
        recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

/// Composite trapezoid rule on `n` equal panels.
pub fn trapezoid<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n).map(|i| f(a + i as f64 * h)).sum();
    h * (0.5 * (f(a) + f(b)) + inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_and_exponential() {
        assert!((integrate(|x| x * x, 0.0, 3.0, 1e-12) - 9.0).abs() < 1e-12);
        let e = integrate(f64::exp, 0.0, 1.0, 1e-13);
        assert!((e - (std::f64::consts::E - 1.0)).abs() < 1e-12);
        assert!((integrate(|x| x, 2.0, 0.0, 1e-12) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn trapezoid_converges() {
        let t = trapezoid(|x| x.sin(), 0.0, std::f64::consts::PI, 100_000);
        assert!((t - 2.0).abs() < 1e-9);
    }
}
