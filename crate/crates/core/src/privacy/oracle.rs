//! Brute-force numerical reference for the subsampled-Gaussian Renyi bound.
//!
//! Computes `D_alpha(mu || mu0)` by direct adaptive quadrature of
//! `integral mu0(x) * (mu(x)/mu0(x))^alpha dx` with
//! `mu0 = N(0, sigma^2)` and `mu = (1-q) mu0 + q N(1, sigma^2)`,
//! entirely in log space so large orders neither overflow nor underflow.
//! This path shares no code with the binomial-expansion formula in the
//! parent module; the test suites require the two to agree to 1e-6.

/// Renyi divergence of the subsampled Gaussian mechanism at integer
/// `order`, by adaptive Simpson quadrature of the defining integral.
pub fn rdp_oracle(q: f64, sigma: f64, order: u32) -> f64 {
    assert!(order >= 2, "order must be >= 2");
    assert!((0.0..=1.0).contains(&q) && sigma > 0.0);
    if q == 0.0 {
        return 0.0;
    }
    let alpha = order as f64;

    // log integrand: log mu0(x) + alpha * log((1-q) + q e^{(2x-1)/(2 s^2)})
    let log_g = |x: f64| -> f64 {
        let log_mu0 = -x * x / (2.0 * sigma * sigma)
            - (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
        log_mu0 + alpha * log_ratio(x, q, sigma)
    };

    // the integrand mass sits between the mu0 bump at 0 and the shifted
    // bump the ratio term induces near x ~ alpha
    let lo = -20.0 * sigma - 5.0;
    let hi = alpha + 20.0 * sigma + 5.0;

    // locate the maximum of log_g on a fine scan, then integrate
    // exp(log_g - gmax) panel by panel
    let scan_points = 20_000;
    let mut gmax = f64::NEG_INFINITY;
    for i in 0..=scan_points {
        let x = lo + (hi - lo) * i as f64 / scan_points as f64;
        gmax = gmax.max(log_g(x));
    }

    let f = |x: f64| (log_g(x) - gmax).exp();
    let panels = 64;
    let mut integral = 0.0;
    for i in 0..panels {
        let a = lo + (hi - lo) * i as f64 / panels as f64;
        let b = lo + (hi - lo) * (i + 1) as f64 / panels as f64;
        integral += adaptive_simpson(&f, a, b, 1e-13 / panels as f64);
    }

    (gmax + integral.ln()) / (alpha - 1.0)
}

/// `log((1-q) + q e^y)` with `y = (2x-1)/(2 sigma^2)`, stable for any y.
fn log_ratio(x: f64, q: f64, sigma: f64) -> f64 {
    let y = (2.0 * x - 1.0) / (2.0 * sigma * sigma);
    if q == 1.0 {
        return y;
    }
    if y < 650.0 {
        (1.0 - q).ln() + (q / (1.0 - q) * y.exp()).ln_1p()
    } else {
        q.ln() + y + ((1.0 - q) / q * (-y).exp()).ln_1p()
    }
}

fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, eps: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fb, fm, whole, eps, 60)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fb: f64,
    fm: f64,
    whole: f64,
    eps: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * eps {
        left + right + delta / 15.0
    } else {
        simpson_step(f, a, m, fa, fm, flm, left, eps / 2.0, depth - 1)
            + simpson_step(f, m, b, fm, fb, frm, right, eps / 2.0, depth - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::privacy::rdp_subsampled_gaussian;

    #[test]
    fn oracle_matches_unsubsampled_closed_form() {
        // q = 1: D_alpha = alpha / (2 sigma^2)
        for &(sigma, alpha) in &[(1.0, 4u32), (2.0, 16)] {
            let got = rdp_oracle(1.0, sigma, alpha);
            let expect = alpha as f64 / (2.0 * sigma * sigma);
            assert!(
                (got - expect).abs() < 1e-8 * expect,
                "sigma={sigma} alpha={alpha}: {got} vs {expect}"
            );
        }
    }

    #[test]
    fn oracle_matches_frozen_reference() {
        // 50-digit reference: rdp(0.01, 2, 8)
        let got = rdp_oracle(0.01, 2.0, 8);
        assert!((got - 1.1575614792991032e-4).abs() < 1e-10, "got {got}");
        // and a large-order large-q point: rdp(0.1, 1, 64)
        let got = rdp_oracle(0.1, 1.0, 64);
        assert!(
            (got - 29.660865937275890).abs() < 1e-6 * 29.66,
            "got {got}"
        );
    }

    #[test]
    fn oracle_agrees_with_formula_spot_checks() {
        for &(q, sigma, alpha) in &[
            (0.005, 1.0, 2u32),
            (0.01, 2.0, 8),
            (0.1, 4.0, 32),
            (0.1, 1.0, 64),
        ] {
            let a = rdp_subsampled_gaussian(q, sigma, alpha).unwrap();
            let b = rdp_oracle(q, sigma, alpha);
            assert!(
                (a - b).abs() <= 1e-6 * b.abs().max(1.0),
                "q={q} sigma={sigma} alpha={alpha}: formula {a} vs oracle {b}"
            );
        }
    }
}
