//! Gauss–Legendre and adaptive Simpson quadrature.

use crate::error::{FflError, Result};

/// Nodes and weights of the `n`-point Gauss–Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Composite Gauss–Legendre: `panels` equal panels of `n` nodes each.
pub fn integrate_gl(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize, panels: usize) -> f64 {
    let (x, w) = gauss_legendre(n);
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let mid = lo + 0.5 * h;
        let half = 0.5 * h;
        for (xi, wi) in x.iter().zip(&w) {
            total += wi * f(mid + half * xi);
        }
    }
    total * 0.5 * h
}

/// Adaptive Simpson integration to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a >= b {
        return Ok(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let mut budget = 2_000_000usize;
    let v = simpson_rec(f, a, b, fa, fm, fb, whole, tol, 60, &mut budget);
    if budget == 0 {
        return Err(FflError::Quadrature(format!(
            "evaluation budget exhausted on [{a}, {b}]"
        )));
    }
    Ok(v)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: usize,
    budget: &mut usize,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    *budget = budget.saturating_sub(2);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || *budget == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1, budget)
        + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1, budget)
}

/// Adaptive Simpson over consecutive breakpoints (sorted and deduplicated).
pub fn adaptive_piecewise(f: &dyn Fn(f64) -> f64, mut points: Vec<f64>, tol: f64) -> Result<f64> {
    points.sort_by(|a, b| a.partial_cmp(b).expect("finite breakpoints"));
    points.dedup();
    let pieces = points.len().saturating_sub(1).max(1);
    let mut total = 0.0;
    for w in points.windows(2) {
        total += adaptive_simpson(f, w[0], w[1], tol / pieces as f64)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        for n in [2usize, 5, 8, 16] {
            let (x, w) = gauss_legendre(n);
            assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-13);
            let deg = 2 * n - 1;
            let integral: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(deg as i32 - 1)).sum();
            let exact = 2.0 / deg as f64;
            assert!((integral - exact).abs() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn composite_rule_integrates_exp() {
        let v = integrate_gl(f64::exp, 0.0, 1.0, 8, 4);
        assert!((v - (1f64.exp() - 1.0)).abs() < 1e-14);
    }

    #[test]
    fn adaptive_handles_kinks() {
        let f = |x: f64| (x - 0.3).abs();
        let v = adaptive_simpson(&f, 0.0, 1.0, 1e-12).unwrap();
        assert!((v - (0.045 + 0.245)).abs() < 1e-10);
    }
}
