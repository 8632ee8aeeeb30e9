//! Small quadrature and special-function helpers.

use std::f64::consts::PI;

/// Gauss–Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre_unit(order: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(order >= 1, "Gauss-Legendre order must be positive");
    let mut nodes = vec![0.0; order];
    let mut weights = vec![0.0; order];
    let n = order as f64;
    for i in 0..(order + 1) / 2 {
        // Tricomi initial guess, then Newton on P_n.
        let mut x = (PI * (i as f64 + 0.75) / (n + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(order, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(order, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // map [-1, 1] -> [0, 1]
        nodes[i] = 0.5 * (1.0 - x);
        nodes[order - 1 - i] = 0.5 * (1.0 + x);
        weights[i] = 0.5 * w;
        weights[order - 1 - i] = 0.5 * w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Composite Gauss–Legendre integral of `f` over `[a, b]`.
pub fn integrate_gl<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize, order: usize) -> f64 {
    let (xs, ws) = gauss_legendre_unit(order);
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let mut acc = 0.0;
        for (x, w) in xs.iter().zip(&ws) {
            acc += w * f(lo + x * h);
        }
        total += acc * h;
    }
    total
}

/// Riemann zeta function for real `x > 0`, `x != 1`, via the Dirichlet eta
/// function and Borwein's acceleration.
pub fn zeta(x: f64) -> f64 {
    assert!(x > 0.0 && (x - 1.0).abs() > 1e-12, "zeta evaluated at {x}");
    const N: usize = 48;
    let nf = N as f64;
    let mut term = 1.0 / nf;
    let mut d = Vec::with_capacity(N + 1);
    let mut acc = term;
    d.push(nf * acc);
    for i in 1..=N {
        let fi = i as f64;
        term *= 4.0 * (nf + fi - 1.0) * (nf - fi + 1.0) / ((2.0 * fi) * (2.0 * fi - 1.0));
        acc += term;
        d.push(nf * acc);
    }
    let dn = d[N];
    let mut sum = 0.0;
    for k in 0..N {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign * (d[k] - dn) / ((k + 1) as f64).powf(x);
    }
    let eta = -sum / dn;
    eta / (1.0 - 2f64.powf(1.0 - x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gl_weights_sum_to_one_and_integrate_polynomials() {
        for order in [1, 2, 5, 8, 16] {
            let (x, w) = gauss_legendre_unit(order);
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-13);
            assert!(x.iter().all(|&t| (0.0..=1.0).contains(&t)));
            let deg = 2 * order - 1;
            let integral: f64 = x.iter().zip(&w).map(|(t, w)| w * t.powi(deg as i32)).sum();
            assert!(
                (integral - 1.0 / (deg as f64 + 1.0)).abs() < 1e-13,
                "order {order}"
            );
        }
    }

    #[test]
    fn zeta_known_values() {
        assert!((zeta(0.5) + 1.460_354_508_809_586_8).abs() < 1e-12);
        assert!((zeta(2.0) - PI * PI / 6.0).abs() < 1e-12);
        assert!((zeta(0.25) + 0.813_278_405_261_892).abs() < 1e-11);
        assert!((zeta(0.7) + 2.778_388_445_553_7).abs() < 1e-11);
    }

    #[test]
    fn composite_gl_on_smooth_function() {
        let v = integrate_gl(|x| x.sin(), 0.0, PI, 4, 10);
        assert!((v - 2.0).abs() < 1e-13);
    }
}
