//! Gaussian quadrature rules computed by the Golub–Welsch eigenvalue method.

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights of an n-point Gauss–Hermite rule for the weight
/// function e^{-x²} (weights sum to √π). Nodes are sorted ascending.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let offdiag: Vec<f64> = (1..n).map(|k| (k as f64 / 2.0).sqrt()).collect();
    golub_welsch(&offdiag, std::f64::consts::PI.sqrt())
}

/// Nodes and weights of an n-point Gauss–Legendre rule on [-1, 1]
/// (weights sum to 2). Nodes are sorted ascending.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let offdiag: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    golub_welsch(&offdiag, 2.0)
}

fn golub_welsch(offdiag: &[f64], total_weight: f64) -> (Vec<f64>, Vec<f64>) {
    let n = offdiag.len() + 1;
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for (k, &b) in offdiag.iter().enumerate() {
        jacobi[(k, k + 1)] = b;
        jacobi[(k + 1, k)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|j| {
            let v0 = eig.eigenvectors[(0, j)];
            (eig.eigenvalues[j], total_weight * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// E[f(X)] for X ~ N(mu, sigma²) by an n-point Gauss–Hermite rule.
pub fn normal_expectation(mu: f64, sigma: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let (nodes, weights) = gauss_hermite(n);
    let scale = std::f64::consts::SQRT_2 * sigma;
    let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
    nodes
        .iter()
        .zip(&weights)
        .map(|(&u, &w)| w * f(mu + scale * u))
        .sum::<f64>()
        * inv_sqrt_pi
}

/// ∫_a^b f(x) dx by a composite Gauss–Legendre rule with the given number
/// of equal panels and nodes per panel.
pub fn integrate_gl(a: f64, b: f64, panels: usize, nodes: usize, f: impl Fn(f64) -> f64) -> f64 {
    let (xs, ws) = gauss_legendre(nodes);
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let mid = lo + 0.5 * h;
        let half = 0.5 * h;
        let mut acc = 0.0;
        for (x, w) in xs.iter().zip(&ws) {
            acc += w * f(mid + half * x);
        }
        total += acc * half;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::normal;

    #[test]
    fn hermite_moments() {
        let (nodes, weights) = gauss_hermite(20);
        assert_eq!(nodes.len(), 20);
        let total: f64 = weights.iter().sum();
        assert!((total - std::f64::consts::PI.sqrt()).abs() < 1e-13);
        // ∫ x² e^{-x²} dx = √π / 2
        let m2: f64 = nodes.iter().zip(&weights).map(|(x, w)| w * x * x).sum();
        assert!((m2 - std::f64::consts::PI.sqrt() / 2.0).abs() < 1e-12);
        // lognormal moment: E[e^X] = e^{1/2} for X ~ N(0,1)
        let v = normal_expectation(0.0, 1.0, 20, |x| x.exp());
        assert!((v - 0.5f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn legendre_integrates_polynomial_and_cdf() {
        let v = integrate_gl(0.0, 2.0, 1, 16, |x| x * x * x);
        assert!((v - 4.0).abs() < 1e-13);
        // ∫ φ = Φ difference
        let v = integrate_gl(-1.0, 2.0, 8, 32, normal::pdf);
        assert!((v - (normal::cdf(2.0) - normal::cdf(-1.0))).abs() < 1e-14);
    }
}
