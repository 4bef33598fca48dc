//! Slow, direct reference computations used to cross-check the fast paths.
//!
//! Nothing here shares code with the implementations it checks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::matrix::Matrix;

/// Triple-loop matrix product.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows(), "naive_matmul shape mismatch");
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for p in 0..a.cols() {
                acc += a.get(i, p) * b.get(p, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// `W0 x + alpha * sum_j m_j a_j (b_j . x)`, one rank-one term at a time.
pub fn rank_one_forward(
    w0: &Matrix,
    a: &Matrix,
    b: &Matrix,
    alpha: f64,
    m: &[f64],
    x: &[f64],
) -> Vec<f64> {
    let mut y: Vec<f64> = (0..w0.rows())
        .map(|i| (0..w0.cols()).map(|j| w0.get(i, j) * x[j]).sum())
        .collect();
    for (j, g) in m.iter().enumerate() {
        let bx: f64 = (0..b.cols()).map(|c| b.get(j, c) * x[c]).sum();
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += alpha * g * a.get(i, j) * bx;
        }
    }
    y
}

/// Monte-Carlo estimate of `KL(N(mu, sigma^2 I) || N(0, sigma^2 I))`.
pub fn mc_gaussian_kl<R: Rng + ?Sized>(mu: &[f64], sigma: f64, samples: usize, rng: &mut R) -> f64 {
    let s2 = sigma * sigma;
    let mut total = 0.0;
    for _ in 0..samples {
        let mut log_ratio = 0.0;
        for &m in mu {
            let eps: f64 = StandardNormal.sample(rng);
            let z = m + sigma * eps;
            // log q(z) - log p(z) with the shared normaliser cancelled.
            log_ratio += (z * z - (z - m) * (z - m)) / (2.0 * s2);
        }
        total += log_ratio;
    }
    total / samples as f64
}

/// `KL(Bernoulli(q) || Bernoulli(p))` straight from the definition.
pub fn bernoulli_kl(q: f64, p: f64) -> f64 {
    let term = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    term(q, p) + term(1.0 - q, 1.0 - p)
}

/// Dense Laplacian `D - A` from an undirected edge list.
pub fn laplacian_from_edges(n: usize, edges: &[(usize, usize)]) -> Matrix {
    let mut l = Matrix::zeros(n, n);
    for &(i, j) in edges {
        l.set(i, j, l.get(i, j) - 1.0);
        l.set(j, i, l.get(j, i) - 1.0);
        l.set(i, i, l.get(i, i) + 1.0);
        l.set(j, j, l.get(j, j) + 1.0);
    }
    l
}

/// `sum_{ij} L_ij <u_i, u_j>` by explicit double loop.
pub fn quadratic_energy(rows: &[Vec<f64>], lap: &Matrix) -> f64 {
    let mut e = 0.0;
    for (i, ui) in rows.iter().enumerate() {
        for (j, uj) in rows.iter().enumerate() {
            let dot: f64 = ui.iter().zip(uj).map(|(a, b)| a * b).sum();
            e += lap.get(i, j) * dot;
        }
    }
    e
}

/// `sum_l |u_{l+1} - u_l|^2`.
pub fn adjacent_difference_energy(rows: &[Vec<f64>]) -> f64 {
    rows.windows(2)
        .map(|w| {
            w[0].iter()
                .zip(&w[1])
                .map(|(a, b)| (b - a) * (b - a))
                .sum::<f64>()
        })
        .sum()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn jacobi_eigenvalues(m: &Matrix) -> Vec<f64> {
    let n = m.rows();
    assert_eq!(n, m.cols(), "jacobi_eigenvalues needs a square matrix");
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut vals: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    vals.sort_by(f64::total_cmp);
    vals
}

/// Closed-form spectrum of the path-graph Laplacian: `2 - 2 cos(pi k / n)`.
pub fn path_laplacian_spectrum(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 2.0 - 2.0 * (std::f64::consts::PI * k as f64 / n as f64).cos())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_matches_path_spectrum() {
        for n in 2..10 {
            let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
            let got = jacobi_eigenvalues(&laplacian_from_edges(n, &edges));
            let want = path_laplacian_spectrum(n);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-10, "n={n}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn bernoulli_kl_zero_at_prior() {
        assert_eq!(bernoulli_kl(0.3, 0.3), 0.0);
        assert!(bernoulli_kl(0.9, 0.5) > 0.0);
    }

    #[test]
    fn naive_matmul_small() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Matrix::from_rows(&[vec![5.0], vec![6.0]]);
        assert_eq!(naive_matmul(&a, &b).data(), &[17.0, 39.0]);
    }
}
