//! Gauss–Hermite quadrature against Gaussian family members, used for exact
//! population moments in low dimension (`k ≤ 3`).

use nalgebra::{DMatrix, SymmetricEigen};

use crate::expfam::Gaussian;

/// Nodes and weights integrating against the standard normal density,
/// ordered by increasing node.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub–Welsch on the Jacobi matrix of the probabilists' Hermite
    /// polynomials. Exact for polynomials of degree `< 2n`.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "at least one node");
        let mut jac = DMatrix::zeros(n, n);
        for i in 1..n {
            let b = (i as f64).sqrt();
            jac[(i, i - 1)] = b;
            jac[(i - 1, i)] = b;
        }
        let eig = SymmetricEigen::new(jac);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        GaussHermite {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1 / total).collect(),
        }
    }

    /// Tensor-product rule for `N(μ, Σ)` in dimension `k`: points `μ + L z`.
    /// Returns `(points, weights)`; the grid has `n^k` entries.
    pub fn gaussian_rule(&self, g: &Gaussian) -> (Vec<Vec<f64>>, Vec<f64>) {
        let k = g.dim();
        let n = self.nodes.len();
        let total = n.pow(k as u32);
        let mut points = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        let mut idx = vec![0usize; k];
        let mut z = vec![0.0; k];
        for _ in 0..total {
            let mut w = 1.0;
            for (d, &i) in idx.iter().enumerate() {
                z[d] = self.nodes[i];
                w *= self.weights[i];
            }
            let mut x = vec![0.0; k];
            g.transform_standard(&z, &mut x);
            points.push(x);
            weights.push(w);
            for d in 0..k {
                idx[d] += 1;
                if idx[d] < n {
                    break;
                }
                idx[d] = 0;
            }
        }
        (points, weights)
    }

    /// `E[f(x)]` under `g`.
    pub fn expect(&self, g: &Gaussian, f: impl Fn(&[f64]) -> f64) -> f64 {
        let (points, weights) = self.gaussian_rule(g);
        points.iter().zip(&weights).map(|(x, w)| w * f(x)).sum()
    }
}
