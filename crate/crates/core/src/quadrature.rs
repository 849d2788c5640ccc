//! Gauss rules (Golub-Welsch nodes, Christoffel weights) and an adaptive
//! Simpson integrator used as an independent check.

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights of an n-point rule.
#[derive(Clone, Debug)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Eigenvalues of the symmetric tridiagonal Jacobi matrix with zero
/// diagonal and the given off-diagonal, sorted ascending.
fn jacobi_nodes(off: &[f64]) -> Vec<f64> {
    let n = off.len() + 1;
    let mut j = DMatrix::<f64>::zeros(n, n);
    for (i, b) in off.iter().enumerate() {
        j[(i, i + 1)] = *b;
        j[(i + 1, i)] = *b;
    }
    let mut nodes: Vec<f64> = SymmetricEigen::new(j).eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.total_cmp(b));
    // The rules are symmetric; average mirrored pairs so odd integrands
    // cancel exactly.
    for i in 0..n / 2 {
        let x = 0.5 * (nodes[n - 1 - i] - nodes[i]);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    nodes
}

/// Gauss-Legendre on [-1, 1].
pub fn gauss_legendre(n: usize) -> Rule {
    assert!(n >= 1);
    let off: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    let nodes = jacobi_nodes(&off);
    let weights = nodes
        .iter()
        .map(|&x| {
            // Orthonormal Legendre p_k = sqrt((2k+1)/2) P_k; w = 1 / sum p_k^2.
            let (mut p0, mut p1) = (1.0, x);
            let mut s = 0.5 * p0 * p0;
            if n > 1 {
                s += 1.5 * p1 * p1;
            }
            for k in 1..n.saturating_sub(1) {
                let kf = k as f64;
                let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
                s += (2.0 * kf + 3.0) / 2.0 * p2 * p2;
                p0 = p1;
                p1 = p2;
            }
            1.0 / s
        })
        .collect();
    Rule { nodes, weights }
}

/// Gauss-Hermite for the standard normal density: `sum w_i f(x_i)`
/// approximates `E[f(Z)]`, `Z ~ N(0, 1)`, and the weights sum to 1.
pub fn gauss_hermite_normal(n: usize) -> Rule {
    assert!(n >= 1);
    let off: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).collect();
    let nodes = jacobi_nodes(&off);
    let weights = nodes
        .iter()
        .map(|&x| {
            // Orthonormal p_k = He_k / sqrt(k!).
            let (mut p0, mut p1) = (1.0, x);
            let mut s = 1.0;
            if n > 1 {
                s += p1 * p1;
            }
            for k in 1..n.saturating_sub(1) {
                let kf = k as f64;
                let p2 = (x * p1 - kf.sqrt() * p0) / (kf + 1.0).sqrt();
                s += p2 * p2;
                p0 = p1;
                p1 = p2;
            }
            1.0 / s
        })
        .collect();
    Rule { nodes, weights }
}

impl Rule {
    /// Affine map of a [-1, 1] rule onto [a, b].
    pub fn mapped(&self, a: f64, b: f64) -> Rule {
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        Rule {
            nodes: self.nodes.iter().map(|x| mid + half * x).collect(),
            weights: self.weights.iter().map(|w| w * half).collect(),
        }
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(*x)).sum()
    }

    /// Tensor-product sum over `dim` copies of this rule.
    pub fn integrate_tensor(&self, dim: usize, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        let n = self.nodes.len();
        let mut idx = vec![0usize; dim];
        let mut z = vec![0.0; dim];
        let mut total = 0.0;
        loop {
            let mut w = 1.0;
            for (l, &i) in idx.iter().enumerate() {
                z[l] = self.nodes[i];
                w *= self.weights[i];
            }
            total += w * f(&z);
            let mut l = 0;
            loop {
                if l == dim {
                    return total;
                }
                idx[l] += 1;
                if idx[l] < n {
                    break;
                }
                idx[l] = 0;
                l += 1;
            }
        }
    }
}

/// Adaptive Simpson on [a, b] to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let diff = left + right - whole;
        if depth == 0 || diff.abs() <= 15.0 * tol {
            return left + right + diff / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = simpson(fa, fm, fb, a, b);
    recurse(f, a, b, fa, fm, fb, whole, tol, 50)
}
