//! Reduced second-variation spectrum: eigenpairs of `A K` with `A` the
//! loss Hessian and `K` the kernel matrix of the potentials, plus
//! zero-crossing detection along a sequence of frames.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use crate::dynamics::kernel_matrix;

pub const MAX_DIM: usize = 64;
/// Relative threshold for numerical rank and for "nonzero" eigenvalues.
pub const RANK_TOL: f64 = 1e-8;
/// Imaginary parts above this are flagged by the crossing tracker.
pub const IMAG_FLAG: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ReducedSpectrum {
    /// Eigenvalues of `A K`, sorted by descending real part.
    pub values: Vec<Complex64>,
    /// Unit eigenvectors for nonzero eigenvalues, `None` otherwise.
    pub vectors: Vec<Option<DVector<Complex64>>>,
    /// `||A K q - lambda q|| / ||q||` for every returned vector.
    pub residuals: Vec<f64>,
    /// Numerical rank of `A K`.
    pub rank: usize,
    pub nonzero: usize,
    /// Whether the symmetric reduction was used (`A` symmetric).
    pub symmetric: bool,
}

impl ReducedSpectrum {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }
}

fn validate(a: &DMatrix<f64>, k: &DMatrix<f64>) -> Result<usize> {
    let m = a.nrows();
    for (what, mat) in [("A", a), ("K", k)] {
        if !mat.is_square() || mat.nrows() != m {
            return Err(Error::LengthMismatch {
                what: if what == "A" { "A rows/cols" } else { "K rows/cols" },
                expected: m,
                got: mat.ncols().max(mat.nrows()),
            });
        }
        if mat.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("{what} has non-finite entries")));
        }
    }
    if m == 0 || m > MAX_DIM {
        return Err(Error::InvalidParameter(format!("m = {m} outside 1..={MAX_DIM}")));
    }
    let asym = (k - k.transpose()).abs().max();
    if asym > 1e-10 * k.abs().max().max(1.0) {
        return Err(Error::InvalidParameter(format!("K is not symmetric (defect {asym:e})")));
    }
    Ok(m)
}

/// Symmetric square root of a PSD matrix, clipping round-off negatives.
fn psd_sqrt(k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (k + k.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Eigen("kernel eigendecomposition did not converge".into()))?;
    let scale = eig.eigenvalues.abs().max().max(1.0);
    if let Some(bad) = eig.eigenvalues.iter().find(|v| **v < -1e-10 * scale) {
        return Err(Error::InvalidParameter(format!(
            "K is not positive semidefinite (eigenvalue {bad:e})"
        )));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

fn residual(m: &DMatrix<Complex64>, lambda: Complex64, q: &DVector<Complex64>) -> f64 {
    (m * q - q * lambda).norm() / q.norm()
}

/// Eigenpairs of `A K` for symmetric `A` and positive semidefinite `K`.
///
/// With symmetric `A` the spectrum equals that of `S = K^{1/2} A K^{1/2}`,
/// which is real; for `S u = lambda u`, `q = A K^{1/2} u` satisfies
/// `A K q = lambda q`. Non-symmetric `A` falls back to a Schur
/// decomposition of the product and may give complex eigenvalues.
pub fn reduced_eigs(a: &DMatrix<f64>, k: &DMatrix<f64>) -> Result<ReducedSpectrum> {
    let m = validate(a, k)?;
    let product = a * k;
    let svals = product.singular_values();
    let smax = svals.max();
    let cutoff = RANK_TOL * smax;
    let rank = if smax == 0.0 {
        0
    } else {
        svals.iter().filter(|s| **s > cutoff).count()
    };
    let product_c = product.map(|v| Complex64::new(v, 0.0));
    let a_scale = a.abs().max().max(f64::MIN_POSITIVE);
    let symmetric = (a - a.transpose()).abs().max() <= 1e-12 * a_scale;

    let mut pairs: Vec<(Complex64, Option<DVector<Complex64>>)> = if symmetric {
        let root = psd_sqrt(k)?;
        let s = &root * a * &root;
        let s = (&s + s.transpose()) * 0.5;
        let eig = SymmetricEigen::try_new(s, f64::EPSILON, 10_000)
            .ok_or_else(|| Error::Eigen("reduced eigenproblem did not converge".into()))?;
        let ar = a * &root;
        (0..m)
            .map(|i| {
                let lam = eig.eigenvalues[i];
                let vec = (lam.abs() > cutoff && smax > 0.0).then(|| {
                    let q = &ar * eig.eigenvectors.column(i);
                    q.normalize().map(|v| Complex64::new(v, 0.0))
                });
                (Complex64::new(lam, 0.0), vec)
            })
            .collect()
    } else {
        let schur = nalgebra::Schur::try_new(product.clone(), f64::EPSILON, 10_000)
            .ok_or_else(|| Error::Eigen("Schur decomposition did not converge".into()))?;
        let values = schur.complex_eigenvalues();
        values
            .iter()
            .map(|&lam| {
                let vec = (lam.norm() > cutoff && smax > 0.0).then(|| {
                    let shifted = &product_c - DMatrix::from_diagonal_element(m, m, lam);
                    let svd = shifted.svd(false, true);
                    let v_t = svd.v_t.expect("requested");
                    let idx = svd.singular_values.imin();
                    v_t.row(idx).adjoint().normalize()
                });
                (lam, vec)
            })
            .collect()
    };
    pairs.sort_by(|x, y| y.0.re.total_cmp(&x.0.re).then(y.0.im.total_cmp(&x.0.im)));

    let mut values = Vec::with_capacity(m);
    let mut vectors = Vec::with_capacity(m);
    let mut residuals = Vec::new();
    for (lam, vec) in pairs {
        if let Some(q) = &vec {
            residuals.push(residual(&product_c, lam, q));
        }
        values.push(lam);
        vectors.push(vec);
    }
    let nonzero = vectors.iter().filter(|v| v.is_some()).count();
    Ok(ReducedSpectrum {
        values,
        vectors,
        residuals,
        rank,
        nonzero,
        symmetric,
    })
}

fn kc_product(coeffs: &[f64], k: &DMatrix<f64>) -> Vec<f64> {
    let m = coeffs.len();
    (0..m)
        .map(|i| (0..m).fold(0.0, |acc, j| acc + k[(i, j)] * coeffs[j]))
        .collect()
}

/// `(K c)^T A (K c)`: the second variation on `f = sum_i c_i r_i`,
/// evaluated as `(Kc) . (A (Kc))`.
pub fn second_variation_quadform(coeffs: &[f64], a: &DMatrix<f64>, k: &DMatrix<f64>) -> Result<f64> {
    let m = coeffs.len();
    if a.shape() != (m, m) || k.shape() != (m, m) {
        return Err(Error::LengthMismatch {
            what: "quadratic form dimensions",
            expected: a.nrows(),
            got: m,
        });
    }
    let kc = kc_product(coeffs, k);
    let akc: Vec<f64> = (0..m)
        .map(|i| (0..m).fold(0.0, |acc, j| acc + a[(i, j)] * kc[j]))
        .collect();
    Ok((0..m).fold(0.0, |acc, i| acc + kc[i] * akc[i]))
}

/// The same form evaluated as `((Kc)^T A) . (Kc)`. For symmetric `A` the
/// two orders perform identical floating-point operations.
pub fn second_variation_quadform_entrywise(coeffs: &[f64], a: &DMatrix<f64>, k: &DMatrix<f64>) -> f64 {
    let m = coeffs.len();
    let kc = kc_product(coeffs, k);
    let kca: Vec<f64> = (0..m)
        .map(|j| (0..m).fold(0.0, |acc, i| acc + kc[i] * a[(i, j)]))
        .collect();
    (0..m).fold(0.0, |acc, j| acc + kca[j] * kc[j])
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumFrame {
    pub t: f64,
    pub a: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub spectrum: ReducedSpectrum,
}

impl SpectrumFrame {
    pub fn new(t: f64, a: DMatrix<f64>, k: DMatrix<f64>) -> Result<Self> {
        let spectrum = reduced_eigs(&a, &k)?;
        Ok(Self { t, a, k, spectrum })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    /// Track index: position in the first frame's descending order.
    pub track: usize,
    pub t_cross: f64,
    /// `+1` for a positive-to-negative crossing, `-1` otherwise.
    pub direction: i8,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CrossingReport {
    pub crossings: Vec<Crossing>,
    /// Frame indices whose continuation was ambiguous and fell back to
    /// sorted order.
    pub ambiguous_frames: Vec<usize>,
    /// Frame indices containing an eigenvalue with `|Im| > IMAG_FLAG`.
    pub complex_frames: Vec<usize>,
}

/// Continues eigenvalue traces across time-ordered frames by nearest
/// neighbour in value and reports sign changes of the real part, placing
/// each crossing by linear interpolation between the last nonzero sample
/// and the first sample of opposite sign.
pub fn track_crossings(times: &[f64], eigs: &[Vec<Complex64>]) -> Result<CrossingReport> {
    if times.len() != eigs.len() {
        return Err(Error::LengthMismatch {
            what: "frames",
            expected: times.len(),
            got: eigs.len(),
        });
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("frame times must be strictly increasing".into()));
    }
    let mut report = CrossingReport::default();
    let Some(first) = eigs.first() else {
        return Ok(report);
    };
    let m = first.len();
    if let Some(bad) = eigs.iter().find(|e| e.len() != m) {
        return Err(Error::LengthMismatch {
            what: "eigenvalues per frame",
            expected: m,
            got: bad.len(),
        });
    }
    // order[track] = position of that track's eigenvalue in the frame.
    let mut order: Vec<usize> = (0..m).collect();
    // Last nonzero (t, value) per track.
    let mut last: Vec<Option<(f64, f64)>> = vec![None; m];
    for (f, (t, frame)) in times.iter().zip(eigs).enumerate() {
        if frame.iter().any(|l| l.im.abs() > IMAG_FLAG) {
            report.complex_frames.push(f);
        }
        if f > 0 {
            let prev = &eigs[f - 1];
            let mut next = vec![usize::MAX; m];
            let mut taken = vec![false; m];
            let mut ambiguous = false;
            for track in 0..m {
                let v = prev[order[track]];
                let best = (0..m)
                    .min_by(|&i, &j| (frame[i] - v).norm().total_cmp(&(frame[j] - v).norm()))
                    .expect("m >= 1");
                if taken[best] {
                    ambiguous = true;
                    break;
                }
                taken[best] = true;
                next[track] = best;
            }
            if ambiguous {
                report.ambiguous_frames.push(f);
                next = (0..m).collect();
            }
            order = next;
        }
        for track in 0..m {
            let v = frame[order[track]].re;
            if v == 0.0 {
                continue;
            }
            if let Some((t0, v0)) = last[track] {
                if v0.signum() != v.signum() {
                    report.crossings.push(Crossing {
                        track,
                        t_cross: t0 + (t - t0) * v0 / (v0 - v),
                        direction: if v0 > 0.0 { 1 } else { -1 },
                    });
                }
            }
            last[track] = Some((*t, v));
        }
    }
    report
        .crossings
        .sort_by(|a, b| a.t_cross.total_cmp(&b.t_cross).then(a.track.cmp(&b.track)));
    Ok(report)
}
