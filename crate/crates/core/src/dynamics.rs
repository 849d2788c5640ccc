//! Particle discretization of the Wasserstein gradient flow of a separable
//! loss `H[mu] = L(rho_1[mu], ..., rho_m[mu])`.
//!
//! Each particle follows `dz/dt = -v(z)` with the velocity field
//! `v(z) = sum_i dL/drho_i * grad r_i(z)`, and `rho` is recomputed from the
//! particle cloud before every velocity evaluation. Reductions over
//! particles run in index order, so results are reproducible bit for bit.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::abelian_task::ParticleSystem;
use crate::error::{Error, Result};
use crate::hermite::{hermite_eval, hermite_grad_into, HermiteIndex, McEstimate};
use crate::potentials::{decomposed_loss, decomposed_loss_conj_gradient, AbelianMpVector};
use crate::rng;
use num_complex::Complex64;

/// Real-valued potential functions `r_i : R^d -> R`.
pub trait PotentialFamily: Send + Sync {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn eval_into(&self, z: &[f64], out: &mut [f64]);
    /// Row-major `len x dim` Jacobian.
    fn jacobian_into(&self, z: &[f64], out: &mut [f64]);
    fn label(&self, i: usize) -> String {
        format!("rho_{i}")
    }
}

/// Potentials given by Hermite multi-indices (monic monomials when every
/// entry is 0 or 1).
#[derive(Clone, Debug, PartialEq)]
pub struct HermiteFamily {
    dim: usize,
    members: Vec<HermiteIndex>,
}

impl HermiteFamily {
    pub fn new(members: Vec<HermiteIndex>) -> Result<Self> {
        let dim = members
            .first()
            .ok_or_else(|| Error::InvalidParameter("empty potential family".into()))?
            .dim();
        if let Some(bad) = members.iter().find(|a| a.dim() != dim) {
            return Err(Error::LengthMismatch {
                what: "multi-index dimension",
                expected: dim,
                got: bad.dim(),
            });
        }
        Ok(Self { dim, members })
    }

    pub fn members(&self) -> &[HermiteIndex] {
        &self.members
    }
}

impl PotentialFamily for HermiteFamily {
    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.members.len()
    }

    fn eval_into(&self, z: &[f64], out: &mut [f64]) {
        for (o, a) in out.iter_mut().zip(&self.members) {
            *o = hermite_eval(a, z);
        }
    }

    fn jacobian_into(&self, z: &[f64], out: &mut [f64]) {
        for (i, a) in self.members.iter().enumerate() {
            hermite_grad_into(a, z, &mut out[i * self.dim..(i + 1) * self.dim]);
        }
    }
}

/// Real and imaginary parts of the Abelian-task MPs as functions of the
/// real coordinates of one particle.
///
/// Coordinates: `((role * (n-1) + (k-1)) * 2 + part)` with `part = 0` for
/// the real and `1` for the imaginary part. Potentials: coordinate `2i`
/// is `Re rho_i`, `2i + 1` is `Im rho_i`, with `i` the flat index of
/// [`AbelianMpVector`].
#[derive(Clone, Debug)]
pub struct AbelianFamily {
    n: usize,
    /// Complex coordinate indices of the three factors of each MP.
    factors: Vec<[usize; 3]>,
}

impl AbelianFamily {
    pub fn new(n: usize) -> Self {
        let w = n - 1;
        let coord = |role: usize, k: usize| role * w + (k - 1);
        let mut factors = Vec::with_capacity(3 * w * w * w);
        for (p1, p2) in [(0, 1), (0, 0), (1, 1)] {
            for k1 in 1..n {
                for k2 in 1..n {
                    for k in 1..n {
                        factors.push([coord(p1, k1), coord(p2, k2), coord(2, k)]);
                    }
                }
            }
        }
        Self { n, factors }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn particles_from(ps: &ParticleSystem) -> Particles {
        let data = ps.coeffs().iter().flat_map(|c| [c.re, c.im]).collect();
        Particles {
            dim: 6 * (ps.n() - 1),
            data,
        }
    }

    pub fn to_particle_system(&self, particles: &Particles) -> Result<ParticleSystem> {
        let coeffs = particles
            .data
            .chunks(2)
            .map(|c| Complex64::new(c[0], c[1]))
            .collect();
        ParticleSystem::from_coeffs(self.n, particles.len(), coeffs)
    }

    /// Reassembles complex MPs from the real potential vector.
    pub fn mps(&self, rho: &[f64]) -> AbelianMpVector {
        let flat: Vec<Complex64> = rho.chunks(2).map(|c| Complex64::new(c[0], c[1])).collect();
        AbelianMpVector::from_flat(self.n, &flat).expect("length fixed by family")
    }

    fn complex_coords(z: &[f64]) -> impl Fn(usize) -> Complex64 + '_ {
        move |c| Complex64::new(z[2 * c], z[2 * c + 1])
    }
}

impl PotentialFamily for AbelianFamily {
    fn dim(&self) -> usize {
        6 * (self.n - 1)
    }

    fn len(&self) -> usize {
        2 * self.factors.len()
    }

    fn eval_into(&self, z: &[f64], out: &mut [f64]) {
        let at = Self::complex_coords(z);
        for (i, f) in self.factors.iter().enumerate() {
            let v = at(f[0]) * at(f[1]) * at(f[2]);
            out[2 * i] = v.re;
            out[2 * i + 1] = v.im;
        }
    }

    fn jacobian_into(&self, z: &[f64], out: &mut [f64]) {
        let d = self.dim();
        out.iter_mut().for_each(|v| *v = 0.0);
        let at = Self::complex_coords(z);
        for (i, f) in self.factors.iter().enumerate() {
            let u = [at(f[0]), at(f[1]), at(f[2])];
            let re_row = 2 * i * d;
            let im_row = (2 * i + 1) * d;
            for p in 0..3 {
                // Holomorphic derivative with respect to factor p.
                let der = u[(p + 1) % 3] * u[(p + 2) % 3];
                let (cx, cy) = (2 * f[p], 2 * f[p] + 1);
                out[re_row + cx] += der.re;
                out[re_row + cy] -= der.im;
                out[im_row + cx] += der.im;
                out[im_row + cy] += der.re;
            }
        }
    }

    fn label(&self, i: usize) -> String {
        let mps = AbelianMpVector::zeros(self.n);
        let part = if i % 2 == 0 { "re" } else { "im" };
        format!("{}.{part}", mps.label(i / 2))
    }
}

/// `L : R^m -> R` with derivatives.
pub trait LossFunction: Send + Sync {
    fn len(&self) -> usize;
    fn value(&self, rho: &[f64]) -> f64;
    fn gradient(&self, rho: &[f64]) -> Vec<f64>;
    fn hessian(&self, rho: &[f64]) -> DMatrix<f64>;
    /// Third derivative tensor, flattened `m x m x m`, when available.
    fn third(&self, _rho: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// `L(rho) = sum_i w_i (rho_i - t_i)^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticTargetLoss {
    pub targets: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadraticTargetLoss {
    pub fn new(targets: Vec<f64>) -> Self {
        let weights = vec![1.0; targets.len()];
        Self { targets, weights }
    }
}

impl LossFunction for QuadraticTargetLoss {
    fn len(&self) -> usize {
        self.targets.len()
    }

    fn value(&self, rho: &[f64]) -> f64 {
        rho.iter()
            .zip(&self.targets)
            .zip(&self.weights)
            .map(|((r, t), w)| w * (r - t) * (r - t))
            .sum()
    }

    fn gradient(&self, rho: &[f64]) -> Vec<f64> {
        rho.iter()
            .zip(&self.targets)
            .zip(&self.weights)
            .map(|((r, t), w)| 2.0 * w * (r - t))
            .collect()
    }

    fn hessian(&self, _rho: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            self.len(),
            self.weights.iter().map(|w| 2.0 * w),
        ))
    }

    fn third(&self, _rho: &[f64]) -> Option<Vec<f64>> {
        Some(vec![0.0; self.len().pow(3)])
    }
}

/// The decomposed Abelian-task loss on real MP coordinates.
#[derive(Debug)]
pub struct AbelianLoss {
    family: AbelianFamily,
    hessian: std::sync::OnceLock<DMatrix<f64>>,
}

impl AbelianLoss {
    pub fn new(n: usize) -> Self {
        Self {
            family: AbelianFamily::new(n),
            hessian: std::sync::OnceLock::new(),
        }
    }
}

impl LossFunction for AbelianLoss {
    fn len(&self) -> usize {
        self.family.len()
    }

    fn value(&self, rho: &[f64]) -> f64 {
        decomposed_loss(&self.family.mps(rho))
    }

    fn gradient(&self, rho: &[f64]) -> Vec<f64> {
        decomposed_loss_conj_gradient(&self.family.mps(rho))
            .iter()
            .flat_map(|d| [2.0 * d.re, 2.0 * d.im])
            .collect()
    }

    /// The loss is quadratic, so the gradient is affine and each Hessian
    /// column is `grad(e_i) - grad(0)`.
    fn hessian(&self, _rho: &[f64]) -> DMatrix<f64> {
        self.hessian
            .get_or_init(|| {
                let m = self.len();
                let g0 = self.gradient(&vec![0.0; m]);
                let mut h = DMatrix::zeros(m, m);
                let mut e = vec![0.0; m];
                for i in 0..m {
                    e[i] = 1.0;
                    let g = self.gradient(&e);
                    for r in 0..m {
                        h[(r, i)] = g[r] - g0[r];
                    }
                    e[i] = 0.0;
                }
                // Symmetrize away round-off.
                (&h + h.transpose()) * 0.5
            })
            .clone()
    }

    fn third(&self, _rho: &[f64]) -> Option<Vec<f64>> {
        Some(vec![0.0; self.len().pow(3)])
    }
}

/// A potential family together with the loss over its potentials.
pub struct SeparableLoss {
    family: Box<dyn PotentialFamily>,
    loss: Box<dyn LossFunction>,
}

impl std::fmt::Debug for SeparableLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SeparableLoss")
            .field("dim", &self.dim())
            .field("len", &self.len())
            .finish()
    }
}

impl SeparableLoss {
    pub fn new(family: Box<dyn PotentialFamily>, loss: Box<dyn LossFunction>) -> Result<Self> {
        if family.len() != loss.len() {
            return Err(Error::LengthMismatch {
                what: "loss arity",
                expected: family.len(),
                got: loss.len(),
            });
        }
        if family.is_empty() {
            return Err(Error::InvalidParameter("empty potential family".into()));
        }
        Ok(Self { family, loss })
    }

    /// Quadratic targets over Hermite monomials.
    pub fn quadratic(members: Vec<HermiteIndex>, targets: Vec<f64>) -> Result<Self> {
        let family = HermiteFamily::new(members)?;
        Self::new(Box::new(family), Box::new(QuadraticTargetLoss::new(targets)))
    }

    pub fn abelian(n: usize) -> Self {
        Self::new(Box::new(AbelianFamily::new(n)), Box::new(AbelianLoss::new(n)))
            .expect("matching arity")
    }

    pub fn family(&self) -> &dyn PotentialFamily {
        self.family.as_ref()
    }

    pub fn loss(&self) -> &dyn LossFunction {
        self.loss.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.family.dim()
    }

    pub fn len(&self) -> usize {
        self.family.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, rho: &[f64]) -> f64 {
        self.loss.value(rho)
    }

    pub fn gradient(&self, rho: &[f64]) -> Vec<f64> {
        self.loss.gradient(rho)
    }

    /// Empirical potentials `rho_i = (1/q) sum_j r_i(z_j)`.
    pub fn potentials(&self, particles: &Particles) -> Vec<f64> {
        potentials(self.family.as_ref(), particles)
    }

    pub fn energy(&self, particles: &Particles) -> f64 {
        self.value(&self.potentials(particles))
    }

    /// `sum_i dL/drho_i(rho) grad r_i(z)`.
    pub fn velocity_field(&self, rho: &[f64], z: &[f64]) -> Vec<f64> {
        let g = self.gradient(rho);
        let mut jac = vec![0.0; self.len() * self.dim()];
        let mut out = vec![0.0; self.dim()];
        velocity_with(self.family.as_ref(), &g, z, &mut jac, &mut out);
        out
    }
}

fn velocity_with(
    family: &dyn PotentialFamily,
    loss_grad: &[f64],
    z: &[f64],
    jac: &mut [f64],
    out: &mut [f64],
) {
    let d = family.dim();
    family.jacobian_into(z, jac);
    out.iter_mut().for_each(|v| *v = 0.0);
    for (i, gi) in loss_grad.iter().enumerate() {
        if *gi == 0.0 {
            continue;
        }
        for (o, j) in out.iter_mut().zip(&jac[i * d..(i + 1) * d]) {
            *o += gi * j;
        }
    }
}

/// `q` points in `R^d`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Particles {
    dim: usize,
    data: Vec<f64>,
}

impl Particles {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(Error::InvalidParameter(format!(
                "{} values do not form a non-empty set of {dim}-vectors",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidParameter("ragged particle rows".into()));
        }
        Self::new(dim, rows.concat())
    }

    /// I.i.d. `N(0, I_d)`.
    pub fn gaussian(q: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, rng::streams::PARTICLE_INIT);
        Self::new(dim, rng::normal_vec(&mut r, q * dim))
    }

    /// `q/2` Gaussian points, each followed by its negation (`q` even).
    pub fn gaussian_symmetrized(q: usize, dim: usize, seed: u64) -> Result<Self> {
        if q % 2 != 0 {
            return Err(Error::InvalidParameter("symmetrized sets need an even count".into()));
        }
        let half = Self::gaussian(q / 2, dim, seed)?;
        let mut data = Vec::with_capacity(q * dim);
        for z in half.iter() {
            data.extend_from_slice(z);
            data.extend(z.iter().map(|v| -v));
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for &j in perm {
            data.extend_from_slice(self.get(j));
        }
        Self {
            dim: self.dim,
            data,
        }
    }

    pub fn shifted(&self, by: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|v| v + by).collect(),
        }
    }
}

pub fn potentials(family: &dyn PotentialFamily, particles: &Particles) -> Vec<f64> {
    let m = family.len();
    let mut acc = vec![0.0; m];
    let mut buf = vec![0.0; m];
    for z in particles.iter() {
        family.eval_into(z, &mut buf);
        acc.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
    }
    let inv = 1.0 / particles.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    acc
}

/// Potentials with Monte Carlo standard errors.
pub fn potentials_with_error(family: &dyn PotentialFamily, particles: &Particles) -> Vec<McEstimate> {
    let m = family.len();
    let mut values = vec![Vec::with_capacity(particles.len()); m];
    let mut buf = vec![0.0; m];
    for z in particles.iter() {
        family.eval_into(z, &mut buf);
        for (v, b) in values.iter_mut().zip(&buf) {
            v.push(*b);
        }
    }
    values.iter().map(|v| McEstimate::from_values(v)).collect()
}

/// Empirical matrix with entrywise standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixEstimate {
    pub value: DMatrix<f64>,
    pub std_error: DMatrix<f64>,
}

impl MatrixEstimate {
    /// `(1/q) sum_j a(z_j)_i b(z_j)_k` style estimate from per-particle
    /// outer products produced by `row`.
    fn from_products(m: usize, q: usize, mut each: impl FnMut(usize, &mut DMatrix<f64>)) -> Self {
        let mut sum = DMatrix::zeros(m, m);
        let mut sum_sq = DMatrix::zeros(m, m);
        let mut prod = DMatrix::zeros(m, m);
        for j in 0..q {
            each(j, &mut prod);
            sum += &prod;
            sum_sq += prod.component_mul(&prod);
        }
        let qf = q as f64;
        let value = &sum / qf;
        let std_error = if q > 1 {
            DMatrix::from_fn(m, m, |i, k| {
                let mean = value[(i, k)];
                let var = ((sum_sq[(i, k)] - qf * mean * mean) / (qf - 1.0)).max(0.0);
                (var / qf).sqrt()
            })
        } else {
            DMatrix::zeros(m, m)
        };
        Self { value, std_error }
    }

    pub fn max_off_diagonal(&self) -> (f64, f64) {
        let m = self.value.nrows();
        let mut worst = (0.0, 0.0);
        for i in 0..m {
            for k in 0..m {
                if i != k && self.value[(i, k)].abs() > worst.0 {
                    worst = (self.value[(i, k)].abs(), self.std_error[(i, k)]);
                }
            }
        }
        worst
    }
}

/// `G_ik = (1/q) sum_j grad r_i(z_j) . grad r_k(z_j)`.
pub fn gram_matrix(family: &dyn PotentialFamily, particles: &Particles) -> MatrixEstimate {
    let (m, d) = (family.len(), family.dim());
    let mut jac = vec![0.0; m * d];
    MatrixEstimate::from_products(m, particles.len(), |j, prod| {
        family.jacobian_into(particles.get(j), &mut jac);
        let jm = DMatrix::from_row_slice(m, d, &jac);
        prod.gemm(1.0, &jm, &jm.transpose(), 0.0);
    })
}

/// `K_ik = (1/q) sum_j r_i(z_j) r_k(z_j)`.
pub fn kernel_matrix(family: &dyn PotentialFamily, particles: &Particles) -> MatrixEstimate {
    let m = family.len();
    let mut buf = vec![0.0; m];
    MatrixEstimate::from_products(m, particles.len(), |j, prod| {
        family.eval_into(particles.get(j), &mut buf);
        for i in 0..m {
            for k in 0..m {
                prod[(i, k)] = buf[i] * buf[k];
            }
        }
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Euler,
    Rk4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub q: usize,
    pub d: usize,
    pub dt: f64,
    pub steps: usize,
    pub seed: u64,
    pub integrator: Integrator,
    pub record_every: usize,
    /// Start from `{z, -z}` pairs instead of plain i.i.d. draws.
    pub symmetrize: bool,
    pub record_gram: bool,
    pub record_kernel: bool,
    pub record_snapshots: bool,
    /// Odd-moment degree for the symmetry diagnostic; 0 disables it.
    pub symmetry_degree: u32,
    pub max_abs: f64,
    pub max_step_increase: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            q: 1000,
            d: 3,
            dt: 1e-3,
            steps: 100,
            seed: 0,
            integrator: Integrator::Euler,
            record_every: 1,
            symmetrize: false,
            record_gram: true,
            record_kernel: false,
            record_snapshots: false,
            symmetry_degree: 3,
            max_abs: 1e6,
            max_step_increase: 1e-3,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.q == 0 || self.d == 0 {
            return Err(Error::Config("q and d must be >= 1".into()));
        }
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub t: f64,
    pub step: usize,
    pub rho: Vec<f64>,
    pub h: f64,
    pub gram: Option<MatrixEstimate>,
    pub kernel: Option<MatrixEstimate>,
    pub symmetry: Option<SymmetryReport>,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub frames: Vec<Frame>,
    pub snapshots: Vec<Particles>,
    /// Largest `H(t_{k+1}) - H(t_k)` over all steps (negative when H
    /// decreased at every step).
    pub max_step_increase: f64,
    pub final_particles: Particles,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.t).collect()
    }

    pub fn series(&self, i: usize) -> Vec<f64> {
        self.frames.iter().map(|f| f.rho[i]).collect()
    }
}

/// Initial particles per config: i.i.d. `N(0, I_d)`, optionally symmetrized.
pub fn initial_particles(config: &FlowConfig) -> Result<Particles> {
    if config.symmetrize {
        Particles::gaussian_symmetrized(config.q, config.d, config.seed)
    } else {
        Particles::gaussian(config.q, config.d, config.seed)
    }
}

pub fn integrate(loss: &SeparableLoss, config: &FlowConfig) -> Result<Trajectory> {
    if config.d != loss.dim() {
        return Err(Error::Config(format!(
            "config d = {} but the potential family lives in dimension {}",
            config.d,
            loss.dim()
        )));
    }
    integrate_from(loss, config, initial_particles(config)?)
}

/// Velocity of every particle under the potentials of the current cloud.
fn drift(loss: &SeparableLoss, particles: &Particles, jac: &mut [f64], out: &mut [f64]) -> Vec<f64> {
    let rho = loss.potentials(particles);
    let g = loss.gradient(&rho);
    let d = particles.dim();
    for (j, z) in particles.iter().enumerate() {
        velocity_with(loss.family(), &g, z, jac, &mut out[j * d..(j + 1) * d]);
    }
    rho
}

fn record(loss: &SeparableLoss, config: &FlowConfig, p: &Particles, t: f64, step: usize, rho: Vec<f64>) -> Frame {
    let h = loss.value(&rho);
    Frame {
        t,
        step,
        h,
        rho,
        gram: config.record_gram.then(|| gram_matrix(loss.family(), p)),
        kernel: config.record_kernel.then(|| kernel_matrix(loss.family(), p)),
        symmetry: (config.symmetry_degree > 0).then(|| symmetry_diagnostic(p, config.symmetry_degree)),
    }
}

pub fn integrate_from(loss: &SeparableLoss, config: &FlowConfig, initial: Particles) -> Result<Trajectory> {
    config.validate()?;
    if initial.dim() != loss.dim() {
        return Err(Error::LengthMismatch {
            what: "particle dimension",
            expected: loss.dim(),
            got: initial.dim(),
        });
    }
    let (m, d) = (loss.len(), loss.dim());
    let n_vals = initial.data.len();
    let mut jac = vec![0.0; m * d];
    let mut k1 = vec![0.0; n_vals];
    let mut p = initial;
    let mut frames = Vec::new();
    let mut snapshots = Vec::new();
    let mut max_increase = f64::NEG_INFINITY;

    let mut rho = drift(loss, &p, &mut jac, &mut k1);
    let mut h = loss.value(&rho);
    frames.push(record(loss, config, &p, 0.0, 0, rho.clone()));
    if config.record_snapshots {
        snapshots.push(p.clone());
    }

    let dt = config.dt;
    let (mut k2, mut k3, mut k4) = match config.integrator {
        Integrator::Euler => (Vec::new(), Vec::new(), Vec::new()),
        Integrator::Rk4 => (vec![0.0; n_vals], vec![0.0; n_vals], vec![0.0; n_vals]),
    };
    for step in 1..=config.steps {
        match config.integrator {
            Integrator::Euler => {
                p.data.iter_mut().zip(&k1).for_each(|(z, v)| *z -= dt * v);
            }
            Integrator::Rk4 => {
                let stage = |base: &Particles, k: &[f64], c: f64| Particles {
                    dim: base.dim,
                    data: base.data.iter().zip(k).map(|(z, v)| z - c * v).collect(),
                };
                let p2 = stage(&p, &k1, 0.5 * dt);
                drift(loss, &p2, &mut jac, &mut k2);
                let p3 = stage(&p, &k2, 0.5 * dt);
                drift(loss, &p3, &mut jac, &mut k3);
                let p4 = stage(&p, &k3, dt);
                drift(loss, &p4, &mut jac, &mut k4);
                for (i, z) in p.data.iter_mut().enumerate() {
                    *z -= dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
        let t = step as f64 * dt;
        if !p.data.iter().all(|v| v.is_finite()) || p.max_abs() > config.max_abs {
            return Err(Error::NumericalGuard(format!(
                "particle coordinate exceeded {} at t = {t}",
                config.max_abs
            )));
        }
        rho = drift(loss, &p, &mut jac, &mut k1);
        let h_new = loss.value(&rho);
        let inc = h_new - h;
        max_increase = max_increase.max(inc);
        if inc > config.max_step_increase {
            return Err(Error::NumericalGuard(format!(
                "loss increased by {inc:e} at step {step} (t = {t}); reduce dt"
            )));
        }
        h = h_new;
        if step % config.record_every == 0 || step == config.steps {
            frames.push(record(loss, config, &p, t, step, rho.clone()));
            if config.record_snapshots {
                snapshots.push(p.clone());
            }
        }
    }
    Ok(Trajectory {
        frames,
        snapshots,
        max_step_increase: if config.steps == 0 { 0.0 } else { max_increase },
        final_particles: p,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecouplingRow {
    pub t: f64,
    /// `|drho_i/dt + G_ii dL_i| / (|drho_i/dt| + eps)` per potential.
    pub residuals: Vec<f64>,
    pub max_residual: f64,
    /// `max_{i != j} |G_ij dL_j|`.
    pub cross_term: f64,
    /// Standard error of the entry attaining `cross_term`.
    pub cross_term_std_error: f64,
}

pub const DECOUPLING_EPS: f64 = 1e-12;

/// Compares forward differences of the recorded potentials with the
/// decoupled rate law `drho_i/dt = -G_ii dL/drho_i`.
pub fn decoupling_report(traj: &Trajectory, loss: &SeparableLoss) -> Result<Vec<DecouplingRow>> {
    let mut rows = Vec::new();
    for pair in traj.frames.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let gram = a
            .gram
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("trajectory recorded without Gram matrices".into()))?;
        let dt = b.t - a.t;
        let g = loss.gradient(&a.rho);
        let m = g.len();
        let residuals: Vec<f64> = (0..m)
            .map(|i| {
                let rate = (b.rho[i] - a.rho[i]) / dt;
                (rate + gram.value[(i, i)] * g[i]).abs() / (rate.abs() + DECOUPLING_EPS)
            })
            .collect();
        let mut cross = (0.0, 0.0);
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    let v = (gram.value[(i, j)] * g[j]).abs();
                    if v > cross.0 {
                        cross = (v, (gram.std_error[(i, j)] * g[j]).abs());
                    }
                }
            }
        }
        rows.push(DecouplingRow {
            t: a.t,
            max_residual: residuals.iter().copied().fold(0.0, f64::max),
            residuals,
            cross_term: cross.0,
            cross_term_std_error: cross.1,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetryReport {
    /// Largest `|moment| / std_error` over odd monomials.
    pub worst_z: f64,
    pub worst_exponents: Vec<u32>,
    pub monomials_checked: usize,
}

/// All exponent vectors of odd total degree at most `max_degree`.
fn odd_exponents(dim: usize, max_degree: u32) -> Vec<Vec<u32>> {
    fn rec(dim: usize, pos: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if pos == dim {
            let deg: u32 = cur.iter().sum();
            if deg % 2 == 1 {
                out.push(cur.clone());
            }
            return;
        }
        for e in 0..=left {
            cur.push(e);
            rec(dim, pos + 1, left - e, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(dim, 0, max_degree, &mut Vec::with_capacity(dim), &mut out);
    out
}

/// Worst odd-moment z-score; zero for exactly reflection-symmetric sets.
pub fn symmetry_diagnostic(particles: &Particles, max_degree: u32) -> SymmetryReport {
    let exps = odd_exponents(particles.dim(), max_degree);
    let mut worst = (0.0, Vec::new());
    for e in &exps {
        let vals: Vec<f64> = particles
            .iter()
            .map(|z| z.iter().zip(e).map(|(x, &k)| x.powi(k as i32)).product())
            .collect();
        let est = McEstimate::from_values(&vals);
        let score = if est.mean == 0.0 {
            0.0
        } else if est.std_error == 0.0 {
            f64::INFINITY
        } else {
            est.mean.abs() / est.std_error
        };
        if score > worst.0 || worst.1.is_empty() {
            worst = (score, e.clone());
        }
    }
    SymmetryReport {
        worst_z: worst.0,
        worst_exponents: worst.1,
        monomials_checked: exps.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpFit {
    /// `c` in `rho(t) = 1 - exp(-c t)`; `None` when the fit is degenerate.
    pub rate: Option<f64>,
    pub intercept: f64,
    pub r_squared: f64,
    pub points_used: usize,
    pub points_clipped: usize,
}

/// Least-squares fit of `log(1 - rho) = a - c t`.
pub fn exp_fit(rho: &[f64], times: &[f64]) -> Result<ExpFit> {
    if rho.len() != times.len() {
        return Err(Error::LengthMismatch {
            what: "time series",
            expected: times.len(),
            got: rho.len(),
        });
    }
    if rho.len() < 10 {
        return Err(Error::InvalidParameter(format!(
            "exponential fit needs at least 10 points, got {}",
            rho.len()
        )));
    }
    let pts: Vec<(f64, f64)> = rho
        .iter()
        .zip(times)
        .filter(|(r, _)| **r < 1.0)
        .map(|(r, t)| (*t, (1.0 - r).ln()))
        .collect();
    let clipped = rho.len() - pts.len();
    if clipped > 0 {
        log::warn!("exp_fit: dropped {clipped} values >= 1");
    }
    let n = pts.len() as f64;
    let degenerate = ExpFit {
        rate: None,
        intercept: f64::NAN,
        r_squared: 0.0,
        points_used: pts.len(),
        points_clipped: clipped,
    };
    if pts.len() < 2 {
        return Ok(degenerate);
    }
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sty: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if stt == 0.0 || syy == 0.0 {
        return Ok(ExpFit {
            intercept: my,
            ..degenerate
        });
    }
    let slope = sty / stt;
    let intercept = my - slope * mt;
    let sse: f64 = pts
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    Ok(ExpFit {
        rate: Some(-slope),
        intercept,
        r_squared: 1.0 - sse / syy,
        points_used: pts.len(),
        points_clipped: clipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn z123(d: usize) -> HermiteIndex {
        HermiteIndex::monomial(d, &[0, 1, 2]).unwrap()
    }

    #[test]
    fn stationary_rho_gives_zero_field() {
        let loss = SeparableLoss::quadratic(vec![z123(3)], vec![0.4]).unwrap();
        assert_eq!(loss.velocity_field(&[0.4], &[1.0, 2.0, 3.0]), vec![0.0; 3]);
    }

    #[test]
    fn single_monomial_field_at_origin_rho() {
        let loss = SeparableLoss::quadratic(vec![z123(5)], vec![1.0]).unwrap();
        let z = [0.5, -1.0, 2.0, 7.0, -3.0];
        let v = loss.velocity_field(&[0.0], &z);
        let want = [-2.0 * -2.0, -2.0 * 1.0, -2.0 * -0.5, 0.0, 0.0];
        assert_eq!(v, want);
    }

    #[test]
    fn velocity_is_gradient_of_first_variation() {
        let members = vec![
            z123(4),
            HermiteIndex::new(vec![2, 0, 1, 0]),
            HermiteIndex::new(vec![0, 3, 0, 1]),
        ];
        let loss = SeparableLoss::quadratic(members.clone(), vec![1.0, -0.5, 0.2]).unwrap();
        let rho = [0.3, 0.1, -0.7];
        let g = loss.gradient(&rho);
        let first_variation =
            |z: &[f64]| -> f64 { members.iter().zip(&g).map(|(a, gi)| gi * hermite_eval(a, z)).sum() };
        let z = [0.4, -1.3, 0.8, 1.1];
        let v = loss.velocity_field(&rho, &z);
        for l in 0..4 {
            let h = 1e-5;
            let mut zp = z.to_vec();
            let mut zm = z.to_vec();
            zp[l] += h;
            zm[l] -= h;
            let fd = (first_variation(&zp) - first_variation(&zm)) / (2.0 * h);
            assert!((fd - v[l]).abs() <= 1e-6 * (1.0 + v[l].abs()));
        }
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let loss = SeparableLoss::quadratic(vec![z123(3)], vec![1.0]).unwrap();
        let cfg = FlowConfig {
            q: 50,
            steps: 0,
            ..FlowConfig::default()
        };
        let traj = integrate(&loss, &cfg).unwrap();
        assert_eq!(traj.frames.len(), 1);
        assert_eq!(traj.final_particles, initial_particles(&cfg).unwrap());
        assert_eq!(traj.frames[0].rho, loss.potentials(&traj.final_particles));
    }

    #[test]
    fn gram_at_origin_and_duplicates() {
        let fam = HermiteFamily::new(vec![z123(3), HermiteIndex::monomial(3, &[0, 1]).unwrap()]).unwrap();
        let origin = Particles::new(3, vec![0.0; 3]).unwrap();
        assert_eq!(gram_matrix(&fam, &origin).value, DMatrix::zeros(2, 2));

        let dup = HermiteFamily::new(vec![z123(3), z123(3)]).unwrap();
        let p = Particles::gaussian(100, 3, 1).unwrap();
        let g = gram_matrix(&dup, &p).value;
        assert_eq!(g[(0, 1)], g[(0, 0)]);
        assert_eq!(g[(1, 0)], g[(1, 1)]);
    }

    #[test]
    fn gram_off_diagonal_vanishes_for_gaussian_cloud() {
        let fam = HermiteFamily::new(vec![
            HermiteIndex::monomial(5, &[0, 1, 2]).unwrap(),
            HermiteIndex::monomial(5, &[0, 3, 4]).unwrap(),
        ])
        .unwrap();
        let p = Particles::gaussian(100_000, 5, 3).unwrap();
        let g = gram_matrix(&fam, &p);
        assert!(g.value[(0, 1)].abs() <= 5.0 * g.std_error[(0, 1)]);
        for i in 0..2 {
            assert!((g.value[(i, i)] - 3.0).abs() <= 5.0 * g.std_error[(i, i)]);
        }
    }

    #[test]
    fn permutation_invariance() {
        let loss = SeparableLoss::quadratic(
            vec![z123(4), HermiteIndex::monomial(4, &[1, 2, 3]).unwrap()],
            vec![1.0, 1.0],
        )
        .unwrap();
        let p = Particles::gaussian(64, 4, 9).unwrap();
        let perm: Vec<usize> = (0..64).rev().collect();
        let pp = p.permuted(&perm);
        let (r1, r2) = (loss.potentials(&p), loss.potentials(&pp));
        for (a, b) in r1.iter().zip(&r2) {
            assert!((a - b).abs() <= 1e-14);
        }
        let g1 = gram_matrix(loss.family(), &p).value;
        let g2 = gram_matrix(loss.family(), &pp).value;
        assert!((g1 - g2).abs().max() <= 1e-13);
    }

    #[test]
    fn symmetry_diagnostic_cases() {
        let sym = Particles::gaussian_symmetrized(2000, 3, 4).unwrap();
        let rep = symmetry_diagnostic(&sym, 3);
        assert_eq!(rep.worst_z, 0.0);
        assert_eq!(rep.monomials_checked, 3 + 10);

        let plain = Particles::gaussian(100_000, 3, 5).unwrap();
        assert!(symmetry_diagnostic(&plain, 3).worst_z <= 5.0);

        let shifted = Particles::gaussian(10_000, 3, 6).unwrap().shifted(1.0);
        let rep = symmetry_diagnostic(&shifted, 3);
        assert!(rep.worst_z > 50.0);
    }

    #[test]
    fn exp_fit_cases() {
        let t: Vec<f64> = (0..20).map(|i| 0.05 * i as f64).collect();
        let rho: Vec<f64> = t.iter().map(|t| 1.0 - (-2.0 * t).exp()).collect();
        let fit = exp_fit(&rho, &t).unwrap();
        assert!((fit.rate.unwrap() - 2.0).abs() <= 1e-8);
        assert!((fit.r_squared - 1.0).abs() <= 1e-8);

        let flat = exp_fit(&[0.3; 12], &t[..12]).unwrap();
        assert_eq!(flat.rate, None);
        assert_eq!(flat.r_squared, 0.0);

        assert!(exp_fit(&rho[..5], &t[..5]).is_err());
        let mut over = rho.clone();
        over[19] = 1.2;
        assert_eq!(exp_fit(&over, &t).unwrap().points_clipped, 1);
    }

    #[test]
    fn decoupling_residual_guarded_when_stationary() {
        let loss = SeparableLoss::quadratic(vec![z123(3)], vec![0.0]).unwrap();
        // All particles at the origin: rho = 0 = target, nothing moves.
        let p = Particles::new(3, vec![0.0; 30]).unwrap();
        let cfg = FlowConfig {
            q: 10,
            steps: 3,
            ..FlowConfig::default()
        };
        let traj = integrate_from(&loss, &cfg, p).unwrap();
        let rows = decoupling_report(&traj, &loss).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.max_residual == 0.0));
    }

    #[test]
    fn abelian_velocity_matches_direct_gradient() {
        use crate::abelian_task::AbelianTask;
        for n in [3, 4] {
            let ps = ParticleSystem::random(n, 5, 0.7, 31).unwrap();
            let particles = AbelianFamily::particles_from(&ps);
            let loss = SeparableLoss::abelian(n);
            let rho = loss.potentials(&particles);
            let direct = AbelianTask::mean_over_pairs(n).unwrap().loss_gradient(&ps).unwrap();
            let w = 3 * (n - 1);
            for j in 0..ps.q() {
                let v = loss.velocity_field(&rho, particles.get(j));
                for (i, g) in direct[j * w..(j + 1) * w].iter().enumerate() {
                    let q = ps.q() as f64;
                    assert!((v[2 * i] - q * g.re).abs() <= 1e-10 * (1.0 + v[2 * i].abs()));
                    assert!((v[2 * i + 1] - q * g.im).abs() <= 1e-10 * (1.0 + v[2 * i + 1].abs()));
                }
            }
            let back = AbelianFamily::new(n).to_particle_system(&particles).unwrap();
            assert_eq!(back.coeffs(), ps.coeffs());
        }
    }

    #[test]
    fn abelian_family_jacobian_matches_finite_differences() {
        let fam = AbelianFamily::new(3);
        let mut r = rng::stream(2, 2);
        let z = rng::normal_vec(&mut r, fam.dim());
        let (m, d) = (fam.len(), fam.dim());
        let mut jac = vec![0.0; m * d];
        fam.jacobian_into(&z, &mut jac);
        let mut fp = vec![0.0; m];
        let mut fm = vec![0.0; m];
        for l in 0..d {
            let h = 1e-6;
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[l] += h;
            zm[l] -= h;
            fam.eval_into(&zp, &mut fp);
            fam.eval_into(&zm, &mut fm);
            for i in 0..m {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert!((fd - jac[i * d + l]).abs() <= 1e-7 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn abelian_hessian_is_exact() {
        let loss = AbelianLoss::new(3);
        let m = loss.len();
        let mut r = rng::stream(3, 3);
        let rho = rng::normal_vec(&mut r, m);
        let dir = rng::normal_vec(&mut r, m);
        let a = loss.hessian(&rho);
        // Quadratic: L(rho + dir) - L(rho) - g.dir = dir^T A dir / 2.
        let lhs = loss.value(&rho.iter().zip(&dir).map(|(x, y)| x + y).collect::<Vec<_>>())
            - loss.value(&rho)
            - loss.gradient(&rho).iter().zip(&dir).map(|(g, y)| g * y).sum::<f64>();
        let dv = nalgebra::DVector::from_vec(dir);
        let rhs = 0.5 * dv.dot(&(&a * &dv));
        assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
    }
}
