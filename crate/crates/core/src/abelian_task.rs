//! Two-layer quadratic network on pairs of one-hot group elements, with
//! weights parameterized by Fourier coefficients over nonzero frequencies.
//!
//! Complex coefficients are treated as pairs of reals: gradients are taken
//! with respect to the real and imaginary part of every coefficient and
//! stored as `Complex64 { re: d/dRe, im: d/dIm }`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group_fourier::{FourierBasis, GroupSpec};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    A,
    B,
    C,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::A, Role::B, Role::C];

    pub fn index(self) -> usize {
        match self {
            Role::A => 0,
            Role::B => 1,
            Role::C => 2,
        }
    }
}

/// `q` particles, each a 3 x (n-1) matrix of complex coefficients
/// `z_{p,k,j}` for roles `p in {a, b, c}` and frequencies `k = 1..n-1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSystem {
    n: usize,
    q: usize,
    seed: Option<u64>,
    coeffs: Vec<Complex64>,
}

impl ParticleSystem {
    pub fn zeros(n: usize, q: usize) -> Result<Self> {
        GroupSpec::new(n)?;
        if q == 0 {
            return Err(Error::InvalidParameter("particle count must be >= 1".into()));
        }
        Ok(Self {
            n,
            q,
            seed: None,
            coeffs: vec![Complex64::default(); q * 3 * (n - 1)],
        })
    }

    /// Coefficients in particle-major, then role, then frequency order.
    pub fn from_coeffs(n: usize, q: usize, coeffs: Vec<Complex64>) -> Result<Self> {
        let mut ps = Self::zeros(n, q)?;
        if coeffs.len() != ps.coeffs.len() {
            return Err(Error::LengthMismatch {
                what: "particle coefficients",
                expected: ps.coeffs.len(),
                got: coeffs.len(),
            });
        }
        if coeffs.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::InvalidParameter("non-finite coefficient".into()));
        }
        ps.coeffs = coeffs;
        Ok(ps)
    }

    /// I.i.d. coefficients with real and imaginary parts ~ N(0, std^2).
    pub fn random(n: usize, q: usize, std: f64, seed: u64) -> Result<Self> {
        let mut ps = Self::zeros(n, q)?;
        let mut r = rng::stream(seed, rng::streams::ABELIAN_INIT);
        for c in ps.coeffs.iter_mut() {
            let re = rng::standard_normal(&mut r) * std;
            let im = rng::standard_normal(&mut r) * std;
            *c = Complex64::new(re, im);
        }
        ps.seed = Some(seed);
        Ok(ps)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    #[inline]
    fn offset(&self, j: usize, role: Role, k: usize) -> usize {
        debug_assert!(k >= 1 && k < self.n);
        (j * 3 + role.index()) * (self.n - 1) + (k - 1)
    }

    /// `z_{role,k,j}` for `1 <= k < n`.
    #[inline]
    pub fn z(&self, j: usize, role: Role, k: usize) -> Complex64 {
        self.coeffs[self.offset(j, role, k)]
    }

    pub fn set_z(&mut self, j: usize, role: Role, k: usize, value: Complex64) {
        let o = self.offset(j, role, k);
        self.coeffs[o] = value;
    }

    /// One particle's 3 x (n-1) block, flattened role-major.
    pub fn particle(&self, j: usize) -> &[Complex64] {
        let w = 3 * (self.n - 1);
        &self.coeffs[j * w..(j + 1) * w]
    }

    pub fn particle_mut(&mut self, j: usize) -> &mut [Complex64] {
        let w = 3 * (self.n - 1);
        &mut self.coeffs[j * w..(j + 1) * w]
    }

    pub fn scaled(&self, t: f64) -> Self {
        let mut out = self.clone();
        out.coeffs.iter_mut().for_each(|c| *c *= t);
        out
    }

    /// Reorders particles: particle `j` of the result is particle `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.q);
        let mut out = self.clone();
        for (dst, &src) in perm.iter().enumerate() {
            out.particle_mut(dst).copy_from_slice(self.particle(src));
        }
        out
    }

    /// Imposes `z_{p,n-k} = conj(z_{p,k})`, which makes every synthesized
    /// weight vector (and so the network output) real.
    pub fn enforce_conjugate_symmetry(&mut self) {
        let n = self.n;
        for j in 0..self.q {
            for role in Role::ALL {
                for k in 1..n {
                    let partner = n - k;
                    if partner == k {
                        let z = self.z(j, role, k);
                        self.set_z(j, role, k, Complex64::new(z.re, 0.0));
                    } else if k < partner {
                        let z = self.z(j, role, k);
                        self.set_z(j, role, partner, z.conj());
                    }
                }
            }
        }
    }

    pub fn to_json(&self) -> ParticleSystemJson {
        let w = 3 * (self.n - 1);
        ParticleSystemJson {
            n: self.n,
            q: self.q,
            seed: self.seed,
            coeffs: (0..self.q)
                .map(|j| {
                    self.coeffs[j * w..(j + 1) * w]
                        .iter()
                        .map(|c| [c.re, c.im])
                        .collect()
                })
                .collect(),
        }
    }

    pub fn from_json(doc: &ParticleSystemJson) -> Result<Self> {
        if doc.coeffs.len() != doc.q {
            return Err(Error::LengthMismatch {
                what: "coeffs particle count",
                expected: doc.q,
                got: doc.coeffs.len(),
            });
        }
        let flat: Vec<Complex64> = doc
            .coeffs
            .iter()
            .flat_map(|p| p.iter().map(|[re, im]| Complex64::new(*re, *im)))
            .collect();
        let mut ps = Self::from_coeffs(doc.n, doc.q, flat)?;
        ps.seed = doc.seed;
        Ok(ps)
    }
}

/// On-disk form: `{n, q, seed, coeffs}` where `coeffs[j]` lists particle
/// j's 3(n-1) coefficients as `[re, im]`, role a first, then b, then c,
/// frequencies ascending within each role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleSystemJson {
    pub n: usize,
    pub q: usize,
    pub seed: Option<u64>,
    pub coeffs: Vec<Vec<[f64; 2]>>,
}

/// Every ordered pair of group elements with its one-hot target.
#[derive(Clone, Debug)]
pub struct TaskBatch {
    spec: GroupSpec,
    pairs: Vec<(usize, usize)>,
}

impl TaskBatch {
    pub fn full(spec: GroupSpec) -> Self {
        let n = spec.order();
        let pairs = (0..n).flat_map(|a1| (0..n).map(move |a2| (a1, a2))).collect();
        Self { spec, pairs }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn target_index(&self, pair: (usize, usize)) -> usize {
        self.spec.compose(pair.0, pair.1)
    }

    pub fn target(&self, pair: (usize, usize)) -> Vec<f64> {
        let mut e = vec![0.0; self.spec.order()];
        e[self.target_index(pair)] = 1.0;
        e
    }
}

/// Synthesized weights for every particle: `w_a[j][g]`, `w_b[j][g]` from
/// `F_k`, and `w_c[j][g]` from `conj(F_k)`.
struct Weights {
    wa: Vec<Vec<Complex64>>,
    wb: Vec<Vec<Complex64>>,
    wc: Vec<Vec<Complex64>>,
}

impl Weights {
    fn synthesize(ps: &ParticleSystem, basis: &FourierBasis) -> Self {
        let n = ps.n();
        let mut wa = vec![vec![Complex64::default(); n]; ps.q()];
        let mut wb = wa.clone();
        let mut wc = wa.clone();
        for j in 0..ps.q() {
            for g in 0..n {
                let (mut a, mut b, mut c) = Default::default();
                for k in 1..n {
                    let f = basis.entry(k, g);
                    a += ps.z(j, Role::A, k) * f;
                    b += ps.z(j, Role::B, k) * f;
                    c += ps.z(j, Role::C, k) * f.conj();
                }
                wa[j][g] = a;
                wb[j][g] = b;
                wc[j][g] = c;
            }
        }
        Self { wa, wb, wc }
    }
}

/// The network together with its loss normalization.
#[derive(Clone, Debug)]
pub struct AbelianTask {
    basis: FourierBasis,
    c_norm: f64,
}

impl AbelianTask {
    pub fn new(basis: FourierBasis, c_norm: f64) -> Self {
        Self { basis, c_norm }
    }

    /// Unit-scale basis and mean-over-pairs normalization `1/n^2`.
    pub fn mean_over_pairs(n: usize) -> Result<Self> {
        let spec = GroupSpec::new(n)?;
        Ok(Self::new(FourierBasis::unit(spec), 1.0 / (n * n) as f64))
    }

    pub fn basis(&self) -> &FourierBasis {
        &self.basis
    }

    pub fn c_norm(&self) -> f64 {
        self.c_norm
    }

    pub fn order(&self) -> usize {
        self.basis.order()
    }

    fn check(&self, ps: &ParticleSystem) -> Result<()> {
        if ps.n() != self.order() {
            return Err(Error::InvalidParameter(format!(
                "particle system has n = {}, task has n = {}",
                ps.n(),
                self.order()
            )));
        }
        Ok(())
    }

    pub fn forward_complex(
        &self,
        ps: &ParticleSystem,
        a1: usize,
        a2: usize,
    ) -> Result<Vec<Complex64>> {
        self.check(ps)?;
        let n = self.order();
        for (what, a) in [("a1", a1), ("a2", a2)] {
            if a >= n {
                return Err(Error::IndexOutOfRange {
                    what: if what == "a1" { "first operand" } else { "second operand" },
                    index: a,
                    bound: n,
                });
            }
        }
        let w = Weights::synthesize(ps, &self.basis);
        Ok(output(&w, ps.q(), n, a1, a2).0)
    }

    /// Real part of the network output `o(a1, a2)`.
    pub fn forward(&self, ps: &ParticleSystem, a1: usize, a2: usize) -> Result<Vec<f64>> {
        Ok(self
            .forward_complex(ps, a1, a2)?
            .into_iter()
            .map(|c| c.re)
            .collect())
    }

    /// `c_norm * sum over pairs of |P_perp(o/(2n) - e_{a1+a2})|^2`.
    pub fn direct_loss(&self, ps: &ParticleSystem) -> Result<f64> {
        self.check(ps)?;
        let n = self.order();
        let w = Weights::synthesize(ps, &self.basis);
        let batch = TaskBatch::full(self.basis.spec());
        let mut total = 0.0;
        for &(a1, a2) in batch.pairs() {
            let (o, _) = output(&w, ps.q(), n, a1, a2);
            let r = residual(&o, batch.target_index((a1, a2)));
            total += r.iter().map(|v| v.norm_sqr()).sum::<f64>();
        }
        Ok(self.c_norm * total)
    }

    /// Gradient of [`direct_loss`](Self::direct_loss) with respect to the
    /// real and imaginary part of every coefficient.
    pub fn loss_gradient(&self, ps: &ParticleSystem) -> Result<Vec<Complex64>> {
        self.check(ps)?;
        let n = self.order();
        let q = ps.q();
        let s = self.basis.scale();
        let w = Weights::synthesize(ps, &self.basis);
        let batch = TaskBatch::full(self.basis.spec());
        // Accumulates the holomorphic-derivative contraction G; the real-pair
        // gradient is conj(G).
        let mut acc = vec![Complex64::default(); ps.coeffs().len()];
        let pref = self.c_norm / n as f64 / q as f64 * s;
        for &(a1, a2) in batch.pairs() {
            let (o, x) = output(&w, q, n, a1, a2);
            let r = residual(&o, batch.target_index((a1, a2)));
            // sum_g conj(r_g) conj(chi(k, g)) for each k
            let rc: Vec<Complex64> = (0..n)
                .map(|k| (0..n).map(|g| (r[g] * self.basis.chi(k, g)).conj()).sum())
                .collect();
            for j in 0..q {
                let rj: Complex64 = (0..n).map(|g| r[g].conj() * w.wc[j][g]).sum();
                let xa = pref * 2.0 * x[j] * rj;
                let xc = pref * x[j] * x[j];
                for k in 1..n {
                    acc[ps.offset(j, Role::A, k)] += xa * self.basis.chi(k, a1);
                    acc[ps.offset(j, Role::B, k)] += xa * self.basis.chi(k, a2);
                    acc[ps.offset(j, Role::C, k)] += xc * rc[k];
                }
            }
        }
        Ok(acc.into_iter().map(|g| g.conj()).collect())
    }
}

/// Output vector and the hidden pre-activations `x_j`.
fn output(
    w: &Weights,
    q: usize,
    n: usize,
    a1: usize,
    a2: usize,
) -> (Vec<Complex64>, Vec<Complex64>) {
    let x: Vec<Complex64> = (0..q).map(|j| w.wa[j][a1] + w.wb[j][a2]).collect();
    let inv_q = 1.0 / q as f64;
    let o = (0..n)
        .map(|g| {
            let acc: Complex64 = (0..q).map(|j| w.wc[j][g] * x[j] * x[j]).sum();
            acc * inv_q
        })
        .collect();
    (o, x)
}

/// `P_perp(o/(2n) - e_target)`.
fn residual(o: &[Complex64], target: usize) -> Vec<Complex64> {
    let n = o.len();
    let inv = 1.0 / (2 * n) as f64;
    let mut v: Vec<Complex64> = o.iter().map(|c| c * inv).collect();
    v[target] -= 1.0;
    let mean: Complex64 = v.iter().sum::<Complex64>() / n as f64;
    v.iter_mut().for_each(|c| *c -= mean);
    v
}
