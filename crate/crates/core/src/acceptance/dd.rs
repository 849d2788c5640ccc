//! Double-double reference evaluation of the direct loss, used as the
//! finite-difference oracle for the analytic gradient.

use num_complex::Complex64;

use crate::abelian_task::{AbelianTask, ParticleSystem, Role};

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Clone, Copy, Debug, Default)]
pub(super) struct Dd {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

impl Dd {
    fn new(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    pub(super) fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub(super) fn diff(a: f64, b: f64) -> Self {
        let (hi, lo) = two_sum(a, -b);
        Self { hi, lo }
    }

    fn add(self, o: Self) -> Self {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Self { hi, lo }
    }

    fn neg(self) -> Self {
        Self { hi: -self.hi, lo: -self.lo }
    }

    pub(super) fn sub(self, o: Self) -> Self {
        self.add(o.neg())
    }

    fn mul(self, o: Self) -> Self {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Self { hi, lo }
    }

    pub(super) fn div(self, o: Self) -> Self {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul(Self::new(q1)));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul(Self::new(q2)));
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Self { hi, lo }.add(Self::new(q3))
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Cdd {
    re: Dd,
    im: Dd,
}

impl Cdd {
    fn from_c(c: Complex64) -> Self {
        Self { re: Dd::new(c.re), im: Dd::new(c.im) }
    }

    fn add(self, o: Self) -> Self {
        Self { re: self.re.add(o.re), im: self.im.add(o.im) }
    }

    fn sub(self, o: Self) -> Self {
        Self { re: self.re.sub(o.re), im: self.im.sub(o.im) }
    }

    fn mul(self, o: Self) -> Self {
        Self {
            re: self.re.mul(o.re).sub(self.im.mul(o.im)),
            im: self.re.mul(o.im).add(self.im.mul(o.re)),
        }
    }

    fn scale_div(self, d: f64) -> Self {
        let d = Dd::new(d);
        Self { re: self.re.div(d), im: self.im.div(d) }
    }

    fn norm_sqr(self) -> Dd {
        self.re.mul(self.re).add(self.im.mul(self.im))
    }
}

/// The direct loss evaluated in double-double arithmetic from the same
/// f64 coefficients and basis entries.
pub(super) fn direct_loss(task: &AbelianTask, ps: &ParticleSystem) -> Dd {
    let n = task.order();
    let q = ps.q();
    let basis = task.basis();
    let spec = basis.spec();
    let synth = |role: Role, j: usize, g: usize, conj: bool| {
        (1..n).fold(Cdd::default(), |acc, k| {
            let f = basis.entry(k, g);
            let f = if conj { f.conj() } else { f };
            acc.add(Cdd::from_c(ps.z(j, role, k)).mul(Cdd::from_c(f)))
        })
    };
    let grid = |role: Role, conj: bool| -> Vec<Vec<Cdd>> {
        (0..q).map(|j| (0..n).map(|g| synth(role, j, g, conj)).collect()).collect()
    };
    let (wa, wb, wc) = (grid(Role::A, false), grid(Role::B, false), grid(Role::C, true));

    let mut total = Dd::default();
    for a1 in 0..n {
        for a2 in 0..n {
            let x: Vec<Cdd> = (0..q).map(|j| wa[j][a1].add(wb[j][a2])).collect();
            let mut v: Vec<Cdd> = (0..n)
                .map(|g| {
                    let o = (0..q).fold(Cdd::default(), |acc, j| acc.add(wc[j][g].mul(x[j]).mul(x[j])));
                    o.scale_div((q * 2 * n) as f64)
                })
                .collect();
            let t = spec.compose(a1, a2);
            v[t].re = v[t].re.sub(Dd::new(1.0));
            let mean = v.iter().fold(Cdd::default(), |acc, c| acc.add(*c)).scale_div(n as f64);
            for c in &v {
                total = total.add(c.sub(mean).norm_sqr());
            }
        }
    }
    total.mul(Dd::new(task.c_norm()))
}
