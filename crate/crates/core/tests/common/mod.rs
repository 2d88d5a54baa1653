// Oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use supac::expfam::{FamilySpec, MomentParams, NaturalParams, Structure};
use supac::quadrature::GaussHermite;
use supac::rng::{rng_from, Rng};

pub fn rng(seed: u64) -> Rng {
    rng_from(seed, &[999])
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

pub fn max_rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

/// Random moments respecting the family's structure, eigenvalues of the
/// covariance within `[0.3, 3]`.
pub fn random_moments(family: &FamilySpec, rng: &mut Rng) -> MomentParams {
    let k = family.predictor_dim();
    let mean = DVector::from_fn(k, |_, _| rng.random_range(-1.5..1.5));
    let mut cov = DMatrix::zeros(k, k);
    let groups: Vec<Vec<usize>> = match family.structure() {
        Structure::Full => vec![(0..k).collect()],
        Structure::Diagonal => (0..k).map(|i| vec![i]).collect(),
        Structure::Block(b) => b.clone(),
    };
    for g in groups {
        let m = g.len();
        let q = DMatrix::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal)).qr().q();
        let d = DMatrix::from_diagonal(&DVector::from_fn(m, |_, _| rng.random_range(0.3..3.0)));
        let block = &q * d * q.transpose();
        for (a, &i) in g.iter().enumerate() {
            for (b, &j) in g.iter().enumerate() {
                cov[(i, j)] = 0.5 * (block[(a, b)] + block[(b, a)]);
            }
        }
    }
    MomentParams::new(mean, cov)
}

pub fn random_theta(family: &FamilySpec, rng: &mut Rng) -> NaturalParams {
    family.natural_from_moments(&random_moments(family, rng)).unwrap()
}

pub fn families() -> Vec<FamilySpec> {
    let mut out = Vec::new();
    for k in 1..=3 {
        out.push(FamilySpec::full(k).unwrap());
        out.push(FamilySpec::diagonal(k).unwrap());
    }
    out.push(FamilySpec::block(3, vec![vec![0, 2], vec![1]]).unwrap());
    out.push(FamilySpec::block(4, vec![vec![0, 1], vec![2, 3]]).unwrap());
    out
}

/// Central difference of `f` along coordinate `i` with Richardson
/// extrapolation.
pub fn partial(f: &dyn Fn(&DVector<f64>) -> f64, x: &DVector<f64>, i: usize, h: f64) -> f64 {
    let central = |h: f64| {
        let (mut a, mut b) = (x.clone(), x.clone());
        a[i] += h;
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    };
    (4.0 * central(h / 2.0) - central(h)) / 3.0
}

pub fn fd_gradient(f: &dyn Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| partial(f, x, i, h))
}

/// Plain central differences with step `h`.
pub fn central_gradient(f: &dyn Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let (mut a, mut b) = (x.clone(), x.clone());
        a[i] += h;
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    })
}

/// `KL(θ1 ‖ θ2)` as the Gauss–Hermite expectation of the log-density ratio
/// under `θ1`.
pub fn kl_by_quadrature(family: &FamilySpec, t1: &NaturalParams, t2: &NaturalParams, nodes: usize) -> f64 {
    let g1 = family.gaussian(t1).unwrap();
    let (a1, a2) = (family.log_partition(t1).unwrap(), family.log_partition(t2).unwrap());
    let diff = t1.coords() - t2.coords();
    GaussHermite::new(nodes).expect(&g1, |x| family.suff_stat(x).unwrap().dot(&diff) - a1 + a2)
}

/// Trapezoid integral of `exp(θ·T − g(θ))` over a box of ±10 standard
/// deviations, for predictor dimension 1 or 2.
pub fn normalization_by_trapezoid(family: &FamilySpec, theta: &NaturalParams, n: usize) -> f64 {
    let m = family.moments_from_natural(theta).unwrap();
    let g = family.log_partition(theta).unwrap();
    let density = |x: &[f64]| (family.suff_stat(x).unwrap().dot(theta.coords()) - g).exp();
    let k = family.predictor_dim();
    let axis = |i: usize| {
        let sd = m.cov[(i, i)].sqrt();
        let (lo, hi) = (m.mean[i] - 10.0 * sd, m.mean[i] + 10.0 * sd);
        let h = (hi - lo) / (n - 1) as f64;
        (0..n)
            .map(|j| {
                let w = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
                (lo + j as f64 * h, w * h)
            })
            .collect::<Vec<_>>()
    };
    match k {
        1 => axis(0).iter().map(|(x, w)| w * density(&[*x])).sum(),
        2 => {
            let (ax, ay) = (axis(0), axis(1));
            let mut total = 0.0;
            for (x, wx) in &ax {
                for (y, wy) in &ay {
                    total += wx * wy * density(&[*x, *y]);
                }
            }
            total
        }
        _ => panic!("trapezoid oracle supports k <= 2"),
    }
}

/// Outcome of one suite of checks: worst observed error against a bound.
#[derive(Debug)]
pub struct Check {
    pub name: &'static str,
    pub worst: f64,
    pub tol: f64,
}

impl Check {
    pub fn ok(&self) -> bool {
        self.worst <= self.tol
    }
}

/// Round trip, ∇g and Fisher consistency, KL properties, normalization.
pub fn expfam_suite() -> Vec<Check> {
    let mut r = rng(1);
    let mut round = 0.0f64;
    let mut grad = 0.0f64;
    let mut fisher = 0.0f64;
    for family in families() {
        for _ in 0..100 {
            let m = random_moments(&family, &mut r);
            let back = family.moments_from_natural(&family.natural_from_moments(&m).unwrap()).unwrap();
            round = round.max((&back.mean - &m.mean).amax() / m.mean.amax().max(1.0));
            round = round.max((&back.cov - &m.cov).amax() / m.cov.amax().max(1.0));
        }
        for _ in 0..20 {
            let theta = random_theta(&family, &mut r);
            let g = |x: &DVector<f64>| family.log_partition(&NaturalParams::new(x.clone())).unwrap();
            let fd = central_gradient(&g, theta.coords(), 1e-5);
            grad = grad.max(max_rel_err(&fd, &family.mean_suff_stat(&theta).unwrap()));
            let info = family.fisher_info(&theta).unwrap();
            for i in 0..family.dim() {
                let col = |x: &DVector<f64>| family.mean_suff_stat(&NaturalParams::new(x.clone())).unwrap();
                let (mut a, mut b) = (theta.coords().clone(), theta.coords().clone());
                a[i] += 1e-5;
                b[i] -= 1e-5;
                let fd_col = (col(&a) - col(&b)) / 2e-5;
                fisher = fisher.max(max_rel_err(&fd_col, &info.column(i).clone_owned()));
            }
        }
    }

    let mut kl_negative = 0.0f64;
    let mut kl_self = 0.0f64;
    for family in families() {
        for _ in 0..1000 / families().len() + 1 {
            let (a, b) = (random_theta(&family, &mut r), random_theta(&family, &mut r));
            kl_negative = kl_negative.max(-family.kl(&a, &b).unwrap());
            kl_self = kl_self.max(family.kl(&a, &a).unwrap().abs());
        }
    }

    let mut kl_quad = 0.0f64;
    let mut norm = 0.0f64;
    for k in 1..=2 {
        let family = FamilySpec::full(k).unwrap();
        for _ in 0..10 {
            let (a, b) = (random_theta(&family, &mut r), random_theta(&family, &mut r));
            kl_quad = kl_quad.max(rel_err(family.kl(&a, &b).unwrap(), kl_by_quadrature(&family, &a, &b, 20)));
            norm = norm.max((normalization_by_trapezoid(&family, &a, 201) - 1.0).abs());
        }
    }

    vec![
        Check {
            name: "round trip",
            worst: round,
            tol: 1e-10,
        },
        Check {
            name: "log-partition gradient vs finite differences",
            worst: grad,
            tol: 1e-5,
        },
        Check {
            name: "Fisher information vs finite differences",
            worst: fisher,
            tol: 1e-4,
        },
        Check {
            name: "KL nonnegativity",
            worst: kl_negative,
            tol: 0.0,
        },
        Check {
            name: "KL of identical parameters",
            worst: kl_self,
            tol: 1e-12,
        },
        Check {
            name: "KL vs quadrature",
            worst: kl_quad,
            tol: 1e-6,
        },
        Check {
            name: "normalization",
            worst: norm,
            tol: 1e-6,
        },
    ]
}
