//! Convex quadratic test functions with closed-form minimizers, used to
//! exercise the proximal optimizer and its descent checks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::riemannian_prox::{ManifoldPoint, Objective, Tangent};
use crate::sym_linalg::{eigh, SpdMatrix, SymmetricMatrix, DEFAULT_FLOOR};

/// `g = Σ ½ tr((X − X*) P (X − X*) P) + Σ ½ Σ_i w_i (v − v*)_i²`.
///
/// The gradient `P (X − X*) P` is Lipschitz with constant `λmax(P)²`.
#[derive(Debug, Clone)]
pub struct AnisotropicQuadratic {
    pub targets: Vec<SpdMatrix>,
    pub weights: Vec<DMatrix<f64>>,
    pub vec_targets: Vec<DVector<f64>>,
    pub vec_weights: Vec<DVector<f64>>,
    lipschitz: f64,
}

impl AnisotropicQuadratic {
    /// `weights` must be symmetric positive definite.
    pub fn new(
        targets: Vec<SpdMatrix>,
        weights: Vec<DMatrix<f64>>,
        vec_targets: Vec<DVector<f64>>,
        vec_weights: Vec<DVector<f64>>,
    ) -> Self {
        let mut lipschitz: f64 = 0.0;
        for p in &weights {
            let top = eigh(&SymmetricMatrix::new(p.clone()).expect("finite weight")).expect("finite weight").max();
            lipschitz = lipschitz.max(top * top);
        }
        for w in &vec_weights {
            lipschitz = lipschitz.max(w.max());
        }
        Self {
            targets,
            weights,
            vec_targets,
            vec_weights,
            lipschitz,
        }
    }
}

impl Objective for AnisotropicQuadratic {
    fn g_value(&self, p: &ManifoldPoint) -> Result<f64> {
        let mut total = 0.0;
        for ((x, t), w) in p.spd.iter().zip(&self.targets).zip(&self.weights) {
            let d = x.as_matrix() - t.as_matrix();
            total += 0.5 * (&d * w * &d * w).trace();
        }
        for ((v, t), w) in p.vectors.iter().zip(&self.vec_targets).zip(&self.vec_weights) {
            total += 0.5 * (v - t).component_mul(&(v - t)).dot(w);
        }
        Ok(total)
    }

    fn g_grad(&self, p: &ManifoldPoint) -> Result<Tangent> {
        let spd = p
            .spd
            .iter()
            .zip(&self.targets)
            .zip(&self.weights)
            .map(|((x, t), w)| {
                let g = w * (x.as_matrix() - t.as_matrix()) * w;
                (&g + g.transpose()) * 0.5
            })
            .collect();
        let vectors = p
            .vectors
            .iter()
            .zip(&self.vec_targets)
            .zip(&self.vec_weights)
            .map(|((v, t), w)| (v - t).component_mul(w))
            .collect();
        Ok(Tangent { spd, vectors })
    }

    fn lipschitz(&self) -> Option<f64> {
        Some(self.lipschitz)
    }
}

/// `g = (a/2) Σ ‖X − X*‖²`, `φ = (β/2) Σ ‖X − X_r‖²` on SPD parts only.
/// An empty `anchors` list means `φ ≡ 0`.
#[derive(Debug, Clone)]
pub struct IsotropicQuadratic {
    pub weight: f64,
    pub targets: Vec<SpdMatrix>,
    pub anchors: Vec<SpdMatrix>,
    pub beta: f64,
}

impl IsotropicQuadratic {
    pub fn minimizer(&self) -> Vec<DMatrix<f64>> {
        let denom = self.weight + if self.anchors.is_empty() { 0.0 } else { self.beta };
        self.targets
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut m = t.as_matrix() * self.weight;
                if let Some(r) = self.anchors.get(i) {
                    m += r.as_matrix() * self.beta;
                }
                m / denom
            })
            .collect()
    }
}

fn sq_dist(a: &[SpdMatrix], b: &[SpdMatrix]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_matrix() - y.as_matrix()).norm_squared())
        .sum()
}

impl Objective for IsotropicQuadratic {
    fn g_value(&self, p: &ManifoldPoint) -> Result<f64> {
        Ok(0.5 * self.weight * sq_dist(&p.spd, &self.targets))
    }

    fn g_grad(&self, p: &ManifoldPoint) -> Result<Tangent> {
        let mut t = Tangent::zeros_like(p);
        for ((g, x), y) in t.spd.iter_mut().zip(&p.spd).zip(&self.targets) {
            *g = (x.as_matrix() - y.as_matrix()) * self.weight;
        }
        Ok(t)
    }

    fn phi_value(&self, p: &ManifoldPoint) -> Result<f64> {
        Ok(0.5 * self.beta * sq_dist(&p.spd, &self.anchors))
    }

    fn phi_grad(&self, p: &ManifoldPoint) -> Result<Option<Tangent>> {
        if self.anchors.is_empty() {
            return Ok(None);
        }
        let mut t = Tangent::zeros_like(p);
        for ((g, x), y) in t.spd.iter_mut().zip(&p.spd).zip(&self.anchors) {
            *g = (x.as_matrix() - y.as_matrix()) * self.beta;
        }
        Ok(Some(t))
    }

    fn lipschitz(&self) -> Option<f64> {
        let beta = if self.anchors.is_empty() { 0.0 } else { self.beta };
        Some((self.weight + beta).max(f64::MIN_POSITIVE))
    }
}

/// Difference of convex functions `½‖X − X*‖² − c·tr(X)` on one SPD part.
/// Minimizer `X* + cI` whenever that stays above the floor.
#[derive(Debug, Clone)]
pub struct DcQuadratic {
    pub target: SpdMatrix,
    pub c: f64,
}

impl Objective for DcQuadratic {
    fn g_value(&self, p: &ManifoldPoint) -> Result<f64> {
        Ok(0.5 * (p.spd[0].as_matrix() - self.target.as_matrix()).norm_squared())
    }

    fn g_grad(&self, p: &ManifoldPoint) -> Result<Tangent> {
        let mut t = Tangent::zeros_like(p);
        t.spd[0] = p.spd[0].as_matrix() - self.target.as_matrix();
        Ok(t)
    }

    fn h_value(&self, p: &ManifoldPoint) -> Result<f64> {
        Ok(self.c * p.spd[0].as_matrix().trace())
    }

    fn h_subgrad(&self, p: &ManifoldPoint) -> Result<Option<Tangent>> {
        let mut t = Tangent::zeros_like(p);
        t.spd[0] = DMatrix::identity(p.spd[0].dim(), p.spd[0].dim()) * self.c;
        Ok(Some(t))
    }

    fn lipschitz(&self) -> Option<f64> {
        Some(1.0)
    }
}

/// One seeded instance of the convex quadratic suite.
pub struct SuiteInstance {
    pub name: String,
    pub objective: Box<dyn Objective + Send + Sync>,
    pub start: ManifoldPoint,
    pub minimizer: ManifoldPoint,
    pub f_star: f64,
    pub lipschitz: f64,
}

fn random_spd(rng: &mut impl Rng, n: usize, lo: f64) -> SpdMatrix {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let m = &a * a.transpose() + DMatrix::identity(n, n) * lo;
    SpdMatrix::from_matrix(m, DEFAULT_FLOOR).expect("shifted Gram matrix is SPD")
}

/// `count` instances alternating anisotropic (`φ = 0`, with a vector part)
/// and isotropic-with-proximity quadratics, SPD dimensions cycling 1..=4.
pub fn quadratic_suite(count: usize, seed: u64) -> Vec<SuiteInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let n = 1 + i % 4;
            let start = random_spd(&mut rng, n, 0.2);
            let target = random_spd(&mut rng, n, 0.3);
            if i % 2 == 0 {
                let weight = random_spd(&mut rng, n, 0.5).into_matrix();
                let vt = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
                let vw = DVector::from_fn(2, |_, _| rng.random_range(0.5..2.0));
                let v0 = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
                let obj = AnisotropicQuadratic::new(
                    vec![target.clone()],
                    vec![weight],
                    vec![vt.clone()],
                    vec![vw],
                );
                let lipschitz = obj.lipschitz().expect("known constant");
                SuiteInstance {
                    name: format!("anisotropic-{i}-n{n}"),
                    objective: Box::new(obj),
                    start: ManifoldPoint::new(vec![start], vec![v0]),
                    minimizer: ManifoldPoint::new(vec![target], vec![vt]),
                    f_star: 0.0,
                    lipschitz,
                }
            } else {
                let anchor = random_spd(&mut rng, n, 0.3);
                let obj = IsotropicQuadratic {
                    weight: rng.random_range(0.5..3.0),
                    targets: vec![target],
                    anchors: vec![anchor],
                    beta: rng.random_range(0.1..2.0),
                };
                let min = SpdMatrix::from_matrix(obj.minimizer().remove(0), DEFAULT_FLOOR)
                    .expect("convex combination of SPD matrices");
                let minimizer = ManifoldPoint::new(vec![min], vec![]);
                let f_star = obj.value(&minimizer).expect("finite");
                let lipschitz = obj.lipschitz().expect("known constant");
                SuiteInstance {
                    name: format!("proximal-{i}-n{n}"),
                    objective: Box::new(obj),
                    start: ManifoldPoint::new(vec![start], vec![]),
                    minimizer,
                    f_star,
                    lipschitz,
                }
            }
        })
        .collect()
}
