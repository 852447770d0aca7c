//! Proximal gradient method for `f = g − h + φ` over products of SPD
//! matrices and real vectors.
//!
//! Each iteration takes a Euclidean step along `−α(∇g − u + ∇φ)` and maps SPD
//! parts back with the eigenvalue-floor projection (the Frobenius-nearest
//! admissible matrix). Steps that fail to decrease `f` are rejected and the
//! step size halved, so accepted iterates are strictly decreasing.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sym_linalg::{spd_project, SpdMatrix, SymmetricMatrix};

/// A point on `SPD(n₁) × … × ℝ^{m₁} × …`.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldPoint {
    pub spd: Vec<SpdMatrix>,
    pub vectors: Vec<DVector<f64>>,
}

impl ManifoldPoint {
    pub fn new(spd: Vec<SpdMatrix>, vectors: Vec<DVector<f64>>) -> Self {
        Self { spd, vectors }
    }

    /// Every SPD part still clears its eigenvalue floor.
    pub fn is_valid(&self) -> bool {
        self.spd.iter().all(SpdMatrix::satisfies_floor)
            && self.vectors.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// A tangent vector, shaped like a [`ManifoldPoint`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tangent {
    pub spd: Vec<DMatrix<f64>>,
    pub vectors: Vec<DVector<f64>>,
}

impl Tangent {
    pub fn zeros_like(p: &ManifoldPoint) -> Self {
        Self {
            spd: p.spd.iter().map(|s| DMatrix::zeros(s.dim(), s.dim())).collect(),
            vectors: p.vectors.iter().map(|v| DVector::zeros(v.len())).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Tangent, s: f64) {
        for (a, b) in self.spd.iter_mut().zip(&other.spd) {
            *a += b * s;
        }
        for (a, b) in self.vectors.iter_mut().zip(&other.vectors) {
            *a += b * s;
        }
    }

    pub fn norm(&self) -> f64 {
        let m: f64 = self.spd.iter().map(|x| x.norm_squared()).sum();
        let v: f64 = self.vectors.iter().map(|x| x.norm_squared()).sum();
        (m + v).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.spd.iter().all(|m| m.iter().all(|x| x.is_finite()))
            && self.vectors.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Frobenius distance on SPD parts plus Euclidean distance on vector parts.
pub fn distance(a: &ManifoldPoint, b: &ManifoldPoint) -> f64 {
    let m: f64 = a
        .spd
        .iter()
        .zip(&b.spd)
        .map(|(x, y)| (x.as_matrix() - y.as_matrix()).norm_squared())
        .sum();
    let v: f64 = a
        .vectors
        .iter()
        .zip(&b.vectors)
        .map(|(x, y)| (x - y).norm_squared())
        .sum();
    (m + v).sqrt()
}

/// `f = g − h + φ`. Implementations must be pure: the optimizer evaluates
/// them speculatively while searching for an acceptable step.
pub trait Objective {
    fn g_value(&self, p: &ManifoldPoint) -> Result<f64>;

    fn g_grad(&self, p: &ManifoldPoint) -> Result<Tangent>;

    fn h_value(&self, _p: &ManifoldPoint) -> Result<f64> {
        Ok(0.0)
    }

    /// A subgradient `u ∈ ∂h(p)`; `None` when `h ≡ 0`.
    fn h_subgrad(&self, _p: &ManifoldPoint) -> Result<Option<Tangent>> {
        Ok(None)
    }

    fn phi_value(&self, _p: &ManifoldPoint) -> Result<f64> {
        Ok(0.0)
    }

    fn phi_grad(&self, _p: &ManifoldPoint) -> Result<Option<Tangent>> {
        Ok(None)
    }

    /// Known Lipschitz constant of the gradient field being stepped along.
    fn lipschitz(&self) -> Option<f64> {
        None
    }

    fn value(&self, p: &ManifoldPoint) -> Result<f64> {
        Ok(self.g_value(p)? - self.h_value(p)? + self.phi_value(p)?)
    }

    /// `∇g − u + ∇φ`.
    fn step_direction(&self, p: &ManifoldPoint) -> Result<Tangent> {
        let mut d = self.g_grad(p)?;
        if let Some(u) = self.h_subgrad(p)? {
            d.add_scaled(&u, -1.0);
        }
        if let Some(v) = self.phi_grad(p)? {
            d.add_scaled(&v, 1.0);
        }
        Ok(d)
    }
}

#[derive(Debug, Clone)]
pub struct ProxConfig {
    /// Initial step size; `None` means `1 / L` with `L` from the objective or
    /// estimated by random probes.
    pub alpha: Option<f64>,
    pub max_iters: usize,
    pub step_tol: f64,
    pub max_halvings: usize,
    pub lipschitz_probes: usize,
    pub probe_radius: f64,
    pub seed: u64,
}

impl Default for ProxConfig {
    fn default() -> Self {
        Self {
            alpha: None,
            max_iters: 1000,
            step_tol: 1e-10,
            max_halvings: 20,
            lipschitz_probes: 20,
            probe_radius: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterateRecord {
    pub k: usize,
    /// f(θ_k)
    pub f_value: f64,
    /// f(θ_{k+1})
    pub f_next: f64,
    /// d(θ_k, θ_{k+1})
    pub step_distance: f64,
    pub alpha: f64,
}

/// Accepted iterations of one [`optimize`] run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterateTrace {
    pub records: Vec<IterateRecord>,
    pub rejections: usize,
}

impl IterateTrace {
    pub fn initial_value(&self) -> Option<f64> {
        self.records.first().map(|r| r.f_value)
    }

    pub fn final_value(&self) -> Option<f64> {
        self.records.last().map(|r| r.f_next)
    }

    /// CSV with header `k,f,step_dist,alpha`; `f` is the value at θ_k.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "k,f,step_dist,alpha")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{:.17e},{:.17e},{:.17e}",
                r.k, r.f_value, r.step_distance, r.alpha
            )?;
        }
        Ok(())
    }
}

fn apply_step(p: &ManifoldPoint, dir: &Tangent, alpha: f64) -> Result<ManifoldPoint> {
    let spd = p
        .spd
        .iter()
        .zip(&dir.spd)
        .map(|(s, g)| {
            let moved = SymmetricMatrix::new(s.as_matrix() - g * alpha)?;
            spd_project(&moved, s.floor())
        })
        .collect::<Result<Vec<_>>>()?;
    let vectors = p
        .vectors
        .iter()
        .zip(&dir.vectors)
        .map(|(v, g)| v - g * alpha)
        .collect();
    Ok(ManifoldPoint { spd, vectors })
}

fn checked_direction(obj: &dyn Objective, p: &ManifoldPoint) -> Result<Tangent> {
    let dir = obj.step_direction(p)?;
    if !dir.is_finite() {
        return Err(Error::DivergedGradient(
            "step direction has non-finite entries".into(),
        ));
    }
    Ok(dir)
}

/// One projected step: Euclidean move along `−α(∇g − u + ∇φ)`, then
/// eigenvalue-floor projection of each SPD part.
pub fn prox_step(p: &ManifoldPoint, obj: &dyn Objective, alpha: f64) -> Result<ManifoldPoint> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidInput(format!("step size must be positive, got {alpha}")));
    }
    let dir = checked_direction(obj, p)?;
    apply_step(p, &dir, alpha)
}

fn perturb(p: &ManifoldPoint, radius: f64, rng: &mut impl Rng) -> Result<ManifoldPoint> {
    let spd = p
        .spd
        .iter()
        .map(|s| {
            let n = s.dim();
            let e: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let e = (&e + e.transpose()) * 0.5;
            let scale = radius * s.as_matrix().norm().max(1.0) / e.norm().max(f64::MIN_POSITIVE);
            spd_project(&SymmetricMatrix::new(s.as_matrix() + e * scale)?, s.floor())
        })
        .collect::<Result<Vec<_>>>()?;
    let vectors = p
        .vectors
        .iter()
        .map(|v| {
            let e: DVector<f64> = DVector::from_fn(v.len(), |_, _| rng.random_range(-1.0..1.0));
            v + e * (radius * v.norm().max(1.0) / (v.len().max(1) as f64).sqrt())
        })
        .collect();
    Ok(ManifoldPoint { spd, vectors })
}

/// `max ‖∇g(x) − ∇g(y)‖ / d(x, y)` over random pairs near `p`.
pub fn estimate_lipschitz(
    obj: &dyn Objective,
    p: &ManifoldPoint,
    probes: usize,
    radius: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut best: f64 = 0.0;
    for _ in 0..probes {
        let x = perturb(p, radius, rng)?;
        let y = perturb(p, radius, rng)?;
        let d = distance(&x, &y);
        if d <= 0.0 {
            continue;
        }
        let mut diff = obj.g_grad(&x)?;
        diff.add_scaled(&obj.g_grad(&y)?, -1.0);
        let ratio = diff.norm() / d;
        if ratio.is_finite() {
            best = best.max(ratio);
        }
    }
    Ok(if best > 0.0 { best } else { 1.0 })
}

/// Runs the proximal method from `p0`. Stops after `max_iters` accepted
/// steps or once a candidate step is shorter than `step_tol`; fails with
/// [`Error::Stalled`] after `max_halvings` consecutive rejections.
pub fn optimize(
    p0: ManifoldPoint,
    obj: &dyn Objective,
    cfg: &ProxConfig,
) -> Result<(ManifoldPoint, IterateTrace)> {
    let mut alpha = match cfg.alpha {
        Some(a) => a,
        None => {
            let l = match obj.lipschitz() {
                Some(l) => l,
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    estimate_lipschitz(obj, &p0, cfg.lipschitz_probes, cfg.probe_radius, &mut rng)?
                }
            };
            1.0 / l
        }
    };
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidInput(format!("step size must be positive, got {alpha}")));
    }

    let mut trace = IterateTrace::default();
    let mut p = p0;
    let mut f = obj.value(&p)?;
    for k in 0..cfg.max_iters {
        let dir = checked_direction(obj, &p)?;
        let mut halvings = 0;
        loop {
            let cand = apply_step(&p, &dir, alpha)?;
            let d = distance(&p, &cand);
            if d < cfg.step_tol {
                trace.records.push(IterateRecord {
                    k,
                    f_value: f,
                    f_next: f,
                    step_distance: 0.0,
                    alpha,
                });
                return Ok((p, trace));
            }
            let f_new = obj.value(&cand)?;
            if f_new < f {
                trace.records.push(IterateRecord {
                    k,
                    f_value: f,
                    f_next: f_new,
                    step_distance: d,
                    alpha,
                });
                p = cand;
                f = f_new;
                break;
            }
            trace.rejections += 1;
            halvings += 1;
            if halvings >= cfg.max_halvings {
                return Err(Error::Stalled {
                    halvings,
                    trace: Box::new(trace),
                });
            }
            alpha *= 0.5;
        }
    }
    Ok((p, trace))
}

/// Sufficient decrease `f(θ_k) − f(θ_{k+1}) ≥ d²/(2α_k)` on every record,
/// with absolute slack `1e-9`.
pub fn check_descent(trace: &IterateTrace) -> bool {
    trace.records.iter().all(|r| {
        r.f_value - r.f_next >= r.step_distance * r.step_distance / (2.0 * r.alpha) - 1e-9
    })
}

/// Step-sum bound `Σ d² ≤ 2 (f(θ₀) − f*) / L`, with relative slack `1e-9`.
pub fn check_step_bound(trace: &IterateTrace, f_star: f64, lipschitz: f64) -> bool {
    let Some(f0) = trace.initial_value() else {
        return true;
    };
    let total: f64 = trace.records.iter().map(|r| r.step_distance.powi(2)).sum();
    total <= 2.0 * (f0 - f_star) / lipschitz * (1.0 + 1e-9)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prox_suite::{quadratic_suite, DcQuadratic, IsotropicQuadratic};
    use crate::sym_linalg::DEFAULT_FLOOR;

    fn spd(d: &[f64]) -> SpdMatrix {
        SpdMatrix::from_diagonal(d).unwrap()
    }

    struct Zero;
    impl Objective for Zero {
        fn g_value(&self, _: &ManifoldPoint) -> Result<f64> {
            Ok(0.0)
        }
        fn g_grad(&self, p: &ManifoldPoint) -> Result<Tangent> {
            Ok(Tangent::zeros_like(p))
        }
    }

    struct NanGrad;
    impl Objective for NanGrad {
        fn g_value(&self, _: &ManifoldPoint) -> Result<f64> {
            Ok(0.0)
        }
        fn g_grad(&self, p: &ManifoldPoint) -> Result<Tangent> {
            let mut t = Tangent::zeros_like(p);
            t.spd[0][(0, 0)] = f64::NAN;
            Ok(t)
        }
    }

    /// g = ‖θ − target‖²/2 on 1×1 or larger SPD.
    fn quad(target: SpdMatrix) -> IsotropicQuadratic {
        IsotropicQuadratic {
            weight: 1.0,
            targets: vec![target],
            anchors: vec![],
            beta: 0.0,
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let p = ManifoldPoint::new(vec![spd(&[2.0, 3.0])], vec![DVector::from_vec(vec![1.0])]);
        assert_eq!(prox_step(&p, &Zero, 0.5).unwrap(), p);
    }

    #[test]
    fn unit_step_on_quadratic_lands_on_target() {
        let p = ManifoldPoint::new(vec![spd(&[5.0])], vec![]);
        let next = prox_step(&p, &quad(spd(&[0.7])), 1.0).unwrap();
        assert!((next.spd[0].as_matrix()[(0, 0)] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn negative_eigenvalue_is_clipped_to_floor() {
        let p = ManifoldPoint::new(vec![spd(&[1.0, 1.0])], vec![]);
        // target below zero in one direction: one unit step lands at diag(1, -2)
        let target = SpdMatrix::from_matrix(
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-3])),
            DEFAULT_FLOOR,
        )
        .unwrap();
        let obj = quad(target);
        let next = prox_step(&p, &obj, 1000.0).unwrap();
        let eig = crate::sym_linalg::eigh(&next.spd[0].to_symmetric()).unwrap();
        assert!((eig.min() - DEFAULT_FLOOR).abs() < 1e-15);
        assert!(next.is_valid());
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let p = ManifoldPoint::new(vec![spd(&[1.0])], vec![]);
        assert!(matches!(
            prox_step(&p, &NanGrad, 0.1),
            Err(Error::DivergedGradient(_))
        ));
    }

    #[test]
    fn converges_to_known_minimizer() {
        let target = SpdMatrix::from_matrix(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            DEFAULT_FLOOR,
        )
        .unwrap();
        let obj = crate::prox_suite::AnisotropicQuadratic::new(
            vec![target.clone()],
            vec![DMatrix::from_row_slice(2, 2, &[1.2, 0.1, 0.1, 0.7])],
            vec![],
            vec![],
        );
        let p0 = ManifoldPoint::new(vec![spd(&[0.3, 4.0])], vec![]);
        let cfg = ProxConfig {
            max_iters: 500,
            step_tol: 1e-14,
            ..ProxConfig::default()
        };
        let (p, trace) = optimize(p0, &obj, &cfg).unwrap();
        assert!(trace.records.len() <= 500);
        assert!((p.spd[0].as_matrix() - target.as_matrix()).norm() < 1e-6);
        assert!(check_descent(&trace));
    }

    #[test]
    fn starting_at_the_minimum_stops_immediately() {
        let target = spd(&[1.5, 0.5]);
        let p0 = ManifoldPoint::new(vec![target.clone()], vec![]);
        let (p, trace) = optimize(p0.clone(), &quad(target), &ProxConfig::default()).unwrap();
        assert_eq!(p, p0);
        assert_eq!(trace.records.len(), 1);
        assert_eq!(trace.records[0].step_distance, 0.0);
    }

    #[test]
    fn dc_objective_decreases_monotonically() {
        let obj = DcQuadratic {
            target: spd(&[1.0, 2.0, 0.5]),
            c: 0.3,
        };
        let p0 = ManifoldPoint::new(vec![spd(&[4.0, 0.1, 3.0])], vec![]);
        let (p, trace) = optimize(p0, &obj, &ProxConfig::default()).unwrap();
        for r in &trace.records {
            assert!(r.f_next <= r.f_value);
        }
        for w in trace.records.windows(2) {
            assert!(w[1].f_value < w[0].f_value);
        }
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![1.3, 2.3, 0.8]));
        assert!((p.spd[0].as_matrix() - expected).norm() < 1e-6);
    }

    #[test]
    fn proximity_alone_pins_the_anchor() {
        let anchor = SpdMatrix::from_matrix(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.6]),
            DEFAULT_FLOOR,
        )
        .unwrap();
        let obj = IsotropicQuadratic {
            weight: 0.0,
            targets: vec![anchor.clone()],
            anchors: vec![anchor.clone()],
            beta: 2.0,
        };
        let (p, _) = optimize(
            ManifoldPoint::new(vec![anchor.clone()], vec![]),
            &obj,
            &ProxConfig::default(),
        )
        .unwrap();
        assert_eq!(p.spd[0], anchor);
        let (p, _) = optimize(
            ManifoldPoint::new(vec![spd(&[3.0, 0.2])], vec![]),
            &obj,
            &ProxConfig::default(),
        )
        .unwrap();
        assert!((p.spd[0].as_matrix() - anchor.as_matrix()).norm() < 1e-8);
    }

    #[test]
    fn descent_checks_on_hand_built_traces() {
        let single = IterateTrace {
            records: vec![IterateRecord {
                k: 0,
                f_value: 1.0,
                f_next: 1.0,
                step_distance: 0.0,
                alpha: 1.0,
            }],
            rejections: 0,
        };
        assert!(check_descent(&single));
        assert!(check_step_bound(&single, 0.0, 1.0));
        assert!(check_descent(&IterateTrace::default()));

        // decrease 0.1 but d²/(2α) = 0.5
        let bad = IterateTrace {
            records: vec![IterateRecord {
                k: 0,
                f_value: 1.0,
                f_next: 0.9,
                step_distance: 1.0,
                alpha: 1.0,
            }],
            rejections: 0,
        };
        assert!(!check_descent(&bad));
        // Σd² = 1 > 2 (1 − 0.9) / 1
        assert!(!check_step_bound(&bad, 0.9, 1.0));
    }

    #[test]
    fn suite_passes_both_checks() {
        for inst in quadratic_suite(10, 7) {
            let (_, trace) = optimize(inst.start.clone(), inst.objective.as_ref(), &ProxConfig::default())
                .unwrap();
            assert!(check_descent(&trace), "{}", inst.name);
            assert!(check_step_bound(&trace, inst.f_star, inst.lipschitz), "{}", inst.name);
        }
    }

    #[test]
    fn stalls_when_no_step_decreases() {
        // Gradient points uphill: g = x but reported gradient is −1.
        struct Liar;
        impl Objective for Liar {
            fn g_value(&self, p: &ManifoldPoint) -> Result<f64> {
                Ok(p.vectors[0][0])
            }
            fn g_grad(&self, p: &ManifoldPoint) -> Result<Tangent> {
                let mut t = Tangent::zeros_like(p);
                t.vectors[0][0] = -1.0;
                Ok(t)
            }
            fn lipschitz(&self) -> Option<f64> {
                Some(1.0)
            }
        }
        let p0 = ManifoldPoint::new(vec![], vec![DVector::from_vec(vec![0.0])]);
        let cfg = ProxConfig {
            step_tol: 1e-300,
            ..ProxConfig::default()
        };
        match optimize(p0, &Liar, &cfg) {
            Err(Error::Stalled { halvings, trace }) => {
                assert_eq!(halvings, 20);
                assert_eq!(trace.rejections, 20);
            }
            other => panic!("expected stall, got {other:?}"),
        }
    }

    #[test]
    fn lipschitz_estimate_recovers_quadratic_curvature() {
        let obj = IsotropicQuadratic {
            weight: 3.0,
            targets: vec![spd(&[1.0, 1.0])],
            anchors: vec![],
            beta: 0.0,
        };
        let p = ManifoldPoint::new(vec![spd(&[2.0, 2.0])], vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = estimate_lipschitz(&obj, &p, 20, 0.05, &mut rng).unwrap();
        assert!((l - 3.0).abs() < 1e-8);
    }

    #[test]
    fn trace_csv_has_header() {
        let mut buf = Vec::new();
        let (_, trace) = optimize(
            ManifoldPoint::new(vec![spd(&[2.0])], vec![]),
            &quad(spd(&[1.0])),
            &ProxConfig::default(),
        )
        .unwrap();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("k,f,step_dist,alpha\n"));
        assert_eq!(text.lines().count(), trace.records.len() + 1);
    }
}
