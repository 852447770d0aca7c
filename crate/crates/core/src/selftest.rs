//! Built-in numerical checks: optimizer descent and step-sum bound on the
//! convex quadratic suite, analytic gradients against central differences,
//! the transport solver against vertex enumeration, the total-variation bound
//! against quadrature, and the Gaussian W2 closed form.
//!
//! Each check returns a [`CheckRow`]; on failure `detail` names the failing
//! case and the seed that regenerates it.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gmm_model::{DecodedGaussian, GmmTangent};
use crate::oracle::{
    brute_force_transport, finite_difference_gmm, finite_difference_sym, perturb_gmm, random_batch,
    random_gmm, relative_error, tv_quadrature_1d,
};
use crate::ot_distance::{gmm_tv_bound, gmm_w2, w2_cost_matrix, w2_gaussian_sq, w2_grad_wrt_first};
use crate::prox_suite::quadratic_suite;
use crate::riemannian_prox::{check_descent, check_step_bound, optimize, ProxConfig};
use crate::surrogate::{phi_grad, phi_value, surrogate_grad, surrogate_value, ProximityKind};
use crate::sym_linalg::SpdMatrix;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const W2_PHI_GRAD_TOL: f64 = 1e-3;
pub const TRANSPORT_TOL: f64 = 1e-8;
pub const TV_SLACK: f64 = 1e-3;
const TV_POINTS: usize = 20_000;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckRow {
    fn new(name: &str, failure: Option<String>, ok_detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed: failure.is_none(),
            detail: failure.unwrap_or(ok_detail),
        }
    }
}

impl fmt::Display for CheckRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {:<28} {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SelftestOptions {
    pub instances: usize,
    pub seed: u64,
    /// Test hook: perturbs the analytic surrogate gradient before comparison.
    pub corrupt_gradient: bool,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            instances: 50,
            seed: 0,
            corrupt_gradient: false,
        }
    }
}

/// False for NaN as well as for values at or above `tol`.
fn below(x: f64, tol: f64) -> bool {
    x.partial_cmp(&tol) == Some(std::cmp::Ordering::Less)
}

fn instance_seed(seed: u64, i: usize) -> u64 {
    crate::trainer::mix_seed(seed, i as u64, 0x5e1f)
}

fn shape(rng: &mut impl Rng) -> (usize, usize, usize) {
    (rng.random_range(0..=3), rng.random_range(1..=2), rng.random_range(1..=3))
}

/// `check_descent` on every instance of the quadratic suite.
pub fn descent_check(count: usize, seed: u64) -> Result<CheckRow> {
    let mut failure = None;
    let mut steps = 0;
    for inst in quadratic_suite(count, seed) {
        let (_, trace) = optimize(inst.start.clone(), inst.objective.as_ref(), &ProxConfig::default())?;
        steps += trace.records.len();
        if failure.is_none() && !check_descent(&trace) {
            failure = Some(format!("instance {} (suite seed {seed}) violates the descent inequality", inst.name));
        }
    }
    Ok(CheckRow::new(
        "prox-descent",
        failure,
        format!("{count} instances, {steps} steps"),
    ))
}

/// `check_step_bound` against the known optimum of every suite instance.
pub fn step_bound_check(count: usize, seed: u64) -> Result<CheckRow> {
    let mut failure = None;
    let mut worst: f64 = 0.0;
    for inst in quadratic_suite(count, seed) {
        let (_, trace) = optimize(inst.start.clone(), inst.objective.as_ref(), &ProxConfig::default())?;
        let f0 = trace.initial_value().unwrap_or(inst.f_star);
        let sum: f64 = trace.records.iter().map(|r| r.step_distance.powi(2)).sum();
        let bound = 2.0 * (f0 - inst.f_star) / inst.lipschitz;
        if bound > 0.0 {
            worst = worst.max(sum / bound);
        }
        if failure.is_none() && !check_step_bound(&trace, inst.f_star, inst.lipschitz) {
            failure = Some(format!(
                "instance {} (suite seed {seed}): step sum {sum:.3e} exceeds bound {bound:.3e}",
                inst.name
            ));
        }
    }
    Ok(CheckRow::new(
        "prox-step-bound",
        failure,
        format!("{count} instances, max sum/bound {worst:.3}"),
    ))
}

fn corrupt(grad: &mut GmmTangent) {
    let bump = 0.05 * grad.norm().max(1.0);
    grad.components[0][(0, 0)] += bump;
}

/// Surrogate gradient against central differences on random mixtures.
pub fn surrogate_gradient_check(opts: &SelftestOptions) -> Result<CheckRow> {
    let mut worst: f64 = 0.0;
    let mut failure = None;
    for i in 0..opts.instances {
        let s = instance_seed(opts.seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (ds, da, k) = shape(&mut rng);
        let old = random_gmm(&mut rng, ds, da, k);
        let new = perturb_gmm(&old, 0.05, &mut rng);
        let batch = random_batch(&old, 30, true, &mut rng);
        let mut analytic = surrogate_grad(&new, &batch)?;
        if opts.corrupt_gradient {
            corrupt(&mut analytic);
        }
        let numeric = finite_difference_gmm(&new, FD_STEP, |h| {
            surrogate_value(h, &batch).unwrap_or(f64::NAN)
        });
        let err = relative_error(&analytic, &numeric);
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
        if failure.is_none() && !below(err, GRAD_TOL) {
            failure = Some(format!(
                "instance {i} (seed {s}, ds={ds}, da={da}, k={k}): relative error {err:.3e}"
            ));
        }
    }
    Ok(CheckRow::new(
        "surrogate-gradient",
        failure,
        format!("{} instances, max rel err {worst:.2e}", opts.instances),
    ))
}

/// Proximity-term gradient against central differences.
pub fn phi_gradient_check(kind: ProximityKind, instances: usize, seed: u64) -> Result<CheckRow> {
    let tol = match kind {
        ProximityKind::Euclidean => GRAD_TOL,
        ProximityKind::Wasserstein => W2_PHI_GRAD_TOL,
    };
    let mut worst: f64 = 0.0;
    let mut failure = None;
    for i in 0..instances {
        let s = instance_seed(seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (ds, da, k) = shape(&mut rng);
        let beta = rng.random_range(0.5..3.0);
        let old = random_gmm(&mut rng, ds, da, k);
        let new = perturb_gmm(&old, 0.2, &mut rng);
        let analytic = phi_grad(&new, &old, beta, kind)?;
        let numeric = finite_difference_gmm(&new, FD_STEP, |h| {
            phi_value(h, &old, beta, kind).unwrap_or(f64::NAN)
        });
        let err = relative_error(&analytic, &numeric);
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
        if failure.is_none() && !below(err, tol) {
            failure = Some(format!(
                "instance {i} (seed {s}, ds={ds}, da={da}, k={k}, beta={beta:.3}): relative error {err:.3e}"
            ));
        }
    }
    Ok(CheckRow::new(
        &format!("phi-gradient-{}", kind.name()),
        failure,
        format!("{instances} instances, max rel err {worst:.2e}"),
    ))
}

fn random_cov(rng: &mut impl Rng, d: usize) -> SpdMatrix {
    random_gmm(rng, 0, d, 1).decoded().remove(0).covariance
}

/// Gradient of the Gaussian W2² in the first covariance.
pub fn w2_gradient_check(instances: usize, seed: u64) -> Result<CheckRow> {
    let mut worst: f64 = 0.0;
    let mut failure = None;
    for i in 0..instances {
        let s = instance_seed(seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let d = rng.random_range(1..=5);
        let s0 = random_cov(&mut rng, d);
        let s1 = random_cov(&mut rng, d);
        let analytic = w2_grad_wrt_first(&s0, &s1)?.into_matrix();
        let zero = DVector::zeros(d);
        let target = DecodedGaussian::new(zero.clone(), s1)?;
        let numeric = finite_difference_sym(s0.as_matrix(), FD_STEP, |m| {
            SpdMatrix::from_matrix(m.clone(), 1e-12)
                .and_then(|c| DecodedGaussian::new(zero.clone(), c))
                .and_then(|g| w2_gaussian_sq(&g, &target))
                .unwrap_or(f64::NAN)
        });
        let err = (&numeric - &analytic).norm() / analytic.norm().max(numeric.norm()).max(1e-10);
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
        if failure.is_none() && !below(err, GRAD_TOL) {
            failure = Some(format!("instance {i} (seed {s}, d={d}): relative error {err:.3e}"));
        }
    }
    Ok(CheckRow::new(
        "w2-gradient",
        failure,
        format!("{instances} instances, max rel err {worst:.2e}"),
    ))
}

/// `W2²(N(0, I), N(0, 4I)) = d` for `d = 1..=10`, plus symmetry on random pairs.
pub fn w2_closed_form_check(pairs: usize, seed: u64) -> Result<CheckRow> {
    let mut failure = None;
    for d in 1..=10 {
        let zero = DVector::zeros(d);
        let a = DecodedGaussian::new(zero.clone(), SpdMatrix::identity(d))?;
        let b = DecodedGaussian::new(zero, SpdMatrix::from_matrix(DMatrix::identity(d, d) * 4.0, 1e-8)?)?;
        let v = w2_gaussian_sq(&a, &b)?;
        if failure.is_none() && !below((v - d as f64).abs(), 1e-8) {
            failure = Some(format!("d={d}: W2² = {v:.12}, expected {d}"));
        }
    }
    let mut worst: f64 = 0.0;
    for i in 0..pairs {
        let s = instance_seed(seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let d = rng.random_range(1..=5);
        let x = random_gmm(&mut rng, 0, d, 1).decoded().remove(0);
        let y = random_gmm(&mut rng, 0, d, 1).decoded().remove(0);
        let gap = (w2_gaussian_sq(&x, &y)? - w2_gaussian_sq(&y, &x)?).abs();
        worst = worst.max(gap);
        if failure.is_none() && !below(gap, 1e-9) {
            failure = Some(format!("pair {i} (seed {s}, d={d}): asymmetry {gap:.3e}"));
        }
    }
    Ok(CheckRow::new(
        "w2-closed-form",
        failure,
        format!("d=1..10 exact, {pairs} pairs, max asymmetry {worst:.1e}"),
    ))
}

/// Mixture W2² objective against exhaustive vertex enumeration.
pub fn transport_check(instances: usize, seed: u64) -> Result<CheckRow> {
    let mut worst: f64 = 0.0;
    let mut failure = None;
    for i in 0..instances {
        let s = instance_seed(seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (ds, da) = (rng.random_range(0..=2), rng.random_range(1..=2));
        let (k1, k2) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let a = random_gmm(&mut rng, ds, da, k1);
        let b = random_gmm(&mut rng, ds, da, k2);
        let solver = gmm_w2(&a, &b)?.objective;
        let cost = w2_cost_matrix(&a, &b)?;
        let brute = brute_force_transport(&a.weights(), &b.weights(), cost.as_matrix());
        let gap = (solver - brute).abs();
        worst = worst.max(if gap.is_nan() { f64::INFINITY } else { gap });
        if failure.is_none() && !below(gap, TRANSPORT_TOL) {
            failure = Some(format!(
                "instance {i} (seed {s}, k={k1}x{k2}): solver {solver:.12} vs enumeration {brute:.12}"
            ));
        }
    }
    Ok(CheckRow::new(
        "transport-exact",
        failure,
        format!("{instances} instances, max gap {worst:.1e}"),
    ))
}

/// Quadrature total variation never exceeds the componentwise bound.
pub fn tv_bound_check(instances: usize, seed: u64) -> Result<CheckRow> {
    let mut failure = None;
    let mut tightest = f64::INFINITY;
    for i in 0..instances {
        let s = instance_seed(seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (k1, k2) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let p = random_gmm(&mut rng, 0, 1, k1);
        let q = if rng.random_bool(0.3) {
            perturb_gmm(&p, 0.05, &mut rng)
        } else {
            random_gmm(&mut rng, 0, 1, k2)
        };
        let tv = tv_quadrature_1d(&p, &q, TV_POINTS);
        let bound = gmm_tv_bound(&p, &q)?;
        tightest = tightest.min(bound - tv);
        if failure.is_none() && !below(tv, bound + TV_SLACK) {
            failure = Some(format!("instance {i} (seed {s}): quadrature TV {tv:.6} > bound {bound:.6}"));
        }
    }
    Ok(CheckRow::new(
        "tv-bound",
        failure,
        format!("{instances} pairs, min margin {tightest:.3e}"),
    ))
}

/// Every check, in table order.
pub fn run(opts: &SelftestOptions) -> Result<Vec<CheckRow>> {
    let n = opts.instances;
    let s = opts.seed;
    Ok(vec![
        descent_check(10, s)?,
        step_bound_check(10, s)?,
        surrogate_gradient_check(opts)?,
        phi_gradient_check(ProximityKind::Euclidean, n, s)?,
        phi_gradient_check(ProximityKind::Wasserstein, n, s)?,
        w2_gradient_check(n, s)?,
        w2_closed_form_check(2 * n, s)?,
        transport_check(n, s)?,
        tv_bound_check(2 * n, s)?,
    ])
}
