//! Reference computations used to check the fast paths: brute-force vertex
//! enumeration of the transportation polytope, central finite differences,
//! and grid quadrature of total variation. None of these share code with the
//! routines they check.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::gmm_model::{log_density_joint, DecodedGaussian, GmmParams, GmmTangent, StateConditioner};
use crate::surrogate::{normalize_advantages, Batch, Transition};
use crate::sym_linalg::{spd_project, SpdMatrix, SymmetricMatrix, DEFAULT_FLOOR};

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Minimum of `Σ c_ij x_ij` over all vertices of the transportation polytope,
/// found by trying every support of size `m + n − 1` and keeping the feasible
/// basic solutions. Exponential; meant for `m, n ≤ 3`.
pub fn brute_force_transport(row: &[f64], col: &[f64], cost: &DMatrix<f64>) -> f64 {
    let (m, n) = (row.len(), col.len());
    let vars = m + n - 1;
    let mut rhs = DVector::zeros(m + n);
    for (i, a) in row.iter().enumerate() {
        rhs[i] = *a;
    }
    for (j, b) in col.iter().enumerate() {
        rhs[m + j] = *b;
    }
    let mut best = f64::INFINITY;
    for support in combinations(m * n, vars) {
        let mut a = DMatrix::zeros(m + n, vars);
        for (k, &cell) in support.iter().enumerate() {
            let (i, j) = (cell / n, cell % n);
            a[(i, k)] = 1.0;
            a[(m + j, k)] = 1.0;
        }
        let svd = a.clone().svd(true, true);
        if svd.rank(1e-9) < vars {
            continue;
        }
        let Ok(x) = svd.solve(&rhs, 1e-12) else {
            continue;
        };
        if (&a * &x - &rhs).norm() > 1e-10 || x.iter().any(|v| *v < -1e-12) {
            continue;
        }
        let obj: f64 = support
            .iter()
            .zip(x.iter())
            .map(|(&cell, v)| cost[(cell / n, cell % n)] * v)
            .sum();
        best = best.min(obj);
    }
    best
}

/// Central-difference gradient of `f` at symmetric `m`, in the convention
/// `df = Σ_ij G_ij dM_ij` over symmetric perturbations: diagonal entries are
/// bumped alone, off-diagonal pairs together (and the result halved).
pub fn finite_difference_sym(
    m: &DMatrix<f64>,
    h: f64,
    mut f: impl FnMut(&DMatrix<f64>) -> f64,
) -> DMatrix<f64> {
    let n = m.nrows();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut plus = m.clone();
            let mut minus = m.clone();
            plus[(i, j)] += h;
            minus[(i, j)] -= h;
            if i != j {
                plus[(j, i)] += h;
                minus[(j, i)] -= h;
            }
            let d = (f(&plus) - f(&minus)) / (2.0 * h);
            if i == j {
                g[(i, i)] = d;
            } else {
                g[(i, j)] = d / 2.0;
                g[(j, i)] = d / 2.0;
            }
        }
    }
    g
}

/// Central-difference gradient of `f` over a mixture's augmented components
/// and free logits.
pub fn finite_difference_gmm(
    g: &GmmParams,
    h: f64,
    f: impl Fn(&GmmParams) -> f64,
) -> GmmTangent {
    let mut out = GmmTangent::zeros_like(g);
    for (idx, comp) in g.components().iter().enumerate() {
        out.components[idx] = finite_difference_sym(comp.as_matrix(), h, |m| {
            let mut comps = g.components().to_vec();
            comps[idx] = SpdMatrix::from_matrix(m.clone(), comp.floor().min(1e-12))
                .expect("perturbation stays positive definite");
            f(&g.with_parts(g.free_eta(), comps).expect("same shape"))
        });
    }
    for m in 0..g.k() - 1 {
        let eval = |delta: f64| {
            let mut eta = g.free_eta().to_vec();
            eta[m] += delta;
            f(&g.with_parts(&eta, g.components().to_vec()).expect("same shape"))
        };
        out.free_eta[m] = (eval(h) - eval(-h)) / (2.0 * h);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)` over all tangent entries.
pub fn relative_error(analytic: &GmmTangent, numeric: &GmmTangent) -> f64 {
    let mut diff = analytic.clone();
    diff.add_scaled(numeric, -1.0);
    diff.norm() / analytic.norm().max(numeric.norm()).max(1e-10)
}

/// `½ ∫ |p − q|` for two one-dimensional mixtures by midpoint quadrature over
/// a window covering ±14 standard deviations of every component.
pub fn tv_quadrature_1d(p: &GmmParams, q: &GmmParams, points: usize) -> f64 {
    assert_eq!(p.joint_dim(), 1, "quadrature oracle is one-dimensional");
    assert_eq!(q.joint_dim(), 1, "quadrature oracle is one-dimensional");
    let params = |g: &GmmParams| -> Vec<(f64, f64, f64)> {
        g.decoded()
            .iter()
            .zip(g.weights())
            .map(|(c, w)| (w, c.mean[0], c.covariance.as_matrix()[(0, 0)].sqrt()))
            .collect()
    };
    let (pp, qq) = (params(p), params(q));
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(_, m, sd) in pp.iter().chain(&qq) {
        lo = lo.min(m - 14.0 * sd);
        hi = hi.max(m + 14.0 * sd);
    }
    let density = |comps: &[(f64, f64, f64)], x: f64| -> f64 {
        comps
            .iter()
            .map(|&(w, m, sd)| {
                let z = (x - m) / sd;
                w * (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
            })
            .sum()
    };
    let h = (hi - lo) / points as f64;
    let total: f64 = (0..points)
        .map(|i| {
            let x = lo + (i as f64 + 0.5) * h;
            (density(&pp, x) - density(&qq, x)).abs()
        })
        .sum();
    0.5 * total * h
}

fn random_covariance(rng: &mut impl Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.3
}

/// A mixture with means in `[−1, 1]`, well-conditioned covariances and
/// weights bounded away from zero.
pub fn random_gmm(rng: &mut impl Rng, state_dim: usize, action_dim: usize, k: usize) -> GmmParams {
    let d = state_dim + action_dim;
    let gaussians: Vec<DecodedGaussian> = (0..k)
        .map(|_| {
            let mean = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            let cov = SpdMatrix::from_matrix(random_covariance(rng, d), DEFAULT_FLOOR)
                .expect("shifted Gram matrix is SPD");
            DecodedGaussian::new(mean, cov).expect("finite mean")
        })
        .collect();
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.3..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    GmmParams::from_gaussians(state_dim, action_dim, &weights, &gaussians).expect("valid mixture")
}

/// Adds a symmetric perturbation of entry size `scale` to every augmented
/// component and to every free logit. Components are re-projected so their
/// smallest eigenvalue stays within a factor of 20 of the original.
pub fn perturb_gmm(g: &GmmParams, scale: f64, rng: &mut impl Rng) -> GmmParams {
    let comps = g
        .components()
        .iter()
        .map(|c| {
            let n = c.dim();
            let e = DMatrix::from_fn(n, n, |_, _| rng.random_range(-scale..scale));
            let m = SymmetricMatrix::new(c.as_matrix() + (&e + e.transpose()) * 0.5)
                .expect("finite perturbation");
            spd_project(&m, c.floor().max(0.05 * c.min_eigenvalue())).expect("positive floor")
        })
        .collect();
    let eta: Vec<f64> = g
        .free_eta()
        .iter()
        .map(|e| e + rng.random_range(-scale..scale))
        .collect();
    g.with_parts(&eta, comps).expect("same shape")
}

/// `n` joint samples from `g`, split into (state, action), with cached
/// log-densities under `g` and standard normal advantages.
pub fn random_batch(g: &GmmParams, n: usize, normalize: bool, rng: &mut impl Rng) -> Batch {
    let ds = g.state_dim();
    let cond = StateConditioner::new(g).expect("valid mixture");
    let comps = g.decoded();
    let weights = g.weights();
    let transitions = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut idx = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    idx = i;
                    break;
                }
            }
            let c = &comps[idx];
            let l = Cholesky::<f64, Dyn>::new(c.covariance.as_matrix().clone())
                .expect("SPD covariance")
                .unpack();
            let xi = DVector::from_fn(c.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let z = &c.mean + l * xi;
            let state = z.rows(0, ds).iter().copied().collect::<Vec<_>>();
            let action = z.rows(ds, g.action_dim()).iter().copied().collect::<Vec<_>>();
            let log_prob = cond.log_prob(&state, &action).expect("matching shapes");
            Transition {
                next_state: state.clone(),
                state,
                action,
                log_prob,
                reward: 0.0,
                done: false,
            }
        })
        .collect();
    let mut adv: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    if normalize {
        normalize_advantages(&mut adv);
    }
    Batch::new(transitions, adv, 0.99).expect("finite batch")
}

/// `ln p(s, a) − ln p(s)` from the joint density and an explicitly
/// marginalized state density.
pub fn direct_log_policy(g: &GmmParams, s: &[f64], a: &[f64]) -> f64 {
    let z: Vec<f64> = s.iter().chain(a).copied().collect();
    let joint = log_density_joint(g, &z).expect("finite point");
    let ds = s.len();
    if ds == 0 {
        return joint;
    }
    let sv = DVector::from_column_slice(s);
    let terms: Vec<f64> = g
        .decoded()
        .iter()
        .zip(g.weights())
        .map(|(c, w)| {
            let cov = c.covariance.as_matrix().view((0, 0), (ds, ds)).clone_owned();
            let chol = Cholesky::<f64, Dyn>::new(cov).expect("SPD block");
            let diff = &sv - c.mean.rows(0, ds);
            let quad = diff.dot(&chol.solve(&diff));
            let log_det = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            w.ln() - 0.5 * (ds as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad)
        })
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    joint - (max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combinations_count() {
        assert_eq!(combinations(9, 5).len(), 126);
        assert_eq!(combinations(3, 3).len(), 1);
    }

    #[test]
    fn brute_force_simple_instance() {
        // Two sources, two sinks, crossing is cheaper.
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let v = brute_force_transport(&[0.5, 0.5], &[0.5, 0.5], &c);
        assert!(v.abs() < 1e-12);
        let v = brute_force_transport(&[0.7, 0.3], &[0.5, 0.5], &c);
        assert!((v - 0.2).abs() < 1e-12);
    }

    #[test]
    fn finite_difference_of_trace_quadratic() {
        // f(M) = tr(M M) has gradient 2M in the symmetric convention.
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        let g = finite_difference_sym(&m, 1e-5, |x| (x * x).trace());
        assert!((g - &m * 2.0).norm() < 1e-8);
    }
}
