//! Wasserstein and total-variation machinery for Gaussian mixtures.
//!
//! Mixture distances are discrete optimal-transport problems between the
//! mixture weights, with pairwise costs given by a closed form between the
//! decoded Gaussian components. The transport problem is solved exactly by a
//! transportation simplex (northwest-corner start, Bland's rule), so the
//! reported values are true optima of the linear program.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gmm_model::{decode, DecodedGaussian, GmmParams, GmmTangent};
use crate::sym_linalg::{
    eigh, spd_inv_sqrt, spd_inverse, spd_sqrt, symmetrize, SpdMatrix, SymmetricMatrix,
};

/// Weights below this are clamped before solving.
pub const MIN_MARGINAL: f64 = 1e-12;

/// Universal cap of the Gaussian total-variation bound.
pub const TV_CAP: f64 = 1.5;

const MAX_PIVOTS: usize = 100_000;

/// Nonnegative, finite transport costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(DMatrix<f64>);

impl CostMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidInput(
                "costs must be finite and nonnegative".into(),
            ));
        }
        Ok(Self(m))
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// An optimal coupling together with its objective and dual potentials
/// (`u_i + v_j ≤ c_ij`, with equality on the support).
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub plan: DMatrix<f64>,
    pub objective: f64,
    pub row_potentials: Vec<f64>,
    pub col_potentials: Vec<f64>,
}

fn prepare_marginal(w: &[f64], name: &str) -> Result<Vec<f64>> {
    if w.is_empty() {
        return Err(Error::InvalidInput(format!("{name} marginal is empty")));
    }
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidInput(format!(
            "{name} marginal has negative or non-finite entries"
        )));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "{name} marginal sums to {sum}, expected 1"
        )));
    }
    let clamped: Vec<f64> = w.iter().map(|x| x.max(MIN_MARGINAL)).collect();
    let total: f64 = clamped.iter().sum();
    Ok(clamped.into_iter().map(|x| x / total).collect())
}

/// Basis of the transportation simplex: a spanning tree over the m row
/// nodes and n column nodes, one edge per basic cell.
struct Basis {
    m: usize,
    n: usize,
    cells: Vec<(usize, usize)>,
    is_basic: Vec<bool>,
}

impl Basis {
    fn new(m: usize, n: usize) -> Self {
        Self {
            m,
            n,
            cells: Vec::with_capacity(m + n - 1),
            is_basic: vec![false; m * n],
        }
    }

    fn insert(&mut self, i: usize, j: usize) {
        self.cells.push((i, j));
        self.is_basic[i * self.n + j] = true;
    }

    fn remove(&mut self, i: usize, j: usize) {
        self.cells.retain(|&c| c != (i, j));
        self.is_basic[i * self.n + j] = false;
    }

    fn contains(&self, i: usize, j: usize) -> bool {
        self.is_basic[i * self.n + j]
    }

    /// Nodes `0..m` are rows, `m..m+n` are columns.
    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.m + self.n];
        for &(i, j) in &self.cells {
            adj[i].push(self.m + j);
            adj[self.m + j].push(i);
        }
        adj
    }

    fn potentials(&self, cost: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
        let adj = self.adjacency();
        let mut pot = vec![f64::NAN; self.m + self.n];
        pot[0] = 0.0;
        let mut queue = VecDeque::from([0usize]);
        while let Some(node) = queue.pop_front() {
            for &next in &adj[node] {
                if pot[next].is_nan() {
                    pot[next] = if node < self.m {
                        cost[(node, next - self.m)] - pot[node]
                    } else {
                        cost[(next, node - self.m)] - pot[node]
                    };
                    queue.push_back(next);
                }
            }
        }
        let v = pot.split_off(self.m);
        (pot, v)
    }

    /// Tree path from row `i` to column `j` as a list of cells.
    fn path(&self, i: usize, j: usize) -> Vec<(usize, usize)> {
        let adj = self.adjacency();
        let target = self.m + j;
        let mut parent = vec![usize::MAX; self.m + self.n];
        parent[i] = i;
        let mut queue = VecDeque::from([i]);
        while let Some(node) = queue.pop_front() {
            if node == target {
                break;
            }
            for &next in &adj[node] {
                if parent[next] == usize::MAX {
                    parent[next] = node;
                    queue.push_back(next);
                }
            }
        }
        let mut cells = Vec::new();
        let mut node = target;
        while node != i {
            let prev = parent[node];
            let cell = if node < self.m {
                (node, prev - self.m)
            } else {
                (prev, node - self.m)
            };
            cells.push(cell);
            node = prev;
        }
        cells.reverse();
        cells
    }
}

/// Exact optimum of `min Σ c_ij x_ij` over couplings with the given row and
/// column marginals.
pub fn solve_transport(row: &[f64], col: &[f64], cost: &CostMatrix) -> Result<TransportPlan> {
    let c = cost.as_matrix();
    let (m, n) = (row.len(), col.len());
    if c.nrows() != m || c.ncols() != n {
        return Err(Error::InvalidInput(format!(
            "cost matrix is {}x{}, marginals are {m} and {n}",
            c.nrows(),
            c.ncols()
        )));
    }
    let row_sum: f64 = row.iter().sum();
    let col_sum: f64 = col.iter().sum();
    if (row_sum - col_sum).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "infeasible marginals: row mass {row_sum}, column mass {col_sum}"
        )));
    }
    let a = prepare_marginal(row, "row")?;
    let b = prepare_marginal(col, "column")?;

    let mut x = DMatrix::<f64>::zeros(m, n);
    let mut basis = Basis::new(m, n);
    // Northwest corner: exactly m + n − 1 cells, zeros included on ties.
    {
        let (mut ra, mut rb) = (a.clone(), b.clone());
        let (mut i, mut j) = (0, 0);
        loop {
            let q = ra[i].min(rb[j]);
            x[(i, j)] = q;
            basis.insert(i, j);
            ra[i] -= q;
            rb[j] -= q;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if i == m - 1 {
                j += 1;
            } else if j == n - 1 || ra[i] <= rb[j] {
                i += 1;
            } else {
                j += 1;
            }
        }
    }

    let tol = 1e-12 * c.iter().copied().fold(1.0, f64::max);
    let mut pivots = 0;
    let (u, v) = loop {
        let (u, v) = basis.potentials(c);
        // Bland: first improving cell in row-major order.
        let entering = (0..m)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .find(|&(i, j)| !basis.contains(i, j) && c[(i, j)] - u[i] - v[j] < -tol);
        let Some((ei, ej)) = entering else {
            break (u, v);
        };
        pivots += 1;
        if pivots > MAX_PIVOTS {
            return Err(Error::InvalidInput(
                "transportation simplex exceeded its pivot budget".into(),
            ));
        }
        let path = basis.path(ei, ej);
        // Path cells alternate −, +, −, ... starting next to the entering cell.
        let minus: Vec<(usize, usize)> = path.iter().copied().step_by(2).collect();
        let plus: Vec<(usize, usize)> = path.iter().copied().skip(1).step_by(2).collect();
        let theta = minus
            .iter()
            .map(|&(i, j)| x[(i, j)])
            .fold(f64::INFINITY, f64::min);
        let leaving = *minus
            .iter()
            .filter(|&&(i, j)| x[(i, j)] <= theta)
            .min()
            .expect("cycle has at least one minus cell");
        for &(i, j) in &plus {
            x[(i, j)] += theta;
        }
        for &(i, j) in &minus {
            x[(i, j)] = (x[(i, j)] - theta).max(0.0);
        }
        x[(ei, ej)] = theta;
        x[leaving] = 0.0;
        basis.remove(leaving.0, leaving.1);
        basis.insert(ei, ej);
    };

    let objective = x.iter().zip(c.iter()).map(|(p, q)| p * q).sum();
    Ok(TransportPlan {
        plan: x,
        objective,
        row_potentials: u,
        col_potentials: v,
    })
}

/// Squared 2-Wasserstein distance between Gaussians:
/// `‖μ₀ − μ₁‖² + tr(S₀ + S₁ − 2 (S₀^{1/2} S₁ S₀^{1/2})^{1/2})`.
pub fn w2_gaussian_sq(g0: &DecodedGaussian, g1: &DecodedGaussian) -> Result<f64> {
    if g0.dim() != g1.dim() {
        return Err(Error::DimensionMismatch {
            expected: g0.dim(),
            got: g1.dim(),
        });
    }
    let mean_term = (&g0.mean - &g1.mean).norm_squared();
    let root0 = spd_sqrt(&g0.covariance)?;
    let cross = cross_root(root0.as_matrix(), g1.covariance.as_matrix())?;
    let bures = g0.covariance.as_matrix().trace() + g1.covariance.as_matrix().trace()
        - 2.0 * cross.trace();
    Ok(mean_term + bures.max(0.0))
}

/// `(R S R)^{1/2}` for symmetric `R` and SPD `S`.
fn cross_root(r: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inner = SymmetricMatrix::new(symmetrize(&(r * s * r)))?;
    Ok(eigh(&inner)?.reconstruct_with(|l| l.max(0.0).sqrt()))
}

/// Gradient of the covariance part of W2² with respect to its first argument:
/// `I − S₀^{-1/2} (S₀^{1/2} S₁ S₀^{1/2})^{1/2} S₀^{-1/2}`.
pub fn w2_grad_wrt_first(s0: &SpdMatrix, s1: &SpdMatrix) -> Result<SymmetricMatrix> {
    if s0.dim() != s1.dim() {
        return Err(Error::DimensionMismatch {
            expected: s0.dim(),
            got: s1.dim(),
        });
    }
    let root = spd_sqrt(s0)?;
    let inv_root = spd_inv_sqrt(s0)?;
    let cross = cross_root(root.as_matrix(), s1.as_matrix())?;
    let transport = inv_root.as_matrix() * cross * inv_root.as_matrix();
    let n = s0.dim();
    SymmetricMatrix::new(DMatrix::identity(n, n) - transport)
}

/// Gradient of `w2_gaussian_sq(decode(s0), g1)` with respect to the augmented
/// matrix `s0 = [[A, b], [bᵀ, c]]`, by the chain rule through `μ = b/c`,
/// `Σ = A − bbᵀ/c`.
pub fn w2_gaussian_sq_grad_augmented(s0: &SpdMatrix, g1: &DecodedGaussian) -> Result<DMatrix<f64>> {
    let g0 = decode(s0);
    let d = g0.dim();
    if d != g1.dim() {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: g1.dim(),
        });
    }
    let c = s0.as_matrix()[(d, d)];
    let grad_cov = w2_grad_wrt_first(&g0.covariance, &g1.covariance)?.into_matrix();
    let mu = &g0.mean;
    let diff = mu - &g1.mean;
    let off = &diff / c - &grad_cov * mu;
    let corner = (mu.transpose() * &grad_cov * mu)[(0, 0)] - 2.0 * diff.dot(mu) / c;
    let mut g = DMatrix::zeros(d + 1, d + 1);
    g.view_mut((0, 0), (d, d)).copy_from(&grad_cov);
    g.view_mut((0, d), (d, 1)).copy_from(&off);
    g.view_mut((d, 0), (1, d)).copy_from(&off.transpose());
    g[(d, d)] = corner;
    Ok(g)
}

/// Lemma-style total-variation bound between two Gaussians:
/// `3/2 · min{1, ‖S₀⁻¹ S₁ − I‖_F}` when the means coincide, and the cap
/// `3/2` otherwise.
pub fn tv_bound_gaussian(g0: &DecodedGaussian, g1: &DecodedGaussian) -> Result<f64> {
    if g0.dim() != g1.dim() {
        return Err(Error::DimensionMismatch {
            expected: g0.dim(),
            got: g1.dim(),
        });
    }
    let scale = 1.0 + g0.mean.norm().max(g1.mean.norm());
    if (&g0.mean - &g1.mean).norm() > 1e-12 * scale {
        return Ok(TV_CAP);
    }
    if g0.covariance.as_matrix() == g1.covariance.as_matrix() {
        return Ok(0.0);
    }
    let inv = spd_inverse(&g0.covariance)?;
    let n = g0.dim();
    let dev = (inv.as_matrix() * g1.covariance.as_matrix() - DMatrix::identity(n, n)).norm();
    Ok(TV_CAP * dev.min(1.0))
}

fn check_same_space(g1: &GmmParams, g2: &GmmParams) -> Result<()> {
    if g1.joint_dim() != g2.joint_dim() {
        return Err(Error::DimensionMismatch {
            expected: g1.joint_dim(),
            got: g2.joint_dim(),
        });
    }
    Ok(())
}

fn pairwise_costs(
    g1: &GmmParams,
    g2: &GmmParams,
    f: impl Fn(&DecodedGaussian, &DecodedGaussian) -> Result<f64>,
) -> Result<CostMatrix> {
    check_same_space(g1, g2)?;
    let a = g1.decoded();
    let b = g2.decoded();
    let mut m = DMatrix::zeros(a.len(), b.len());
    for (i, ai) in a.iter().enumerate() {
        for (j, bj) in b.iter().enumerate() {
            m[(i, j)] = f(ai, bj)?;
        }
    }
    CostMatrix::new(m)
}

/// Pairwise `w2_gaussian_sq` between decoded components.
pub fn w2_cost_matrix(g1: &GmmParams, g2: &GmmParams) -> Result<CostMatrix> {
    pairwise_costs(g1, g2, w2_gaussian_sq)
}

/// Pairwise `tv_bound_gaussian` between decoded components.
pub fn tv_cost_matrix(g1: &GmmParams, g2: &GmmParams) -> Result<CostMatrix> {
    pairwise_costs(g1, g2, tv_bound_gaussian)
}

/// Optimal plan for the mixture-embedded W2²; `objective` is the distance.
pub fn gmm_w2(g1: &GmmParams, g2: &GmmParams) -> Result<TransportPlan> {
    let cost = w2_cost_matrix(g1, g2)?;
    solve_transport(&g1.weights(), &g2.weights(), &cost)
}

/// `Σ c*(i,j) W2(N_i, N_j)²` over the optimal weight coupling.
pub fn gmm_w2_sq(g1: &GmmParams, g2: &GmmParams) -> Result<f64> {
    Ok(gmm_w2(g1, g2)?.objective)
}

/// Optimal plan for the total-variation bound cost.
pub fn gmm_tv(g1: &GmmParams, g2: &GmmParams) -> Result<TransportPlan> {
    let cost = tv_cost_matrix(g1, g2)?;
    solve_transport(&g1.weights(), &g2.weights(), &cost)
}

/// Upper bound on the total variation between two mixtures, in `[0, 3/2]`.
pub fn gmm_tv_bound(g1: &GmmParams, g2: &GmmParams) -> Result<f64> {
    Ok(gmm_tv(g1, g2)?.objective.clamp(0.0, TV_CAP))
}

/// `gmm_w2_sq(g1, g2)` and its gradient with respect to `g1`, holding the
/// optimal plan fixed for the component matrices and using the row
/// potentials as sensitivities of the optimal value to `g1`'s weights.
pub fn gmm_w2_sq_grad(g1: &GmmParams, g2: &GmmParams) -> Result<(f64, GmmTangent)> {
    let plan = gmm_w2(g1, g2)?;
    let targets = g2.decoded();
    let mut grad = GmmTangent::zeros_like(g1);
    for (i, s) in g1.components().iter().enumerate() {
        for (j, t) in targets.iter().enumerate() {
            let mass = plan.plan[(i, j)];
            if mass > 0.0 {
                grad.components[i] += w2_gaussian_sq_grad_augmented(s, t)? * mass;
            }
        }
    }
    let alpha = g1.weights();
    let u = &plan.row_potentials;
    let mean_u: f64 = alpha.iter().zip(u).map(|(a, x)| a * x).sum();
    for (m, ge) in grad.free_eta.iter_mut().enumerate() {
        *ge = alpha[m] * (u[m] - mean_u);
    }
    Ok((plan.objective, grad))
}

/// Convenience for callers holding plain vectors.
pub fn gaussian(mean: &[f64], cov: DMatrix<f64>, floor: f64) -> Result<DecodedGaussian> {
    DecodedGaussian::new(
        DVector::from_column_slice(mean),
        SpdMatrix::from_matrix(cov, floor)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{brute_force_transport, finite_difference_sym};
    use crate::sym_linalg::DEFAULT_FLOOR;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g(mean: &[f64], cov: DMatrix<f64>) -> DecodedGaussian {
        gaussian(mean, cov, DEFAULT_FLOOR).unwrap()
    }

    fn random_spd(rng: &mut impl Rng, n: usize) -> SpdMatrix {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        SpdMatrix::from_matrix(&a * a.transpose() + DMatrix::identity(n, n) * 0.3, DEFAULT_FLOOR)
            .unwrap()
    }

    fn random_simplex(rng: &mut impl Rng, k: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let t: f64 = raw.iter().sum();
        raw.iter().map(|x| x / t).collect()
    }

    fn random_gmm(rng: &mut impl Rng, d: usize, k: usize) -> GmmParams {
        let gs: Vec<_> = (0..k)
            .map(|_| {
                let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                DecodedGaussian::new(DVector::from_vec(mean), random_spd(rng, d)).unwrap()
            })
            .collect();
        GmmParams::from_gaussians(0, d, &random_simplex(rng, k), &gs).unwrap()
    }

    #[test]
    fn w2_gaussian_cases() {
        let a = g(&[0.3, -0.1], DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]));
        assert!(w2_gaussian_sq(&a, &a).unwrap().abs() < 1e-12);
        for d in 1..=10 {
            let i = g(&vec![0.0; d], DMatrix::identity(d, d));
            let four = g(&vec![0.0; d], DMatrix::identity(d, d) * 4.0);
            assert!((w2_gaussian_sq(&i, &four).unwrap() - d as f64).abs() < 1e-8);
        }
        let x = g(&[0.0], DMatrix::identity(1, 1));
        let y = g(&[3.0], DMatrix::identity(1, 1));
        assert!((w2_gaussian_sq(&x, &y).unwrap() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn w2_gaussian_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let d = rng.random_range(1..5);
            let m0: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m1: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = DecodedGaussian::new(DVector::from_vec(m0), random_spd(&mut rng, d)).unwrap();
            let b = DecodedGaussian::new(DVector::from_vec(m1), random_spd(&mut rng, d)).unwrap();
            let ab = w2_gaussian_sq(&a, &b).unwrap();
            let ba = w2_gaussian_sq(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-9);
            assert!(ab >= 0.0);
        }
    }

    #[test]
    fn transport_single_cell() {
        let c = CostMatrix::new(DMatrix::from_element(1, 1, 3.5)).unwrap();
        let p = solve_transport(&[1.0], &[1.0], &c).unwrap();
        assert_eq!(p.plan[(0, 0)], 1.0);
        assert_eq!(p.objective, 3.5);
    }

    #[test]
    fn transport_identity_coupling() {
        let w = [0.2, 0.5, 0.3];
        let mut c = DMatrix::from_element(3, 3, 1.0);
        c.fill_diagonal(0.0);
        let p = solve_transport(&w, &w, &CostMatrix::new(c).unwrap()).unwrap();
        assert!(p.objective.abs() < 1e-15);
        for i in 0..3 {
            assert!((p.plan[(i, i)] - w[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn transport_rejects_infeasible_marginals() {
        let c = CostMatrix::new(DMatrix::zeros(2, 2)).unwrap();
        assert!(matches!(
            solve_transport(&[0.5, 0.5], &[0.7, 0.5], &c),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn transport_matches_vertex_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..200 {
            let m = rng.random_range(1..4);
            let n = rng.random_range(1..4);
            let a = random_simplex(&mut rng, m);
            let b = random_simplex(&mut rng, n);
            let c = DMatrix::from_fn(m, n, |_, _| rng.random_range(0.0..5.0));
            let cost = CostMatrix::new(c.clone()).unwrap();
            let p = solve_transport(&a, &b, &cost).unwrap();
            let oracle = brute_force_transport(&a, &b, &c);
            assert!((p.objective - oracle).abs() < 1e-8, "{} vs {}", p.objective, oracle);
            for i in 0..m {
                assert!((p.plan.row(i).sum() - a[i]).abs() < 1e-9);
            }
            for j in 0..n {
                assert!((p.plan.column(j).sum() - b[j]).abs() < 1e-9);
            }
            assert!(p.plan.iter().all(|x| *x >= 0.0));
            // complementary slackness and dual feasibility
            for i in 0..m {
                for j in 0..n {
                    let r = c[(i, j)] - p.row_potentials[i] - p.col_potentials[j];
                    assert!(r > -1e-9);
                    if p.plan[(i, j)] > 1e-12 {
                        assert!(r.abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn transport_handles_degenerate_ties_at_larger_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..50 {
            let k = rng.random_range(4..17);
            let w = vec![1.0 / k as f64; k];
            // integer costs make ties and degenerate pivots common
            let c = DMatrix::from_fn(k, k, |_, _| rng.random_range(0..4) as f64);
            let p = solve_transport(&w, &w, &CostMatrix::new(c.clone()).unwrap()).unwrap();
            let indep: f64 = c.iter().sum::<f64>() / (k * k) as f64;
            assert!(p.objective <= indep + 1e-12);
            for i in 0..k {
                assert!((p.plan.row(i).sum() - w[i]).abs() < 1e-9);
                assert!((p.plan.column(i).sum() - w[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mixture_w2_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let a = random_gmm(&mut rng, 2, 3);
        assert!(gmm_w2_sq(&a, &a).unwrap().abs() < 1e-12);

        let w = a.weights();
        let d = a.decoded();
        let perm = [1usize, 2, 0];
        let pa = GmmParams::from_gaussians(
            0,
            2,
            &perm.iter().map(|&i| w[i]).collect::<Vec<_>>(),
            &perm.iter().map(|&i| d[i].clone()).collect::<Vec<_>>(),
        )
        .unwrap();
        assert!(gmm_w2_sq(&a, &pa).unwrap().abs() < 1e-10);

        let x = random_gmm(&mut rng, 2, 1);
        let y = random_gmm(&mut rng, 2, 1);
        let direct = w2_gaussian_sq(&x.decoded()[0], &y.decoded()[0]).unwrap();
        assert!((gmm_w2_sq(&x, &y).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn tv_bound_cases() {
        let a = g(&[0.0, 0.0], DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]));
        assert_eq!(tv_bound_gaussian(&a, &a).unwrap(), 0.0);
        let b = g(&[0.0, 0.0], DMatrix::identity(2, 2) * 5.0);
        assert_eq!(tv_bound_gaussian(&a, &b).unwrap(), 1.5);
        let x = g(&[0.0], DMatrix::identity(1, 1));
        let y = g(&[0.0], DMatrix::identity(1, 1) * 1.5);
        assert!((tv_bound_gaussian(&x, &y).unwrap() - 0.75).abs() < 1e-15);
        let shifted = g(&[0.1], DMatrix::identity(1, 1));
        assert_eq!(tv_bound_gaussian(&x, &shifted).unwrap(), 1.5);
    }

    #[test]
    fn mixture_tv_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let a = random_gmm(&mut rng, 1, 3);
        assert_eq!(gmm_tv_bound(&a, &a).unwrap(), 0.0);
        let x = random_gmm(&mut rng, 1, 1);
        let y = random_gmm(&mut rng, 1, 1);
        assert_eq!(
            gmm_tv_bound(&x, &y).unwrap(),
            tv_bound_gaussian(&x.decoded()[0], &y.decoded()[0]).unwrap()
        );
    }

    #[test]
    fn w2_grad_cases() {
        let s = SpdMatrix::from_diagonal(&[1.0, 2.0]).unwrap();
        let g0 = w2_grad_wrt_first(&s, &s).unwrap();
        assert!(g0.as_matrix().norm() < 1e-12);
        let one = SpdMatrix::from_diagonal(&[1.0]).unwrap();
        let four = SpdMatrix::from_diagonal(&[4.0]).unwrap();
        let g = w2_grad_wrt_first(&one, &four).unwrap();
        assert!((g.as_matrix()[(0, 0)] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn w2_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        for _ in 0..20 {
            let d = rng.random_range(1..5);
            let s0 = random_spd(&mut rng, d);
            let s1 = random_spd(&mut rng, d);
            let an = w2_grad_wrt_first(&s0, &s1).unwrap().into_matrix();
            let zero = DVector::zeros(d);
            let target = DecodedGaussian::new(zero.clone(), s1.clone()).unwrap();
            let fd = finite_difference_sym(s0.as_matrix(), 1e-5, |m| {
                let src = DecodedGaussian::new(
                    zero.clone(),
                    SpdMatrix::from_matrix(m.clone(), 1e-12).unwrap(),
                )
                .unwrap();
                w2_gaussian_sq(&src, &target).unwrap()
            });
            let rel = (&fd - &an).norm() / an.norm().max(1e-8);
            assert!(rel < 1e-5, "relative error {rel}");
        }
    }

    #[test]
    fn augmented_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..20 {
            let d = rng.random_range(1..4);
            let s0 = random_spd(&mut rng, d + 1);
            let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let target = DecodedGaussian::new(DVector::from_vec(mean), random_spd(&mut rng, d)).unwrap();
            let an = w2_gaussian_sq_grad_augmented(&s0, &target).unwrap();
            let fd = finite_difference_sym(s0.as_matrix(), 1e-5, |m| {
                let s = SpdMatrix::from_matrix(m.clone(), 1e-12).unwrap();
                w2_gaussian_sq(&decode(&s), &target).unwrap()
            });
            let rel = (&fd - &an).norm() / an.norm().max(1e-8);
            assert!(rel < 1e-5, "relative error {rel}");
        }
    }

    mod props {
        use super::*;
        use rand::Rng;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn plan_beats_independent_coupling(seed in 0u64..10_000, m in 1usize..8, n in 1usize..8) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random_simplex(&mut rng, m);
                let b = random_simplex(&mut rng, n);
                let c = DMatrix::from_fn(m, n, |_, _| rng.random_range(0.0..3.0));
                let p = solve_transport(&a, &b, &CostMatrix::new(c.clone()).unwrap()).unwrap();
                let mut indep = 0.0;
                for i in 0..m {
                    for j in 0..n {
                        indep += a[i] * b[j] * c[(i, j)];
                    }
                }
                prop_assert!(p.objective <= indep + 1e-12);
                prop_assert!((p.plan.sum() - 1.0).abs() < 1e-9);
            }

            #[test]
            fn mixture_w2_is_symmetric_and_metric(seed in 0u64..10_000, d in 1usize..3, k in 1usize..4) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random_gmm(&mut rng, d, k);
                let b = random_gmm(&mut rng, d, k);
                let c = random_gmm(&mut rng, d, k);
                let ab = gmm_w2_sq(&a, &b).unwrap();
                let ba = gmm_w2_sq(&b, &a).unwrap();
                prop_assert!((ab - ba).abs() < 1e-9);
                let ac = gmm_w2_sq(&a, &c).unwrap();
                let bc = gmm_w2_sq(&b, &c).unwrap();
                prop_assert!(ac.sqrt() <= ab.sqrt() + bc.sqrt() + 1e-7);
            }
        }
    }
}
