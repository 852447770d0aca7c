//! Gaussian mixture policies over the joint (state, action) space.
//!
//! Each component is stored as an augmented `(d+1)×(d+1)` SPD matrix
//!
//! ```text
//!     [ Σ + μμᵀ   μ ]
//!     [   μᵀ      1 ]
//! ```
//!
//! so means and covariances live on a single SPD manifold. Mixture weights are
//! carried as softmax logits with the last logit pinned to zero. The policy
//! π(a | s) is the exact Gaussian-mixture conditional of the joint model.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::sym_linalg::{spd_project, SpdMatrix, SymmetricMatrix};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Softmax with max subtraction.
pub fn weights_from_eta(eta: &[f64]) -> Vec<f64> {
    let max = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = eta.iter().map(|e| (e - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `η_k = ln(α_k / α_K)`, so the last logit is exactly zero.
pub fn eta_from_weights(alpha: &[f64]) -> Result<Vec<f64>> {
    let Some(&last) = alpha.last() else {
        return Err(Error::InvalidWeight("empty weight vector".into()));
    };
    if let Some(bad) = alpha.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(Error::InvalidWeight(format!(
            "weights must be positive, got {bad}"
        )));
    }
    let k = alpha.len();
    Ok(alpha
        .iter()
        .enumerate()
        .map(|(i, a)| if i + 1 == k { 0.0 } else { (a / last).ln() })
        .collect())
}

/// Number of free parameters of a K-component mixture over a `ds + da`
/// dimensional joint space: one mean and one symmetric covariance per
/// component plus K−1 free weights.
pub fn param_count(ds: usize, da: usize, k: usize) -> usize {
    let d = ds + da;
    k * (d + d * (d + 1) / 2) + k.saturating_sub(1)
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Lower Cholesky factor and normalizing constant of a Gaussian covariance.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct CholFactor {
    l: DMatrix<f64>,
    log_norm: f64,
}

impl CholFactor {
    pub(crate) fn new(cov: &DMatrix<f64>) -> Result<Self> {
        let n = cov.nrows();
        let chol = Cholesky::<f64, Dyn>::new(cov.clone())
            .ok_or_else(|| Error::Degenerate("covariance is not positive definite".into()))?;
        let l = chol.unpack();
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>();
        Ok(Self {
            l,
            log_norm: -0.5 * (n as f64 * LN_2PI + log_det),
        })
    }

    pub(crate) fn log_density(&self, mean: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let diff = x - mean;
        let y = self
            .l
            .solve_lower_triangular(&diff)
            .expect("cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * y.norm_squared()
    }

    fn sample(&self, mean: &DVector<f64>, rng: &mut impl Rng) -> DVector<f64> {
        let z = DVector::from_iterator(mean.len(), (0..mean.len()).map(|_| rng.sample(StandardNormal)));
        mean + &self.l * z
    }
}

/// A Gaussian in mean/covariance form.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedGaussian {
    pub mean: DVector<f64>,
    pub covariance: SpdMatrix,
}

impl DecodedGaussian {
    pub fn new(mean: DVector<f64>, covariance: SpdMatrix) -> Result<Self> {
        if mean.len() != covariance.dim() {
            return Err(Error::DimensionMismatch {
                expected: covariance.dim(),
                got: mean.len(),
            });
        }
        if mean.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite mean".into()));
        }
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(CholFactor::new(self.covariance.as_matrix())?.log_density(&self.mean, x))
    }
}

/// Augmented SPD matrix `[[Σ + μμᵀ, μ], [μᵀ, 1]]`, keeping the covariance floor.
pub fn encode(g: &DecodedGaussian) -> Result<SpdMatrix> {
    let d = g.dim();
    let mu = &g.mean;
    let mut s = DMatrix::zeros(d + 1, d + 1);
    s.view_mut((0, 0), (d, d))
        .copy_from(&(g.covariance.as_matrix() + mu * mu.transpose()));
    s.view_mut((0, d), (d, 1)).copy_from(mu);
    s.view_mut((d, 0), (1, d)).copy_from(&mu.transpose());
    s[(d, d)] = 1.0;
    SpdMatrix::from_matrix(s, g.covariance.floor())
}

/// Gaussian conditioning on the augmented coordinate: `μ = b / c`,
/// `Σ = A − b bᵀ / c` for `S = [[A, b], [bᵀ, c]]`. Tolerates `c ≠ 1`.
pub fn decode(s: &SpdMatrix) -> DecodedGaussian {
    let n = s.dim();
    let d = n - 1;
    let m = s.as_matrix();
    let c = m[(d, d)];
    let b = m.view((0, d), (d, 1)).clone_owned();
    let mean = DVector::from_column_slice(b.as_slice()) / c;
    let cov = m.view((0, 0), (d, d)) - &b * b.transpose() / c;
    let covariance = positive_part(cov, s.floor());
    DecodedGaussian { mean, covariance }
}

/// Schur complements of SPD matrices are SPD with the same floor; rounding
/// can still nudge the smallest eigenvalue under it, which re-projection fixes.
fn positive_part(m: DMatrix<f64>, floor: f64) -> SpdMatrix {
    let sym = SymmetricMatrix::new(m).expect("finite square block");
    match SpdMatrix::new(sym.clone(), floor) {
        Ok(s) => s,
        Err(_) => spd_project(&sym, floor).expect("positive floor"),
    }
}

/// Mixture parameters: K logits (last one pinned at 0) and K augmented SPD
/// components of size `state_dim + action_dim + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    state_dim: usize,
    action_dim: usize,
    eta: Vec<f64>,
    components: Vec<SpdMatrix>,
}

impl GmmParams {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        eta: Vec<f64>,
        components: Vec<SpdMatrix>,
    ) -> Result<Self> {
        if action_dim == 0 {
            return Err(Error::InvalidInput("action dimension must be positive".into()));
        }
        let k = components.len();
        if k == 0 {
            return Err(Error::InvalidInput("mixture needs at least one component".into()));
        }
        if eta.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: eta.len(),
            });
        }
        if eta[k - 1] != 0.0 {
            return Err(Error::InvalidInput(format!(
                "last logit must be 0, got {}",
                eta[k - 1]
            )));
        }
        if eta.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidInput("non-finite logit".into()));
        }
        let n = state_dim + action_dim + 1;
        for c in &components {
            if c.dim() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: c.dim(),
                });
            }
        }
        Ok(Self {
            state_dim,
            action_dim,
            eta,
            components,
        })
    }

    /// Builds a mixture from weights and mean/covariance components.
    pub fn from_gaussians(
        state_dim: usize,
        action_dim: usize,
        weights: &[f64],
        gaussians: &[DecodedGaussian],
    ) -> Result<Self> {
        if weights.len() != gaussians.len() {
            return Err(Error::DimensionMismatch {
                expected: gaussians.len(),
                got: weights.len(),
            });
        }
        let components = gaussians.iter().map(encode).collect::<Result<Vec<_>>>()?;
        Self::new(state_dim, action_dim, eta_from_weights(weights)?, components)
    }

    /// Means uniform inside the given box, covariances `0.5·I`, uniform weights.
    pub fn initialize(
        state_dim: usize,
        action_dim: usize,
        k: usize,
        low: &[f64],
        high: &[f64],
        floor: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = state_dim + action_dim;
        if low.len() != d || high.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: low.len().min(high.len()),
            });
        }
        let cov = SpdMatrix::from_matrix(DMatrix::identity(d, d) * 0.5, floor)?;
        let gaussians = (0..k)
            .map(|_| {
                let mean = DVector::from_iterator(
                    d,
                    low.iter().zip(high).map(|(l, h)| rng.random_range(*l..=*h)),
                );
                DecodedGaussian::new(mean, cov.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_gaussians(state_dim, action_dim, &vec![1.0 / k as f64; k], &gaussians)
    }

    /// Same shape with new free logits (`K−1` of them) and components.
    pub fn with_parts(&self, free_eta: &[f64], components: Vec<SpdMatrix>) -> Result<Self> {
        let mut eta = free_eta.to_vec();
        eta.push(0.0);
        Self::new(self.state_dim, self.action_dim, eta, components)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn joint_dim(&self) -> usize {
        self.state_dim + self.action_dim
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    /// The K−1 optimizable logits.
    pub fn free_eta(&self) -> &[f64] {
        &self.eta[..self.eta.len() - 1]
    }

    pub fn weights(&self) -> Vec<f64> {
        weights_from_eta(&self.eta)
    }

    pub fn components(&self) -> &[SpdMatrix] {
        &self.components
    }

    pub fn decoded(&self) -> Vec<DecodedGaussian> {
        self.components.iter().map(decode).collect()
    }

    pub fn param_count(&self) -> usize {
        param_count(self.state_dim, self.action_dim, self.k())
    }

    /// Checks every invariant: pinned last logit, valid simplex weights, SPD floors.
    pub fn is_valid(&self) -> bool {
        let w = self.weights();
        let sum: f64 = w.iter().sum();
        self.eta.last() == Some(&0.0)
            && (sum - 1.0).abs() < 1e-12
            && w.iter().all(|x| *x > 0.0)
            && self.components.iter().all(SpdMatrix::satisfies_floor)
    }
}

/// A tangent vector at a [`GmmParams`]: one symmetric matrix per augmented
/// component and one entry per free logit.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmTangent {
    pub components: Vec<DMatrix<f64>>,
    pub free_eta: Vec<f64>,
}

impl GmmTangent {
    pub fn zeros_like(g: &GmmParams) -> Self {
        let n = g.joint_dim() + 1;
        Self {
            components: vec![DMatrix::zeros(n, n); g.k()],
            free_eta: vec![0.0; g.k() - 1],
        }
    }

    pub fn add_scaled(&mut self, other: &GmmTangent, scale: f64) {
        for (a, b) in self.components.iter_mut().zip(&other.components) {
            *a += b * scale;
        }
        for (a, b) in self.free_eta.iter_mut().zip(&other.free_eta) {
            *a += b * scale;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.components {
            *a *= s;
        }
        for a in &mut self.free_eta {
            *a *= s;
        }
    }

    /// Euclidean norm over all matrix entries and logits.
    pub fn norm(&self) -> f64 {
        let m: f64 = self.components.iter().map(|c| c.norm_squared()).sum();
        let e: f64 = self.free_eta.iter().map(|x| x * x).sum();
        (m + e).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.components.iter().all(|c| c.iter().all(|x| x.is_finite()))
            && self.free_eta.iter().all(|x| x.is_finite())
    }
}

/// `ln Σ_i α_i N(z; μ_i, Σ_i)` over the joint space.
pub fn log_density_joint(g: &GmmParams, z: &[f64]) -> Result<f64> {
    if z.len() != g.joint_dim() {
        return Err(Error::DimensionMismatch {
            expected: g.joint_dim(),
            got: z.len(),
        });
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite point".into()));
    }
    let z = DVector::from_column_slice(z);
    let terms = g
        .decoded()
        .iter()
        .zip(g.weights())
        .map(|(c, w)| Ok(w.ln() + c.log_density(&z)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(log_sum_exp(&terms))
}

/// π(· | s) as an action-space mixture.
#[derive(Debug, Clone)]
pub struct ConditionalGmm {
    pub weights: Vec<f64>,
    pub components: Vec<DecodedGaussian>,
    factors: Vec<CholFactor>,
}

impl ConditionalGmm {
    pub fn log_density(&self, a: &[f64]) -> f64 {
        let a = DVector::from_column_slice(a);
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.components)
            .zip(&self.factors)
            .map(|((w, c), f)| w.ln() + f.log_density(&c.mean, &a))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.components[0].dim());
        for (w, c) in self.weights.iter().zip(&self.components) {
            m += &c.mean * *w;
        }
        m
    }
}

#[derive(Debug, Clone)]
struct ConditionedComponent {
    log_weight: f64,
    state_mean: DVector<f64>,
    state_factor: Option<CholFactor>,
    action_mean: DVector<f64>,
    /// Σ_as Σ_ss⁻¹
    gain: DMatrix<f64>,
    covariance: SpdMatrix,
    factor: CholFactor,
}

/// Per-policy precomputation for repeated conditioning on states.
#[derive(Debug, Clone)]
pub struct StateConditioner {
    state_dim: usize,
    action_dim: usize,
    comps: Vec<ConditionedComponent>,
}

impl StateConditioner {
    pub fn new(g: &GmmParams) -> Result<Self> {
        let ds = g.state_dim();
        let da = g.action_dim();
        let comps = g
            .decoded()
            .into_iter()
            .zip(g.weights())
            .map(|(c, w)| {
                let cov = c.covariance.as_matrix();
                let s_ss = cov.view((0, 0), (ds, ds)).clone_owned();
                let s_as = cov.view((ds, 0), (da, ds)).clone_owned();
                let s_aa = cov.view((ds, ds), (da, da)).clone_owned();
                let (state_factor, gain, cond) = if ds == 0 {
                    (None, DMatrix::zeros(da, 0), s_aa)
                } else {
                    let chol = Cholesky::<f64, Dyn>::new(s_ss.clone()).ok_or_else(|| {
                        Error::Degenerate("state marginal covariance not positive definite".into())
                    })?;
                    // gain = Σ_as Σ_ss⁻¹ = (Σ_ss⁻¹ Σ_sa)ᵀ
                    let gain = chol.solve(&s_as.transpose()).transpose();
                    let cond = &s_aa - &gain * s_as.transpose();
                    (Some(CholFactor::new(&s_ss)?), gain, cond)
                };
                let covariance = positive_part(cond, c.covariance.floor());
                let factor = CholFactor::new(covariance.as_matrix())?;
                Ok(ConditionedComponent {
                    log_weight: w.ln(),
                    state_mean: c.mean.rows(0, ds).clone_owned(),
                    state_factor,
                    action_mean: c.mean.rows(ds, da).clone_owned(),
                    gain,
                    covariance,
                    factor,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            state_dim: ds,
            action_dim: da,
            comps,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn conditional_log_weights(&self, s: &DVector<f64>) -> Vec<f64> {
        let mut lw: Vec<f64> = self
            .comps
            .iter()
            .map(|c| {
                c.log_weight
                    + c.state_factor
                        .as_ref()
                        .map_or(0.0, |f| f.log_density(&c.state_mean, s))
            })
            .collect();
        let lse = log_sum_exp(&lw);
        if !lse.is_finite() {
            log::warn!("state marginal likelihoods underflowed; using prior mixture weights");
            return self.comps.iter().map(|c| c.log_weight).collect();
        }
        for x in &mut lw {
            *x -= lse;
        }
        lw
    }

    fn check_state(&self, s: &[f64]) -> Result<DVector<f64>> {
        if s.len() != self.state_dim {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim,
                got: s.len(),
            });
        }
        if s.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite state".into()));
        }
        Ok(DVector::from_column_slice(s))
    }

    fn conditional_mean(&self, c: &ConditionedComponent, s: &DVector<f64>) -> DVector<f64> {
        if self.state_dim == 0 {
            c.action_mean.clone()
        } else {
            &c.action_mean + &c.gain * (s - &c.state_mean)
        }
    }

    pub fn condition(&self, s: &[f64]) -> Result<ConditionalGmm> {
        let s = self.check_state(s)?;
        let lw = self.conditional_log_weights(&s);
        let total: f64 = lw.iter().map(|x| x.exp()).sum();
        let weights = lw.iter().map(|x| x.exp() / total).collect();
        let components = self
            .comps
            .iter()
            .map(|c| DecodedGaussian {
                mean: self.conditional_mean(c, &s),
                covariance: c.covariance.clone(),
            })
            .collect();
        Ok(ConditionalGmm {
            weights,
            components,
            factors: self.comps.iter().map(|c| c.factor.clone()).collect(),
        })
    }

    /// `ln π(a | s)`.
    pub fn log_prob(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        let s = self.check_state(s)?;
        if a.len() != self.action_dim {
            return Err(Error::DimensionMismatch {
                expected: self.action_dim,
                got: a.len(),
            });
        }
        let a = DVector::from_column_slice(a);
        let lw = self.conditional_log_weights(&s);
        let terms: Vec<f64> = self
            .comps
            .iter()
            .zip(&lw)
            .map(|(c, w)| w + c.factor.log_density(&self.conditional_mean(c, &s), &a))
            .collect();
        Ok(log_sum_exp(&terms))
    }
}

/// Exact Gaussian-mixture conditional π(a | s) of the joint model.
pub fn condition_on_state(g: &GmmParams, s: &[f64]) -> Result<ConditionalGmm> {
    StateConditioner::new(g)?.condition(s)
}

/// Draws a component by its weight, then `mean + L·z` with `L` the Cholesky
/// factor of its covariance.
pub fn sample_action(c: &ConditionalGmm, rng: &mut impl Rng) -> DVector<f64> {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut idx = c.weights.len() - 1;
    for (i, w) in c.weights.iter().enumerate() {
        acc += w;
        if u < acc {
            idx = i;
            break;
        }
    }
    c.factors[idx].sample(&c.components[idx].mean, rng)
}
