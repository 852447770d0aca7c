//! Importance-weighted policy surrogate, proximity penalties and the policy
//! improvement lower bound.
//!
//! The surrogate is
//!
//! ```text
//!     g(θ′) = −(1/N) Σ_t  π_θ′(a_t | s_t) / π_θ(a_t | s_t) · Â_t
//! ```
//!
//! with `π_θ(a_t | s_t)` cached at collection time. The policy is the exact
//! conditional `p(s, a) / p(s)` of a joint mixture, so its gradient with
//! respect to component `i` is the joint responsibility times the component
//! score minus the state-marginal responsibility times the marginal score.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::envs::Trajectory;
use crate::error::{Error, Result};
use crate::gmm_model::{log_sum_exp, GmmParams, GmmTangent, StateConditioner};
use crate::ot_distance::{gmm_tv_bound, gmm_w2_sq, gmm_w2_sq_grad};
use crate::sym_linalg::symmetrize;

/// Samples whose cached log-density is below this are dropped.
pub const MIN_OLD_LOG_PROB: f64 = -700.0;
/// Largest tolerated fraction of dropped samples.
pub const MAX_DROP_FRACTION: f64 = 0.1;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    /// Action as sampled, before any clamping by the environment.
    pub action: Vec<f64>,
    /// `ln π(action | state)` under the policy that collected it.
    pub log_prob: f64,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Pooled transitions of one iteration with their advantage estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    transitions: Vec<Transition>,
    advantages: Vec<f64>,
    returns: Vec<f64>,
    episode_lengths: Vec<usize>,
    gamma: f64,
}

impl Batch {
    /// A batch from explicit advantages; returns are left at zero and the
    /// whole batch counts as one episode.
    pub fn new(transitions: Vec<Transition>, advantages: Vec<f64>, gamma: f64) -> Result<Self> {
        if transitions.len() != advantages.len() {
            return Err(Error::DimensionMismatch {
                expected: transitions.len(),
                got: advantages.len(),
            });
        }
        if advantages.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidInput("non-finite advantage".into()));
        }
        check_gamma(gamma)?;
        let n = transitions.len();
        Ok(Self {
            transitions,
            advantages,
            returns: vec![0.0; n],
            episode_lengths: vec![n],
            gamma,
        })
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn advantages(&self) -> &[f64] {
        &self.advantages
    }

    /// Discounted returns-to-go, per transition.
    pub fn returns(&self) -> &[f64] {
        &self.returns
    }

    pub fn episode_lengths(&self) -> &[usize] {
        &self.episode_lengths
    }

    pub fn old_log_probs(&self) -> impl Iterator<Item = f64> + '_ {
        self.transitions.iter().map(|t| t.log_prob)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidInput(format!("discount must be in (0, 1], got {gamma}")));
    }
    Ok(())
}

/// Reverse accumulation `G_t = r_t + γ G_{t+1}` within one episode.
pub fn returns_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *o = acc;
    }
    out
}

fn baseline_features(s: &[f64]) -> impl Iterator<Item = f64> + '_ {
    std::iter::once(1.0)
        .chain(s.iter().copied())
        .chain(s.iter().map(|x| x * x))
}

/// Least-squares fit of `targets` on `[1, s, s⊙s]`, evaluated at the same
/// states. Rank-deficient feature sets are handled by the pseudo-inverse.
pub fn fit_baseline(states: &[&[f64]], targets: &[f64]) -> Result<Vec<f64>> {
    let n = states.len();
    let p = 1 + 2 * states.first().map_or(0, |s| s.len());
    let x = DMatrix::from_row_iterator(n, p, states.iter().flat_map(|s| baseline_features(s)));
    let y = DVector::from_column_slice(targets);
    let coef = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-10)
        .map_err(|e| Error::Degenerate(format!("baseline fit failed: {e}")))?;
    Ok((x * coef).iter().copied().collect())
}

/// Shifts to mean 0 and scales to unit standard deviation; an all-equal
/// input becomes all zeros.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    for a in adv.iter_mut() {
        *a -= mean;
    }
    let sd = (adv.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
    if sd > 1e-12 {
        for a in adv.iter_mut() {
            *a /= sd;
        }
    } else {
        adv.fill(0.0);
    }
}

/// Returns-to-go minus the fitted baseline, before normalization.
pub fn raw_advantages(trajectories: &[Trajectory], gamma: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let returns: Vec<f64> = trajectories
        .iter()
        .flat_map(|t| {
            let r: Vec<f64> = t.transitions.iter().map(|x| x.reward).collect();
            returns_to_go(&r, gamma)
        })
        .collect();
    let states: Vec<&[f64]> = trajectories
        .iter()
        .flat_map(|t| t.transitions.iter().map(|x| x.state.as_slice()))
        .collect();
    let baseline = fit_baseline(&states, &returns)?;
    let adv = returns.iter().zip(&baseline).map(|(g, b)| g - b).collect();
    Ok((returns, adv))
}

/// Pools trajectories into a batch with normalized advantages.
pub fn estimate_advantages(trajectories: &[Trajectory], gamma: f64) -> Result<Batch> {
    check_gamma(gamma)?;
    let total: usize = trajectories.iter().map(Trajectory::len).sum();
    if total < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 transitions, got {total}"
        )));
    }
    let (returns, mut advantages) = raw_advantages(trajectories, gamma)?;
    normalize_advantages(&mut advantages);
    Ok(Batch {
        transitions: trajectories
            .iter()
            .flat_map(|t| t.transitions.iter().cloned())
            .collect(),
        advantages,
        returns,
        episode_lengths: trajectories.iter().map(Trajectory::len).collect(),
        gamma,
    })
}

/// Indices of samples with a usable cached density.
fn kept_samples(batch: &Batch) -> Result<Vec<usize>> {
    let kept: Vec<usize> = batch
        .transitions
        .iter()
        .enumerate()
        .filter(|(_, t)| t.log_prob.is_finite() && t.log_prob >= MIN_OLD_LOG_PROB)
        .map(|(i, _)| i)
        .collect();
    let total = batch.len();
    let dropped = total - kept.len();
    if dropped > 0 {
        log::warn!("dropped {dropped} of {total} samples with underflowing old density");
    }
    if total == 0 || dropped as f64 > MAX_DROP_FRACTION * total as f64 {
        return Err(Error::DegenerateBatch { dropped, total });
    }
    Ok(kept)
}

fn neumaier_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() {
            (sum - t) + x
        } else {
            (x - t) + sum
        };
        sum = t;
    }
    sum + comp
}

/// `−(1/N) Σ_t ratio_t · Â_t` over samples with a usable old density.
pub fn surrogate_value(theta_new: &GmmParams, batch: &Batch) -> Result<f64> {
    let kept = kept_samples(batch)?;
    let cond = StateConditioner::new(theta_new)?;
    let terms = kept
        .par_iter()
        .map(|&i| {
            let t = &batch.transitions[i];
            let lp = cond.log_prob(&t.state, &t.action)?;
            Ok((lp - t.log_prob).exp() * batch.advantages[i])
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(-neumaier_sum(terms) / kept.len() as f64)
}

/// Cholesky data for `ln N(z; μ(S), Σ(S))` as a function of an augmented
/// matrix `S`, through `N([z;1]; 0, S) = N(1; 0, c) · N(z; b/c, A − bbᵀ/c)`.
struct AugmentedScore {
    chol: Cholesky<f64, Dyn>,
    inv: DMatrix<f64>,
    log_norm: f64,
    /// `1/(2c) − 1/(2c²)`, the derivative of the `c`-only terms.
    corner: f64,
}

impl AugmentedScore {
    fn new(s: DMatrix<f64>) -> Result<Self> {
        let n = s.nrows();
        let c = s[(n - 1, n - 1)];
        let chol = Cholesky::<f64, Dyn>::new(s)
            .ok_or_else(|| Error::Degenerate("augmented component not positive definite".into()))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let log_norm = -0.5 * ((n as f64 - 1.0) * LN_2PI + log_det) + 0.5 * c.ln() + 0.5 / c;
        Ok(Self {
            inv: chol.inverse(),
            chol,
            log_norm,
            corner: 0.5 / c - 0.5 / (c * c),
        })
    }

    /// `ln N` and `y = S⁻¹ [z; 1]`.
    fn eval(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let y = self.chol.solve(x);
        (self.log_norm - 0.5 * x.dot(&y), y)
    }

    /// `½(−S⁻¹·w + Y) + corner·w·e_nn` for accumulated weight `w` and
    /// weighted outer products `Y = Σ w y yᵀ`.
    fn gradient(&self, weight: f64, outer: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.inv.nrows();
        let mut g = (outer - &self.inv * weight) * 0.5;
        g[(n - 1, n - 1)] += self.corner * weight;
        g
    }
}

/// Score machinery for `ln π(a | s) = ln Σ α_i f_i(s, a) − ln Σ α_i m_i(s)`.
struct PolicyScore {
    state_dim: usize,
    log_weights: Vec<f64>,
    joint: Vec<AugmentedScore>,
    /// `None` when there is no state.
    marginal: Vec<Option<AugmentedScore>>,
    /// Indices of the state block and the augmented corner.
    marginal_index: Vec<usize>,
}

struct SampleScore {
    log_prob: f64,
    joint_resp: Vec<f64>,
    joint_y: Vec<DVector<f64>>,
    marg_resp: Vec<f64>,
    marg_y: Vec<DVector<f64>>,
}

impl PolicyScore {
    fn new(g: &GmmParams) -> Result<Self> {
        let ds = g.state_dim();
        let n = g.joint_dim() + 1;
        let marginal_index: Vec<usize> = (0..ds).chain(std::iter::once(n - 1)).collect();
        let joint = g
            .components()
            .iter()
            .map(|c| AugmentedScore::new(c.as_matrix().clone()))
            .collect::<Result<Vec<_>>>()?;
        let marginal = g
            .components()
            .iter()
            .map(|c| {
                if ds == 0 {
                    return Ok(None);
                }
                let m = c.as_matrix().select_rows(&marginal_index).select_columns(&marginal_index);
                AugmentedScore::new(m).map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            state_dim: ds,
            log_weights: g.weights().iter().map(|w| w.ln()).collect(),
            joint,
            marginal,
            marginal_index,
        })
    }

    fn responsibilities(log_terms: &[f64]) -> (f64, Vec<f64>) {
        let lse = log_sum_exp(log_terms);
        (lse, log_terms.iter().map(|t| (t - lse).exp()).collect())
    }

    fn score(&self, s: &[f64], a: &[f64]) -> SampleScore {
        let x = DVector::from_iterator(
            s.len() + a.len() + 1,
            s.iter().chain(a).copied().chain(std::iter::once(1.0)),
        );
        let (lj, joint_y): (Vec<f64>, Vec<DVector<f64>>) = self
            .joint
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| {
                let (l, y) = c.eval(&x);
                (lw + l, y)
            })
            .unzip();
        let (joint_lse, joint_resp) = Self::responsibilities(&lj);
        if self.state_dim == 0 {
            return SampleScore {
                log_prob: joint_lse,
                joint_resp,
                joint_y,
                marg_resp: self.log_weights.iter().map(|w| w.exp()).collect(),
                marg_y: Vec::new(),
            };
        }
        let xm = DVector::from_iterator(self.state_dim + 1, s.iter().copied().chain(std::iter::once(1.0)));
        let (lm, marg_y): (Vec<f64>, Vec<DVector<f64>>) = self
            .marginal
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| {
                let (l, y) = c.as_ref().expect("state block present").eval(&xm);
                (lw + l, y)
            })
            .unzip();
        let (marg_lse, marg_resp) = Self::responsibilities(&lm);
        SampleScore {
            log_prob: joint_lse - marg_lse,
            joint_resp,
            joint_y,
            marg_resp,
            marg_y,
        }
    }
}

/// Weighted sums of per-sample scores, merged chunk by chunk.
#[derive(Clone)]
struct ScoreSums {
    joint_w: Vec<f64>,
    joint_outer: Vec<DMatrix<f64>>,
    marg_w: Vec<f64>,
    marg_outer: Vec<DMatrix<f64>>,
    eta: Vec<f64>,
}

impl ScoreSums {
    fn zeros(k: usize, n: usize, nm: usize) -> Self {
        Self {
            joint_w: vec![0.0; k],
            joint_outer: vec![DMatrix::zeros(n, n); k],
            marg_w: vec![0.0; k],
            marg_outer: vec![DMatrix::zeros(nm, nm); k],
            eta: vec![0.0; k.saturating_sub(1)],
        }
    }

    fn add(&mut self, w: f64, sc: &SampleScore) {
        for i in 0..self.joint_w.len() {
            let wj = w * sc.joint_resp[i];
            self.joint_w[i] += wj;
            self.joint_outer[i].ger(wj, &sc.joint_y[i], &sc.joint_y[i], 1.0);
            if let (Some(rm), Some(y)) = (sc.marg_resp.get(i), sc.marg_y.get(i)) {
                let wm = w * rm;
                self.marg_w[i] += wm;
                self.marg_outer[i].ger(wm, y, y, 1.0);
            }
        }
        for (m, e) in self.eta.iter_mut().enumerate() {
            *e += w * (sc.joint_resp[m] - sc.marg_resp[m]);
        }
    }

    fn merge(&mut self, other: &ScoreSums) {
        for i in 0..self.joint_w.len() {
            self.joint_w[i] += other.joint_w[i];
            self.joint_outer[i] += &other.joint_outer[i];
            self.marg_w[i] += other.marg_w[i];
            self.marg_outer[i] += &other.marg_outer[i];
        }
        for (a, b) in self.eta.iter_mut().zip(&other.eta) {
            *a += b;
        }
    }
}

/// `ln π(a | s)` and its gradient with respect to every component and free
/// logit of `g`.
pub fn log_policy_grad(g: &GmmParams, s: &[f64], a: &[f64]) -> Result<(f64, GmmTangent)> {
    let score = PolicyScore::new(g)?;
    let sc = score.score(s, a);
    let mut sums = ScoreSums::zeros(g.k(), g.joint_dim() + 1, g.state_dim() + 1);
    sums.add(1.0, &sc);
    Ok((sc.log_prob, assemble(&score, &sums)))
}

fn assemble(score: &PolicyScore, sums: &ScoreSums) -> GmmTangent {
    let components = (0..score.joint.len())
        .map(|i| {
            let mut g = score.joint[i].gradient(sums.joint_w[i], &sums.joint_outer[i]);
            if let Some(m) = &score.marginal[i] {
                let gm = m.gradient(sums.marg_w[i], &sums.marg_outer[i]);
                for (p, &ip) in score.marginal_index.iter().enumerate() {
                    for (q, &iq) in score.marginal_index.iter().enumerate() {
                        g[(ip, iq)] -= gm[(p, q)];
                    }
                }
            }
            symmetrize(&g)
        })
        .collect();
    GmmTangent {
        components,
        free_eta: sums.eta.clone(),
    }
}

/// Value and gradient of [`surrogate_value`] in one pass. The ratio uses
/// the joint/marginal form of the new density, which agrees with the
/// conditioned form to rounding.
pub fn surrogate_value_and_grad(theta_new: &GmmParams, batch: &Batch) -> Result<(f64, GmmTangent)> {
    let kept = kept_samples(batch)?;
    let score = PolicyScore::new(theta_new)?;
    let n = kept.len() as f64;
    let (k, dim, dm) = (theta_new.k(), theta_new.joint_dim() + 1, theta_new.state_dim() + 1);
    let partials: Vec<(f64, ScoreSums)> = kept
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut sums = ScoreSums::zeros(k, dim, dm);
            let mut terms = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let t = &batch.transitions[i];
                let sc = score.score(&t.state, &t.action);
                let ratio_adv = (sc.log_prob - t.log_prob).exp() * batch.advantages[i];
                terms.push(ratio_adv);
                sums.add(-ratio_adv / n, &sc);
            }
            (neumaier_sum(terms), sums)
        })
        .collect();
    let mut total = ScoreSums::zeros(k, dim, dm);
    for (_, s) in &partials {
        total.merge(s);
    }
    let value = -neumaier_sum(partials.iter().map(|(v, _)| *v)) / n;
    Ok((value, assemble(&score, &total)))
}

/// `∇ surrogate_value`; every matrix part is symmetric.
pub fn surrogate_grad(theta_new: &GmmParams, batch: &Batch) -> Result<GmmTangent> {
    Ok(surrogate_value_and_grad(theta_new, batch)?.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProximityKind {
    Euclidean,
    Wasserstein,
}

impl std::str::FromStr for ProximityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Self::Euclidean),
            "wasserstein" => Ok(Self::Wasserstein),
            other => Err(Error::Config(format!(
                "unknown proximity {other:?} (expected euclidean or wasserstein)"
            ))),
        }
    }
}

impl ProximityKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Euclidean => "euclidean",
            Self::Wasserstein => "wasserstein",
        }
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidInput(format!("beta must be positive, got {beta}")));
    }
    Ok(())
}

fn check_shapes(a: &GmmParams, b: &GmmParams) -> Result<()> {
    if a.state_dim() != b.state_dim() || a.action_dim() != b.action_dim() || a.k() != b.k() {
        return Err(Error::InvalidInput(format!(
            "mixture shapes differ: ({}, {}, K={}) vs ({}, {}, K={})",
            a.state_dim(),
            a.action_dim(),
            a.k(),
            b.state_dim(),
            b.action_dim(),
            b.k()
        )));
    }
    Ok(())
}

/// `(β/2) d²(θ′, θ)`: squared Frobenius distance over components plus
/// squared distance of free logits, or the mixture W2².
pub fn phi_value(theta_new: &GmmParams, theta_old: &GmmParams, beta: f64, kind: ProximityKind) -> Result<f64> {
    check_beta(beta)?;
    check_shapes(theta_new, theta_old)?;
    match kind {
        ProximityKind::Euclidean => {
            let comps: f64 = theta_new
                .components()
                .iter()
                .zip(theta_old.components())
                .map(|(a, b)| (a.as_matrix() - b.as_matrix()).norm_squared())
                .sum();
            let eta: f64 = theta_new
                .free_eta()
                .iter()
                .zip(theta_old.free_eta())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            Ok(0.5 * beta * (comps + eta))
        }
        ProximityKind::Wasserstein => Ok(0.5 * beta * gmm_w2_sq(theta_new, theta_old)?),
    }
}

/// Gradient of [`phi_value`] in `θ′`. The Wasserstein form holds the optimal
/// plan fixed.
pub fn phi_grad(theta_new: &GmmParams, theta_old: &GmmParams, beta: f64, kind: ProximityKind) -> Result<GmmTangent> {
    check_beta(beta)?;
    check_shapes(theta_new, theta_old)?;
    match kind {
        ProximityKind::Euclidean => Ok(GmmTangent {
            components: theta_new
                .components()
                .iter()
                .zip(theta_old.components())
                .map(|(a, b)| (a.as_matrix() - b.as_matrix()) * beta)
                .collect(),
            free_eta: theta_new
                .free_eta()
                .iter()
                .zip(theta_old.free_eta())
                .map(|(a, b)| beta * (a - b))
                .collect(),
        }),
        ProximityKind::Wasserstein => {
            let (_, mut g) = gmm_w2_sq_grad(theta_new, theta_old)?;
            g.scale(0.5 * beta);
            Ok(g)
        }
    }
}

/// Terms of the policy improvement lower bound. `eps` and `m` are sample
/// maxima over the batch; distance terms use the joint mixtures directly
/// rather than state-weighted conditional distances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub eps: f64,
    pub m: f64,
    pub btv_new_vs_tilde: f64,
    pub btv_tilde_vs_old: f64,
    pub dw2_tilde_vs_old: f64,
    pub lower_bound: f64,
}

/// `−2 B_TV(π′, π̃) M + D_W2(π̃, π)/β − 2γε/(1−γ) · B_TV(π̃, π)`.
pub fn improvement_bound(
    pi_new: &GmmParams,
    pi_tilde: &GmmParams,
    pi_old: &GmmParams,
    batch: &Batch,
    beta: f64,
    gamma: f64,
) -> Result<BoundReport> {
    check_beta(beta)?;
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidInput(format!("discount must be in (0, 1), got {gamma}")));
    }
    let cond = StateConditioner::new(pi_tilde)?;
    let mut eps: f64 = 0.0;
    let mut m: f64 = 0.0;
    for (t, adv) in batch.transitions.iter().zip(&batch.advantages) {
        m = m.max(adv.abs());
        if t.log_prob.is_finite() && t.log_prob >= MIN_OLD_LOG_PROB {
            let ratio = (cond.log_prob(&t.state, &t.action)? - t.log_prob).exp();
            eps = eps.max((ratio * adv).abs());
        }
    }
    let btv_new_vs_tilde = gmm_tv_bound(pi_new, pi_tilde)?;
    let btv_tilde_vs_old = gmm_tv_bound(pi_tilde, pi_old)?;
    let dw2_tilde_vs_old = gmm_w2_sq(pi_tilde, pi_old)?;
    let lower_bound = -2.0 * btv_new_vs_tilde * m + dw2_tilde_vs_old / beta
        - 2.0 * gamma * eps / (1.0 - gamma) * btv_tilde_vs_old;
    Ok(BoundReport {
        eps,
        m,
        btv_new_vs_tilde,
        btv_tilde_vs_old,
        dw2_tilde_vs_old,
        lower_bound,
    })
}
