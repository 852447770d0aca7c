//! Outer training loop: collect rollouts, estimate advantages, run a few
//! proximal steps on `g + φ`, and keep the candidate only if it beats the
//! zero anchor of the current policy.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint;
use crate::envs::{rollout, EnvKind, EnvSpec, Trajectory};
use crate::error::{Error, Result};
use crate::gmm_model::{GmmParams, GmmTangent};
use crate::ot_distance::gmm_w2_sq;
use crate::riemannian_prox::{
    check_descent, estimate_lipschitz, optimize, ManifoldPoint, Objective, ProxConfig, Tangent,
};
use crate::sym_linalg::SpdMatrix;
use crate::surrogate::{
    estimate_advantages, phi_grad, phi_value, surrogate_value, surrogate_value_and_grad, Batch,
    ProximityKind,
};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "policy.gmm";
const LIPSCHITZ_RADIUS: f64 = 1e-3;
pub const METRICS_HEADER: &str = "iter,mean_reward,surrogate,phi,w2sq,descent_ok,seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub env: EnvKind,
    pub k: usize,
    pub beta: f64,
    pub gamma: f64,
    pub proximity: ProximityKind,
    pub episodes_per_iter: usize,
    pub outer_iters: usize,
    pub inner_prox_iters: usize,
    pub seed: u64,
    pub floor: f64,
    /// Episode length; `None` keeps the environment default.
    pub horizon: Option<usize>,
    /// Fixed inner step size; `None` uses `1 / (L̂ + β)` with `L̂` probed.
    pub step_size: Option<f64>,
    /// Variance of each joint coordinate in the initial components.
    pub init_variance: f64,
    /// Write wall-clock seconds to the metrics (otherwise 0, keeping the CSV
    /// reproducible).
    pub record_time: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::Pointmass,
            k: 5,
            beta: 1.0,
            gamma: 0.99,
            proximity: ProximityKind::Euclidean,
            episodes_per_iter: 20,
            outer_iters: 40,
            inner_prox_iters: 10,
            seed: 0,
            floor: 1e-8,
            horizon: None,
            step_size: None,
            init_variance: 0.5,
            record_time: false,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.episodes_per_iter == 0 {
            return Err(Error::Config("episodes_per_iter must be at least 1".into()));
        }
        if self.inner_prox_iters == 0 {
            return Err(Error::Config("inner_prox_iters must be at least 1".into()));
        }
        if self.horizon == Some(0) {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        positive("beta", self.beta)?;
        positive("floor", self.floor)?;
        positive("init_variance", self.init_variance)?;
        if let Some(a) = self.step_size {
            positive("step_size", a)?;
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must be in (0, 1), got {}", self.gamma)));
        }
        Ok(())
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        let spec = EnvSpec::from_kind(self.env);
        match self.horizon {
            Some(h) => spec.with_horizon(h),
            None => Ok(spec),
        }
    }

    /// Seeded initial policy: means uniform over the environment's joint box.
    pub fn initial_policy(&self) -> Result<GmmParams> {
        let env = self.env_spec()?;
        let (low, high) = env.joint_box();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, u64::MAX, 0));
        let g = GmmParams::initialize(env.state_dim, env.action_dim, self.k, &low, &high, self.floor, &mut rng)?;
        let gaussians: Vec<_> = g
            .decoded()
            .into_iter()
            .map(|mut c| {
                let d = c.dim();
                c.covariance = SpdMatrix::from_matrix(
                    DMatrix::identity(d, d) * self.init_variance,
                    self.floor,
                )?;
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        GmmParams::from_gaussians(env.state_dim, env.action_dim, &g.weights(), &gaussians)
    }
}

/// SplitMix64 finalizer over `(seed, iteration, episode)`.
pub fn mix_seed(seed: u64, iter: u64, episode: u64) -> u64 {
    let mut z = seed
        .wrapping_add(iter.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(episode.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub mean_reward: f64,
    pub surrogate: f64,
    pub phi: f64,
    pub w2sq: f64,
    pub descent_ok: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainMetrics {
    pub rows: Vec<MetricsRow>,
}

impl TrainMetrics {
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{METRICS_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{:e},{:e},{:e},{:e},{},{:.3}",
                r.iter, r.mean_reward, r.surrogate, r.phi, r.w2sq, r.descent_ok, r.seconds
            )?;
        }
        Ok(())
    }

    pub fn mean_rewards(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mean_reward).collect()
    }
}

/// What happened in one outer iteration, reported to the observer.
#[derive(Debug)]
pub struct IterationEvent<'a> {
    pub iter: usize,
    pub before: &'a GmmParams,
    pub after: &'a GmmParams,
    /// `g + φ` at the optimizer's final point, if it finished.
    pub combined: Option<f64>,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: GmmParams,
    pub metrics: TrainMetrics,
}

/// The per-iteration objective `g + φ` over (components, free logits).
pub struct PolicyObjective<'a> {
    pub old: &'a GmmParams,
    pub batch: &'a Batch,
    pub beta: f64,
    pub proximity: ProximityKind,
}

pub fn to_point(g: &GmmParams) -> ManifoldPoint {
    ManifoldPoint::new(
        g.components().to_vec(),
        vec![DVector::from_column_slice(g.free_eta())],
    )
}

pub fn from_point(template: &GmmParams, p: &ManifoldPoint) -> Result<GmmParams> {
    template.with_parts(p.vectors[0].as_slice(), p.spd.clone())
}

fn to_tangent(t: GmmTangent) -> Tangent {
    Tangent {
        spd: t.components,
        vectors: vec![DVector::from_vec(t.free_eta)],
    }
}

impl PolicyObjective<'_> {
    fn policy(&self, p: &ManifoldPoint) -> Result<GmmParams> {
        from_point(self.old, p)
    }
}

impl Objective for PolicyObjective<'_> {
    fn g_value(&self, p: &ManifoldPoint) -> Result<f64> {
        surrogate_value(&self.policy(p)?, self.batch)
    }

    fn g_grad(&self, p: &ManifoldPoint) -> Result<Tangent> {
        Ok(to_tangent(surrogate_value_and_grad(&self.policy(p)?, self.batch)?.1))
    }

    fn phi_value(&self, p: &ManifoldPoint) -> Result<f64> {
        phi_value(&self.policy(p)?, self.old, self.beta, self.proximity)
    }

    fn phi_grad(&self, p: &ManifoldPoint) -> Result<Option<Tangent>> {
        Ok(Some(to_tangent(phi_grad(&self.policy(p)?, self.old, self.beta, self.proximity)?)))
    }
}

pub fn collect(policy: &GmmParams, env: &EnvSpec, seed: u64, iter: usize, episodes: usize) -> Result<Vec<Trajectory>> {
    (0..episodes)
        .into_par_iter()
        .map(|ep| rollout(policy, env, mix_seed(seed, iter as u64, ep as u64)))
        .collect()
}

/// One outer iteration's optimizer result: the candidate, its combined
/// objective and whether every recorded step met the descent inequality.
fn improve(cfg: &TrainConfig, policy: &GmmParams, batch: &Batch, iter: usize) -> Result<Option<(GmmParams, f64, bool)>> {
    let obj = PolicyObjective {
        old: policy,
        batch,
        beta: cfg.beta,
        proximity: cfg.proximity,
    };
    let start = to_point(policy);
    let alpha = match cfg.step_size {
        Some(a) => a,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, iter as u64, u64::MAX));
            let l = estimate_lipschitz(&obj, &start, 20, LIPSCHITZ_RADIUS, &mut rng)?;
            1.0 / (l + cfg.beta)
        }
    };
    let prox = ProxConfig {
        alpha: Some(alpha),
        max_iters: cfg.inner_prox_iters,
        ..ProxConfig::default()
    };
    match optimize(start, &obj, &prox) {
        Ok((p, trace)) => {
            let ok = check_descent(&trace);
            log::debug!(
                "iteration {iter}: alpha {alpha:.3e}, {} steps, {} rejections, f {:?}",
                trace.records.len(),
                trace.rejections,
                trace.final_value()
            );
            if !ok {
                log::info!("iteration {iter}: descent inequality not met by the inexact step");
            }
            let combined = trace.final_value().unwrap_or(0.0);
            Ok(Some((from_point(policy, &p)?, combined, ok)))
        }
        Err(Error::Stalled { halvings, .. }) => {
            log::warn!("iteration {iter}: optimizer stalled after {halvings} halvings; keeping policy");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(cfg, |_| {})
}

/// [`train`] with a hook called after every outer iteration.
pub fn train_observed(cfg: &TrainConfig, mut observer: impl FnMut(&IterationEvent<'_>)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let env = cfg.env_spec()?;
    let mut policy = cfg.initial_policy()?;
    let mut metrics = TrainMetrics::default();
    let started = Instant::now();

    for iter in 0..cfg.outer_iters {
        let at = |e: Error| Error::AtIteration {
            iter,
            source: Box::new(e),
        };
        let trajs = collect(&policy, &env, cfg.seed, iter, cfg.episodes_per_iter).map_err(at)?;
        let mean_reward = trajs.iter().map(|t| t.total_reward).sum::<f64>() / trajs.len() as f64;
        let batch = estimate_advantages(&trajs, cfg.gamma).map_err(at)?;
        let result = improve(cfg, &policy, &batch, iter).map_err(at)?;

        let (next, combined, descent_ok) = match result {
            Some((cand, combined, ok)) if combined < 0.0 => (cand, Some(combined), ok),
            Some((_, combined, ok)) => (policy.clone(), Some(combined), ok),
            None => (policy.clone(), None, false),
        };
        let accepted = matches!(combined, Some(c) if c < 0.0);
        let surrogate = surrogate_value(&next, &batch).map_err(at)?;
        let phi = phi_value(&next, &policy, cfg.beta, cfg.proximity).map_err(at)?;
        let w2sq = gmm_w2_sq(&next, &policy).map_err(at)?;
        observer(&IterationEvent {
            iter,
            before: &policy,
            after: &next,
            combined,
            accepted,
        });
        log::debug!("iter {iter}: reward {mean_reward:.3} surrogate {surrogate:.4e} accepted {accepted}");
        metrics.rows.push(MetricsRow {
            iter,
            mean_reward,
            surrogate,
            phi,
            w2sq,
            descent_ok,
            seconds: if cfg.record_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
        policy = next;
    }

    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir)?;
        let mut f = fs::File::create(dir.join(METRICS_FILE))?;
        metrics.write_csv(&mut f)?;
        checkpoint::write(&dir.join(CHECKPOINT_FILE), &policy)?;
    }
    Ok(TrainOutcome { policy, metrics })
}

/// Mean and population standard deviation of episode reward.
pub fn evaluate(policy: &GmmParams, env: &EnvSpec, episodes: usize, seed: u64) -> Result<(f64, f64)> {
    if episodes == 0 {
        return Err(Error::InvalidInput("need at least one episode".into()));
    }
    let rewards: Vec<f64> = (0..episodes)
        .into_par_iter()
        .map(|ep| rollout(policy, env, mix_seed(seed, u64::MAX - 1, ep as u64)).map(|t| t.total_reward))
        .collect::<Result<_>>()?;
    let n = episodes as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm_model::DecodedGaussian;
    use crate::ot_distance::gaussian;

    fn small(env: EnvKind) -> TrainConfig {
        TrainConfig {
            env,
            k: 2,
            episodes_per_iter: 4,
            outer_iters: 3,
            inner_prox_iters: 3,
            horizon: Some(30),
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_iterations_return_the_initial_policy() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            outer_iters: 0,
            out_dir: Some(dir.path().to_path_buf()),
            ..small(EnvKind::Pointmass)
        };
        let out = train(&cfg).unwrap();
        assert!(out.metrics.rows.is_empty());
        assert_eq!(out.policy, cfg.initial_policy().unwrap());
        assert_eq!(checkpoint::read(&dir.path().join(CHECKPOINT_FILE)).unwrap(), out.policy);
        let csv = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(csv, format!("{METRICS_HEADER}\n"));
    }

    #[test]
    fn runs_are_deterministic_and_guarded() {
        for kind in [ProximityKind::Euclidean, ProximityKind::Wasserstein] {
            let cfg = TrainConfig {
                proximity: kind,
                ..small(EnvKind::Pointmass)
            };
            let mut events = Vec::new();
            let a = train_observed(&cfg, |e| {
                events.push((e.accepted, e.combined, e.before.clone(), e.after.clone()));
            })
            .unwrap();
            let b = train(&cfg).unwrap();
            assert_eq!(a.metrics, b.metrics);
            assert_eq!(a.policy, b.policy);
            assert_eq!(a.metrics.rows.len(), 3);
            for (accepted, combined, before, after) in events {
                if accepted {
                    assert!(combined.unwrap() <= 0.0);
                } else {
                    assert_eq!(before, after);
                }
                assert!(after.is_valid());
            }
            for r in &a.metrics.rows {
                assert!(r.mean_reward.is_finite() && r.surrogate.is_finite());
                assert!(r.phi.is_finite() && r.w2sq.is_finite());
            }
        }
    }

    #[test]
    fn huge_beta_barely_moves() {
        let cfg = TrainConfig {
            beta: 1e9,
            ..small(EnvKind::Pointmass)
        };
        train_observed(&cfg, |e| {
            for (a, b) in e.after.components().iter().zip(e.before.components()) {
                assert!((a.as_matrix() - b.as_matrix()).norm() < 1e-3);
            }
        })
        .unwrap();
    }

    #[test]
    fn pendulum_iteration_runs() {
        let out = train(&small(EnvKind::Pendulum)).unwrap();
        assert_eq!(out.metrics.rows.len(), 3);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = small(EnvKind::Pointmass);
        for bad in [
            TrainConfig { gamma: 1.0, ..base.clone() },
            TrainConfig { beta: 0.0, ..base.clone() },
            TrainConfig { k: 0, ..base.clone() },
            TrainConfig { episodes_per_iter: 0, ..base.clone() },
        ] {
            assert!(matches!(train(&bad), Err(Error::Config(_))));
        }
    }

    /// Joint Gaussian whose conditional mean is `a = −kp·x − kd·v` with
    /// variance `noise`.
    pub(crate) fn pd_policy(kp: f64, kd: f64, noise: f64) -> GmmParams {
        let s_cov = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]);
        let gain = DMatrix::from_row_slice(1, 2, &[-kp, -kd]);
        let mut cov = DMatrix::zeros(3, 3);
        cov.view_mut((0, 0), (2, 2)).copy_from(&s_cov);
        let sa = &s_cov * gain.transpose();
        cov.view_mut((0, 2), (2, 1)).copy_from(&sa);
        cov.view_mut((2, 0), (1, 2)).copy_from(&sa.transpose());
        cov[(2, 2)] = (&gain * &s_cov * gain.transpose())[(0, 0)] + noise;
        let c: DecodedGaussian = gaussian(&[0.0, 0.0, 0.0], cov, 1e-10).unwrap();
        GmmParams::from_gaussians(2, 1, &[1.0], &[c]).unwrap()
    }

    #[test]
    fn evaluate_cases() {
        let env = EnvSpec::pointmass();
        let p = pd_policy(1.0, 1.0, 1e-6);
        let (mean, sd) = evaluate(&p, &env, 1, 3).unwrap();
        assert_eq!(sd, 0.0);
        let t = rollout(&p, &env, mix_seed(3, u64::MAX - 1, 0)).unwrap();
        assert_eq!(mean, t.total_reward);
        assert_eq!(evaluate(&p, &env, 10, 4).unwrap(), evaluate(&p, &env, 10, 4).unwrap());
        let (good, _) = evaluate(&pd_policy(4.0, 3.0, 1e-6), &env, 10, 4).unwrap();
        assert!(good > -5.0, "{good}");
    }
}
