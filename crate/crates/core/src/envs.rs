//! Two small deterministic control tasks and policy rollouts.
//!
//! Rewards are computed on the state entering a step. Actions outside the
//! bounds are clamped by the environment; trajectories record the action as
//! sampled so that its policy density stays meaningful.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gmm_model::{sample_action, GmmParams, StateConditioner};
use crate::surrogate::Transition;

const PENDULUM_DT: f64 = 0.05;
const PENDULUM_MAX_SPEED: f64 = 8.0;
const PENDULUM_MAX_TORQUE: f64 = 2.0;
const POINTMASS_DT: f64 = 0.1;
const POINTMASS_MAX_FORCE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Pendulum,
    Pointmass,
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pendulum" => Ok(Self::Pendulum),
            "pointmass" => Ok(Self::Pointmass),
            other => Err(Error::Config(format!(
                "unknown environment {other:?} (expected pendulum or pointmass)"
            ))),
        }
    }
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pendulum => "pendulum",
            Self::Pointmass => "pointmass",
        }
    }
}

/// Wraps an angle into `[−π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if t == -PI && theta > 0.0 {
        PI
    } else {
        t
    }
}

/// `(θ, θ̇)` with θ = 0 upright. Returns the next state and the reward of the
/// state entering the step.
pub fn pendulum_step(state: [f64; 2], torque: f64) -> ([f64; 2], f64) {
    let [theta, speed] = state;
    let u = torque.clamp(-PENDULUM_MAX_TORQUE, PENDULUM_MAX_TORQUE);
    let accel = 3.0 * 10.0 / 2.0 * theta.sin() + 3.0 * u;
    let speed_next = (speed + accel * PENDULUM_DT).clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
    let theta_next = theta + speed_next * PENDULUM_DT;
    let wrapped = wrap_angle(theta);
    let reward = -(wrapped * wrapped + 0.1 * speed * speed + 0.001 * u * u);
    ([theta_next, speed_next], reward)
}

/// `(x, v)` double integrator with force clamped to `[−1, 1]`.
pub fn pointmass_step(state: [f64; 2], force: f64) -> ([f64; 2], f64) {
    let [x, v] = state;
    let a = force.clamp(-POINTMASS_MAX_FORCE, POINTMASS_MAX_FORCE);
    let v_next = v + a * POINTMASS_DT;
    let x_next = x + v_next * POINTMASS_DT;
    let reward = -(x * x + 0.1 * v * v + 0.01 * a * a);
    ([x_next, v_next], reward)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    /// Dimension of the observation the policy sees.
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub horizon: usize,
}

impl EnvSpec {
    pub fn pendulum() -> Self {
        Self {
            kind: EnvKind::Pendulum,
            state_dim: 3,
            action_dim: 1,
            action_low: vec![-PENDULUM_MAX_TORQUE],
            action_high: vec![PENDULUM_MAX_TORQUE],
            horizon: 200,
        }
    }

    pub fn pointmass() -> Self {
        Self {
            kind: EnvKind::Pointmass,
            state_dim: 2,
            action_dim: 1,
            action_low: vec![-POINTMASS_MAX_FORCE],
            action_high: vec![POINTMASS_MAX_FORCE],
            horizon: 100,
        }
    }

    pub fn from_kind(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Pendulum => Self::pendulum(),
            EnvKind::Pointmass => Self::pointmass(),
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn with_horizon(mut self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        self.horizon = horizon;
        Ok(self)
    }

    /// Box over (observation, action) used to place initial mixture means.
    pub fn joint_box(&self) -> (Vec<f64>, Vec<f64>) {
        let (mut low, mut high) = match self.kind {
            EnvKind::Pendulum => (vec![-1.0, -1.0, -2.0], vec![1.0, 1.0, 2.0]),
            EnvKind::Pointmass => (vec![-1.0, -0.5], vec![1.0, 0.5]),
        };
        // Initial action means stay near zero; exploration comes from the covariance.
        low.extend(self.action_low.iter().map(|l| 0.1 * l));
        high.extend(self.action_high.iter().map(|h| 0.1 * h));
        (low, high)
    }

    pub fn reset(&self, rng: &mut impl Rng) -> [f64; 2] {
        match self.kind {
            EnvKind::Pendulum => [rng.random_range(-PI..=PI), rng.random_range(-1.0..=1.0)],
            EnvKind::Pointmass => [rng.random_range(-1.0..=1.0), 0.0],
        }
    }

    pub fn observe(&self, state: [f64; 2]) -> Vec<f64> {
        match self.kind {
            EnvKind::Pendulum => vec![state[0].cos(), state[0].sin(), state[1]],
            EnvKind::Pointmass => state.to_vec(),
        }
    }

    pub fn step(&self, state: [f64; 2], action: &[f64]) -> ([f64; 2], f64) {
        match self.kind {
            EnvKind::Pendulum => pendulum_step(state, action[0]),
            EnvKind::Pointmass => pointmass_step(state, action[0]),
        }
    }

    /// Worst possible per-step reward.
    pub fn reward_floor(&self) -> f64 {
        match self.kind {
            EnvKind::Pendulum => -(PI * PI + 0.1 * 64.0 + 0.001 * 4.0),
            // |x| grows by at most 1 per unit time from |x| ≤ 1.
            EnvKind::Pointmass => f64::NEG_INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub total_reward: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// `next_state` of each transition equals `state` of the following one.
    pub fn is_chained(&self) -> bool {
        self.transitions
            .windows(2)
            .all(|w| w[0].next_state == w[1].state)
    }
}

fn check_dims(policy: &GmmParams, env: &EnvSpec) -> Result<()> {
    if policy.state_dim() != env.state_dim {
        return Err(Error::DimensionMismatch {
            expected: env.state_dim,
            got: policy.state_dim(),
        });
    }
    if policy.action_dim() != env.action_dim {
        return Err(Error::DimensionMismatch {
            expected: env.action_dim,
            got: policy.action_dim(),
        });
    }
    Ok(())
}

/// One episode under `policy`; the seed fixes both the reset and the actions.
pub fn rollout(policy: &GmmParams, env: &EnvSpec, seed: u64) -> Result<Trajectory> {
    check_dims(policy, env)?;
    let conditioner = StateConditioner::new(policy)?;
    rollout_with(env, seed, |obs, rng| {
        let cond = conditioner.condition(obs)?;
        let action: Vec<f64> = sample_action(&cond, rng).iter().copied().collect();
        let log_prob = conditioner.log_prob(obs, &action)?;
        Ok((action, log_prob))
    })
}

/// Episode driven by an arbitrary `(observation, rng) → (action, log-prob)` map.
pub fn rollout_with(
    env: &EnvSpec,
    seed: u64,
    mut act: impl FnMut(&[f64], &mut ChaCha8Rng) -> Result<(Vec<f64>, f64)>,
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = env.reset(&mut rng);
    let mut transitions = Vec::with_capacity(env.horizon);
    let mut total_reward = 0.0;
    for t in 0..env.horizon {
        let obs = env.observe(state);
        let (action, log_prob) = act(&obs, &mut rng)?;
        let (next, reward) = env.step(state, &action);
        total_reward += reward;
        transitions.push(Transition {
            state: obs,
            action,
            log_prob,
            reward,
            next_state: env.observe(next),
            done: t + 1 == env.horizon,
        });
        state = next;
    }
    Ok(Trajectory {
        transitions,
        total_reward,
    })
}
