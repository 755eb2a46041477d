//! The ground-truth environment for the navigation task.
//!
//! States evolve by noisy Euler integration of an unknown velocity field,
//! `s' = s + Δ f(s, a) + ε` with `ε ~ N(0, σ² I)`, and the reward is a known
//! function of the state: a quadratic pull towards a goal, a Gaussian bump
//! around a central obstacle, and soft barriers at the arena walls.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gp::{FeatureMap, FunctionSample, RffModel};
use crate::kernels::Kernel;

/// A deterministic map from state-action inputs to velocities.
pub trait Dynamics: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>>;
}

impl Dynamics for FunctionSample {
    fn input_dim(&self) -> usize {
        FunctionSample::input_dim(self)
    }

    fn output_dim(&self) -> usize {
        FunctionSample::output_dim(self)
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        FunctionSample::eval(self, x)
    }
}

/// Adapts a closure into [`Dynamics`].
pub struct FnDynamics<F> {
    input_dim: usize,
    output_dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> Vec<f64> + Send + Sync> FnDynamics<F> {
    pub fn new(input_dim: usize, output_dim: usize, f: F) -> Self {
        Self {
            input_dim,
            output_dim,
            f,
        }
    }
}

impl<F: Fn(&[f64]) -> Vec<f64> + Send + Sync> Dynamics for FnDynamics<F> {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim, x.len())?;
        Ok((self.f)(x))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialStateLaw {
    /// `N(0, std² I)`.
    Gaussian { std: f64 },
    /// Uniform over the arena box.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardParams {
    pub goal: Vec<f64>,
    pub goal_weight: f64,
    pub obstacle_center: Vec<f64>,
    pub obstacle_radius: f64,
    pub obstacle_weight: f64,
    pub barrier_weight: f64,
    pub barrier_stiffness: f64,
    pub r_max: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            goal: vec![1.5, 1.5],
            goal_weight: 0.3,
            obstacle_center: vec![0.0, 0.0],
            obstacle_radius: 0.5,
            obstacle_weight: 3.0,
            barrier_weight: 2.0,
            barrier_stiffness: 10.0,
            r_max: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdpConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    /// Transition noise standard deviation `σ`.
    pub sigma: f64,
    pub horizon: usize,
    pub episodes: usize,
    /// Actions live in the box `[-action_bound, action_bound]^{d_a}`.
    pub action_bound: f64,
    /// The arena is `[-arena_half_width, arena_half_width]^{d_s}`.
    pub arena_half_width: f64,
    /// Euler step `Δ`.
    pub delta: f64,
    pub reward: RewardParams,
    pub initial_state: InitialStateLaw,
}

impl Default for MdpConfig {
    fn default() -> Self {
        Self {
            state_dim: 2,
            action_dim: 2,
            sigma: 0.01,
            horizon: 20,
            episodes: 100,
            action_bound: 1.0,
            arena_half_width: 2.0,
            delta: 0.1,
            reward: RewardParams::default(),
            initial_state: InitialStateLaw::Uniform,
        }
    }
}

impl MdpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.action_dim == 0 {
            return Err(Error::invalid("state_dim/action_dim", "must be at least 1"));
        }
        if self.horizon < 1 {
            return Err(Error::invalid("horizon", "must be at least 1"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::invalid("sigma", format!("must be positive, got {}", self.sigma)));
        }
        if !(self.action_bound > 0.0) {
            return Err(Error::invalid("action_bound", "must be positive"));
        }
        if !(self.arena_half_width > 0.0) {
            return Err(Error::invalid("arena_half_width", "must be positive"));
        }
        if !(self.delta > 0.0) {
            return Err(Error::invalid("delta", "must be positive"));
        }
        let r = &self.reward;
        check_dim(self.state_dim, r.goal.len())?;
        check_dim(self.state_dim, r.obstacle_center.len())?;
        if !(r.r_max > 0.0 && r.obstacle_radius > 0.0 && r.barrier_stiffness > 0.0) {
            return Err(Error::invalid("reward", "r_max, obstacle_radius and barrier_stiffness must be positive"));
        }
        if let InitialStateLaw::Gaussian { std } = self.initial_state {
            if !(std > 0.0) {
                return Err(Error::invalid("initial_state.std", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.action_dim
    }

    /// Total number of steps `T = N H`.
    pub fn total_steps(&self) -> usize {
        self.episodes * self.horizon
    }

    /// Radius `R_a` of the Euclidean ball containing the action box.
    pub fn action_radius(&self) -> f64 {
        self.action_bound * (self.action_dim as f64).sqrt()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// The known navigation reward, bounded in `[-r_max, 0]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NavigationReward {
    params: RewardParams,
    arena_half_width: f64,
}

impl NavigationReward {
    pub fn new(params: RewardParams, arena_half_width: f64) -> Self {
        Self {
            params,
            arena_half_width,
        }
    }

    pub fn from_config(config: &MdpConfig) -> Self {
        Self::new(config.reward.clone(), config.arena_half_width)
    }

    pub fn r_max(&self) -> f64 {
        self.params.r_max
    }

    pub fn params(&self) -> &RewardParams {
        &self.params
    }

    /// `r(s, a)`; the action does not enter.
    pub fn eval(&self, state: &[f64], _action: &[f64]) -> f64 {
        let p = &self.params;
        let goal: f64 = state.iter().zip(&p.goal).map(|(s, g)| (s - g) * (s - g)).sum();
        let obs: f64 = state
            .iter()
            .zip(&p.obstacle_center)
            .map(|(s, o)| (s - o) * (s - o))
            .sum();
        let k = p.barrier_stiffness;
        let barrier: f64 = state
            .iter()
            .map(|s| softplus(k * (s.abs() - self.arena_half_width)) / k)
            .sum();
        let r = -p.goal_weight * goal
            - p.obstacle_weight * (-obs / (2.0 * p.obstacle_radius * p.obstacle_radius)).exp()
            - p.barrier_weight * barrier;
        r.clamp(-p.r_max, 0.0)
    }
}

/// A policy that may depend on the step index `h` (1-based).
pub trait Policy {
    fn action(&self, state: &[f64], h: usize) -> Vec<f64>;
}

impl<F: Fn(&[f64], usize) -> Vec<f64>> Policy for F {
    fn action(&self, state: &[f64], h: usize) -> Vec<f64> {
        self(state, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    /// 1-based step index.
    pub h: usize,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    /// Absent on the last step of an episode.
    pub next_state: Option<Vec<f64>>,
}

impl Step {
    /// The state-action input `x = (s, a)`.
    pub fn input(&self) -> Vec<f64> {
        self.state.iter().chain(&self.action).copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// 1-based episode index.
    pub episode: usize,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// `(x_h, s_{h+1})` for every step that has a successor, i.e. `h <= H-1`.
    pub fn transitions(&self) -> impl Iterator<Item = (Vec<f64>, &[f64])> + '_ {
        self.steps
            .iter()
            .filter_map(|s| s.next_state.as_deref().map(|n| (s.input(), n)))
    }

    pub fn max_state_norm(&self) -> f64 {
        self.steps
            .iter()
            .flat_map(|s| std::iter::once(&s.state).chain(s.next_state.as_ref()))
            .map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// An MDP with known reward and Gaussian transitions around Euler-integrated
/// dynamics.
#[derive(Clone, Debug)]
pub struct MdpInstance<D> {
    config: MdpConfig,
    dynamics: D,
    reward: NavigationReward,
}

impl MdpInstance<FunctionSample> {
    /// Draws the true dynamics from the random-feature GP prior over `features`.
    pub fn from_prior<R: Rng + ?Sized>(config: MdpConfig, features: Arc<FeatureMap>, rng: &mut R) -> Result<Self> {
        let prior = RffModel::prior(features, config.state_dim, 1.0)?;
        let f = prior.sample_function(rng);
        Self::new(config, f)
    }
}

/// Samples `f*` from the GP prior (random features of `kernel`).
pub fn sample_ground_truth<R: Rng + ?Sized>(
    config: MdpConfig,
    kernel: &Kernel,
    num_features: usize,
    rng: &mut R,
) -> Result<MdpInstance<FunctionSample>> {
    check_dim(config.input_dim(), kernel.input_dim())?;
    let features = Arc::new(FeatureMap::sample(kernel, num_features, rng)?);
    MdpInstance::from_prior(config, features, rng)
}

impl<D: Dynamics> MdpInstance<D> {
    pub fn new(config: MdpConfig, dynamics: D) -> Result<Self> {
        config.validate()?;
        check_dim(config.input_dim(), dynamics.input_dim())?;
        check_dim(config.state_dim, dynamics.output_dim())?;
        let reward = NavigationReward::from_config(&config);
        Ok(Self {
            config,
            dynamics,
            reward,
        })
    }

    pub fn config(&self) -> &MdpConfig {
        &self.config
    }

    pub fn dynamics(&self) -> &D {
        &self.dynamics
    }

    pub fn reward_fn(&self) -> &NavigationReward {
        &self.reward
    }

    pub fn reward(&self, state: &[f64], action: &[f64]) -> f64 {
        self.reward.eval(state, action)
    }

    fn check_action(&self, action: &[f64]) -> Result<()> {
        check_dim(self.config.action_dim, action.len())?;
        let bound = self.config.action_bound;
        match action.iter().find(|a| a.abs() > bound * (1.0 + 1e-12)) {
            Some(&value) => Err(Error::ActionOutOfBounds { value, bound }),
            None => Ok(()),
        }
    }

    /// `s + Δ f(s, a)`, the mean of the next state.
    pub fn mean_next(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.config.state_dim, state.len())?;
        self.check_action(action)?;
        let x: Vec<f64> = state.iter().chain(action).copied().collect();
        let v = self.dynamics.eval(&x)?;
        Ok(state
            .iter()
            .zip(&v)
            .map(|(s, f)| s + self.config.delta * f)
            .collect())
    }

    pub fn step<R: Rng + ?Sized>(&self, state: &[f64], action: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let mut next = self.mean_next(state, action)?;
        for v in &mut next {
            *v += self.config.sigma * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(next)
    }

    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.config.state_dim;
        match self.config.initial_state {
            InitialStateLaw::Gaussian { std } => (0..d)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            InitialStateLaw::Uniform => {
                let w = self.config.arena_half_width;
                (0..d).map(|_| rng.random_range(-w..=w)).collect()
            }
        }
    }

    /// Runs one episode of `H` steps. No successor is drawn after step `H`.
    pub fn rollout<P: Policy + ?Sized, R: Rng + ?Sized>(
        &self,
        policy: &P,
        episode: usize,
        rng: &mut R,
    ) -> Result<Trajectory> {
        let horizon = self.config.horizon;
        let mut state = self.initial_state(rng);
        let mut steps = Vec::with_capacity(horizon);
        for h in 1..=horizon {
            let action = policy.action(&state, h);
            let reward = self.reward(&state, &action);
            let next_state = if h < horizon {
                Some(self.step(&state, &action, rng)?)
            } else {
                self.check_action(&action)?;
                None
            };
            let next = next_state.clone();
            steps.push(Step {
                h,
                state,
                action,
                reward,
                next_state,
            });
            match next {
                Some(n) => state = n,
                None => break,
            }
        }
        Ok(Trajectory { episode, steps })
    }
}
