//! The posterior-sampling control loop and Bayesian-regret bookkeeping.
//!
//! Each seed draws its own true dynamics `f*` from the random-feature prior,
//! plans the optimal grid policy for it once, and then runs `N` episodes of
//! sample / plan / act / update. Regret is measured exactly on the
//! discretized true MDP, so it is nonnegative by construction.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{LoggedStep, VarianceLog};
use crate::error::{check_dim, Error, Result};
use crate::gp::{Dataset, FeatureMap, FunctionSample, GpPosterior, ProductFeatureCache, RffModel};
use crate::kernels::Kernel;
use crate::mdp::{MdpConfig, MdpInstance, Trajectory};
use crate::planner::{
    evaluate_policy, value_iteration, DynamicsTable, Grid, GridController, GridPolicy, GridSpec, RewardTable,
    TransitionMode, TransitionTable,
};

const STREAM_TRUTH: u64 = 0;
const STREAM_AGENT: u64 = 1;
const STREAM_ENV: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    /// Samples dynamics from the posterior every episode.
    Psrl,
    /// Plans on the true dynamics; a zero-regret control.
    Oracle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mdp: MdpConfig,
    pub kernel: Kernel,
    pub num_features: usize,
    pub grid: GridSpec,
    pub transition: TransitionMode,
    /// Noise variance of the GP over velocity targets `(s' - s) / Δ`.
    /// Defaults to `(σ / Δ)²`, the exact noise level of those targets.
    pub gp_noise_variance: Option<f64>,
    pub agent: AgentKind,
    /// Record the exact posterior variance at every visited input.
    pub log_posterior_variance: bool,
}

impl RunConfig {
    pub fn new(mdp: MdpConfig, kernel: Kernel) -> Self {
        Self {
            mdp,
            kernel,
            num_features: 1000,
            grid: GridSpec::default(),
            transition: TransitionMode::NearestCell,
            gp_noise_variance: None,
            agent: AgentKind::Psrl,
            log_posterior_variance: true,
        }
    }

    pub fn gp_noise(&self) -> f64 {
        self.gp_noise_variance
            .unwrap_or_else(|| (self.mdp.sigma / self.mdp.delta).powi(2))
    }

    pub fn validate(&self) -> Result<()> {
        self.mdp.validate()?;
        check_dim(self.mdp.input_dim(), self.kernel.input_dim())?;
        if self.num_features == 0 {
            return Err(Error::invalid("num_features", "must be at least 1"));
        }
        let noise = self.gp_noise();
        if !(noise > 0.0 && noise.is_finite()) {
            return Err(Error::invalid("gp_noise_variance", format!("must be positive, got {noise}")));
        }
        Ok(())
    }
}

/// Seed of worker `index` under master seed `master`.
pub fn seed_for(master: u64, index: usize) -> u64 {
    master ^ index as u64
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    /// 1-based.
    pub episode: usize,
    pub optimal_value: f64,
    pub achieved_value: f64,
    pub inst_regret: f64,
    pub cum_regret: f64,
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<EpisodeRecord>,
    pub trajectories: Vec<Trajectory>,
    /// Per episode and step, `σ²_{n-1}(x_{n,h})`; empty when not logged.
    pub posterior_variances: Vec<Vec<f64>>,
    /// The observations the agent conditioned on.
    pub dataset: Dataset,
}

impl SeedRun {
    pub fn final_regret(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.cum_regret)
    }

    pub fn max_state_norm(&self) -> f64 {
        self.trajectories
            .iter()
            .map(Trajectory::max_state_norm)
            .fold(0.0, f64::max)
    }

    pub fn variance_log(&self) -> Option<VarianceLog> {
        if self.posterior_variances.len() != self.trajectories.len() {
            return None;
        }
        let episodes = self
            .trajectories
            .iter()
            .zip(&self.posterior_variances)
            .map(|(t, vars)| {
                t.steps
                    .iter()
                    .zip(vars)
                    .map(|(s, v)| LoggedStep {
                        input: s.input(),
                        post_var: *v,
                        observed: s.next_state.is_some(),
                    })
                    .collect()
            })
            .collect();
        Some(VarianceLog { episodes })
    }
}

fn transition_table(
    grid: &Grid,
    cache: &ProductFeatureCache,
    f: &FunctionSample,
    mdp: &MdpConfig,
    mode: TransitionMode,
) -> Result<TransitionTable> {
    let table = DynamicsTable::from_cache(cache, f)?;
    TransitionTable::from_dynamics(grid, &table, mdp.delta, mdp.sigma, mode)
}

/// Velocity regression pairs `(x_h, (s_{h+1} - s_h) / Δ)` for `h <= H-1`.
pub fn velocity_targets(trajectory: &Trajectory, delta: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    trajectory
        .steps
        .iter()
        .filter_map(|s| {
            s.next_state.as_ref().map(|next| {
                let y = next.iter().zip(&s.state).map(|(n, c)| (n - c) / delta).collect();
                (s.input(), y)
            })
        })
        .unzip()
}

/// One full run for one seed.
pub fn run_psrl(config: &RunConfig, seed: u64) -> Result<SeedRun> {
    config.validate()?;
    let mdp = &config.mdp;
    let horizon = mdp.horizon;
    let noise = config.gp_noise();

    let mut truth_rng = stream(seed, STREAM_TRUTH);
    let features = Arc::new(FeatureMap::sample(&config.kernel, config.num_features, &mut truth_rng)?);
    let truth = MdpInstance::from_prior(mdp.clone(), features.clone(), &mut truth_rng)?;

    let grid = Grid::from_config(mdp, config.grid)?;
    let cache = ProductFeatureCache::new(features.clone(), grid.cells(), grid.actions())?;
    let rewards = RewardTable::navigation(&grid, truth.reward_fn());
    let weights = grid.initial_weights(&mdp.initial_state);
    let true_trans = transition_table(&grid, &cache, truth.dynamics(), mdp, config.transition)?;
    let optimal = value_iteration(&true_trans, &rewards, horizon)?;
    let optimal_value = optimal.values().initial_value(&weights);

    let mut model = RffModel::prior(features, mdp.state_dim, noise)?;
    let mut exact = if config.log_posterior_variance {
        Some(GpPosterior::prior(config.kernel.clone(), mdp.state_dim, noise)?)
    } else {
        None
    };
    let mut dataset = Dataset::new(mdp.input_dim(), mdp.state_dim, noise)?;
    let mut agent_rng = stream(seed, STREAM_AGENT);
    let mut env_rng = stream(seed, STREAM_ENV);

    let mut records = Vec::with_capacity(mdp.episodes);
    let mut trajectories = Vec::with_capacity(mdp.episodes);
    let mut posterior_variances = Vec::new();
    let mut cum_regret = 0.0;
    for episode in 1..=mdp.episodes {
        let sampled: GridPolicy;
        let policy = match config.agent {
            AgentKind::Oracle => &optimal,
            AgentKind::Psrl => {
                let f = model.sample_function(&mut agent_rng);
                let trans = transition_table(&grid, &cache, &f, mdp, config.transition)?;
                sampled = value_iteration(&trans, &rewards, horizon)?;
                &sampled
            }
        };
        let achieved_value = evaluate_policy(policy, &true_trans, &rewards)?.initial_value(&weights);
        let inst_regret = optimal_value - achieved_value;
        cum_regret += inst_regret;
        records.push(EpisodeRecord {
            seed,
            episode,
            optimal_value,
            achieved_value,
            inst_regret,
            cum_regret,
        });

        let controller = GridController { grid: &grid, policy };
        let trajectory = truth.rollout(&controller, episode, &mut env_rng)?;
        let (inputs, targets) = velocity_targets(&trajectory, mdp.delta);
        if let Some(gp) = exact.as_mut() {
            let visited: Vec<Vec<f64>> = trajectory.steps.iter().map(|s| s.input()).collect();
            posterior_variances.push(gp.variances(&visited)?);
            gp.append_mut(&inputs, &targets)?;
        }
        model.append_mut(&inputs, &targets)?;
        dataset.extend(&inputs, &targets)?;
        trajectories.push(trajectory);
    }
    log::debug!("seed {seed}: final cumulative regret {cum_regret:.4}");

    Ok(SeedRun {
        seed,
        records,
        trajectories,
        posterior_variances,
        dataset,
    })
}

/// Runs every seed in parallel; output order follows `seeds`.
pub fn run_seeds(config: &RunConfig, seeds: &[u64]) -> Result<Vec<SeedRun>> {
    if seeds.is_empty() {
        return Err(Error::Empty("seeds"));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err(Error::invalid("seeds", "must be distinct"));
    }
    seeds.par_iter().map(|s| run_psrl(config, *s)).collect()
}

/// Pointwise mean and standard error of cumulative regret over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretCurve {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub num_seeds: usize,
}

impl RegretCurve {
    pub fn from_runs(runs: &[SeedRun]) -> Result<Self> {
        if runs.len() < 2 {
            return Err(Error::invalid("seeds", "a regret curve needs at least 2 seeds"));
        }
        let len = runs[0].records.len();
        if runs.iter().any(|r| r.records.len() != len) {
            return Err(Error::invalid("runs", "episode counts differ"));
        }
        let k = runs.len() as f64;
        let (mean, std_error) = (0..len)
            .map(|i| {
                let xs = runs.iter().map(|r| r.records[i].cum_regret);
                let m = xs.clone().sum::<f64>() / k;
                let var = xs.map(|x| (x - m).powi(2)).sum::<f64>() / (k - 1.0);
                (m, (var / k).sqrt())
            })
            .unzip();
        Ok(Self {
            mean,
            std_error,
            num_seeds: runs.len(),
        })
    }

    pub fn final_mean(&self) -> f64 {
        self.mean.last().copied().unwrap_or(0.0)
    }

    pub fn final_std_error(&self) -> f64 {
        self.std_error.last().copied().unwrap_or(0.0)
    }
}

/// Runs all seeds and averages their cumulative regret.
pub fn bayesian_regret(config: &RunConfig, seeds: &[u64]) -> Result<RegretCurve> {
    RegretCurve::from_runs(&run_seeds(config, seeds)?)
}
