//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use gppsrl::gp::{FeatureMap, ProductFeatureCache, RffModel};
use gppsrl::planner::{DynamicsTable, Grid, GridSpec, RewardTable, TransitionMode, TransitionTable};
use gppsrl::{Kernel, MdpConfig, NavigationReward};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn se_kernel(input_dim: usize) -> Kernel {
    Kernel::squared_exponential(1.0, 0.5, input_dim).expect("valid kernel")
}

/// Tabulated dynamics draw on the navigation grid.
pub struct PlanningFixture {
    pub config: MdpConfig,
    pub grid: Grid,
    pub cache: ProductFeatureCache,
    pub prior: RffModel,
    pub transitions: TransitionTable,
    pub rewards: RewardTable,
}

impl PlanningFixture {
    pub fn new(state_knots: usize, num_features: usize, seed: u64) -> Self {
        let config = MdpConfig::default();
        let spec = GridSpec {
            state_knots,
            ..GridSpec::default()
        };
        let grid = Grid::from_config(&config, spec).expect("valid grid");
        let mut rng = rng(seed);
        let fm = Arc::new(FeatureMap::sample(&se_kernel(config.input_dim()), num_features, &mut rng).expect("features"));
        let cache = ProductFeatureCache::new(Arc::clone(&fm), grid.cells(), grid.actions()).expect("cache");
        let prior = RffModel::prior(fm, config.state_dim, 0.01).expect("prior");
        let table = DynamicsTable::from_cache(&cache, &prior.sample_function(&mut rng)).expect("tabulation");
        let transitions =
            TransitionTable::from_dynamics(&grid, &table, config.delta, config.sigma, TransitionMode::NearestCell)
                .expect("transitions");
        let rewards = RewardTable::navigation(&grid, &NavigationReward::from_config(&config));
        Self {
            config,
            grid,
            cache,
            prior,
            transitions,
            rewards,
        }
    }
}

/// `n` uniform points in `[-half, half]^dim`.
pub fn uniform_points(n: usize, dim: usize, half: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-half..=half)).collect())
        .collect()
}
