//! Finite-horizon value iteration on a discretized state-action grid.
//!
//! States are snapped to a uniform tensor grid over the arena and actions to a
//! uniform grid over the action box. Continuous dynamics are turned into a
//! sparse [`TransitionTable`] once per model, after which backward induction
//! is a plain sweep over `(h, cell, action)`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gp::{FunctionSample, ProductFeatureCache};
use crate::mdp::{Dynamics, InitialStateLaw, NavigationReward, Policy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionMode {
    /// Next state is the knot nearest to `s + Δ f(s, a)`.
    NearestCell,
    /// Gaussian noise marginalized per dimension over neighbouring knots,
    /// truncated at three standard deviations.
    NoiseSmoothed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub state_knots: usize,
    pub action_knots: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            state_knots: 41,
            action_knots: 9,
        }
    }
}

fn linspace(half_width: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n)
        .map(|i| -half_width + 2.0 * half_width * i as f64 / (n - 1) as f64)
        .collect()
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

/// Uniform tensor grid over the arena and the action box.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    state_dim: usize,
    half_width: f64,
    knots: Vec<f64>,
    cells: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
}

impl Grid {
    pub fn new(
        state_dim: usize,
        half_width: f64,
        state_knots: usize,
        action_dim: usize,
        action_bound: f64,
        action_knots: usize,
    ) -> Result<Self> {
        if state_dim == 0 || action_dim == 0 || state_knots == 0 || action_knots == 0 {
            return Err(Error::Empty("grid"));
        }
        if !(half_width > 0.0 && action_bound > 0.0) {
            return Err(Error::invalid("grid", "extents must be positive"));
        }
        let knots = linspace(half_width, state_knots);
        let cells = tensor(&knots, state_dim);
        let actions = tensor(&linspace(action_bound, action_knots), action_dim);
        Ok(Self {
            state_dim,
            half_width,
            knots,
            cells,
            actions,
        })
    }

    pub fn from_config(config: &crate::mdp::MdpConfig, spec: GridSpec) -> Result<Self> {
        Self::new(
            config.state_dim,
            config.arena_half_width,
            spec.state_knots,
            config.action_dim,
            config.action_bound,
            spec.action_knots,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn cells(&self) -> &[Vec<f64>] {
        &self.cells
    }

    pub fn cell_state(&self, cell: usize) -> &[f64] {
        &self.cells[cell]
    }

    pub fn actions(&self) -> &[Vec<f64>] {
        &self.actions
    }

    pub fn action(&self, index: usize) -> &[f64] {
        &self.actions[index]
    }

    /// Nearest knot along one dimension; values outside the arena clamp to
    /// the boundary knot.
    pub fn knot_index(&self, v: f64) -> usize {
        let n = self.knots.len();
        if n == 1 {
            return 0;
        }
        let step = self.knots[1] - self.knots[0];
        let i = ((v + self.half_width) / step).round();
        if i.is_nan() {
            return 0;
        }
        i.clamp(0.0, (n - 1) as f64) as usize
    }

    pub fn nearest_cell(&self, state: &[f64]) -> usize {
        let n = self.knots.len();
        state.iter().fold(0, |acc, v| acc * n + self.knot_index(*v))
    }

    /// Probability mass of `N(mean, std²)` on each knot's Voronoi interval,
    /// with the outer intervals extended to infinity and the Gaussian
    /// truncated at `mean ± 3 std`. Sparse `(knot, weight)` list summing to 1.
    fn interval_masses(&self, mean: f64, std: f64) -> Vec<(usize, f64)> {
        let n = self.knots.len();
        if n == 1 {
            return vec![(0, 1.0)];
        }
        let lo_t = mean - 3.0 * std;
        let hi_t = mean + 3.0 * std;
        let first = self.knot_index(lo_t);
        let last = self.knot_index(hi_t);
        let mut out = Vec::with_capacity(last - first + 1);
        let mut total = 0.0;
        for k in first..=last {
            let lo = if k == 0 { f64::NEG_INFINITY } else { 0.5 * (self.knots[k - 1] + self.knots[k]) };
            let hi = if k == n - 1 { f64::INFINITY } else { 0.5 * (self.knots[k] + self.knots[k + 1]) };
            let lo = lo.max(lo_t);
            let hi = hi.min(hi_t);
            if hi > lo {
                let w = normal_cdf((hi - mean) / std) - normal_cdf((lo - mean) / std);
                if w > 0.0 {
                    total += w;
                    out.push((k, w));
                }
            }
        }
        if out.is_empty() {
            return vec![(self.knot_index(mean), 1.0)];
        }
        out.iter_mut().for_each(|(_, w)| *w /= total);
        out
    }

    fn smoothed_cells(&self, mean: &[f64], std: f64) -> Vec<(usize, f64)> {
        let n = self.knots.len();
        let mut acc = vec![(0usize, 1.0f64)];
        for m in mean {
            let masses = self.interval_masses(*m, std);
            let mut next = Vec::with_capacity(acc.len() * masses.len());
            for (idx, w) in &acc {
                for (k, wk) in &masses {
                    next.push((idx * n + k, w * wk));
                }
            }
            acc = next;
        }
        acc
    }

    /// Distribution of the initial cell under `law`.
    pub fn initial_weights(&self, law: &InitialStateLaw) -> Vec<f64> {
        match law {
            InitialStateLaw::Uniform => vec![1.0 / self.num_cells() as f64; self.num_cells()],
            InitialStateLaw::Gaussian { std } => {
                let origin = vec![0.0; self.state_dim];
                let mut w = vec![0.0; self.num_cells()];
                // Untruncated: use a wide window so the tails land on the walls.
                let masses: Vec<(usize, f64)> = {
                    let n = self.knots.len();
                    let per_dim: Vec<f64> = (0..n)
                        .map(|k| {
                            let lo = if k == 0 { f64::NEG_INFINITY } else { 0.5 * (self.knots[k - 1] + self.knots[k]) };
                            let hi = if k == n - 1 { f64::INFINITY } else { 0.5 * (self.knots[k] + self.knots[k + 1]) };
                            normal_cdf(hi / std) - normal_cdf(lo / std)
                        })
                        .collect();
                    let mut acc = vec![(0usize, 1.0f64)];
                    for _ in &origin {
                        let mut next = Vec::with_capacity(acc.len() * n);
                        for (idx, wi) in &acc {
                            for (k, wk) in per_dim.iter().enumerate() {
                                next.push((idx * n + k, wi * wk));
                            }
                        }
                        acc = next;
                    }
                    acc
                };
                for (c, p) in masses {
                    w[c] += p;
                }
                let total: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= total);
                w
            }
        }
    }
}

fn tensor(axis: &[f64], dim: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::with_capacity(dim)];
    for _ in 0..dim {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(*v);
                    p
                })
            })
            .collect();
    }
    out
}

/// Velocity field tabulated on the grid: one `cells × actions` matrix per
/// state dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsTable {
    per_dim: Vec<DMatrix<f64>>,
}

impl DynamicsTable {
    pub fn from_dynamics<D: Dynamics + ?Sized>(grid: &Grid, dynamics: &D) -> Result<Self> {
        check_dim(grid.state_dim(), dynamics.output_dim())?;
        let rows: Vec<Vec<Vec<f64>>> = grid
            .cells()
            .par_iter()
            .map(|s| {
                grid.actions()
                    .iter()
                    .map(|a| {
                        let x: Vec<f64> = s.iter().chain(a).copied().collect();
                        dynamics.eval(&x)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let per_dim = (0..grid.state_dim())
            .map(|d| DMatrix::from_fn(grid.num_cells(), grid.num_actions(), |c, a| rows[c][a][d]))
            .collect();
        Ok(Self { per_dim })
    }

    /// Fast path for random-feature samples using a cache built on this grid.
    pub fn from_cache(cache: &ProductFeatureCache, sample: &FunctionSample) -> Result<Self> {
        Ok(Self {
            per_dim: cache.tabulate(sample)?,
        })
    }

    pub fn from_matrices(per_dim: Vec<DMatrix<f64>>) -> Self {
        Self { per_dim }
    }

    pub fn value(&self, cell: usize, action: usize, dim: usize) -> f64 {
        self.per_dim[dim][(cell, action)]
    }

    pub fn state_dim(&self) -> usize {
        self.per_dim.len()
    }
}

/// Sparse transition kernel over grid cells, one row per `(cell, action)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionTable {
    num_cells: usize,
    num_actions: usize,
    row_start: Vec<usize>,
    next: Vec<u32>,
    prob: Vec<f64>,
}

impl TransitionTable {
    pub fn from_rows(num_cells: usize, num_actions: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if num_cells == 0 || num_actions == 0 {
            return Err(Error::Empty("transition table"));
        }
        check_dim(num_cells * num_actions, rows.len())?;
        let mut row_start = Vec::with_capacity(rows.len() + 1);
        let mut next = Vec::new();
        let mut prob = Vec::new();
        row_start.push(0);
        for row in rows {
            let total: f64 = row.iter().map(|(_, p)| p).sum();
            if (total - 1.0).abs() > 1e-9 || row.iter().any(|(c, p)| *c >= num_cells || *p < 0.0) {
                return Err(Error::invalid("transition row", format!("not a distribution over cells: {row:?}")));
            }
            for (c, p) in row {
                next.push(c as u32);
                prob.push(p);
            }
            row_start.push(next.len());
        }
        Ok(Self {
            num_cells,
            num_actions,
            row_start,
            next,
            prob,
        })
    }

    /// `next[cell * num_actions + action]` is the successor cell.
    pub fn deterministic(num_cells: usize, num_actions: usize, next: Vec<usize>) -> Result<Self> {
        Self::from_rows(num_cells, num_actions, next.into_iter().map(|c| vec![(c, 1.0)]).collect())
    }

    /// Builds the grid kernel for `s' = s + Δ f(s, a) + ε`.
    pub fn from_dynamics(
        grid: &Grid,
        table: &DynamicsTable,
        delta: f64,
        sigma: f64,
        mode: TransitionMode,
    ) -> Result<Self> {
        check_dim(grid.state_dim(), table.state_dim())?;
        let nc = grid.num_cells();
        let na = grid.num_actions();
        let rows: Vec<Vec<(usize, f64)>> = (0..nc * na)
            .into_par_iter()
            .map(|i| {
                let (c, a) = (i / na, i % na);
                let s = grid.cell_state(c);
                let mean: Vec<f64> = (0..grid.state_dim())
                    .map(|d| s[d] + delta * table.value(c, a, d))
                    .collect();
                match mode {
                    TransitionMode::NearestCell => vec![(grid.nearest_cell(&mean), 1.0)],
                    TransitionMode::NoiseSmoothed => grid.smoothed_cells(&mean, sigma),
                }
            })
            .collect();
        Self::from_rows(nc, na, rows)
    }

    pub fn num_cells(&self) -> usize {
        self.num_cells
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn row(&self, cell: usize, action: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let i = cell * self.num_actions + action;
        let span = self.row_start[i]..self.row_start[i + 1];
        self.next[span.clone()]
            .iter()
            .zip(&self.prob[span])
            .map(|(c, p)| (*c as usize, *p))
    }

    fn expected(&self, cell: usize, action: usize, values: &[f64]) -> f64 {
        self.row(cell, action).map(|(c, p)| p * values[c]).sum()
    }
}

/// Rewards `r(cell, action)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardTable {
    num_cells: usize,
    num_actions: usize,
    values: Vec<f64>,
}

impl RewardTable {
    pub fn from_values(num_cells: usize, num_actions: usize, values: Vec<f64>) -> Result<Self> {
        check_dim(num_cells * num_actions, values.len())?;
        Ok(Self {
            num_cells,
            num_actions,
            values,
        })
    }

    pub fn from_fn(grid: &Grid, reward: impl Fn(&[f64], &[f64]) -> f64) -> Self {
        let values = grid
            .cells()
            .iter()
            .flat_map(|s| grid.actions().iter().map(|a| reward(s, a)).collect::<Vec<_>>())
            .collect();
        Self {
            num_cells: grid.num_cells(),
            num_actions: grid.num_actions(),
            values,
        }
    }

    pub fn navigation(grid: &Grid, reward: &NavigationReward) -> Self {
        Self::from_fn(grid, |s, a| reward.eval(s, a))
    }

    pub fn get(&self, cell: usize, action: usize) -> f64 {
        self.values[cell * self.num_actions + action]
    }
}

/// State values `V_h` for `h = 1..=H+1` over grid cells; `V_{H+1} = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable {
    horizon: usize,
    num_cells: usize,
    values: Vec<f64>,
}

impl ValueTable {
    fn zeros(horizon: usize, num_cells: usize) -> Self {
        Self {
            horizon,
            num_cells,
            values: vec![0.0; (horizon + 1) * num_cells],
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// `V_h(cell)` with `h` 1-based, `1 <= h <= H + 1`.
    pub fn value(&self, h: usize, cell: usize) -> f64 {
        self.values[(h - 1) * self.num_cells + cell]
    }

    pub fn layer(&self, h: usize) -> &[f64] {
        &self.values[(h - 1) * self.num_cells..h * self.num_cells]
    }

    fn layer_mut(&mut self, h: usize) -> &mut [f64] {
        &mut self.values[(h - 1) * self.num_cells..h * self.num_cells]
    }

    /// `Σ_c w_c V_1(c)`: the expected value of an episode when the first cell
    /// is drawn from `weights`.
    pub fn initial_value(&self, weights: &[f64]) -> f64 {
        self.layer(1).iter().zip(weights).map(|(v, w)| v * w).sum()
    }
}

/// Deterministic time-indexed policy with its value table under the model it
/// was planned for.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPolicy {
    actions: Vec<u32>,
    values: ValueTable,
}

impl GridPolicy {
    pub fn horizon(&self) -> usize {
        self.values.horizon
    }

    pub fn num_cells(&self) -> usize {
        self.values.num_cells
    }

    /// Action index at step `h` (1-based) in `cell`.
    pub fn action(&self, h: usize, cell: usize) -> usize {
        self.actions[(h - 1) * self.values.num_cells + cell] as usize
    }

    pub fn values(&self) -> &ValueTable {
        &self.values
    }

    pub fn from_actions(horizon: usize, num_cells: usize, actions: Vec<usize>) -> Result<Self> {
        check_dim(horizon * num_cells, actions.len())?;
        Ok(Self {
            actions: actions.into_iter().map(|a| a as u32).collect(),
            values: ValueTable::zeros(horizon, num_cells),
        })
    }
}

fn check_tables(trans: &TransitionTable, rewards: &RewardTable) -> Result<()> {
    check_dim(trans.num_cells, rewards.num_cells)?;
    check_dim(trans.num_actions, rewards.num_actions)
}

/// `Q_h(cell, a) = r(cell, a) + E[V_{h+1}(s')]`.
pub fn q_value(trans: &TransitionTable, rewards: &RewardTable, next_values: &[f64], cell: usize, action: usize) -> f64 {
    rewards.get(cell, action) + trans.expected(cell, action, next_values)
}

/// Backward induction for `h = H, ..., 1`. Ties go to the lowest action index.
pub fn value_iteration(trans: &TransitionTable, rewards: &RewardTable, horizon: usize) -> Result<GridPolicy> {
    check_tables(trans, rewards)?;
    if horizon == 0 {
        return Err(Error::invalid("horizon", "must be at least 1"));
    }
    let nc = trans.num_cells;
    let na = trans.num_actions;
    let mut values = ValueTable::zeros(horizon, nc);
    let mut actions = vec![0u32; horizon * nc];
    for h in (1..=horizon).rev() {
        let next = values.layer(h + 1).to_vec();
        let best: Vec<(u32, f64)> = (0..nc)
            .into_par_iter()
            .map(|c| {
                let mut best_a = 0;
                let mut best_q = f64::NEG_INFINITY;
                for a in 0..na {
                    let q = q_value(trans, rewards, &next, c, a);
                    if q > best_q {
                        best_q = q;
                        best_a = a;
                    }
                }
                (best_a as u32, best_q)
            })
            .collect();
        let layer = values.layer_mut(h);
        for (c, (a, q)) in best.into_iter().enumerate() {
            layer[c] = q;
            actions[(h - 1) * nc + c] = a;
        }
    }
    Ok(GridPolicy { actions, values })
}

/// Values of a fixed policy under `trans`.
pub fn evaluate_policy(policy: &GridPolicy, trans: &TransitionTable, rewards: &RewardTable) -> Result<ValueTable> {
    check_tables(trans, rewards)?;
    check_dim(trans.num_cells, policy.num_cells())?;
    let horizon = policy.horizon();
    let nc = trans.num_cells;
    let mut values = ValueTable::zeros(horizon, nc);
    for h in (1..=horizon).rev() {
        let next = values.layer(h + 1).to_vec();
        let layer: Vec<f64> = (0..nc)
            .into_par_iter()
            .map(|c| q_value(trans, rewards, &next, c, policy.action(h, c)))
            .collect();
        values.layer_mut(h).copy_from_slice(&layer);
    }
    Ok(values)
}

/// Tabulates `dynamics` and plans against it.
pub fn plan<D: Dynamics + ?Sized>(
    dynamics: &D,
    reward: &NavigationReward,
    grid: &Grid,
    horizon: usize,
    delta: f64,
    sigma: f64,
    mode: TransitionMode,
) -> Result<GridPolicy> {
    let table = DynamicsTable::from_dynamics(grid, dynamics)?;
    let trans = TransitionTable::from_dynamics(grid, &table, delta, sigma, mode)?;
    value_iteration(&trans, &RewardTable::navigation(grid, reward), horizon)
}

/// A [`GridPolicy`] acting on continuous states via the nearest cell.
pub struct GridController<'a> {
    pub grid: &'a Grid,
    pub policy: &'a GridPolicy,
}

impl Policy for GridController<'_> {
    fn action(&self, state: &[f64], h: usize) -> Vec<f64> {
        let cell = self.grid.nearest_cell(state);
        self.grid.action(self.policy.action(h, cell)).to_vec()
    }
}
