//! Empirical checks of the concentration and rate statements behind the
//! regret analysis: information gain, log-log rate fits, Gaussian suprema
//! tails, the chi-squared moment bound, the delayed elliptical potential and
//! the state-norm radius.
//!
//! Every Monte-Carlo check samples the GP exactly on a finite point set, so
//! the premises of the inequality being tested hold without approximation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gp::{FiniteGpSampler, GpPosterior};
use crate::kernels::{Kernel, Smoothness};

/// Outcome of one inequality `lhs <= rhs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub lemma_tag: String,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub pass: bool,
}

impl Verdict {
    pub fn at_most(tag: &str, lhs: f64, rhs: f64) -> Self {
        Self {
            lemma_tag: tag.to_string(),
            lhs,
            rhs,
            margin: rhs - lhs,
            pass: lhs <= rhs,
        }
    }
}

/// Ordinary least squares on `(log x, log y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log space.
    pub residual: f64,
    /// Smallest and largest `x` used.
    pub window: (f64, f64),
    pub points: usize,
}

pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Result<RateFit> {
    fit_loglog_window(xs, ys, f64::NEG_INFINITY, f64::INFINITY)
}

/// Fits only the pairs with `lo <= x <= hi`.
pub fn fit_loglog_window(xs: &[f64], ys: &[f64], lo: f64, hi: f64) -> Result<RateFit> {
    check_dim(xs.len(), ys.len())?;
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, _)| **x >= lo && **x <= hi)
        .map(|(x, y)| (*x, *y))
        .collect();
    if pts.len() < 3 {
        return Err(Error::invalid("fit window", format!("needs at least 3 points, got {}", pts.len())));
    }
    if let Some((x, y)) = pts.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0)) {
        return Err(Error::invalid("fit window", format!("non-positive pair ({x}, {y})")));
    }
    let n = pts.len() as f64;
    let lx: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("fit window", "all x values coincide"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    Ok(RateFit {
        slope,
        intercept,
        residual: (sse / n).sqrt(),
        window: (pts[0].0, pts[pts.len() - 1].0),
        points: pts.len(),
    })
}

/// Episode window `[ceil(N / 10), N]` that drops the burn-in transient.
pub fn burn_in_window(episodes: usize) -> (f64, f64) {
    ((episodes as f64 / 10.0).ceil().max(1.0), episodes as f64)
}

/// Exponent of `T` in the Matérn information-gain bound, `d / (2ν + d)`.
pub fn matern_gain_exponent(nu: Smoothness, input_dim: usize) -> f64 {
    let d = input_dim as f64;
    d / (2.0 * nu.nu() + d)
}

/// Exponent of `T` in the Matérn regret bound, `(ν + d) / (2ν + d)`.
pub fn matern_regret_exponent(nu: Smoothness, input_dim: usize) -> f64 {
    let d = input_dim as f64;
    (nu.nu() + d) / (2.0 * nu.nu() + d)
}

/// Greedily selected points and the information gain they accumulate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfoGainCurve {
    /// Grid index chosen at each step.
    pub selected: Vec<usize>,
    pub increments: Vec<f64>,
    /// `γ̂_t` for `t = 1..=T`.
    pub cumulative: Vec<f64>,
    pub noise_variance: f64,
    pub grid_size: usize,
}

impl InfoGainCurve {
    /// `γ̂_t` with `t` 1-based.
    pub fn gain(&self, t: usize) -> f64 {
        self.cumulative[t - 1]
    }
}

/// `(1/2) log det(K / σ² + I)` over `points`.
pub fn log_det_gain(kernel: &Kernel, points: &[Vec<f64>], noise_variance: f64) -> Result<f64> {
    if points.is_empty() {
        return Ok(0.0);
    }
    let mut k = kernel.gram(points)? / noise_variance;
    for i in 0..k.nrows() {
        k[(i, i)] += 1.0;
    }
    let l = crate::gp::cholesky_lower(k)?;
    Ok(l.diagonal().iter().map(|d| d.ln()).sum())
}

/// Greedy lower bound on the maximum information gain over a finite grid.
///
/// Step `t` picks the grid point of largest posterior variance given noisy
/// observations at the earlier picks (lowest index on ties) and adds
/// `(1/2) log(1 + σ²_{t-1}(x_t) / σ²)`. The increments telescope to the
/// log-determinant gain of the selected set. Points may repeat.
pub fn greedy_info_gain(kernel: &Kernel, grid: &[Vec<f64>], steps: usize, noise_variance: f64) -> Result<InfoGainCurve> {
    if grid.is_empty() {
        return Err(Error::Empty("information-gain grid"));
    }
    if steps == 0 {
        return Err(Error::invalid("steps", "must be at least 1"));
    }
    if !(noise_variance > 0.0) {
        return Err(Error::invalid("noise_variance", "must be positive"));
    }
    for p in grid {
        check_dim(kernel.input_dim(), p.len())?;
    }
    let g = grid.len();
    let mut var: Vec<f64> = grid.iter().map(|p| kernel.eval_unchecked(p, p)).collect();
    // Row t holds the t-th column of the incremental factor over the grid.
    let mut factor: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut selected = Vec::with_capacity(steps);
    let mut increments = Vec::with_capacity(steps);
    let mut cumulative = Vec::with_capacity(steps);
    let mut total = 0.0;
    for _ in 0..steps {
        let mut best = 0;
        for i in 1..g {
            if var[i] > var[best] {
                best = i;
            }
        }
        let v = var[best].max(0.0);
        let inc = 0.5 * (v / noise_variance).ln_1p();
        let scale = (v + noise_variance).sqrt();
        let xb = &grid[best];
        let row: Vec<f64> = (0..g)
            .map(|i| {
                let mut c = kernel.eval_unchecked(&grid[i], xb);
                for r in &factor {
                    c -= r[i] * r[best];
                }
                c / scale
            })
            .collect();
        for (vi, ri) in var.iter_mut().zip(&row) {
            *vi -= ri * ri;
        }
        factor.push(row);
        total += inc;
        selected.push(best);
        increments.push(inc);
        cumulative.push(total);
    }
    Ok(InfoGainCurve {
        selected,
        increments,
        cumulative,
        noise_variance,
        grid_size: g,
    })
}

/// Points of the tensor grid with `knots` per axis over `[-r, r]^dim` that lie
/// in the closed ball of radius `r`.
pub fn ball_grid(dim: usize, radius: f64, knots: usize) -> Vec<Vec<f64>> {
    let axis: Vec<f64> = if knots == 1 {
        vec![0.0]
    } else {
        (0..knots)
            .map(|i| -radius + 2.0 * radius * i as f64 / (knots - 1) as f64)
            .collect()
    };
    let mut pts = vec![Vec::new()];
    for _ in 0..dim {
        pts = pts
            .into_iter()
            .flat_map(|p: Vec<f64>| {
                axis.iter().map(move |a| {
                    let mut q = p.clone();
                    q.push(*a);
                    q
                })
            })
            .collect();
    }
    let r2 = radius * radius * (1.0 + 1e-12);
    pts.retain(|p| p.iter().map(|v| v * v).sum::<f64>() <= r2);
    pts
}

/// Fits `log γ̂_T` against `log T` from one greedy run up to `max(ts)`.
pub fn matern_rate_check(kernel: &Kernel, grid: &[Vec<f64>], ts: &[usize], noise_variance: f64) -> Result<(RateFit, InfoGainCurve)> {
    if ts.len() < 4 {
        return Err(Error::invalid("ts", "need at least 4 horizons"));
    }
    let lo = *ts.iter().min().unwrap();
    let hi = *ts.iter().max().unwrap();
    if lo == 0 || hi < 10 * lo {
        return Err(Error::invalid("ts", "must be positive and span a factor of 10"));
    }
    let curve = greedy_info_gain(kernel, grid, hi, noise_variance)?;
    let xs: Vec<f64> = ts.iter().map(|t| *t as f64).collect();
    let ys: Vec<f64> = ts.iter().map(|t| curve.gain(*t)).collect();
    Ok((fit_loglog(&xs, &ys)?, curve))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailVariant {
    /// `sup f - E sup f` for one scalar GP, bound `exp(-u²/2C)`.
    ScalarCentered,
    /// `sup ‖f‖ - E sup ‖f‖` for independent outputs, bound `exp(-u²/2C)`.
    NormCentered,
    /// `sup ‖f‖` itself, bound `exp(-u²/8C)` above the norm-tail threshold.
    NormUncentered,
}

impl TailVariant {
    pub fn label(self) -> &'static str {
        match self {
            TailVariant::ScalarCentered => "btis_scalar",
            TailVariant::NormCentered => "btis_norm",
            TailVariant::NormUncentered => "norm_tail",
        }
    }

    fn bound(self, u: f64, variance: f64) -> f64 {
        let k = match self {
            TailVariant::NormUncentered => 8.0,
            _ => 2.0,
        };
        if u <= 0.0 {
            1.0
        } else {
            (-u * u / (k * variance)).exp()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub variant: TailVariant,
    pub u: f64,
    pub bound: f64,
    pub frequency: f64,
    /// Binomial standard deviation of the frequency at the bound.
    pub std: f64,
    pub samples: usize,
    pub pass: bool,
}

impl TailRow {
    pub fn verdict(&self) -> Verdict {
        Verdict::at_most(self.variant.label(), self.frequency, self.bound + 3.0 * self.std)
    }
}

/// Smallest `u` at which the uncentered norm tail bound is asserted:
/// `84 α^{-1/2} sqrt(C d log(5 + 5 R^α L / C))`.
pub fn norm_tail_threshold(kernel: &Kernel, radius: f64) -> f64 {
    let c = kernel.variance();
    let a = kernel.holder_exponent();
    let l = kernel.holder_constant();
    let d = kernel.input_dim() as f64;
    84.0 / a.sqrt() * (c * d * (5.0 + 5.0 * radius.powf(a) * l / c).ln()).sqrt()
}

fn draw_sups<R: Rng + ?Sized>(
    sampler: &FiniteGpSampler,
    outputs: usize,
    variant: TailVariant,
    n: usize,
    rng: &mut R,
) -> Vec<f64> {
    (0..n)
        .map(|_| match variant {
            TailVariant::ScalarCentered => sampler.sample(rng).max(),
            _ => {
                let mut sq = vec![0.0; sampler.dim()];
                for _ in 0..outputs {
                    for (acc, v) in sq.iter_mut().zip(sampler.sample(rng).iter()) {
                        *acc += v * v;
                    }
                }
                sq.into_iter().fold(0.0, f64::max).sqrt()
            }
        })
        .collect()
}

fn tail_rows<R: Rng + ?Sized>(
    sampler: &FiniteGpSampler,
    variance: f64,
    outputs: usize,
    thresholds: &[f64],
    variant: TailVariant,
    n: usize,
    rng: &mut R,
) -> Vec<TailRow> {
    let centre = match variant {
        TailVariant::NormUncentered => 0.0,
        _ => draw_sups(sampler, outputs, variant, n, rng).iter().sum::<f64>() / n as f64,
    };
    let sups = draw_sups(sampler, outputs, variant, n, rng);
    thresholds
        .iter()
        .map(|&u| {
            let bound = variant.bound(u, variance);
            let hits = sups.iter().filter(|s| **s - centre >= u).count();
            let frequency = hits as f64 / n as f64;
            let std = (bound * (1.0 - bound) / n as f64).sqrt();
            TailRow {
                variant,
                u,
                bound,
                frequency,
                std,
                samples: n,
                pass: frequency <= bound + 3.0 * std,
            }
        })
        .collect()
}

/// Empirical tail of the supremum of a zero-mean GP over `points`.
///
/// The centre `E sup` is estimated from an independent batch of the same
/// size. If any threshold fails, the whole table is redrawn once with four
/// times the samples and that second table is reported.
pub fn btis_tail_check<R: Rng + ?Sized>(
    kernel: &Kernel,
    points: &[Vec<f64>],
    outputs: usize,
    thresholds: &[f64],
    variant: TailVariant,
    num_samples: usize,
    rng: &mut R,
) -> Result<Vec<TailRow>> {
    if num_samples < 1000 {
        return Err(Error::invalid("num_samples", "need at least 1000"));
    }
    if points.is_empty() {
        return Err(Error::Empty("tail-check points"));
    }
    if variant == TailVariant::ScalarCentered && outputs != 1 {
        return Err(Error::invalid("outputs", "scalar variant has one output"));
    }
    let sampler = FiniteGpSampler::centered(kernel.gram(points)?)?;
    let c = kernel.variance();
    let rows = tail_rows(&sampler, c, outputs, thresholds, variant, num_samples, rng);
    if rows.iter().all(|r| r.pass) {
        return Ok(rows);
    }
    log::info!("{} tail check failed at {num_samples} samples, retrying", variant.label());
    Ok(tail_rows(&sampler, c, outputs, thresholds, variant, 4 * num_samples, rng))
}

/// Monte-Carlo estimate of the chi-squared exponential-moment quantity
/// `E[sup_{x∈Z} ‖f⁽ⁿ⁾(x) - f*(x)‖² / (8 σ²_{n-1}(x))]`, where `f⁽ⁿ⁾` and `f*`
/// are independent draws from `posterior` on the probe set `Z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub bound: f64,
    pub samples: usize,
}

impl MomentEstimate {
    pub fn verdict(&self) -> Verdict {
        Verdict::at_most("chi_squared_moment", self.mean, self.bound + 3.0 * self.std_error)
    }
}

fn moment_estimate<R: Rng + ?Sized>(
    sampler: &FiniteGpSampler,
    var: &[f64],
    outputs: usize,
    n: usize,
    bound: f64,
    rng: &mut R,
) -> MomentEstimate {
    let vals: Vec<f64> = (0..n)
        .map(|_| {
            let mut sq = vec![0.0; var.len()];
            for _ in 0..outputs {
                let a = sampler.sample(rng);
                let b = sampler.sample(rng);
                for (k, acc) in sq.iter_mut().enumerate() {
                    *acc += (a[k] - b[k]).powi(2);
                }
            }
            sq.iter().zip(var).map(|(s, v)| s / (8.0 * v)).fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let m = vals.iter().sum::<f64>() / n as f64;
    let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    MomentEstimate {
        mean: m,
        std_error: sd / (n as f64).sqrt(),
        bound,
        samples: n,
    }
}

/// Checks `E[...] <= log|Z| + d_s log √2` for the outputs of `posterior`,
/// with one rerun at four times the samples on failure.
pub fn chi_squared_check<R: Rng + ?Sized>(
    posterior: &GpPosterior,
    probes: &[Vec<f64>],
    num_pairs: usize,
    rng: &mut R,
) -> Result<MomentEstimate> {
    if probes.is_empty() {
        return Err(Error::Empty("probe set"));
    }
    if num_pairs < 2 {
        return Err(Error::invalid("num_pairs", "need at least 2"));
    }
    let cov = posterior.covariance_matrix(probes)?;
    let var = posterior.variances(probes)?;
    let sampler = FiniteGpSampler::centered(cov)?;
    let outputs = posterior.data().output_dim();
    let bound = (probes.len() as f64).ln() + outputs as f64 * std::f64::consts::SQRT_2.ln();
    let est = moment_estimate(&sampler, &var, outputs, num_pairs, bound, rng);
    if est.verdict().pass {
        return Ok(est);
    }
    Ok(moment_estimate(&sampler, &var, outputs, 4 * num_pairs, bound, rng))
}

/// One visited state-action pair and the posterior variance logged for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoggedStep {
    pub input: Vec<f64>,
    /// `σ²_{n-1}(x_{n,h})`, the variance before the episode's own data.
    pub post_var: f64,
    /// Whether a successor was observed, i.e. `h <= H-1`.
    pub observed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VarianceLog {
    pub episodes: Vec<Vec<LoggedStep>>,
}

/// Exact posterior variances `σ²_{n-1}(x_{n,h})` recomputed from the logged
/// inputs. Only observed steps condition later episodes.
pub fn replay_variances(log: &VarianceLog, kernel: &Kernel, noise_variance: f64) -> Result<Vec<Vec<f64>>> {
    let mut gp = GpPosterior::prior(kernel.clone(), 1, noise_variance)?;
    let mut out = Vec::with_capacity(log.episodes.len());
    for ep in &log.episodes {
        let inputs: Vec<Vec<f64>> = ep.iter().map(|s| s.input.clone()).collect();
        out.push(gp.variances(&inputs)?);
        let observed: Vec<Vec<f64>> = ep.iter().filter(|s| s.observed).map(|s| s.input.clone()).collect();
        let zeros = vec![vec![0.0]; observed.len()];
        gp.append_mut(&observed, &zeros)?;
    }
    Ok(out)
}

/// Largest disagreement between logged and replayed variances, in units of
/// the tolerance `1e-9 + 1e-6 σ²`; the log is consistent when this is at
/// most 1.
pub fn log_consistency(log: &VarianceLog, replay: &[Vec<f64>]) -> Verdict {
    let worst = log
        .episodes
        .iter()
        .zip(replay)
        .flat_map(|(ep, vars)| ep.iter().zip(vars))
        .map(|(s, v)| (s.post_var - v).abs() / (1e-9 + 1e-6 * v))
        .fold(0.0, f64::max);
    Verdict::at_most("log_consistency", worst, 1.0)
}

/// Delayed elliptical potential. The left side sums the replayed variances
/// of observed steps; the right side is
/// `(2CH / log(1 + C/σ²)) · (1/2) log det(C̄_N/σ² + I)`, where `C̄_N` is the
/// Gram matrix of each episode's maximum-variance observed input.
pub fn elliptical_potential_from_replay(
    log: &VarianceLog,
    replay: &[Vec<f64>],
    kernel: &Kernel,
    noise_variance: f64,
    horizon: usize,
) -> Result<Verdict> {
    check_dim(log.episodes.len(), replay.len())?;
    let c = kernel.variance();
    let mut lhs = 0.0;
    let mut max_points = Vec::with_capacity(log.episodes.len());
    for (n, (ep, vars)) in log.episodes.iter().zip(replay).enumerate() {
        if ep.len() != horizon || vars.len() != horizon {
            return Err(Error::LogMismatch(format!("episode {} has {} steps, expected {horizon}", n + 1, ep.len())));
        }
        let mut best: Option<usize> = None;
        for h in (0..horizon).filter(|h| ep[*h].observed) {
            lhs += vars[h];
            if best.map_or(true, |b| vars[h] > vars[b]) {
                best = Some(h);
            }
        }
        if let Some(b) = best {
            max_points.push(ep[b].input.clone());
        }
    }
    let gain = log_det_gain(kernel, &max_points, noise_variance)?;
    let rhs = 2.0 * c * horizon as f64 / (c / noise_variance).ln_1p() * gain;
    Ok(Verdict::at_most("elliptical_potential", lhs, rhs))
}

/// Replays the log, rejects it with [`Error::LogMismatch`] if the logged
/// variances disagree with the replay, and checks the delayed elliptical
/// potential inequality.
pub fn elliptical_potential_check(log: &VarianceLog, kernel: &Kernel, noise_variance: f64, horizon: usize) -> Result<Verdict> {
    let replay = replay_variances(log, kernel, noise_variance)?;
    let consistency = log_consistency(log, &replay);
    if !consistency.pass {
        return Err(Error::LogMismatch(format!(
            "logged posterior variances disagree with the replay ({:.3e} tolerances)",
            consistency.lhs
        )));
    }
    elliptical_potential_from_replay(log, &replay, kernel, noise_variance, horizon)
}

/// Inputs to the high-probability state-norm radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusParams {
    pub total_steps: usize,
    pub action_radius: f64,
    /// Kernel variance bound `C`.
    pub variance: f64,
    /// Transition noise variance `σ²`.
    pub noise_variance: f64,
    pub holder_constant: f64,
    pub holder_exponent: f64,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl RadiusParams {
    fn validate(&self) -> Result<()> {
        let positive = [
            self.action_radius,
            self.variance,
            self.noise_variance,
            self.holder_constant,
            self.holder_exponent,
        ];
        if self.total_steps == 0 || self.state_dim == 0 || self.action_dim == 0 || positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("radius parameters", "all must be positive"));
        }
        Ok(())
    }

    /// `D = 168 α^{-1/2} sqrt(max(C, σ²)(d_s + d_a))`.
    pub fn scale(&self) -> f64 {
        168.0 / self.holder_exponent.sqrt()
            * (self.variance.max(self.noise_variance) * (self.state_dim + self.action_dim) as f64).sqrt()
    }

    fn ratio(&self) -> f64 {
        (self.holder_constant / self.variance).max(1.0)
    }

    /// Smallest `T` for which the radius guarantee applies.
    pub fn min_total_steps(&self) -> f64 {
        let d = self.scale();
        d * (2.0 * (10.0 * d * self.ratio() * (self.action_radius + 1.0)).ln()).sqrt()
    }
}

/// `R = D sqrt(log(10 (T + R_a) max(1, L/C)))`.
pub fn state_norm_radius(p: &RadiusParams) -> Result<f64> {
    p.validate()?;
    if (p.total_steps as f64) < p.min_total_steps() {
        log::warn!(
            "T = {} is below the minimum {:.1} for the state-norm radius guarantee",
            p.total_steps,
            p.min_total_steps()
        );
    }
    let t = p.total_steps as f64;
    Ok(p.scale() * (10.0 * (t + p.action_radius) * p.ratio()).ln().sqrt())
}

/// Fraction of runs whose largest state norm exceeds `radius`, against
/// `2/T + 3` binomial standard deviations.
pub fn containment_check(max_norms: &[f64], radius: f64, total_steps: usize) -> Verdict {
    let n = max_norms.len().max(1) as f64;
    let frac = max_norms.iter().filter(|m| **m > radius).count() as f64 / n;
    let p = (2.0 / total_steps as f64).min(1.0);
    Verdict::at_most("bounded_states", frac, p + 3.0 * (p * (1.0 - p) / n).sqrt())
}
