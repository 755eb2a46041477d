use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use gppsrl::analysis::{
    ball_grid, btis_tail_check, burn_in_window, chi_squared_check, containment_check, elliptical_potential_from_replay,
    fit_loglog, fit_loglog_window, log_consistency, matern_gain_exponent, norm_tail_threshold, replay_variances,
    state_norm_radius, InfoGainCurve, RadiusParams, RateFit, TailRow, TailVariant, Verdict,
};
use gppsrl::gp::{Dataset, GpPosterior};
use gppsrl::kernels::{Kernel, KernelFamily};
use gppsrl::psrl::{run_seeds, seed_for, RegretCurve, SeedRun};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::output::{self, Provenance, RateRow, Table};

const STREAM_TAILS: u64 = 10;
const STREAM_CHI: u64 = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Run,
    SweepHorizon,
    Infogain,
    Verify,
}

/// How an invocation failed; decides the exit status.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
    /// Checks that ran but did not hold, by tag.
    Checks(Vec<String>),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) | Failure::Checks(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "config error: {e:#}"),
            Failure::Runtime(e) => write!(f, "error: {e:#}"),
            Failure::Checks(tags) => write!(f, "failed checks: {}", tags.join(", ")),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

/// A parsed config plus the raw bytes it was read from (for provenance).
#[derive(Clone, Debug)]
pub struct Invocation {
    pub config: ExperimentConfig,
    pub config_bytes: Vec<u8>,
    pub out: PathBuf,
}

impl Invocation {
    pub fn load(path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<Self, Failure> {
        let (mut config, config_bytes) = ExperimentConfig::load(path).map_err(Failure::Config)?;
        if let Some(s) = seed {
            config.seed = s;
        }
        let out = out.unwrap_or_else(|| config.out.clone());
        Ok(Self {
            config,
            config_bytes,
            out,
        })
    }

    pub fn from_config(config: ExperimentConfig, config_bytes: Vec<u8>, out: PathBuf) -> Self {
        Self {
            config,
            config_bytes,
            out,
        }
    }

    fn provenance(&self) -> Provenance {
        Provenance::new(&self.config_bytes, self.config.seed)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

pub fn execute(cmd: Command, inv: &Invocation) -> Result<(), Failure> {
    fs::create_dir_all(&inv.out)
        .with_context(|| format!("creating {}", inv.out.display()))
        .map_err(Failure::Runtime)?;
    match cmd {
        Command::Run => cmd_run(inv),
        Command::SweepHorizon => cmd_sweep_horizon(inv),
        Command::Infogain => cmd_infogain(inv),
        Command::Verify => cmd_verify(inv),
    }
}

/// All seeds of one configured kernel.
pub struct KernelRuns {
    pub label: String,
    pub kernel: Kernel,
    pub runs: Vec<SeedRun>,
}

impl KernelRuns {
    /// `None` with a single seed.
    pub fn curve(&self) -> Option<RegretCurve> {
        RegretCurve::from_runs(&self.runs).ok()
    }

    pub fn mean_curve(&self) -> Vec<f64> {
        match self.curve() {
            Some(c) => c.mean,
            None => self.runs[0].records.iter().map(|r| r.cum_regret).collect(),
        }
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> anyhow::Result<Vec<KernelRuns>> {
    let seeds = cfg.seeds();
    (0..cfg.kernels.len())
        .map(|k| {
            let rc = cfg.run_config(k)?;
            let label = cfg.kernels[k].label();
            log::info!("running {label} over {} seeds", seeds.len());
            let runs = run_seeds(&rc, &seeds)?;
            Ok(KernelRuns {
                label,
                kernel: rc.kernel,
                runs,
            })
        })
        .collect()
}

/// Slope of log mean cumulative regret against log episode after burn-in.
pub fn regret_rate(curve: &[f64]) -> Option<RateFit> {
    let xs: Vec<f64> = (1..=curve.len()).map(|n| n as f64).collect();
    let (lo, hi) = burn_in_window(curve.len());
    fit_loglog_window(&xs, curve, lo, hi).ok()
}

fn regret_reference(kernel: &Kernel) -> f64 {
    match kernel.family() {
        KernelFamily::SquaredExponential => 0.5,
        KernelFamily::Matern(nu) => gppsrl::analysis::matern_regret_exponent(nu, kernel.input_dim()),
    }
}

fn labelled(results: &[KernelRuns]) -> Vec<(String, Vec<SeedRun>)> {
    results.iter().map(|k| (k.label.clone(), k.runs.clone())).collect()
}

/// Rewrites `rates.csv`, keeping rows of other kinds from an earlier command.
fn merge_rates(inv: &Invocation, kind: &str, rows: &[RateRow]) -> anyhow::Result<()> {
    let path = inv.path("rates.csv");
    let mut kept: Vec<csv::StringRecord> = Vec::new();
    if path.exists() {
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(&path)?;
        for rec in reader.records() {
            let rec = rec?;
            if rec.get(0) != Some(kind) {
                kept.push(rec);
            }
        }
    }
    let mut table = output::rates_table(&[])?;
    for rec in kept {
        table.row(&rec.iter().map(str::to_string).collect::<Vec<_>>())?;
    }
    output::append_rates(&mut table, rows)?;
    table.save(&path, &inv.provenance())
}

fn write_run_outputs(inv: &Invocation, results: &[KernelRuns]) -> anyhow::Result<()> {
    let prov = inv.provenance();
    let runs = labelled(results);
    output::regret_table(&runs)?.save(&inv.path("regret.csv"), &prov)?;
    output::trajectory_table(&runs, inv.config.mdp.state_dim, inv.config.mdp.action_dim)?
        .save(&inv.path("traj.csv"), &prov)?;
    Ok(())
}

fn cmd_run(inv: &Invocation) -> Result<(), Failure> {
    let results = run_experiment(&inv.config)?;
    write_run_outputs(inv, &results)?;
    let fits: Vec<(String, RateFit, f64)> = results
        .iter()
        .filter_map(|k| regret_rate(&k.mean_curve()).map(|f| (k.label.clone(), f, regret_reference(&k.kernel))))
        .collect();
    let rows: Vec<RateRow> = fits
        .iter()
        .map(|(label, fit, reference)| RateRow {
            kind: "regret_vs_episode",
            kernel: label,
            fit,
            reference: Some(*reference),
        })
        .collect();
    merge_rates(inv, "regret_vs_episode", &rows)?;
    for k in &results {
        match k.curve() {
            Some(c) => println!(
                "{}: final mean cumulative regret {:.4} ± {:.4} over {} seeds",
                k.label,
                c.final_mean(),
                c.final_std_error(),
                c.num_seeds
            ),
            None => println!("{}: final cumulative regret {:.4} (1 seed)", k.label, k.runs[0].final_regret()),
        }
    }
    Ok(())
}

/// Mean and standard error of final cumulative regret per horizon.
pub struct HorizonPoint {
    pub horizon: usize,
    pub mean: f64,
    pub std_error: f64,
}

pub fn horizon_sweep(cfg: &ExperimentConfig) -> anyhow::Result<(Vec<HorizonPoint>, Option<RateFit>)> {
    let seeds = cfg.seeds();
    let mut points = Vec::new();
    for &h in &cfg.sweep.horizons {
        let mut rc = cfg.run_config(cfg.sweep.kernel)?;
        rc.mdp.horizon = h;
        rc.log_posterior_variance = false;
        log::info!("horizon {h}");
        let runs = run_seeds(&rc, &seeds)?;
        let finals: Vec<f64> = runs.iter().map(SeedRun::final_regret).collect();
        let n = finals.len() as f64;
        let mean = finals.iter().sum::<f64>() / n;
        let std_error = if finals.len() > 1 {
            (finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        points.push(HorizonPoint {
            horizon: h,
            mean,
            std_error,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.horizon as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mean).collect();
    Ok((points, fit_loglog(&xs, &ys).ok()))
}

fn cmd_sweep_horizon(inv: &Invocation) -> Result<(), Failure> {
    let (points, fit) = horizon_sweep(&inv.config)?;
    let mut t = Table::with_header(&["horizon", "mean_final_regret", "std_error"])?;
    for p in &points {
        t.row(&[p.horizon.to_string(), format!("{}", p.mean), format!("{}", p.std_error)])?;
        println!("H = {}: final mean cumulative regret {:.4} ± {:.4}", p.horizon, p.mean, p.std_error);
    }
    t.save(&inv.path("horizon.csv"), &inv.provenance())?;
    let label = inv.config.kernels[inv.config.sweep.kernel].label();
    let rows: Vec<RateRow> = fit
        .iter()
        .map(|f| RateRow {
            kind: "regret_vs_horizon",
            kernel: &label,
            fit: f,
            reference: Some(1.5),
        })
        .collect();
    merge_rates(inv, "regret_vs_horizon", &rows)?;
    match fit {
        Some(f) => println!("slope of log regret vs log H: {:.4}", f.slope),
        None => println!("too few horizons for a slope"),
    }
    Ok(())
}

/// Greedy information gain per kernel, with a rate fit when `ts` allows.
pub struct GainResult {
    pub label: String,
    pub curve: InfoGainCurve,
    pub fit: Option<RateFit>,
    pub reference: Option<f64>,
}

pub fn info_gain(cfg: &ExperimentConfig) -> anyhow::Result<Vec<GainResult>> {
    let ig = &cfg.infogain;
    let d = cfg.mdp.input_dim();
    let grid = ball_grid(d, ig.radius, ig.knots);
    let noise = match ig.noise_variance {
        Some(v) => v,
        None => cfg.run_config(0)?.gp_noise(),
    };
    let steps = ig.ts.iter().copied().max().unwrap_or(1);
    (0..cfg.kernels.len())
        .map(|k| {
            let kernel = cfg.kernel(k)?;
            let curve = gppsrl::analysis::greedy_info_gain(&kernel, &grid, steps, noise)?;
            let xs: Vec<f64> = ig.ts.iter().map(|t| *t as f64).collect();
            let ys: Vec<f64> = ig.ts.iter().map(|t| curve.gain(*t)).collect();
            let reference = match kernel.family() {
                KernelFamily::Matern(nu) => Some(matern_gain_exponent(nu, d)),
                KernelFamily::SquaredExponential => None,
            };
            Ok(GainResult {
                label: cfg.kernels[k].label(),
                curve,
                fit: fit_loglog(&xs, &ys).ok(),
                reference,
            })
        })
        .collect()
}

fn cmd_infogain(inv: &Invocation) -> Result<(), Failure> {
    let results = info_gain(&inv.config)?;
    let curves: Vec<(String, InfoGainCurve)> = results.iter().map(|r| (r.label.clone(), r.curve.clone())).collect();
    output::infogain_table(&curves)?.save(&inv.path("infogain.csv"), &inv.provenance())?;
    let rows: Vec<RateRow> = results
        .iter()
        .filter_map(|r| {
            r.fit.as_ref().map(|fit| RateRow {
                kind: "gain_vs_t",
                kernel: &r.label,
                fit,
                reference: r.reference,
            })
        })
        .collect();
    merge_rates(inv, "gain_vs_t", &rows)?;
    for r in &results {
        let last = r.curve.cumulative.last().copied().unwrap_or(0.0);
        match &r.fit {
            Some(f) => println!("{}: gamma_T = {:.4} at T = {}, slope {:.4}", r.label, last, r.curve.cumulative.len(), f.slope),
            None => println!("{}: gamma_T = {:.4} at T = {}", r.label, last, r.curve.cumulative.len()),
        }
    }
    Ok(())
}

/// Elliptical-potential and log-consistency verdicts for every logged run.
pub fn check_logs(cfg: &ExperimentConfig, logs: &output::LogIndex) -> anyhow::Result<Vec<Verdict>> {
    let mut out = Vec::new();
    for ((label, seed), log) in logs {
        let k = cfg
            .kernels
            .iter()
            .position(|s| &s.label() == label)
            .ok_or_else(|| anyhow!("trajectory log mentions kernel `{label}`, which is not in the config"))?;
        let kernel = cfg.kernel(k)?;
        let noise = cfg.run_config(k)?.gp_noise();
        let replay = replay_variances(log, &kernel, noise)?;
        let mut consistency = log_consistency(log, &replay);
        consistency.lemma_tag = format!("log_consistency:{label}:seed={seed}");
        if !consistency.pass {
            log::error!("{}: logged posterior variances disagree with the replay", consistency.lemma_tag);
        }
        out.push(consistency);
        let mut v = elliptical_potential_from_replay(log, &replay, &kernel, noise, cfg.mdp.horizon)?;
        v.lemma_tag = format!("elliptical_potential:{label}:seed={seed}");
        out.push(v);
    }
    Ok(out)
}

fn tagged(mut v: Verdict, tag: String) -> Verdict {
    v.lemma_tag = tag;
    v
}

/// Tail tables for the scalar and norm suprema on a disc grid.
pub fn tail_checks(cfg: &ExperimentConfig) -> anyhow::Result<Vec<TailRow>> {
    let vc = &cfg.verify;
    let kernel = cfg.kernels[0].build(2)?;
    let points = ball_grid(2, vc.tail_radius, vc.tail_knots);
    let root_c = kernel.variance().sqrt();
    let us: Vec<f64> = vc.tail_thresholds.iter().map(|m| m * root_c).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_TAILS);
    let n = vc.tail_samples;
    let mut rows = btis_tail_check(&kernel, &points, 1, &us, TailVariant::ScalarCentered, n, &mut rng)?;
    rows.extend(btis_tail_check(&kernel, &points, cfg.mdp.state_dim, &us, TailVariant::NormCentered, n, &mut rng)?);
    let threshold = norm_tail_threshold(&kernel, vc.tail_radius);
    rows.extend(btis_tail_check(
        &kernel,
        &points,
        cfg.mdp.state_dim,
        &[threshold, 1.5 * threshold],
        TailVariant::NormUncentered,
        n,
        &mut rng,
    )?);
    Ok(rows)
}

pub fn chi_squared_verdict(cfg: &ExperimentConfig) -> anyhow::Result<Verdict> {
    let vc = &cfg.verify;
    let kernel = cfg.kernel(0)?;
    let noise = cfg.run_config(0)?.gp_noise();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_CHI);
    let w = cfg.mdp.arena_half_width;
    let b = cfg.mdp.action_bound;
    let (ds, da) = (cfg.mdp.state_dim, cfg.mdp.action_dim);
    let point = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut x: Vec<f64> = (0..ds).map(|_| rng.random_range(-w..=w)).collect();
        x.extend((0..da).map(|_| rng.random_range(-b..=b)));
        x
    };
    let mut data = Dataset::new(ds + da, ds, noise)?;
    for _ in 0..vc.chi_squared_conditioning {
        let x = point(&mut rng);
        data.push(x, vec![0.0; ds])?;
    }
    let probes: Vec<Vec<f64>> = (0..vc.chi_squared_probes).map(|_| point(&mut rng)).collect();
    let gp = GpPosterior::new(kernel, data)?;
    let est = chi_squared_check(&gp, &probes, vc.chi_squared_pairs, &mut rng)?;
    Ok(est.verdict())
}

pub struct Containment {
    pub verdict: Verdict,
    pub largest_norm: f64,
    pub radius: f64,
}

/// Runs cheap seeded copies of the experiment and compares the largest
/// state norm of each against the high-probability radius.
pub fn containment_verdict(cfg: &ExperimentConfig) -> anyhow::Result<Containment> {
    let vc = &cfg.verify;
    let mut rc = cfg.run_config(0)?;
    rc.grid = vc.containment_grid;
    rc.num_features = vc.containment_features;
    rc.log_posterior_variance = false;
    rc.mdp.initial_state = cfg.theory_initial_state();
    let seeds: Vec<u64> = (0..vc.containment_runs).map(|i| seed_for(cfg.seed, i)).collect();
    let runs = run_seeds(&rc, &seeds)?;
    let norms: Vec<f64> = runs.iter().map(SeedRun::max_state_norm).collect();
    let kernel = &rc.kernel;
    let params = RadiusParams {
        total_steps: rc.mdp.total_steps(),
        action_radius: rc.mdp.action_radius(),
        variance: kernel.variance(),
        noise_variance: rc.mdp.sigma.powi(2),
        holder_constant: kernel.holder_constant(),
        holder_exponent: kernel.holder_exponent(),
        state_dim: rc.mdp.state_dim,
        action_dim: rc.mdp.action_dim,
    };
    let radius = state_norm_radius(&params)?;
    Ok(Containment {
        verdict: containment_check(&norms, radius, params.total_steps),
        largest_norm: norms.iter().copied().fold(0.0, f64::max),
        radius,
    })
}

fn cmd_verify(inv: &Invocation) -> Result<(), Failure> {
    let cfg = &inv.config;
    let traj = inv.path("traj.csv");
    if !traj.exists() {
        log::info!("no trajectory log in {}, running the experiment first", inv.out.display());
        let mut logged = cfg.clone();
        logged.log_posterior_variance = true;
        write_run_outputs(inv, &run_experiment(&logged)?)?;
    }
    let logs = output::read_trajectory_logs(&traj, cfg.mdp.state_dim, cfg.mdp.action_dim)?;
    let mut verdicts = check_logs(cfg, &logs)?;

    let tails = tail_checks(cfg)?;
    output::tails_table(&tails)?.save(&inv.path("tails.csv"), &inv.provenance())?;
    verdicts.extend(
        tails
            .iter()
            .map(|r| tagged(r.verdict(), format!("{}:u={}", r.variant.label(), r.u))),
    );
    verdicts.push(chi_squared_verdict(cfg)?);
    let c = containment_verdict(cfg)?;
    println!(
        "largest state norm over {} runs: {:.4} (radius {:.1})",
        cfg.verify.containment_runs, c.largest_norm, c.radius
    );
    verdicts.push(c.verdict);

    output::write_verdicts(&inv.path("verify.json"), &verdicts)?;
    let failed: Vec<String> = verdicts.iter().filter(|v| !v.pass).map(|v| v.lemma_tag.clone()).collect();
    println!("{} of {} checks passed", verdicts.len() - failed.len(), verdicts.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Checks(failed))
    }
}
