//! CSV and JSON emission. Every CSV starts with one `#` provenance line
//! followed by a header row.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use gppsrl::analysis::{InfoGainCurve, LoggedStep, RateFit, TailRow, VarianceLog, Verdict};
use gppsrl::psrl::SeedRun;
use sha2::{Digest, Sha256};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_bytes: &[u8], seed: u64) -> Self {
        Self {
            config_sha256: hex::encode(Sha256::digest(config_bytes)),
            seed,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "# gppsrl {VERSION} config_sha256={} seed={}\n",
            self.config_sha256, self.seed
        )
    }
}

/// Buffers rows and writes them with the provenance line in one go.
pub struct Table {
    writer: csv::Writer<Vec<u8>>,
}

impl Table {
    pub fn new(header: &[String]) -> anyhow::Result<Self> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(header)?;
        Ok(Self { writer })
    }

    pub fn with_header(header: &[&str]) -> anyhow::Result<Self> {
        Self::new(&header.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }

    pub fn row(&mut self, fields: &[String]) -> anyhow::Result<()> {
        self.writer.write_record(fields)?;
        Ok(())
    }

    pub fn save(self, path: &Path, provenance: &Provenance) -> anyhow::Result<()> {
        let body = self.writer.into_inner().context("flushing csv")?;
        let mut bytes = provenance.line().into_bytes();
        bytes.extend(body);
        fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn join<T: ToString>(xs: &[T]) -> Vec<String> {
    xs.iter().map(|x| x.to_string()).collect()
}

pub fn regret_table(runs: &[(String, Vec<SeedRun>)]) -> anyhow::Result<Table> {
    let mut t = Table::with_header(&["seed", "kernel", "episode", "inst_regret", "cum_regret"])?;
    for (kernel, seeds) in runs {
        for run in seeds {
            for r in &run.records {
                t.row(&[
                    r.seed.to_string(),
                    kernel.clone(),
                    r.episode.to_string(),
                    num(r.inst_regret),
                    num(r.cum_regret),
                ])?;
            }
        }
    }
    Ok(t)
}

pub fn trajectory_table(runs: &[(String, Vec<SeedRun>)], state_dim: usize, action_dim: usize) -> anyhow::Result<Table> {
    let mut header = join(&["seed", "kernel", "episode", "h"]);
    header.extend((1..=state_dim).map(|i| format!("s{i}")));
    header.extend((1..=action_dim).map(|i| format!("a{i}")));
    header.push("r".into());
    header.extend((1..=state_dim).map(|i| format!("next_s{i}")));
    header.push("post_var".into());
    let mut t = Table::new(&header)?;
    for (kernel, seeds) in runs {
        for run in seeds {
            for (n, traj) in run.trajectories.iter().enumerate() {
                let vars = run.posterior_variances.get(n);
                for (h, step) in traj.steps.iter().enumerate() {
                    let mut row = vec![run.seed.to_string(), kernel.clone(), traj.episode.to_string(), step.h.to_string()];
                    row.extend(step.state.iter().map(|v| num(*v)));
                    row.extend(step.action.iter().map(|v| num(*v)));
                    row.push(num(step.reward));
                    match &step.next_state {
                        Some(s) => row.extend(s.iter().map(|v| num(*v))),
                        None => row.extend(std::iter::repeat(String::new()).take(state_dim)),
                    }
                    row.push(vars.map(|v| num(v[h])).unwrap_or_default());
                    t.row(&row)?;
                }
            }
        }
    }
    Ok(t)
}

/// One fitted rate. `reference` is the exponent theory predicts, if any.
pub struct RateRow<'a> {
    pub kind: &'a str,
    pub kernel: &'a str,
    pub fit: &'a RateFit,
    pub reference: Option<f64>,
}

pub fn rates_table(rows: &[RateRow]) -> anyhow::Result<Table> {
    let mut t = Table::with_header(&[
        "kind",
        "kernel",
        "slope",
        "intercept",
        "residual",
        "window_lo",
        "window_hi",
        "points",
        "reference",
    ])?;
    append_rates(&mut t, rows)?;
    Ok(t)
}

pub fn append_rates(t: &mut Table, rows: &[RateRow]) -> anyhow::Result<()> {
    for r in rows {
        t.row(&[
            r.kind.to_string(),
            r.kernel.to_string(),
            num(r.fit.slope),
            num(r.fit.intercept),
            num(r.fit.residual),
            num(r.fit.window.0),
            num(r.fit.window.1),
            r.fit.points.to_string(),
            r.reference.map(num).unwrap_or_default(),
        ])?;
    }
    Ok(())
}

pub fn infogain_table(curves: &[(String, InfoGainCurve)]) -> anyhow::Result<Table> {
    let mut t = Table::with_header(&["kernel", "t", "grid_index", "increment", "gamma"])?;
    for (kernel, c) in curves {
        for i in 0..c.cumulative.len() {
            t.row(&[
                kernel.clone(),
                (i + 1).to_string(),
                c.selected[i].to_string(),
                num(c.increments[i]),
                num(c.cumulative[i]),
            ])?;
        }
    }
    Ok(t)
}

pub fn tails_table(rows: &[TailRow]) -> anyhow::Result<Table> {
    let mut t = Table::with_header(&["variant", "u", "bound", "frequency", "std", "samples", "pass"])?;
    for r in rows {
        t.row(&[
            r.variant.label().to_string(),
            num(r.u),
            num(r.bound),
            num(r.frequency),
            num(r.std),
            r.samples.to_string(),
            r.pass.to_string(),
        ])?;
    }
    Ok(t)
}

pub fn write_verdicts(path: &Path, verdicts: &[Verdict]) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(verdicts)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Variance logs keyed by `(kernel, seed)`, parsed back from `traj.csv`.
pub type LogIndex = BTreeMap<(String, u64), VarianceLog>;

pub fn read_trajectory_logs(path: &Path, state_dim: usize, action_dim: usize) -> anyhow::Result<LogIndex> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> anyhow::Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("{} has no `{name}` column", path.display()))
    };
    let seed_c = col("seed")?;
    let kernel_c = col("kernel")?;
    let episode_c = col("episode")?;
    let var_c = col("post_var")?;
    let s_c: Vec<usize> = (1..=state_dim).map(|i| col(&format!("s{i}"))).collect::<anyhow::Result<_>>()?;
    let a_c: Vec<usize> = (1..=action_dim).map(|i| col(&format!("a{i}"))).collect::<anyhow::Result<_>>()?;
    let next_c = col("next_s1")?;

    let mut index = LogIndex::new();
    let mut last_episode: BTreeMap<(String, u64), usize> = BTreeMap::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let parse = |c: usize| -> anyhow::Result<f64> {
            field(c)
                .parse::<f64>()
                .with_context(|| format!("row {}: bad number `{}`", line + 1, field(c)))
        };
        let key = (field(kernel_c).to_string(), field(seed_c).parse::<u64>()?);
        let episode: usize = field(episode_c).parse()?;
        if field(var_c).is_empty() {
            bail!("row {}: no posterior variance logged; rerun with log_posterior_variance = true", line + 1);
        }
        let input: Vec<f64> = s_c.iter().chain(&a_c).map(|c| parse(*c)).collect::<anyhow::Result<_>>()?;
        let step = LoggedStep {
            input,
            post_var: parse(var_c)?,
            observed: !field(next_c).is_empty(),
        };
        let log = index.entry(key.clone()).or_default();
        if last_episode.get(&key) != Some(&episode) {
            log.episodes.push(Vec::new());
            last_episode.insert(key, episode);
        }
        log.episodes.last_mut().expect("episode pushed above").push(step);
    }
    Ok(index)
}
