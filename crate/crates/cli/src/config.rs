use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use gppsrl::kernels::{Kernel, KernelFamily, Smoothness};
use gppsrl::mdp::{InitialStateLaw, MdpConfig};
use gppsrl::planner::{GridSpec, TransitionMode};
use gppsrl::psrl::{seed_for, AgentKind, RunConfig};
use serde::Deserialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    #[serde(alias = "squared_exponential")]
    Se,
    Matern,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    /// Label used in output files; defaults to the family label.
    pub name: Option<String>,
    pub family: FamilyName,
    pub nu: Option<Smoothness>,
    pub variance: f64,
    pub lengthscale: f64,
}

impl KernelSpec {
    pub fn family(&self) -> anyhow::Result<KernelFamily> {
        match (self.family, self.nu) {
            (FamilyName::Se, None) => Ok(KernelFamily::SquaredExponential),
            (FamilyName::Se, Some(_)) => bail!("kernel family `se` takes no `nu`"),
            (FamilyName::Matern, Some(nu)) => Ok(KernelFamily::Matern(nu)),
            (FamilyName::Matern, None) => bail!("kernel family `matern` needs `nu` (\"1/2\", \"3/2\" or \"5/2\")"),
        }
    }

    pub fn label(&self) -> String {
        match &self.name {
            Some(n) => n.clone(),
            None => self.family().map(|f| f.label().to_string()).unwrap_or_default(),
        }
    }

    pub fn build(&self, input_dim: usize) -> anyhow::Result<Kernel> {
        Ok(Kernel::new(self.family()?, self.variance, self.lengthscale, input_dim)?)
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub horizons: Vec<usize>,
    /// Index into `kernels`.
    pub kernel: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            horizons: vec![20, 40, 80, 160],
            kernel: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfoGainConfig {
    pub ts: Vec<usize>,
    /// Radius of the ball in state-action space the grid covers.
    pub radius: f64,
    /// Grid knots per input dimension before restricting to the ball.
    pub knots: usize,
    /// Defaults to the GP noise variance of the runs.
    pub noise_variance: Option<f64>,
}

impl Default for InfoGainConfig {
    fn default() -> Self {
        Self {
            ts: vec![50, 100, 200, 400, 800],
            radius: 2.0,
            knots: 9,
            noise_variance: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub tail_samples: usize,
    /// Thresholds as multiples of `sqrt(C)`.
    pub tail_thresholds: Vec<f64>,
    pub tail_knots: usize,
    pub tail_radius: f64,
    pub chi_squared_pairs: usize,
    pub chi_squared_probes: usize,
    pub chi_squared_conditioning: usize,
    pub containment_runs: usize,
    pub containment_grid: GridSpec,
    pub containment_features: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            tail_samples: 2000,
            tail_thresholds: vec![1.5, 2.0, 3.0],
            tail_knots: 21,
            tail_radius: 2.0,
            chi_squared_pairs: 2000,
            chi_squared_probes: 25,
            chi_squared_conditioning: 30,
            containment_runs: 200,
            containment_grid: GridSpec {
                state_knots: 11,
                action_knots: 3,
            },
            containment_features: 100,
        }
    }
}

fn default_num_features() -> usize {
    1000
}

fn default_num_seeds() -> usize {
    20
}

fn default_true() -> bool {
    true
}

fn default_out() -> PathBuf {
    PathBuf::from("results")
}

fn default_transition() -> TransitionMode {
    TransitionMode::NearestCell
}

fn default_agent() -> AgentKind {
    AgentKind::Psrl
}

/// Everything one invocation of the harness needs, read from a TOML file.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; seed `i` of a sweep is `seed ^ i`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_num_seeds")]
    pub num_seeds: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_num_features")]
    pub num_features: usize,
    #[serde(default = "default_transition")]
    pub transition: TransitionMode,
    pub gp_noise_variance: Option<f64>,
    #[serde(default = "default_true")]
    pub log_posterior_variance: bool,
    #[serde(default = "default_agent")]
    pub agent: AgentKind,
    pub kernels: Vec<KernelSpec>,
    #[serde(default)]
    pub mdp: MdpConfig,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub infogain: InfoGainConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let text = std::str::from_utf8(&bytes).context("config is not UTF-8")?;
        let cfg = Self::from_toml(text).with_context(|| format!("invalid config {}", path.display()))?;
        Ok((cfg, bytes))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.kernels.is_empty() {
            bail!("`kernels` must list at least one kernel");
        }
        if self.num_seeds == 0 {
            bail!("`num_seeds` must be at least 1");
        }
        let mut labels = BTreeSet::new();
        for k in &self.kernels {
            k.build(self.mdp.input_dim())?;
            if !labels.insert(k.label()) {
                bail!("duplicate kernel label `{}`; set distinct `name`s", k.label());
            }
        }
        if self.sweep.kernel >= self.kernels.len() {
            bail!("`sweep.kernel` = {} is out of range", self.sweep.kernel);
        }
        if self.sweep.horizons.iter().any(|h| *h == 0) {
            bail!("`sweep.horizons` must be positive");
        }
        if self.infogain.ts.iter().any(|t| *t == 0) {
            bail!("`infogain.ts` must be positive");
        }
        if self.verify.tail_samples < 1000 {
            bail!("`verify.tail_samples` must be at least 1000");
        }
        if self.verify.tail_knots < 2 || self.verify.containment_runs == 0 {
            bail!("`verify.tail_knots` must be at least 2 and `verify.containment_runs` positive");
        }
        for k in 0..self.kernels.len() {
            self.run_config(k)?.validate()?;
        }
        Ok(())
    }

    pub fn kernel(&self, index: usize) -> anyhow::Result<Kernel> {
        self.kernels[index].build(self.mdp.input_dim())
    }

    pub fn run_config(&self, index: usize) -> anyhow::Result<RunConfig> {
        Ok(RunConfig {
            num_features: self.num_features,
            grid: self.grid,
            transition: self.transition,
            gp_noise_variance: self.gp_noise_variance,
            agent: self.agent,
            log_posterior_variance: self.log_posterior_variance,
            ..RunConfig::new(self.mdp.clone(), self.kernel(index)?)
        })
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.num_seeds).map(|i| seed_for(self.seed, i)).collect()
    }

    /// Initial-state law for the containment runs: `N(0, σ² I)`.
    pub fn theory_initial_state(&self) -> InitialStateLaw {
        InitialStateLaw::Gaussian { std: self.mdp.sigma }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [[kernels]]
        family = "se"
        variance = 1.0
        lengthscale = 0.5
    "#;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.num_seeds, 20);
        assert_eq!(c.mdp.horizon, 20);
        assert_eq!(c.grid.state_knots, 41);
        assert_eq!(c.kernels[0].label(), "se");
        assert_eq!(c.run_config(0).unwrap().gp_noise(), (0.01f64 / 0.1).powi(2));
    }

    #[test]
    fn matern_needs_nu() {
        let text = MINIMAL.replace("\"se\"", "\"matern\"");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let ok = text.replace("variance = 1.0", "nu = \"3/2\"\nvariance = 1.0");
        assert_eq!(ExperimentConfig::from_toml(&ok).unwrap().kernels[0].label(), "matern32");
    }

    #[test]
    fn rejects_unknown_and_missing_keys() {
        assert!(ExperimentConfig::from_toml(&format!("{MINIMAL}\nbogus = 1")).is_err());
        assert!(ExperimentConfig::from_toml("seed = 1").is_err());
        assert!(ExperimentConfig::from_toml(&MINIMAL.replace("lengthscale = 0.5", "")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("{MINIMAL}\n[mdp]\nsigma = -1.0")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("{MINIMAL}{MINIMAL}")).is_err());
    }
}
