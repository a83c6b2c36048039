//! Run configuration: a TOML file of flat `section.key = value` lines with
//! documented defaults, `--set key=value` overrides, and the HONGBAO_SEED
//! environment variable taking precedence over the configured seed.
//! Unknown keys are rejected.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

use hongbao_core::panel::PanelOptions;
use hongbao_core::population::PopulationConfig;
use hongbao_core::simulator::{BehaviorParams, FestivalCalendar};

pub const SEED_ENV: &str = "HONGBAO_SEED";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses all cores. Results never depend on this.
    pub workers: usize,
    pub population: PopulationSection,
    pub behavior: BehaviorParams,
    pub festival: FestivalSection,
    pub sim: SimSection,
    pub panel: PanelSection,
    pub estimate: EstimateSection,
    pub matching: MatchSection,
    pub randomization: RandomizationSection,
    pub plot: PlotSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            workers: 0,
            population: PopulationSection::default(),
            behavior: BehaviorParams::default(),
            festival: FestivalSection::default(),
            sim: SimSection::default(),
            panel: PanelSection::default(),
            estimate: EstimateSection::default(),
            matching: MatchSection::default(),
            randomization: RandomizationSection::default(),
            plot: PlotSection::default(),
            output: OutputSection::default(),
        }
    }
}

/// Population knobs; `group_types` is `label:weight` pairs joined by commas.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationSection {
    pub groups: u32,
    pub size_mean: f64,
    pub size_log_sd: f64,
    pub edge_density: f64,
    pub edge_homophily_wealth: f64,
    pub edge_homophily_age: f64,
    pub homophily: f64,
    pub wealth_log_mean: f64,
    pub wealth_log_sd: f64,
    pub age_mean: f64,
    pub age_sd: f64,
    pub female_share: f64,
    pub overlap_rate: f64,
    pub group_types: String,
}

impl Default for PopulationSection {
    fn default() -> Self {
        let d = PopulationConfig::default();
        Self {
            groups: 300,
            size_mean: d.size_mean,
            size_log_sd: d.size_log_sd,
            edge_density: d.edge_density,
            edge_homophily_wealth: d.edge_homophily_wealth,
            edge_homophily_age: d.edge_homophily_age,
            homophily: d.homophily,
            wealth_log_mean: d.wealth_log_mean,
            wealth_log_sd: d.wealth_log_sd,
            age_mean: d.age_mean,
            age_sd: d.age_sd,
            female_share: d.female_share,
            overlap_rate: d.overlap_rate,
            group_types: "relative:0.30,classmate:0.06,coworker:0.02,other:0.62".into(),
        }
    }
}

impl PopulationSection {
    pub fn to_core(&self) -> Result<PopulationConfig> {
        let mut group_types = Vec::new();
        for part in self.group_types.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (label, weight) = part
                .split_once(':')
                .with_context(|| format!("group_types entry `{part}` is not label:weight"))?;
            let weight: f64 =
                weight.parse().with_context(|| format!("bad weight in `{part}`"))?;
            if label.contains(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '-')) {
                bail!("group type label `{label}` must be alphanumeric/underscore/dash");
            }
            group_types.push((label.to_string(), weight));
        }
        Ok(PopulationConfig {
            groups: self.groups,
            size_mean: self.size_mean,
            size_log_sd: self.size_log_sd,
            edge_density: self.edge_density,
            edge_homophily_wealth: self.edge_homophily_wealth,
            edge_homophily_age: self.edge_homophily_age,
            homophily: self.homophily,
            wealth_log_mean: self.wealth_log_mean,
            wealth_log_sd: self.wealth_log_sd,
            age_mean: self.age_mean,
            age_sd: self.age_sd,
            female_share: self.female_share,
            overlap_rate: self.overlap_rate,
            group_types,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FestivalSection {
    pub period_days: u32,
    pub length_days: u32,
}

impl Default for FestivalSection {
    fn default() -> Self {
        Self { period_days: 15, length_days: 3 }
    }
}

impl FestivalSection {
    pub fn to_core(&self) -> FestivalCalendar {
        FestivalCalendar { period_days: self.period_days, length_days: self.length_days }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub horizon_days: u32,
}

impl Default for SimSection {
    fn default() -> Self {
        Self { horizon_days: 30 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PanelSection {
    pub windows_s: Vec<f64>,
    pub tau_hours: f64,
    /// Alternative session thresholds for the sensitivity sweep.
    pub tau_sensitivity_hours: Vec<f64>,
    pub drop_censored: bool,
    pub edge_margin: bool,
}

impl Default for PanelSection {
    fn default() -> Self {
        let d = PanelOptions::default();
        Self {
            windows_s: d.windows_s,
            tau_hours: 24.0,
            tau_sensitivity_hours: vec![6.0, 12.0, 24.0, 48.0],
            drop_censored: d.drop_censored,
            edge_margin: d.edge_margin,
        }
    }
}

impl PanelSection {
    pub fn to_core(&self) -> PanelOptions {
        PanelOptions {
            windows_s: self.windows_s.clone(),
            tau_s: self.tau_hours * 3600.0,
            drop_censored: self.drop_censored,
            edge_margin: self.edge_margin,
        }
    }

    pub fn to_core_with_tau(&self, tau_hours: f64) -> PanelOptions {
        PanelOptions { tau_s: tau_hours * 3600.0, ..self.to_core() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateSection {
    pub bootstrap_reps: usize,
    /// Also run the moderator interaction and inequity regressions.
    pub full_tables: bool,
}

impl Default for EstimateSection {
    fn default() -> Self {
        Self { bootstrap_reps: 1000, full_tables: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchSection {
    /// Which subsequent-packet positions to contrast.
    pub ks: Vec<usize>,
    pub bootstrap_reps: usize,
}

impl Default for MatchSection {
    fn default() -> Self {
        Self { ks: vec![1, 2, 3], bootstrap_reps: 1000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomizationSection {
    pub alpha: f64,
    /// An attribute whose BH-significant share exceeds this fails the check.
    pub fail_share: f64,
}

impl Default for RandomizationSection {
    fn default() -> Self {
        Self { alpha: 0.1, fail_share: 0.05 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotSection {
    /// Packet specs for the splitter distribution plot, `a_cents:n` pairs.
    pub splitter_specs: String,
    pub splitter_reps: usize,
}

impl Default for PlotSection {
    fn default() -> Self {
        Self { splitter_specs: "1000:5,500:3".into(), splitter_reps: 10_000 }
    }
}

impl PlotSection {
    pub fn specs(&self) -> Result<Vec<(i64, u32)>> {
        let mut out = Vec::new();
        for part in self.splitter_specs.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (a, n) = part
                .split_once(':')
                .with_context(|| format!("splitter_specs entry `{part}` is not a_cents:n"))?;
            out.push((a.parse()?, n.parse()?));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

impl RunConfig {
    /// Loads a config file (or defaults when `path` is None), applies
    /// `--set key=value` overrides, then the seed env var.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                text.parse().with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Value::Table(Default::default()),
        };
        for spec in overrides {
            apply_override(&mut value, spec)?;
        }
        let mut config: RunConfig = value.try_into().context("invalid configuration")?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            config.seed = seed
                .parse()
                .with_context(|| format!("{SEED_ENV}={seed} is not an integer seed"))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.population.to_core()?.validate()?;
        self.panel.to_core().validate()?;
        if self.sim.horizon_days == 0 {
            bail!("sim.horizon_days must be >= 1");
        }
        if self.estimate.bootstrap_reps < 2 {
            bail!("estimate.bootstrap_reps must be >= 2");
        }
        self.plot.specs()?;
        Ok(())
    }
}

/// Parses `dotted.key=value` and writes it into the TOML tree. The value is
/// parsed as a TOML literal (so strings need quotes unless they are plain
/// words, which are taken as strings).
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw_value) = spec
        .split_once('=')
        .with_context(|| format!("override `{spec}` is not key=value"))?;
    let key = key.trim();
    let raw_value = raw_value.trim();
    if key.is_empty() {
        bail!("override `{spec}` has an empty key");
    }
    let parsed: toml::Value = match format!("v = {raw_value}").parse::<toml::Value>() {
        Ok(toml::Value::Table(mut t)) => t.remove("v").unwrap(),
        _ => toml::Value::String(raw_value.to_string()),
    };
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .with_context(|| format!("`{part}` in `{key}` is not a table"))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .with_context(|| format!("`{key}` does not address a table entry"))?;
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}
