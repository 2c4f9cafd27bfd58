//! Project configuration: one TOML file, merged over the defaults.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hpl::demo::DemoConfig;
use hpl::environment::TubeGenConfig;
use hpl::gp::FitConfig;
use hpl::harness::RunConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    pub seed: u64,
    /// Worker threads for `run`; 0 uses every available core.
    pub threads: usize,
    pub paths: Paths,
    pub run: RunConfig,
    pub tubes: TubeGenConfig,
    pub demo: DemoConfig,
    pub fit: FitConfig,
    pub plot: PlotConfig,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        ProjectConfig {
            seed: 0,
            threads: 0,
            paths: Paths::default(),
            run: RunConfig::default(),
            tubes: TubeGenConfig::default(),
            demo: DemoConfig::default(),
            fit: FitConfig::for_strategies(),
            plot: PlotConfig::default(),
        }
    }
}

/// Fallbacks for the corresponding command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tasks: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub demos: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotConfig {
    /// Draw the newest target rectangle every this many steps.
    pub rect_every: usize,
    /// Panel size in pixels.
    pub panel_width: f64,
    pub panel_height: f64,
    pub columns: usize,
}

impl Default for PlotConfig {
    fn default() -> Self {
        PlotConfig { rect_every: 40, panel_width: 420.0, panel_height: 300.0, columns: 3 }
    }
}

impl ProjectConfig {
    /// Reads `path` and overlays it on the defaults table by table, so a
    /// partial `[fit]` keeps the strategy-fit defaults for missing keys.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(ProjectConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text)?;
        let mut base = toml::Table::try_from(ProjectConfig::default())?;
        merge(&mut base, user);
        let cfg: ProjectConfig = toml::Value::Table(base).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.tubes.validate()?;
        self.run.limits.validate()?;
        anyhow::ensure!(self.run.t > 0 && self.run.n > 0, "run.t and run.n must be at least 1");
        anyhow::ensure!(self.run.max_steps != Some(0), "run.max_steps must be positive");
        anyhow::ensure!(self.run.ds > 0.0, "run.ds must be positive");
        anyhow::ensure!(self.plot.rect_every > 0 && self.plot.columns > 0, "plot.rect_every and plot.columns must be positive");
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
