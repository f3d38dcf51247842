//! Run configuration: one TOML file plus `section.key=value` overrides.
//! Precedence is overrides, then file, then defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data::CollectConfig;
use crate::dynmodel::DynamicsConfig;
use crate::env::{MazeKind, MazeSpec};
use crate::error::{Error, Result};
use crate::evaluate::Theorem2Config;
use crate::policy::{TrainConfig, WeightScheme};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Cluster count; the per-layout default applies when absent.
    pub clusters: Option<usize>,
    pub max_iters: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            clusters: None,
            max_iters: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_pairs: usize,
    /// Rollout budget; the per-layout default applies when absent.
    pub t_max: Option<usize>,
    pub resamples: usize,
    pub delta: f64,
    pub seeds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_pairs: 100,
            t_max: None,
            resamples: crate::evaluate::BOOTSTRAP_RESAMPLES,
            delta: crate::env::DEFAULT_DELTA,
            seeds: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub n_draws: usize,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig { n_draws: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Dataset sizes in trajectories.
    pub sizes: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            sizes: vec![125, 250, 500],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub maze: String,
    /// Layout file; overrides the bundled layout named by `maze`.
    pub maze_path: Option<PathBuf>,
    pub kind: MazeKind,
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: Option<usize>,
    pub data: CollectConfig,
    pub dynamics: DynamicsConfig,
    pub cluster: ClusterConfig,
    pub augment: AugmentConfig,
    pub weight: WeightScheme,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub audit: AuditConfig,
    pub theorem: Theorem2Config,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            maze: "umaze".into(),
            maze_path: None,
            kind: MazeKind::Continuous,
            seed: 0,
            out: PathBuf::from("runs/default"),
            jobs: None,
            data: CollectConfig::default(),
            dynamics: DynamicsConfig::default(),
            cluster: ClusterConfig::default(),
            augment: AugmentConfig::default(),
            weight: WeightScheme::Discount { gamma: 0.99 },
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            audit: AuditConfig::default(),
            theorem: Theorem2Config::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Default cluster count by layout size.
pub fn default_clusters(maze: &str) -> usize {
    match maze {
        "medium" => 40,
        "large" => 80,
        _ => 20,
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `a.b.c=value` overrides. Values are read as TOML literals and
    /// fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            if path.iter().any(|p| p.is_empty()) {
                return Err(Error::Config(format!("override key {key:?} is malformed")));
            }
            let mut table = &mut root;
            for part in &path[..path.len() - 1] {
                let entry = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                table = entry
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("override key {key:?} descends into a value")))?;
            }
            table.insert(path[path.len() - 1].to_string(), parse_scalar(raw.trim()));
        }
        let merged: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override: {e}")))?;
        Ok(merged)
    }

    pub fn maze_spec(&self) -> Result<MazeSpec> {
        match &self.maze_path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read maze {}: {e}", p.display())))?;
                MazeSpec::parse(&self.maze, &text, self.kind)
            }
            None => MazeSpec::bundled(&self.maze, self.kind),
        }
    }

    pub fn clusters(&self) -> usize {
        self.cluster.clusters.unwrap_or_else(|| default_clusters(&self.maze))
    }

    pub fn t_max(&self, spec: &MazeSpec) -> usize {
        self.eval.t_max.unwrap_or_else(|| crate::evaluate::default_t_max(spec))
    }

    pub fn validate(&self) -> Result<()> {
        self.maze_spec()?;
        self.augment.validate()?;
        self.weight.validate()?;
        if self.data.n_traj == 0 {
            return Err(Error::Config("data.n_traj must be positive".into()));
        }
        if self.clusters() == 0 {
            return Err(Error::Config("cluster.clusters must be positive".into()));
        }
        if self.eval.n_pairs == 0 || self.eval.seeds == 0 {
            return Err(Error::Config("eval.n_pairs and eval.seeds must be positive".into()));
        }
        if self.sweep.sizes.is_empty() || self.sweep.sizes.contains(&0) {
            return Err(Error::Config("sweep.sizes must be non-empty and positive".into()));
        }
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_take_precedence() {
        let file = RunConfig::from_toml("maze = \"medium\"\n[data]\nn_traj = 40\n").unwrap();
        assert_eq!(file.data.n_traj, 40);
        assert_eq!(file.dynamics, DynamicsConfig::default());
        let merged = file
            .with_overrides(&["data.n_traj=7", "augment.strategy=\"mgda\"", "maze=large"])
            .unwrap();
        assert_eq!(merged.data.n_traj, 7);
        assert_eq!(merged.maze, "large");
        assert_eq!(merged.augment.strategy, crate::augment::Strategy::Mgda);
        assert_eq!(merged.clusters(), 80);
    }

    #[test]
    fn round_trip_and_errors() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(cfg.with_overrides(&["data.n_traj"]).is_err());
        assert!(cfg.with_overrides(&["data.n_traj=\"many\""]).is_err());
        assert!(cfg.with_overrides(&["maze.x=1"]).is_err());
    }
}
