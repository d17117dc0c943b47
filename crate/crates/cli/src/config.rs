//! The JSON run file. Every section is optional; flags override it.

use std::path::{Path, PathBuf};

use ddp_core::dataset::GenerateConfig;
use ddp_core::denoiser::DenoiserConfig;
use ddp_core::environment::{fixtures, World};
use ddp_core::geometry::Pose;
use ddp_core::planner::PlanConfig;
use ddp_core::sampler::{GuidanceSpec, InpaintMode, Strategy};
use ddp_core::schedule::ScheduleConfig;
use ddp_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const DEFAULT_HORIZONS: [usize; 4] = [32, 64, 128, 256];
pub const DEFAULT_DENSE_RETURNS: [f64; 3] = [-0.1, -0.01, -0.001];
pub const DEFAULT_REPEATS: [usize; 4] = [1, 2, 5, 10];
pub const DEFAULT_SWEEP_PATHS: usize = 30;

/// A fixture name (`single-cuboid`, `two-obstacles`), a path to a world
/// JSON file, or an inline world object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WorldSpec {
    Named(String),
    Inline(World),
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec::Named("single-cuboid".into())
    }
}

impl WorldSpec {
    pub fn parse(text: &str) -> Self {
        WorldSpec::Named(text.to_string())
    }

    pub fn resolve(&self, base: &Path) -> Result<World> {
        match self {
            WorldSpec::Inline(w) => Ok(w.clone()),
            WorldSpec::Named(name) => match name.as_str() {
                "single-cuboid" => Ok(fixtures::single_cuboid()),
                "two-obstacles" => Ok(fixtures::two_obstacles()),
                path => {
                    let p = base.join(path);
                    if !p.exists() {
                        return Err(CliError::config(format!("world {path:?} is neither a fixture nor a file")));
                    }
                    Ok(World::load(p)?)
                }
            },
        }
    }
}

pub fn default_start() -> Pose {
    Pose::from_xyz(0.5, -0.35, 0.3)
}

pub fn default_goal() -> Pose {
    Pose::from_xyz(0.5, 0.35, 0.3)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub world: Option<WorldSpec>,
    pub gen_data: GenerateConfig,
    pub train: TrainSection,
    pub sweep: SweepSection,
    pub plan: PlanSection,
    pub eval: EvalSection,
    /// Directory that relative paths in this file are resolved against.
    #[serde(skip)]
    pub base: PathBuf,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self {
                base: PathBuf::from("."),
                ..Self::default()
            });
        };
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::config(format!("config file {} not found", path.display()))
            } else {
                CliError::io(path, e)
            }
        })?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self =
            serde_json::from_str(text).map_err(|e| CliError::config(format!("invalid config file: {e}")))?;
        cfg.base = base.to_path_buf();
        Ok(cfg)
    }

    /// Flag first, then the file-level seed, then `fallback`.
    pub fn seed(&self, flag: Option<u64>, fallback: u64) -> u64 {
        flag.or(self.seed).unwrap_or(fallback)
    }

    pub fn world(&self, flag: Option<&str>) -> Result<World> {
        match flag {
            Some(text) => WorldSpec::parse(text).resolve(Path::new(".")),
            None => self.world.clone().unwrap_or_default().resolve(&self.base),
        }
    }

    pub fn path(&self, flag: Option<&Path>, section: Option<&Path>, default: PathBuf) -> PathBuf {
        match (flag, section) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(p)) => self.base.join(p),
            (None, None) => default,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub dataset: Option<PathBuf>,
    pub trainer: TrainConfig,
    /// Architecture; dims and horizon are taken from the dataset if omitted.
    pub denoiser: Option<DenoiserConfig>,
    pub schedule: ScheduleConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub checkpoint: Option<PathBuf>,
    pub strategy: Option<Strategy>,
    pub horizons: Vec<usize>,
    /// Defaults to the dense grid, or `[0]` for sparse strategies.
    pub returns: Option<Vec<f64>>,
    pub repeats: Vec<usize>,
    pub paths: usize,
    pub start: Pose,
    pub goal: Pose,
    pub guidance: Option<GuidanceSpec>,
    pub inpaint_mode: InpaintMode,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            strategy: None,
            horizons: DEFAULT_HORIZONS.to_vec(),
            returns: None,
            repeats: DEFAULT_REPEATS.to_vec(),
            paths: DEFAULT_SWEEP_PATHS,
            start: default_start(),
            goal: default_goal(),
            guidance: None,
            inpaint_mode: InpaintMode::Clean,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSection {
    pub checkpoint: Option<PathBuf>,
    pub strategy: Option<Strategy>,
    pub start: Pose,
    pub goal: Pose,
    pub seeds: usize,
    pub planner: PlanConfig,
}

impl Default for PlanSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            strategy: None,
            start: default_start(),
            goal: default_goal(),
            seeds: 1,
            planner: PlanConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub inputs: Vec<PathBuf>,
    pub tolerance: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            tolerance: ddp_core::planner::DEFAULT_GOAL_TOLERANCE,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let cfg = RunConfig::from_json("{}", Path::new(".")).unwrap();
        assert_eq!(cfg.gen_data, GenerateConfig::default());
        assert_eq!(cfg.sweep.horizons, DEFAULT_HORIZONS);
        assert_eq!(cfg.sweep.repeats, DEFAULT_REPEATS);
        assert_eq!(cfg.sweep.paths, 30);
        assert_eq!(cfg.gen_data.count, 60_000);
        assert_eq!(cfg.gen_data.waypoints_per_path, 32);
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        for text in [
            r#"{"bogus": 1}"#,
            r#"{"gen_data": {"cnt": 5}}"#,
            r#"{"train": {"trainer": {"lr": 1}}}"#,
            r#"{"plan": {"planner": {"horizon_len": 3}}}"#,
        ] {
            let err = RunConfig::from_json(text, Path::new(".")).unwrap_err();
            assert_eq!(err.exit_code(), crate::error::exit::CONFIG, "{text}");
        }
    }

    #[test]
    fn seed_precedence() {
        let cfg = RunConfig::from_json(r#"{"seed": 7}"#, Path::new(".")).unwrap();
        assert_eq!(cfg.seed(Some(3), 0), 3);
        assert_eq!(cfg.seed(None, 0), 7);
        assert_eq!(RunConfig::default().seed(None, 9), 9);
    }

    #[test]
    fn worlds_resolve() {
        let named = RunConfig::from_json(r#"{"world": "two-obstacles"}"#, Path::new(".")).unwrap();
        assert_eq!(named.world(None).unwrap(), fixtures::two_obstacles());
        let inline = format!(r#"{{"world": {}}}"#, fixtures::single_cuboid().to_json());
        let inline = RunConfig::from_json(&inline, Path::new(".")).unwrap();
        assert_eq!(inline.world(None).unwrap(), fixtures::single_cuboid());
        assert_eq!(inline.world(Some("two-obstacles")).unwrap(), fixtures::two_obstacles());
        assert!(named.world(Some("no-such-world")).is_err());
    }
}
