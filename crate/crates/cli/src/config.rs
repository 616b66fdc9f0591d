//! The single JSON run configuration and its override rules.

use std::path::{Path, PathBuf};

use pedsim::env::EnvConfig;
use pedsim::evalrig::EvalSpec;
use pedsim::ppo::PpoConfig;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;
pub const ENV_OUTPUT_DIR: &str = "PEDSIM_OUTPUT_DIR";
pub const ENV_SEED: &str = "PEDSIM_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: SCHEMA_VERSION,
            env: EnvConfig::default(),
            ppo: PpoConfig::default(),
            eval: EvalSpec::default(),
            output_dir: default_output_dir(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        Self::from_json(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(
            self.version == SCHEMA_VERSION,
            "config version {} is not supported (expected {SCHEMA_VERSION})",
            self.version
        );
        self.env.validate()?;
        self.ppo.validate()?;
        self.eval.validate()?;
        for town in &self.eval.towns {
            pedsim::world::build_town(town)?;
        }
        pedsim::world::build_town(&self.env.town)?;
        Ok(())
    }

    /// One seed drives the environment, the trainer and the evaluation
    /// seed block.
    pub fn set_seed(&mut self, seed: u64) {
        self.env.seed = seed;
        self.ppo.seed = seed;
        self.eval.base_seed = seed;
    }

    /// Applies overrides with precedence flag > environment variable >
    /// file. `var` looks up environment variables.
    pub fn apply_overrides(
        &mut self,
        out_flag: Option<&Path>,
        seed_flag: Option<u64>,
        var: impl Fn(&str) -> Option<String>,
    ) -> anyhow::Result<()> {
        if let Some(d) = out_flag {
            self.output_dir = d.to_path_buf();
        } else if let Some(d) = var(ENV_OUTPUT_DIR).filter(|d| !d.is_empty()) {
            self.output_dir = PathBuf::from(d);
        }
        let seed = match seed_flag {
            Some(s) => Some(s),
            None => match var(ENV_SEED).filter(|s| !s.is_empty()) {
                Some(s) => Some(s.trim().parse().map_err(|_| anyhow::anyhow!("{ENV_SEED}={s:?} is not an integer"))?),
                None => None,
            },
        };
        if let Some(s) = seed {
            self.set_seed(s);
        }
        Ok(())
    }
}
