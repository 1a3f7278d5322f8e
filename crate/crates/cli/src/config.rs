//! Experiment configuration files.
//!
//! A config is a TOML document. Top-level keys:
//!
//! - `variant` (required): a schedule name such as `"det-az-rpn-a"`, or
//!   `{ custom = [ {det_extra_head = true, ...}, ... ] }` with one flag table
//!   per iteration `0..=iterations`.
//! - `seeds_per_category` (required): seed images per target category; more
//!   than one value makes a seed-size sweep.
//! - `seeds`: rng seeds, each one regenerating the world and the training
//!   streams (default `[0]`).
//! - `out_dir`: output directory, overridden by `--out`.
//! - `record_wall_clock`: write timings into the metrics CSV instead of `nan`.
//! - `[world]`, `[train]`, `[train.model]`: overrides of the library defaults.

use std::path::{Path, PathBuf};

use notercnn::trainer::{Schedule, TrainConfig};
use notercnn::WorldConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Schedule,
    pub seeds_per_category: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub record_wall_clock: bool,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: Schedule::DetAzRpnADistill,
            seeds_per_category: vec![15],
            seeds: default_seeds(),
            out_dir: None,
            record_wall_clock: false,
            world: WorldConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub variant: Option<String>,
    pub iterations: Option<usize>,
    pub theta_b: Option<f64>,
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map(|s| line_column(text, s.start)).unwrap_or((0, 0));
            CliError::Config {
                origin: origin.to_string(),
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(out) = &o.out {
            self.out_dir = Some(out.clone());
        }
        if let Some(seed) = o.seed {
            self.seeds = vec![seed];
        }
        if let Some(v) = &o.variant {
            self.variant = v.parse()?;
        }
        if let Some(n) = o.iterations {
            self.train.iterations = n;
        }
        if let Some(t) = o.theta_b {
            self.train.theta_b = t;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(CliError::Invalid(m));
        if self.seeds_per_category.is_empty() {
            return invalid("seeds_per_category must list at least one value".into());
        }
        if self.seeds.is_empty() {
            return invalid("seeds must list at least one value".into());
        }
        self.world.validate().map_err(|e| CliError::Invalid(format!("world: {e}")))?;
        self.train_config(self.seeds[0])
            .validate()
            .map_err(|e| CliError::Invalid(format!("train: {e}")))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("notercnn-out"))
    }

    pub fn world_config(&self, seed: u64) -> WorldConfig {
        WorldConfig {
            seed,
            ..self.world.clone()
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            schedule: self.variant.clone(),
            seed,
            ..self.train.clone()
        }
    }
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::parse("variant = \"naive\"\nseeds_per_category = [15]\n", "t").unwrap();
        assert_eq!(cfg.variant, Schedule::Naive);
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.train.theta_b, 0.99);
        assert_eq!(cfg.world, WorldConfig::default());
    }

    #[test]
    fn sweep_list_is_accepted() {
        let cfg = ExperimentConfig::parse(
            "variant = \"det-az-rpn-a-distill\"\nseeds_per_category = [12, 33, 55, 76, 96]\n",
            "t",
        )
        .unwrap();
        assert_eq!(cfg.seeds_per_category, vec![12, 33, 55, 76, 96]);
    }

    #[test]
    fn missing_field_is_named() {
        let err = ExperimentConfig::parse("variant = \"naive\"\n", "t").unwrap_err();
        assert!(err.to_string().contains("seeds_per_category"), "{err}");
    }

    #[test]
    fn unknown_field_reports_its_line() {
        let text = "variant = \"naive\"\nseeds_per_category = [3]\n[train]\nlearning_rat = 0.1\n";
        match ExperimentConfig::parse(text, "cfg.toml").unwrap_err() {
            CliError::Config { line, message, .. } => {
                assert_eq!(line, 4);
                assert!(message.contains("learning_rat"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn custom_schedule_length_is_checked() {
        let flags = "{ det_extra_head = true }";
        let ok = format!("variant = {{ custom = [{}] }}\nseeds_per_category = [3]\n[train]\niterations = 1\n", [flags; 2].join(", "));
        assert!(ExperimentConfig::parse(&ok, "t").is_ok());
        let short = format!("variant = {{ custom = [{flags}] }}\nseeds_per_category = [3]\n[train]\niterations = 1\n");
        assert!(matches!(ExperimentConfig::parse(&short, "t"), Err(CliError::Invalid(_))));
    }

    #[test]
    fn overrides_win() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&Overrides {
            seed: Some(4),
            variant: Some("naive".into()),
            iterations: Some(2),
            theta_b: Some(0.5),
            out: Some("x".into()),
        })
        .unwrap();
        assert_eq!(cfg.seeds, vec![4]);
        assert_eq!(cfg.variant, Schedule::Naive);
        assert_eq!(cfg.train.iterations, 2);
        assert_eq!(cfg.train.theta_b, 0.5);
        assert_eq!(cfg.out_dir(), PathBuf::from("x"));
        assert!(cfg.apply(&Overrides { variant: Some("bogus".into()), ..Default::default() }).is_err());
    }

    #[test]
    fn roundtrips_through_toml() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.to_toml(), "t").unwrap(), cfg);
    }
}
