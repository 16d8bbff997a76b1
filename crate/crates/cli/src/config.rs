//! Run configuration: the JSON schema consumed by `svo train` and the
//! estimator-name grammar shared with `svo snr`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use svo_core::grad::{EstimatorKind, LambdaMode};
use svo_core::model::ModelConfig;

/// Which marginal-likelihood estimator the training objective averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Forward filtering only: maximize mean log Zhat from the particle
    /// filter.
    Smc,
    /// Filtering plus backward simulation: maximize mean log Zhat from the
    /// smoothed-trajectory estimator.
    Svo,
}

/// Environment variable naming the directory that relative output paths are
/// resolved against.
pub const OUT_ROOT_ENV: &str = "SVO_OUT_ROOT";

/// Resolve a possibly relative output path against `$SVO_OUT_ROOT` (falling
/// back to the current directory).
pub fn resolve_out_dir(dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        return dir.to_path_buf();
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(dir),
        None => dir.to_path_buf(),
    }
}

fn default_estimator() -> String {
    "biased".to_string()
}
fn default_epochs() -> usize {
    300
}
fn default_batch_size() -> usize {
    8
}
fn default_lr() -> f64 {
    1e-3
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> f64 {
    10.0
}

/// Everything one training run needs, loaded from a JSON file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub objective: Objective,
    /// Particle count for the forward filter.
    pub k: usize,
    /// Subparticle count for backward simulation; required exactly when the
    /// objective is `svo`.
    #[serde(default)]
    pub m: Option<usize>,
    /// Gradient estimator for the `smc` objective: `biased`, `categorical`,
    /// `concrete`, `concrete:<temperature>`, or `concrete:inverse_k`. The
    /// `svo` objective always uses the pathwise gradient and ignores this.
    #[serde(default = "default_estimator")]
    pub estimator: String,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_betas")]
    pub adam_betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    /// Gradients are rescaled to this global l2 norm when they exceed it.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    pub seed: u64,
    pub model: ModelConfig,
    /// Path to a `dataset.json` written by `generate` or `ingest`.
    pub data: PathBuf,
    pub out_dir: PathBuf,
    /// Extra checkpoint cadence in epochs; the mid-training and final
    /// checkpoints are always written.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read run config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("cannot parse run config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.k == 0 {
            bail!("k must be at least 1");
        }
        match (self.objective, self.m) {
            (Objective::Svo, None) => bail!("objective `svo` requires m (subparticle count)"),
            (Objective::Svo, Some(0)) => bail!("m must be at least 1"),
            (Objective::Smc, Some(_)) => {
                bail!("m applies only to the `svo` objective; remove it for `smc`")
            }
            _ => {}
        }
        if self.batch_size == 0 {
            bail!("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bail!("learning_rate must be positive and finite");
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            bail!("adam_betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            bail!("adam_eps must be positive");
        }
        if !(self.clip_norm > 0.0) {
            bail!("clip_norm must be positive");
        }
        parse_estimator(&self.estimator)?;
        Ok(())
    }

    /// Subparticle count; only meaningful for the `svo` objective.
    pub fn m_for_svo(&self) -> usize {
        self.m.unwrap_or(1)
    }
}

/// Parse an estimator name: `biased`, `categorical` (or
/// `unbiased_categorical`), `concrete` (temperature 0.2), `concrete:<float>`,
/// or `concrete:inverse_k`.
pub fn parse_estimator(name: &str) -> anyhow::Result<EstimatorKind> {
    let name = name.trim();
    match name {
        "biased" => Ok(EstimatorKind::Biased),
        "categorical" | "unbiased_categorical" => Ok(EstimatorKind::UnbiasedCategorical),
        "concrete" => Ok(EstimatorKind::Concrete {
            lambda: LambdaMode::Fixed(0.2),
        }),
        _ => match name.strip_prefix("concrete:") {
            Some("inverse_k") => Ok(EstimatorKind::Concrete {
                lambda: LambdaMode::InverseK,
            }),
            Some(raw) => {
                let lambda: f64 = raw
                    .parse()
                    .with_context(|| format!("bad concrete temperature `{raw}`"))?;
                if !(lambda > 0.0 && lambda.is_finite()) {
                    bail!("concrete temperature must be positive, got {lambda}");
                }
                Ok(EstimatorKind::Concrete {
                    lambda: LambdaMode::Fixed(lambda),
                })
            }
            None => bail!(
                "unknown estimator `{name}` (expected biased, categorical, concrete, \
                 concrete:<temperature>, or concrete:inverse_k)"
            ),
        },
    }
}

/// Comma-separated estimator list, e.g. from `--estimators`.
pub fn parse_estimator_list(raw: &str) -> anyhow::Result<Vec<EstimatorKind>> {
    let kinds: anyhow::Result<Vec<_>> = raw.split(',').map(parse_estimator).collect();
    let kinds = kinds?;
    if kinds.is_empty() {
        bail!("estimator list is empty");
    }
    Ok(kinds)
}

/// Comma-separated particle-count grid, e.g. from `--kgrid`.
pub fn parse_k_grid(raw: &str) -> anyhow::Result<Vec<usize>> {
    let grid: anyhow::Result<Vec<usize>> = raw
        .split(',')
        .map(|s| {
            let k: usize = s
                .trim()
                .parse()
                .with_context(|| format!("bad particle count `{s}`"))?;
            if k == 0 {
                bail!("particle counts must be at least 1");
            }
            Ok(k)
        })
        .collect();
    let grid = grid?;
    if grid.is_empty() {
        bail!("particle-count grid is empty");
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config() -> RunConfig {
        RunConfig {
            objective: Objective::Svo,
            k: 8,
            m: Some(8),
            estimator: default_estimator(),
            epochs: 2,
            batch_size: default_batch_size(),
            learning_rate: default_lr(),
            adam_betas: default_betas(),
            adam_eps: default_eps(),
            clip_norm: default_clip(),
            seed: 1,
            model: ModelConfig::defaults(2, 1),
            data: PathBuf::from("dataset.json"),
            out_dir: PathBuf::from("out"),
            checkpoint_every: None,
        }
    }

    #[test]
    fn m_is_required_exactly_for_the_svo_objective() {
        let mut cfg = base_config();
        cfg.validate().unwrap();
        cfg.m = None;
        assert!(cfg.validate().is_err());
        cfg.objective = Objective::Smc;
        cfg.validate().unwrap();
        cfg.m = Some(4);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hyperparameters_must_be_positive() {
        let mut cfg = base_config();
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = base_config();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = base_config();
        cfg.adam_betas = (1.0, 0.999);
        assert!(cfg.validate().is_err());
        let mut cfg = base_config();
        cfg.k = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn estimator_grammar_covers_all_kinds() {
        assert_eq!(parse_estimator("biased").unwrap(), EstimatorKind::Biased);
        assert_eq!(
            parse_estimator("categorical").unwrap(),
            EstimatorKind::UnbiasedCategorical
        );
        assert_eq!(
            parse_estimator("concrete").unwrap(),
            EstimatorKind::Concrete {
                lambda: LambdaMode::Fixed(0.2)
            }
        );
        assert_eq!(
            parse_estimator("concrete:0.5").unwrap(),
            EstimatorKind::Concrete {
                lambda: LambdaMode::Fixed(0.5)
            }
        );
        assert_eq!(
            parse_estimator("concrete:inverse_k").unwrap(),
            EstimatorKind::Concrete {
                lambda: LambdaMode::InverseK
            }
        );
        assert!(parse_estimator("concrete:-1").is_err());
        assert!(parse_estimator("gibbs").is_err());
    }

    #[test]
    fn grids_and_lists_parse() {
        assert_eq!(parse_k_grid("4,8,16").unwrap(), vec![4, 8, 16]);
        assert!(parse_k_grid("4,0").is_err());
        assert_eq!(parse_estimator_list("biased,categorical").unwrap().len(), 2);
    }

    #[test]
    fn run_config_json_round_trips_with_defaults() {
        let raw = r#"{
            "objective": "svo",
            "k": 8,
            "m": 8,
            "seed": 7,
            "model": {"d_z": 2, "d_x": 1},
            "data": "d/dataset.json",
            "out_dir": "runs/x"
        }"#;
        let cfg: RunConfig = serde_json::from_str(raw).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.epochs, 300);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.adam_betas, (0.9, 0.999));
        assert_eq!(cfg.clip_norm, 10.0);
        assert_eq!(cfg.estimator, "biased");
    }
}
