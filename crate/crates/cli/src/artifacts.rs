//! On-disk artifacts: checkpoints, the training log, and the evaluation /
//! SNR report files. All writers emit fixed column layouts so downstream
//! tooling can rely on the headers.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use svo_core::diffmath::ParameterStore;
use svo_core::eval::RolloutReport;
use svo_core::grad::SnrReport;
use svo_core::model::{ModelConfig, SSMModel};

/// A self-describing checkpoint: enough to rebuild the model without the run
/// config that produced it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Number of completed training epochs (0 = initialization).
    pub epoch: usize,
    /// Master seed of the run that wrote the checkpoint; also the seed used
    /// to lay out parameter slots when reloading.
    pub seed: u64,
    pub model: ModelConfig,
    /// Flat name -> {group, shape, values} map of every parameter.
    pub params: serde_json::Value,
}

impl Checkpoint {
    pub fn capture(epoch: usize, seed: u64, model: &ModelConfig, store: &ParameterStore) -> Self {
        Checkpoint {
            epoch,
            seed,
            model: model.clone(),
            params: store.to_checkpoint(),
        }
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self).context("serializing checkpoint")?;
        std::fs::write(path, text)
            .with_context(|| format!("writing checkpoint {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading checkpoint {}", path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("parsing checkpoint {}", path.display()))
    }

    /// Rebuild the model and parameter store this checkpoint describes.
    pub fn instantiate(&self) -> anyhow::Result<(SSMModel, ParameterStore)> {
        let mut store = ParameterStore::new();
        let model = SSMModel::new(self.model.clone(), &mut store, self.seed)
            .context("rebuilding model from checkpoint")?;
        store
            .load_checkpoint(&self.params)
            .context("restoring checkpoint parameters")?;
        Ok((model, store))
    }
}

/// One row of the per-epoch training log.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingLogRow {
    pub epoch: usize,
    /// Mean objective over the epoch's training trials.
    pub train_obj: f64,
    /// Mean objective over the validation trials (forward pass only).
    pub val_obj: f64,
    /// Wall-clock seconds for the epoch; the only non-deterministic column.
    pub wall_s: f64,
    pub param_norm: f64,
    pub grad_norm: f64,
}

pub const TRAINING_LOG_HEADER: [&str; 6] = [
    "epoch",
    "train_obj",
    "val_obj",
    "wall_s",
    "param_norm",
    "grad_norm",
];

/// Write the full log (header + all rows). Rewritten after every epoch so a
/// killed run still leaves a parseable file.
pub fn write_training_log(path: &Path, rows: &[TrainingLogRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating training log {}", path.display()))?;
    w.write_record(TRAINING_LOG_HEADER)?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            fmt_f64(r.train_obj),
            fmt_f64(r.val_obj),
            fmt_f64(r.wall_s),
            fmt_f64(r.param_norm),
            fmt_f64(r.grad_norm),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_training_log(path: &Path) -> anyhow::Result<Vec<TrainingLogRow>> {
    let mut rdr = csv::Reader::from_path(path)
        .with_context(|| format!("reading training log {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != TRAINING_LOG_HEADER {
        bail!("unexpected training-log header: {headers:?}");
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(TrainingLogRow {
            epoch: rec[0].parse()?,
            train_obj: rec[1].parse()?,
            val_obj: rec[2].parse()?,
            wall_s: rec[3].parse()?,
            param_norm: rec[4].parse()?,
            grad_norm: rec[5].parse()?,
        });
    }
    Ok(rows)
}

/// `k,mse,r2` — one row per horizon; `r2` is empty when the targets were
/// constant and the ratio is undefined.
pub fn write_rollout_csv(path: &Path, report: &RolloutReport) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["k", "mse", "r2"])?;
    for k in 1..=report.k_max {
        let r2 = match report.r2[k - 1] {
            Some(v) => fmt_f64(v),
            None => String::new(),
        };
        w.write_record([k.to_string(), fmt_f64(report.mse[k - 1]), r2])?;
    }
    w.flush()?;
    Ok(())
}

/// `trial,k,mse` — per-trial horizon breakdown, trials indexed as passed to
/// the scorer.
pub fn write_rollout_trials_csv(path: &Path, report: &RolloutReport) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["trial", "k", "mse"])?;
    for (trial, per_k) in report.per_trial_mse.iter().enumerate() {
        for (ki, mse) in per_k.iter().enumerate() {
            w.write_record([trial.to_string(), (ki + 1).to_string(), fmt_f64(*mse)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `trial,t,dim,value` rows of posterior latent means, one block per trial.
pub fn write_latents_csv(
    path: &Path,
    d_z: usize,
    per_trial_means: &[(usize, Vec<f64>)],
) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["trial", "t", "dim", "value"])?;
    for (trial, means) in per_trial_means {
        if means.len() % d_z != 0 {
            bail!(
                "latent means for trial {trial} have length {} not divisible by d_z={d_z}",
                means.len()
            );
        }
        let t_len = means.len() / d_z;
        for t in 0..t_len {
            for dim in 0..d_z {
                w.write_record([
                    trial.to_string(),
                    t.to_string(),
                    dim.to_string(),
                    fmt_f64(means[t * d_z + dim]),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `kind,group,k,snr_l2,snr_agg,n` — one row per (estimator, parameter
/// group, particle count) cell.
pub fn write_snr_csv(path: &Path, report: &SnrReport) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["kind", "group", "k", "snr_l2", "snr_agg", "n"])?;
    for c in &report.cells {
        w.write_record([
            c.kind.clone(),
            c.group.as_str().to_string(),
            c.k.to_string(),
            fmt_f64(c.snr_l2),
            fmt_f64(c.snr_agg),
            c.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Log-log slope fits as JSON (`slope` is d log SNR / d log K; the
/// `paper_axis_slope` field doubles it for plots whose y-axis is the SNR of
/// the squared-gradient norm).
pub fn write_slopes_json(path: &Path, report: &SnrReport) -> anyhow::Result<()> {
    let text =
        serde_json::to_string_pretty(&report.slopes).context("serializing slope fits")?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Full float precision that round-trips exactly through parse::<f64>.
fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        let mut buf = ryu_like(v);
        if !buf.contains('.') && !buf.contains('e') && !buf.contains("inf") {
            buf.push_str(".0");
        }
        buf
    }
}

fn ryu_like(v: f64) -> String {
    // `{:?}` on f64 prints the shortest string that parses back to the same
    // bits, which keeps logs compact and round-trip exact.
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use svo_core::rng::{derive_rng, stream};

    #[test]
    fn checkpoints_round_trip_bit_exactly() {
        let dir = tempdir("ckpt_roundtrip");
        let cfg = ModelConfig::defaults(2, 3);
        let mut store = ParameterStore::new();
        let _model = SSMModel::new(cfg.clone(), &mut store, 99).unwrap();
        // Perturb one slot so we are not just testing the seed.
        let id = store.id_of("emission.log_std").unwrap();
        let mut vals = store.values(id).to_vec();
        for v in &mut vals {
            *v += 0.125;
        }
        store.set_values(id, &vals).unwrap();

        let path = dir.join("checkpoint.json");
        Checkpoint::capture(7, 99, &cfg, &store).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.epoch, 7);
        assert_eq!(loaded.seed, 99);
        let (_model2, store2) = loaded.instantiate().unwrap();
        for id in store.slot_ids() {
            let a = store.values(id);
            let b = store2.values(id);
            assert_eq!(a, b, "slot {} drifted through the round trip", store.name(id));
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn checkpoint_with_wrong_architecture_is_rejected() {
        let cfg = ModelConfig::defaults(2, 3);
        let mut store = ParameterStore::new();
        let _ = SSMModel::new(cfg.clone(), &mut store, 1).unwrap();
        let mut ckpt = Checkpoint::capture(0, 1, &cfg, &store);
        // Claim a different latent dimension than the stored parameters use.
        ckpt.model = ModelConfig::defaults(3, 3);
        assert!(ckpt.instantiate().is_err());
    }

    #[test]
    fn training_log_round_trips_and_keeps_header_order() {
        let dir = tempdir("log_roundtrip");
        let path = dir.join("training_log.csv");
        let rows = vec![
            TrainingLogRow {
                epoch: 1,
                train_obj: -12.5,
                val_obj: -13.25,
                wall_s: 0.5,
                param_norm: 3.0,
                grad_norm: 0.25,
            },
            TrainingLogRow {
                epoch: 2,
                train_obj: -11.0,
                val_obj: f64::NAN,
                wall_s: 0.25,
                param_norm: 3.5,
                grad_norm: 0.125,
            },
        ];
        write_training_log(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,train_obj,val_obj,wall_s,param_norm,grad_norm\n"));
        let back = read_training_log(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], rows[0]);
        assert_eq!(back[1].epoch, 2);
        assert!(back[1].val_obj.is_nan());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rollout_csv_leaves_undefined_r2_empty() {
        let dir = tempdir("rollout_csv");
        let report = RolloutReport {
            k_max: 2,
            mse: vec![0.5, 0.75],
            r2: vec![Some(0.25), None],
            per_trial_mse: vec![vec![0.5, 0.75]],
            baselines: vec![vec![vec![0.0], vec![0.0]]],
        };
        let path = dir.join("rollout.csv");
        write_rollout_csv(&path, &report).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "k,mse,r2\n1,0.5,0.25\n2,0.75,\n");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn float_formatting_round_trips() {
        let mut rng = derive_rng(1234, &[stream::VERIFY, 0]);
        use rand::Rng;
        for _ in 0..1000 {
            let v: f64 = rng.random_range(-1e6..1e6);
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
        assert_eq!(fmt_f64(1.0), "1.0");
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
        assert_eq!(fmt_f64(f64::NEG_INFINITY), "-inf");
        assert_eq!(fmt_f64(f64::NAN), "NaN");
        assert_eq!("inf".parse::<f64>().unwrap(), f64::INFINITY);
        assert!("NaN".parse::<f64>().unwrap().is_nan());
    }

    fn tempdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("svo_cli_{tag}_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }
}
