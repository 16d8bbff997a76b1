//! The training loop: stochastic ascent on a marginal-likelihood objective
//! with Adam, deterministic given the run config.
//!
//! Randomness discipline: every stochastic step draws from a stream derived
//! from `(seed, purpose, epoch, index)` tags, so reruns of the same config
//! reproduce every shuffle, particle draw, and parameter update bit for bit.
//! The only non-reproducible output is the `wall_s` column of the log.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context};
use rand::seq::SliceRandom;
use svo_core::diffmath::{ParameterStore, SlotId, Tape};
use svo_core::grad::{estimate_gradient, EstimatorKind, GradientMap};
use svo_core::model::{SSMModel, Trajectory};
use svo_core::rng::{derive_rng, stream, DrawSource, LiveSource};
use svo_core::smc::{smc_filter, ResampleMode, SmcConfig};
use svo_core::svo::svo_estimate;
use svo_core::systems::Dataset;

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::artifacts::{write_training_log, Checkpoint, TrainingLogRow};
use crate::config::{parse_estimator, resolve_out_dir, Objective, RunConfig};

/// What `train` leaves behind.
pub struct TrainOutcome {
    pub rows: Vec<TrainingLogRow>,
    pub out_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    /// Warnings surfaced during training (skipped trials, skipped slots).
    pub warnings: Vec<String>,
}

/// Run the full training job described by `cfg`. Writes `run_config.json`,
/// `training_log.csv` (rewritten after every epoch), a mid-training
/// checkpoint at epoch `max(1, epochs/2)`, optional cadence checkpoints, and
/// `checkpoint_final.json`.
pub fn train(cfg: &RunConfig) -> anyhow::Result<TrainOutcome> {
    cfg.validate()?;
    let out_dir = resolve_out_dir(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    std::fs::write(
        out_dir.join("run_config.json"),
        serde_json::to_string_pretty(cfg)?,
    )
    .context("writing run_config.json")?;

    let dataset = Dataset::load_json(&cfg.data)
        .with_context(|| format!("loading dataset {}", cfg.data.display()))?;
    let d_x = dataset.trials[0].d_x;
    if d_x != cfg.model.d_x {
        bail!(
            "model d_x={} does not match dataset d_x={d_x}",
            cfg.model.d_x
        );
    }
    if dataset.t_len() < 2 {
        bail!("training needs trials with at least two time steps");
    }
    if dataset.train_idx.is_empty() {
        bail!("dataset has no training trials");
    }

    let mut store = ParameterStore::new();
    let model = SSMModel::new(cfg.model.clone(), &mut store, cfg.seed)
        .context("building model from config")?;
    let estimator = parse_estimator(&cfg.estimator)?;

    let adam_cfg = AdamConfig {
        learning_rate: cfg.learning_rate,
        beta1: cfg.adam_betas.0,
        beta2: cfg.adam_betas.1,
        eps: cfg.adam_eps,
    };
    adam_cfg.validate()?;
    let mut adam = AdamState::new(&store);

    let log_path = out_dir.join("training_log.csv");
    let mid_epoch = (cfg.epochs / 2).max(1);
    let mut rows: Vec<TrainingLogRow> = Vec::with_capacity(cfg.epochs);
    let mut warnings: Vec<String> = Vec::new();

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = dataset.train_idx.clone();
        let mut shuffle_rng = derive_rng(cfg.seed, &[stream::TRAIN, epoch as u64, 0]);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_obj_sum = 0.0;
        let mut epoch_obj_n = 0usize;
        let mut epoch_grad_norm_sum = 0.0;
        let mut epoch_batches = 0usize;
        let mut epoch_failures = 0usize;

        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Option<Vec<(SlotId, Vec<f64>)>> = None;
            let mut n_ok = 0usize;
            for (offset, &trial_idx) in batch.iter().enumerate() {
                let pos = batch_no * cfg.batch_size + offset;
                let mut rng =
                    derive_rng(cfg.seed, &[stream::TRAIN, epoch as u64, 1 + pos as u64]);
                let mut source = LiveSource::new(&mut rng);
                let trial = &dataset.trials[trial_idx];
                match objective_gradient(&model, &store, cfg, estimator, trial, &mut source) {
                    Ok(gm) if gm.primal.is_finite() && grads_finite(&gm) => {
                        epoch_obj_sum += gm.primal;
                        epoch_obj_n += 1;
                        match &mut acc {
                            None => acc = Some(gm.slots),
                            Some(slots) => {
                                for ((_, a), (_, g)) in slots.iter_mut().zip(&gm.slots) {
                                    for (ai, gi) in a.iter_mut().zip(g) {
                                        *ai += gi;
                                    }
                                }
                            }
                        }
                        n_ok += 1;
                    }
                    Ok(gm) => {
                        epoch_failures += 1;
                        warnings.push(format!(
                            "epoch {epoch}: trial {trial_idx} produced a non-finite \
                             objective or gradient (objective {}); skipped",
                            gm.primal
                        ));
                    }
                    Err(e) => {
                        epoch_failures += 1;
                        warnings.push(format!(
                            "epoch {epoch}: trial {trial_idx} failed: {e:#}; skipped"
                        ));
                    }
                }
            }
            let Some(mut slots) = acc else { continue };
            let scale = 1.0 / n_ok as f64;
            for (_, g) in &mut slots {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            let norm = global_norm(&slots);
            epoch_grad_norm_sum += norm;
            epoch_batches += 1;
            if norm > cfg.clip_norm {
                let s = cfg.clip_norm / norm;
                for (_, g) in &mut slots {
                    for v in g.iter_mut() {
                        *v *= s;
                    }
                }
            }
            // Adam minimizes; ascend the objective by stepping on -gradient.
            for (_, g) in &mut slots {
                for v in g.iter_mut() {
                    *v = -*v;
                }
            }
            let step_warnings = adam_step(&mut store, &slots, &mut adam, &adam_cfg)?;
            for w in step_warnings {
                warnings.push(format!("epoch {epoch}: {w}"));
            }
        }

        if epoch_obj_n == 0 {
            write_training_log(&log_path, &rows)?;
            Checkpoint::capture(epoch - 1, cfg.seed, model.config(), &store)
                .save(&out_dir.join("checkpoint_aborted.json"))?;
            bail!(
                "epoch {epoch}: every training trial failed ({epoch_failures} failures); \
                 aborting (last good parameters in checkpoint_aborted.json)"
            );
        }

        let mut val_sum = 0.0;
        let mut val_n = 0usize;
        for (vi, &trial_idx) in dataset.val_idx.iter().enumerate() {
            let mut rng = derive_rng(cfg.seed, &[stream::EVAL, epoch as u64, vi as u64]);
            let mut source = LiveSource::new(&mut rng);
            match objective_value(&model, &store, cfg, &dataset.trials[trial_idx], &mut source) {
                Ok(v) if v.is_finite() => {
                    val_sum += v;
                    val_n += 1;
                }
                Ok(_) | Err(_) => {}
            }
        }

        let row = TrainingLogRow {
            epoch,
            train_obj: epoch_obj_sum / epoch_obj_n as f64,
            val_obj: if val_n > 0 {
                val_sum / val_n as f64
            } else {
                f64::NAN
            },
            wall_s: t0.elapsed().as_secs_f64(),
            param_norm: param_norm(&store),
            grad_norm: if epoch_batches > 0 {
                epoch_grad_norm_sum / epoch_batches as f64
            } else {
                f64::NAN
            },
        };
        rows.push(row);
        write_training_log(&log_path, &rows)?;

        if epoch == mid_epoch {
            Checkpoint::capture(epoch, cfg.seed, model.config(), &store)
                .save(&out_dir.join("checkpoint_mid.json"))?;
        }
        if let Some(every) = cfg.checkpoint_every {
            if every > 0 && epoch % every == 0 {
                Checkpoint::capture(epoch, cfg.seed, model.config(), &store)
                    .save(&out_dir.join(format!("checkpoint_epoch{epoch}.json")))?;
            }
        }
    }

    write_training_log(&log_path, &rows)?;
    let final_path = out_dir.join("checkpoint_final.json");
    Checkpoint::capture(cfg.epochs, cfg.seed, model.config(), &store).save(&final_path)?;
    Ok(TrainOutcome {
        rows,
        out_dir,
        final_checkpoint: final_path,
        warnings,
    })
}

/// One objective gradient for one trial.
fn objective_gradient(
    model: &SSMModel,
    store: &ParameterStore,
    cfg: &RunConfig,
    estimator: EstimatorKind,
    trial: &Trajectory,
    source: &mut dyn DrawSource,
) -> anyhow::Result<GradientMap> {
    match cfg.objective {
        Objective::Smc => Ok(estimate_gradient(
            model,
            store,
            &trial.x,
            trial.t_len,
            cfg.k,
            estimator,
            source,
        )?),
        Objective::Svo => {
            let mut tape = Tape::new();
            let staged = model.stage(&mut tape, store);
            let x = tape.leaf(model.d_x(), trial.t_len, &trial.x)?;
            let smc_cfg = SmcConfig {
                n_particles: cfg.k,
                resample: ResampleMode::Categorical,
            };
            let (obj, _sweep, _filter) =
                svo_estimate(&mut tape, &staged, x, &smc_cfg, cfg.m_for_svo(), source)?;
            let grads = tape.backward(obj.log_z_svo)?;
            let slots = store
                .slot_ids()
                .map(|id| (id, grads.wrt(staged.params().var(id)).to_vec()))
                .collect();
            Ok(GradientMap {
                primal: tape.scalar_value(obj.log_z_svo),
                slots,
            })
        }
    }
}

/// Forward-only objective value (no gradient), for validation scoring.
pub fn objective_value(
    model: &SSMModel,
    store: &ParameterStore,
    cfg: &RunConfig,
    trial: &Trajectory,
    source: &mut dyn DrawSource,
) -> anyhow::Result<f64> {
    let mut tape = Tape::new();
    let staged = model.stage(&mut tape, store);
    let x = tape.leaf(model.d_x(), trial.t_len, &trial.x)?;
    let smc_cfg = SmcConfig {
        n_particles: cfg.k,
        resample: ResampleMode::Categorical,
    };
    match cfg.objective {
        Objective::Smc => {
            let out = smc_filter(&mut tape, &staged, x, &smc_cfg, source)?;
            Ok(tape.scalar_value(out.log_z_hat))
        }
        Objective::Svo => {
            let (obj, _, _) =
                svo_estimate(&mut tape, &staged, x, &smc_cfg, cfg.m_for_svo(), source)?;
            Ok(tape.scalar_value(obj.log_z_svo))
        }
    }
}

fn grads_finite(gm: &GradientMap) -> bool {
    gm.slots
        .iter()
        .all(|(_, g)| g.iter().all(|v| v.is_finite()))
}

fn global_norm(slots: &[(SlotId, Vec<f64>)]) -> f64 {
    slots
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn param_norm(store: &ParameterStore) -> f64 {
    store
        .slot_ids()
        .flat_map(|id| store.values(id).iter().copied().collect::<Vec<_>>())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Convenience for tests and `eval`: load a dataset and pick a split.
pub fn split_trials<'d>(dataset: &'d Dataset, split: &str) -> anyhow::Result<Vec<&'d Trajectory>> {
    match split {
        "train" => Ok(dataset.train_trials()),
        "val" => Ok(dataset.val_trials()),
        "test" => Ok(dataset.test_trials()),
        "all" => Ok(dataset.trials.iter().collect()),
        other => bail!("unknown split `{other}` (expected train, val, test, or all)"),
    }
}
