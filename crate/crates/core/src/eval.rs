//! k-step rollout evaluation.
//!
//! Infers a latent state at every time point (filtered particle mean or
//! smoothed trajectory mean), rolls the learned transition mean forward `k`
//! steps with no data, maps through the emission mean, and scores the
//! resulting predictions with pooled MSE and its normalized version R^2.

use serde::{Deserialize, Serialize};

use crate::diffmath::{ParameterStore, Tape};
use crate::error::{Error, Result};
use crate::model::{SSMModel, Trajectory};
use crate::rng::DrawSource;
use crate::smc::{smc_filter, SmcConfig};
use crate::svo::backward_simulate;

/// Which posterior estimate seeds the rollout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    /// Weighted particle mean from the forward filter.
    Filter,
    /// Mean over smoothed trajectories from backward simulation.
    Smooth,
}

/// Deterministic k-step predictions for one trial.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KStepPredictions {
    pub d_x: usize,
    pub t_len: usize,
    pub k_max: usize,
    /// `per_k[k-1]` is column-major `(d_x, t_len - k)`; column `i` is the
    /// prediction for time `i + k` made from the latent estimate at time `i`.
    pub per_k: Vec<Vec<f64>>,
}

/// Posterior latent mean at every time point, `(d_z, t_len)` column-major.
pub fn latent_means(
    model: &SSMModel,
    store: &ParameterStore,
    trial: &Trajectory,
    mode: LatentMode,
    n_particles: usize,
    n_subparticles: usize,
    source: &mut dyn DrawSource,
) -> Result<Vec<f64>> {
    if trial.d_x != model.d_x() {
        return Err(Error::InvalidArgument {
            what: "latent_means",
            why: format!(
                "trial has d_x={} but the model expects {}",
                trial.d_x,
                model.d_x()
            ),
        });
    }
    let mut tape = Tape::new();
    let staged = model.stage(&mut tape, store);
    let x = tape.leaf(trial.d_x, trial.t_len, &trial.x)?;
    let cfg = SmcConfig::new(n_particles);
    let filter = smc_filter(&mut tape, &staged, x, &cfg, source)?;
    let d_z = model.d_z();
    let t_len = trial.t_len;
    let mut means = vec![0.0; d_z * t_len];
    match mode {
        LatentMode::Filter => {
            for t in 0..t_len {
                let parts = tape.value(filter.particles[t]).to_vec();
                let log_wbar = tape.value(filter.log_wbar[t]);
                for (k, lw) in log_wbar.iter().enumerate() {
                    let w = lw.exp();
                    for d in 0..d_z {
                        means[t * d_z + d] += w * parts[k * d_z + d];
                    }
                }
            }
        }
        LatentMode::Smooth => {
            let sweep = backward_simulate(&mut tape, &staged, &filter, x, n_subparticles, source)?;
            let k = n_particles as f64;
            for t in 0..t_len {
                let states = tape.value(sweep.states[t]);
                for (col, chunk) in states.chunks(d_z).enumerate() {
                    let _ = col;
                    for d in 0..d_z {
                        means[t * d_z + d] += chunk[d] / k;
                    }
                }
            }
        }
    }
    Ok(means)
}

/// Estimate the latent state at each `t`, apply the transition mean `k`
/// times with no data, and emit predictions for `t + k`, `k = 1..=k_max`.
pub fn k_step_predict(
    model: &SSMModel,
    store: &ParameterStore,
    trial: &Trajectory,
    k_max: usize,
    mode: LatentMode,
    n_particles: usize,
    n_subparticles: usize,
    source: &mut dyn DrawSource,
) -> Result<KStepPredictions> {
    let t_len = trial.t_len;
    if k_max == 0 {
        return Err(Error::InvalidArgument {
            what: "k_step_predict",
            why: "the rolling window starts at k = 1".into(),
        });
    }
    if k_max >= t_len {
        return Err(Error::InvalidArgument {
            what: "k_step_predict",
            why: format!("k_max={k_max} must be smaller than the trial length {t_len}"),
        });
    }
    let mut cur = latent_means(
        model,
        store,
        trial,
        mode,
        n_particles,
        n_subparticles,
        source,
    )?;
    let d_x = model.d_x();
    let mut per_k = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        cur = model.transition_mean_host(store, &cur, t_len);
        let ems = model.emission_mean_host(store, &cur, t_len);
        per_k.push(ems[..d_x * (t_len - k)].to_vec());
    }
    Ok(KStepPredictions {
        d_x,
        t_len,
        k_max,
        per_k,
    })
}

/// Pooled rollout scores: one MSE/R^2 value per horizon, plus per-trial
/// breakdowns and the per-trial baseline means.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RolloutReport {
    pub k_max: usize,
    /// Mean squared error at each horizon, pooled over trials and dims.
    pub mse: Vec<f64>,
    /// `None` marks an undefined ratio (constant targets).
    pub r2: Vec<Option<f64>>,
    /// `per_trial_mse[trial][k-1]`.
    pub per_trial_mse: Vec<Vec<f64>>,
    /// `baselines[trial][k-1][dim]`: mean of the targets `x_{k+1..T}`.
    pub baselines: Vec<Vec<Vec<f64>>>,
}

/// Score predictions against ground-truth observations. The squared error
/// and the baseline variance are both summed over trials, dims, and time
/// before the ratio, producing a single R^2 curve.
pub fn r_squared(
    predictions: &[KStepPredictions],
    data: &[&Trajectory],
    k_max: usize,
) -> Result<RolloutReport> {
    if predictions.len() != data.len() || predictions.is_empty() {
        return Err(Error::InvalidArgument {
            what: "r_squared",
            why: format!(
                "{} prediction sets vs {} trials",
                predictions.len(),
                data.len()
            ),
        });
    }
    for (p, tr) in predictions.iter().zip(data) {
        if p.d_x != tr.d_x || p.t_len != tr.t_len || p.k_max < k_max {
            return Err(Error::InvalidArgument {
                what: "r_squared",
                why: format!(
                    "prediction set (d_x={}, t_len={}, k_max={}) does not cover trial (d_x={}, t_len={}) at k_max={}",
                    p.d_x, p.t_len, p.k_max, tr.d_x, tr.t_len, k_max
                ),
            });
        }
    }
    let n_trials = data.len();
    let mut mse = Vec::with_capacity(k_max);
    let mut r2 = Vec::with_capacity(k_max);
    let mut per_trial_mse = vec![Vec::with_capacity(k_max); n_trials];
    let mut baselines = vec![Vec::with_capacity(k_max); n_trials];
    for k in 1..=k_max {
        let mut sse = 0.0;
        let mut sst = 0.0;
        let mut count = 0usize;
        for (trial, (p, tr)) in predictions.iter().zip(data).enumerate() {
            let d_x = tr.d_x;
            let n_t = tr.t_len - k;
            let preds = &p.per_k[k - 1];
            let mut trial_sse = 0.0;
            let mut base = vec![0.0; d_x];
            for i in 0..n_t {
                let target = tr.x_col(i + k);
                for d in 0..d_x {
                    base[d] += target[d];
                }
            }
            for b in &mut base {
                *b /= n_t as f64;
            }
            for i in 0..n_t {
                let target = tr.x_col(i + k);
                for d in 0..d_x {
                    let e = target[d] - preds[i * d_x + d];
                    trial_sse += e * e;
                    let c = target[d] - base[d];
                    sst += c * c;
                }
            }
            sse += trial_sse;
            count += n_t * d_x;
            per_trial_mse[trial].push(trial_sse / (n_t * d_x) as f64);
            baselines[trial].push(base);
        }
        mse.push(sse / count as f64);
        r2.push(if sst == 0.0 { None } else { Some(1.0 - sse / sst) });
    }
    Ok(RolloutReport {
        k_max,
        mse,
        r2,
        per_trial_mse,
        baselines,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::ParameterStore;
    use crate::model::{ModelConfig, SSMModel};
    use crate::rng::{derive_rng, stream, LiveSource};
    use rand::Rng;

    /// d_z = d_x model whose transition is exactly the identity and whose
    /// emission is exactly the identity map.
    fn frozen_model() -> (SSMModel, ParameterStore) {
        let mut store = ParameterStore::new();
        let mut cfg = ModelConfig::defaults(2, 2);
        cfg.transition_hidden = vec![];
        cfg.emission_hidden = vec![];
        let model = SSMModel::new(cfg, &mut store, 0).unwrap();
        let w = store.id_of("transition.w0").unwrap();
        let n = store.values(w).len();
        store.set_values(w, &vec![0.0; n]).unwrap();
        let ew = store.id_of("emission.w0").unwrap();
        store.set_values(ew, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        (model, store)
    }

    fn trial(d_x: usize, t_len: usize, seed: u64) -> Trajectory {
        let mut rng = derive_rng(seed, &[stream::DATA, 7]);
        let x: Vec<f64> = (0..d_x * t_len)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Trajectory::new(0, d_x, t_len, Vec::new(), x).unwrap()
    }

    #[test]
    fn frozen_dynamics_repeat_the_same_prediction_at_every_horizon() {
        let (model, store) = frozen_model();
        let tr = trial(2, 12, 3);
        let mut rng = derive_rng(9, &[stream::EVAL]);
        let mut source = LiveSource::new(&mut rng);
        let preds =
            k_step_predict(&model, &store, &tr, 5, LatentMode::Filter, 8, 1, &mut source).unwrap();
        for k in 2..=5 {
            let horizon = &preds.per_k[k - 1];
            let first = &preds.per_k[0];
            for i in 0..preds.d_x * (tr.t_len - k) {
                assert_eq!(horizon[i].to_bits(), first[i].to_bits());
            }
        }
    }

    #[test]
    fn degenerate_horizons_are_rejected() {
        let (model, store) = frozen_model();
        let tr = trial(2, 6, 3);
        let mut rng = derive_rng(9, &[stream::EVAL]);
        let mut source = LiveSource::new(&mut rng);
        assert!(
            k_step_predict(&model, &store, &tr, 0, LatentMode::Filter, 4, 1, &mut source).is_err()
        );
        let mut source = LiveSource::new(&mut rng);
        assert!(
            k_step_predict(&model, &store, &tr, 6, LatentMode::Filter, 4, 1, &mut source).is_err()
        );
    }

    #[test]
    fn smooth_mode_produces_finite_predictions() {
        let (model, store) = frozen_model();
        let tr = trial(2, 10, 4);
        let mut rng = derive_rng(10, &[stream::EVAL]);
        let mut source = LiveSource::new(&mut rng);
        let preds =
            k_step_predict(&model, &store, &tr, 3, LatentMode::Smooth, 4, 3, &mut source).unwrap();
        assert_eq!(preds.per_k.len(), 3);
        for (k, p) in preds.per_k.iter().enumerate() {
            assert_eq!(p.len(), 2 * (10 - (k + 1)));
            assert!(p.iter().all(|v| v.is_finite()));
        }
    }

    fn manual_preds(
        tr: &Trajectory,
        k_max: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> KStepPredictions {
        let mut per_k = Vec::with_capacity(k_max);
        for k in 1..=k_max {
            let mut vals = Vec::with_capacity(tr.d_x * (tr.t_len - k));
            for i in 0..tr.t_len - k {
                for d in 0..tr.d_x {
                    vals.push(f(i + k, d));
                }
            }
            per_k.push(vals);
        }
        KStepPredictions {
            d_x: tr.d_x,
            t_len: tr.t_len,
            k_max,
            per_k,
        }
    }

    #[test]
    fn perfect_predictions_score_one_and_zero_error() {
        let tr = trial(3, 20, 5);
        let preds = manual_preds(&tr, 4, |t, d| tr.x_col(t)[d]);
        let report = r_squared(&[preds], &[&tr], 4).unwrap();
        for k in 0..4 {
            assert_eq!(report.mse[k], 0.0);
            assert_eq!(report.r2[k], Some(1.0));
        }
    }

    #[test]
    fn baseline_predictor_scores_zero() {
        let tr = trial(2, 30, 6);
        let k_max = 3;
        // Predict the per-horizon target mean everywhere.
        let mut baselines = Vec::new();
        for k in 1..=k_max {
            let n_t = tr.t_len - k;
            let mut base = vec![0.0; tr.d_x];
            for i in 0..n_t {
                for d in 0..tr.d_x {
                    base[d] += tr.x_col(i + k)[d];
                }
            }
            for b in &mut base {
                *b /= n_t as f64;
            }
            baselines.push(base);
        }
        let mut preds = manual_preds(&tr, k_max, |_, _| f64::NAN);
        for k in 1..=k_max {
            let base = &baselines[k - 1];
            for v in preds.per_k[k - 1].chunks_mut(tr.d_x) {
                v.copy_from_slice(base);
            }
        }
        let report = r_squared(&[preds], &[&tr], k_max).unwrap();
        for k in 0..k_max {
            let r2 = report.r2[k].unwrap();
            assert!(r2.abs() < 1e-12, "k={}: r2 {r2}", k + 1);
        }
    }

    #[test]
    fn r_squared_is_invariant_to_common_affine_rescaling() {
        let tr = trial(2, 25, 8);
        let mut rng = derive_rng(11, &[stream::EVAL, 1]);
        let preds = manual_preds(&tr, 3, |t, d| {
            tr.x_col(t)[d] + 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let base = r_squared(&[preds.clone()], &[&tr], 3).unwrap();

        // Pooling sums squared errors across dims before the ratio, so the
        // scale must be shared across dims; shifts may differ freely.
        let scale = [-2.5, -2.5];
        let shift = [1.0, -4.0];
        let mut tr2 = tr.clone();
        for (i, v) in tr2.x.iter_mut().enumerate() {
            let d = i % 2;
            *v = scale[d] * *v + shift[d];
        }
        let mut preds2 = preds;
        for pk in &mut preds2.per_k {
            for (i, v) in pk.iter_mut().enumerate() {
                let d = i % 2;
                *v = scale[d] * *v + shift[d];
            }
        }
        let scaled = r_squared(&[preds2], &[&tr2], 3).unwrap();
        for k in 0..3 {
            let a = base.r2[k].unwrap();
            let b = scaled.r2[k].unwrap();
            assert!((a - b).abs() < 1e-12, "k={}: {a} vs {b}", k + 1);
        }
    }

    #[test]
    fn constant_targets_yield_the_undefined_sentinel() {
        let x = vec![3.0; 10];
        let tr = Trajectory::new(0, 1, 10, Vec::new(), x).unwrap();
        let preds = manual_preds(&tr, 2, |_, _| 2.9);
        let report = r_squared(&[preds], &[&tr], 2).unwrap();
        assert_eq!(report.r2, vec![None, None]);
        assert!(report.mse[0] > 0.0);
    }

    #[test]
    fn r_squared_rejects_misaligned_inputs() {
        let tr = trial(2, 10, 1);
        let preds = manual_preds(&tr, 2, |t, d| tr.x_col(t)[d]);
        let other = trial(3, 10, 2);
        assert!(r_squared(&[preds.clone()], &[&other], 2).is_err());
        assert!(r_squared(&[preds], &[&tr], 3).is_err());
        assert!(r_squared(&[], &[], 1).is_err());
    }
}
