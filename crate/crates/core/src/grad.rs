//! Gradient estimators for the filtering objective and an empirical
//! signal-to-noise harness.
//!
//! Three estimators of the gradient of `L_K = log Zhat` from the filter:
//!
//! - `Biased`: differentiate `L_K` with the ancestor draws held fixed
//!   (they are host-side indices, so this is the plain backward pass).
//! - `UnbiasedCategorical`: add the score-function correction
//!   `stop_grad(L_K) * d/dparam sum_{t,k} log wbar_{t-1}[a_t^k]`, making the
//!   estimator unbiased at the cost of variance.
//! - `Concrete(lambda)`: run the filter with relaxed resampling and add the
//!   analogous score term for the relaxation density.
//!
//! The SNR of an estimator at a given particle count is measured from `N`
//! independent gradient samples: per element, `|mean| / std`; per parameter
//! group, the l2 norm of that vector (primary) and the ratio of norms
//! (secondary). A least-squares fit of `log SNR` against `log K` gives the
//! empirical convergence rate; `0.5` is the reference rate for estimators
//! whose SNR grows like the square root of the particle count. The fitted
//! slope is also reported doubled, matching figure conventions that draw the
//! square-root rate as a unit slope.

use serde::{Deserialize, Serialize};

use crate::diffmath::{ParamGroup, ParameterStore, SlotId, Tape};
use crate::error::{Error, Result};
use crate::model::{SSMModel, Trajectory};
use crate::rng::{derive_rng, stream, DrawSource, LiveSource};
use crate::smc::{smc_filter, ResampleMode, SmcConfig};

/// Temperature selection for the relaxed estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    Fixed(f64),
    InverseK,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorKind {
    Biased,
    UnbiasedCategorical,
    Concrete { lambda: LambdaMode },
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Biased => "biased",
            EstimatorKind::UnbiasedCategorical => "unbiased_categorical",
            EstimatorKind::Concrete { .. } => "concrete",
        }
    }

    /// Temperature at a given particle count; `None` for the categorical
    /// estimators.
    pub fn lambda_for(&self, k: usize) -> Option<f64> {
        match self {
            EstimatorKind::Concrete {
                lambda: LambdaMode::Fixed(v),
            } => Some(*v),
            EstimatorKind::Concrete {
                lambda: LambdaMode::InverseK,
            } => Some(1.0 / k as f64),
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        if let EstimatorKind::Concrete {
            lambda: LambdaMode::Fixed(v),
        } = self
        {
            if !(*v > 0.0) {
                return Err(Error::InvalidArgument {
                    what: "EstimatorKind",
                    why: format!("temperature must be positive, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// One gradient sample: the primal objective value and per-slot gradients in
/// registration order.
pub struct GradientMap {
    pub primal: f64,
    pub slots: Vec<(SlotId, Vec<f64>)>,
}

impl GradientMap {
    pub fn slot(&self, id: SlotId) -> &[f64] {
        &self
            .slots
            .iter()
            .find(|(s, _)| *s == id)
            .expect("slot present")
            .1
    }

    /// Concatenated gradient over all slots of a group, registration order.
    pub fn group_vec(&self, store: &ParameterStore, group: ParamGroup) -> Vec<f64> {
        let mut out = Vec::new();
        for (id, g) in &self.slots {
            if store.group(*id) == group {
                out.extend_from_slice(g);
            }
        }
        out
    }

    /// Global l2 norm over every slot.
    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// One gradient of the filtering objective `log Zhat` with `K` particles.
pub fn estimate_gradient(
    model: &SSMModel,
    store: &ParameterStore,
    xs: &[f64],
    t_len: usize,
    k: usize,
    kind: EstimatorKind,
    source: &mut dyn DrawSource,
) -> Result<GradientMap> {
    kind.validate()?;
    let resample = match kind {
        EstimatorKind::Concrete { .. } => ResampleMode::Concrete {
            lambda: kind.lambda_for(k).unwrap(),
        },
        _ => ResampleMode::Categorical,
    };
    let cfg = SmcConfig {
        n_particles: k,
        resample,
    };

    let mut tape = Tape::new();
    let staged = model.stage(&mut tape, store);
    let x = tape.leaf(model.d_x(), t_len, xs)?;
    let out = smc_filter(&mut tape, &staged, x, &cfg, source)?;

    let root = match kind {
        EstimatorKind::Biased => out.log_z_hat,
        EstimatorKind::UnbiasedCategorical => {
            let score = out.ancestor_log_prob.expect("categorical mode");
            let frozen = tape.stop_gradient(out.log_z_hat);
            let term = tape.mul(frozen, score)?;
            tape.add(out.log_z_hat, term)?
        }
        EstimatorKind::Concrete { .. } => {
            let score = out.relaxation_log_prob.expect("concrete mode");
            let frozen = tape.stop_gradient(out.log_z_hat);
            let term = tape.mul(frozen, score)?;
            tape.add(out.log_z_hat, term)?
        }
    };

    let grads = tape.backward(root)?;
    let slots = store
        .slot_ids()
        .map(|id| (id, grads.wrt(staged.params().var(id)).to_vec()))
        .collect();
    Ok(GradientMap {
        primal: tape.scalar_value(out.log_z_hat),
        slots,
    })
}

/// Elementwise SNR statistics for one batch of gradient samples.
pub struct SnrStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// l2 norm of the per-element `|mean| / std` vector (primary; infinite
    /// if any element has zero sample variance).
    pub snr_l2: f64,
    /// `‖mean‖₂ / ‖std‖₂` (secondary aggregate).
    pub snr_agg: f64,
    pub degenerate: bool,
}

/// Mean/std over samples (rows = samples), unbiased variance.
pub fn snr_from_samples(samples: &[Vec<f64>]) -> Result<SnrStats> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InvalidArgument {
            what: "snr_from_samples",
            why: format!("need at least two samples, got {n}"),
        });
    }
    let dim = samples[0].len();
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0; dim];
    for s in samples {
        for ((v, m), x) in var.iter_mut().zip(&mean).zip(s) {
            let d = x - m;
            *v += d * d;
        }
    }
    let mut degenerate = false;
    let std: Vec<f64> = var
        .iter()
        .map(|v| {
            let s = (v / (n as f64 - 1.0)).sqrt();
            if s == 0.0 {
                degenerate = true;
            }
            s
        })
        .collect();
    let snr_l2 = mean
        .iter()
        .zip(&std)
        .map(|(m, s)| {
            let r = m.abs() / s;
            r * r
        })
        .sum::<f64>()
        .sqrt();
    let mean_norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    let std_norm = std.iter().map(|v| v * v).sum::<f64>().sqrt();
    let snr_agg = if std_norm == 0.0 {
        f64::INFINITY
    } else {
        mean_norm / std_norm
    };
    Ok(SnrStats {
        mean,
        std,
        snr_l2,
        snr_agg,
        degenerate,
    })
}

/// One (estimator, group, K) cell of the SNR report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SnrCell {
    pub kind: String,
    pub group: ParamGroup,
    pub k: usize,
    pub snr_l2: f64,
    pub snr_agg: f64,
    pub n: usize,
    pub degenerate: bool,
}

/// Least-squares fit of `log snr_l2` against `log K` for one
/// (estimator, group) series.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlopeFit {
    pub kind: String,
    pub group: ParamGroup,
    /// Slope on log SNR vs log K axes; 0.5 is the square-root reference.
    pub slope: f64,
    /// Doubled slope, for figure conventions where the square-root rate is
    /// drawn as a unit slope.
    pub paper_axis_slope: f64,
    pub intercept: f64,
    pub n_points: usize,
}

#[derive(Serialize, Deserialize)]
pub struct SnrReport {
    pub cells: Vec<SnrCell>,
    pub slopes: Vec<SlopeFit>,
}

/// Ordinary least squares on `(x, y)` pairs; errors on fewer than two
/// points or zero x-variance.
pub fn ols_slope(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return Err(Error::InvalidArgument {
            what: "ols_slope",
            why: "need at least two points".into(),
        });
    }
    let mx = points.iter().map(|(x, _)| x).sum::<f64>() / n;
    let my = points.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Numerical {
            what: "ols_slope",
            why: "zero variance in x".into(),
        });
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Measure SNR for each estimator and particle count over `n` gradient
/// samples each. Sample `i` uses `trials[i % trials.len()]`; pass a single
/// trajectory to isolate estimator noise at fixed data.
pub fn measure_snr(
    model: &SSMModel,
    store: &ParameterStore,
    trials: &[Trajectory],
    k_grid: &[usize],
    kinds: &[EstimatorKind],
    n: usize,
    master_seed: u64,
) -> Result<SnrReport> {
    if n < 2 {
        return Err(Error::InvalidArgument {
            what: "measure_snr",
            why: format!("need at least two samples per cell, got {n}"),
        });
    }
    if trials.is_empty() || k_grid.is_empty() || kinds.is_empty() {
        return Err(Error::InvalidArgument {
            what: "measure_snr",
            why: "empty trials, grid, or estimator list".into(),
        });
    }
    let groups = [ParamGroup::Theta, ParamGroup::Phi, ParamGroup::Varphi];
    let mut cells = Vec::new();
    let mut slopes = Vec::new();

    for (ki, kind) in kinds.iter().enumerate() {
        // Per group: (log K, log snr) points for the fit.
        let mut fit_points: Vec<Vec<(f64, f64)>> = vec![Vec::new(); groups.len()];
        for (gi, &k) in k_grid.iter().enumerate() {
            let mut samples: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(n); groups.len()];
            for i in 0..n {
                let trial = &trials[i % trials.len()];
                let mut rng = derive_rng(
                    master_seed,
                    &[stream::SNR, ki as u64, gi as u64, i as u64],
                );
                let mut source = LiveSource::new(&mut rng);
                let gm = estimate_gradient(
                    model,
                    store,
                    &trial.x,
                    trial.t_len,
                    k,
                    *kind,
                    &mut source,
                )?;
                for (slot, group) in groups.iter().enumerate() {
                    samples[slot].push(gm.group_vec(store, *group));
                }
            }
            for (slot, group) in groups.iter().enumerate() {
                let stats = snr_from_samples(&samples[slot])?;
                if stats.snr_l2.is_finite() && stats.snr_l2 > 0.0 {
                    fit_points[slot].push((
                        (k as f64).ln(),
                        stats.snr_l2.ln(),
                    ));
                }
                cells.push(SnrCell {
                    kind: kind.name().to_string(),
                    group: *group,
                    k,
                    snr_l2: stats.snr_l2,
                    snr_agg: stats.snr_agg,
                    n,
                    degenerate: stats.degenerate,
                });
            }
        }
        for (slot, group) in groups.iter().enumerate() {
            if let Ok((slope, intercept)) = ols_slope(&fit_points[slot]) {
                slopes.push(SlopeFit {
                    kind: kind.name().to_string(),
                    group: *group,
                    slope,
                    paper_axis_slope: 2.0 * slope,
                    intercept,
                    n_points: fit_points[slot].len(),
                });
            }
        }
    }
    Ok(SnrReport { cells, slopes })
}
