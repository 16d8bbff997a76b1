//! Filtering sequential Monte Carlo on the tape.
//!
//! Runs `K` particles forward through a staged model, proposing from the
//! model's forward proposal, weighting by `f * g / q`, and resampling every
//! step. The marginal-likelihood estimate accumulates
//! `log Z_t = lse(log w_t) - log K` per step. Everything that the objective
//! can differentiate through is built as tape nodes; ancestor indices are
//! host-side integers, so gradients never flow through the discrete choice
//! itself (score terms for that are recorded separately).
//!
//! Resampling modes:
//! - `Categorical`: multinomial ancestors; the log probability of the drawn
//!   indices under the normalized weights is recorded for score-function
//!   correction terms.
//! - `Concrete`: tempered softmax relaxation. A hard index (argmax coupling)
//!   decides which particle the proposal conditions on, while the transition
//!   numerator in the next weight is evaluated from the relaxed mixture
//!   state. The relaxation's log density is recorded.
//! - `None`: no resampling; weights accumulate across steps.

use crate::diffmath::{Tape, Var};
use crate::distributions::{concrete_log_pdf, concrete_rsample, LOG_WEIGHT_FLOOR};
use crate::error::{Error, Result};
use crate::model::StagedModel;
use crate::rng::DrawSource;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ResampleMode {
    Categorical,
    Concrete { lambda: f64 },
    None,
}

#[derive(Clone, Debug)]
pub struct SmcConfig {
    pub n_particles: usize,
    pub resample: ResampleMode,
}

impl SmcConfig {
    pub fn new(n_particles: usize) -> Self {
        Self {
            n_particles,
            resample: ResampleMode::Categorical,
        }
    }
}

/// Everything the forward pass produced, as tape nodes plus host-side
/// bookkeeping. Step `t` is index `t - 1` in the vectors.
pub struct SmcOutput {
    /// Scalar estimate of the log marginal likelihood.
    pub log_z_hat: Var,
    /// Per-step contributions; they sum to `log_z_hat`.
    pub log_z_steps: Vec<Var>,
    /// Post-proposal particle states, `(d_z, K)` per step.
    pub particles: Vec<Var>,
    /// Unnormalized log weights `(K, 1)` per step (accumulated when not
    /// resampling).
    pub log_weights: Vec<Var>,
    /// Normalized log weights `(K, 1)` per step.
    pub log_wbar: Vec<Var>,
    /// Proposal log densities `(K, 1)` per step.
    pub log_proposal: Vec<Var>,
    /// Ancestor indices drawn before each step `t >= 2`; empty without
    /// resampling.
    pub ancestors: Vec<Vec<usize>>,
    /// Effective sample size per step, in `[1, K]`.
    pub ess: Vec<f64>,
    /// `sum_t sum_k log wbar_{t-1}[a_t^k]` (categorical mode).
    pub ancestor_log_prob: Option<Var>,
    /// Sum of relaxation log densities (concrete mode).
    pub relaxation_log_prob: Option<Var>,
    /// Relaxed ancestor states `(d_z, K)` per resampling step (concrete
    /// mode only; empty otherwise). These feed the transition numerator.
    pub relaxed_prev: Vec<Var>,
}

/// Effective sample size `1 / sum_k wbar_k^2` from normalized log weights.
pub fn ess_from_log_wbar(log_wbar: &[f64]) -> f64 {
    let s: f64 = log_wbar.iter().map(|lw| (2.0 * lw).exp()).sum();
    1.0 / s
}

/// Resampling probabilities from normalized log weights, floored so that
/// degenerate weights cannot produce an all-zero vector.
pub fn resampling_probs(log_wbar: &[f64]) -> Vec<f64> {
    let mut probs: Vec<f64> = log_wbar
        .iter()
        .map(|lw| lw.max(LOG_WEIGHT_FLOOR).exp())
        .collect();
    let s: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= s;
    }
    probs
}

/// Run the filter over observations staged as `x` `(d_x, T)`.
pub fn smc_filter(
    tape: &mut Tape,
    staged: &StagedModel,
    x: Var,
    cfg: &SmcConfig,
    source: &mut dyn DrawSource,
) -> Result<SmcOutput> {
    let k = cfg.n_particles;
    let t_len = x.cols();
    if k == 0 {
        return Err(Error::InvalidArgument {
            what: "smc_filter",
            why: "need at least one particle".into(),
        });
    }
    if t_len < 2 {
        return Err(Error::InvalidArgument {
            what: "smc_filter",
            why: format!("need at least two steps, got {t_len}"),
        });
    }
    if let ResampleMode::Concrete { lambda } = cfg.resample {
        if !(lambda > 0.0) {
            return Err(Error::InvalidArgument {
                what: "smc_filter",
                why: format!("temperature must be positive, got {lambda}"),
            });
        }
    }

    let ln_k = (k as f64).ln();
    let mut particles = Vec::with_capacity(t_len);
    let mut log_weights = Vec::with_capacity(t_len);
    let mut log_wbar_all = Vec::with_capacity(t_len);
    let mut log_proposal = Vec::with_capacity(t_len);
    let mut log_z_steps = Vec::with_capacity(t_len);
    let mut ancestors = Vec::new();
    let mut ess = Vec::with_capacity(t_len);
    let mut ancestor_terms: Vec<Var> = Vec::new();
    let mut relaxation_terms: Vec<Var> = Vec::new();
    let mut relaxed_prev: Vec<Var> = Vec::new();

    let mut prev_acc: Option<Var> = None; // accumulated weights (None mode)
    let mut prev_lse: Option<Var> = None; // lse of accumulated weights

    for t in 0..t_len {
        let x_t = tape.col(x, t)?;

        // Proposal conditioning states for this step.
        let (proposal, f_src) = if t == 0 {
            (staged.forward_proposal_initial(tape, x_t)?, None)
        } else {
            let z_prev_all = particles[t - 1];
            let lw_prev: Var = log_wbar_all[t - 1];
            match cfg.resample {
                ResampleMode::Categorical => {
                    let probs = resampling_probs(tape.value(lw_prev).to_vec().as_slice());
                    let mut idx = Vec::with_capacity(k);
                    for _ in 0..k {
                        idx.push(source.categorical(&probs)?);
                    }
                    let z_prev = tape.gather_cols(z_prev_all, &idx)?;
                    let mut terms = Vec::with_capacity(k);
                    for &a in &idx {
                        terms.push(tape.index(lw_prev, a)?);
                    }
                    let stacked = tape.stack_scalars(&terms)?;
                    ancestor_terms.push(tape.sum(stacked));
                    ancestors.push(idx);
                    (staged.forward_proposal(tape, z_prev, x_t)?, Some(z_prev))
                }
                ResampleMode::Concrete { lambda } => {
                    let mut idx = Vec::with_capacity(k);
                    let mut relaxed_cols = Vec::with_capacity(k);
                    for _ in 0..k {
                        let cs = concrete_rsample(tape, lw_prev, lambda, source)?;
                        idx.push(cs.hard);
                        relaxed_cols.push(cs.relaxed);
                        relaxation_terms.push(concrete_log_pdf(
                            tape,
                            lw_prev,
                            cs.log_relaxed,
                            lambda,
                        )?);
                    }
                    let relax_mat = tape.hstack(&relaxed_cols)?; // (K, K)
                    let z_relaxed = tape.matmul(z_prev_all, relax_mat)?;
                    let z_hard = tape.gather_cols(z_prev_all, &idx)?;
                    relaxed_prev.push(z_relaxed);
                    ancestors.push(idx);
                    (
                        staged.forward_proposal(tape, z_hard, x_t)?,
                        Some(z_relaxed),
                    )
                }
                ResampleMode::None => (
                    staged.forward_proposal(tape, z_prev_all, x_t)?,
                    Some(z_prev_all),
                ),
            }
        };

        let z = proposal.rsample(tape, source, k)?;
        let log_q = proposal.log_pdf(tape, z)?;
        let log_f = match f_src {
            None => staged.initial_log_pdf(tape, z)?,
            Some(src) => staged.transition_log_pdf(tape, z, src)?,
        };
        let log_g = staged.emission_log_pdf(tape, x_t, z)?;
        let fg = tape.add(log_f, log_g)?;
        let incr = tape.sub(fg, log_q)?;

        match cfg.resample {
            ResampleMode::None => {
                let acc = match prev_acc {
                    None => incr,
                    Some(prev) => tape.add(prev, incr)?,
                };
                let lse = tape.logsumexp(acc)?;
                let s_t = tape.scalar_add(lse, -ln_k);
                let step = match prev_lse {
                    None => s_t,
                    Some(prev) => {
                        let prev_s = tape.scalar_add(prev, -ln_k);
                        tape.sub(s_t, prev_s)?
                    }
                };
                let neg = tape.neg(lse);
                let lwbar = tape.add_scalar_node(acc, neg)?;
                prev_acc = Some(acc);
                prev_lse = Some(lse);
                log_weights.push(acc);
                log_wbar_all.push(lwbar);
                log_z_steps.push(step);
            }
            _ => {
                let lse = tape.logsumexp(incr)?;
                let step = tape.scalar_add(lse, -ln_k);
                let neg = tape.neg(lse);
                let lwbar = tape.add_scalar_node(incr, neg)?;
                log_weights.push(incr);
                log_wbar_all.push(lwbar);
                log_z_steps.push(step);
            }
        }

        ess.push(ess_from_log_wbar(tape.value(*log_wbar_all.last().unwrap())));
        particles.push(z);
        log_proposal.push(log_q);
    }

    let log_z_hat = match cfg.resample {
        ResampleMode::None => {
            let lse = prev_lse.expect("at least one step");
            tape.scalar_add(lse, -ln_k)
        }
        _ => {
            let stacked = tape.stack_scalars(&log_z_steps)?;
            tape.sum(stacked)
        }
    };

    let ancestor_log_prob = if matches!(cfg.resample, ResampleMode::Categorical) {
        let stacked = tape.stack_scalars(&ancestor_terms)?;
        Some(tape.sum(stacked))
    } else {
        None
    };
    let relaxation_log_prob = if matches!(cfg.resample, ResampleMode::Concrete { .. }) {
        let stacked = tape.stack_scalars(&relaxation_terms)?;
        Some(tape.sum(stacked))
    } else {
        None
    };

    Ok(SmcOutput {
        log_z_hat,
        log_z_steps,
        particles,
        log_weights,
        log_wbar: log_wbar_all,
        log_proposal,
        ancestors,
        ess,
        ancestor_log_prob,
        relaxation_log_prob,
        relaxed_prev,
    })
}
