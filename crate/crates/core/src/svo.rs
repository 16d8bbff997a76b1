//! Backward simulation with continuous subparticles and the smoothing
//! objective built on it.
//!
//! After a forward filtering pass, each of the `K` smoothed trajectories is
//! grown tail-first. At the final step, `M` subparticles per trajectory are
//! drawn from the data factor `e(z; W c_T + b, E)`; at earlier steps they are
//! drawn from the backward proposal (the normalized product `r * e`). Each
//! subparticle gets a subweight:
//!
//! - final step: `[sum_j wbar_{T-1}^j f(z | z_{T-1}^j)] g(x_T | z) / q(z)`
//! - middle steps: the same filter-mixture bracket times
//!   `f(z_next | z) g(x_t | z) / q(z | z_next, x)`
//! - first step: the bracket is replaced by the initial density, since there
//!   is no step-zero particle cloud for the mixture to average over.
//!
//! One subparticle is selected per trajectory by its normalized subweight,
//! and the step's proposal factor is `Omega_t^k = M * subweight * q`, both at
//! the selected point. The objective is
//! `log(1/K sum_k p(ztilde^k, x) / prod_t Omega_t^k)`, an importance-weighted
//! bound whose exponentiated summand is an unbiased estimate of the marginal
//! likelihood.
//!
//! Everything continuous is differentiable through reparameterized sampling;
//! the discrete subparticle selections are host-side indices (stop-gradient),
//! mirroring how forward resampling is treated.

use std::cell::RefCell;

use crate::diffmath::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::model::StagedModel;
use crate::rng::DrawSource;
use crate::smc::{resampling_probs, smc_filter, SmcConfig, SmcOutput};

/// Logsumexp over contiguous groups of `group_size` rows of a column vector.
/// Input `(groups * group_size, 1)`, output `(groups, 1)`.
#[derive(Debug)]
struct GroupedLse {
    groups: usize,
    group_size: usize,
    // Cached results from forward, reused by the softmax in backward.
    lse: RefCell<Vec<f64>>,
}

impl CustomOp for GroupedLse {
    fn name(&self) -> &'static str {
        "grouped_lse"
    }

    fn out_shape(&self, inputs: &[(usize, usize)]) -> Result<(usize, usize)> {
        let (r, c) = inputs[0];
        if c != 1 || r != self.groups * self.group_size {
            return Err(Error::BadShape {
                op: "grouped_lse",
                expected: "a (groups * group_size, 1) column",
                got: (r, c),
            });
        }
        Ok((self.groups, 1))
    }

    fn forward(&self, inputs: &[&[f64]], out: &mut [f64]) -> Result<()> {
        let a = inputs[0];
        let m = self.group_size;
        for g in 0..self.groups {
            let slice = &a[g * m..(g + 1) * m];
            let mut hi = f64::NEG_INFINITY;
            for &v in slice {
                if v.is_nan() {
                    return Err(Error::Numerical {
                        what: "grouped_lse",
                        why: format!("NaN subweight in group {g}"),
                    });
                }
                hi = hi.max(v);
            }
            if hi == f64::NEG_INFINITY {
                return Err(Error::Numerical {
                    what: "grouped_lse",
                    why: format!("all entries of group {g} are -inf"),
                });
            }
            let s: f64 = slice.iter().map(|v| (v - hi).exp()).sum();
            out[g] = hi + s.ln();
        }
        *self.lse.borrow_mut() = out.to_vec();
        Ok(())
    }

    fn backward_input(
        &self,
        _which: usize,
        inputs: &[&[f64]],
        _primal: &[f64],
        grad_out: &[f64],
        grad_in: &mut [f64],
    ) {
        let a = inputs[0];
        let lse = self.lse.borrow();
        let m = self.group_size;
        for g in 0..self.groups {
            let go = grad_out[g];
            if go == 0.0 {
                continue;
            }
            for i in g * m..(g + 1) * m {
                grad_in[i] += go * (a[i] - lse[g]).exp();
            }
        }
    }
}

/// Gather rows of a column vector: `out[i] = a[idx[i]]`.
#[derive(Debug)]
struct SelectRows {
    idx: Box<[usize]>,
    in_rows: usize,
}

impl CustomOp for SelectRows {
    fn name(&self) -> &'static str {
        "select_rows"
    }

    fn out_shape(&self, inputs: &[(usize, usize)]) -> Result<(usize, usize)> {
        let (r, c) = inputs[0];
        if c != 1 || r != self.in_rows {
            return Err(Error::BadShape {
                op: "select_rows",
                expected: "the column vector the indices were built for",
                got: (r, c),
            });
        }
        Ok((self.idx.len(), 1))
    }

    fn forward(&self, inputs: &[&[f64]], out: &mut [f64]) -> Result<()> {
        for (o, &i) in out.iter_mut().zip(self.idx.iter()) {
            *o = inputs[0][i];
        }
        Ok(())
    }

    fn backward_input(
        &self,
        _which: usize,
        _inputs: &[&[f64]],
        _primal: &[f64],
        grad_out: &[f64],
        grad_in: &mut [f64],
    ) {
        for (g, &i) in grad_out.iter().zip(self.idx.iter()) {
            grad_in[i] += g;
        }
    }
}

fn grouped_lse(tape: &mut Tape, a: Var, groups: usize, group_size: usize) -> Result<Var> {
    tape.custom(
        Box::new(GroupedLse {
            groups,
            group_size,
            lse: RefCell::new(Vec::new()),
        }),
        &[a],
    )
}

fn select_rows(tape: &mut Tape, a: Var, idx: &[usize]) -> Result<Var> {
    tape.custom(
        Box::new(SelectRows {
            idx: idx.to_vec().into_boxed_slice(),
            in_rows: a.rows() as usize,
        }),
        &[a],
    )
}

/// Result of one backward sweep: the smoothed trajectories and the proposal
/// factors the objective needs.
pub struct BackwardSweep {
    /// Subparticle count per trajectory per step.
    pub m: usize,
    /// Selected smoothed states, `(d_z, K)` per step, index 0 = first step.
    pub states: Vec<Var>,
    /// Selected subparticle index per (step, trajectory), in `0..M`.
    pub selected: Vec<Vec<usize>>,
    /// Normalized subweights per step, trajectory-major (`k * M + m`).
    pub subweights: Vec<Vec<f64>>,
    /// Log proposal factors `log Omega_t^k`, `(K, 1)` per step.
    pub log_omega: Vec<Var>,
    /// Per-trajectory total `sum_t log Omega_t^k`, `(K, 1)`.
    pub log_traj_proposal: Var,
    /// Exact number of transition-density evaluations performed.
    pub transition_evals: usize,
}

impl BackwardSweep {
    /// Mean effective sample size of the normalized subweights, per step.
    pub fn mean_subweight_ess(&self) -> Vec<f64> {
        let m = self.m;
        self.subweights
            .iter()
            .map(|sw| {
                let k = sw.len() / m;
                let mut acc = 0.0;
                for g in 0..k {
                    let s: f64 = sw[g * m..(g + 1) * m].iter().map(|w| w * w).sum();
                    acc += 1.0 / s;
                }
                acc / k as f64
            })
            .collect()
    }
}

/// The smoothing objective: `log_z_svo = logsumexp_k(log_ratio) - log K`.
pub struct SvoObjective {
    pub log_z_svo: Var,
    /// `(K, 1)` per-trajectory `log p(ztilde^k, x) - sum_t log Omega_t^k`.
    pub log_ratio: Var,
}

/// Indices that repeat each of `k` trajectory slots `m` times.
fn repeat_idx(k: usize, m: usize) -> Vec<usize> {
    (0..k).flat_map(|j| std::iter::repeat(j).take(m)).collect()
}

/// Validate subweights host-side so failures carry their location.
fn check_subweights(tape: &Tape, lw: Var, step: usize, m: usize) -> Result<()> {
    let vals = tape.value(lw);
    for (g, chunk) in vals.chunks(m).enumerate() {
        if chunk.iter().all(|v| *v == f64::NEG_INFINITY) || chunk.iter().any(|v| v.is_nan()) {
            return Err(Error::Numerical {
                what: "backward_simulate",
                why: format!(
                    "degenerate subweights at step {step}, trajectory {g}: log values {chunk:?}"
                ),
            });
        }
    }
    Ok(())
}

/// Exact transition-density evaluation count for a sweep with the given
/// shapes: the mixture bracket runs at every step but the first
/// (`(T-1) * KM * K`), the chain factor at every step but the last
/// (`(T-1) * KM`).
pub fn expected_transition_evals(t_len: usize, k: usize, m: usize) -> usize {
    (t_len - 1) * k * m * (k + 1)
}

/// Run the backward sweep over a completed forward filter.
///
/// `x` is the same `(d_x, T)` observation node the filter consumed, staged on
/// the same tape with the same parameters, so gradients reach every group
/// through both passes.
pub fn backward_simulate(
    tape: &mut Tape,
    staged: &StagedModel,
    filter: &SmcOutput,
    x: Var,
    m: usize,
    source: &mut dyn DrawSource,
) -> Result<BackwardSweep> {
    let t_len = filter.particles.len();
    let k = filter.particles[0].cols();
    if m == 0 {
        return Err(Error::InvalidArgument {
            what: "backward_simulate",
            why: "need at least one subparticle".into(),
        });
    }
    let km = k * m;
    let ln_m = (m as f64).ln();
    let rep = repeat_idx(k, m);

    let contexts = staged.contexts(tape, x)?;
    let mut states_rev: Vec<Var> = Vec::with_capacity(t_len);
    let mut selected_rev: Vec<Vec<usize>> = Vec::with_capacity(t_len);
    let mut subweights_rev: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    let mut log_omega_rev: Vec<Var> = Vec::with_capacity(t_len);
    let mut transition_evals = 0usize;

    // Tail states z_{t+1}^k of the trajectories built so far.
    let mut tail: Option<Var> = None;

    for t in (0..t_len).rev() {
        let x_t = tape.col(x, t)?;

        // Propose M subparticles per trajectory.
        let (ztilde, log_q) = match tail {
            None => {
                // Final step: the data factor alone, one shared distribution.
                let e = staged.backward_data_factor(tape, contexts[t])?;
                let z = e.rsample(tape, source, km)?;
                let lq = e.log_pdf(tape, z)?;
                (z, lq)
            }
            Some(tail_k) => {
                let prop = staged.backward_proposal(tape, tail_k, contexts[t])?;
                let prop = prop.expand(tape, m)?;
                let z = prop.rsample(tape, source, km)?;
                let lq = prop.log_pdf(tape, z)?;
                (z, lq)
            }
        };

        // Bracket: filter mixture at interior steps, initial density at the
        // first step.
        let bracket = if t == 0 {
            staged.initial_log_pdf(tape, ztilde)?
        } else {
            transition_evals += km * k;
            staged.transition_mixture_log_pdf(
                tape,
                ztilde,
                filter.particles[t - 1],
                filter.log_wbar[t - 1],
            )?
        };

        let log_g = staged.emission_log_pdf(tape, x_t, ztilde)?;
        let mut num = tape.add(bracket, log_g)?;
        if let Some(tail_k) = tail {
            // Chain factor toward the already-built future state.
            transition_evals += km;
            let tail_exp = tape.gather_cols(tail_k, &rep)?;
            let chain = staged.transition_log_pdf(tape, tail_exp, ztilde)?;
            num = tape.add(num, chain)?;
        }
        let log_w = tape.sub(num, log_q)?; // (KM, 1) unnormalized subweights
        check_subweights(tape, log_w, t + 1, m)?;

        let lse = grouped_lse(tape, log_w, k, m)?; // (K, 1)

        // Normalized subweights (host) and index selection.
        let lw_vals = tape.value(log_w).to_vec();
        let lse_vals = tape.value(lse).to_vec();
        let mut sw = vec![0.0; km];
        let mut sel = Vec::with_capacity(k);
        let mut sel_flat = Vec::with_capacity(k);
        for g in 0..k {
            let norm: Vec<f64> = (0..m).map(|i| lw_vals[g * m + i] - lse_vals[g]).collect();
            for (i, p) in norm.iter().enumerate() {
                sw[g * m + i] = p.exp();
            }
            let probs = resampling_probs(&norm);
            let b = source.categorical(&probs)?;
            sel.push(b);
            sel_flat.push(g * m + b);
        }

        // Omega_t^k = M * (normalized subweight at selection) * (q at
        // selection).
        let lw_sel = select_rows(tape, log_w, &sel_flat)?;
        let lq_sel = select_rows(tape, log_q, &sel_flat)?;
        let centered = tape.sub(lw_sel, lse)?;
        let with_q = tape.add(centered, lq_sel)?;
        let log_omega = tape.scalar_add(with_q, ln_m);

        let z_sel = tape.gather_cols(ztilde, &sel_flat)?;
        tail = Some(z_sel);
        states_rev.push(z_sel);
        selected_rev.push(sel);
        subweights_rev.push(sw);
        log_omega_rev.push(log_omega);
    }

    states_rev.reverse();
    selected_rev.reverse();
    subweights_rev.reverse();
    log_omega_rev.reverse();

    let mut total = log_omega_rev[0];
    for lo in &log_omega_rev[1..] {
        total = tape.add(total, *lo)?;
    }

    Ok(BackwardSweep {
        m,
        states: states_rev,
        selected: selected_rev,
        subweights: subweights_rev,
        log_omega: log_omega_rev,
        log_traj_proposal: total,
        transition_evals,
    })
}

/// Assemble the objective from a completed sweep.
pub fn svo_objective(
    tape: &mut Tape,
    staged: &StagedModel,
    sweep: &BackwardSweep,
    x: Var,
) -> Result<SvoObjective> {
    let t_len = sweep.states.len();
    let k = sweep.states[0].cols();

    // Joint density of each smoothed trajectory, batched over trajectories.
    let mut joint = staged.initial_log_pdf(tape, sweep.states[0])?;
    for t in 0..t_len {
        let x_t = tape.col(x, t)?;
        let lg = staged.emission_log_pdf(tape, x_t, sweep.states[t])?;
        joint = tape.add(joint, lg)?;
        if t > 0 {
            let lf = staged.transition_log_pdf(tape, sweep.states[t], sweep.states[t - 1])?;
            joint = tape.add(joint, lf)?;
        }
    }

    let log_ratio = tape.sub(joint, sweep.log_traj_proposal)?;
    let lse = tape.logsumexp(log_ratio)?;
    let log_z_svo = tape.scalar_add(lse, -(k as f64).ln());
    Ok(SvoObjective {
        log_z_svo,
        log_ratio,
    })
}

/// Filter, sweep, and objective in one call on one tape and draw source.
pub fn svo_estimate(
    tape: &mut Tape,
    staged: &StagedModel,
    x: Var,
    smc_cfg: &SmcConfig,
    m: usize,
    source: &mut dyn DrawSource,
) -> Result<(SvoObjective, BackwardSweep, SmcOutput)> {
    let filter = smc_filter(tape, staged, x, smc_cfg, source)?;
    let sweep = backward_simulate(tape, staged, &filter, x, m, source)?;
    let obj = svo_objective(tape, staged, &sweep, x)?;
    Ok((obj, sweep, filter))
}
