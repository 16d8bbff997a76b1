//! Nonlinear Gaussian state-space model with learned proposals.
//!
//! Generative model: `z_1 ~ N(mu_0, S_0)`, `z_t ~ N(psi(z_{t-1}), Q)`,
//! `x_t ~ N(upsilon(z_t), G)`, with `psi` and `upsilon` MLPs and all
//! covariances diagonal unless the locally-linear mode replaces `Q` with a
//! state-dependent `Q(z)`.
//!
//! The forward proposal at step `t` is the normalized product of the
//! transition density from each particle and a data factor
//! `h(z; gamma(x_t), L)`; at `t = 1` the transition factor is the initial
//! density. The backward proposal used in smoothing is the normalized product
//! of `r(z_t; zeta(z_{t+1}), R)` and a data factor `e(z_t; W c_t + b, E)`
//! conditioned on a reverse-time context `c_t` that summarizes `x_{t:T}`.
//!
//! Parameter groups: emission parameters are `theta`, proposal-only
//! parameters (`gamma`, `zeta`, context, data factors) are `phi`, and the
//! transition family plus the initial density are `varphi`. With
//! `share_transition` (the default) the proposal reuses the generative
//! transition; otherwise a separate proposal transition is registered under
//! `phi` and the generative one stays `varphi`.

use serde::{Deserialize, Serialize};

use crate::diffmath::{ParamGroup, ParameterStore, SlotId, StagedParams, Tape, Var};
use crate::distributions::{
    diag_product, mixture_diag_log_pdf, spd_inverse, DiagGaussian, FullGaussian,
};
use crate::error::{Error, Result};
use crate::networks::{ContextEncoder, ContextSpec, LocallyLinearCov, Mlp, MlpSpec};
use crate::rng::{derive_rng, stream};

fn default_hidden() -> Vec<usize> {
    vec![32, 32]
}

fn default_context_dim() -> usize {
    16
}

fn default_context_hidden() -> usize {
    32
}

fn default_true() -> bool {
    true
}

fn default_init_log_std() -> f64 {
    -0.5
}

/// Transition covariance structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CovarianceMode {
    Diagonal,
    LocallyLinear { alpha: f64, hidden: Vec<usize> },
}

impl Default for CovarianceMode {
    fn default() -> Self {
        CovarianceMode::Diagonal
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_z: usize,
    pub d_x: usize,
    #[serde(default = "default_hidden")]
    pub transition_hidden: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub emission_hidden: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub encoder_hidden: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub backward_hidden: Vec<usize>,
    #[serde(default = "default_context_dim")]
    pub context_dim: usize,
    #[serde(default = "default_context_hidden")]
    pub context_hidden: usize,
    #[serde(default = "default_true")]
    pub share_transition: bool,
    #[serde(default)]
    pub covariance: CovarianceMode,
    #[serde(default = "default_init_log_std")]
    pub init_log_std: f64,
}

impl ModelConfig {
    pub fn defaults(d_z: usize, d_x: usize) -> Self {
        Self {
            d_z,
            d_x,
            transition_hidden: default_hidden(),
            emission_hidden: default_hidden(),
            encoder_hidden: default_hidden(),
            backward_hidden: default_hidden(),
            context_dim: default_context_dim(),
            context_hidden: default_context_hidden(),
            share_transition: default_true(),
            covariance: CovarianceMode::Diagonal,
            init_log_std: default_init_log_std(),
        }
    }
}

/// A latent/observed trajectory pair, column-major with one column per step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory {
    pub d_z: usize,
    pub d_x: usize,
    pub t_len: usize,
    /// Latent states `(d_z, T)`; may be empty for observation-only data.
    pub z: Vec<f64>,
    /// Observations `(d_x, T)`.
    pub x: Vec<f64>,
}

impl Trajectory {
    pub fn new(d_z: usize, d_x: usize, t_len: usize, z: Vec<f64>, x: Vec<f64>) -> Result<Self> {
        if t_len < 2 {
            return Err(Error::InvalidArgument {
                what: "Trajectory",
                why: format!("need at least two steps, got {t_len}"),
            });
        }
        if x.len() != d_x * t_len || (!z.is_empty() && z.len() != d_z * t_len) {
            return Err(Error::InvalidArgument {
                what: "Trajectory",
                why: "buffer lengths do not match declared shape".into(),
            });
        }
        if x.iter().chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument {
                what: "Trajectory",
                why: "contains non-finite values".into(),
            });
        }
        Ok(Self {
            d_z,
            d_x,
            t_len,
            z,
            x,
        })
    }

    pub fn x_col(&self, t: usize) -> &[f64] {
        &self.x[t * self.d_x..(t + 1) * self.d_x]
    }

    pub fn z_col(&self, t: usize) -> &[f64] {
        &self.z[t * self.d_z..(t + 1) * self.d_z]
    }
}

enum TransitionCov {
    Diagonal(SlotId),
    LocallyLinear(LocallyLinearCov),
}

/// The model: parameter slot handles plus architecture. Values live in the
/// [`ParameterStore`] it was registered into.
pub struct SSMModel {
    cfg: ModelConfig,
    initial_mean: SlotId,
    initial_log_std: SlotId,
    transition: Mlp,
    transition_cov: TransitionCov,
    proposal_transition: Option<(Mlp, SlotId)>,
    encoder: Mlp,
    encoder_log_std: SlotId,
    emission: Mlp,
    emission_log_std: SlotId,
    backward_r: Mlp,
    backward_r_log_std: SlotId,
    context: ContextEncoder,
    backward_e_w: SlotId,
    backward_e_b: SlotId,
    backward_e_log_std: SlotId,
}

impl SSMModel {
    /// Register all parameters into `store` with deterministic, seeded init.
    pub fn new(cfg: ModelConfig, store: &mut ParameterStore, seed: u64) -> Result<Self> {
        if cfg.d_z == 0 || cfg.d_x == 0 {
            return Err(Error::InvalidArgument {
                what: "ModelConfig",
                why: "latent and observation dimensions must be positive".into(),
            });
        }
        let (d_z, d_x) = (cfg.d_z, cfg.d_x);
        let mut rng = derive_rng(seed, &[stream::INIT]);

        let initial_mean =
            store.register("initial.mean", ParamGroup::Varphi, d_z, 1, vec![0.0; d_z])?;
        let initial_log_std = store.register(
            "initial.log_std",
            ParamGroup::Varphi,
            d_z,
            1,
            vec![cfg.init_log_std; d_z],
        )?;

        let transition = Mlp::register(
            store,
            "transition",
            ParamGroup::Varphi,
            MlpSpec::new(d_z, &cfg.transition_hidden, d_z),
            &mut rng,
        )?;
        let transition_cov = match &cfg.covariance {
            CovarianceMode::Diagonal => TransitionCov::Diagonal(store.register(
                "transition.log_std",
                ParamGroup::Varphi,
                d_z,
                1,
                vec![cfg.init_log_std; d_z],
            )?),
            CovarianceMode::LocallyLinear { alpha, hidden } => {
                TransitionCov::LocallyLinear(LocallyLinearCov::register(
                    store,
                    "transition.cov",
                    ParamGroup::Varphi,
                    d_z,
                    hidden,
                    *alpha,
                    cfg.init_log_std,
                    &mut rng,
                )?)
            }
        };

        let proposal_transition = if cfg.share_transition {
            None
        } else {
            let net = Mlp::register(
                store,
                "proposal_transition",
                ParamGroup::Phi,
                MlpSpec::new(d_z, &cfg.transition_hidden, d_z),
                &mut rng,
            )?;
            let ls = store.register(
                "proposal_transition.log_std",
                ParamGroup::Phi,
                d_z,
                1,
                vec![cfg.init_log_std; d_z],
            )?;
            Some((net, ls))
        };

        let encoder = Mlp::register(
            store,
            "encoder",
            ParamGroup::Phi,
            MlpSpec::new(d_x, &cfg.encoder_hidden, d_z),
            &mut rng,
        )?;
        let encoder_log_std = store.register(
            "encoder.log_std",
            ParamGroup::Phi,
            d_z,
            1,
            vec![cfg.init_log_std; d_z],
        )?;

        let emission = Mlp::register(
            store,
            "emission",
            ParamGroup::Theta,
            MlpSpec::new(d_z, &cfg.emission_hidden, d_x),
            &mut rng,
        )?;
        let emission_log_std = store.register(
            "emission.log_std",
            ParamGroup::Theta,
            d_x,
            1,
            vec![cfg.init_log_std; d_x],
        )?;

        let backward_r = Mlp::register(
            store,
            "backward_r",
            ParamGroup::Phi,
            MlpSpec::new(d_z, &cfg.backward_hidden, d_z),
            &mut rng,
        )?;
        let backward_r_log_std = store.register(
            "backward_r.log_std",
            ParamGroup::Phi,
            d_z,
            1,
            vec![cfg.init_log_std; d_z],
        )?;

        let context = ContextEncoder::register(
            store,
            "context",
            ParamGroup::Phi,
            ContextSpec {
                d_x,
                d_c: cfg.context_dim,
                hidden: cfg.context_hidden,
            },
            &mut rng,
        )?;
        let backward_e_w = store.register(
            "backward_e.w",
            ParamGroup::Phi,
            d_z,
            cfg.context_dim,
            crate::networks::xavier_init(&mut rng, d_z, cfg.context_dim),
        )?;
        let backward_e_b =
            store.register("backward_e.b", ParamGroup::Phi, d_z, 1, vec![0.0; d_z])?;
        let backward_e_log_std = store.register(
            "backward_e.log_std",
            ParamGroup::Phi,
            d_z,
            1,
            vec![cfg.init_log_std; d_z],
        )?;

        Ok(Self {
            cfg,
            initial_mean,
            initial_log_std,
            transition,
            transition_cov,
            proposal_transition,
            encoder,
            encoder_log_std,
            emission,
            emission_log_std,
            backward_r,
            backward_r_log_std,
            context,
            backward_e_w,
            backward_e_b,
            backward_e_log_std,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn d_z(&self) -> usize {
        self.cfg.d_z
    }

    pub fn d_x(&self) -> usize {
        self.cfg.d_x
    }

    pub fn transition_mlp(&self) -> &Mlp {
        &self.transition
    }

    pub fn emission_mlp(&self) -> &Mlp {
        &self.emission
    }

    pub fn shares_transition(&self) -> bool {
        self.cfg.share_transition
    }

    /// Host-side transition mean `psi(z) = z + net(z)` over `n` columns of
    /// `z` (column-major `d_z * n` values). No tape; used by deterministic
    /// rollouts.
    pub fn transition_mean_host(&self, store: &ParameterStore, z: &[f64], n: usize) -> Vec<f64> {
        let mut out = self.transition.forward_host(store, z, n);
        for (o, zi) in out.iter_mut().zip(z.iter()) {
            *o += *zi;
        }
        out
    }

    /// Host-side emission mean `upsilon(z)` over `n` columns of `z`.
    pub fn emission_mean_host(&self, store: &ParameterStore, z: &[f64], n: usize) -> Vec<f64> {
        self.emission.forward_host(store, z, n)
    }

    /// Stage all parameters on a tape for one evaluation.
    pub fn stage<'m>(&'m self, tape: &mut Tape, store: &ParameterStore) -> StagedModel<'m> {
        StagedModel {
            model: self,
            params: store.stage(tape),
        }
    }
}

/// A proposal distribution over latent columns: diagonal in the common case,
/// or one full-covariance Gaussian per column in locally-linear mode.
pub enum Proposal {
    Diag(DiagGaussian),
    Full(Vec<FullGaussian>),
}

impl Proposal {
    pub fn n_cols(&self) -> usize {
        match self {
            Proposal::Diag(d) => d.mean.cols(),
            Proposal::Full(v) => v.len(),
        }
    }

    /// Repeat each column `m` times (column-major particle-then-subparticle
    /// order), producing a proposal with `n_cols * m` columns.
    pub fn expand(&self, tape: &mut Tape, m: usize) -> Result<Proposal> {
        if m == 1 {
            return Ok(match self {
                Proposal::Diag(d) => Proposal::Diag(*d),
                Proposal::Full(v) => Proposal::Full(v.clone()),
            });
        }
        match self {
            Proposal::Diag(d) => {
                let k = d.mean.cols();
                let mean = if k == 1 {
                    d.mean
                } else {
                    let idx: Vec<usize> = (0..k).flat_map(|j| std::iter::repeat(j).take(m)).collect();
                    tape.gather_cols(d.mean, &idx)?
                };
                Ok(Proposal::Diag(DiagGaussian::new(mean, d.log_std)?))
            }
            Proposal::Full(v) => {
                let mut out = Vec::with_capacity(v.len() * m);
                for g in v {
                    for _ in 0..m {
                        out.push(*g);
                    }
                }
                Ok(Proposal::Full(out))
            }
        }
    }

    /// One reparameterized sample per column; `n` is the total column count
    /// (must equal the proposal's width unless that width is 1).
    pub fn rsample(
        &self,
        tape: &mut Tape,
        source: &mut dyn crate::rng::DrawSource,
        n: usize,
    ) -> Result<Var> {
        match self {
            Proposal::Diag(d) => {
                if d.mean.cols() != 1 && d.mean.cols() != n {
                    return Err(Error::InvalidArgument {
                        what: "Proposal::rsample",
                        why: format!("{n} samples from {} proposal columns", d.mean.cols()),
                    });
                }
                d.rsample(tape, source, n)
            }
            Proposal::Full(v) => {
                if v.len() != n {
                    return Err(Error::InvalidArgument {
                        what: "Proposal::rsample",
                        why: format!("{n} samples from {} proposal columns", v.len()),
                    });
                }
                let cols: Vec<Var> = v
                    .iter()
                    .map(|g| g.rsample(tape, source))
                    .collect::<Result<_>>()?;
                tape.hstack(&cols)
            }
        }
    }

    /// Column-wise log density of `z` `(d, n)`.
    pub fn log_pdf(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        match self {
            Proposal::Diag(d) => d.log_pdf(tape, z),
            Proposal::Full(v) => {
                if v.len() != z.cols() {
                    return Err(Error::ShapeMismatch {
                        op: "Proposal::log_pdf",
                        lhs: (z.rows(), z.cols()),
                        rhs: (v.len(), 1),
                    });
                }
                let mut vals = Vec::with_capacity(v.len());
                for (c, g) in v.iter().enumerate() {
                    let zc = tape.col(z, c)?;
                    vals.push(g.log_pdf(tape, zc)?);
                }
                tape.stack_scalars(&vals)
            }
        }
    }
}

/// Model staged onto one tape: all density and proposal evaluations happen
/// through this view.
pub struct StagedModel<'m> {
    model: &'m SSMModel,
    params: StagedParams,
}

impl<'m> StagedModel<'m> {
    pub fn params(&self) -> &StagedParams {
        &self.params
    }

    pub fn d_z(&self) -> usize {
        self.model.cfg.d_z
    }

    pub fn d_x(&self) -> usize {
        self.model.cfg.d_x
    }

    pub fn initial_dist(&self) -> DiagGaussian {
        DiagGaussian {
            mean: self.params.var(self.model.initial_mean),
            log_std: self.params.var(self.model.initial_log_std),
        }
    }

    /// Generative transition mean `psi` applied column-wise. The network is
    /// residual, `psi(z) = z + net(z)`, so a zeroed net freezes the dynamics
    /// at the identity map.
    pub fn transition_mean(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let delta = self.model.transition.forward(tape, &self.params, z)?;
        tape.add(z, delta)
    }

    /// Initial density of columns of `z`, `(n, 1)`.
    pub fn initial_log_pdf(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.initial_dist().log_pdf(tape, z)
    }

    /// Transition log density `log f(z_next | z_prev)` column-wise; one of
    /// the two may have a single column to broadcast.
    pub fn transition_log_pdf(&self, tape: &mut Tape, z_next: Var, z_prev: Var) -> Result<Var> {
        let means = self.transition_mean(tape, z_prev)?;
        match &self.model.transition_cov {
            TransitionCov::Diagonal(ls) => {
                DiagGaussian::new(means, self.params.var(*ls))?.log_pdf(tape, z_next)
            }
            TransitionCov::LocallyLinear(cov) => {
                let n = z_next.cols().max(means.cols());
                let mut vals = Vec::with_capacity(n);
                for c in 0..n {
                    let zp = tape.col(z_prev, c.min(z_prev.cols() - 1))?;
                    let mc = tape.col(means, c.min(means.cols() - 1))?;
                    let q = cov.cov_at(tape, &self.params, zp)?;
                    let zn = tape.col(z_next, c.min(z_next.cols() - 1))?;
                    let fg = FullGaussian::new(mc, q)?;
                    vals.push(fg.log_pdf(tape, zn)?);
                }
                tape.stack_scalars(&vals)
            }
        }
    }

    /// `log Σ_j wbar_j f(z | prev_j)` evaluated column-wise over `z` `(d, n)`,
    /// with `prev` `(d, K)` and `log_wbar` `(K, 1)`.
    pub fn transition_mixture_log_pdf(
        &self,
        tape: &mut Tape,
        z: Var,
        prev: Var,
        log_wbar: Var,
    ) -> Result<Var> {
        let comps = self.transition_mean(tape, prev)?;
        match &self.model.transition_cov {
            TransitionCov::Diagonal(ls) => {
                mixture_diag_log_pdf(tape, z, comps, log_wbar, self.params.var(*ls))
            }
            TransitionCov::LocallyLinear(cov) => {
                let k = prev.cols();
                let n = z.cols();
                // Component densities need per-component covariances; build
                // (K) FullGaussians once, then per column a stacked lse.
                let mut comps_full = Vec::with_capacity(k);
                for j in 0..k {
                    let zj = tape.col(prev, j)?;
                    let mj = tape.col(comps, j)?;
                    let q = cov.cov_at(tape, &self.params, zj)?;
                    comps_full.push(FullGaussian::new(mj, q)?);
                }
                let mut out = Vec::with_capacity(n);
                for c in 0..n {
                    let zc = tape.col(z, c)?;
                    let mut terms = Vec::with_capacity(k);
                    for (j, fg) in comps_full.iter().enumerate() {
                        let lp = fg.log_pdf(tape, zc)?;
                        let lw = tape.index(log_wbar, j)?;
                        terms.push(tape.add(lp, lw)?);
                    }
                    let stacked = tape.stack_scalars(&terms)?;
                    out.push(tape.logsumexp(stacked)?);
                }
                tape.stack_scalars(&out)
            }
        }
    }

    /// Emission log density `log g(x | z)` column-wise over `z` `(d_z, n)`;
    /// `x` is a single observation column or a matched batch.
    pub fn emission_log_pdf(&self, tape: &mut Tape, x: Var, z: Var) -> Result<Var> {
        let means = self.model.emission.forward(tape, &self.params, z)?;
        DiagGaussian::new(means, self.params.var(self.model.emission_log_std))?
            .log_pdf(tape, x)
    }

    /// Emission mean `upsilon(z)` column-wise.
    pub fn emission_mean(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.model.emission.forward(tape, &self.params, z)
    }

    /// Data factor `h(z; gamma(x_t), L)` for the forward proposal.
    pub fn encoder_gaussian(&self, tape: &mut Tape, x_t: Var) -> Result<DiagGaussian> {
        let mean = self.model.encoder.forward(tape, &self.params, x_t)?;
        DiagGaussian::new(mean, self.params.var(self.model.encoder_log_std))
    }

    /// The transition factor the proposal uses: the generative transition
    /// when shared, the separately learned one otherwise.
    fn proposal_transition_parts(&self, tape: &mut Tape, z_prev: Var) -> Result<(Var, Var)> {
        match (&self.model.proposal_transition, &self.model.transition_cov) {
            (Some((net, ls)), _) => {
                let delta = net.forward(tape, &self.params, z_prev)?;
                let mean = tape.add(z_prev, delta)?;
                Ok((mean, self.params.var(*ls)))
            }
            (None, TransitionCov::Diagonal(ls)) => {
                let mean = self.transition_mean(tape, z_prev)?;
                Ok((mean, self.params.var(*ls)))
            }
            (None, TransitionCov::LocallyLinear(_)) => unreachable!("handled by caller"),
        }
    }

    /// Forward proposal at `t = 1`: normalized product of the initial density
    /// and the data factor. One column.
    pub fn forward_proposal_initial(&self, tape: &mut Tape, x_t: Var) -> Result<Proposal> {
        let h = self.encoder_gaussian(tape, x_t)?;
        let prod = diag_product(tape, self.initial_dist(), h)?;
        Ok(Proposal::Diag(prod))
    }

    /// Forward proposal at `t > 1` for all particles at once: normalized
    /// product of the (proposal) transition from `z_prev` `(d, K)` and the
    /// shared data factor. `K` columns.
    pub fn forward_proposal(&self, tape: &mut Tape, z_prev: Var, x_t: Var) -> Result<Proposal> {
        let h = self.encoder_gaussian(tape, x_t)?;
        match (&self.model.proposal_transition, &self.model.transition_cov) {
            (None, TransitionCov::LocallyLinear(cov)) => {
                // Full-covariance product per particle:
                // P = Q(z)^-1 + L^-1, S = P^-1, m = S (Q^-1 psi + L^-1 gamma).
                let means = self.transition_mean(tape, z_prev)?;
                let neg2 = tape.scalar_mul(self.params.var(self.model.encoder_log_std), -2.0);
                let h_prec_vec = tape.exp(neg2);
                let h_prec_term = tape.mul(h_prec_vec, h.mean)?;
                let h_prec_mat = tape.diag_from_vec(h_prec_vec)?;
                let mut out = Vec::with_capacity(z_prev.cols());
                for k in 0..z_prev.cols() {
                    let zk = tape.col(z_prev, k)?;
                    let q = cov.cov_at(tape, &self.params, zk)?;
                    let q_inv = spd_inverse(tape, q)?;
                    let p = tape.add(q_inv, h_prec_mat)?;
                    let s = spd_inverse(tape, p)?;
                    let mk = tape.col(means, k)?;
                    let f_term = tape.matvec(q_inv, mk)?;
                    let total = tape.add(f_term, h_prec_term)?;
                    let mean = tape.matvec(s, total)?;
                    out.push(FullGaussian::new(mean, s)?);
                }
                Ok(Proposal::Full(out))
            }
            _ => {
                let (means, log_std) = self.proposal_transition_parts(tape, z_prev)?;
                let f = DiagGaussian::new(means, log_std)?;
                let prod = diag_product(tape, f, h)?;
                Ok(Proposal::Diag(prod))
            }
        }
    }

    /// Reverse-time contexts `c_1..c_T` from observations `(d_x, T)`.
    pub fn contexts(&self, tape: &mut Tape, xs: Var) -> Result<Vec<Var>> {
        self.model.context.forward(tape, &self.params, xs)
    }

    /// Data factor `e(z; W c_t + b, E)` of the backward proposal; also the
    /// final-step smoothing proposal on its own.
    pub fn backward_data_factor(&self, tape: &mut Tape, c_t: Var) -> Result<DiagGaussian> {
        let lin = tape.matvec(self.params.var(self.model.backward_e_w), c_t)?;
        let mean = tape.add(lin, self.params.var(self.model.backward_e_b))?;
        DiagGaussian::new(mean, self.params.var(self.model.backward_e_log_std))
    }

    /// Backward proposal for smoothing: normalized product of
    /// `r(z; zeta(z_next), R)` per column of `z_next` `(d, K)` and the data
    /// factor `e(z; W c_t + b, E)`. Always diagonal.
    pub fn backward_proposal(&self, tape: &mut Tape, z_next: Var, c_t: Var) -> Result<Proposal> {
        let r_delta = self.model.backward_r.forward(tape, &self.params, z_next)?;
        let r_mean = tape.add(z_next, r_delta)?;
        let r = DiagGaussian::new(r_mean, self.params.var(self.model.backward_r_log_std))?;
        let e = self.backward_data_factor(tape, c_t)?;
        Ok(Proposal::Diag(diag_product(tape, r, e)?))
    }

    /// Joint log density `log p(z_{1:T}, x_{1:T})` for a single trajectory
    /// staged as `z` `(d_z, T)` and `x` `(d_x, T)`.
    pub fn joint_log_density(&self, tape: &mut Tape, z: Var, x: Var) -> Result<Var> {
        let t_len = z.cols();
        if x.cols() != t_len || t_len < 2 {
            return Err(Error::InvalidArgument {
                what: "joint_log_density",
                why: format!("need matching T >= 2, got z {t_len}, x {}", x.cols()),
            });
        }
        let z1 = tape.col(z, 0)?;
        let lp0 = self.initial_log_pdf(tape, z1)?;
        let first = tape.sum(lp0);

        let head_idx: Vec<usize> = (0..t_len - 1).collect();
        let tail_idx: Vec<usize> = (1..t_len).collect();
        let z_head = tape.gather_cols(z, &head_idx)?;
        let z_tail = tape.gather_cols(z, &tail_idx)?;
        let trans = self.transition_log_pdf(tape, z_tail, z_head)?;
        let trans_sum = tape.sum(trans);

        let emit = self.emission_log_pdf(tape, x, z)?;
        let emit_sum = tape.sum(emit);

        let a = tape.add(first, trans_sum)?;
        tape.add(a, emit_sum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::HALF_LN_2PI;

    fn tiny_config(d_z: usize, d_x: usize) -> ModelConfig {
        ModelConfig {
            transition_hidden: vec![4],
            emission_hidden: vec![4],
            encoder_hidden: vec![4],
            backward_hidden: vec![4],
            context_dim: 3,
            context_hidden: 4,
            ..ModelConfig::defaults(d_z, d_x)
        }
    }

    #[test]
    fn registration_is_deterministic_and_grouped() {
        let mut s1 = ParameterStore::new();
        let m1 = SSMModel::new(tiny_config(2, 1), &mut s1, 42).unwrap();
        let mut s2 = ParameterStore::new();
        let _m2 = SSMModel::new(tiny_config(2, 1), &mut s2, 42).unwrap();
        assert_eq!(s1.n_slots(), s2.n_slots());
        for id in s1.slot_ids() {
            assert_eq!(s1.values(id), s2.values(id));
            assert_eq!(s1.name(id), s2.name(id));
        }
        assert_eq!(s1.group(s1.id_of("emission.w0").unwrap()), ParamGroup::Theta);
        assert_eq!(s1.group(s1.id_of("encoder.w0").unwrap()), ParamGroup::Phi);
        assert_eq!(
            s1.group(s1.id_of("transition.w0").unwrap()),
            ParamGroup::Varphi
        );
        assert_eq!(
            s1.group(s1.id_of("initial.log_std").unwrap()),
            ParamGroup::Varphi
        );
        assert!(m1.shares_transition());
        assert!(s1.id_of("proposal_transition.w0").is_err());
    }

    #[test]
    fn separate_transition_registers_phi_proposal_params() {
        let mut store = ParameterStore::new();
        let cfg = ModelConfig {
            share_transition: false,
            ..tiny_config(2, 1)
        };
        let _m = SSMModel::new(cfg, &mut store, 7).unwrap();
        let id = store.id_of("proposal_transition.w0").unwrap();
        assert_eq!(store.group(id), ParamGroup::Phi);
        assert_eq!(
            store.group(store.id_of("transition.w0").unwrap()),
            ParamGroup::Varphi
        );
    }

    #[test]
    fn shared_proposal_mean_moves_with_generative_transition_weights() {
        let mut store = ParameterStore::new();
        let model = SSMModel::new(tiny_config(2, 1), &mut store, 11).unwrap();
        let prop_mean = |store: &ParameterStore| -> Vec<f64> {
            let mut tape = Tape::new();
            let staged = model.stage(&mut tape, store);
            let z_prev = tape.leaf(2, 3, &[0.1, -0.2, 0.4, 0.6, -0.8, 0.3]).unwrap();
            let x = tape.leaf(1, 1, &[0.5]).unwrap();
            match staged.forward_proposal(&mut tape, z_prev, x).unwrap() {
                Proposal::Diag(d) => {
                    assert_eq!(d.mean.shape(), (2, 3));
                    tape.value(d.mean).to_vec()
                }
                _ => panic!("diagonal mode expected"),
            }
        };
        let before = prop_mean(&store);
        let id = store.id_of("transition.w0").unwrap();
        let mut vals = store.values(id).to_vec();
        for v in vals.iter_mut() {
            *v += 0.25;
        }
        store.set_values(id, &vals).unwrap();
        let after = prop_mean(&store);
        assert!(before.iter().zip(&after).any(|(a, b)| (a - b).abs() > 1e-8));
    }

    #[test]
    fn uninformative_data_factor_collapses_proposal_to_transition() {
        let mut store = ParameterStore::new();
        let model = SSMModel::new(tiny_config(2, 1), &mut store, 13).unwrap();
        store
            .set_values(store.id_of("encoder.log_std").unwrap(), &[46.0, 46.0])
            .unwrap();
        let mut tape = Tape::new();
        let staged = model.stage(&mut tape, &store);
        let z_prev = tape.leaf(2, 2, &[0.3, -0.5, 0.9, 0.2]).unwrap();
        let x = tape.leaf(1, 1, &[0.7]).unwrap();
        let prop = staged.forward_proposal(&mut tape, z_prev, x).unwrap();
        let psi = staged.transition_mean(&mut tape, z_prev).unwrap();
        let (pm, pls) = match prop {
            Proposal::Diag(d) => (d.mean, d.log_std),
            _ => panic!(),
        };
        let pv = tape.value(pm).to_vec();
        let mv = tape.value(psi).to_vec();
        for (a, b) in pv.iter().zip(&mv) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        let want_ls = store.values(store.id_of("transition.log_std").unwrap()).to_vec();
        for (a, b) in tape.value(pls).iter().zip(&want_ls) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn joint_log_density_matches_hand_sum_for_linear_model() {
        // Zeroed nets make every mean zero, so the joint is a sum of
        // standard-normal-like terms computable in closed form.
        let mut store = ParameterStore::new();
        let model = SSMModel::new(tiny_config(1, 1), &mut store, 17).unwrap();
        for name in ["transition", "emission"] {
            for layer in 0..2 {
                let id = store.id_of(&format!("{name}.w{layer}")).unwrap();
                let zeros = vec![0.0; store.values(id).len()];
                store.set_values(id, &zeros).unwrap();
            }
        }
        for name in [
            "initial.log_std",
            "transition.log_std",
            "emission.log_std",
        ] {
            store.set_values(store.id_of(name).unwrap(), &[0.0]).unwrap();
        }

        let mut tape = Tape::new();
        let staged = model.stage(&mut tape, &store);
        let z = tape.leaf(1, 3, &[0.0, 0.0, 0.0]).unwrap();
        let x = tape.leaf(1, 3, &[0.0, 0.0, 0.0]).unwrap();
        let lp = staged.joint_log_density(&mut tape, z, x).unwrap();
        // Six standard normal evaluations at zero.
        let expect = -6.0 * HALF_LN_2PI;
        assert!((tape.scalar_value(lp) - expect).abs() < 1e-10);
    }

    #[test]
    fn joint_log_density_gradient_matches_finite_differences() {
        let mut store = ParameterStore::new();
        let model = SSMModel::new(tiny_config(2, 1), &mut store, 19).unwrap();
        let zdata = vec![0.2, -0.4, 0.5, 0.1, -0.3, 0.8];
        let xdata = vec![0.6, -0.2, 0.4];

        let eval = |store: &ParameterStore| -> (f64, Vec<Vec<f64>>) {
            let mut tape = Tape::new();
            let staged = model.stage(&mut tape, store);
            let z = tape.leaf(2, 3, &zdata).unwrap();
            let x = tape.leaf(1, 3, &xdata).unwrap();
            let lp = staged.joint_log_density(&mut tape, z, x).unwrap();
            let grads = tape.backward(lp).unwrap();
            let per = store
                .slot_ids()
                .map(|id| grads.wrt(staged.params().var(id)).to_vec())
                .collect();
            (tape.scalar_value(lp), per)
        };
        let (_, analytic) = eval(&store);
        let h = 1e-5;
        for (si, id) in store.slot_ids().enumerate() {
            for ei in 0..store.values(id).len() {
                let orig = store.values(id)[ei];
                store.values_mut(id)[ei] = orig + h;
                let (lp, _) = eval(&store);
                store.values_mut(id)[ei] = orig - h;
                let (lm, _) = eval(&store);
                store.values_mut(id)[ei] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let a = analytic[si][ei];
                assert!(
                    (a - fd).abs() / a.abs().max(fd.abs()).max(1.0) < 1e-6,
                    "{} entry {ei}: analytic {a}, fd {fd}",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn perturbing_proposal_transition_leaves_target_density_unchanged() {
        let mut store = ParameterStore::new();
        let cfg = ModelConfig {
            share_transition: false,
            ..tiny_config(1, 1)
        };
        let model = SSMModel::new(cfg, &mut store, 23).unwrap();
        let eval = |store: &ParameterStore| -> f64 {
            let mut tape = Tape::new();
            let staged = model.stage(&mut tape, store);
            let z = tape.leaf(1, 2, &[0.3, -0.6]).unwrap();
            let x = tape.leaf(1, 2, &[0.1, 0.9]).unwrap();
            let lp = staged.joint_log_density(&mut tape, z, x).unwrap();
            tape.scalar_value(lp)
        };
        let before = eval(&store);
        let id = store.id_of("proposal_transition.w0").unwrap();
        let mut vals = store.values(id).to_vec();
        for v in vals.iter_mut() {
            *v += 0.37;
        }
        store.set_values(id, &vals).unwrap();
        assert_eq!(before, eval(&store));
    }

    #[test]
    fn backward_proposal_is_normalized_product_of_r_and_e() {
        let mut store = ParameterStore::new();
        let model = SSMModel::new(tiny_config(1, 1), &mut store, 29).unwrap();
        let mut tape = Tape::new();
        let staged = model.stage(&mut tape, &store);
        let xs = tape.leaf(1, 3, &[0.2, -0.1, 0.5]).unwrap();
        let cs = staged.contexts(&mut tape, xs).unwrap();
        let z_next = tape.leaf(1, 2, &[0.4, -0.9]).unwrap();
        let prop = staged.backward_proposal(&mut tape, z_next, cs[1]).unwrap();
        let d = match prop {
            Proposal::Diag(d) => d,
            _ => panic!(),
        };
        assert_eq!(d.mean.shape(), (1, 2));
        // Normalization: integral of the density over a fine grid is 1.
        let mean0 = tape.value(d.mean)[0];
        let std0 = tape.value(d.log_std)[0].exp();
        let (lo, hi) = (mean0 - 10.0 * std0, mean0 + 10.0 * std0);
        let steps = 20_000;
        let dx = (hi - lo) / steps as f64;
        let mut integral = 0.0;
        for i in 0..steps {
            let z = lo + (i as f64 + 0.5) * dx;
            let zl = tape.leaf(1, 1, &[z]).unwrap();
            let col = tape.col(d.mean, 0).unwrap();
            let g = DiagGaussian::new(col, d.log_std).unwrap();
            let lp = g.log_pdf(&mut tape, zl).unwrap();
            integral += tape.scalar_value(lp).exp() * dx;
        }
        assert!((integral - 1.0).abs() < 1e-6, "integral {integral}");
    }

    #[test]
    fn trajectory_validation() {
        assert!(Trajectory::new(1, 1, 1, vec![0.0], vec![0.0]).is_err());
        assert!(Trajectory::new(1, 1, 2, vec![0.0; 2], vec![0.0; 3]).is_err());
        let t = Trajectory::new(1, 2, 3, vec![], vec![0.0; 6]).unwrap();
        assert_eq!(t.x_col(2), &[0.0, 0.0]);
    }

    #[test]
    fn locally_linear_transition_matches_diagonal_when_net_is_zero() {
        let mut store = ParameterStore::new();
        let cfg = ModelConfig {
            covariance: CovarianceMode::LocallyLinear {
                alpha: 0.1,
                hidden: vec![4],
            },
            ..tiny_config(2, 1)
        };
        let model = SSMModel::new(cfg, &mut store, 31).unwrap();
        // Zero the covariance net so cov(z) = sigma^2 I exactly.
        for layer in 0..2 {
            let id = store.id_of(&format!("transition.cov.net.w{layer}")).unwrap();
            let zeros = vec![0.0; store.values(id).len()];
            store.set_values(id, &zeros).unwrap();
        }
        let sigma_id = store.id_of("transition.cov.log_sigma").unwrap();
        store.set_values(sigma_id, &[-0.3]).unwrap();

        let mut tape = Tape::new();
        let staged = model.stage(&mut tape, &store);
        let z_prev = tape.leaf(2, 2, &[0.1, 0.4, -0.2, 0.3]).unwrap();
        let z_next = tape.leaf(2, 2, &[0.0, 0.2, 0.5, -0.1]).unwrap();
        let lp_full = staged.transition_log_pdf(&mut tape, z_next, z_prev).unwrap();

        let means = staged.transition_mean(&mut tape, z_prev).unwrap();
        let ls = tape.leaf(2, 1, &[-0.3, -0.3]).unwrap();
        let diag = DiagGaussian::new(means, ls).unwrap();
        let lp_diag = diag.log_pdf(&mut tape, z_next).unwrap();
        for (a, b) in tape.value(lp_full).iter().zip(tape.value(lp_diag)) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}
