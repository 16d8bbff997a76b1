//! Exact-inference oracles for linear-Gaussian state-space instances.
//!
//! Everything here exists to verify the main modules from the outside:
//! a Kalman filter (prediction-error log marginal), an RTS smoother, a
//! dense joint-Gaussian evaluation, Gauss-Hermite quadrature, and a
//! brute-force enumeration of a two-step, two-particle filtering pass that
//! integrates out all randomness. None of it reuses the density or autodiff
//! code under test; densities are rewritten from scalar formulas (or
//! nalgebra primitives), so agreement between the two sides is meaningful.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffmath::ParameterStore;
use crate::error::{Error, Result};
use crate::model::{CovarianceMode, ModelConfig, SSMModel};

const LN_2PI: f64 = 1.8378770664093453;

/// Linear-Gaussian state-space model
/// `z_1 ~ N(m0, P0)`, `z_t ~ N(A z_{t-1}, Q)`, `x_t ~ N(C z_t, R)`.
#[derive(Clone, Debug)]
pub struct Lgssm {
    pub a: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub m0: DVector<f64>,
    pub p0: DMatrix<f64>,
}

impl Lgssm {
    pub fn new(
        a: DMatrix<f64>,
        q: DMatrix<f64>,
        c: DMatrix<f64>,
        r: DMatrix<f64>,
        m0: DVector<f64>,
        p0: DMatrix<f64>,
    ) -> Result<Self> {
        let d_z = a.nrows();
        let d_x = c.nrows();
        if a.ncols() != d_z
            || q.shape() != (d_z, d_z)
            || c.ncols() != d_z
            || r.shape() != (d_x, d_x)
            || m0.len() != d_z
            || p0.shape() != (d_z, d_z)
        {
            return Err(Error::InvalidArgument {
                what: "Lgssm",
                why: "inconsistent matrix dimensions".into(),
            });
        }
        for (name, m) in [("Q", &q), ("R", &r), ("P0", &p0)] {
            if Cholesky::new(m.clone()).is_none() {
                return Err(Error::Numerical {
                    what: "Lgssm",
                    why: format!("{name} is not symmetric positive definite"),
                });
            }
        }
        Ok(Self { a, q, c, r, m0, p0 })
    }

    /// Scalar instance helper (all quantities 1x1).
    pub fn scalar(a: f64, q_var: f64, c: f64, r_var: f64, m0: f64, p0_var: f64) -> Self {
        Self {
            a: DMatrix::from_element(1, 1, a),
            q: DMatrix::from_element(1, 1, q_var),
            c: DMatrix::from_element(1, 1, c),
            r: DMatrix::from_element(1, 1, r_var),
            m0: DVector::from_element(1, m0),
            p0: DMatrix::from_element(1, 1, p0_var),
        }
    }

    pub fn d_z(&self) -> usize {
        self.a.nrows()
    }

    pub fn d_x(&self) -> usize {
        self.c.nrows()
    }
}

/// Forward Kalman pass results.
#[derive(Clone, Debug)]
pub struct KalmanRun {
    pub log_marginal: f64,
    pub filtered_means: Vec<DVector<f64>>,
    pub filtered_covs: Vec<DMatrix<f64>>,
    pub predicted_means: Vec<DVector<f64>>,
    pub predicted_covs: Vec<DMatrix<f64>>,
}

/// RTS backward pass results.
#[derive(Clone, Debug)]
pub struct SmootherRun {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

fn mvn_log_pdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = Cholesky::new(cov.clone()).ok_or(Error::Numerical {
        what: "mvn_log_pdf",
        why: "covariance not positive definite".into(),
    })?;
    let diff = x - mean;
    let solved = chol.solve(&diff);
    let maha = diff.dot(&solved);
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (maha + log_det + x.len() as f64 * LN_2PI))
}

/// Exact filter over observations `x` (column-major `d_x * t_len`).
/// `log_marginal` accumulates the prediction-error decomposition.
pub fn kalman_filter(lgssm: &Lgssm, x: &[f64], t_len: usize) -> Result<KalmanRun> {
    let d_x = lgssm.d_x();
    if x.len() != d_x * t_len || t_len == 0 {
        return Err(Error::InvalidArgument {
            what: "kalman_filter",
            why: format!("observation buffer {} vs d_x*t_len {}", x.len(), d_x * t_len),
        });
    }
    let mut log_marginal = 0.0;
    let mut run = KalmanRun {
        log_marginal: 0.0,
        filtered_means: Vec::with_capacity(t_len),
        filtered_covs: Vec::with_capacity(t_len),
        predicted_means: Vec::with_capacity(t_len),
        predicted_covs: Vec::with_capacity(t_len),
    };
    let mut pred_mean = lgssm.m0.clone();
    let mut pred_cov = lgssm.p0.clone();
    for t in 0..t_len {
        let obs = DVector::from_column_slice(&x[t * d_x..(t + 1) * d_x]);
        let innov_mean = &lgssm.c * &pred_mean;
        let innov_cov = &lgssm.c * &pred_cov * lgssm.c.transpose() + &lgssm.r;
        log_marginal += mvn_log_pdf(&obs, &innov_mean, &innov_cov)?;
        let chol = Cholesky::new(innov_cov.clone()).ok_or(Error::Numerical {
            what: "kalman_filter",
            why: format!("innovation covariance not positive definite at step {t}"),
        })?;
        // Gain = P C' S^{-1}, computed via S^{-1} (C P)'.
        let gain = (chol.solve(&(&lgssm.c * &pred_cov))).transpose();
        let resid = obs - innov_mean;
        let filt_mean = &pred_mean + &gain * resid;
        let filt_cov = &pred_cov - &gain * &lgssm.c * &pred_cov;
        run.predicted_means.push(pred_mean.clone());
        run.predicted_covs.push(pred_cov.clone());
        run.filtered_means.push(filt_mean.clone());
        run.filtered_covs.push(filt_cov.clone());
        pred_mean = &lgssm.a * filt_mean;
        pred_cov = &lgssm.a * filt_cov * lgssm.a.transpose() + &lgssm.q;
    }
    run.log_marginal = log_marginal;
    Ok(run)
}

/// Exact log p(x_{1:T}).
pub fn kalman_log_marginal(lgssm: &Lgssm, x: &[f64], t_len: usize) -> Result<f64> {
    Ok(kalman_filter(lgssm, x, t_len)?.log_marginal)
}

/// RTS smoother; returns the forward run alongside the smoothed marginals.
pub fn kalman_smoother(lgssm: &Lgssm, x: &[f64], t_len: usize) -> Result<(KalmanRun, SmootherRun)> {
    let run = kalman_filter(lgssm, x, t_len)?;
    let mut means = vec![DVector::zeros(lgssm.d_z()); t_len];
    let mut covs = vec![DMatrix::zeros(lgssm.d_z(), lgssm.d_z()); t_len];
    means[t_len - 1] = run.filtered_means[t_len - 1].clone();
    covs[t_len - 1] = run.filtered_covs[t_len - 1].clone();
    for t in (0..t_len - 1).rev() {
        // Predicted quantities at t+1 given 1..t.
        let pred_mean = &run.predicted_means[t + 1];
        let pred_cov = &run.predicted_covs[t + 1];
        let chol = Cholesky::new(pred_cov.clone()).ok_or(Error::Numerical {
            what: "kalman_smoother",
            why: format!("predictive covariance not positive definite at step {t}"),
        })?;
        // Gain = P_f A' P_pred^{-1} = (P_pred^{-1} A P_f)'.
        let gain = chol.solve(&(&lgssm.a * &run.filtered_covs[t])).transpose();
        means[t] = &run.filtered_means[t] + &gain * (&means[t + 1] - pred_mean);
        covs[t] =
            &run.filtered_covs[t] + &gain * (&covs[t + 1] - pred_cov) * gain.transpose();
    }
    Ok((run, SmootherRun { means, covs }))
}

/// Draw one latent/observation trajectory pair, both column-major.
pub fn sample_lgssm(lgssm: &Lgssm, t_len: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let d_z = lgssm.d_z();
    let d_x = lgssm.d_x();
    let chol = |m: &DMatrix<f64>, name: &'static str| {
        Cholesky::new(m.clone()).ok_or(Error::Numerical {
            what: name,
            why: "covariance not positive definite".into(),
        })
    };
    let l0 = chol(&lgssm.p0, "sample_lgssm")?;
    let lq = chol(&lgssm.q, "sample_lgssm")?;
    let lr = chol(&lgssm.r, "sample_lgssm")?;
    let mut draw = |d: usize| {
        DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
    };
    let mut z = Vec::with_capacity(d_z * t_len);
    let mut x = Vec::with_capacity(d_x * t_len);
    let mut state = &lgssm.m0 + l0.l() * draw(d_z);
    for t in 0..t_len {
        if t > 0 {
            state = &lgssm.a * state + lq.l() * draw(d_z);
        }
        let obs = &lgssm.c * &state + lr.l() * draw(d_x);
        z.extend_from_slice(state.as_slice());
        x.extend_from_slice(obs.as_slice());
    }
    Ok((z, x))
}

/// Evaluate log p(x_{1:T}) by building the dense joint Gaussian over all
/// T*d_x observations. Cross-checks the Kalman recursion.
pub fn joint_observation_log_pdf(lgssm: &Lgssm, x: &[f64], t_len: usize) -> Result<f64> {
    let d_z = lgssm.d_z();
    let d_x = lgssm.d_x();
    // Latent joint moments by propagation.
    let mut z_means: Vec<DVector<f64>> = Vec::with_capacity(t_len);
    let mut z_cov = vec![vec![DMatrix::<f64>::zeros(d_z, d_z); t_len]; t_len];
    z_means.push(lgssm.m0.clone());
    z_cov[0][0] = lgssm.p0.clone();
    for t in 1..t_len {
        let prev_mean = z_means[t - 1].clone();
        z_means.push(&lgssm.a * prev_mean);
        let prev = z_cov[t - 1][t - 1].clone();
        z_cov[t][t] = &lgssm.a * prev * lgssm.a.transpose() + &lgssm.q;
        for s in 0..t {
            let c = z_cov[s][t - 1].clone();
            let cross = c * lgssm.a.transpose();
            z_cov[s][t] = cross.clone();
            z_cov[t][s] = cross.transpose();
        }
    }
    let n = t_len * d_x;
    let mut mean = DVector::zeros(n);
    let mut cov = DMatrix::zeros(n, n);
    for t in 0..t_len {
        let m = &lgssm.c * &z_means[t];
        mean.rows_mut(t * d_x, d_x).copy_from(&m);
        for s in 0..t_len {
            let mut block = &lgssm.c * &z_cov[t][s] * lgssm.c.transpose();
            if s == t {
                block += &lgssm.r;
            }
            cov.view_mut((t * d_x, s * d_x), (d_x, d_x)).copy_from(&block);
        }
    }
    mvn_log_pdf(&DVector::from_column_slice(&x[..n]), &mean, &cov)
}

/// Exact log p(z_{1:T}, x_{1:T}) for an LGSSM, both buffers column-major.
pub fn lgssm_joint_log_pdf(lgssm: &Lgssm, z: &[f64], x: &[f64], t_len: usize) -> Result<f64> {
    let d_z = lgssm.d_z();
    let d_x = lgssm.d_x();
    if z.len() != d_z * t_len || x.len() != d_x * t_len || t_len == 0 {
        return Err(Error::InvalidArgument {
            what: "lgssm_joint_log_pdf",
            why: "buffer lengths do not match t_len".into(),
        });
    }
    let zt = |t: usize| DVector::from_column_slice(&z[t * d_z..(t + 1) * d_z]);
    let xt = |t: usize| DVector::from_column_slice(&x[t * d_x..(t + 1) * d_x]);
    let mut total = mvn_log_pdf(&zt(0), &lgssm.m0, &lgssm.p0)?;
    for t in 1..t_len {
        total += mvn_log_pdf(&zt(t), &(&lgssm.a * zt(t - 1)), &lgssm.q)?;
    }
    for t in 0..t_len {
        total += mvn_log_pdf(&xt(t), &(&lgssm.c * zt(t)), &lgssm.r)?;
    }
    Ok(total)
}

/// Gauss-Hermite nodes/weights for `integral f(t) exp(-t^2) dt` via the
/// Golub-Welsch eigendecomposition of the Jacobi matrix.
pub fn gh_nodes(order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if order < 1 {
        return Err(Error::InvalidArgument {
            what: "gh_nodes",
            why: "order must be at least 1".into(),
        });
    }
    let mut j = DMatrix::zeros(order, order);
    for k in 1..order {
        let b = (k as f64 / 2.0).sqrt();
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], sqrt_pi * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(pairs.into_iter().unzip())
}

/// Scalar (d_z = d_x = 1) instance in the parameterization of the model
/// under test: transition mean `a z + b`, emission mean `c z + d`, encoder
/// mean `w x + e`, all with the stated standard deviations.
#[derive(Clone, Copy, Debug)]
pub struct ScalarInstance {
    pub m0: f64,
    pub s0: f64,
    pub trans_a: f64,
    pub trans_b: f64,
    pub q_std: f64,
    pub emi_c: f64,
    pub emi_d: f64,
    pub r_std: f64,
    pub enc_w: f64,
    pub enc_b: f64,
    pub enc_std: f64,
}

impl ScalarInstance {
    /// A generic well-conditioned instance for estimator tests.
    pub fn reference() -> Self {
        Self {
            m0: 0.3,
            s0: 0.9,
            trans_a: 0.8,
            trans_b: 0.1,
            q_std: 0.7,
            emi_c: 1.2,
            emi_d: -0.2,
            r_std: 0.6,
            enc_w: 0.5,
            enc_b: 0.05,
            enc_std: 0.8,
        }
    }

    /// The generative side as an [`Lgssm`] (the encoder is proposal-only and
    /// requires `trans_b = emi_d = 0` to be representable here).
    pub fn to_lgssm(&self) -> Result<Lgssm> {
        if self.trans_b != 0.0 || self.emi_d != 0.0 {
            return Err(Error::InvalidArgument {
                what: "ScalarInstance",
                why: "offsets are not representable in the homogeneous linear form".into(),
            });
        }
        Lgssm::new(
            DMatrix::from_element(1, 1, self.trans_a),
            DMatrix::from_element(1, 1, self.q_std * self.q_std),
            DMatrix::from_element(1, 1, self.emi_c),
            DMatrix::from_element(1, 1, self.r_std * self.r_std),
            DVector::from_element(1, self.m0),
            DMatrix::from_element(1, 1, self.s0 * self.s0),
        )
    }
}

fn ln_normal(v: f64, mean: f64, std: f64) -> f64 {
    let z = (v - mean) / std;
    -0.5 * z * z - std.ln() - 0.5 * LN_2PI
}

/// Normalized product of two scalar Gaussians: returns (mean, std).
fn product(m1: f64, s1: f64, m2: f64, s2: f64) -> (f64, f64) {
    let p = 1.0 / (s1 * s1) + 1.0 / (s2 * s2);
    let var = 1.0 / p;
    (var * (m1 / (s1 * s1) + m2 / (s2 * s2)), var.sqrt())
}

fn lse2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Exact E[log Z_hat] of a two-step, two-particle filtering pass with
/// multinomial resampling, marginalizing the four proposal noises by
/// Gauss-Hermite quadrature and summing the four ancestor assignments with
/// their categorical probabilities. Matches the filter under test when the
/// model is the linear instance: proposals are the normalized
/// transition-times-encoder products and log Z_hat telescopes the two
/// normalized-weight steps.
pub fn exact_expected_logz(
    inst: &ScalarInstance,
    x1: f64,
    x2: f64,
    order: usize,
) -> Result<f64> {
    let (nodes, weights) = gh_nodes(order)?;
    let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
    let w_norm: Vec<f64> = weights.iter().map(|w| w * inv_sqrt_pi).collect();
    let sqrt2 = std::f64::consts::SQRT_2;
    let ln2 = std::f64::consts::LN_2;

    let enc1 = inst.enc_w * x1 + inst.enc_b;
    let enc2 = inst.enc_w * x2 + inst.enc_b;
    let (mu1, sig1) = product(inst.m0, inst.s0, enc1, inst.enc_std);
    let log_g = |x: f64, z: f64| ln_normal(x, inst.emi_c * z + inst.emi_d, inst.r_std);
    let log_w_first = |z: f64| {
        ln_normal(z, inst.m0, inst.s0) + log_g(x1, z) - ln_normal(z, mu1, sig1)
    };

    let mut total = 0.0;
    for (i, &ti) in nodes.iter().enumerate() {
        let z1a = mu1 + sqrt2 * sig1 * ti;
        let lwa = log_w_first(z1a);
        for (j, &tj) in nodes.iter().enumerate() {
            let z1b = mu1 + sqrt2 * sig1 * tj;
            let lwb = log_w_first(z1b);
            let lse1 = lse2(lwa, lwb);
            let l1 = lse1 - ln2;
            let pa = (lwa - lse1).exp();
            let pb = (lwb - lse1).exp();
            let outer = w_norm[i] * w_norm[j];

            let mut inner_total = 0.0;
            for (prev_a, prev_b, p_pair) in [
                (z1a, z1a, pa * pa),
                (z1a, z1b, pa * pb),
                (z1b, z1a, pb * pa),
                (z1b, z1b, pb * pb),
            ] {
                let fa = inst.trans_a * prev_a + inst.trans_b;
                let fb = inst.trans_a * prev_b + inst.trans_b;
                let (mu2a, sig2) = product(fa, inst.q_std, enc2, inst.enc_std);
                let (mu2b, _) = product(fb, inst.q_std, enc2, inst.enc_std);
                let mut pair_sum = 0.0;
                for (k, &tk) in nodes.iter().enumerate() {
                    let z2a = mu2a + sqrt2 * sig2 * tk;
                    let lw2a = ln_normal(z2a, fa, inst.q_std) + log_g(x2, z2a)
                        - ln_normal(z2a, mu2a, sig2);
                    for (l, &tl) in nodes.iter().enumerate() {
                        let z2b = mu2b + sqrt2 * sig2 * tl;
                        let lw2b = ln_normal(z2b, fb, inst.q_std) + log_g(x2, z2b)
                            - ln_normal(z2b, mu2b, sig2);
                        let l2 = lse2(lw2a, lw2b) - ln2;
                        pair_sum += w_norm[k] * w_norm[l] * (l1 + l2);
                    }
                }
                inner_total += p_pair * pair_sum;
            }
            total += outer * inner_total;
        }
    }
    Ok(total)
}

/// Encoder parameters for [`lgssm_model`]: mean `W x + b` with per-dim
/// log standard deviations.
#[derive(Clone, Debug)]
pub struct EncoderSpec {
    /// Column-major `(d_z, d_x)`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub log_std: Vec<f64>,
}

/// Build a model whose generative side equals `lgssm` exactly (requires
/// diagonal Q, R, P0) and whose encoder is the given affine map. All nets
/// are hidden-layer-free; the transition net gets `W = A - I` so the
/// residual mean is `A z`.
pub fn lgssm_model(
    lgssm: &Lgssm,
    enc: &EncoderSpec,
    store: &mut ParameterStore,
    seed: u64,
) -> Result<SSMModel> {
    let d_z = lgssm.d_z();
    let d_x = lgssm.d_x();
    for (name, m) in [("Q", &lgssm.q), ("R", &lgssm.r), ("P0", &lgssm.p0)] {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if i != j && m[(i, j)] != 0.0 {
                    return Err(Error::InvalidArgument {
                        what: "lgssm_model",
                        why: format!("{name} must be diagonal to map onto the model"),
                    });
                }
            }
        }
    }
    let mut cfg = ModelConfig::defaults(d_z, d_x);
    cfg.transition_hidden = vec![];
    cfg.emission_hidden = vec![];
    cfg.encoder_hidden = vec![];
    cfg.covariance = CovarianceMode::Diagonal;
    cfg.share_transition = true;
    let model = SSMModel::new(cfg, store, seed)?;

    let set = |store: &mut ParameterStore, name: &str, vals: Vec<f64>| -> Result<()> {
        let id = store.id_of(name)?;
        store.set_values(id, &vals)
    };
    set(store, "initial.mean", lgssm.m0.as_slice().to_vec())?;
    set(
        store,
        "initial.log_std",
        (0..d_z).map(|i| lgssm.p0[(i, i)].sqrt().ln()).collect(),
    )?;
    let mut w_trans = vec![0.0; d_z * d_z];
    for col in 0..d_z {
        for row in 0..d_z {
            let identity = if row == col { 1.0 } else { 0.0 };
            w_trans[col * d_z + row] = lgssm.a[(row, col)] - identity;
        }
    }
    set(store, "transition.w0", w_trans)?;
    set(store, "transition.b0", vec![0.0; d_z])?;
    set(
        store,
        "transition.log_std",
        (0..d_z).map(|i| lgssm.q[(i, i)].sqrt().ln()).collect(),
    )?;
    let mut w_emi = vec![0.0; d_x * d_z];
    for col in 0..d_z {
        for row in 0..d_x {
            w_emi[col * d_x + row] = lgssm.c[(row, col)];
        }
    }
    set(store, "emission.w0", w_emi)?;
    set(store, "emission.b0", vec![0.0; d_x])?;
    set(
        store,
        "emission.log_std",
        (0..d_x).map(|i| lgssm.r[(i, i)].sqrt().ln()).collect(),
    )?;
    if enc.w.len() != d_z * d_x || enc.b.len() != d_z || enc.log_std.len() != d_z {
        return Err(Error::InvalidArgument {
            what: "lgssm_model",
            why: "encoder spec dimensions do not match the instance".into(),
        });
    }
    set(store, "encoder.w0", enc.w.clone())?;
    set(store, "encoder.b0", enc.b.clone())?;
    set(store, "encoder.log_std", enc.log_std.clone())?;
    Ok(model)
}

/// Build the model for a [`ScalarInstance`], including its offsets (the
/// net biases carry `trans_b`, `emi_d`, `enc_b`).
pub fn scalar_model(
    inst: &ScalarInstance,
    store: &mut ParameterStore,
    seed: u64,
) -> Result<SSMModel> {
    let mut cfg = ModelConfig::defaults(1, 1);
    cfg.transition_hidden = vec![];
    cfg.emission_hidden = vec![];
    cfg.encoder_hidden = vec![];
    cfg.share_transition = true;
    let model = SSMModel::new(cfg, store, seed)?;
    let set = |store: &mut ParameterStore, name: &str, vals: Vec<f64>| -> Result<()> {
        let id = store.id_of(name)?;
        store.set_values(id, &vals)
    };
    set(store, "initial.mean", vec![inst.m0])?;
    set(store, "initial.log_std", vec![inst.s0.ln()])?;
    set(store, "transition.w0", vec![inst.trans_a - 1.0])?;
    set(store, "transition.b0", vec![inst.trans_b])?;
    set(store, "transition.log_std", vec![inst.q_std.ln()])?;
    set(store, "emission.w0", vec![inst.emi_c])?;
    set(store, "emission.b0", vec![inst.emi_d])?;
    set(store, "emission.log_std", vec![inst.r_std.ln()])?;
    set(store, "encoder.w0", vec![inst.enc_w])?;
    set(store, "encoder.b0", vec![inst.enc_b])?;
    set(store, "encoder.log_std", vec![inst.enc_std.ln()])?;
    Ok(model)
}
