//! Statistical agreement between the particle estimators and exact
//! linear-Gaussian inference: both normalizing-constant estimators are
//! unbiased for p(x_{1:T}), the smoothing objective sits below the true
//! log marginal on average, and widening the particle budget tightens it.

use nalgebra::{DMatrix, DVector};
use svo_core::diffmath::{ParameterStore, Tape};
use svo_core::oracle::{kalman_log_marginal, lgssm_model, sample_lgssm, EncoderSpec, Lgssm};
use svo_core::rng::{derive_rng, stream, LiveSource};
use svo_core::smc::{smc_filter, SmcConfig};
use svo_core::svo::svo_estimate;

struct Instance {
    lgssm: Lgssm,
    model: svo_core::model::SSMModel,
    store: ParameterStore,
    x: Vec<f64>,
    t_len: usize,
    log_px: f64,
}

fn build_instance(d_z: usize, t_len: usize, seed: u64) -> Instance {
    let (a, q, c, r, m0, p0) = match d_z {
        1 => (
            DMatrix::from_element(1, 1, 0.85),
            DMatrix::from_element(1, 1, 0.36),
            DMatrix::from_element(1, 1, 1.1),
            DMatrix::from_element(1, 1, 0.25),
            DVector::from_element(1, 0.2),
            DMatrix::from_element(1, 1, 0.81),
        ),
        2 => (
            DMatrix::from_row_slice(2, 2, &[0.8, 0.15, -0.1, 0.7]),
            DMatrix::from_row_slice(2, 2, &[0.36, 0.0, 0.0, 0.25]),
            DMatrix::from_row_slice(1, 2, &[1.0, -0.6]),
            DMatrix::from_element(1, 1, 0.2),
            DVector::from_column_slice(&[0.1, -0.3]),
            DMatrix::from_row_slice(2, 2, &[0.64, 0.0, 0.0, 0.49]),
        ),
        _ => panic!("unsupported latent dimension"),
    };
    let lgssm = Lgssm::new(a, q, c, r, m0, p0).unwrap();
    let d_x = lgssm.d_x();
    let mut rng = derive_rng(seed, &[stream::DATA, d_z as u64, t_len as u64]);
    let (_, x) = sample_lgssm(&lgssm, t_len, &mut rng).unwrap();
    let log_px = kalman_log_marginal(&lgssm, &x, t_len).unwrap();
    // Mildly informative encoder; correctness must not depend on its values.
    let enc = EncoderSpec {
        w: vec![0.4; d_z * d_x],
        b: vec![0.05; d_z],
        log_std: vec![0.2; d_z],
    };
    let mut store = ParameterStore::new();
    let model = lgssm_model(&lgssm, &enc, &mut store, seed).unwrap();
    Instance {
        lgssm,
        model,
        store,
        x,
        t_len,
        log_px,
    }
}

/// Mean and standard error of e^{log z} samples.
fn mean_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn smc_log_z(inst: &Instance, k: usize, rep_seed: u64, rep: u64) -> f64 {
    let mut tape = Tape::new();
    let staged = inst.model.stage(&mut tape, &inst.store);
    let x = tape.leaf(inst.lgssm.d_x(), inst.t_len, &inst.x).unwrap();
    let mut rng = derive_rng(rep_seed, &[stream::VERIFY, rep]);
    let mut source = LiveSource::new(&mut rng);
    let out = smc_filter(&mut tape, &staged, x, &SmcConfig::new(k), &mut source).unwrap();
    tape.scalar_value(out.log_z_hat)
}

fn svo_log_z(inst: &Instance, k: usize, m: usize, rep_seed: u64, rep: u64) -> f64 {
    let mut tape = Tape::new();
    let staged = inst.model.stage(&mut tape, &inst.store);
    let x = tape.leaf(inst.lgssm.d_x(), inst.t_len, &inst.x).unwrap();
    let mut rng = derive_rng(rep_seed, &[stream::VERIFY, rep]);
    let mut source = LiveSource::new(&mut rng);
    let (obj, _, _) = svo_estimate(
        &mut tape,
        &staged,
        x,
        &SmcConfig::new(k),
        m,
        &mut source,
    )
    .unwrap();
    tape.scalar_value(obj.log_z_svo)
}

#[test]
fn smc_normalizing_constant_is_unbiased_for_the_kalman_marginal() {
    for (d_z, t_len, k, n_reps) in [(1, 3, 4, 50_000), (2, 3, 4, 20_000)] {
        let inst = build_instance(d_z, t_len, 100 + d_z as u64);
        let z_true = inst.log_px.exp();
        let samples: Vec<f64> = (0..n_reps)
            .map(|r| smc_log_z(&inst, k, 500 + d_z as u64, r as u64).exp())
            .collect();
        let (mean, se) = mean_se(&samples);
        assert!(
            (mean - z_true).abs() < 3.0 * se,
            "d_z={d_z}: mean {mean} vs true {z_true} (se {se})"
        );
    }
}

#[test]
fn svo_normalizing_constant_is_unbiased_for_the_kalman_marginal() {
    for (d_z, t_len, k, m, n_reps) in [(1, 3, 4, 3, 20_000), (1, 4, 1, 1, 20_000), (2, 3, 4, 3, 8_000)]
    {
        let inst = build_instance(d_z, t_len, 200 + d_z as u64 + m as u64);
        let z_true = inst.log_px.exp();
        let samples: Vec<f64> = (0..n_reps)
            .map(|r| svo_log_z(&inst, k, m, 700 + k as u64 + m as u64, r as u64).exp())
            .collect();
        let (mean, se) = mean_se(&samples);
        assert!(
            (mean - z_true).abs() < 3.0 * se,
            "d_z={d_z}, K={k}, M={m}: mean {mean} vs true {z_true} (se {se})"
        );
    }
}

/// Jensen: E[log Z_hat] <= log p(x), and the bound tightens as the particle
/// budget grows, within Monte Carlo resolution.
#[test]
fn svo_objective_is_a_lower_bound_that_tightens_with_the_budget() {
    let inst = build_instance(1, 5, 321);
    let n_reps = 4_000;
    let mut means = Vec::new();
    let mut ses = Vec::new();
    for (k, m) in [(2, 2), (8, 8), (32, 32)] {
        let samples: Vec<f64> = (0..n_reps)
            .map(|r| svo_log_z(&inst, k, m, 900 + k as u64, r as u64))
            .collect();
        let (mean, se) = mean_se(&samples);
        means.push(mean);
        ses.push(se);
        assert!(
            mean + 3.0 * se < inst.log_px + 1e-9,
            "K=M={k}: bound {mean} (se {se}) vs log p(x) {}",
            inst.log_px
        );
    }
    // Non-decreasing within 2 joint standard errors.
    for i in 1..means.len() {
        let slack = 2.0 * (ses[i - 1].powi(2) + ses[i].powi(2)).sqrt();
        assert!(
            means[i] >= means[i - 1] - slack,
            "budget step {i}: {} -> {} (slack {slack})",
            means[i - 1],
            means[i]
        );
    }
}
