//! Synthetic benchmark systems and CSV ingestion.
//!
//! Provides a fixed-step fourth-order Runge-Kutta integrator, simulators for
//! the FitzHugh-Nagumo relaxation oscillator (2-D latent, 1-D noisy voltage
//! observation) and the Lorenz attractor (3-D latent pushed through a fixed
//! random network into 10-D observations), and an ingestion path that turns
//! recorded one-dimensional CSV series into trials with down-sampling,
//! segmentation, and per-trial max-absolute normalization. All generators are
//! bit-reproducible from a seed plus their config.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffmath::{ParamGroup, ParameterStore};
use crate::error::{Error, Result};
use crate::model::Trajectory;
use crate::networks::{Mlp, MlpSpec};
use crate::rng::{derive_rng, stream};
use rand::Rng;
use rand_distr::StandardNormal;

/// One fourth-order Runge-Kutta step of `dy/dt = f(y)` in place.
fn rk4_step<F: Fn(&[f64], &mut [f64])>(f: &F, y: &mut [f64], dt: f64, scratch: &mut Rk4Scratch) {
    let d = y.len();
    let Rk4Scratch { k1, k2, k3, k4, tmp } = scratch;
    f(y, k1);
    for i in 0..d {
        tmp[i] = y[i] + 0.5 * dt * k1[i];
    }
    f(tmp, k2);
    for i in 0..d {
        tmp[i] = y[i] + 0.5 * dt * k2[i];
    }
    f(tmp, k3);
    for i in 0..d {
        tmp[i] = y[i] + dt * k3[i];
    }
    f(tmp, k4);
    for i in 0..d {
        y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Scratch {
    fn new(d: usize) -> Self {
        Self {
            k1: vec![0.0; d],
            k2: vec![0.0; d],
            k3: vec![0.0; d],
            k4: vec![0.0; d],
            tmp: vec![0.0; d],
        }
    }
}

/// Integrate `dy/dt = f(y)` from `init` for `n_steps` fixed steps of size
/// `dt`. Returns the full trajectory column-major, `(d, n_steps + 1)`
/// including the initial state.
pub fn rk4_integrate<F: Fn(&[f64], &mut [f64])>(
    f: F,
    init: &[f64],
    dt: f64,
    n_steps: usize,
) -> Result<Vec<f64>> {
    if init.is_empty() {
        return Err(Error::InvalidArgument {
            what: "rk4_integrate",
            why: "empty initial state".into(),
        });
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument {
            what: "rk4_integrate",
            why: format!("step size must be positive and finite, got {dt}"),
        });
    }
    let d = init.len();
    let mut out = Vec::with_capacity(d * (n_steps + 1));
    out.extend_from_slice(init);
    let mut state = init.to_vec();
    let mut scratch = Rk4Scratch::new(d);
    for _ in 0..n_steps {
        rk4_step(&f, &mut state, dt, &mut scratch);
        out.extend_from_slice(&state);
    }
    Ok(out)
}

/// FitzHugh-Nagumo oscillator:
/// `dV = V - V^3/3 - W + I_ext`, `dW = a (b V - c W)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FnConfig {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub i_ext: f64,
    /// Number of stored time points (the integrator takes `t_len - 1` steps).
    pub t_len: usize,
    pub dt: f64,
    /// Per-dimension `[low, high]` box the initial state is drawn from.
    pub init_box: Vec<[f64; 2]>,
    /// Variance of the Gaussian observation noise on the voltage; zero means
    /// the observation equals the voltage exactly.
    pub obs_noise_var: f64,
}

impl Default for FnConfig {
    fn default() -> Self {
        Self {
            a: 0.7,
            b: 0.8,
            c: 0.08,
            i_ext: 1.0,
            t_len: 200,
            dt: 0.25,
            init_box: vec![[-3.0, 3.0], [-3.0, 3.0]],
            obs_noise_var: 0.01,
        }
    }
}

/// Lorenz attractor `dz1 = sigma (z2 - z1)`, `dz2 = z1 (rho - z3) - z2`,
/// `dz3 = z1 z2 - beta z3`, observed through a fixed randomly initialized
/// network with additive Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LorenzConfig {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub t_len: usize,
    pub dt: f64,
    pub init_box: Vec<[f64; 2]>,
    /// Observation dimension produced by the emission network.
    pub d_x: usize,
    /// Hidden widths of the emission network (tanh activations).
    pub emission_hidden: Vec<usize>,
    /// Standard deviation of the additive observation noise.
    pub emission_noise_std: f64,
}

impl Default for LorenzConfig {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            t_len: 250,
            dt: 0.02,
            init_box: vec![[-10.0, 10.0], [-10.0, 10.0], [-10.0, 10.0]],
            d_x: 10,
            emission_hidden: vec![32],
            emission_noise_std: 0.1,
        }
    }
}

/// A collection of equal-length trials with disjoint, exhaustive
/// train/validation/test index sets and provenance metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dataset {
    pub trials: Vec<Trajectory>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    /// Master seed the data was generated from (zero for ingested files).
    pub seed: u64,
    /// Digest of the generating config, for provenance checks.
    pub config_hash: String,
    /// Human-readable origin tag, e.g. `fitzhugh_nagumo` or `csv:<path>`.
    pub source: String,
}

impl Dataset {
    /// Assemble a dataset assigning the first `counts.0` trials to train,
    /// the next `counts.1` to validation, and the final `counts.2` to test.
    pub fn new(
        trials: Vec<Trajectory>,
        counts: (usize, usize, usize),
        seed: u64,
        config_hash: String,
        source: String,
    ) -> Result<Self> {
        let (n_tr, n_va, n_te) = counts;
        if n_tr + n_va + n_te != trials.len() {
            return Err(Error::Dataset(format!(
                "split counts {}+{}+{} do not sum to {} trials",
                n_tr,
                n_va,
                n_te,
                trials.len()
            )));
        }
        let ds = Self {
            trials,
            train_idx: (0..n_tr).collect(),
            val_idx: (n_tr..n_tr + n_va).collect(),
            test_idx: (n_tr + n_va..n_tr + n_va + n_te).collect(),
            seed,
            config_hash,
            source,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Check the structural invariants: split indices in range, pairwise
    /// disjoint, exhaustive, and all trials of equal length.
    pub fn validate(&self) -> Result<()> {
        let n = self.trials.len();
        if n == 0 {
            return Err(Error::Dataset("dataset has no trials".into()));
        }
        let mut seen = vec![false; n];
        for &i in self
            .train_idx
            .iter()
            .chain(self.val_idx.iter())
            .chain(self.test_idx.iter())
        {
            if i >= n {
                return Err(Error::Dataset(format!(
                    "split index {i} out of range for {n} trials"
                )));
            }
            if seen[i] {
                return Err(Error::Dataset(format!(
                    "trial {i} appears in more than one split"
                )));
            }
            seen[i] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Dataset(format!(
                "trial {missing} belongs to no split"
            )));
        }
        let t0 = self.trials[0].t_len;
        if let Some(bad) = self.trials.iter().position(|t| t.t_len != t0) {
            return Err(Error::Dataset(format!(
                "trial {bad} has length {} but trial 0 has {}",
                self.trials[bad].t_len, t0
            )));
        }
        Ok(())
    }

    pub fn t_len(&self) -> usize {
        self.trials[0].t_len
    }

    pub fn train_trials(&self) -> Vec<&Trajectory> {
        self.train_idx.iter().map(|&i| &self.trials[i]).collect()
    }

    pub fn val_trials(&self) -> Vec<&Trajectory> {
        self.val_idx.iter().map(|&i| &self.trials[i]).collect()
    }

    pub fn test_trials(&self) -> Vec<&Trajectory> {
        self.test_idx.iter().map(|&i| &self.trials[i]).collect()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self)?;
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        let ds: Self = serde_json::from_str(&s)?;
        ds.validate()?;
        Ok(ds)
    }
}

/// Default split policy: roughly 66% train, 17% validation, the rest test
/// (66/17/17 at 100 trials).
pub fn proportional_split(n: usize) -> (usize, usize, usize) {
    let tr = ((0.66 * n as f64).round() as usize).min(n);
    let va = ((0.17 * n as f64).round() as usize).min(n - tr);
    (tr, va, n - tr - va)
}

/// Stable FNV-1a digest of a config's JSON form, hex-encoded.
fn config_digest<T: Serialize>(tag: &str, cfg: &T) -> Result<String> {
    let body = serde_json::to_string(cfg)?;
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.bytes().chain(body.bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(format!("{h:016x}"))
}

fn sample_box(init_box: &[[f64; 2]], rng: &mut rand_chacha::ChaCha8Rng) -> Result<Vec<f64>> {
    init_box
        .iter()
        .map(|&[lo, hi]| {
            if !(lo <= hi) {
                return Err(Error::InvalidArgument {
                    what: "init_box",
                    why: format!("lower bound {lo} exceeds upper bound {hi}"),
                });
            }
            Ok(if lo == hi { lo } else { rng.random_range(lo..hi) })
        })
        .collect()
}

fn first_nonfinite_col(buf: &[f64], d: usize) -> Option<usize> {
    buf.iter().position(|v| !v.is_finite()).map(|p| p / d)
}

/// Simulate the FitzHugh-Nagumo system: latent `z_t = (V_t, W_t)` by RK4,
/// observation `x_t ~ N(V_t, obs_noise_var)`. Splits follow
/// [`proportional_split`].
pub fn simulate_fn(cfg: &FnConfig, n_trials: usize, seed: u64) -> Result<Dataset> {
    if cfg.t_len < 2 || n_trials == 0 || cfg.init_box.len() != 2 || cfg.obs_noise_var < 0.0 {
        return Err(Error::InvalidArgument {
            what: "FnConfig",
            why: format!(
                "need t_len >= 2, n_trials >= 1, a 2-D init box, nonnegative noise; got t_len={}, n_trials={}, dims={}, var={}",
                cfg.t_len,
                n_trials,
                cfg.init_box.len(),
                cfg.obs_noise_var
            ),
        });
    }
    let (a, b, c, i_ext) = (cfg.a, cfg.b, cfg.c, cfg.i_ext);
    let field = move |s: &[f64], d: &mut [f64]| {
        d[0] = s[0] - s[0] * s[0] * s[0] / 3.0 - s[1] + i_ext;
        d[1] = a * (b * s[0] - c * s[1]);
    };
    let noise_std = cfg.obs_noise_var.sqrt();
    let mut trials = Vec::with_capacity(n_trials);
    for trial in 0..n_trials {
        let mut init_rng = derive_rng(seed, &[stream::DATA, trial as u64, 0]);
        let init = sample_box(&cfg.init_box, &mut init_rng)?;
        let z = rk4_integrate(&field, &init, cfg.dt, cfg.t_len - 1)?;
        if let Some(t) = first_nonfinite_col(&z, 2) {
            return Err(Error::Dataset(format!(
                "fitzhugh-nagumo trial {trial} diverged at step {t}"
            )));
        }
        let mut obs_rng = derive_rng(seed, &[stream::DATA, trial as u64, 1]);
        let x: Vec<f64> = (0..cfg.t_len)
            .map(|t| {
                let v = z[2 * t];
                if cfg.obs_noise_var == 0.0 {
                    v
                } else {
                    v + noise_std * obs_rng.sample::<f64, _>(StandardNormal)
                }
            })
            .collect();
        trials.push(Trajectory::new(2, 1, cfg.t_len, z, x)?);
    }
    Dataset::new(
        trials,
        proportional_split(n_trials),
        seed,
        config_digest("fitzhugh_nagumo", cfg)?,
        "fitzhugh_nagumo".into(),
    )
}

/// The Lorenz observation map: a fixed random network living in its own
/// parameter store. [`simulate_lorenz_with_emission`] rescales its output
/// layer in place so each observation dimension has roughly unit standard
/// deviation over the generated latents.
pub struct LorenzEmission {
    pub store: ParameterStore,
    pub mlp: Mlp,
}

/// Build the (uncalibrated) Lorenz emission network for a seed. The same
/// seed always yields the same weights.
pub fn lorenz_emission_net(cfg: &LorenzConfig, seed: u64) -> Result<LorenzEmission> {
    let mut store = ParameterStore::new();
    let mut rng = derive_rng(seed, &[stream::DATA, u64::MAX]);
    let mlp = Mlp::register(
        &mut store,
        "emission",
        ParamGroup::Theta,
        MlpSpec::new(3, &cfg.emission_hidden, cfg.d_x),
        &mut rng,
    )?;
    Ok(LorenzEmission { store, mlp })
}

/// Simulate the Lorenz system with the default (seed-derived) emission
/// network.
pub fn simulate_lorenz(cfg: &LorenzConfig, n_trials: usize, seed: u64) -> Result<Dataset> {
    let mut em = lorenz_emission_net(cfg, seed)?;
    simulate_lorenz_with_emission(cfg, n_trials, seed, &mut em)
}

/// Simulate the Lorenz system through a caller-supplied emission network.
/// Calibration divides the network's final layer (rows of the last weight
/// matrix and the bias) by the per-dimension standard deviation of its raw
/// outputs over all generated latents, so observation scale is near one;
/// dimensions whose raw output is (nearly) constant are left untouched.
pub fn simulate_lorenz_with_emission(
    cfg: &LorenzConfig,
    n_trials: usize,
    seed: u64,
    em: &mut LorenzEmission,
) -> Result<Dataset> {
    if cfg.t_len < 2 || n_trials == 0 || cfg.init_box.len() != 3 || cfg.d_x == 0 {
        return Err(Error::InvalidArgument {
            what: "LorenzConfig",
            why: format!(
                "need t_len >= 2, n_trials >= 1, a 3-D init box, d_x >= 1; got t_len={}, n_trials={}, dims={}, d_x={}",
                cfg.t_len,
                n_trials,
                cfg.init_box.len(),
                cfg.d_x
            ),
        });
    }
    let (sigma, rho, beta) = (cfg.sigma, cfg.rho, cfg.beta);
    let field = move |s: &[f64], d: &mut [f64]| {
        d[0] = sigma * (s[1] - s[0]);
        d[1] = s[0] * (rho - s[2]) - s[1];
        d[2] = s[0] * s[1] - beta * s[2];
    };
    let mut latents = Vec::with_capacity(n_trials);
    for trial in 0..n_trials {
        let mut init_rng = derive_rng(seed, &[stream::DATA, trial as u64, 0]);
        let init = sample_box(&cfg.init_box, &mut init_rng)?;
        let z = rk4_integrate(&field, &init, cfg.dt, cfg.t_len - 1)?;
        if let Some(t) = first_nonfinite_col(&z, 3) {
            return Err(Error::Dataset(format!(
                "lorenz trial {trial} diverged at step {t}"
            )));
        }
        latents.push(z);
    }

    // Calibrate the final layer against the raw output spread.
    let n_total = n_trials * cfg.t_len;
    let mut all_z = Vec::with_capacity(3 * n_total);
    for z in &latents {
        all_z.extend_from_slice(z);
    }
    let raw = em.mlp.forward_host(&em.store, &all_z, n_total);
    let d_x = cfg.d_x;
    let mut scale = vec![1.0_f64; d_x];
    for dim in 0..d_x {
        let mean = (0..n_total).map(|c| raw[c * d_x + dim]).sum::<f64>() / n_total as f64;
        let var = (0..n_total)
            .map(|c| (raw[c * d_x + dim] - mean).powi(2))
            .sum::<f64>()
            / n_total as f64;
        let sd = var.sqrt();
        if sd > 1e-8 {
            scale[dim] = sd;
        }
    }
    let last = cfg.emission_hidden.len();
    let w_id = em.store.id_of(&format!("emission.w{last}"))?;
    let b_id = em.store.id_of(&format!("emission.b{last}"))?;
    let (rows, cols) = em.store.shape(w_id);
    {
        let w = em.store.values_mut(w_id);
        for j in 0..cols {
            for (dim, s) in scale.iter().enumerate().take(rows) {
                w[j * rows + dim] /= s;
            }
        }
    }
    {
        let bias = em.store.values_mut(b_id);
        for (dim, s) in scale.iter().enumerate() {
            bias[dim] /= s;
        }
    }

    let mut trials = Vec::with_capacity(n_trials);
    for (trial, z) in latents.into_iter().enumerate() {
        let means = em.mlp.forward_host(&em.store, &z, cfg.t_len);
        let mut obs_rng = derive_rng(seed, &[stream::DATA, trial as u64, 1]);
        let x: Vec<f64> = means
            .iter()
            .map(|m| m + cfg.emission_noise_std * obs_rng.sample::<f64, _>(StandardNormal))
            .collect();
        trials.push(Trajectory::new(3, d_x, cfg.t_len, z, x)?);
    }
    Dataset::new(
        trials,
        proportional_split(n_trials),
        seed,
        config_digest("lorenz", cfg)?,
        "lorenz".into(),
    )
}

/// Preprocessing options for [`ingest_csv`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    /// Target length after equal-interval striding, applied per segment.
    pub downsample_to: Option<usize>,
    /// Number of equal segments each CSV row is divided into (each segment
    /// becomes its own trial). A remainder shorter than a segment is dropped.
    pub segments_per_trial: usize,
    /// Divide each trial by its maximum absolute value.
    pub normalize: bool,
    /// Explicit (train, val, test) counts; must sum to the number of trials.
    /// `None` applies [`proportional_split`].
    pub split: Option<(usize, usize, usize)>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            downsample_to: None,
            segments_per_trial: 1,
            normalize: true,
            split: None,
        }
    }
}

/// Read a CSV of one-dimensional series (one trial per row; a single-row
/// file is one trial), then segment, stride-downsample, and normalize per
/// [`IngestConfig`]. Rows must be numeric and equally long.
pub fn ingest_csv(path: &Path, cfg: &IngestConfig) -> Result<Dataset> {
    if cfg.segments_per_trial == 0 {
        return Err(Error::InvalidArgument {
            what: "IngestConfig",
            why: "segments_per_trial must be at least 1".into(),
        });
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Dataset(format!("cannot open csv: {e}")))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Dataset(format!("csv read failed: {e}")))?;
        let mut vals = Vec::with_capacity(record.len());
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::Dataset(format!("non-numeric cell at row {r}, column {c}: {cell:?}"))
            })?;
            vals.push(v);
        }
        if let Some(first) = rows.first() {
            if vals.len() != first.len() {
                return Err(Error::Dataset(format!(
                    "ragged csv: row {r} has {} cells but row 0 has {}",
                    vals.len(),
                    first.len()
                )));
            }
        }
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(Error::Dataset("csv contains no rows".into()));
    }

    let mut trials = Vec::new();
    for (r, row) in rows.iter().enumerate() {
        let seg_len = row.len() / cfg.segments_per_trial;
        if seg_len < 2 {
            return Err(Error::Dataset(format!(
                "row {r} with {} cells cannot be divided into {} segments of usable length",
                row.len(),
                cfg.segments_per_trial
            )));
        }
        for s in 0..cfg.segments_per_trial {
            let seg = &row[s * seg_len..(s + 1) * seg_len];
            let mut vals: Vec<f64> = match cfg.downsample_to {
                None => seg.to_vec(),
                Some(m) => {
                    if m < 2 || m > seg_len {
                        return Err(Error::InvalidArgument {
                            what: "IngestConfig",
                            why: format!(
                                "downsample_to={} must be in [2, segment length {}]",
                                m, seg_len
                            ),
                        });
                    }
                    let stride = seg_len / m;
                    (0..m).map(|j| seg[j * stride]).collect()
                }
            };
            if cfg.normalize {
                let max_abs = vals.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
                if max_abs == 0.0 {
                    return Err(Error::Dataset(format!(
                        "segment {s} of row {r} is identically zero; cannot normalize"
                    )));
                }
                for v in &mut vals {
                    *v /= max_abs;
                }
            }
            let t_len = vals.len();
            trials.push(Trajectory::new(0, 1, t_len, Vec::new(), vals)?);
        }
    }

    let n = trials.len();
    let counts = match cfg.split {
        Some(counts) => counts,
        None => proportional_split(n),
    };
    Dataset::new(
        trials,
        counts,
        0,
        config_digest("csv", cfg)?,
        format!("csv:{}", path.display()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(v: &[f64]) -> Vec<u64> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    /// Endpoint error of the integrator should shrink ~16x when dt halves.
    #[test]
    fn rk4_is_fourth_order_on_both_systems() {
        let fn_field = |s: &[f64], d: &mut [f64]| {
            d[0] = s[0] - s[0].powi(3) / 3.0 - s[1] + 1.0;
            d[1] = 0.7 * (0.8 * s[0] - 0.08 * s[1]);
        };
        let lorenz_field = |s: &[f64], d: &mut [f64]| {
            d[0] = 10.0 * (s[1] - s[0]);
            d[1] = s[0] * (28.0 - s[2]) - s[1];
            d[2] = s[0] * s[1] - 8.0 / 3.0 * s[2];
        };
        let cases: Vec<(Vec<f64>, f64, usize, Box<dyn Fn(&[f64], &mut [f64])>)> = vec![
            (vec![-1.0, 0.5], 0.1, 40, Box::new(fn_field)),
            (vec![1.0, 2.0, 3.0], 0.005, 40, Box::new(lorenz_field)),
        ];
        for (init, dt, steps, f) in cases {
            let endpoint = |dt: f64, steps: usize| {
                let traj = rk4_integrate(&f, &init, dt, steps).unwrap();
                traj[traj.len() - init.len()..].to_vec()
            };
            let reference = endpoint(dt / 16.0, steps * 16);
            let err = |sol: &[f64]| {
                sol.iter()
                    .zip(&reference)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            let e1 = err(&endpoint(dt, steps));
            let e2 = err(&endpoint(dt / 2.0, steps * 2));
            let ratio = e1 / e2;
            assert!(
                (13.0..19.0).contains(&ratio),
                "expected ~16x error reduction, got {ratio} (e1={e1:.3e}, e2={e2:.3e})"
            );
        }
    }

    #[test]
    fn fn_defaults_produce_paper_scale_dataset() {
        let ds = simulate_fn(&FnConfig::default(), 100, 7).unwrap();
        assert_eq!(ds.trials.len(), 100);
        assert_eq!(ds.train_idx.len(), 66);
        assert_eq!(ds.val_idx.len(), 17);
        assert_eq!(ds.test_idx.len(), 17);
        ds.validate().unwrap();
        for tr in &ds.trials {
            assert_eq!(tr.t_len, 200);
            assert_eq!(tr.d_z, 2);
            assert_eq!(tr.d_x, 1);
        }
        // The oscillator settles onto a limit cycle; voltages stay bounded.
        let max_v = ds
            .trials
            .iter()
            .flat_map(|t| t.x.iter())
            .fold(0.0_f64, |acc, v| acc.max(v.abs()));
        assert!(max_v < 5.0, "voltage observations unexpectedly large: {max_v}");
    }

    /// Find the fixed point of the zero-input vector field by Newton's
    /// method, then verify the simulated trajectory stays on it.
    #[test]
    fn fn_trajectory_is_constant_at_numerically_found_fixed_point() {
        let (a, b, c) = (0.7, 0.8, 0.08);
        let f = |v: f64, w: f64| (v - v.powi(3) / 3.0 - w, a * (b * v - c * w));
        let mut v = 0.25_f64;
        let mut w = 0.2_f64;
        for _ in 0..100 {
            let (f1, f2) = f(v, w);
            // Jacobian [[1 - v^2, -1], [ab, -ac]], solved exactly.
            let (j11, j12, j21, j22) = (1.0 - v * v, -1.0, a * b, -a * c);
            let det = j11 * j22 - j12 * j21;
            v -= (f1 * j22 - f2 * j12) / det;
            w -= (f2 * j11 - f1 * j21) / det;
        }
        let (r1, r2) = f(v, w);
        assert!(r1.abs() < 1e-12 && r2.abs() < 1e-12, "Newton did not converge");

        let cfg = FnConfig {
            i_ext: 0.0,
            init_box: vec![[v, v], [w, w]],
            obs_noise_var: 0.0,
            ..FnConfig::default()
        };
        let ds = simulate_fn(&cfg, 1, 1).unwrap();
        let tr = &ds.trials[0];
        for t in 0..tr.t_len {
            assert!((tr.z_col(t)[0] - v).abs() < 1e-9);
            assert!((tr.z_col(t)[1] - w).abs() < 1e-9);
        }
    }

    #[test]
    fn fn_noiseless_observation_equals_voltage() {
        let cfg = FnConfig {
            obs_noise_var: 0.0,
            t_len: 50,
            ..FnConfig::default()
        };
        let ds = simulate_fn(&cfg, 3, 11).unwrap();
        for tr in &ds.trials {
            for t in 0..tr.t_len {
                assert_eq!(tr.x_col(t)[0].to_bits(), tr.z_col(t)[0].to_bits());
            }
        }
    }

    /// With sigma = rho = 0 and a start on the z3 axis, the third coordinate
    /// decays exactly exponentially at rate beta.
    #[test]
    fn lorenz_beta_term_matches_closed_form_decay() {
        let cfg = LorenzConfig {
            sigma: 0.0,
            rho: 0.0,
            t_len: 51,
            init_box: vec![[0.0, 0.0], [0.0, 0.0], [8.0, 8.0]],
            ..LorenzConfig::default()
        };
        let ds = simulate_lorenz(&cfg, 1, 5).unwrap();
        let tr = &ds.trials[0];
        let beta = 8.0 / 3.0;
        for t in 0..tr.t_len {
            let z = tr.z_col(t);
            assert_eq!(z[0], 0.0);
            assert_eq!(z[1], 0.0);
            let exact = 8.0 * (-beta * cfg.dt * t as f64).exp();
            assert!(
                (z[2] - exact).abs() < 1e-6,
                "t={t}: rk4 {} vs closed form {exact}",
                z[2]
            );
        }
    }

    #[test]
    fn lorenz_zero_weight_emission_reduces_to_bias_plus_noise() {
        let cfg = LorenzConfig {
            t_len: 100,
            ..LorenzConfig::default()
        };
        let mut em = lorenz_emission_net(&cfg, 3).unwrap();
        for i in 0..2 {
            let id = em.store.id_of(&format!("emission.w{i}")).unwrap();
            let n = em.store.values(id).len();
            em.store.set_values(id, &vec![0.0; n]).unwrap();
        }
        let bias: Vec<f64> = (0..cfg.d_x).map(|d| 0.5 - 0.2 * d as f64).collect();
        let b_id = em.store.id_of("emission.b1").unwrap();
        em.store.set_values(b_id, &bias).unwrap();

        let ds = simulate_lorenz_with_emission(&cfg, 3, 3, &mut em).unwrap();
        let n_cols = 3 * cfg.t_len;
        for d in 0..cfg.d_x {
            let vals: Vec<f64> = ds
                .trials
                .iter()
                .flat_map(|tr| (0..tr.t_len).map(move |t| tr.x_col(t)[d]))
                .collect();
            let mean = vals.iter().sum::<f64>() / n_cols as f64;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                / (n_cols - 1) as f64)
                .sqrt();
            assert!(
                (mean - bias[d]).abs() < 0.03,
                "dim {d}: mean {mean} vs bias {}",
                bias[d]
            );
            assert!((0.08..0.12).contains(&sd), "dim {d}: noise std {sd}");
        }
    }

    #[test]
    fn lorenz_defaults_are_calibrated_to_unit_observation_scale() {
        let ds = simulate_lorenz(&LorenzConfig::default(), 100, 4).unwrap();
        assert_eq!(ds.trials.len(), 100);
        assert_eq!(ds.train_idx.len(), 66);
        assert_eq!(ds.val_idx.len(), 17);
        assert_eq!(ds.test_idx.len(), 17);
        let d_x = 10;
        for tr in &ds.trials {
            assert_eq!(tr.t_len, 250);
            assert_eq!(tr.d_z, 3);
            assert_eq!(tr.d_x, d_x);
        }
        let n_cols = 100 * 250;
        for d in 0..d_x {
            let vals: Vec<f64> = ds
                .trials
                .iter()
                .flat_map(|tr| (0..tr.t_len).map(move |t| tr.x_col(t)[d]))
                .collect();
            let mean = vals.iter().sum::<f64>() / n_cols as f64;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n_cols as f64)
                .sqrt();
            assert!(
                (0.9..1.1).contains(&sd),
                "dim {d}: observation std {sd} not near 1"
            );
        }
    }

    fn write_csv(name: &str, rows: &[Vec<f64>]) -> std::path::PathBuf {
        let path = std::env::temp_dir().join(name);
        let body: Vec<String> = rows
            .iter()
            .map(|r| {
                r.iter()
                    .map(|v| format!("{v}"))
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect();
        std::fs::write(&path, body.join("\n")).unwrap();
        path
    }

    #[test]
    fn ingest_strides_ten_thousand_down_to_one_thousand() {
        let row: Vec<f64> = (0..10_000).map(|i| i as f64).collect();
        let path = write_csv("systems_stride.csv", &[row]);
        let cfg = IngestConfig {
            downsample_to: Some(1000),
            normalize: false,
            ..IngestConfig::default()
        };
        let ds = ingest_csv(&path, &cfg).unwrap();
        assert_eq!(ds.trials.len(), 1);
        let tr = &ds.trials[0];
        assert_eq!(tr.t_len, 1000);
        for j in 0..1000 {
            assert_eq!(tr.x[j], (10 * j) as f64);
        }
    }

    #[test]
    fn ingest_normalizes_constant_trial_to_one() {
        let path = write_csv("systems_const.csv", &[vec![2.0; 40]]);
        let ds = ingest_csv(&path, &IngestConfig::default()).unwrap();
        assert!(ds.trials[0].x.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ingest_segments_divide_rows_into_trials() {
        let row: Vec<f64> = (0..100).map(|i| 1.0 + i as f64).collect();
        let path = write_csv("systems_segs.csv", &[row.clone()]);
        let cfg = IngestConfig {
            segments_per_trial: 5,
            normalize: false,
            ..IngestConfig::default()
        };
        let ds = ingest_csv(&path, &cfg).unwrap();
        assert_eq!(ds.trials.len(), 5);
        for (s, tr) in ds.trials.iter().enumerate() {
            assert_eq!(tr.t_len, 20);
            assert_eq!(tr.x, row[s * 20..(s + 1) * 20].to_vec());
        }
    }

    #[test]
    fn ingest_applies_explicit_split_counts() {
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|r| (0..50).map(|i| (r * 50 + i) as f64 + 1.0).collect())
            .collect();
        let path = write_csv("systems_split.csv", &rows);
        let cfg = IngestConfig {
            split: Some((30, 10, 0)),
            ..IngestConfig::default()
        };
        let ds = ingest_csv(&path, &cfg).unwrap();
        assert_eq!(ds.train_idx.len(), 30);
        assert_eq!(ds.val_idx.len(), 10);
        assert!(ds.test_idx.is_empty());
        ds.validate().unwrap();
    }

    #[test]
    fn ingest_rejects_malformed_input() {
        let ragged = write_csv("systems_ragged.csv", &[vec![1.0; 5], vec![1.0; 6]]);
        assert!(matches!(
            ingest_csv(&ragged, &IngestConfig::default()),
            Err(Error::Dataset(_))
        ));

        let path = std::env::temp_dir().join("systems_nonnum.csv");
        std::fs::write(&path, "1.0,2.0,abc,4.0").unwrap();
        let err = ingest_csv(&path, &IngestConfig::default()).unwrap_err();
        assert!(err.to_string().contains("non-numeric"), "{err}");

        let zeros = write_csv("systems_zeros.csv", &[vec![0.0; 10]]);
        let err = ingest_csv(&zeros, &IngestConfig::default()).unwrap_err();
        assert!(err.to_string().contains("cannot normalize"), "{err}");

        let short = write_csv("systems_short.csv", &[vec![1.0; 10]]);
        let cfg = IngestConfig {
            downsample_to: Some(11),
            ..IngestConfig::default()
        };
        assert!(ingest_csv(&short, &cfg).is_err());

        let bad_split = IngestConfig {
            split: Some((2, 1, 1)),
            ..IngestConfig::default()
        };
        let one = write_csv("systems_onerow.csv", &[vec![1.0; 10]]);
        assert!(ingest_csv(&one, &bad_split).is_err());
    }

    #[test]
    fn datasets_are_bit_reproducible_from_seed_and_config() {
        let a = simulate_fn(&FnConfig::default(), 8, 21).unwrap();
        let b = simulate_fn(&FnConfig::default(), 8, 21).unwrap();
        let c = simulate_fn(&FnConfig::default(), 8, 22).unwrap();
        for (ta, tb) in a.trials.iter().zip(&b.trials) {
            assert_eq!(bits(&ta.z), bits(&tb.z));
            assert_eq!(bits(&ta.x), bits(&tb.x));
        }
        assert_ne!(bits(&a.trials[0].z), bits(&c.trials[0].z));

        let la = simulate_lorenz(&LorenzConfig { t_len: 30, ..Default::default() }, 4, 9).unwrap();
        let lb = simulate_lorenz(&LorenzConfig { t_len: 30, ..Default::default() }, 4, 9).unwrap();
        for (ta, tb) in la.trials.iter().zip(&lb.trials) {
            assert_eq!(bits(&ta.x), bits(&tb.x));
        }
        assert_eq!(la.config_hash, lb.config_hash);
        assert_eq!(a.config_hash, b.config_hash);
        assert_ne!(a.config_hash, la.config_hash);
    }

    #[test]
    fn dataset_round_trips_bit_exactly_through_json() {
        let cfg = FnConfig {
            t_len: 20,
            ..FnConfig::default()
        };
        let ds = simulate_fn(&cfg, 5, 13).unwrap();
        let path = std::env::temp_dir().join("systems_roundtrip.json");
        ds.save_json(&path).unwrap();
        let back = Dataset::load_json(&path).unwrap();
        assert_eq!(ds.trials.len(), back.trials.len());
        for (ta, tb) in ds.trials.iter().zip(&back.trials) {
            assert_eq!(bits(&ta.z), bits(&tb.z));
            assert_eq!(bits(&ta.x), bits(&tb.x));
            assert_eq!((ta.d_z, ta.d_x, ta.t_len), (tb.d_z, tb.d_x, tb.t_len));
        }
        assert_eq!(ds.train_idx, back.train_idx);
        assert_eq!(ds.val_idx, back.val_idx);
        assert_eq!(ds.test_idx, back.test_idx);
        assert_eq!(ds.seed, back.seed);
        assert_eq!(ds.config_hash, back.config_hash);
        assert_eq!(ds.source, back.source);
    }

    #[test]
    fn dataset_invariants_reject_bad_splits() {
        let cfg = FnConfig {
            t_len: 10,
            ..FnConfig::default()
        };
        let ds = simulate_fn(&cfg, 6, 2).unwrap();
        assert!(Dataset::new(ds.trials.clone(), (6, 1, 0), 0, String::new(), String::new()).is_err());

        let mut broken = ds.clone();
        broken.val_idx = broken.train_idx.clone();
        assert!(broken.validate().is_err());

        let mut gappy = ds.clone();
        gappy.test_idx.clear();
        assert!(gappy.validate().is_err());
    }
}
