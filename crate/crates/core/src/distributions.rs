//! Reparameterized distributions on the tape.
//!
//! Diagonal Gaussians are the workhorse: means may be batched column-wise
//! (one column per particle) while `log_std` is always a single column, so
//! one node evaluates a whole particle population. The batched log-density
//! and mixture log-density are fused [`CustomOp`]s with hand-derived
//! adjoints; everything else composes from primitives.
//!
//! Full-covariance Gaussians route through three small dense ops (Cholesky
//! factor, SPD inverse, quadratic form plus log-determinant). They symmetrize
//! their input and add a diagonal jitter chosen at node-creation time by
//! doubling from 1e-6 until the factorization succeeds, capped at 1e-2.
//!
//! Categorical sampling is inverse-CDF with a single uniform and strict `<`.
//! Concrete (Gumbel-softmax) sampling tempers the Gumbel-perturbed log
//! weights; the hard index is the Gumbel-argmax of the same perturbation, so
//! hard and relaxed outcomes are coupled.

use std::cell::RefCell;

use crate::diffmath::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::DrawSource;

pub const LN_2PI: f64 = 1.8378770664093453;
pub const HALF_LN_2PI: f64 = 0.9189385332046727;

/// Floor for log weights before they are exponentiated into resampling
/// probabilities; `exp(-745)` is the smallest positive normal magnitude.
pub const LOG_WEIGHT_FLOOR: f64 = -745.0;

const JITTER_START: f64 = 1e-6;
const JITTER_CAP: f64 = 1e-2;

/// Diagonal Gaussian with tape-resident parameters. `mean` is `(d, m)` with
/// `m` either 1 or the batch width; `log_std` is `(d, 1)`.
#[derive(Clone, Copy)]
pub struct DiagGaussian {
    pub mean: Var,
    pub log_std: Var,
}

impl DiagGaussian {
    pub fn new(mean: Var, log_std: Var) -> Result<Self> {
        if log_std.cols() != 1 || mean.rows() != log_std.rows() {
            return Err(Error::ShapeMismatch {
                op: "DiagGaussian::new",
                lhs: mean.shape(),
                rhs: log_std.shape(),
            });
        }
        Ok(Self { mean, log_std })
    }

    pub fn dim(&self) -> usize {
        self.mean.rows()
    }

    /// Reparameterized sample of `n` columns: `mean + exp(log_std) * eps`.
    /// Noise enters as a constant leaf, filled column-major from `source`.
    pub fn rsample(
        &self,
        tape: &mut Tape,
        source: &mut dyn DrawSource,
        n: usize,
    ) -> Result<Var> {
        let d = self.dim();
        let noise = source.normals(d * n)?;
        let eps = tape.leaf(d, n, &noise)?;
        self.rsample_from_noise(tape, eps)
    }

    /// Reparameterized sample from explicit standard-normal noise `(d, n)`.
    pub fn rsample_from_noise(&self, tape: &mut Tape, noise: Var) -> Result<Var> {
        if noise.rows() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "rsample_from_noise",
                lhs: noise.shape(),
                rhs: self.mean.shape(),
            });
        }
        let std = tape.exp(self.log_std);
        let scaled = tape.mul_cols(noise, std)?;
        if self.mean.cols() == noise.cols() {
            tape.add(scaled, self.mean)
        } else if self.mean.cols() == 1 {
            tape.add_cols(scaled, self.mean)
        } else {
            Err(Error::ShapeMismatch {
                op: "rsample_from_noise",
                lhs: noise.shape(),
                rhs: self.mean.shape(),
            })
        }
    }

    /// Column-wise log density of `x` `(d, nx)` as an `(n, 1)` vector where
    /// `n = max(nx, mean cols)`; whichever of `x`/`mean` has one column is
    /// broadcast against the other.
    pub fn log_pdf(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let op = DiagLogPdfCols::plan(x.shape(), self.mean.shape(), self.log_std.shape())?;
        tape.custom(Box::new(op), &[x, self.mean, self.log_std])
    }
}

/// Fused column-wise diagonal Gaussian log density.
#[derive(Debug)]
struct DiagLogPdfCols {
    d: usize,
    nx: usize,
    nm: usize,
}

impl DiagLogPdfCols {
    fn plan(x: (usize, usize), mean: (usize, usize), log_std: (usize, usize)) -> Result<Self> {
        let (d, nx) = x;
        let (dm, nm) = mean;
        if dm != d || log_std != (d, 1) || (nx != nm && nx != 1 && nm != 1) {
            return Err(Error::ShapeMismatch {
                op: "diag_log_pdf",
                lhs: x,
                rhs: mean,
            });
        }
        Ok(Self { d, nx, nm })
    }

    fn n(&self) -> usize {
        self.nx.max(self.nm)
    }
}

impl CustomOp for DiagLogPdfCols {
    fn name(&self) -> &'static str {
        "diag_log_pdf_cols"
    }

    fn out_shape(&self, _inputs: &[(usize, usize)]) -> Result<(usize, usize)> {
        Ok((self.n(), 1))
    }

    fn forward(&self, inputs: &[&[f64]], out: &mut [f64]) -> Result<()> {
        let (x, mean, log_std) = (inputs[0], inputs[1], inputs[2]);
        let d = self.d;
        let mut base = -(d as f64) * HALF_LN_2PI;
        let mut inv_std = vec![0.0; d];
        for i in 0..d {
            base -= log_std[i];
            inv_std[i] = (-log_std[i]).exp();
        }
        for c in 0..self.n() {
            let xc = &x[c.min(self.nx - 1) * d..][..d];
            let mc = &mean[c.min(self.nm - 1) * d..][..d];
            let mut q = 0.0;
            for i in 0..d {
                let z = (xc[i] - mc[i]) * inv_std[i];
                q += z * z;
            }
            out[c] = base - 0.5 * q;
        }
        Ok(())
    }

    fn backward_input(
        &self,
        which: usize,
        inputs: &[&[f64]],
        _primal: &[f64],
        grad_out: &[f64],
        grad_in: &mut [f64],
    ) {
        let (x, mean, log_std) = (inputs[0], inputs[1], inputs[2]);
        let d = self.d;
        let inv_var: Vec<f64> = (0..d).map(|i| (-2.0 * log_std[i]).exp()).collect();
        for c in 0..self.n() {
            let g = grad_out[c];
            if g == 0.0 {
                continue;
            }
            let cx = c.min(self.nx - 1);
            let cm = c.min(self.nm - 1);
            let xc = &x[cx * d..][..d];
            let mc = &mean[cm * d..][..d];
            match which {
                0 => {
                    for i in 0..d {
                        grad_in[cx * d + i] -= g * (xc[i] - mc[i]) * inv_var[i];
                    }
                }
                1 => {
                    for i in 0..d {
                        grad_in[cm * d + i] += g * (xc[i] - mc[i]) * inv_var[i];
                    }
                }
                2 => {
                    for i in 0..d {
                        let diff = xc[i] - mc[i];
                        grad_in[i] += g * (diff * diff * inv_var[i] - 1.0);
                    }
                }
                _ => unreachable!(),
            }
        }
    }
}

/// Fused log density of a `K`-component diagonal-Gaussian mixture with shared
/// `log_std`, evaluated column-wise over `x` `(d, n)`:
/// `out[c] = lse_j(log_wbar[j] + log N(x[:,c]; comps[:,j], diag))`.
///
/// The component responsibilities are cached on first backward use and reused
/// across the remaining input slots of the same sweep.
#[derive(Debug)]
struct MixtureDiagLogPdfCols {
    d: usize,
    k: usize,
    n: usize,
    resp: RefCell<Option<Vec<f64>>>,
}

impl CustomOp for MixtureDiagLogPdfCols {
    fn name(&self) -> &'static str {
        "mixture_diag_log_pdf_cols"
    }

    fn out_shape(&self, _inputs: &[(usize, usize)]) -> Result<(usize, usize)> {
        Ok((self.n, 1))
    }

    fn forward(&self, inputs: &[&[f64]], out: &mut [f64]) -> Result<()> {
        let (x, comps, log_wbar, log_std) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let (d, k) = (self.d, self.k);
        let mut base = -(d as f64) * HALF_LN_2PI;
        let mut inv_std = vec![0.0; d];
        for i in 0..d {
            base -= log_std[i];
            inv_std[i] = (-log_std[i]).exp();
        }
        let mut terms = vec![0.0; k];
        for c in 0..self.n {
            let xc = &x[c * d..][..d];
            let mut m = f64::NEG_INFINITY;
            for j in 0..k {
                let mj = &comps[j * d..][..d];
                let mut q = 0.0;
                for i in 0..d {
                    let z = (xc[i] - mj[i]) * inv_std[i];
                    q += z * z;
                }
                let t = log_wbar[j] - 0.5 * q;
                terms[j] = t;
                m = m.max(t);
            }
            if !m.is_finite() {
                return Err(Error::Numerical {
                    what: "mixture_diag_log_pdf",
                    why: "all mixture terms vanished or input is NaN".into(),
                });
            }
            let s: f64 = terms.iter().map(|&t| (t - m).exp()).sum();
            out[c] = base + m + s.ln();
        }
        Ok(())
    }

    fn backward_input(
        &self,
        which: usize,
        inputs: &[&[f64]],
        primal: &[f64],
        grad_out: &[f64],
        grad_in: &mut [f64],
    ) {
        let (x, comps, log_wbar, log_std) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let (d, k, n) = (self.d, self.k, self.n);
        let mut base = -(d as f64) * HALF_LN_2PI;
        let mut inv_std = vec![0.0; d];
        let mut inv_var = vec![0.0; d];
        for i in 0..d {
            base -= log_std[i];
            inv_std[i] = (-log_std[i]).exp();
            inv_var[i] = inv_std[i] * inv_std[i];
        }

        let mut cache = self.resp.borrow_mut();
        if cache.is_none() {
            let mut resp = vec![0.0; n * k];
            for c in 0..n {
                let xc = &x[c * d..][..d];
                for j in 0..k {
                    let mj = &comps[j * d..][..d];
                    let mut q = 0.0;
                    for i in 0..d {
                        let z = (xc[i] - mj[i]) * inv_std[i];
                        q += z * z;
                    }
                    // primal[c] = base + lse, so this exponent is t_j - lse.
                    resp[c * k + j] = (log_wbar[j] - 0.5 * q + base - primal[c]).exp();
                }
            }
            *cache = Some(resp);
        }
        let resp = cache.as_ref().expect("cache filled above");

        for c in 0..n {
            let g = grad_out[c];
            if g == 0.0 {
                continue;
            }
            let xc = &x[c * d..][..d];
            match which {
                0 => {
                    for j in 0..k {
                        let r = resp[c * k + j];
                        if r == 0.0 {
                            continue;
                        }
                        let mj = &comps[j * d..][..d];
                        for i in 0..d {
                            grad_in[c * d + i] -= g * r * (xc[i] - mj[i]) * inv_var[i];
                        }
                    }
                }
                1 => {
                    for j in 0..k {
                        let r = resp[c * k + j];
                        if r == 0.0 {
                            continue;
                        }
                        let mj = &comps[j * d..][..d];
                        for i in 0..d {
                            grad_in[j * d + i] += g * r * (xc[i] - mj[i]) * inv_var[i];
                        }
                    }
                }
                2 => {
                    for j in 0..k {
                        grad_in[j] += g * resp[c * k + j];
                    }
                }
                3 => {
                    for j in 0..k {
                        let r = resp[c * k + j];
                        if r == 0.0 {
                            continue;
                        }
                        let mj = &comps[j * d..][..d];
                        for i in 0..d {
                            let diff = xc[i] - mj[i];
                            grad_in[i] += g * r * (diff * diff * inv_var[i] - 1.0);
                        }
                    }
                }
                _ => unreachable!(),
            }
        }
    }
}

/// Column-wise mixture log density; see [`MixtureDiagLogPdfCols`].
pub fn mixture_diag_log_pdf(
    tape: &mut Tape,
    x: Var,
    comps: Var,
    log_wbar: Var,
    log_std: Var,
) -> Result<Var> {
    let d = x.rows();
    let k = comps.cols();
    if comps.rows() != d
        || log_wbar.shape() != (k, 1)
        || log_std.shape() != (d, 1)
    {
        return Err(Error::ShapeMismatch {
            op: "mixture_diag_log_pdf",
            lhs: comps.shape(),
            rhs: x.shape(),
        });
    }
    let op = MixtureDiagLogPdfCols {
        d,
        k,
        n: x.cols(),
        resp: RefCell::new(None),
    };
    tape.custom(Box::new(op), &[x, comps, log_wbar, log_std])
}

/// Precision-weighted product of two diagonal Gaussians, normalized:
/// `N(mu_a, S_a) * N(mu_b, S_b) ∝ N(mu_p, S_p)` with
/// `S_p⁻¹ = S_a⁻¹ + S_b⁻¹` and `mu_p = S_p (S_a⁻¹ mu_a + S_b⁻¹ mu_b)`.
/// Means may be batched; at most one of the two may have more than one
/// column.
pub fn diag_product(tape: &mut Tape, a: DiagGaussian, b: DiagGaussian) -> Result<DiagGaussian> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            op: "diag_product",
            lhs: a.mean.shape(),
            rhs: b.mean.shape(),
        });
    }
    let neg2a = tape.scalar_mul(a.log_std, -2.0);
    let prec_a = tape.exp(neg2a);
    let neg2b = tape.scalar_mul(b.log_std, -2.0);
    let prec_b = tape.exp(neg2b);
    let prec = tape.add(prec_a, prec_b)?;
    let log_prec = tape.log(prec);
    let log_std = tape.scalar_mul(log_prec, -0.5);

    let ta = tape.mul_cols(a.mean, prec_a)?;
    let tb = tape.mul_cols(b.mean, prec_b)?;
    let weighted = match (a.mean.cols(), b.mean.cols()) {
        (x, y) if x == y => tape.add(ta, tb)?,
        (_, 1) => tape.add_cols(ta, tb)?,
        (1, _) => tape.add_cols(tb, ta)?,
        _ => {
            return Err(Error::ShapeMismatch {
                op: "diag_product",
                lhs: a.mean.shape(),
                rhs: b.mean.shape(),
            })
        }
    };
    let inv_prec = tape.div_by_col(weighted, prec)?;
    DiagGaussian::new(inv_prec, log_std)
}

impl Tape {
    /// `mat / col` with the `(r, 1)` column broadcast, via a reciprocal.
    fn div_by_col(&mut self, mat: Var, col: Var) -> Result<Var> {
        let lc = self.log(col);
        let nl = self.neg(lc);
        let recip = self.exp(nl);
        self.mul_cols(mat, recip)
    }
}

/// Validated categorical draw from normalized probabilities.
pub fn categorical_sample(probs: &[f64], source: &mut dyn DrawSource) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument {
            what: "categorical_sample",
            why: "empty probability vector".into(),
        });
    }
    let mut sum = 0.0;
    for &p in probs {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::InvalidArgument {
                what: "categorical_sample",
                why: format!("invalid probability {p}"),
            });
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument {
            what: "categorical_sample",
            why: format!("probabilities sum to {sum}, expected 1"),
        });
    }
    source.categorical(probs)
}

/// A tempered-softmax (Concrete) draw over `K` categories.
pub struct ConcreteSample {
    /// Relaxed one-hot `(K, 1)`, on the simplex.
    pub relaxed: Var,
    /// `log(relaxed)`, kept separately for density evaluation.
    pub log_relaxed: Var,
    /// Gumbel-argmax index, coupled to the relaxation through shared Gumbels.
    pub hard: usize,
    pub lambda: f64,
}

/// Draw a Concrete sample from normalized log weights `(K, 1)`.
pub fn concrete_rsample(
    tape: &mut Tape,
    log_wbar: Var,
    lambda: f64,
    source: &mut dyn DrawSource,
) -> Result<ConcreteSample> {
    if log_wbar.cols() != 1 {
        return Err(Error::BadShape {
            op: "concrete_rsample",
            expected: "a single-column vector",
            got: log_wbar.shape(),
        });
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument {
            what: "concrete_rsample",
            why: format!("temperature must be positive, got {lambda}"),
        });
    }
    let k = log_wbar.rows();
    let mut gumbels = vec![0.0; k];
    for g in gumbels.iter_mut() {
        *g = source.gumbel()?;
    }
    let (mut hard, mut best) = (0usize, f64::NEG_INFINITY);
    for (j, (&lw, &g)) in tape.value(log_wbar).iter().zip(&gumbels).enumerate() {
        if lw + g > best {
            best = lw + g;
            hard = j;
        }
    }
    let g = tape.leaf(k, 1, &gumbels)?;
    let perturbed = tape.add(log_wbar, g)?;
    let tempered = tape.scalar_mul(perturbed, 1.0 / lambda);
    let lse = tape.logsumexp(tempered)?;
    let neg_lse = tape.neg(lse);
    let log_relaxed = tape.add_scalar_node(tempered, neg_lse)?;
    let relaxed = tape.exp(log_relaxed);
    Ok(ConcreteSample {
        relaxed,
        log_relaxed,
        hard,
        lambda,
    })
}

/// Log density of a point on the simplex (given by its log coordinates)
/// under `Concrete(wbar, lambda)`:
/// `log Γ(K) + (K-1) log λ + Σ_k [log wbar_k - (λ+1) log s_k]
///  - K lse_k(log wbar_k - λ log s_k)`.
/// Invariant under rescaling of the weights.
pub fn concrete_log_pdf(
    tape: &mut Tape,
    log_wbar: Var,
    log_simplex: Var,
    lambda: f64,
) -> Result<Var> {
    if log_wbar.cols() != 1 || log_wbar.shape() != log_simplex.shape() {
        return Err(Error::ShapeMismatch {
            op: "concrete_log_pdf",
            lhs: log_wbar.shape(),
            rhs: log_simplex.shape(),
        });
    }
    let k = log_wbar.rows();
    let const_term = ln_gamma_usize(k) + (k as f64 - 1.0) * lambda.ln();
    let scaled = tape.scalar_mul(log_simplex, -(lambda + 1.0));
    let per_k = tape.add(log_wbar, scaled)?;
    let sum_term = tape.sum(per_k);
    let inner_scaled = tape.scalar_mul(log_simplex, -lambda);
    let inner = tape.add(log_wbar, inner_scaled)?;
    let lse = tape.logsumexp(inner)?;
    let neg_k_lse = tape.scalar_mul(lse, -(k as f64));
    let total = tape.add(sum_term, neg_k_lse)?;
    Ok(tape.scalar_add(total, const_term))
}

/// `ln((k-1)!)` for the Concrete normalizer.
fn ln_gamma_usize(k: usize) -> f64 {
    (1..k).map(|i| (i as f64).ln()).sum()
}

/// Full-covariance Gaussian. `mean` is `(d, 1)`, `cov` is `(d, d)`; `cov` is
/// symmetrized and jittered inside the linear-algebra ops.
#[derive(Clone, Copy)]
pub struct FullGaussian {
    pub mean: Var,
    pub cov: Var,
}

impl FullGaussian {
    pub fn new(mean: Var, cov: Var) -> Result<Self> {
        let d = mean.rows();
        if mean.cols() != 1 || cov.shape() != (d, d) {
            return Err(Error::ShapeMismatch {
                op: "FullGaussian::new",
                lhs: mean.shape(),
                rhs: cov.shape(),
            });
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.rows()
    }

    /// Log density at a `(d, 1)` point.
    pub fn log_pdf(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if x.shape() != self.mean.shape() {
            return Err(Error::ShapeMismatch {
                op: "FullGaussian::log_pdf",
                lhs: x.shape(),
                rhs: self.mean.shape(),
            });
        }
        let d = self.dim();
        let diff = tape.sub(x, self.mean)?;
        let jitter = probe_jitter(tape.value(self.cov), d)?;
        let qld = tape.custom(Box::new(QuadLogDet { d, jitter }), &[self.cov, diff])?;
        let half = tape.scalar_mul(qld, -0.5);
        Ok(tape.scalar_add(half, -(d as f64) * HALF_LN_2PI))
    }

    /// Reparameterized sample `mean + chol(cov) * eps` from explicit noise.
    pub fn rsample_from_noise(&self, tape: &mut Tape, noise: Var) -> Result<Var> {
        if noise.shape() != self.mean.shape() {
            return Err(Error::ShapeMismatch {
                op: "FullGaussian::rsample",
                lhs: noise.shape(),
                rhs: self.mean.shape(),
            });
        }
        let l = chol_factor(tape, self.cov)?;
        let ln = tape.matvec(l, noise)?;
        tape.add(self.mean, ln)
    }

    pub fn rsample(&self, tape: &mut Tape, source: &mut dyn DrawSource) -> Result<Var> {
        let noise = source.normals(self.dim())?;
        let eps = tape.leaf(self.dim(), 1, &noise)?;
        self.rsample_from_noise(tape, eps)
    }
}

/// Lower Cholesky factor of a symmetrized, jittered input.
pub fn chol_factor(tape: &mut Tape, cov: Var) -> Result<Var> {
    let d = cov.rows();
    if cov.cols() != d {
        return Err(Error::BadShape {
            op: "chol_factor",
            expected: "a square matrix",
            got: cov.shape(),
        });
    }
    let jitter = probe_jitter(tape.value(cov), d)?;
    tape.custom(Box::new(CholFactor { d, jitter }), &[cov])
}

/// Inverse of a symmetrized, jittered SPD matrix.
pub fn spd_inverse(tape: &mut Tape, mat: Var) -> Result<Var> {
    let d = mat.rows();
    if mat.cols() != d {
        return Err(Error::BadShape {
            op: "spd_inverse",
            expected: "a square matrix",
            got: mat.shape(),
        });
    }
    let jitter = probe_jitter(tape.value(mat), d)?;
    tape.custom(Box::new(SpdInverse { d, jitter }), &[mat])
}

/// Find the smallest jitter in {0, 1e-6 * 2^i} (capped at 1e-2) that makes
/// the symmetrized matrix factorizable. The choice is frozen into the node so
/// forward and backward stay consistent.
fn probe_jitter(cov: &[f64], d: usize) -> Result<f64> {
    let sym = symmetrized(cov, d);
    let mut scratch = vec![0.0; d * d];
    if chol_in_place(&sym, d, 0.0, &mut scratch).is_ok() {
        return Ok(0.0);
    }
    let mut j = JITTER_START;
    while j <= JITTER_CAP {
        if chol_in_place(&sym, d, j, &mut scratch).is_ok() {
            return Ok(j);
        }
        j *= 2.0;
    }
    Err(Error::Numerical {
        what: "cholesky",
        why: format!("matrix not positive definite within jitter cap {JITTER_CAP}"),
    })
}

fn symmetrized(a: &[f64], d: usize) -> Vec<f64> {
    let mut s = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            s[j * d + i] = 0.5 * (a[j * d + i] + a[i * d + j]);
        }
    }
    s
}

/// Lower Cholesky of `a + jitter*I` into `l` (column-major), zero above the
/// diagonal. Fails on a non-positive pivot.
fn chol_in_place(a: &[f64], d: usize, jitter: f64, l: &mut [f64]) -> Result<()> {
    l.fill(0.0);
    for j in 0..d {
        let mut diag = a[j * d + j] + jitter;
        for k in 0..j {
            diag -= l[k * d + j] * l[k * d + j];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(Error::Numerical {
                what: "cholesky",
                why: format!("non-positive pivot at column {j}"),
            });
        }
        let root = diag.sqrt();
        l[j * d + j] = root;
        for i in (j + 1)..d {
            let mut v = a[j * d + i];
            for k in 0..j {
                v -= l[k * d + i] * l[k * d + j];
            }
            l[j * d + i] = v / root;
        }
    }
    Ok(())
}

/// Solve `L y = b` (forward substitution), `b` overwritten column-wise.
fn solve_lower(l: &[f64], d: usize, b: &mut [f64], ncols: usize) {
    for c in 0..ncols {
        let col = &mut b[c * d..(c + 1) * d];
        for i in 0..d {
            let mut v = col[i];
            for k in 0..i {
                v -= l[k * d + i] * col[k];
            }
            col[i] = v / l[i * d + i];
        }
    }
}

/// Solve `Lᵀ y = b` (back substitution), `b` overwritten column-wise.
fn solve_lower_t(l: &[f64], d: usize, b: &mut [f64], ncols: usize) {
    for c in 0..ncols {
        let col = &mut b[c * d..(c + 1) * d];
        for i in (0..d).rev() {
            let mut v = col[i];
            for k in (i + 1)..d {
                v -= l[i * d + k] * col[k];
            }
            col[i] = v / l[i * d + i];
        }
    }
}

/// `(A + jI)⁻¹` for symmetrized `a`, via Cholesky solves on the identity.
fn spd_inv_values(a_sym: &[f64], d: usize, jitter: f64) -> Result<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    chol_in_place(a_sym, d, jitter, &mut l)?;
    let mut inv = vec![0.0; d * d];
    for i in 0..d {
        inv[i * d + i] = 1.0;
    }
    solve_lower(&l, d, &mut inv, d);
    solve_lower_t(&l, d, &mut inv, d);
    Ok(inv)
}

/// `logdet(S + jI) + diffᵀ (S + jI)⁻¹ diff` with `S` the symmetrized input.
#[derive(Debug)]
struct QuadLogDet {
    d: usize,
    jitter: f64,
}

impl CustomOp for QuadLogDet {
    fn name(&self) -> &'static str {
        "quad_log_det"
    }

    fn out_shape(&self, _inputs: &[(usize, usize)]) -> Result<(usize, usize)> {
        Ok((1, 1))
    }

    fn forward(&self, inputs: &[&[f64]], out: &mut [f64]) -> Result<()> {
        let d = self.d;
        let sym = symmetrized(inputs[0], d);
        let mut l = vec![0.0; d * d];
        chol_in_place(&sym, d, self.jitter, &mut l)?;
        let mut logdet = 0.0;
        for i in 0..d {
            logdet += l[i * d + i].ln();
        }
        let mut alpha = inputs[1].to_vec();
        solve_lower(&l, d, &mut alpha, 1);
        let quad: f64 = alpha.iter().map(|&v| v * v).sum();
        out[0] = 2.0 * logdet + quad;
        Ok(())
    }

    fn backward_input(
        &self,
        which: usize,
        inputs: &[&[f64]],
        _primal: &[f64],
        grad_out: &[f64],
        grad_in: &mut [f64],
    ) {
        let d = self.d;
        let g = grad_out[0];
        let sym = symmetrized(inputs[0], d);
        let inv = spd_inv_values(&sym, d, self.jitter).expect("jitter was probed at creation");
        let mut alpha = vec![0.0; d];
        for i in 0..d {
            for k in 0..d {
                alpha[i] += inv[k * d + i] * inputs[1][k];
            }
        }
        match which {
            // d/dS (logdet + qf) = S⁻¹ - ααᵀ; symmetric, so the symmetrize
            // wrapper passes it through unchanged.
            0 => {
                for j in 0..d {
                    for i in 0..d {
                        grad_in[j * d + i] += g * (inv[j * d + i] - alpha[i] * alpha[j]);
                    }
                }
            }
            1 => {
                for i in 0..d {
                    grad_in[i] += 2.0 * g * alpha[i];
                }
            }
            _ => unreachable!(),
        }
    }
}

/// Lower Cholesky factor as a differentiable op.
#[derive(Debug)]
struct CholFactor {
    d: usize,
    jitter: f64,
}

impl CustomOp for CholFactor {
    fn name(&self) -> &'static str {
        "chol_factor"
    }

    fn out_shape(&self, _inputs: &[(usize, usize)]) -> Result<(usize, usize)> {
        Ok((self.d, self.d))
    }

    fn forward(&self, inputs: &[&[f64]], out: &mut [f64]) -> Result<()> {
        let sym = symmetrized(inputs[0], self.d);
        chol_in_place(&sym, self.d, self.jitter, out)
    }

    fn backward_input(
        &self,
        which: usize,
        _inputs: &[&[f64]],
        primal: &[f64],
        grad_out: &[f64],
        grad_in: &mut [f64],
    ) {
        debug_assert_eq!(which, 0);
        let d = self.d;
        let l = primal;
        // Phi = tril(Lᵀ Ḡ) with halved diagonal; Ā = L⁻ᵀ Phi L⁻¹, then
        // symmetrized because the forward symmetrizes its input.
        let mut phi = vec![0.0; d * d];
        for j in 0..d {
            for i in j..d {
                // (Lᵀ Ḡ)[i, j] = Σ_r L[r, i] Ḡ[r, j]
                let mut v = 0.0;
                for r in 0..d {
                    v += l[i * d + r] * grad_out[j * d + r];
                }
                phi[j * d + i] = if i == j { 0.5 * v } else { v };
            }
        }
        // S = L⁻ᵀ Phi L⁻¹: solve Lᵀ Y = Phi, then S Lᵀ?? -> use
        // S = (L⁻ᵀ (L⁻ᵀ Phiᵀ)ᵀ): first Y = L⁻ᵀ Phi, then S = Y L⁻¹ via
        // Sᵀ = L⁻ᵀ Yᵀ.
        let mut y = phi;
        solve_lower_t(l, d, &mut y, d);
        let mut yt = vec![0.0; d * d];
        for j in 0..d {
            for i in 0..d {
                yt[i * d + j] = y[j * d + i];
            }
        }
        solve_lower_t(l, d, &mut yt, d);
        // yt now holds Sᵀ; accumulate ½(S + Sᵀ).
        for j in 0..d {
            for i in 0..d {
                grad_in[j * d + i] += 0.5 * (yt[i * d + j] + yt[j * d + i]);
            }
        }
    }
}

/// Differentiable SPD inverse.
#[derive(Debug)]
struct SpdInverse {
    d: usize,
    jitter: f64,
}

impl CustomOp for SpdInverse {
    fn name(&self) -> &'static str {
        "spd_inverse"
    }

    fn out_shape(&self, _inputs: &[(usize, usize)]) -> Result<(usize, usize)> {
        Ok((self.d, self.d))
    }

    fn forward(&self, inputs: &[&[f64]], out: &mut [f64]) -> Result<()> {
        let sym = symmetrized(inputs[0], self.d);
        let inv = spd_inv_values(&sym, self.d, self.jitter)?;
        out.copy_from_slice(&inv);
        Ok(())
    }

    fn backward_input(
        &self,
        which: usize,
        _inputs: &[&[f64]],
        primal: &[f64],
        grad_out: &[f64],
        grad_in: &mut [f64],
    ) {
        debug_assert_eq!(which, 0);
        let d = self.d;
        let b = primal; // B = (S + jI)⁻¹, symmetric.
        // M = -B Ḡ B; through the symmetrize wrapper: ½(M + Mᵀ).
        let mut bg = vec![0.0; d * d];
        for j in 0..d {
            for i in 0..d {
                let mut v = 0.0;
                for r in 0..d {
                    v += b[r * d + i] * grad_out[j * d + r];
                }
                bg[j * d + i] = v;
            }
        }
        let mut m = vec![0.0; d * d];
        for j in 0..d {
            for i in 0..d {
                let mut v = 0.0;
                for r in 0..d {
                    v += bg[r * d + i] * b[j * d + r];
                }
                m[j * d + i] = -v;
            }
        }
        for j in 0..d {
            for i in 0..d {
                grad_in[j * d + i] += 0.5 * (m[j * d + i] + m[i * d + j]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::Tape;
    use crate::rng::{derive_rng, Draw, LiveSource, RecordingSource, ReplaySource};

    fn grad_check(
        leaves: &[((usize, usize), Vec<f64>)],
        graph: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
        tol: f64,
    ) {
        let run = |vals: &[((usize, usize), Vec<f64>)]| -> (f64, Vec<Vec<f64>>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals
                .iter()
                .map(|((r, c), v)| tape.leaf(*r, *c, v).unwrap())
                .collect();
            let root = graph(&mut tape, &vars).unwrap();
            let loss = tape.scalar_value(root);
            let grads = tape.backward(root).unwrap();
            let gs = vars.iter().map(|v| grads.wrt(*v).to_vec()).collect();
            (loss, gs)
        };
        let (_, analytic) = run(leaves);
        let h = 1e-5;
        for li in 0..leaves.len() {
            for ei in 0..leaves[li].1.len() {
                let mut plus = leaves.to_vec();
                plus[li].1[ei] += h;
                let mut minus = leaves.to_vec();
                minus[li].1[ei] -= h;
                let fd = (run(&plus).0 - run(&minus).0) / (2.0 * h);
                let a = analytic[li][ei];
                let denom = a.abs().max(fd.abs()).max(1.0);
                assert!(
                    (a - fd).abs() / denom < tol,
                    "leaf {li} entry {ei}: analytic {a}, fd {fd}"
                );
            }
        }
    }

    #[test]
    fn standard_normal_log_pdf_matches_reference_values() {
        let mut tape = Tape::new();
        let mean = tape.leaf(1, 1, &[0.0]).unwrap();
        let log_std = tape.leaf(1, 1, &[0.0]).unwrap();
        let g = DiagGaussian::new(mean, log_std).unwrap();
        let x = tape.leaf(1, 1, &[0.0]).unwrap();
        let lp = g.log_pdf(&mut tape, x).unwrap();
        assert!((tape.scalar_value(lp) - -0.9189385332).abs() < 1e-9);

        let mean2 = tape.leaf(2, 1, &[0.0, 0.0]).unwrap();
        let ls2 = tape.leaf(2, 1, &[0.0, 0.0]).unwrap();
        let g2 = DiagGaussian::new(mean2, ls2).unwrap();
        let x2 = tape.leaf(2, 1, &[1.0, 1.0]).unwrap();
        let lp2 = g2.log_pdf(&mut tape, x2).unwrap();
        assert!((tape.scalar_value(lp2) - -2.8378770664).abs() < 1e-9);
    }

    #[test]
    fn diag_log_pdf_broadcasts_and_batches() {
        // Batched means vs separate evaluation.
        let mut tape = Tape::new();
        let means = tape.leaf(2, 3, &[0.1, 0.2, -0.3, 0.4, 1.0, -1.0]).unwrap();
        let ls = tape.leaf(2, 1, &[0.3, -0.2]).unwrap();
        let g = DiagGaussian::new(means, ls).unwrap();
        let x = tape.leaf(2, 1, &[0.5, -0.5]).unwrap();
        let lp = g.log_pdf(&mut tape, x).unwrap();
        assert_eq!(lp.shape(), (3, 1));
        let batch = tape.value(lp).to_vec();
        for c in 0..3 {
            let m = tape.col(means, c).unwrap();
            let gc = DiagGaussian::new(m, ls).unwrap();
            let lpc = gc.log_pdf(&mut tape, x).unwrap();
            assert!((tape.scalar_value(lpc) - batch[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn diag_log_pdf_gradients_match_finite_differences() {
        // x batched, mean single.
        grad_check(
            &[
                ((2, 3), vec![0.3, -0.6, 1.2, 0.1, -0.4, 0.8]),
                ((2, 1), vec![0.2, -0.1]),
                ((2, 1), vec![0.15, -0.3]),
            ],
            |t, v| {
                let g = DiagGaussian::new(v[1], v[2])?;
                let lp = g.log_pdf(t, v[0])?;
                let w = t.leaf(3, 1, &[0.7, -0.4, 1.3])?;
                t.dot(lp, w)
            },
            1e-6,
        );
        // mean batched, x single.
        grad_check(
            &[
                ((2, 1), vec![0.3, -0.6]),
                ((2, 3), vec![0.2, -0.1, 0.5, 0.9, -0.8, 0.0]),
                ((2, 1), vec![-0.2, 0.25]),
            ],
            |t, v| {
                let g = DiagGaussian::new(v[1], v[2])?;
                let lp = g.log_pdf(t, v[0])?;
                Ok(t.sum(lp))
            },
            1e-6,
        );
    }

    #[test]
    fn rsample_is_reparameterized_and_replayable() {
        let mut rng = derive_rng(11, &[1]);
        let mut rec = RecordingSource::new(LiveSource::new(&mut rng));
        let mut tape = Tape::new();
        let mean = tape.leaf(2, 1, &[0.5, -0.5]).unwrap();
        let ls = tape.leaf(2, 1, &[0.1, -0.3]).unwrap();
        let g = DiagGaussian::new(mean, ls).unwrap();
        let z = g.rsample(&mut tape, &mut rec, 4).unwrap();
        assert_eq!(z.shape(), (2, 4));
        let log = rec.into_log();
        assert_eq!(log.len(), 8);

        // Gradient through the sample via replayed noise.
        let log2 = log.clone();
        grad_check(
            &[((2, 1), vec![0.5, -0.5]), ((2, 1), vec![0.1, -0.3])],
            move |t, v| {
                let mut rep = ReplaySource::new(log2.clone());
                let g = DiagGaussian::new(v[0], v[1])?;
                let z = g.rsample(t, &mut rep, 4)?;
                let sq = t.square(z);
                Ok(t.sum(sq))
            },
            1e-6,
        );
    }

    #[test]
    fn diag_product_of_standard_normals_halves_variance() {
        let mut tape = Tape::new();
        let zeros = tape.leaf(1, 1, &[0.0]).unwrap();
        let ls = tape.leaf(1, 1, &[0.0]).unwrap();
        let a = DiagGaussian::new(zeros, ls).unwrap();
        let prod = diag_product(&mut tape, a, a).unwrap();
        let x = tape.leaf(1, 1, &[0.0]).unwrap();
        let lp = prod.log_pdf(&mut tape, x).unwrap();
        // N(0, 1/2) at 0: -0.5*ln(pi).
        let expect = -0.5 * std::f64::consts::PI.ln();
        assert!((tape.scalar_value(lp) - expect).abs() < 1e-12);

        // Same-mean case collapses to variance/2 at the shared mean.
        let mut tape = Tape::new();
        let mu = tape.leaf(1, 1, &[0.7]).unwrap();
        let ls = tape.leaf(1, 1, &[-0.4]).unwrap();
        let a = DiagGaussian::new(mu, ls).unwrap();
        let prod = diag_product(&mut tape, a, a).unwrap();
        assert!((tape.value(prod.mean)[0] - 0.7).abs() < 1e-12);
        let want_ls = -0.4 - 0.5 * 2.0f64.ln();
        assert!((tape.value(prod.log_std)[0] - want_ls).abs() < 1e-12);
    }

    #[test]
    fn diag_product_gradients_and_batching() {
        grad_check(
            &[
                ((2, 3), vec![0.3, -0.6, 1.2, 0.1, -0.4, 0.8]),
                ((2, 1), vec![0.2, -0.1]),
                ((2, 1), vec![-0.5, 0.4]),
                ((2, 1), vec![0.3, -0.2]),
            ],
            |t, v| {
                let a = DiagGaussian::new(v[0], v[1])?;
                let b = DiagGaussian::new(v[2], v[3])?;
                let p = diag_product(t, a, b)?;
                let s1 = t.sum(p.mean);
                let s2 = t.sum(p.log_std);
                t.add(s1, s2)
            },
            1e-6,
        );
    }

    #[test]
    fn mixture_log_pdf_matches_composed_reference() {
        let mut tape = Tape::new();
        let x = tape.leaf(2, 3, &[0.2, -0.3, 1.0, 0.5, -1.2, 0.1]).unwrap();
        let comps = tape.leaf(2, 2, &[0.0, 0.1, -0.4, 0.6]).unwrap();
        let lw = tape.leaf(2, 1, &[(0.3f64).ln(), (0.7f64).ln()]).unwrap();
        let ls = tape.leaf(2, 1, &[0.1, -0.2]).unwrap();
        let fused = mixture_diag_log_pdf(&mut tape, x, comps, lw, ls).unwrap();
        let fused_vals = tape.value(fused).to_vec();

        for c in 0..3 {
            let xc = tape.col(x, c).unwrap();
            let mut terms = Vec::new();
            for j in 0..2 {
                let mj = tape.col(comps, j).unwrap();
                let g = DiagGaussian::new(mj, ls).unwrap();
                let lp = g.log_pdf(&mut tape, xc).unwrap();
                let lwj = tape.index(lw, j).unwrap();
                terms.push(tape.add(lp, lwj).unwrap());
            }
            let stacked = tape.stack_scalars(&terms).unwrap();
            let reference = tape.logsumexp(stacked).unwrap();
            assert!((tape.scalar_value(reference) - fused_vals[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_log_pdf_gradients_match_finite_differences() {
        grad_check(
            &[
                ((2, 3), vec![0.2, -0.3, 1.0, 0.5, -1.2, 0.1]),
                ((2, 2), vec![0.0, 0.1, -0.4, 0.6]),
                ((2, 1), vec![(0.3f64).ln(), (0.7f64).ln()]),
                ((2, 1), vec![0.1, -0.2]),
            ],
            |t, v| {
                let lp = mixture_diag_log_pdf(t, v[0], v[1], v[2], v[3])?;
                let w = t.leaf(3, 1, &[1.0, -0.5, 0.25])?;
                t.dot(lp, w)
            },
            1e-6,
        );
    }

    #[test]
    fn categorical_sample_validates_and_matches_chi_square() {
        let mut rng = derive_rng(5, &[2]);
        let mut src = LiveSource::new(&mut rng);
        assert!(categorical_sample(&[], &mut src).is_err());
        assert!(categorical_sample(&[0.5, 0.6], &mut src).is_err());
        assert!(categorical_sample(&[-0.1, 1.1], &mut src).is_err());

        let probs = [0.1, 0.2, 0.3, 0.4];
        let n = 10_000usize;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[categorical_sample(&probs, &mut src).unwrap()] += 1;
        }
        let chi2: f64 = probs
            .iter()
            .zip(&counts)
            .map(|(&p, &c)| {
                let e = p * n as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        // df = 3; 16.27 is the 0.999 quantile.
        assert!(chi2 < 16.27, "chi-square statistic {chi2}");
    }

    #[test]
    fn concrete_uniform_two_category_density_is_zero_at_center() {
        let mut tape = Tape::new();
        let lw = tape.leaf(2, 1, &[0.0, 0.0]).unwrap();
        let ls = tape.leaf(2, 1, &[0.5f64.ln(), 0.5f64.ln()]).unwrap();
        let lp = concrete_log_pdf(&mut tape, lw, ls, 1.0).unwrap();
        assert!(tape.scalar_value(lp).abs() < 1e-12);
    }

    #[test]
    fn concrete_log_pdf_is_invariant_to_weight_rescaling() {
        let mut tape = Tape::new();
        let lw = tape.leaf(3, 1, &[-0.3, 0.2, 1.1]).unwrap();
        let shifted = tape.scalar_add(lw, 2.345);
        let ls = tape
            .leaf(3, 1, &[(0.2f64).ln(), (0.5f64).ln(), (0.3f64).ln()])
            .unwrap();
        let a = concrete_log_pdf(&mut tape, lw, ls, 0.7).unwrap();
        let b = concrete_log_pdf(&mut tape, shifted, ls, 0.7).unwrap();
        assert!((tape.scalar_value(a) - tape.scalar_value(b)).abs() < 1e-10);
    }

    #[test]
    fn concrete_rsample_lies_on_simplex_and_couples_hard_index() {
        let mut rng = derive_rng(9, &[3]);
        for trial in 0..50 {
            let mut tape = Tape::new();
            let raw = [0.5 - trial as f64 * 0.01, -0.2, 0.9];
            let lw = tape.leaf(3, 1, &raw).unwrap();
            let mut rec = RecordingSource::new(LiveSource::new(&mut rng));
            let s = concrete_rsample(&mut tape, lw, 0.4, &mut rec).unwrap();
            let vals = tape.value(s.relaxed).to_vec();
            let total: f64 = vals.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(vals.iter().all(|&v| v > 0.0));
            // Hard index = argmax of perturbed log weights = argmax of the
            // relaxation (monotone transform).
            let argmax = vals
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(s.hard, argmax);
            let log = rec.into_log();
            assert!(matches!(log[0], Draw::Gumbel(_)));
        }
    }

    #[test]
    fn concrete_rsample_gradients_match_finite_differences() {
        let mut rng = derive_rng(13, &[4]);
        let mut rec = RecordingSource::new(LiveSource::new(&mut rng));
        let mut tape = Tape::new();
        let lw = tape.leaf(3, 1, &[0.1, -0.4, 0.6]).unwrap();
        let _ = concrete_rsample(&mut tape, lw, 0.3, &mut rec).unwrap();
        let log = rec.into_log();
        grad_check(
            &[((3, 1), vec![0.1, -0.4, 0.6])],
            move |t, v| {
                let mut rep = ReplaySource::new(log.clone());
                let s = concrete_rsample(t, v[0], 0.3, &mut rep)?;
                let w = t.leaf(3, 1, &[0.9, -1.1, 0.4])?;
                let e = t.dot(s.relaxed, w)?;
                let lp = concrete_log_pdf(t, v[0], s.log_relaxed, 0.3)?;
                let half = t.scalar_mul(lp, 0.5);
                t.add(e, half)
            },
            1e-6,
        );
    }

    #[test]
    fn high_temperature_relaxation_approaches_uniform() {
        let mut rng = derive_rng(21, &[5]);
        let mut src = LiveSource::new(&mut rng);
        let mut tape = Tape::new();
        let lw = tape.leaf(4, 1, &[1.0, -2.0, 0.3, 0.0]).unwrap();
        let s = concrete_rsample(&mut tape, lw, 1e6, &mut src).unwrap();
        for &v in tape.value(s.relaxed) {
            assert!((v - 0.25).abs() < 1e-4);
        }
    }

    #[test]
    fn full_gaussian_with_diagonal_cov_matches_diag() {
        let mut tape = Tape::new();
        let mean = tape.leaf(2, 1, &[0.3, -0.7]).unwrap();
        let ls = tape.leaf(2, 1, &[0.25, -0.4]).unwrap();
        let var = tape.scalar_mul(ls, 2.0);
        let var = tape.exp(var);
        let cov = tape.diag_from_vec(var).unwrap();
        let x = tape.leaf(2, 1, &[0.9, 0.1]).unwrap();

        let fg = FullGaussian::new(mean, cov).unwrap();
        let lp_full = fg.log_pdf(&mut tape, x).unwrap();
        let dg = DiagGaussian::new(mean, ls).unwrap();
        let lp_diag = dg.log_pdf(&mut tape, x).unwrap();
        assert!((tape.scalar_value(lp_full) - tape.value(lp_diag)[0]).abs() < 1e-10);
    }

    #[test]
    fn full_gaussian_gradients_match_finite_differences() {
        // SPD, well conditioned: A = V Vᵀ + 2I built host-side.
        let v = [0.6, -0.3, 0.2, 0.8, -0.5, 0.1, 0.4, 0.7, -0.2];
        let d = 3;
        let mut a = vec![0.0; 9];
        for i in 0..d {
            for j in 0..d {
                let mut s = if i == j { 2.0 } else { 0.0 };
                for k in 0..d {
                    s += v[k * d + i] * v[k * d + j];
                }
                a[j * d + i] = s;
            }
        }
        grad_check(
            &[
                ((3, 3), a),
                ((3, 1), vec![0.2, -0.5, 0.9]),
                ((3, 1), vec![-0.3, 0.4, 0.1]),
            ],
            |t, v| {
                let fg = FullGaussian::new(v[1], v[0])?;
                fg.log_pdf(t, v[2])
            },
            2e-6,
        );
    }

    #[test]
    fn chol_factor_and_spd_inverse_gradients() {
        let a = vec![2.5, 0.4, -0.3, 0.4, 1.8, 0.2, -0.3, 0.2, 3.1];
        grad_check(
            &[((3, 3), a.clone()), ((3, 1), vec![0.5, -0.2, 0.8])],
            |t, v| {
                let l = chol_factor(t, v[0])?;
                let y = t.matvec(l, v[1])?;
                t.dot(y, y)
            },
            2e-6,
        );
        grad_check(
            &[((3, 3), a), ((3, 1), vec![0.5, -0.2, 0.8])],
            |t, v| {
                let inv = spd_inverse(t, v[0])?;
                let y = t.matvec(inv, v[1])?;
                t.dot(y, v[1])
            },
            2e-6,
        );
    }

    #[test]
    fn chol_factor_reconstructs_input() {
        let mut tape = Tape::new();
        let a = tape
            .leaf(2, 2, &[4.0, 1.0, 1.0, 3.0])
            .unwrap();
        let l = chol_factor(&mut tape, a).unwrap();
        let lv = tape.value(l);
        // L Lᵀ == A for this exactly factorizable matrix.
        let rec = [
            lv[0] * lv[0],
            lv[0] * lv[1],
            lv[0] * lv[1],
            lv[1] * lv[1] + lv[3] * lv[3],
        ];
        for (r, e) in rec.iter().zip([4.0, 1.0, 1.0, 3.0]) {
            assert!((r - e).abs() < 1e-12);
        }
        assert_eq!(lv[2], 0.0);
    }

    #[test]
    fn jitter_recovers_semidefinite_and_rejects_indefinite() {
        let mut tape = Tape::new();
        // Rank-deficient PSD: [[1, 1], [1, 1]].
        let psd = tape.leaf(2, 2, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(chol_factor(&mut tape, psd).is_ok());
        // Indefinite with eigenvalue -1, beyond the jitter cap.
        let indef = tape.leaf(2, 2, &[1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(chol_factor(&mut tape, indef).is_err());
    }

    #[test]
    fn full_gaussian_rsample_pushes_noise_through_cholesky() {
        let mut rng = derive_rng(31, &[6]);
        let mut rec = RecordingSource::new(LiveSource::new(&mut rng));
        let mut tape = Tape::new();
        let mean = tape.leaf(2, 1, &[1.0, -1.0]).unwrap();
        let cov = tape.leaf(2, 2, &[2.0, 0.6, 0.6, 1.5]).unwrap();
        let fg = FullGaussian::new(mean, cov).unwrap();
        let _ = fg.rsample(&mut tape, &mut rec).unwrap();
        let log = rec.into_log();
        grad_check(
            &[
                ((2, 1), vec![1.0, -1.0]),
                ((2, 2), vec![2.0, 0.6, 0.6, 1.5]),
            ],
            move |t, v| {
                let mut rep = ReplaySource::new(log.clone());
                let fg = FullGaussian::new(v[0], v[1])?;
                let z = fg.rsample(t, &mut rep)?;
                let sq = t.square(z);
                Ok(t.sum(sq))
            },
            2e-6,
        );
    }
}
