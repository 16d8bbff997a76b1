//! Neural building blocks: batched MLPs, a reverse-time context encoder, and
//! a state-dependent covariance head.
//!
//! All parameters live in a [`ParameterStore`] under `prefix.layer` names, so
//! checkpoints are flat name/value maps. Weights use Xavier-uniform init,
//! `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`; biases start at zero.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{ParamGroup, ParameterStore, SlotId, StagedParams, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::Tanh
    }
}

/// Architecture of a fully connected network. `hidden` may be empty, which
/// makes the network a single affine map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        Self {
            input,
            hidden: hidden.to_vec(),
            output,
            activation: Activation::Tanh,
        }
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input;
        for &h in &self.hidden {
            dims.push((h, prev));
            prev = h;
        }
        dims.push((self.output, prev));
        dims
    }
}

pub fn xavier_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols).map(|_| rng.random_range(-a..a)).collect()
}

/// Fully connected network with parameters in a store. Forward evaluation is
/// batched: input `(d_in, n)` maps to `(d_out, n)` with one matmul per layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<(SlotId, SlotId)>,
}

impl Mlp {
    /// Register `prefix.w{i}` and `prefix.b{i}` slots and initialize them.
    pub fn register(
        store: &mut ParameterStore,
        prefix: &str,
        group: ParamGroup,
        spec: MlpSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if spec.input == 0 || spec.output == 0 || spec.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidArgument {
                what: "MlpSpec",
                why: format!("zero-width layer in {spec:?}"),
            });
        }
        let mut layers = Vec::new();
        for (i, (rows, cols)) in spec.layer_dims().into_iter().enumerate() {
            let w = store.register(
                &format!("{prefix}.w{i}"),
                group,
                rows,
                cols,
                xavier_init(rng, rows, cols),
            )?;
            let b = store.register(&format!("{prefix}.b{i}"), group, rows, 1, vec![0.0; rows])?;
            layers.push((w, b));
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn forward(&self, tape: &mut Tape, staged: &StagedParams, x: Var) -> Result<Var> {
        if x.rows() != self.spec.input {
            return Err(Error::BadShape {
                op: "Mlp::forward",
                expected: "input rows matching the spec",
                got: x.shape(),
            });
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let lin = tape.matmul(staged.var(w), h)?;
            h = tape.add_cols(lin, staged.var(b))?;
            if i != last {
                h = match self.spec.activation {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Relu => tape.relu(h),
                };
            }
        }
        Ok(h)
    }

    /// Host-side forward for contexts that never need gradients.
    pub fn forward_host(&self, store: &ParameterStore, x: &[f64], n: usize) -> Vec<f64> {
        let d_in = self.spec.input;
        debug_assert_eq!(x.len(), d_in * n);
        let mut h = x.to_vec();
        let mut h_rows = d_in;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (rows, cols) = store.shape(w);
            debug_assert_eq!(cols, h_rows);
            let wv = store.values(w);
            let bv = store.values(b);
            let mut out = vec![0.0; rows * n];
            for c in 0..n {
                let hc = &h[c * h_rows..(c + 1) * h_rows];
                let oc = &mut out[c * rows..(c + 1) * rows];
                oc.copy_from_slice(bv);
                for j in 0..cols {
                    let hj = hc[j];
                    if hj == 0.0 {
                        continue;
                    }
                    for r in 0..rows {
                        oc[r] += wv[j * rows + r] * hj;
                    }
                }
                if i != last {
                    for v in oc.iter_mut() {
                        *v = match self.spec.activation {
                            Activation::Tanh => v.tanh(),
                            Activation::Relu => v.max(0.0),
                        };
                    }
                }
            }
            h = out;
            h_rows = rows;
        }
        h
    }
}

/// Spec for the reverse-time context encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub d_x: usize,
    pub d_c: usize,
    pub hidden: usize,
}

/// Backward recurrence over observations: `c_t = cell(x_t, c_{t+1})` with
/// `c_{T+1} = 0`, so `c_t` is a function of `x_{t:T}` only. The cell is
/// `c = tanh(W2 tanh(Wx x + Wc c' + b1) + b2)`; the outer tanh keeps contexts
/// bounded over long sequences.
#[derive(Clone, Debug)]
pub struct ContextEncoder {
    spec: ContextSpec,
    wx: SlotId,
    wc: SlotId,
    b1: SlotId,
    w2: SlotId,
    b2: SlotId,
}

impl ContextEncoder {
    pub fn register(
        store: &mut ParameterStore,
        prefix: &str,
        group: ParamGroup,
        spec: ContextSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (d_x, d_c, h) = (spec.d_x, spec.d_c, spec.hidden);
        if d_x == 0 || d_c == 0 || h == 0 {
            return Err(Error::InvalidArgument {
                what: "ContextSpec",
                why: format!("zero dimension in {spec:?}"),
            });
        }
        let wx = store.register(
            &format!("{prefix}.wx"),
            group,
            h,
            d_x,
            xavier_init(rng, h, d_x),
        )?;
        let wc = store.register(
            &format!("{prefix}.wc"),
            group,
            h,
            d_c,
            xavier_init(rng, h, d_c),
        )?;
        let b1 = store.register(&format!("{prefix}.b1"), group, h, 1, vec![0.0; h])?;
        let w2 = store.register(
            &format!("{prefix}.w2"),
            group,
            d_c,
            h,
            xavier_init(rng, d_c, h),
        )?;
        let b2 = store.register(&format!("{prefix}.b2"), group, d_c, 1, vec![0.0; d_c])?;
        Ok(Self {
            spec,
            wx,
            wc,
            b1,
            w2,
            b2,
        })
    }

    pub fn spec(&self) -> &ContextSpec {
        &self.spec
    }

    /// Contexts `c_1..c_T` (each `(d_c, 1)`) for observations given as a
    /// `(d_x, T)` leaf.
    pub fn forward(&self, tape: &mut Tape, staged: &StagedParams, xs: Var) -> Result<Vec<Var>> {
        if xs.rows() != self.spec.d_x {
            return Err(Error::BadShape {
                op: "ContextEncoder::forward",
                expected: "observation rows matching d_x",
                got: xs.shape(),
            });
        }
        let t_len = xs.cols();
        let mut cs = vec![None; t_len];
        let mut prev: Option<Var> = None;
        for t in (0..t_len).rev() {
            let xt = tape.col(xs, t)?;
            let from_x = tape.matvec(staged.var(self.wx), xt)?;
            let pre = match prev {
                Some(c) => {
                    let from_c = tape.matvec(staged.var(self.wc), c)?;
                    let s = tape.add(from_x, from_c)?;
                    tape.add(s, staged.var(self.b1))?
                }
                None => tape.add(from_x, staged.var(self.b1))?,
            };
            let h = tape.tanh(pre);
            let lin = tape.matvec(staged.var(self.w2), h)?;
            let lin = tape.add(lin, staged.var(self.b2))?;
            let c = tape.tanh(lin);
            cs[t] = Some(c);
            prev = Some(c);
        }
        Ok(cs.into_iter().map(|c| c.expect("all steps filled")).collect())
    }
}

/// State-dependent covariance `cov(z) = exp(2 log_sigma) I + alpha * sym(net(z))`
/// where `net` maps `z` to the packed upper triangle of a symmetric matrix.
/// Positive definiteness is not guaranteed by construction; consumers rely on
/// the jitter ladder in the dense Gaussian ops.
#[derive(Clone, Debug)]
pub struct LocallyLinearCov {
    d: usize,
    alpha: f64,
    net: Mlp,
    log_sigma: SlotId,
}

impl LocallyLinearCov {
    pub fn register(
        store: &mut ParameterStore,
        prefix: &str,
        group: ParamGroup,
        d: usize,
        hidden: &[usize],
        alpha: f64,
        log_sigma_init: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let packed = d * (d + 1) / 2;
        let net = Mlp::register(
            store,
            &format!("{prefix}.net"),
            group,
            MlpSpec::new(d, hidden, packed),
            rng,
        )?;
        let log_sigma = store.register(
            &format!("{prefix}.log_sigma"),
            group,
            1,
            1,
            vec![log_sigma_init],
        )?;
        Ok(Self {
            d,
            alpha,
            net,
            log_sigma,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Covariance at a single latent point `z` `(d, 1)`.
    pub fn cov_at(&self, tape: &mut Tape, staged: &StagedParams, z: Var) -> Result<Var> {
        let packed = self.net.forward(tape, staged, z)?;
        let sym = tape.sym_from_triu(packed, self.d)?;
        let scaled = tape.scalar_mul(sym, self.alpha);
        let two_ls = tape.scalar_mul(staged.var(self.log_sigma), 2.0);
        let var = tape.exp(two_ls);
        let ones = tape.leaf(self.d, 1, &vec![1.0; self.d])?;
        let var_vec = tape.mul_scalar_node(ones, var)?;
        let eye_term = tape.diag_from_vec(var_vec)?;
        tape.add(scaled, eye_term)
    }
}
