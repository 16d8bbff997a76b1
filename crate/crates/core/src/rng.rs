//! Randomness plumbing: derived seed streams and a record/replay draw log.
//!
//! Every stochastic routine in this crate takes a [`DrawSource`] rather than
//! an RNG directly. A [`LiveSource`] draws fresh randomness; a
//! [`RecordingSource`] additionally logs every draw; a [`ReplaySource`] plays
//! a log back verbatim. Replay freezes not just the continuous noise but also
//! categorical outcomes (ancestor indices), which is what finite-difference
//! checks of resampling-based estimators require: perturbing parameters must
//! not flip a resampling decision mid-check.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Named lanes for [`derive_rng`] so independent consumers of one master seed
/// never collide.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const SNR: u64 = 5;
    pub const VERIFY: u64 = 6;
}

fn scramble(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministically derive an independent RNG from a master seed and a tag
/// path (stream id, then e.g. epoch, trial, replicate indices).
pub fn derive_rng(master: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut s = scramble(master);
    for &t in tags {
        s = scramble(s ^ scramble(t));
    }
    ChaCha8Rng::seed_from_u64(s)
}

/// One recorded random outcome.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Draw {
    Normal(f64),
    Uniform(f64),
    Gumbel(f64),
    Index(usize),
}

/// Provider of the four kinds of randomness inference code consumes.
pub trait DrawSource {
    /// Standard normal.
    fn normal(&mut self) -> Result<f64>;

    /// Uniform on the open interval (0, 1).
    fn uniform(&mut self) -> Result<f64>;

    /// Standard Gumbel, `-ln(-ln u)`.
    fn gumbel(&mut self) -> Result<f64>;

    /// Index draw from normalized probabilities by inverse CDF with a single
    /// uniform and strict `<` at cell boundaries.
    fn categorical(&mut self, probs: &[f64]) -> Result<usize>;

    fn normals(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.normal()).collect()
    }
}

/// Inverse-CDF index draw shared by the live and recording sources.
fn index_from_uniform(u: f64, probs: &[f64]) -> usize {
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// Draws fresh randomness from an underlying RNG.
pub struct LiveSource<'r, R: Rng> {
    rng: &'r mut R,
}

impl<'r, R: Rng> LiveSource<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self { rng }
    }

    fn open_uniform(&mut self) -> f64 {
        loop {
            let u: f64 = self.rng.random();
            if u > 0.0 {
                return u;
            }
        }
    }
}

impl<R: Rng> DrawSource for LiveSource<'_, R> {
    fn normal(&mut self) -> Result<f64> {
        Ok(StandardNormal.sample(self.rng))
    }

    fn uniform(&mut self) -> Result<f64> {
        Ok(self.open_uniform())
    }

    fn gumbel(&mut self) -> Result<f64> {
        let u = self.open_uniform();
        Ok(-(-u.ln()).ln())
    }

    fn categorical(&mut self, probs: &[f64]) -> Result<usize> {
        let u = self.open_uniform();
        Ok(index_from_uniform(u, probs))
    }
}

/// Wraps another source and logs every draw.
pub struct RecordingSource<S: DrawSource> {
    inner: S,
    log: Vec<Draw>,
}

impl<S: DrawSource> RecordingSource<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            log: Vec::new(),
        }
    }

    pub fn into_log(self) -> Vec<Draw> {
        self.log
    }
}

impl<S: DrawSource> DrawSource for RecordingSource<S> {
    fn normal(&mut self) -> Result<f64> {
        let x = self.inner.normal()?;
        self.log.push(Draw::Normal(x));
        Ok(x)
    }

    fn uniform(&mut self) -> Result<f64> {
        let x = self.inner.uniform()?;
        self.log.push(Draw::Uniform(x));
        Ok(x)
    }

    fn gumbel(&mut self) -> Result<f64> {
        let x = self.inner.gumbel()?;
        self.log.push(Draw::Gumbel(x));
        Ok(x)
    }

    fn categorical(&mut self, probs: &[f64]) -> Result<usize> {
        let k = self.inner.categorical(probs)?;
        self.log.push(Draw::Index(k));
        Ok(k)
    }
}

/// Plays back a recorded log. Index draws return the recorded index no matter
/// what probabilities the caller passes, so resampling decisions stay frozen
/// under parameter perturbations.
pub struct ReplaySource {
    log: Vec<Draw>,
    at: usize,
}

impl ReplaySource {
    pub fn new(log: Vec<Draw>) -> Self {
        Self { log, at: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.log.len() - self.at
    }

    fn next(&mut self, want: &'static str) -> Result<Draw> {
        let d = *self.log.get(self.at).ok_or_else(|| {
            Error::Replay(format!("log exhausted at draw {} wanting {want}", self.at))
        })?;
        self.at += 1;
        Ok(d)
    }
}

impl DrawSource for ReplaySource {
    fn normal(&mut self) -> Result<f64> {
        match self.next("normal")? {
            Draw::Normal(x) => Ok(x),
            other => Err(Error::Replay(format!("wanted normal, found {other:?}"))),
        }
    }

    fn uniform(&mut self) -> Result<f64> {
        match self.next("uniform")? {
            Draw::Uniform(x) => Ok(x),
            other => Err(Error::Replay(format!("wanted uniform, found {other:?}"))),
        }
    }

    fn gumbel(&mut self) -> Result<f64> {
        match self.next("gumbel")? {
            Draw::Gumbel(x) => Ok(x),
            other => Err(Error::Replay(format!("wanted gumbel, found {other:?}"))),
        }
    }

    fn categorical(&mut self, _probs: &[f64]) -> Result<usize> {
        match self.next("index")? {
            Draw::Index(k) => Ok(k),
            other => Err(Error::Replay(format!("wanted index, found {other:?}"))),
        }
    }
}
