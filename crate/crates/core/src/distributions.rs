//! Diagonal Gaussians on the autodiff tape.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Log-variances are clamped into this range at construction.
pub const LOG_VARIANCE_RANGE: (f64, f64) = (-20.0, 20.0);

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `N(mean, diag(exp(log_variance)))`, both `batch × dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiagonalGaussian {
    mean: Var,
    log_variance: Var,
}

impl DiagonalGaussian {
    /// Validates shapes and finiteness, then clamps the log-variance into
    /// [`LOG_VARIANCE_RANGE`].
    pub fn new(tape: &mut Tape, mean: Var, log_variance: Var) -> Result<Self> {
        let (ms, ls) = (tape.shape(mean), tape.shape(log_variance));
        if ms != ls || ms.len() != 2 {
            return Err(Error::dimension("gaussian log_variance", ms.to_vec(), ls.to_vec()));
        }
        if let Some(i) = tape.value(log_variance).iter().position(|v| !v.is_finite()) {
            let value = tape.value(log_variance)[i];
            return Err(Error::NonFiniteValue { context: "gaussian log_variance", index: i, value });
        }
        let (lo, hi) = LOG_VARIANCE_RANGE;
        let log_variance = tape.clamp(log_variance, lo, hi);
        Ok(Self { mean, log_variance })
    }

    pub fn standard_normal(tape: &mut Tape, batch: usize, dim: usize) -> Self {
        Self {
            mean: tape.constant(&[batch, dim], vec![0.0; batch * dim]),
            log_variance: tape.constant(&[batch, dim], vec![0.0; batch * dim]),
        }
    }

    pub fn mean(&self) -> Var {
        self.mean
    }

    pub fn log_variance(&self) -> Var {
        self.log_variance
    }

    pub fn batch_dim(&self, tape: &Tape) -> (usize, usize) {
        let s = tape.shape(self.mean);
        (s[0], s[1])
    }

    /// Columns `start..end` of both parameters.
    pub fn slice(&self, tape: &mut Tape, start: usize, end: usize) -> Self {
        Self {
            mean: tape.slice_cols(self.mean, start, end),
            log_variance: tape.slice_cols(self.log_variance, start, end),
        }
    }

    /// Independent concatenation `[self | other]` along the latent axis.
    pub fn concat(&self, tape: &mut Tape, other: &Self) -> Result<Self> {
        let (b1, _) = self.batch_dim(tape);
        let (b2, _) = other.batch_dim(tape);
        if b1 != b2 {
            return Err(Error::dimension(
                "gaussian concat",
                tape.shape(self.mean).to_vec(),
                tape.shape(other.mean).to_vec(),
            ));
        }
        Ok(Self {
            mean: tape.concat_cols(self.mean, other.mean),
            log_variance: tape.concat_cols(self.log_variance, other.log_variance),
        })
    }
}

/// Which posterior produced a latent code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LatentSource {
    Modality(usize),
    Subset(Vec<usize>),
    Mixture,
    Prior,
    Traversal,
}

#[derive(Clone, Debug)]
pub struct LatentSample {
    pub z: Var,
    pub source: LatentSource,
}

pub fn standard_normal_noise(rng: &mut impl Rng, batch: usize, dim: usize) -> Tensor {
    let data = (0..batch * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(&[batch, dim], data).expect("noise shape")
}

/// `z = mean + exp(0.5·log_variance) ⊙ noise`; `noise` gets no gradient.
pub fn reparam_sample(
    tape: &mut Tape,
    q: &DiagonalGaussian,
    noise: &Tensor,
    source: LatentSource,
) -> Result<LatentSample> {
    if tape.shape(q.mean) != noise.shape() {
        return Err(Error::dimension("reparameterisation noise", tape.shape(q.mean).to_vec(), noise.shape().to_vec()));
    }
    let eps = tape.constant(noise.shape(), noise.data().to_vec());
    let half = tape.scale(q.log_variance, 0.5);
    let std = tape.exp(half);
    let scaled = tape.mul(std, eps);
    let z = tape.add(q.mean, scaled);
    Ok(LatentSample { z, source })
}

/// `KL(q ‖ N(0, I))` per batch row: `0.5·Σ(μ² + σ² − 1 − ln σ²)`.
pub fn kl_to_standard_normal(tape: &mut Tape, q: &DiagonalGaussian) -> Var {
    let mu2 = tape.square(q.mean);
    let var = tape.exp(q.log_variance);
    let a = tape.add(mu2, var);
    let b = tape.sub(a, q.log_variance);
    let c = tape.add_scalar(b, -1.0);
    let per_row = tape.sum_rows(c);
    tape.scale(per_row, 0.5)
}

/// `ln q(z)` per batch row.
pub fn log_prob(tape: &mut Tape, q: &DiagonalGaussian, z: Var) -> Result<Var> {
    if tape.shape(z) != tape.shape(q.mean) {
        return Err(Error::dimension("log_prob z", tape.shape(q.mean).to_vec(), tape.shape(z).to_vec()));
    }
    let diff = tape.sub(z, q.mean);
    let sq = tape.square(diff);
    let var = tape.exp(q.log_variance);
    let quad = tape.div(sq, var);
    let inner = tape.add(quad, q.log_variance);
    let inner = tape.add_scalar(inner, LN_2PI);
    let per_row = tape.sum_rows(inner);
    Ok(tape.scale(per_row, -0.5))
}
