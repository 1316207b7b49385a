//! Importance-weighted log-likelihood estimates.
//!
//! `log p̂(x) = log (1/K) Σ_k p(x | z_k) p(z_k) / q(z_k)` with `z_k ~ q`,
//! accumulated one sample at a time with a streaming log-sum-exp.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::distributions::{log_prob, reparam_sample, DiagonalGaussian, LatentSource};
use crate::error::{Error, Result};
use crate::fusion::{poe_fuse, ExpertSet};
use crate::model::{ModalityBatch, ModalityKind, MultimodalVae, Strategy};
use crate::objectives::{recon_log_likelihood, term_noise};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Batch-mean estimates with `x₁` the first modality and `x₂` the second.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLikelihoods {
    pub logp_x1: f64,
    pub logp_joint: f64,
    pub logp_x1_given_x2: f64,
    pub importance_samples: usize,
}

/// Running `ln mean exp` over a stream of values.
#[derive(Clone, Copy, Debug)]
pub struct LogMeanExp {
    max: f64,
    scaled_sum: f64,
    count: usize,
}

impl Default for LogMeanExp {
    fn default() -> Self {
        Self { max: f64::NEG_INFINITY, scaled_sum: 0.0, count: 0 }
    }
}

impl LogMeanExp {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        if x <= self.max {
            self.scaled_sum += (x - self.max).exp();
        } else {
            self.scaled_sum = self.scaled_sum * (self.max - x).exp() + 1.0;
            self.max = x;
        }
    }

    pub fn value(&self) -> f64 {
        if self.count == 0 {
            return f64::NEG_INFINITY;
        }
        self.max + (self.scaled_sum / self.count as f64).ln()
    }
}

/// Log-density of modality `m` with every normalising constant kept.
fn log_density(tape: &mut Tape, model: &MultimodalVae, batch: &ModalityBatch, m: usize, z: Var) -> Result<Vec<f64>> {
    let logits = model.decode(tape, m, z)?;
    let data = batch.get(m).ok_or_else(|| Error::Contract(format!("modality {m} missing")))?;
    let kind = model.modality_kind(m);
    let ll = recon_log_likelihood(tape, kind, logits, data)?;
    let offset = match kind {
        ModalityKind::Image { pixels } => -0.5 * pixels as f64 * LN_2PI,
        ModalityKind::Text { .. } => 0.0,
    };
    Ok(tape.value(ll).iter().map(|v| v + offset).collect())
}

fn standard_log_prob(tape: &mut Tape, z: Var) -> Result<Vec<f64>> {
    let (b, d) = (tape.shape(z)[0], tape.shape(z)[1]);
    let prior = DiagonalGaussian::standard_normal(tape, b, d);
    let lp = log_prob(tape, &prior, z)?;
    Ok(tape.value(lp).to_vec())
}

fn add(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
}

fn sample(tape: &mut Tape, q: &DiagonalGaussian, seed: u64, label: String) -> Result<Var> {
    let (b, d) = q.batch_dim(tape);
    Ok(reparam_sample(tape, q, &term_noise(seed, &label, b, d), LatentSource::Prior)?.z)
}

/// Per-row log importance weight of sample `k` for `log p(x₁)`.
///
/// The proposal is the posterior given `x₁` alone; for the disentangled
/// model it covers `x₁`'s private block and the shared block.
pub fn marginal_log_weight(model: &MultimodalVae, batch: &ModalityBatch, seed: u64, k: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let enc = model.encode(&mut tape, &batch.only(0))?;
    let mut q = model.unimodal_posterior(&mut tape, &enc, 0)?;
    if let Some(p) = enc.private.first().copied().flatten() {
        q = p.concat(&mut tape, &q)?;
    }
    let z = sample(&mut tape, &q, seed, format!("marginal{k}"))?;
    let mut w = log_density(&mut tape, model, batch, 0, z)?;
    add(&mut w, &standard_log_prob(&mut tape, z)?);
    let lq = log_prob(&mut tape, &q, z)?;
    w.iter_mut().zip(tape.value(lq)).for_each(|(w, q)| *w -= q);
    Ok(w)
}

/// Per-row log importance weight of sample `k` for `log p(x₁, …, x_M)`.
pub fn joint_log_weight(model: &MultimodalVae, batch: &ModalityBatch, seed: u64, k: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let enc = model.encode(&mut tape, batch)?;
    let m_count = model.modality_count();
    let set = ExpertSet::new(&tape, enc.shared.clone())?;
    let mut w;
    match model.strategy() {
        Strategy::Mvae | Strategy::Mopoe => {
            let q = poe_fuse(&mut tape, &set, true)?;
            let z = sample(&mut tape, &q, seed, format!("joint{k}"))?;
            w = standard_log_prob(&mut tape, z)?;
            for m in 0..m_count {
                add(&mut w, &log_density(&mut tape, model, batch, m, z)?);
            }
            let lq = log_prob(&mut tape, &q, z)?;
            w.iter_mut().zip(tape.value(lq)).for_each(|(w, q)| *w -= q);
        }
        Strategy::Mmvae => {
            // stratified over samples: sample k comes from expert k mod M
            let experts: Vec<DiagonalGaussian> = enc.shared.iter().map(|q| q.unwrap()).collect();
            let z = sample(&mut tape, &experts[k % m_count], seed, format!("joint{k}"))?;
            w = standard_log_prob(&mut tape, z)?;
            for m in 0..m_count {
                add(&mut w, &log_density(&mut tape, model, batch, m, z)?);
            }
            let mut mix = vec![LogMeanExp::default(); w.len()];
            for q in &experts {
                let lq = log_prob(&mut tape, q, z)?;
                mix.iter_mut().zip(tape.value(lq)).for_each(|(acc, v)| acc.push(*v));
            }
            w.iter_mut().zip(&mix).for_each(|(w, q)| *w -= q.value());
        }
        Strategy::Dmvae => {
            let shared = poe_fuse(&mut tape, &set, true)?;
            let zs = sample(&mut tape, &shared, seed, format!("joint{k}"))?;
            w = standard_log_prob(&mut tape, zs)?;
            let lq = log_prob(&mut tape, &shared, zs)?;
            w.iter_mut().zip(tape.value(lq)).for_each(|(w, q)| *w -= q);
            for m in 0..m_count {
                let p = enc.private[m].unwrap();
                let zp = sample(&mut tape, &p, seed, format!("joint{k}private{m}"))?;
                add(&mut w, &standard_log_prob(&mut tape, zp)?);
                let lq = log_prob(&mut tape, &p, zp)?;
                w.iter_mut().zip(tape.value(lq)).for_each(|(w, q)| *w -= q);
                let z = tape.concat_cols(zp, zs);
                add(&mut w, &log_density(&mut tape, model, batch, m, z)?);
            }
        }
    }
    Ok(w)
}

/// Per-row `log p(x₁ | z_k)` with `z_k` drawn from the posterior given `x₂`
/// (private blocks of the disentangled model come from the prior).
pub fn conditional_log_weight(model: &MultimodalVae, batch: &ModalityBatch, seed: u64, k: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let enc = model.encode(&mut tape, &batch.only(1))?;
    let q = model.unimodal_posterior(&mut tape, &enc, 1)?;
    let mut z = sample(&mut tape, &q, seed, format!("conditional{k}"))?;
    if let Some(l) = &model.spec().dmvae_layout {
        let b = batch.batch_size();
        let prior = DiagonalGaussian::standard_normal(&mut tape, b, l.private_dims[0]);
        let zp = sample(&mut tape, &prior, seed, format!("conditional{k}private"))?;
        z = tape.concat_cols(zp, z);
    }
    log_density(&mut tape, model, batch, 0, z)
}

fn estimate(k_samples: usize, rows: usize, mut weight: impl FnMut(usize) -> Result<Vec<f64>>) -> Result<Vec<f64>> {
    let mut acc = vec![LogMeanExp::default(); rows];
    for k in 0..k_samples {
        let w = weight(k)?;
        acc.iter_mut().zip(&w).for_each(|(a, w)| a.push(*w));
    }
    Ok(acc.iter().map(LogMeanExp::value).collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-row estimate of `log p(x₁)` with `k_samples` importance samples.
pub fn estimate_marginal(
    model: &MultimodalVae,
    batch: &ModalityBatch,
    k_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    estimate(k_samples, batch.batch_size(), |k| marginal_log_weight(model, batch, seed, k))
}

/// All three estimates, averaged over the batch. Needs both modalities.
pub fn estimate_log_likelihoods(
    model: &MultimodalVae,
    batch: &ModalityBatch,
    k_samples: usize,
    seed: u64,
) -> Result<LogLikelihoods> {
    if k_samples == 0 {
        return Err(Error::Contract("importance sampling needs K >= 1".into()));
    }
    if model.modality_count() < 2 || batch.availability().contains(&false) {
        return Err(Error::Contract("log-likelihood estimates need every modality present".into()));
    }
    let rows = batch.batch_size();
    Ok(LogLikelihoods {
        logp_x1: mean(&estimate_marginal(model, batch, k_samples, seed)?),
        logp_joint: mean(&estimate(k_samples, rows, |k| joint_log_weight(model, batch, seed, k))?),
        logp_x1_given_x2: mean(&estimate(k_samples, rows, |k| conditional_log_weight(model, batch, seed, k))?),
        importance_samples: k_samples,
    })
}
