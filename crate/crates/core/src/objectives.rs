//! Reconstruction likelihoods and the four training objectives.
//!
//! Every objective is a weighted sum of batch-mean entries, each either a
//! reconstruction log-likelihood of one target modality under one latent
//! sample, or a KL divergence to the standard normal prior:
//!
//! ```text
//! loss = Σ coefficient · value
//! ```
//!
//! Reconstruction coefficients are negative (`−λ_n · w`) and KL coefficients
//! positive (`β · w`), so `loss` is the negative ELBO to minimise.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::distributions::{
    kl_to_standard_normal, reparam_sample, standard_normal_noise, DiagonalGaussian, LatentSource,
};
use crate::error::{Error, Result};
use crate::fusion::{enumerate_subsets, moe_stratified_assign, poe_fuse, subset_label, ExpertSet};
use crate::model::{Encoded, ModalityBatch, ModalityData, ModalityKind, MultimodalVae, Strategy, ALPHABET_SIZE};
use crate::seed::{label_hash, rng_for};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub beta: f64,
    pub likelihood_weights: Vec<f64>,
    /// MVAE only: add the unimodal ELBO terms next to the joint one.
    pub subsample_unimodal: bool,
    /// Importance samples for evaluation-time log-likelihoods.
    pub importance_samples: usize,
    /// Include the `N(0, I)` expert in every product of experts.
    pub poe_prior: bool,
    /// MMVAE only: add the prior as an extra mixture component.
    pub mixture_prior_expert: bool,
}

impl ObjectiveConfig {
    pub fn new(modality_count: usize) -> Self {
        Self {
            beta: 1.0,
            likelihood_weights: vec![1.0; modality_count],
            subsample_unimodal: true,
            importance_samples: 1,
            poe_prior: true,
            mixture_prior_expert: false,
        }
    }

    pub fn validate(&self, modality_count: usize) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Contract(format!("beta must be positive, got {}", self.beta)));
        }
        if self.importance_samples == 0 {
            return Err(Error::Contract("importance_samples must be at least 1".into()));
        }
        if self.likelihood_weights.len() != modality_count {
            return Err(Error::Contract(format!(
                "{} likelihood weights for {modality_count} modalities",
                self.likelihood_weights.len()
            )));
        }
        if self.likelihood_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Contract("likelihood weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TermKind {
    Recon,
    Kl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    /// Which posterior/ELBO term the entry belongs to, e.g. `{0,1}`.
    pub term: String,
    pub kind: TermKind,
    /// Reconstructed modality for reconstruction entries.
    pub target: Option<usize>,
    /// Batch mean of the log-likelihood or the KL.
    pub value: f64,
    pub coefficient: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub entries: Vec<LossEntry>,
}

impl LossReport {
    /// Distinct term labels in order of first appearance.
    pub fn terms(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.term.as_str()) {
                out.push(&e.term);
            }
        }
        out
    }

    /// Loss contribution of each term label.
    pub fn term_totals(&self) -> Vec<(String, f64)> {
        self.terms()
            .into_iter()
            .map(|t| {
                let v = self.entries.iter().filter(|e| e.term == t).map(|e| e.coefficient * e.value).sum();
                (t.to_string(), v)
            })
            .collect()
    }

    /// Loss contribution of every reconstruction aimed at each modality.
    pub fn recon_per_modality(&self, modality_count: usize) -> Vec<f64> {
        let mut out = vec![0.0; modality_count];
        for e in self.entries.iter().filter(|e| e.kind == TermKind::Recon) {
            out[e.target.expect("recon entries carry a target")] += e.coefficient * e.value;
        }
        out
    }

    /// Loss contribution of every KL entry.
    pub fn kl(&self) -> f64 {
        self.entries.iter().filter(|e| e.kind == TermKind::Kl).map(|e| e.coefficient * e.value).sum()
    }

    pub fn count(&self, kind: TermKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }

    /// Recompute the total from the entries.
    pub fn sum_of_parts(&self) -> f64 {
        self.entries.iter().map(|e| e.coefficient * e.value).sum()
    }
}

/// Objective value on the tape plus its breakdown.
#[derive(Clone, Debug)]
pub struct Objective {
    pub loss: Var,
    pub report: LossReport,
}

/// Target of every padded text position.
const PAD_SYMBOL: usize = ALPHABET_SIZE - 1;

/// Per-row log-likelihood of `target` under decoder output `logits`.
///
/// Images: the logits pass through a sigmoid and are scored with a
/// unit-variance Gaussian, `−0.5·Σ(x − x̂)²` (normaliser dropped). Text: a
/// categorical per position. Masked positions are scored against a space
/// whatever their content, so the decoder learns where a caption ends.
pub fn recon_log_likelihood(tape: &mut Tape, kind: ModalityKind, logits: Var, target: &ModalityData) -> Result<Var> {
    let (rows, width) = match tape.shape(logits) {
        [r, w] => (*r, *w),
        s => return Err(Error::dimension("decoder output", vec![0, kind.width()], s.to_vec())),
    };
    if width != kind.width() || target.batch_size() != rows {
        return Err(Error::dimension("decoder output", vec![target.batch_size(), kind.width()], vec![rows, width]));
    }
    match (kind, target) {
        (ModalityKind::Image { .. }, ModalityData::Image(x)) => {
            let p = tape.sigmoid(logits);
            let x = tape.constant(x.shape(), x.data().to_vec());
            let d = tape.sub(p, x);
            let sq = tape.square(d);
            let s = tape.sum_rows(sq);
            Ok(tape.scale(s, -0.5))
        }
        (ModalityKind::Text { max_len }, ModalityData::Text { onehot, mask }) => {
            let masked: Vec<f64> = onehot
                .data()
                .chunks(ALPHABET_SIZE)
                .zip(mask.data())
                .flat_map(|(row, &m)| {
                    row.iter().enumerate().map(move |(i, v)| match (m > 0.5, i == PAD_SYMBOL) {
                        (true, _) => *v,
                        (false, pad) => f64::from(u8::from(pad)),
                    })
                })
                .collect();
            let per_position = tape.reshape(logits, &[rows * max_len, ALPHABET_SIZE]);
            let lsm = tape.log_softmax(per_position);
            let t = tape.constant(&[rows * max_len, ALPHABET_SIZE], masked);
            let picked = tape.mul(lsm, t);
            let flat = tape.reshape(picked, &[rows, width]);
            Ok(tape.sum_rows(flat))
        }
        _ => Err(Error::Contract("modality kind does not match its data".into())),
    }
}

/// Reparameterisation noise of one named term, derived from `seed`.
pub fn term_noise(seed: u64, label: &str, batch: usize, dim: usize) -> Tensor {
    standard_normal_noise(&mut rng_for(seed, &[label_hash(label)]), batch, dim)
}

struct Builder<'a> {
    tape: &'a mut Tape,
    model: &'a MultimodalVae,
    batch: &'a ModalityBatch,
    cfg: &'a ObjectiveConfig,
    seed: u64,
    pending: Vec<(LossEntry, Var)>,
}

impl<'a> Builder<'a> {
    fn sample(&mut self, q: &DiagonalGaussian, label: &str, source: LatentSource) -> Result<Var> {
        let (b, d) = q.batch_dim(self.tape);
        let noise = term_noise(self.seed, label, b, d);
        Ok(reparam_sample(self.tape, q, &noise, source)?.z)
    }

    /// Per-row log-likelihood of modality `n` decoded from `z`.
    fn recon_rows(&mut self, n: usize, z: Var) -> Result<Var> {
        let data = self.batch.get(n).ok_or_else(|| Error::Contract(format!("modality {n} missing from the batch")))?;
        let logits = self.model.decode(self.tape, n, z)?;
        recon_log_likelihood(self.tape, self.model.modality_kind(n), logits, data)
    }

    fn push(&mut self, term: &str, kind: TermKind, target: Option<usize>, value: Var, coefficient: f64) {
        let entry = LossEntry { term: term.to_string(), kind, target, value: self.tape.scalar(value), coefficient };
        self.pending.push((entry, value));
    }

    fn recon(&mut self, term: &str, n: usize, z: Var, weight: f64) -> Result<()> {
        let rows = self.recon_rows(n, z)?;
        let value = self.tape.mean(rows);
        self.push(term, TermKind::Recon, Some(n), value, -self.cfg.likelihood_weights[n] * weight);
        Ok(())
    }

    fn kl(&mut self, term: &str, q: &DiagonalGaussian, weight: f64) {
        let rows = kl_to_standard_normal(self.tape, q);
        let value = self.tape.mean(rows);
        self.push(term, TermKind::Kl, None, value, self.cfg.beta * weight);
    }

    /// One ELBO term: sample `q` once, reconstruct `targets`, add the KL.
    fn elbo_term(
        &mut self,
        term: &str,
        q: &DiagonalGaussian,
        targets: &[usize],
        weight: f64,
        source: LatentSource,
    ) -> Result<()> {
        let z = self.sample(q, term, source)?;
        for &n in targets {
            self.recon(term, n, z, weight)?;
        }
        self.kl(term, q, weight);
        Ok(())
    }

    fn finish(self) -> Objective {
        let mut loss = None;
        let mut entries = Vec::new();
        for (entry, value) in self.pending {
            let scaled = self.tape.scale(value, entry.coefficient);
            loss = Some(match loss {
                None => scaled,
                Some(acc) => self.tape.add(acc, scaled),
            });
            entries.push(entry);
        }
        let loss = loss.expect("objectives always produce entries");
        let total = self.tape.scalar(loss);
        Objective { loss, report: LossReport { total, entries } }
    }
}

fn require_all_present(batch: &ModalityBatch, strategy: Strategy) -> Result<()> {
    if let Some(m) = batch.availability().iter().position(|a| !a) {
        return Err(Error::Contract(format!("{strategy} trains on complete tuples; modality {m} is missing")));
    }
    Ok(())
}

fn check_strategy(model: &MultimodalVae, expected: Strategy) -> Result<()> {
    if model.strategy() != expected {
        return Err(Error::Contract(format!("{expected} objective on a {} model", model.strategy())));
    }
    Ok(())
}

/// Dispatch on the model's strategy. `seed` fixes all noise of the step.
pub fn objective(
    tape: &mut Tape,
    model: &MultimodalVae,
    batch: &ModalityBatch,
    cfg: &ObjectiveConfig,
    seed: u64,
) -> Result<Objective> {
    match model.strategy() {
        Strategy::Mvae => mvae_objective(tape, model, batch, cfg, seed),
        Strategy::Mmvae => mmvae_objective(tape, model, batch, cfg, seed),
        Strategy::Mopoe => mopoe_objective(tape, model, batch, cfg, seed),
        Strategy::Dmvae => dmvae_objective(tape, model, batch, cfg, seed),
    }
}

fn builder<'a>(
    tape: &'a mut Tape,
    model: &'a MultimodalVae,
    batch: &'a ModalityBatch,
    cfg: &'a ObjectiveConfig,
    seed: u64,
) -> Result<(Builder<'a>, Encoded)> {
    cfg.validate(model.modality_count())?;
    let enc = model.encode(tape, batch)?;
    Ok((Builder { tape, model, batch, cfg, seed, pending: Vec::new() }, enc))
}

/// Sum of ELBOs over the joint product of experts and, with subsampling,
/// each unimodal product; every term reconstructs only its own subset.
pub fn mvae_objective(
    tape: &mut Tape,
    model: &MultimodalVae,
    batch: &ModalityBatch,
    cfg: &ObjectiveConfig,
    seed: u64,
) -> Result<Objective> {
    check_strategy(model, Strategy::Mvae)?;
    let (mut b, enc) = builder(tape, model, batch, cfg, seed)?;
    let set = ExpertSet::new(b.tape, enc.shared.clone())?;
    let present: Vec<usize> = (0..model.modality_count()).filter(|&m| enc.shared[m].is_some()).collect();
    let mut subsets = vec![present.clone()];
    if cfg.subsample_unimodal {
        for &m in &present {
            if present != [m] {
                subsets.push(vec![m]);
            }
        }
    }
    for s in subsets {
        let q = poe_fuse(b.tape, &set.restrict(&s), cfg.poe_prior)?;
        b.elbo_term(&subset_label(&s), &q, &s, 1.0, LatentSource::Subset(s.clone()))?;
    }
    Ok(b.finish())
}

/// Stratified mixture of the unimodal experts: every batch row is assigned
/// one component, its sample reconstructs every modality, and each
/// component's reconstructions are averaged over its own rows.
pub fn mmvae_objective(
    tape: &mut Tape,
    model: &MultimodalVae,
    batch: &ModalityBatch,
    cfg: &ObjectiveConfig,
    seed: u64,
) -> Result<Objective> {
    check_strategy(model, Strategy::Mmvae)?;
    require_all_present(batch, Strategy::Mmvae)?;
    let (mut b, enc) = builder(tape, model, batch, cfg, seed)?;
    let m_count = model.modality_count();
    let (rows, dim) = enc.shared[0].unwrap().batch_dim(b.tape);
    let mut components: Vec<(String, DiagonalGaussian)> =
        enc.shared.iter().enumerate().map(|(m, q)| (subset_label(&[m]), q.unwrap())).collect();
    if cfg.mixture_prior_expert {
        components.push(("prior".into(), DiagonalGaussian::standard_normal(b.tape, rows, dim)));
    }
    let c_count = components.len();
    let assign = moe_stratified_assign(rows, c_count, &mut rng_for(seed, &[label_hash("assign")]))?;
    let weight = 1.0 / c_count as f64;

    let mut z = None;
    let mut row_weights = Vec::new();
    for (c, (label, q)) in components.iter().enumerate() {
        let source = if c < m_count { LatentSource::Modality(c) } else { LatentSource::Prior };
        let zc = b.sample(q, label, source)?;
        let hits = assign.iter().filter(|&&a| a == c).count() as f64;
        let indicator: Vec<f64> = assign.iter().map(|&a| f64::from(u8::from(a == c))).collect();
        let picked = if c_count == 1 {
            zc
        } else {
            let ind = b.tape.constant(&[rows], indicator.clone());
            b.tape.mul_rows(zc, ind)
        };
        z = Some(match z {
            None => picked,
            Some(acc) => b.tape.add(acc, picked),
        });
        row_weights.push(indicator.into_iter().map(|v| v / hits).collect::<Vec<f64>>());
    }
    let z = z.unwrap();
    let mut recon_rows = Vec::new();
    for n in 0..m_count {
        recon_rows.push(b.recon_rows(n, z)?);
    }
    for (c, (label, q)) in components.iter().enumerate() {
        for (n, &r) in recon_rows.iter().enumerate() {
            let value = if c_count == 1 {
                b.tape.mean(r)
            } else {
                let w = b.tape.constant(&[rows], row_weights[c].clone());
                let weighted = b.tape.mul(r, w);
                b.tape.sum(weighted)
            };
            b.push(label, TermKind::Recon, Some(n), value, -cfg.likelihood_weights[n] * weight);
        }
        if c < m_count {
            b.kl(label, q, weight);
        }
    }
    Ok(b.finish())
}

/// Average over every non-empty subset of an ELBO whose posterior is the
/// subset's product of experts; each term reconstructs every modality.
pub fn mopoe_objective(
    tape: &mut Tape,
    model: &MultimodalVae,
    batch: &ModalityBatch,
    cfg: &ObjectiveConfig,
    seed: u64,
) -> Result<Objective> {
    check_strategy(model, Strategy::Mopoe)?;
    require_all_present(batch, Strategy::Mopoe)?;
    let (mut b, enc) = builder(tape, model, batch, cfg, seed)?;
    let set = ExpertSet::new(b.tape, enc.shared.clone())?;
    let lattice = enumerate_subsets(model.modality_count())?;
    let all: Vec<usize> = (0..model.modality_count()).collect();
    let weight = 1.0 / lattice.len() as f64;
    for s in &lattice.subsets {
        let q = poe_fuse(b.tape, &set.restrict(s), cfg.poe_prior)?;
        b.elbo_term(&subset_label(s), &q, &all, weight, LatentSource::Subset(s.clone()))?;
    }
    Ok(b.finish())
}

/// Private plus product-fused shared latents. Modality `m` is reconstructed
/// from `(private_m, shared product)` and, for every other `n`, from
/// `(private_m, shared expert of n)`. KL terms cover every private
/// posterior and the fused shared posterior.
pub fn dmvae_objective(
    tape: &mut Tape,
    model: &MultimodalVae,
    batch: &ModalityBatch,
    cfg: &ObjectiveConfig,
    seed: u64,
) -> Result<Objective> {
    check_strategy(model, Strategy::Dmvae)?;
    require_all_present(batch, Strategy::Dmvae)?;
    let (mut b, enc) = builder(tape, model, batch, cfg, seed)?;
    let m_count = model.modality_count();
    let set = ExpertSet::new(b.tape, enc.shared.clone())?;
    let shared = poe_fuse(b.tape, &set, cfg.poe_prior)?;
    let z_shared = b.sample(&shared, "shared", LatentSource::Mixture)?;
    let mut z_private = Vec::new();
    for m in 0..m_count {
        let q = enc.private[m].unwrap();
        z_private.push(b.sample(&q, &format!("private{m}"), LatentSource::Modality(m))?);
    }
    let mut z_expert = Vec::new();
    for n in 0..m_count {
        let q = enc.shared[n].unwrap();
        z_expert.push(if m_count > 1 {
            Some(b.sample(&q, &format!("shared{n}"), LatentSource::Modality(n))?)
        } else {
            None
        });
    }
    for m in 0..m_count {
        let z = b.tape.concat_cols(z_private[m], z_shared);
        b.recon(&format!("self{m}"), m, z, 1.0)?;
        for n in (0..m_count).filter(|&n| n != m) {
            let z = b.tape.concat_cols(z_private[m], z_expert[n].unwrap());
            b.recon(&format!("cross{n}to{m}"), m, z, 1.0)?;
        }
    }
    for m in 0..m_count {
        let q = enc.private[m].unwrap();
        b.kl(&format!("private{m}"), &q, 1.0);
    }
    b.kl("shared", &shared, 1.0);
    Ok(b.finish())
}

/// Plain single-sample ELBO for a given posterior: `z = mean + σ·noise` is
/// decoded into each of `targets` (used directly as decoder input).
pub fn elbo(
    tape: &mut Tape,
    model: &MultimodalVae,
    batch: &ModalityBatch,
    cfg: &ObjectiveConfig,
    q: &DiagonalGaussian,
    noise: &Tensor,
    targets: &[usize],
) -> Result<Objective> {
    cfg.validate(model.modality_count())?;
    let mut b = Builder { tape, model, batch, cfg, seed: 0, pending: Vec::new() };
    let z = reparam_sample(b.tape, q, noise, LatentSource::Prior)?.z;
    for &n in targets {
        b.recon("elbo", n, z, 1.0)?;
    }
    b.kl("elbo", q, 1.0);
    Ok(b.finish())
}
