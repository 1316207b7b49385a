//! The four multimodal VAEs: encoders, decoders, posteriors and generation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::distributions::DiagonalGaussian;
use crate::error::{Error, Result};
use crate::fusion::{poe_fuse, DmvaeLatentLayout, ExpertSet};
use crate::nn::{Activation, Mlp, MlpSpec, OutputHeads};
use crate::tensor::{ParamStore, Tensor};

/// Symbols per text position: `a..z` and space.
pub const ALPHABET_SIZE: usize = 27;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Mvae,
    Mmvae,
    Mopoe,
    Dmvae,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Mvae, Strategy::Mmvae, Strategy::Mopoe, Strategy::Dmvae];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Mvae => "mvae",
            Strategy::Mmvae => "mmvae",
            Strategy::Mopoe => "mopoe",
            Strategy::Dmvae => "dmvae",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModalityKind {
    /// Flattened pixels in `[0, 1]`.
    Image { pixels: usize },
    /// One-hot characters over [`ALPHABET_SIZE`] symbols.
    Text { max_len: usize },
}

impl ModalityKind {
    pub fn width(self) -> usize {
        match self {
            ModalityKind::Image { pixels } => pixels,
            ModalityKind::Text { max_len } => max_len * ALPHABET_SIZE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub kind: ModalityKind,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
}

/// Everything needed to rebuild a model around a parameter store.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub strategy: Strategy,
    pub modalities: Vec<ModalitySpec>,
    /// Width of the fused latent; for the disentangled model this is the
    /// shared width and `dmvae_layout` holds the private widths.
    pub latent_dim: usize,
    pub dmvae_layout: Option<DmvaeLatentLayout>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() || self.latent_dim == 0 {
            return Err(Error::Contract("a model needs at least one modality and a positive latent width".into()));
        }
        match (self.strategy, &self.dmvae_layout) {
            (Strategy::Dmvae, None) => Err(Error::Contract("dmvae needs a latent layout".into())),
            (Strategy::Dmvae, Some(l)) if l.private_dims.len() != self.modalities.len() => Err(Error::Contract(
                format!("layout has {} private blocks for {} modalities", l.private_dims.len(), self.modalities.len()),
            )),
            (Strategy::Dmvae, Some(l)) if l.shared_dim != self.latent_dim => Err(Error::Contract(format!(
                "dmvae latent_dim {} differs from shared width {}",
                self.latent_dim, l.shared_dim
            ))),
            (Strategy::Dmvae, Some(_)) => Ok(()),
            (_, Some(_)) => Err(Error::Contract(format!("{} takes no private layout", self.strategy))),
            (_, None) => Ok(()),
        }
    }

    /// Encoder head width and decoder input width of modality `m`.
    pub fn modality_latent_width(&self, m: usize) -> usize {
        match &self.dmvae_layout {
            Some(l) => l.modality_width(m),
            None => self.latent_dim,
        }
    }

    /// Width of the latent used for traversals and joint generation.
    pub fn total_latent_dim(&self) -> usize {
        match &self.dmvae_layout {
            Some(l) => l.total_dim(),
            None => self.latent_dim,
        }
    }

    fn encoder_spec(&self, m: usize) -> Result<MlpSpec> {
        let ms = &self.modalities[m];
        let mut widths = vec![ms.kind.width()];
        widths.extend(&ms.encoder_hidden);
        widths.push(self.modality_latent_width(m));
        MlpSpec::new(widths, Activation::Relu, OutputHeads::GaussianPair)
    }

    fn decoder_spec(&self, m: usize) -> Result<MlpSpec> {
        let ms = &self.modalities[m];
        let mut widths = vec![self.modality_latent_width(m)];
        widths.extend(&ms.decoder_hidden);
        widths.push(ms.kind.width());
        MlpSpec::new(widths, Activation::Relu, OutputHeads::Single)
    }
}

/// One modality's slice of a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum ModalityData {
    /// `batch × pixels`, values in `[0, 1]`.
    Image(Tensor),
    /// `onehot` is `batch × max_len × 27`, `mask` is `batch × max_len` of 0/1.
    Text { onehot: Tensor, mask: Tensor },
}

impl ModalityData {
    pub fn batch_size(&self) -> usize {
        match self {
            ModalityData::Image(t) => t.shape()[0],
            ModalityData::Text { onehot, .. } => onehot.shape()[0],
        }
    }

    /// Encoder input, `batch × width`.
    pub fn flat(&self) -> (Vec<usize>, &[f64]) {
        match self {
            ModalityData::Image(t) => (t.shape().to_vec(), t.data()),
            ModalityData::Text { onehot, .. } => {
                let s = onehot.shape();
                (vec![s[0], s[1] * s[2]], onehot.data())
            }
        }
    }

    /// Rows `rows` of this modality, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        fn pick(t: &Tensor, rows: &[usize]) -> Tensor {
            let width: usize = t.shape()[1..].iter().product();
            let mut shape = t.shape().to_vec();
            shape[0] = rows.len();
            let data = rows.iter().flat_map(|&r| t.data()[r * width..(r + 1) * width].iter().copied()).collect();
            Tensor::new(&shape, data).expect("row selection keeps the shape consistent")
        }
        match self {
            ModalityData::Image(t) => ModalityData::Image(pick(t, rows)),
            ModalityData::Text { onehot, mask } => {
                ModalityData::Text { onehot: pick(onehot, rows), mask: pick(mask, rows) }
            }
        }
    }
}

/// A batch over all modalities; absent modalities are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBatch {
    pub data: Vec<Option<ModalityData>>,
}

impl ModalityBatch {
    pub fn new(data: Vec<Option<ModalityData>>) -> Result<Self> {
        let mut sizes = data.iter().flatten().map(ModalityData::batch_size);
        let first =
            sizes.next().ok_or_else(|| Error::Contract("a batch needs at least one present modality".into()))?;
        if let Some(other) = sizes.find(|&s| s != first) {
            return Err(Error::dimension("batch size across modalities", [first], [other]));
        }
        if first == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        for d in data.iter().flatten() {
            if let ModalityData::Text { onehot, mask } = d {
                let s = onehot.shape();
                if s.len() != 3 || s[2] != ALPHABET_SIZE || mask.shape() != [s[0], s[1]] {
                    return Err(Error::dimension("text onehot/mask", vec![s[0], s[1], ALPHABET_SIZE], s.to_vec()));
                }
            }
        }
        Ok(Self { data })
    }

    /// The usual image + caption pair.
    pub fn bimodal(image: Tensor, onehot: Tensor, mask: Tensor) -> Result<Self> {
        Self::new(vec![Some(ModalityData::Image(image)), Some(ModalityData::Text { onehot, mask })])
    }

    pub fn batch_size(&self) -> usize {
        self.data.iter().flatten().next().map_or(0, ModalityData::batch_size)
    }

    pub fn availability(&self) -> Vec<bool> {
        self.data.iter().map(Option::is_some).collect()
    }

    pub fn get(&self, m: usize) -> Option<&ModalityData> {
        self.data.get(m).and_then(Option::as_ref)
    }

    /// Keep only modality `m`.
    pub fn only(&self, m: usize) -> Self {
        Self { data: self.data.iter().enumerate().map(|(i, d)| if i == m { d.clone() } else { None }).collect() }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self { data: self.data.iter().map(|d| d.as_ref().map(|d| d.select_rows(rows))).collect() }
    }
}

/// Per-modality encoder outputs. For the disentangled model each expert is
/// split into a private and a shared part; otherwise `private` is empty.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub shared: Vec<Option<DiagonalGaussian>>,
    pub private: Vec<Option<DiagonalGaussian>>,
}

#[derive(Clone, Debug)]
pub struct MultimodalVae {
    spec: ModelSpec,
    encoders: Vec<Mlp>,
    decoders: Vec<Mlp>,
    pub params: ParamStore,
}

fn enc_name(m: usize) -> String {
    format!("enc{m}")
}

fn dec_name(m: usize) -> String {
    format!("dec{m}")
}

impl MultimodalVae {
    pub fn new(spec: ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        for m in 0..spec.modalities.len() {
            encoders.push(Mlp::new(&enc_name(m), spec.encoder_spec(m)?, &mut params, rng)?);
            decoders.push(Mlp::new(&dec_name(m), spec.decoder_spec(m)?, &mut params, rng)?);
        }
        Ok(Self { spec, encoders, decoders, params })
    }

    /// Rebuild around existing parameters (e.g. a loaded checkpoint).
    pub fn from_params(spec: ModelSpec, params: ParamStore) -> Result<Self> {
        spec.validate()?;
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        for m in 0..spec.modalities.len() {
            encoders.push(Mlp::bind(&enc_name(m), spec.encoder_spec(m)?, &params)?);
            decoders.push(Mlp::bind(&dec_name(m), spec.decoder_spec(m)?, &params)?);
        }
        let expected: usize = encoders.iter().chain(&decoders).map(|n| n.param_ids().count()).sum();
        if expected != params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, the model uses {expected}",
                params.len()
            )));
        }
        Ok(Self { spec, encoders, decoders, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn strategy(&self) -> Strategy {
        self.spec.strategy
    }

    pub fn modality_count(&self) -> usize {
        self.spec.modalities.len()
    }

    pub fn modality_kind(&self, m: usize) -> ModalityKind {
        self.spec.modalities[m].kind
    }

    fn check_batch(&self, batch: &ModalityBatch) -> Result<()> {
        if batch.data.len() != self.modality_count() {
            return Err(Error::Contract(format!(
                "batch has {} modalities, model has {}",
                batch.data.len(),
                self.modality_count()
            )));
        }
        for (m, d) in batch.data.iter().enumerate() {
            let Some(d) = d else { continue };
            let kind = self.modality_kind(m);
            let ok = match (kind, d) {
                (ModalityKind::Image { pixels }, ModalityData::Image(t)) => t.shape()[1..] == [pixels],
                (ModalityKind::Text { max_len }, ModalityData::Text { onehot, .. }) => {
                    onehot.shape()[1..] == [max_len, ALPHABET_SIZE]
                }
                _ => false,
            };
            if !ok {
                return Err(Error::dimension(
                    format!("modality {m} input"),
                    vec![kind.width()],
                    d.flat().0[1..].to_vec(),
                ));
            }
        }
        Ok(())
    }

    /// Run every present modality's encoder.
    pub fn encode(&self, tape: &mut Tape, batch: &ModalityBatch) -> Result<Encoded> {
        self.check_batch(batch)?;
        let mut shared = Vec::new();
        let mut private = Vec::new();
        for (m, d) in batch.data.iter().enumerate() {
            let Some(d) = d else {
                shared.push(None);
                if self.spec.dmvae_layout.is_some() {
                    private.push(None);
                }
                continue;
            };
            let (shape, values) = d.flat();
            let x = tape.constant(&shape, values.to_vec());
            let (mean, log_variance) = self.encoders[m].forward(tape, &self.params, x)?.pair();
            let q = DiagonalGaussian::new(tape, mean, log_variance)?;
            match &self.spec.dmvae_layout {
                None => shared.push(Some(q)),
                Some(l) => {
                    let p = l.private_dims[m];
                    private.push(Some(q.slice(tape, 0, p)));
                    shared.push(Some(q.slice(tape, p, p + l.shared_dim)));
                }
            }
        }
        Ok(Encoded { shared, private })
    }

    /// Decoder logits for modality `m` from its decoder input `z`.
    pub fn decode(&self, tape: &mut Tape, m: usize, z: Var) -> Result<Var> {
        Ok(self.decoders[m].forward(tape, &self.params, z)?.single())
    }

    /// The posterior used when only modality `m` is observed: product with
    /// the prior for the product-based models, the raw expert for the
    /// mixture. For the disentangled model this is the shared part only.
    pub fn unimodal_posterior(&self, tape: &mut Tape, enc: &Encoded, m: usize) -> Result<DiagonalGaussian> {
        let expert = enc.shared[m].ok_or_else(|| Error::Contract(format!("modality {m} not encoded")))?;
        match self.spec.strategy {
            Strategy::Mvae | Strategy::Mopoe => {
                let set = ExpertSet::new(tape, enc.shared.clone())?.restrict(&[m]);
                poe_fuse(tape, &set, true)
            }
            Strategy::Mmvae | Strategy::Dmvae => Ok(expert),
        }
    }

    /// Posterior means decoded into modality `target` from modality `source`.
    /// Returns decoder outputs: probabilities for images, logits for text.
    pub fn cross_generate(&self, batch: &ModalityBatch, source: usize, target: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut z = self.posterior_mean_var(&mut tape, batch, source)?;
        if let Some(l) = &self.spec.dmvae_layout {
            let b = batch.batch_size();
            let private = tape.constant(&[b, l.private_dims[target]], vec![0.0; b * l.private_dims[target]]);
            z = tape.concat_cols(private, z);
        }
        let out = self.decode(&mut tape, target, z)?;
        Ok(self.finish_output(&mut tape, target, out))
    }

    fn posterior_mean_var(&self, tape: &mut Tape, batch: &ModalityBatch, source: usize) -> Result<Var> {
        let enc = self.encode(tape, &batch.only(source))?;
        Ok(self.unimodal_posterior(tape, &enc, source)?.mean())
    }

    /// Mean of the (shared) posterior given modality `source` alone,
    /// `batch × latent_dim`.
    pub fn posterior_mean(&self, batch: &ModalityBatch, source: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let z = self.posterior_mean_var(&mut tape, batch, source)?;
        Ok(tape.tensor(z))
    }

    fn finish_output(&self, tape: &mut Tape, m: usize, logits: Var) -> Tensor {
        match self.modality_kind(m) {
            ModalityKind::Image { .. } => {
                let p = tape.sigmoid(logits);
                tape.tensor(p)
            }
            ModalityKind::Text { .. } => tape.tensor(logits),
        }
    }

    /// Decode full latents (`rows × total_latent_dim`) into every modality.
    /// For the disentangled model columns are `[private_0, …, shared]`.
    pub fn decode_latents(&self, latents: &Tensor) -> Result<Vec<Tensor>> {
        let total = self.spec.total_latent_dim();
        if latents.shape().len() != 2 || latents.shape()[1] != total {
            return Err(Error::dimension("latents", vec![latents.shape()[0], total], latents.shape().to_vec()));
        }
        let mut tape = Tape::new();
        let z = tape.leaf(latents.clone());
        let mut outs = Vec::new();
        for m in 0..self.modality_count() {
            let input = match &self.spec.dmvae_layout {
                None => z,
                Some(l) => {
                    let start: usize = l.private_dims[..m].iter().sum();
                    let private = tape.slice_cols(z, start, start + l.private_dims[m]);
                    let shared_start = total - l.shared_dim;
                    let shared = tape.slice_cols(z, shared_start, total);
                    tape.concat_cols(private, shared)
                }
            };
            let out = self.decode(&mut tape, m, input)?;
            outs.push(self.finish_output(&mut tape, m, out));
        }
        Ok(outs)
    }
}

/// Latent traversal: for each dimension `d` and each of `per_dim` values
/// spread evenly over `[lo, hi]`, the latent with `value` at `d` and zeros
/// elsewhere. A single value sits at the midpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct TraversalPlan {
    pub latent_dim: usize,
    pub values: Vec<f64>,
}

impl TraversalPlan {
    pub fn new(latent_dim: usize, per_dim: usize, lo: f64, hi: f64) -> Result<Self> {
        if latent_dim == 0 || per_dim == 0 || !(lo <= hi) {
            return Err(Error::Contract(format!(
                "traversal needs positive sizes and lo <= hi (got {latent_dim} dims, {per_dim} values, [{lo}, {hi}])"
            )));
        }
        let values = if per_dim == 1 {
            vec![0.5 * (lo + hi)]
        } else {
            (0..per_dim).map(|i| lo + (hi - lo) * i as f64 / (per_dim - 1) as f64).collect()
        };
        Ok(Self { latent_dim, values })
    }

    pub fn len(&self) -> usize {
        self.latent_dim * self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(dimension, value)` of output `i`; outputs are ordered by dimension.
    pub fn point(&self, i: usize) -> (usize, f64) {
        (i / self.values.len(), self.values[i % self.values.len()])
    }

    /// Latents for outputs `start..end`.
    pub fn latents(&self, start: usize, end: usize) -> Tensor {
        let mut data = vec![0.0; (end - start) * self.latent_dim];
        for (row, i) in (start..end).enumerate() {
            let (d, v) = self.point(i);
            data[row * self.latent_dim + d] = v;
        }
        Tensor::new(&[end - start, self.latent_dim], data).expect("traversal chunk shape")
    }
}

/// Decode a traversal in chunks of `chunk` rows, calling `sink` with the
/// first output index of the chunk and the per-modality outputs.
pub fn joint_generate_traversal(
    model: &MultimodalVae,
    plan: &TraversalPlan,
    chunk: usize,
    mut sink: impl FnMut(usize, Vec<Tensor>) -> Result<()>,
) -> Result<()> {
    if plan.latent_dim != model.spec().total_latent_dim() {
        return Err(Error::dimension("traversal width", [model.spec().total_latent_dim()], [plan.latent_dim]));
    }
    let chunk = chunk.max(1);
    let mut start = 0;
    while start < plan.len() {
        let end = (start + chunk).min(plan.len());
        sink(start, model.decode_latents(&plan.latents(start, end))?)?;
        start = end;
    }
    Ok(())
}
