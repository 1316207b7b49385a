#![allow(dead_code)]

use mmvb::fusion::DmvaeLatentLayout;
use mmvb::model::{
    ModalityBatch, ModalityData, ModalityKind, ModalitySpec, ModelSpec, MultimodalVae, Strategy, ALPHABET_SIZE,
};
use mmvb::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOY_PIXELS: usize = 6;
pub const TOY_TEXT_LEN: usize = 2;

/// Six-pixel image plus two-character text.
pub fn toy_spec(strategy: Strategy, latent: usize) -> ModelSpec {
    sized_spec(strategy, latent, 5, TOY_PIXELS, TOY_TEXT_LEN)
}

pub fn sized_spec(strategy: Strategy, latent: usize, hidden: usize, pixels: usize, text_len: usize) -> ModelSpec {
    let modality = |kind| ModalitySpec { kind, encoder_hidden: vec![hidden], decoder_hidden: vec![hidden] };
    ModelSpec {
        strategy,
        modalities: vec![modality(ModalityKind::Image { pixels }), modality(ModalityKind::Text { max_len: text_len })],
        latent_dim: latent,
        dmvae_layout: (strategy == Strategy::Dmvae).then(|| DmvaeLatentLayout::new(latent, vec![2, 2]).unwrap()),
    }
}

/// The image modality alone.
pub fn unimodal_spec(strategy: Strategy, latent: usize) -> ModelSpec {
    ModelSpec {
        strategy,
        modalities: vec![ModalitySpec {
            kind: ModalityKind::Image { pixels: TOY_PIXELS },
            encoder_hidden: vec![5],
            decoder_hidden: vec![5],
        }],
        latent_dim: latent,
        dmvae_layout: (strategy == Strategy::Dmvae).then(|| DmvaeLatentLayout::new(latent, vec![2]).unwrap()),
    }
}

pub fn toy_model(spec: ModelSpec, seed: u64) -> MultimodalVae {
    MultimodalVae::new(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Uniform pixels and texts of random length.
fn toy_tensors(batch: usize, seed: u64, pixels: usize, text_len: usize) -> (Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image: Vec<f64> = (0..batch * pixels).map(|_| rng.random::<f64>()).collect();
    let mut onehot = vec![0.0; batch * text_len * ALPHABET_SIZE];
    let mut mask = vec![0.0; batch * text_len];
    for b in 0..batch {
        for p in 0..rng.random_range(1..=text_len) {
            onehot[(b * text_len + p) * ALPHABET_SIZE + rng.random_range(0..ALPHABET_SIZE)] = 1.0;
            mask[b * text_len + p] = 1.0;
        }
    }
    (
        Tensor::new(&[batch, pixels], image).unwrap(),
        Tensor::new(&[batch, text_len, ALPHABET_SIZE], onehot).unwrap(),
        Tensor::new(&[batch, text_len], mask).unwrap(),
    )
}

pub fn toy_batch(batch: usize, seed: u64) -> ModalityBatch {
    sized_batch(batch, seed, TOY_PIXELS, TOY_TEXT_LEN)
}

pub fn sized_batch(batch: usize, seed: u64, pixels: usize, text_len: usize) -> ModalityBatch {
    let (image, onehot, mask) = toy_tensors(batch, seed, pixels, text_len);
    ModalityBatch::bimodal(image, onehot, mask).unwrap()
}

pub fn unimodal_batch(batch: usize, seed: u64) -> ModalityBatch {
    let (image, _, _) = toy_tensors(batch, seed, TOY_PIXELS, TOY_TEXT_LEN);
    ModalityBatch::new(vec![Some(ModalityData::Image(image))]).unwrap()
}
