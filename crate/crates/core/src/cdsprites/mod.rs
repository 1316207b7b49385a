//! CdSprites+: captioned, textured shapes at five difficulty levels.

mod attributes;
mod caption;
mod dataset;
mod render;

pub use attributes::{AttributeSet, Background, Color, Feature, Level, Quadrant, Shape, Size};
pub use caption::{
    decode_caption, decode_caption_logits, encode_caption, make_caption, CaptionEncoding, MAX_CAPTION_LEN,
};
pub use dataset::{
    batch_from_records, batch_order, generate_dataset, image_modality, sample_seed, split_attributes, text_modality,
    DatasetInfo, DatasetReader, LevelSpec, Record, Split,
};
pub use render::{
    decode_png, encode_png, encode_rgb_png, render_image, shape_centroid_offset, RgbImage, IMAGE_PIXELS, IMAGE_SIDE,
};

/// One datum: image, caption and the attributes that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub caption: String,
    pub attributes: AttributeSet,
    pub rng_seed: u64,
}

impl Sample {
    pub fn generate(attributes: AttributeSet, rng_seed: u64) -> Self {
        Self { image: render_image(&attributes, rng_seed), caption: make_caption(&attributes), attributes, rng_seed }
    }
}
