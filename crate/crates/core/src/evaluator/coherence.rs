use serde::{Deserialize, Serialize};

use crate::cdsprites::{
    decode_caption_logits, image_modality, make_caption, render_image, sample_seed, split_attributes, text_modality,
    AttributeSet, DatasetReader, Feature, Level, RgbImage, Split, IMAGE_PIXELS,
};
use crate::error::{Error, Result};
use crate::model::{ModalityBatch, MultimodalVae, TraversalPlan};
use crate::parallel::{map_range, map_slice};

use super::features::Evaluator;
use super::parse::parse_caption;

/// Rows per generation call.
const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Txt2img,
    Img2txt,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureAccuracy {
    pub feature: Feature,
    pub pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    pub direction: Direction,
    pub strict_pct: f64,
    pub features_mean: f64,
    pub features_sd: f64,
    pub features_total: usize,
    pub letters_pct: Option<f64>,
    pub n_samples: usize,
    pub per_feature: Vec<FeatureAccuracy>,
}

struct SampleScore {
    strict: bool,
    matches: Vec<Feature>,
    letters: Option<f64>,
}

impl CoherenceReport {
    fn build(direction: Direction, level: Level, scores: &[SampleScore]) -> Result<Self> {
        let n = scores.len();
        if n == 0 {
            return Err(Error::Contract("coherence needs at least one sample".into()));
        }
        let nf = n as f64;
        let counts: Vec<f64> = scores.iter().map(|s| s.matches.len() as f64).collect();
        let features_mean = counts.iter().sum::<f64>() / nf;
        let features_sd = (counts.iter().map(|c| (c - features_mean).powi(2)).sum::<f64>() / nf).sqrt();
        let letters: Vec<f64> = scores.iter().filter_map(|s| s.letters).collect();
        let per_feature = level
            .features()
            .into_iter()
            .map(|feature| FeatureAccuracy {
                feature,
                pct: 100.0 * scores.iter().filter(|s| s.matches.contains(&feature)).count() as f64 / nf,
            })
            .collect();
        let report = Self {
            direction,
            strict_pct: 100.0 * scores.iter().filter(|s| s.strict).count() as f64 / nf,
            features_mean,
            features_sd,
            features_total: level.features().len(),
            letters_pct: (!letters.is_empty()).then(|| 100.0 * letters.iter().sum::<f64>() / letters.len() as f64),
            n_samples: n,
            per_feature,
        };
        report.check()?;
        Ok(report)
    }

    /// Range checks plus Strict ≤ every per-feature accuracy.
    pub fn check(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Contract(format!("inconsistent {:?} report: {what}", self.direction)));
        if !(0.0..=100.0).contains(&self.strict_pct) {
            return bad(format!("strict {}", self.strict_pct));
        }
        if !(0.0..=self.features_total as f64).contains(&self.features_mean) {
            return bad(format!("features {} of {}", self.features_mean, self.features_total));
        }
        if let Some(f) = self.per_feature.iter().find(|f| self.strict_pct > f.pct + 1e-9) {
            return bad(format!("strict {} above {} accuracy {}", self.strict_pct, f.feature.name(), f.pct));
        }
        Ok(())
    }

    /// `Strict % / Features / Letters %` in the usual table layout.
    pub fn summary(&self) -> String {
        let mut s = format!("{:.1} / {:.2}/{}", self.strict_pct, self.features_mean, self.features_total);
        if let Some(l) = self.letters_pct {
            s.push_str(&format!(" / {l:.1}"));
        }
        s
    }
}

/// Fraction of ground-truth positions reproduced exactly. Trailing spaces of
/// `generated` are ignored; missing characters count as wrong.
pub fn letters_fraction(generated: &str, truth: &str) -> f64 {
    let generated: Vec<char> = generated.trim_end_matches(' ').chars().collect();
    let truth: Vec<char> = truth.chars().collect();
    if truth.is_empty() {
        return if generated.is_empty() { 1.0 } else { 0.0 };
    }
    let hits = truth.iter().zip(&generated).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

/// Images and captions with their ground-truth attributes.
#[derive(Clone, Debug)]
pub struct SampleSet {
    pub level: Level,
    pub attributes: Vec<AttributeSet>,
    pub captions: Vec<String>,
    pub images: Vec<RgbImage>,
}

impl SampleSet {
    pub fn from_reader(reader: &DatasetReader) -> Result<Self> {
        let images = (0..reader.len()).map(|i| reader.image(i)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            level: reader.level(),
            attributes: reader.records.iter().map(|r| r.attributes).collect(),
            captions: reader.records.iter().map(|r| r.caption.clone()).collect(),
            images,
        })
    }

    /// The first `n` samples of a split, rendered in memory exactly as the
    /// dataset generator would write them.
    pub fn generate(level: Level, split: Split, n: usize, master_seed: u64) -> Self {
        let attributes: Vec<AttributeSet> = (0..n).map(|i| split_attributes(level, i)).collect();
        let images = map_range(n, |i| render_image(&attributes[i], sample_seed(master_seed, split, i)));
        Self { level, captions: attributes.iter().map(make_caption).collect(), attributes, images }
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        self.attributes.truncate(n);
        self.captions.truncate(n);
        self.images.truncate(n);
    }
}

/// Anything that can translate between the two modalities.
pub trait CrossGenerator {
    fn images_from_captions(&self, captions: &[String]) -> Result<Vec<RgbImage>>;
    fn captions_from_images(&self, images: &[RgbImage]) -> Result<Vec<String>>;
}

/// Anything that emits image/caption pairs without input.
pub trait JointGenerator {
    fn joint_len(&self) -> usize;
    /// Pairs `start..end`.
    fn joint_chunk(&self, start: usize, end: usize) -> Result<Vec<(RgbImage, String)>>;
}

/// A trained model with image as modality 0 and text as modality 1.
pub struct ModelGenerator<'a> {
    pub model: &'a MultimodalVae,
    pub traversal: Option<TraversalPlan>,
}

impl<'a> ModelGenerator<'a> {
    pub fn new(model: &'a MultimodalVae) -> Self {
        Self { model, traversal: None }
    }

    pub fn with_traversal(model: &'a MultimodalVae, per_dim: usize, lo: f64, hi: f64) -> Result<Self> {
        let plan = TraversalPlan::new(model.spec().total_latent_dim(), per_dim, lo, hi)?;
        Ok(Self { model, traversal: Some(plan) })
    }
}

fn images_from_output(t: &crate::tensor::Tensor) -> Result<Vec<RgbImage>> {
    t.data().chunks(IMAGE_PIXELS).map(RgbImage::from_unit_floats).collect()
}

fn captions_from_output(t: &crate::tensor::Tensor) -> Vec<String> {
    let width: usize = t.shape()[1..].iter().product();
    t.data().chunks(width).map(decode_caption_logits).collect()
}

impl CrossGenerator for ModelGenerator<'_> {
    fn images_from_captions(&self, captions: &[String]) -> Result<Vec<RgbImage>> {
        let mut out = Vec::with_capacity(captions.len());
        for chunk in captions.chunks(CHUNK) {
            let refs: Vec<&str> = chunk.iter().map(String::as_str).collect();
            let batch = ModalityBatch::new(vec![None, Some(text_modality(&refs)?)])?;
            out.extend(images_from_output(&self.model.cross_generate(&batch, 1, 0)?)?);
        }
        Ok(out)
    }

    fn captions_from_images(&self, images: &[RgbImage]) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let refs: Vec<&RgbImage> = chunk.iter().collect();
            let batch = ModalityBatch::new(vec![Some(image_modality(&refs)?), None])?;
            out.extend(captions_from_output(&self.model.cross_generate(&batch, 0, 1)?));
        }
        Ok(out)
    }
}

impl JointGenerator for ModelGenerator<'_> {
    fn joint_len(&self) -> usize {
        self.traversal.as_ref().map_or(0, TraversalPlan::len)
    }

    fn joint_chunk(&self, start: usize, end: usize) -> Result<Vec<(RgbImage, String)>> {
        let plan = self.traversal.as_ref().ok_or_else(|| Error::Contract("no traversal configured".into()))?;
        let outs = self.model.decode_latents(&plan.latents(start, end))?;
        Ok(images_from_output(&outs[0])?.into_iter().zip(captions_from_output(&outs[1])).collect())
    }
}

/// Images generated from the test captions, scored against the captions'
/// attributes.
pub fn score_txt2img(
    generator: &impl CrossGenerator,
    test: &SampleSet,
    evaluator: &Evaluator,
) -> Result<CoherenceReport> {
    let images = generator.images_from_captions(&test.captions)?;
    if images.len() != test.len() {
        return Err(Error::dimension("generated images", [test.len()], [images.len()]));
    }
    let level = test.level;
    let scores = map_range(test.len(), |i| {
        let matches = evaluator.extract_features(&images[i], level).matching(&test.attributes[i]);
        SampleScore { strict: matches.len() == level.features().len(), matches, letters: None }
    });
    CoherenceReport::build(Direction::Txt2img, level, &scores)
}

/// Captions generated from the test images, scored against the ground-truth
/// captions.
pub fn score_img2txt(generator: &impl CrossGenerator, test: &SampleSet) -> Result<CoherenceReport> {
    let captions = generator.captions_from_images(&test.images)?;
    if captions.len() != test.len() {
        return Err(Error::dimension("generated captions", [test.len()], [captions.len()]));
    }
    let level = test.level;
    let scores = map_range(test.len(), |i| {
        let generated = captions[i].trim_end_matches(' ');
        SampleScore {
            strict: generated == test.captions[i],
            matches: parse_caption(generated, level).matching(&test.attributes[i]),
            letters: Some(letters_fraction(generated, &test.captions[i])),
        }
    });
    CoherenceReport::build(Direction::Img2txt, level, &scores)
}

/// Agreement between the image and caption of each generated pair.
pub fn score_joint(generator: &impl JointGenerator, level: Level, evaluator: &Evaluator) -> Result<CoherenceReport> {
    let total = generator.joint_len();
    let mut scores = Vec::with_capacity(total);
    let mut start = 0;
    while start < total {
        let end = (start + CHUNK).min(total);
        let pairs = generator.joint_chunk(start, end)?;
        if pairs.len() != end - start {
            return Err(Error::dimension("generated pairs", [end - start], [pairs.len()]));
        }
        scores.extend(map_slice(&pairs, |(image, caption)| {
            let seen = evaluator.extract_features(image, level);
            let read = parse_caption(caption.trim_end_matches(' '), level);
            let matches: Vec<Feature> =
                level.features().into_iter().filter(|&f| seen.get(f).is_some() && seen.get(f) == read.get(f)).collect();
            SampleScore {
                strict: seen.recognized() && read.complete && matches.len() == level.features().len(),
                matches,
                letters: None,
            }
        }));
        start = end;
    }
    CoherenceReport::build(Direction::Joint, level, &scores)
}
