//! Automatic coherence scoring of generated images and captions.

mod classifier;
mod coherence;
mod features;
mod parse;

pub use classifier::{
    train_shape_classifier, ShapeClassifier, CLASSIFIER_FORMAT_VERSION, DEFAULT_TRAINING_SAMPLES, DEFAULT_TRAINING_SEED,
};
pub use coherence::{
    letters_fraction, score_img2txt, score_joint, score_txt2img, CoherenceReport, CrossGenerator, Direction,
    FeatureAccuracy, JointGenerator, ModelGenerator, SampleSet,
};
pub use features::{Evaluator, FeaturePrediction, FeatureValue, MaskStats, MIN_MASK_PIXELS};
pub use parse::{parse_caption, CaptionParse};
