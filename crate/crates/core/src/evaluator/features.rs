use serde::{Deserialize, Serialize};

use crate::cdsprites::{AttributeSet, Background, Color, Feature, Level, Quadrant, RgbImage, Shape, Size, IMAGE_SIDE};
use crate::error::Result;

use super::classifier::ShapeClassifier;

/// Masks smaller than this are treated as "no shape found".
pub const MIN_MASK_PIXELS: usize = 10;
/// Per-channel deviation from the background estimate that marks a shape pixel.
const MASK_THRESHOLD: f64 = 0.15;
const LUMINANCE_THRESHOLD: f64 = 0.5;
const CENTER: f64 = IMAGE_SIDE as f64 / 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "feature", content = "value", rename_all = "snake_case")]
pub enum FeatureValue {
    Size(Size),
    Color(Color),
    Shape(Shape),
    Quadrant(Quadrant),
    Background(Background),
}

impl FeatureValue {
    pub fn feature(self) -> Feature {
        match self {
            FeatureValue::Size(_) => Feature::Size,
            FeatureValue::Color(_) => Feature::Color,
            FeatureValue::Shape(_) => Feature::Shape,
            FeatureValue::Quadrant(_) => Feature::Quadrant,
            FeatureValue::Background(_) => Feature::Background,
        }
    }

    /// The value `attributes` holds for `feature`, if it is set.
    pub fn of(attributes: &AttributeSet, feature: Feature) -> Option<Self> {
        match feature {
            Feature::Size => Some(FeatureValue::Size(attributes.size)),
            Feature::Color => attributes.color.map(FeatureValue::Color),
            Feature::Shape => Some(FeatureValue::Shape(attributes.shape)),
            Feature::Quadrant => attributes.quadrant.map(FeatureValue::Quadrant),
            Feature::Background => Some(FeatureValue::Background(attributes.background)),
        }
    }
}

/// Features read off one image. Holds exactly the level's features, or
/// nothing when no shape was found.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePrediction {
    pub level: Level,
    /// `(value, confidence in [0, 1])` in the level's feature order.
    pub values: Vec<(FeatureValue, f64)>,
}

impl FeaturePrediction {
    pub fn unrecognized(level: Level) -> Self {
        Self { level, values: Vec::new() }
    }

    pub fn recognized(&self) -> bool {
        !self.values.is_empty()
    }

    pub fn get(&self, feature: Feature) -> Option<FeatureValue> {
        self.values.iter().map(|(v, _)| *v).find(|v| v.feature() == feature)
    }

    pub fn confidence(&self, feature: Feature) -> Option<f64> {
        self.values.iter().find(|(v, _)| v.feature() == feature).map(|(_, c)| *c)
    }

    /// Level features whose predicted value equals the one in `truth`.
    pub fn matching(&self, truth: &AttributeSet) -> Vec<Feature> {
        self.level
            .features()
            .into_iter()
            .filter(|&f| self.get(f).is_some() && self.get(f) == FeatureValue::of(truth, f))
            .collect()
    }
}

/// Geometry of the foreground mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskStats {
    pub area: usize,
    pub cx: f64,
    pub cy: f64,
    pub mu20: f64,
    pub mu02: f64,
    pub mu11: f64,
}

impl MaskStats {
    pub fn of(mask: &[bool]) -> Self {
        let (mut n, mut sx, mut sy) = (0usize, 0.0, 0.0);
        for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            n += 1;
            sx += (i % IMAGE_SIDE) as f64 + 0.5;
            sy += (i / IMAGE_SIDE) as f64 + 0.5;
        }
        let (cx, cy) = if n > 0 { (sx / n as f64, sy / n as f64) } else { (CENTER, CENTER) };
        let (mut mu20, mut mu02, mut mu11) = (0.0, 0.0, 0.0);
        for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            let dx = (i % IMAGE_SIDE) as f64 + 0.5 - cx;
            let dy = (i / IMAGE_SIDE) as f64 + 0.5 - cy;
            mu20 += dx * dx;
            mu02 += dy * dy;
            mu11 += dx * dy;
        }
        let d = n.max(1) as f64;
        Self { area: n, cx, cy, mu20: mu20 / d, mu02: mu02 / d, mu11: mu11 / d }
    }
}

fn luminance(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

fn median(mut v: Vec<u8>) -> f64 {
    v.sort_unstable();
    let n = v.len();
    let m = if n % 2 == 1 { f64::from(v[n / 2]) } else { (f64::from(v[n / 2 - 1]) + f64::from(v[n / 2])) / 2.0 };
    m / 255.0
}

/// Per-channel median over the one-pixel image border.
pub fn border_median(image: &RgbImage) -> [f64; 3] {
    let last = IMAGE_SIDE - 1;
    let border: Vec<(usize, usize)> = (0..IMAGE_SIDE)
        .flat_map(|y| (0..IMAGE_SIDE).map(move |x| (x, y)))
        .filter(|&(x, y)| x == 0 || y == 0 || x == last || y == last)
        .collect();
    [0, 1, 2].map(|ch| median(border.iter().map(|&(x, y)| image.pixel(x, y)[ch]).collect()))
}

/// Shape pixels: any channel further than the threshold from `background`.
pub fn foreground_mask(image: &RgbImage, background: [f64; 3]) -> Vec<bool> {
    image
        .data
        .chunks_exact(3)
        .map(|p| (0..3).any(|ch| (f64::from(p[ch]) / 255.0 - background[ch]).abs() > MASK_THRESHOLD))
        .collect()
}

/// Brightness-normalised chromaticity: channels divided by the largest one.
fn chromaticity(rgb: [f64; 3]) -> [f64; 3] {
    let m = rgb.iter().cloned().fold(0.0, f64::max).max(1e-9);
    rgb.map(|c| c / m)
}

fn nearest_color(mean_rgb: [f64; 3]) -> (Color, f64) {
    let c = chromaticity(mean_rgb);
    let mut d: Vec<(Color, f64)> = Color::ALL
        .iter()
        .map(|&col| {
            let p = chromaticity(col.rgb());
            (col, (0..3).map(|i| (c[i] - p[i]).powi(2)).sum::<f64>().sqrt())
        })
        .collect();
    d.sort_by(|a, b| a.1.total_cmp(&b.1));
    let confidence = if d[1].1 > 0.0 { 1.0 - d[0].1 / d[1].1 } else { 0.0 };
    (d[0].0, confidence)
}

/// Frozen image classifiers for every scored feature.
#[derive(Clone, Debug)]
pub struct Evaluator {
    classifier: ShapeClassifier,
}

impl Evaluator {
    pub fn new(classifier: ShapeClassifier) -> Self {
        Self { classifier }
    }

    /// The evaluator with the shipped shape-classifier weights.
    pub fn frozen() -> Result<Self> {
        Ok(Self::new(ShapeClassifier::shipped()?))
    }

    pub fn classifier(&self) -> &ShapeClassifier {
        &self.classifier
    }

    pub fn size_threshold(&self) -> f64 {
        self.classifier.size_threshold
    }

    pub fn extract_features(&self, image: &RgbImage, level: Level) -> FeaturePrediction {
        let bg = border_median(image);
        let mask = foreground_mask(image, bg);
        let stats = MaskStats::of(&mask);
        if stats.area < MIN_MASK_PIXELS {
            return FeaturePrediction::unrecognized(level);
        }
        let threshold = self.size_threshold();
        let size = if stats.area as f64 >= threshold { Size::Big } else { Size::Small };
        let mut values = Vec::with_capacity(5);
        for feature in level.features() {
            values.push(match feature {
                Feature::Size => {
                    let c = ((stats.area as f64 / threshold).ln().abs() / 2.0).min(1.0);
                    (FeatureValue::Size(size), c)
                }
                Feature::Color => {
                    let mut sum = [0.0; 3];
                    for (p, _) in image.data.chunks_exact(3).zip(&mask).filter(|(_, m)| **m) {
                        (0..3).for_each(|ch| sum[ch] += f64::from(p[ch]) / 255.0);
                    }
                    let (c, conf) = nearest_color(sum.map(|s| s / stats.area as f64));
                    (FeatureValue::Color(c), conf)
                }
                Feature::Shape => {
                    let (s, p) = self.classifier.classify(&mask, &stats, size);
                    (FeatureValue::Shape(s), p)
                }
                Feature::Quadrant => {
                    let q = Quadrant::from_sides(stats.cy < CENTER, stats.cx < CENTER);
                    let c = ((stats.cx - CENTER).abs().min((stats.cy - CENTER).abs()) / CENTER).min(1.0);
                    (FeatureValue::Quadrant(q), c)
                }
                Feature::Background => {
                    let l = luminance(bg);
                    let b = if l > LUMINANCE_THRESHOLD { Background::Light } else { Background::Dark };
                    (FeatureValue::Background(b), ((l - LUMINANCE_THRESHOLD).abs() * 2.0).min(1.0))
                }
            });
        }
        FeaturePrediction { level, values }
    }
}
