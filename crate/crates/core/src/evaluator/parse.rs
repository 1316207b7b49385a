use crate::cdsprites::{AttributeSet, Background, Color, Feature, Level, Quadrant, Shape, Size};

use super::features::FeatureValue;

/// Slot-by-slot reading of a caption.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionParse {
    pub level: Level,
    /// One entry per level feature, in caption order; `None` when the slot
    /// (or one of the two position words) is not in the vocabulary.
    pub features: Vec<(Feature, Option<FeatureValue>)>,
    /// Filler words valid and no missing or extra tokens.
    pub complete: bool,
}

impl CaptionParse {
    pub fn get(&self, feature: Feature) -> Option<FeatureValue> {
        self.features.iter().find(|(f, _)| *f == feature).and_then(|(_, v)| *v)
    }

    pub fn valid_count(&self) -> usize {
        self.features.iter().filter(|(_, v)| v.is_some()).count()
    }

    /// The attribute set, when every slot parsed.
    pub fn attributes(&self) -> Option<AttributeSet> {
        if !self.complete || self.valid_count() != self.features.len() {
            return None;
        }
        let shape = match self.get(Feature::Shape)? {
            FeatureValue::Shape(s) => s,
            _ => return None,
        };
        let size = match self.get(Feature::Size) {
            Some(FeatureValue::Size(s)) => s,
            _ => Size::Big,
        };
        let color = match self.get(Feature::Color) {
            Some(FeatureValue::Color(c)) => Some(c),
            _ => None,
        };
        let quadrant = match self.get(Feature::Quadrant) {
            Some(FeatureValue::Quadrant(q)) => Some(q),
            _ => None,
        };
        let background = match self.get(Feature::Background) {
            Some(FeatureValue::Background(b)) => b,
            _ => Background::Dark,
        };
        AttributeSet::new(self.level, shape, size, color, quadrant, background).ok()
    }

    /// Level features parsed to the value held in `truth`.
    pub fn matching(&self, truth: &AttributeSet) -> Vec<Feature> {
        self.features
            .iter()
            .filter(|(f, v)| v.is_some() && *v == FeatureValue::of(truth, *f))
            .map(|(f, _)| *f)
            .collect()
    }
}

fn lookup<T: Copy>(all: &[T], word: Option<&str>, name: fn(T) -> &'static str) -> Option<T> {
    word.and_then(|w| all.iter().copied().find(|&v| name(v) == w))
}

/// Read `caption` against the positional vocabulary of `level`. Tokens are
/// split on single spaces, so doubled spaces leave an empty, invalid slot.
pub fn parse_caption(caption: &str, level: Level) -> CaptionParse {
    let tokens: Vec<&str> = if caption.is_empty() { Vec::new() } else { caption.split(' ').collect() };
    let mut pos = 0;
    let mut next = || {
        let t = tokens.get(pos).copied();
        pos += 1;
        t
    };
    let mut features = Vec::with_capacity(5);
    let mut fillers_ok = true;
    if level.varies_size() {
        features.push((Feature::Size, lookup(&Size::ALL, next(), Size::word).map(FeatureValue::Size)));
    }
    if level.varies_color() {
        features.push((Feature::Color, lookup(&Color::ALL, next(), Color::word).map(FeatureValue::Color)));
    }
    features.push((Feature::Shape, lookup(&Shape::ALL, next(), Shape::word).map(FeatureValue::Shape)));
    if level.varies_quadrant() {
        fillers_ok &= next() == Some("at");
        let top = match next() {
            Some("top") => Some(true),
            Some("bottom") => Some(false),
            _ => None,
        };
        let left = match next() {
            Some("left") => Some(true),
            Some("right") => Some(false),
            _ => None,
        };
        let q = top.zip(left).map(|(t, l)| FeatureValue::Quadrant(Quadrant::from_sides(t, l)));
        features.push((Feature::Quadrant, q));
    }
    if level.varies_background() {
        fillers_ok &= next() == Some("on");
        features.push((
            Feature::Background,
            lookup(&Background::ALL, next(), Background::word).map(FeatureValue::Background),
        ));
    }
    let complete = fillers_ok && pos == tokens.len() && features.iter().all(|(_, v)| v.is_some());
    CaptionParse { level, features, complete }
}
