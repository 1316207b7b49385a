use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Heart,
    Square,
    Ellipse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Size {
    Big,
    Small,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Pink,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Dark,
    Light,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Heart, Shape::Square, Shape::Ellipse];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Heart => "heart",
            Shape::Square => "square",
            Shape::Ellipse => "ellipse",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Big, Size::Small];

    pub fn word(self) -> &'static str {
        match self {
            Size::Big => "big",
            Size::Small => "small",
        }
    }

    /// Side of the shape's bounding box in pixels.
    pub fn box_pixels(self) -> f64 {
        match self {
            Size::Big => 40.0,
            Size::Small => 8.0,
        }
    }
}

impl Color {
    pub const ALL: [Color; 5] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Pink];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Pink => "pink",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Pink => [1.0, 0.41, 0.71],
        }
    }
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::TopLeft, Quadrant::TopRight, Quadrant::BottomLeft, Quadrant::BottomRight];

    pub fn is_top(self) -> bool {
        matches!(self, Quadrant::TopLeft | Quadrant::TopRight)
    }

    pub fn is_left(self) -> bool {
        matches!(self, Quadrant::TopLeft | Quadrant::BottomLeft)
    }

    pub fn from_sides(top: bool, left: bool) -> Self {
        match (top, left) {
            (true, true) => Quadrant::TopLeft,
            (true, false) => Quadrant::TopRight,
            (false, true) => Quadrant::BottomLeft,
            (false, false) => Quadrant::BottomRight,
        }
    }

    pub fn words(self) -> (&'static str, &'static str) {
        (if self.is_top() { "top" } else { "bottom" }, if self.is_left() { "left" } else { "right" })
    }
}

impl Background {
    pub const ALL: [Background; 2] = [Background::Dark, Background::Light];

    pub fn word(self) -> &'static str {
        match self {
            Background::Dark => "dark",
            Background::Light => "light",
        }
    }
}

/// Difficulty level, 1 to 5.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Level(u8);

impl TryFrom<u8> for Level {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Level::new(v)
    }
}

impl From<Level> for u8 {
    fn from(l: Level) -> u8 {
        l.0
    }
}

/// The attributes a level can vary, in caption order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Size,
    Color,
    Shape,
    Quadrant,
    Background,
}

impl Feature {
    pub fn name(self) -> &'static str {
        match self {
            Feature::Size => "size",
            Feature::Color => "color",
            Feature::Shape => "shape",
            Feature::Quadrant => "quadrant",
            Feature::Background => "background",
        }
    }
}

impl Level {
    pub fn new(v: u8) -> Result<Self> {
        if (1..=5).contains(&v) {
            Ok(Self(v))
        } else {
            Err(Error::Contract(format!("level must be in 1..=5, got {v}")))
        }
    }

    pub fn all() -> impl Iterator<Item = Level> {
        (1..=5).map(Level)
    }

    pub fn number(self) -> u8 {
        self.0
    }

    pub fn varies_size(self) -> bool {
        self.0 >= 2
    }

    pub fn varies_color(self) -> bool {
        self.0 >= 3
    }

    pub fn varies_quadrant(self) -> bool {
        self.0 >= 4
    }

    pub fn varies_background(self) -> bool {
        self.0 >= 5
    }

    /// Features scored at this level, in caption order.
    pub fn features(self) -> Vec<Feature> {
        let mut f = Vec::new();
        if self.varies_size() {
            f.push(Feature::Size);
        }
        if self.varies_color() {
            f.push(Feature::Color);
        }
        f.push(Feature::Shape);
        if self.varies_quadrant() {
            f.push(Feature::Quadrant);
        }
        if self.varies_background() {
            f.push(Feature::Background);
        }
        f
    }

    pub fn combination_count(self) -> usize {
        [3, 6, 30, 120, 240][usize::from(self.0 - 1)]
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Attributes of one sample. Features a level does not vary hold their
/// defaults: big, white (`color: None`), unconstrained position
/// (`quadrant: None`) and a dark background.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeSet {
    pub shape: Shape,
    pub size: Size,
    pub color: Option<Color>,
    pub quadrant: Option<Quadrant>,
    pub background: Background,
    pub level: Level,
}

impl AttributeSet {
    pub fn new(
        level: Level,
        shape: Shape,
        size: Size,
        color: Option<Color>,
        quadrant: Option<Quadrant>,
        background: Background,
    ) -> Result<Self> {
        let a = Self { shape, size, color, quadrant, background, level };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.level;
        let bad = |what: &str| Err(Error::Contract(format!("{what} does not fit level {l}")));
        if !l.varies_size() && self.size != Size::Big {
            return bad("size");
        }
        if l.varies_color() != self.color.is_some() {
            return bad("color");
        }
        if l.varies_quadrant() != self.quadrant.is_some() {
            return bad("quadrant");
        }
        if !l.varies_background() && self.background != Background::Dark {
            return bad("background");
        }
        Ok(())
    }

    /// Every attribute combination of `level` in a fixed order.
    pub fn enumerate(level: Level) -> Vec<AttributeSet> {
        let sizes: &[Size] = if level.varies_size() { &Size::ALL } else { &[Size::Big] };
        let colors: Vec<Option<Color>> =
            if level.varies_color() { Color::ALL.iter().copied().map(Some).collect() } else { vec![None] };
        let quadrants: Vec<Option<Quadrant>> =
            if level.varies_quadrant() { Quadrant::ALL.iter().copied().map(Some).collect() } else { vec![None] };
        let backgrounds: &[Background] = if level.varies_background() { &Background::ALL } else { &[Background::Dark] };
        let mut out = Vec::with_capacity(level.combination_count());
        for &shape in &Shape::ALL {
            for &size in sizes {
                for &color in &colors {
                    for &quadrant in &quadrants {
                        for &background in backgrounds {
                            out.push(AttributeSet { shape, size, color, quadrant, background, level });
                        }
                    }
                }
            }
        }
        out
    }
}
