use std::f64::consts::TAU;
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed::rng_for;

use super::attributes::{AttributeSet, Background, Quadrant, Shape};

pub const IMAGE_SIDE: usize = 64;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE * 3;

const PLACEMENT_TRIES: usize = 100;
const TEXTURE_CELL: f64 = 8.0;
const DARK_GREY: f64 = 0.15;
const LIGHT_GREY: f64 = 0.85;

/// 64×64 RGB, row-major, 8 bits per channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn black() -> Self {
        Self { data: vec![0; IMAGE_PIXELS] }
    }

    pub fn from_data(data: Vec<u8>) -> Result<Self> {
        if data.len() != IMAGE_PIXELS {
            return Err(Error::dimension("rgb image", [IMAGE_PIXELS], [data.len()]));
        }
        Ok(Self { data })
    }

    /// Quantise values in `[0, 1]` (clamped) to 8 bits.
    pub fn from_unit_floats(values: &[f64]) -> Result<Self> {
        Self::from_data(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect())
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * IMAGE_SIDE + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel values scaled to `[0, 1]`.
    pub fn to_unit_floats(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v) / 255.0).collect()
    }
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>> {
    encode_rgb_png(IMAGE_SIDE, IMAGE_SIDE, &image.data)
}

/// 8-bit RGB PNG of any size.
pub fn encode_rgb_png(width: usize, height: usize, data: &[u8]) -> Result<Vec<u8>> {
    if data.len() != width * height * 3 {
        return Err(Error::dimension("rgb raster", [height, width, 3], [data.len()]));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer.write_image_data(data).map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let info = reader.info();
    if info.width as usize != IMAGE_SIDE
        || info.height as usize != IMAGE_SIDE
        || info.color_type != png::ColorType::Rgb
        || info.bit_depth != png::BitDepth::Eight
    {
        return Err(Error::Png(format!(
            "expected 64x64 8-bit RGB, got {}x{} {:?} {:?}",
            info.width, info.height, info.color_type, info.bit_depth
        )));
    }
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(IMAGE_PIXELS)];
    let frame = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    buf.truncate(frame.buffer_size());
    RgbImage::from_data(buf)
}

/// Implicit heart `(x² + y² − 1)³ − x²y³ ≤ 0`.
fn heart_raw(x: f64, y: f64) -> bool {
    let r = x * x + y * y - 1.0;
    r * r * r - x * x * y * y * y <= 0.0
}

/// Heart scale and placement: heart coordinates are
/// `(u·scale + cx, −v·scale + cy)` for shape coordinates `(u, v)` measured
/// from the centroid in half-box units, `v` pointing down.
struct HeartFrame {
    scale: f64,
    cx: f64,
    cy: f64,
    /// Centroid relative to the bounding-box centre, in half-box units.
    offset: (f64, f64),
}

fn heart_frame() -> &'static HeartFrame {
    static FRAME: OnceLock<HeartFrame> = OnceLock::new();
    FRAME.get_or_init(|| {
        let n = 1200;
        let (lo, hi) = (-1.5, 1.5);
        let step = (hi - lo) / n as f64;
        let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        let (mut sx, mut sy, mut count) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                let x = lo + (i as f64 + 0.5) * step;
                let y = lo + (j as f64 + 0.5) * step;
                if heart_raw(x, y) {
                    xmin = xmin.min(x);
                    xmax = xmax.max(x);
                    ymin = ymin.min(y);
                    ymax = ymax.max(y);
                    sx += x;
                    sy += y;
                    count += 1.0;
                }
            }
        }
        let scale = 0.5 * (xmax - xmin).max(ymax - ymin);
        let (cx, cy) = (sx / count, sy / count);
        let (bx, by) = (0.5 * (xmin + xmax), 0.5 * (ymin + ymax));
        HeartFrame { scale, cx, cy, offset: ((cx - bx) / scale, -(cy - by) / scale) }
    })
}

/// Centroid minus bounding-box centre in half-box units (`v` down).
pub fn shape_centroid_offset(shape: Shape) -> (f64, f64) {
    match shape {
        Shape::Heart => heart_frame().offset,
        Shape::Square | Shape::Ellipse => (0.0, 0.0),
    }
}

/// Membership in centroid-centred, half-box-scaled shape coordinates.
fn inside(shape: Shape, u: f64, v: f64) -> bool {
    match shape {
        Shape::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
        Shape::Ellipse => u * u + 4.0 * v * v <= 1.0,
        Shape::Heart => {
            let f = heart_frame();
            heart_raw(u * f.scale + f.cx, -v * f.scale + f.cy)
        }
    }
}

/// Outline points in shape coordinates, used for the fit test.
fn outline(shape: Shape) -> &'static [(f64, f64)] {
    static OUTLINES: OnceLock<[Vec<(f64, f64)>; 3]> = OnceLock::new();
    &OUTLINES.get_or_init(|| {
        Shape::ALL.map(|s| match s {
            Shape::Square => vec![(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)],
            Shape::Ellipse => (0..180).map(|i| i as f64 / 180.0 * TAU).map(|t| (t.cos(), 0.5 * t.sin())).collect(),
            Shape::Heart => (0..360)
                .map(|i| {
                    let t = i as f64 / 360.0 * TAU;
                    let (dx, dy) = (t.cos(), t.sin());
                    let mut last = 0.0;
                    let mut r = 0.0;
                    while r < 2.5 {
                        if inside(Shape::Heart, r * dx, r * dy) {
                            last = r;
                        }
                        r += 0.002;
                    }
                    (last * dx, last * dy)
                })
                .collect(),
        })
    })[shape.index()]
}

/// Horizontal and vertical pixel extents `(min_x, max_x, min_y, max_y)` of
/// the rotated outline relative to the placement point.
fn extents(shape: Shape, half: f64, angle: f64) -> (f64, f64, f64, f64) {
    let (s, c) = angle.sin_cos();
    outline(shape).iter().fold((f64::MAX, f64::MIN, f64::MAX, f64::MIN), |(a, b, cc, d), &(u, v)| {
        let x = half * (c * u - s * v);
        let y = half * (s * u + c * v);
        (a.min(x), b.max(x), cc.min(y), d.max(y))
    })
}

/// Allowed placement interval per axis, optionally intersected with a
/// quadrant (kept at least one pixel away from the midline).
fn feasible(ext: (f64, f64, f64, f64), quadrant: Option<Quadrant>) -> ((f64, f64), (f64, f64)) {
    let side = IMAGE_SIDE as f64;
    let mut xr = (-ext.0, side - ext.1);
    let mut yr = (-ext.2, side - ext.3);
    if let Some(q) = quadrant {
        let mid = side / 2.0;
        if q.is_left() {
            xr.1 = xr.1.min(mid - 1.0);
        } else {
            xr.0 = xr.0.max(mid + 1.0);
        }
        if q.is_top() {
            yr.1 = yr.1.min(mid - 1.0);
        } else {
            yr.0 = yr.0.max(mid + 1.0);
        }
    }
    (xr, yr)
}

fn quadrant_center(q: Quadrant) -> (f64, f64) {
    let side = IMAGE_SIDE as f64;
    (if q.is_left() { side / 4.0 } else { 3.0 * side / 4.0 }, if q.is_top() { side / 4.0 } else { 3.0 * side / 4.0 })
}

/// Where the shape's centroid goes: Gaussian around the image centre
/// (sd 25 px) or around the quadrant centre (sd 8 px), rejected until the
/// shape fits, with a deterministic fallback.
fn place(a: &AttributeSet, angle: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let half = a.size.box_pixels() / 2.0;
    let ext = extents(a.shape, half, angle);
    let (xr, yr) = feasible(ext, a.quadrant);
    let (center, sd) = match a.quadrant {
        Some(q) => (quadrant_center(q), 8.0),
        None => ((IMAGE_SIDE as f64 / 2.0, IMAGE_SIDE as f64 / 2.0), 25.0),
    };
    let nx = Normal::new(center.0, sd).expect("positive sd");
    let ny = Normal::new(center.1, sd).expect("positive sd");
    for _ in 0..PLACEMENT_TRIES {
        let (x, y) = (nx.sample(rng), ny.sample(rng));
        if (xr.0..=xr.1).contains(&x) && (yr.0..=yr.1).contains(&y) {
            return (x, y);
        }
    }
    // nearest feasible point to the placement centre
    let clamp = |v: f64, r: (f64, f64)| if r.0 <= r.1 { v.clamp(r.0, r.1) } else { 0.5 * (r.0 + r.1) };
    (clamp(center.0, xr), clamp(center.1, yr))
}

/// Smooth value noise in `[0, 1]` on an 8-pixel lattice.
struct ValueNoise {
    lattice: Vec<f64>,
    cells: usize,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let cells = (IMAGE_SIDE as f64 / TEXTURE_CELL) as usize + 1;
        Self { lattice: (0..cells * cells).map(|_| rng.random::<f64>()).collect(), cells }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = (x / TEXTURE_CELL, y / TEXTURE_CELL);
        let (i, j) = ((gx.floor() as usize).min(self.cells - 2), (gy.floor() as usize).min(self.cells - 2));
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(gx - i as f64), smooth(gy - j as f64));
        let v = |a: usize, b: usize| self.lattice[b * self.cells + a];
        let top = v(i, j) * (1.0 - tx) + v(i + 1, j) * tx;
        let bottom = v(i, j + 1) * (1.0 - tx) + v(i + 1, j + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

/// Rasterise one sample. Identical `(attributes, seed)` give identical
/// bytes.
pub fn render_image(a: &AttributeSet, seed: u64) -> RgbImage {
    let mut rng = rng_for(seed, &[]);
    let angle = rng.random_range(0.0..TAU);
    let (px, py) = place(a, angle, &mut rng);
    let shape_noise = ValueNoise::new(&mut rng);
    let background_noise = ValueNoise::new(&mut rng);

    let base = a.color.map_or([1.0; 3], |c| c.rgb());
    let grey = match a.background {
        Background::Dark => DARK_GREY,
        Background::Light => LIGHT_GREY,
    };
    let textured_background = a.level.varies_background();
    let half = a.size.box_pixels() / 2.0;
    let (s, c) = angle.sin_cos();

    let mut data = vec![0u8; IMAGE_PIXELS];
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = (cx - px, cy - py);
            // inverse rotation into shape coordinates
            let u = (c * dx + s * dy) / half;
            let v = (-s * dx + c * dy) / half;
            let rgb = if inside(a.shape, u, v) {
                let f = 0.6 + 0.4 * shape_noise.at(cx, cy);
                base.map(|b| b * f)
            } else if textured_background {
                let f = 0.9 + 0.2 * background_noise.at(cx, cy);
                [(grey * f).clamp(0.0, 1.0); 3]
            } else {
                [0.0; 3]
            };
            let i = (y * IMAGE_SIDE + x) * 3;
            for ch in 0..3 {
                data[i + ch] = (rgb[ch] * 255.0).round() as u8;
            }
        }
    }
    RgbImage { data }
}
