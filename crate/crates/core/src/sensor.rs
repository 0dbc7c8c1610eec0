//! Forward-view raster camera.
//!
//! Each image column is one ray cast across the horizontal field of view
//! through a pinhole model. The nearest wall or obstacle hit is drawn as a
//! vertical span centred on the horizon whose height falls off as
//! `1/distance`; the span intensity encodes what was hit.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::world::{ObstacleKind, Scenario, VehicleState};

#[derive(Debug, Error)]
pub enum SensorError {
    #[error("crop rectangle {rect:?} does not fit a {width}x{height} image")]
    CropOutOfBounds { rect: CropRect, width: usize, height: usize },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("image decode: {0}")]
    Decode(String),
    #[error("image encode: {0}")]
    Encode(String),
}

pub const WALL_INTENSITY: f32 = 0.3;
pub const BACKGROUND_INTENSITY: f32 = 0.0;

pub fn kind_intensity(kind: ObstacleKind) -> f32 {
    match kind {
        ObstacleKind::Cone => 0.9,
        ObstacleKind::Bin => 0.7,
        ObstacleKind::Pedestrian => 0.8,
        ObstacleKind::Car => 0.6,
    }
}

/// Distance at which a drawn span fills the whole image height.
const SPAN_SCALE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSpec {
    /// Horizontal field of view in degrees.
    pub fov: f64,
    pub width: usize,
    pub height: usize,
    pub max_range: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self { fov: 101.0, width: 96, height: 48, max_range: 20.0 }
    }
}

impl CameraSpec {
    pub fn validate(&self) -> Result<(), SensorError> {
        if !(self.fov > 0.0 && self.fov < 180.0) {
            return Err(SensorError::InvalidCamera(format!("fov {} outside (0, 180)", self.fov)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(SensorError::InvalidCamera("zero-sized image".into()));
        }
        if !(self.max_range > 0.0) {
            return Err(SensorError::InvalidCamera("max_range must be positive".into()));
        }
        Ok(())
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        (self.width as f64 / 2.0) / (self.fov.to_radians() / 2.0).tan()
    }

    /// Ray angle of column `c` relative to the heading; negative is left.
    pub fn column_angle(&self, c: usize) -> f64 {
        let u = c as f64 + 0.5 - self.width as f64 / 2.0;
        (u / self.focal()).atan()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub width: usize,
    pub height: usize,
    /// Row-major intensities in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub tick: u64,
}

impl Observation {
    pub fn blank(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![0.0; width * height], tick: 0 }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.pixels[row * self.width + col] = v;
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.pixels.chunks(self.width)
    }

    /// Short content hash of dimensions and pixel bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.width as u64).to_le_bytes());
        h.update((self.height as u64).to_le_bytes());
        for p in &self.pixels {
            h.update(p.to_le_bytes());
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    /// Binary PGM, maxval 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes());
        out
    }

    pub fn to_png(&self) -> Result<Vec<u8>, SensorError> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(|e| SensorError::Encode(e.to_string()))?;
            w.write_image_data(&self.to_bytes()).map_err(|e| SensorError::Encode(e.to_string()))?;
        }
        Ok(buf)
    }

    /// Decodes an 8-bit grayscale or RGB(A) PNG into luminance.
    pub fn from_png(bytes: &[u8]) -> Result<Self, SensorError> {
        let dec = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = dec.read_info().map_err(|e| SensorError::Decode(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(|e| SensorError::Decode(e.to_string()))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(SensorError::Decode("only 8-bit images are supported".into()));
        }
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => return Err(SensorError::Decode(format!("unsupported color type {other:?}"))),
        };
        let (w, h) = (info.width as usize, info.height as usize);
        let mut pixels = Vec::with_capacity(w * h);
        for row in buf[..info.buffer_size()].chunks(info.line_size) {
            for px in row[..w * channels].chunks(channels) {
                let lum = if channels >= 3 {
                    0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32
                } else {
                    px[0] as f32
                };
                pixels.push(lum / 255.0);
            }
        }
        Ok(Self { width: w, height: h, pixels, tick: 0 })
    }
}

/// Ray hit: distance along the ray and the drawn intensity.
#[derive(Debug, Clone, Copy)]
struct Hit {
    dist: f64,
    intensity: f32,
}

fn nearer(a: Option<Hit>, b: Option<Hit>) -> Option<Hit> {
    match (a, b) {
        (Some(a), Some(b)) => Some(if b.dist < a.dist { b } else { a }),
        (a, None) => a,
        (None, b) => b,
    }
}

const FAR: f64 = 1e6;

fn cast_walls(scenario: &Scenario, o: [f64; 2], d: [f64; 2]) -> Option<f64> {
    let sections = scenario.corridor_half_width.sections();
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > 1e-12 && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    for (i, s) in sections.iter().enumerate() {
        let x0 = if i == 0 { -FAR } else { s.from_x };
        let x1 = sections.get(i + 1).map_or(FAR, |n| n.from_x);
        if d[1] != 0.0 {
            for side in [-1.0, 1.0] {
                let t = (side * s.half_width - o[1]) / d[1];
                let x = o[0] + t * d[0];
                if x >= x0 && x <= x1 {
                    consider(t);
                }
            }
        }
        // step face where the width changes
        if let Some(n) = sections.get(i + 1) {
            if d[0] != 0.0 {
                let t = (n.from_x - o[0]) / d[0];
                let y = (o[1] + t * d[1]).abs();
                let (lo, hi) = if s.half_width < n.half_width {
                    (s.half_width, n.half_width)
                } else {
                    (n.half_width, s.half_width)
                };
                if y >= lo && y <= hi {
                    consider(t);
                }
            }
        }
    }
    best
}

fn cast_circle(o: [f64; 2], d: [f64; 2], c: [f64; 2], r: f64) -> Option<f64> {
    // |o + t d - c|^2 = r^2 with |d| = 1
    let f = [o[0] - c[0], o[1] - c[1]];
    let b = f[0] * d[0] + f[1] * d[1];
    let cc = f[0] * f[0] + f[1] * f[1] - r * r;
    let disc = b * b - cc;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = -b - sq;
    let t1 = -b + sq;
    if t0 > 1e-12 {
        Some(t0)
    } else if t1 > 1e-12 {
        Some(t1)
    } else {
        None
    }
}

/// Renders the forward view of `state` at time `t`.
pub fn render(state: &VehicleState, scenario: &Scenario, t: f64, spec: &CameraSpec) -> Observation {
    let mut obs = Observation::blank(spec.width, spec.height);
    let origin = [state.pose.x, state.pose.y];
    let obstacles: Vec<([f64; 2], f64, f32)> = scenario
        .obstacles
        .iter()
        .map(|ob| (ob.position_at(t), ob.radius, kind_intensity(ob.kind)))
        .collect();
    let h = spec.height as f64;
    for c in 0..spec.width {
        let rel = spec.column_angle(c);
        let (sin, cos) = (state.pose.heading + rel).sin_cos();
        let dir = [cos, sin];
        let mut hit = cast_walls(scenario, origin, dir).map(|dist| Hit { dist, intensity: WALL_INTENSITY });
        for &(center, radius, intensity) in &obstacles {
            hit = nearer(hit, cast_circle(origin, dir, center, radius).map(|dist| Hit { dist, intensity }));
        }
        let Some(hit) = hit.filter(|h| h.dist <= spec.max_range) else {
            continue;
        };
        let perp = (hit.dist * rel.cos()).max(1e-6);
        let span = h * SPAN_SCALE / perp;
        let top = ((h - span) / 2.0).round().max(0.0) as usize;
        let bottom = (((h + span) / 2.0).round().min(h)) as usize;
        for r in top..bottom {
            obs.set(r, c, hit.intensity);
        }
    }
    obs
}

/// Crop rectangle in pixel coordinates; `bottom` and `right` are exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl CropRect {
    /// Crop used on 640x480 phone frames before resizing to 320x160.
    pub const PHONE: CropRect = CropRect { top: 140, bottom: 330, left: 130, right: 510 };

    pub fn full(width: usize, height: usize) -> Self {
        Self { top: 0, bottom: height, left: 0, right: width }
    }

    pub fn width(&self) -> usize {
        self.right - self.left
    }

    pub fn height(&self) -> usize {
        self.bottom - self.top
    }
}

/// Nearest-neighbour crop and resample.
pub fn crop_resize(
    raw: &Observation,
    rect: CropRect,
    out_w: usize,
    out_h: usize,
) -> Result<Observation, SensorError> {
    if rect.top >= rect.bottom
        || rect.left >= rect.right
        || rect.bottom > raw.height
        || rect.right > raw.width
        || out_w == 0
        || out_h == 0
    {
        return Err(SensorError::CropOutOfBounds { rect, width: raw.width, height: raw.height });
    }
    let mut out = Observation::blank(out_w, out_h);
    out.tick = raw.tick;
    for r in 0..out_h {
        let sr = rect.top + r * rect.height() / out_h;
        for c in 0..out_w {
            let sc = rect.left + c * rect.width() / out_w;
            out.set(r, c, raw.get(sr, sc));
        }
    }
    Ok(out)
}
