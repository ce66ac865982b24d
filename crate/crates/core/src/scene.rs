//! Synthetic scenes: a handful of colored shapes on a gray background,
//! rendered to RGB with exact per-object masks. Scenes stand in for real
//! images so every mask the pipeline consumes has known ground truth.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Grid2D;
use crate::numerics::Rng;
use crate::wire::fnv64;

pub const BACKGROUND_RGB: [u8; 3] = [204, 204, 204];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [204, 41, 41],
            Color::Green => [41, 178, 72],
            Color::Blue => [41, 92, 204],
            Color::Yellow => [229, 199, 41],
        }
    }
}

/// One shape: center in pixel coordinates, `size` is the bounding extent.
#[derive(Clone, Copy, Debug)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
}

impl ObjectSpec {
    /// Membership test at a pixel center.
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let h = self.size / 2.0;
        match self.shape {
            Shape::Square => dx.abs() <= h && dy.abs() <= h,
            Shape::Circle => dx * dx + dy * dy <= h * h,
            // Upward-pointing triangle: row width grows linearly from apex.
            Shape::Triangle => dy.abs() <= h && dx.abs() <= (dy + h) / 2.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub side: usize,
    pub objects: Vec<ObjectSpec>,
}

/// A rendered scene: RGB pixels in [0,1] (quantized through u8 so that file
/// round-trips are bit-exact) plus one boolean mask per object.
#[derive(Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub pixels: Grid2D<[f64; 3]>,
    pub masks: Vec<Grid2D<bool>>,
}

impl SceneSpec {
    /// Rasterize. Later objects paint over earlier ones, but sampled scenes
    /// never overlap so each mask is exactly its object's footprint.
    pub fn render(&self) -> Scene {
        let side = self.side;
        let mut rgb = Grid2D::fill(side, side, BACKGROUND_RGB);
        let mut masks = Vec::with_capacity(self.objects.len());
        for obj in &self.objects {
            let mut mask = Grid2D::fill(side, side, false);
            for r in 0..side {
                for c in 0..side {
                    if obj.contains(c as f64 + 0.5, r as f64 + 0.5) {
                        mask[(r, c)] = true;
                        rgb[(r, c)] = obj.color.rgb();
                    }
                }
            }
            masks.push(mask);
        }
        let pixels = Grid2D::from_fn(side, side, |r, c| {
            let p = rgb[(r, c)];
            [
                p[0] as f64 / 255.0,
                p[1] as f64 / 255.0,
                p[2] as f64 / 255.0,
            ]
        });
        Scene {
            spec: self.clone(),
            pixels,
            masks,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SceneSampler {
    pub side: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Minimum center-to-center clearance added on top of the two radii.
    pub gap: f64,
}

impl Default for SceneSampler {
    fn default() -> Self {
        SceneSampler {
            side: 64,
            min_objects: 2,
            max_objects: 4,
            min_size: 12.0,
            max_size: 18.0,
            gap: 4.0,
        }
    }
}

impl SceneSampler {
    /// Draw a scene with non-overlapping objects. Placement is rejection
    /// sampling with a bounded retry budget per object.
    pub fn sample(&self, rng: &mut Rng) -> Result<SceneSpec> {
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "bad object count range {}..={}",
                self.min_objects, self.max_objects
            )));
        }
        let n = rng.int_in(self.min_objects, self.max_objects);
        let mut objects: Vec<ObjectSpec> = Vec::with_capacity(n);
        for _ in 0..n {
            let mut placed = false;
            for _try in 0..200 {
                let size = self.min_size + rng.uniform() * (self.max_size - self.min_size);
                let margin = size / 2.0 + 1.0;
                let span = self.side as f64 - 2.0 * margin;
                if span <= 0.0 {
                    return Err(Error::Config(format!(
                        "object size {size:.1} does not fit a {} px scene",
                        self.side
                    )));
                }
                let cx = margin + rng.uniform() * span;
                let cy = margin + rng.uniform() * span;
                let clear = objects.iter().all(|o| {
                    let d = ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt();
                    d >= (o.size + size) / 2.0 + self.gap
                });
                if clear {
                    let shape = Shape::ALL[rng.below(3) as usize];
                    let color = Color::ALL[rng.below(4) as usize];
                    objects.push(ObjectSpec {
                        shape,
                        color,
                        cx,
                        cy,
                        size,
                    });
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Exhausted(format!(
                    "could not place object {} of {n} after 200 tries",
                    objects.len() + 1
                )));
            }
        }
        Ok(SceneSpec {
            side: self.side,
            objects,
        })
    }
}

impl Scene {
    /// Tight half-open pixel bounding box of object `i`, or None if the mask
    /// is empty (an off-canvas jitter can do that to a proposal, never to a
    /// rendered ground-truth object).
    pub fn bbox(&self, i: usize) -> Option<crate::masks::BBox> {
        crate::masks::mask_bbox(&self.masks[i])
    }

    /// Write as binary PPM (P6). The header carries a checksum comment over
    /// the pixel payload so corrupt files are rejected on read.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let side = self.spec.side;
        let mut payload = Vec::with_capacity(side * side * 3);
        for r in 0..side {
            for c in 0..side {
                let p = self.pixels[(r, c)];
                for ch in 0..3 {
                    payload.push((p[ch] * 255.0).round() as u8);
                }
            }
        }
        let mut out = Vec::new();
        write!(
            out,
            "P6\n# fnv:{:016x}\n{} {}\n255\n",
            fnv64(&payload),
            side,
            side
        )
        .expect("write to vec");
        out.extend_from_slice(&payload);
        fs::write(path, out)?;
        Ok(())
    }
}

/// Read a PPM written by [`Scene::write_ppm`]: pixels only, no masks.
pub fn read_ppm(path: &Path) -> Result<Grid2D<[f64; 3]>> {
    let bytes = fs::read(path)?;
    parse_ppm(&bytes)
}

fn parse_ppm(bytes: &[u8]) -> Result<Grid2D<[f64; 3]>> {
    let corrupt = |m: &str| Error::Corrupt(format!("ppm: {m}"));
    // Header is ASCII tokens: magic, checksum comment, width, height, maxval.
    let mut pos = 0usize;
    let mut token = |expect_comment: bool| -> Result<String> {
        // Skip whitespace.
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if expect_comment {
            if pos >= bytes.len() || bytes[pos] != b'#' {
                return Err(corrupt("missing checksum comment"));
            }
            let start = pos;
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            return Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token(false)? != "P6" {
        return Err(corrupt("bad magic"));
    }
    let comment = token(true)?;
    let stored = comment
        .strip_prefix("# fnv:")
        .and_then(|h| u64::from_str_radix(h.trim(), 16).ok())
        .ok_or_else(|| corrupt("malformed checksum comment"))?;
    let width: usize = token(false)?.parse().map_err(|_| corrupt("bad width"))?;
    let height: usize = token(false)?.parse().map_err(|_| corrupt("bad height"))?;
    if token(false)? != "255" {
        return Err(corrupt("unsupported maxval"));
    }
    if width == 0 || height == 0 || width > 4096 || height > 4096 {
        return Err(corrupt("unreasonable dimensions"));
    }
    // Exactly one whitespace byte separates header from payload.
    if pos >= bytes.len() {
        return Err(corrupt("truncated before payload"));
    }
    pos += 1;
    let need = width * height * 3;
    let payload = &bytes[pos.min(bytes.len())..];
    if payload.len() != need {
        return Err(corrupt(&format!(
            "payload is {} bytes, expected {need}",
            payload.len()
        )));
    }
    if fnv64(payload) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    Ok(Grid2D::from_fn(height, width, |r, c| {
        let i = (r * width + c) * 3;
        [
            payload[i] as f64 / 255.0,
            payload[i + 1] as f64 / 255.0,
            payload[i + 2] as f64 / 255.0,
        ]
    }))
}
