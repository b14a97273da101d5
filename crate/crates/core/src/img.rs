//! Minimal raster types: 8-bit RGB images with PPM/PNG I/O, scalar fields
//! with bilinear sampling, boolean masks, and overlay drawing primitives.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::camera::Pixel;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("ppm: {0}")]
    Ppm(String),
    #[error("png: {0}")]
    Png(String),
    #[error("unsupported image extension '{0}' (expected .ppm or .png)")]
    UnsupportedExtension(String),
}

/// Owned 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage { width, height, data: vec![[0, 0, 0]; width * height] }
    }

    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        RgbImage { width, height, data: vec![color; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, color: [u8; 3]) {
        self.data[y * self.width + x] = color;
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[[u8; 3]]> {
        self.data.chunks_exact(self.width)
    }

    /// Luminance plane (Rec. 601 weights) on the 0..255 scale.
    pub fn luminance(&self) -> ScalarField {
        let data = self
            .data
            .iter()
            .map(|&[r, g, b]| 0.299 * r as f32 + 0.587 * g as f32 + 0.114 * b as f32)
            .collect();
        ScalarField { width: self.width, height: self.height, data }
    }

    pub fn write_ppm(&self, path: &Path) -> Result<(), ImageError> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        for px in &self.data {
            w.write_all(px)?;
        }
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self, ImageError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        parse_ppm(&bytes)
    }

    pub fn write_png(&self, path: &Path) -> Result<(), ImageError> {
        let flat: Vec<u8> = self.data.iter().flatten().copied().collect();
        let buffer = image::RgbImage::from_raw(self.width as u32, self.height as u32, flat)
            .expect("buffer size matches dimensions");
        buffer.save(path).map_err(|e| ImageError::Png(e.to_string()))
    }

    pub fn read_png(path: &Path) -> Result<Self, ImageError> {
        let decoded = image::open(path).map_err(|e| ImageError::Png(e.to_string()))?.to_rgb8();
        let (width, height) = (decoded.width() as usize, decoded.height() as usize);
        let data = decoded.pixels().map(|p| p.0).collect();
        Ok(RgbImage { width, height, data })
    }

    /// Dispatches on the file extension (`.ppm` or `.png`).
    pub fn load(path: &Path) -> Result<Self, ImageError> {
        match extension(path) {
            Some("ppm") => Self::read_ppm(path),
            Some("png") => Self::read_png(path),
            other => Err(ImageError::UnsupportedExtension(other.unwrap_or("").into())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ImageError> {
        match extension(path) {
            Some("ppm") => self.write_ppm(path),
            Some("png") => self.write_png(path),
            other => Err(ImageError::UnsupportedExtension(other.unwrap_or("").into())),
        }
    }

    /// Draws a filled disc; parts outside the image are clipped.
    pub fn draw_dot(&mut self, center: &Pixel, radius: f64, color: [u8; 3]) {
        let r = radius.max(0.5);
        let x0 = ((center.x - r).floor().max(0.0)) as usize;
        let y0 = ((center.y - r).floor().max(0.0)) as usize;
        let x1 = ((center.x + r).ceil().min(self.width as f64 - 1.0)) as usize;
        let y1 = ((center.y + r).ceil().min(self.height as f64 - 1.0)) as usize;
        if center.x + r < 0.0 || center.y + r < 0.0 {
            return;
        }
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f64 - center.x;
                let dy = y as f64 - center.y;
                if dx * dx + dy * dy <= r * r {
                    self.set(x, y, color);
                }
            }
        }
    }

    /// Draws an axis-aligned cross of half length `arm`.
    pub fn draw_cross(&mut self, center: &Pixel, arm: i32, color: [u8; 3]) {
        let cx = center.x.round() as i64;
        let cy = center.y.round() as i64;
        for d in -(arm as i64)..=arm as i64 {
            self.set_clipped(cx + d, cy, color);
            self.set_clipped(cx, cy + d, color);
        }
    }

    pub fn draw_polyline(&mut self, points: &[Pixel], color: [u8; 3]) {
        for pair in points.windows(2) {
            self.draw_segment(&pair[0], &pair[1], color);
        }
    }

    fn draw_segment(&mut self, a: &Pixel, b: &Pixel, color: [u8; 3]) {
        let steps = ((b - a).norm().ceil() as usize).max(1);
        for i in 0..=steps {
            let p = a + (b - a) * (i as f64 / steps as f64);
            self.set_clipped(p.x.round() as i64, p.y.round() as i64, color);
        }
    }

    #[inline]
    fn set_clipped(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.set(x as usize, y as usize, color);
        }
    }
}

fn extension(path: &Path) -> Option<&str> {
    path.extension().and_then(|e| e.to_str())
}

fn parse_ppm(bytes: &[u8]) -> Result<RgbImage, ImageError> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String, ImageError> {
        // Whitespace-separated tokens; '#' starts a comment to end of line.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::Ppm("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(bytes)? != "P6" {
        return Err(ImageError::Ppm("not a P6 file".into()));
    }
    let parse = |s: String| s.parse::<usize>().map_err(|_| ImageError::Ppm("bad header number".into()));
    let width = parse(token(bytes)?)?;
    let height = parse(token(bytes)?)?;
    let maxval = parse(token(bytes)?)?;
    if maxval != 255 {
        return Err(ImageError::Ppm(format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let needed = width * height * 3;
    if bytes.len() < pos + needed {
        return Err(ImageError::Ppm("truncated pixel data".into()));
    }
    let data = bytes[pos..pos + needed]
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Ok(RgbImage { width, height, data })
}

/// Single-channel float image with bilinear sampling.
#[derive(Debug, Clone)]
pub struct ScalarField {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ScalarField {
    pub fn new(width: usize, height: usize) -> Self {
        ScalarField { width, height, data: vec![0.0; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut field = ScalarField::new(width, height);
        for y in 0..height {
            for x in 0..width {
                field.data[y * width + x] = f(x, y);
            }
        }
        field
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        self.data[y * self.width + x] = value;
    }

    /// Bilinear sample at fractional pixel coordinates, clamped to the
    /// image border.
    pub fn bilinear(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let v00 = self.get(x0, y0) as f64;
        let v10 = self.get(x1, y0) as f64;
        let v01 = self.get(x0, y1) as f64;
        let v11 = self.get(x1, y1) as f64;
        v00 * (1.0 - fx) * (1.0 - fy)
            + v10 * fx * (1.0 - fy)
            + v01 * (1.0 - fx) * fy
            + v11 * fx * fy
    }
}

/// Boolean pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask { width, height, bits: vec![false; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}
