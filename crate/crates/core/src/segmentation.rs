//! Color segmentation: Lab chromaticity models for the marker paints, pixel
//! labeling with a saturation guard, and 8-connected region extraction with
//! second-moment shape statistics.

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::Pixel;
use crate::img::RgbImage;
use crate::instrument::MarkerColor;

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("need at least {min} samples to fit a color model, got {got}")]
    TooFewSamples { got: usize, min: usize },
    #[error("color model covariance is not positive definite")]
    DegenerateCovariance,
    #[error("color model file: {0}")]
    ModelFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 99% quantile of the chi-square distribution with 2 DOF; default gate for
/// the squared Mahalanobis distance of the (a, b) chromaticity.
pub const CHI2_2DOF_99: f64 = 9.21034;

/// Channel values at or above this count as glare and are never labeled.
pub const SATURATION_CUTOFF: u8 = 250;

const MIN_MODEL_SAMPLES: usize = 10;

/// sRGB (8-bit) to CIE Lab under D65.
pub fn srgb_to_lab(rgb: [u8; 3]) -> (f64, f64, f64) {
    fn linearize(c: u8) -> f64 {
        let c = c as f64 / 255.0;
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    }
    let r = linearize(rgb[0]);
    let g = linearize(rgb[1]);
    let b = linearize(rgb[2]);
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    // D65 reference white.
    let (xn, yn, zn) = (0.95047, 1.0, 1.08883);
    fn f(t: f64) -> f64 {
        const DELTA: f64 = 6.0 / 29.0;
        if t > DELTA * DELTA * DELTA {
            t.cbrt()
        } else {
            t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
        }
    }
    let fx = f(x / xn);
    let fy = f(y / yn);
    let fz = f(z / zn);
    (116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

/// Chromaticity of a pixel: the (a, b) part of Lab, dropping lightness.
pub fn chromaticity(rgb: [u8; 3]) -> Vector2<f64> {
    let (_, a, b) = srgb_to_lab(rgb);
    Vector2::new(a, b)
}

/// Gaussian model of one marker paint in (a, b) chromaticity space.
/// Persisted through [`ColorModel::to_text`] / [`ColorModel::from_text`].
#[derive(Debug, Clone, PartialEq)]
pub struct ColorModel {
    pub mean: Vector2<f64>,
    pub covariance: Matrix2<f64>,
    /// Squared-Mahalanobis acceptance gate.
    pub threshold: f64,
    inverse: Matrix2<f64>,
}

impl ColorModel {
    pub fn new(
        mean: Vector2<f64>,
        covariance: Matrix2<f64>,
        threshold: f64,
    ) -> Result<Self, SegmentationError> {
        let det = covariance.determinant();
        if !(det > 0.0) || covariance[(0, 0)] <= 0.0 {
            return Err(SegmentationError::DegenerateCovariance);
        }
        let inverse = covariance.try_inverse().ok_or(SegmentationError::DegenerateCovariance)?;
        Ok(ColorModel { mean, covariance, threshold, inverse })
    }

    #[inline]
    pub fn mahalanobis_sq(&self, ab: &Vector2<f64>) -> f64 {
        let d = ab - self.mean;
        (self.inverse * d).dot(&d)
    }

    pub fn accepts(&self, ab: &Vector2<f64>) -> bool {
        self.mahalanobis_sq(ab) < self.threshold
    }

    /// Plain-text form: `mean`, `cov` (upper triangle), `threshold` lines.
    pub fn to_text(&self) -> String {
        format!(
            "mean {} {}\ncov {} {} {}\nthreshold {}\n",
            self.mean.x,
            self.mean.y,
            self.covariance[(0, 0)],
            self.covariance[(0, 1)],
            self.covariance[(1, 1)],
            self.threshold
        )
    }

    pub fn from_text(text: &str) -> Result<Self, SegmentationError> {
        let mut mean = None;
        let mut cov = None;
        let mut threshold = CHI2_2DOF_99;
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let nums = |n: usize| -> Result<Vec<f64>, SegmentationError> {
                if fields.len() != n + 1 {
                    return Err(SegmentationError::ModelFile(format!(
                        "'{}' expects {n} numbers",
                        fields[0]
                    )));
                }
                fields[1..]
                    .iter()
                    .map(|s| {
                        s.parse::<f64>()
                            .map_err(|_| SegmentationError::ModelFile(format!("bad number '{s}'")))
                    })
                    .collect()
            };
            match fields[0] {
                "mean" => {
                    let v = nums(2)?;
                    mean = Some(Vector2::new(v[0], v[1]));
                }
                "cov" => {
                    let v = nums(3)?;
                    cov = Some(Matrix2::new(v[0], v[1], v[1], v[2]));
                }
                "threshold" => threshold = nums(1)?[0],
                other => {
                    return Err(SegmentationError::ModelFile(format!("unknown key '{other}'")))
                }
            }
        }
        match (mean, cov) {
            (Some(mean), Some(cov)) => ColorModel::new(mean, cov, threshold),
            _ => Err(SegmentationError::ModelFile("missing mean or cov".into())),
        }
    }
}

/// Fits a Gaussian chromaticity model to sample pixels. Near-singular
/// covariances (e.g. from a perfectly flat patch) are regularized.
pub fn fit_color_model(
    samples: &[[u8; 3]],
    threshold: Option<f64>,
) -> Result<ColorModel, SegmentationError> {
    if samples.len() < MIN_MODEL_SAMPLES {
        return Err(SegmentationError::TooFewSamples {
            got: samples.len(),
            min: MIN_MODEL_SAMPLES,
        });
    }
    let abs: Vec<Vector2<f64>> = samples.iter().map(|&rgb| chromaticity(rgb)).collect();
    let n = abs.len() as f64;
    let mean = abs.iter().sum::<Vector2<f64>>() / n;
    let mut cov = Matrix2::zeros();
    for ab in &abs {
        let d = ab - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    if cov.determinant() < 1e-9 {
        log::warn!("color model covariance nearly singular, regularizing");
        cov += Matrix2::identity() * 1e-3;
    }
    ColorModel::new(mean, cov, threshold.unwrap_or(CHI2_2DOF_99))
}

/// Per-pixel classification result.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelLabel {
    Background,
    Marker(MarkerColor),
}

/// Dense label map produced by [`label_image`].
#[derive(Debug, Clone)]
pub struct LabelImage {
    width: usize,
    height: usize,
    labels: Vec<PixelLabel>,
}

impl LabelImage {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> PixelLabel {
        self.labels[y * self.width + x]
    }

    /// True when the pixel belongs to either marker color.
    #[inline]
    pub fn is_marker(&self, x: usize, y: usize) -> bool {
        matches!(self.get(x, y), PixelLabel::Marker(_))
    }
}

/// Labels every pixel independently: saturated pixels are background, others
/// go to the color model whose gate they pass (the nearer one if both).
pub fn label_image(img: &RgbImage, blue: &ColorModel, yellow: &ColorModel) -> LabelImage {
    let width = img.width();
    let labels: Vec<PixelLabel> = img
        .pixels()
        .par_chunks(width.max(1))
        .flat_map_iter(|row| {
            row.iter().map(|&rgb| {
                if rgb.iter().any(|&c| c >= SATURATION_CUTOFF) {
                    return PixelLabel::Background;
                }
                let ab = chromaticity(rgb);
                let db = blue.mahalanobis_sq(&ab);
                let dy = yellow.mahalanobis_sq(&ab);
                let pass_b = db < blue.threshold;
                let pass_y = dy < yellow.threshold;
                match (pass_b, pass_y) {
                    (true, true) => {
                        if db <= dy {
                            PixelLabel::Marker(MarkerColor::Blue)
                        } else {
                            PixelLabel::Marker(MarkerColor::Yellow)
                        }
                    }
                    (true, false) => PixelLabel::Marker(MarkerColor::Blue),
                    (false, true) => PixelLabel::Marker(MarkerColor::Yellow),
                    (false, false) => PixelLabel::Background,
                }
            })
        })
        .collect();
    LabelImage { width, height: img.height(), labels }
}

/// Connected component of one marker color with its shape statistics.
/// `half_axes` holds the apparent half extents `(minor, major)` derived from
/// the second moments: twice the square roots of the covariance eigenvalues.
#[derive(Debug, Clone)]
pub struct Region {
    pub color: MarkerColor,
    pub area_px: usize,
    pub centroid: Pixel,
    pub half_axes: Vector2<f64>,
    pub orientation_rad: f64,
    pub pixels: Vec<(u32, u32)>,
}

/// Shape statistics from a set of pixel coordinates.
pub fn shape_from_pixels(pixels: &[(u32, u32)]) -> (Pixel, Vector2<f64>, f64) {
    let n = pixels.len() as f64;
    let mut mean = Vector2::zeros();
    for &(x, y) in pixels {
        mean += Vector2::new(x as f64, y as f64);
    }
    mean /= n;
    let mut mxx = 0.0;
    let mut myy = 0.0;
    let mut mxy = 0.0;
    for &(x, y) in pixels {
        let dx = x as f64 - mean.x;
        let dy = y as f64 - mean.y;
        mxx += dx * dx;
        myy += dy * dy;
        mxy += dx * dy;
    }
    mxx /= n;
    myy /= n;
    mxy /= n;
    // Eigenvalues of the 2x2 moment matrix, closed form.
    let trace = mxx + myy;
    let diff = mxx - myy;
    let root = (0.25 * diff * diff + mxy * mxy).sqrt();
    let eig_major = (0.5 * trace + root).max(0.0);
    let eig_minor = (0.5 * trace - root).max(0.0);
    let half_axes = Vector2::new(2.0 * eig_minor.sqrt(), 2.0 * eig_major.sqrt());
    let orientation = 0.5 * (2.0 * mxy).atan2(diff);
    (mean, half_axes, orientation)
}

/// Default minimum region area, scaled quadratically from 15 px at an image
/// width of 768.
pub fn default_min_area(image_width: usize) -> usize {
    let scale = image_width as f64 / 768.0;
    ((15.0 * scale * scale).round() as usize).max(1)
}

/// Extracts 8-connected regions per color, dropping those below
/// `min_area_px`. Regions appear in raster-scan order of their first pixel.
pub fn extract_regions(labels: &LabelImage, min_area_px: usize) -> Vec<Region> {
    let (width, height) = (labels.width, labels.height);
    let mut visited = vec![false; width * height];
    let mut regions = Vec::new();
    let mut stack = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let index = y * width + x;
            if visited[index] {
                continue;
            }
            let PixelLabel::Marker(color) = labels.get(x, y) else {
                continue;
            };
            visited[index] = true;
            stack.push((x, y));
            let mut pixels = Vec::new();
            while let Some((px, py)) = stack.pop() {
                pixels.push((px as u32, py as u32));
                let x0 = px.saturating_sub(1);
                let y0 = py.saturating_sub(1);
                for ny in y0..=(py + 1).min(height - 1) {
                    for nx in x0..=(px + 1).min(width - 1) {
                        let ni = ny * width + nx;
                        if !visited[ni] && labels.get(nx, ny) == PixelLabel::Marker(color) {
                            visited[ni] = true;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            if pixels.len() < min_area_px {
                continue;
            }
            let (centroid, half_axes, orientation_rad) = shape_from_pixels(&pixels);
            regions.push(Region {
                color,
                area_px: pixels.len(),
                centroid,
                half_axes,
                orientation_rad,
                pixels,
            });
        }
    }
    regions
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    // Representative paint colors; chosen once and reused by the tests.
    pub const BLUE_RGB: [u8; 3] = [40, 90, 170];
    pub const YELLOW_RGB: [u8; 3] = [190, 170, 40];

    fn noisy_samples(base: [u8; 3], n: usize, spread: f64, rng: &mut ChaCha8Rng) -> Vec<[u8; 3]> {
        (0..n)
            .map(|_| {
                let mut px = [0u8; 3];
                for (i, channel) in px.iter_mut().enumerate() {
                    let v = base[i] as f64 + rng.random_range(-spread..spread);
                    *channel = v.clamp(0.0, 255.0) as u8;
                }
                px
            })
            .collect()
    }

    #[test]
    fn lab_reference_values() {
        // White, black and mid gray are neutral: a ≈ b ≈ 0.
        for g in [0, 128, 255] {
            let (_, a, b) = srgb_to_lab([g, g, g]);
            assert!(a.abs() < 0.01 && b.abs() < 0.01, "gray {g} not neutral: {a}, {b}");
        }
        let (l, a, b) = srgb_to_lab([255, 255, 255]);
        assert!((l - 100.0).abs() < 0.01);
        let _ = (a, b);
        // Primary red, well-known Lab coordinates.
        let (l, a, b) = srgb_to_lab([255, 0, 0]);
        assert!((l - 53.24).abs() < 0.05, "L {l}");
        assert!((a - 80.09).abs() < 0.1, "a {a}");
        assert!((b - 67.20).abs() < 0.1, "b {b}");
        // Blue paint has negative-ish a, strongly negative b; yellow the
        // opposite in b.
        let (_, _, b_blue) = srgb_to_lab(BLUE_RGB);
        let (_, _, b_yellow) = srgb_to_lab(YELLOW_RGB);
        assert!(b_blue < -20.0);
        assert!(b_yellow > 20.0);
    }

    #[test]
    fn fitted_model_recovers_sample_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples = noisy_samples(BLUE_RGB, 4000, 12.0, &mut rng);
        let model = fit_color_model(&samples, None).unwrap();
        let abs: Vec<Vector2<f64>> = samples.iter().map(|&s| chromaticity(s)).collect();
        let mean = abs.iter().sum::<Vector2<f64>>() / abs.len() as f64;
        assert!((model.mean - mean).norm() < 1e-9);
        // About 99% of the training samples pass their own gate.
        let inside = abs.iter().filter(|ab| model.accepts(ab)).count();
        let frac = inside as f64 / abs.len() as f64;
        assert!(frac > 0.95, "only {frac} of samples inside the 99% gate");
        assert_eq!(model.threshold, CHI2_2DOF_99);
    }

    #[test]
    fn fit_rejects_tiny_sample_sets() {
        assert!(matches!(
            fit_color_model(&[[0, 0, 0]; 4], None),
            Err(SegmentationError::TooFewSamples { .. })
        ));
        // Identical samples give a singular covariance; fit regularizes.
        let model = fit_color_model(&[BLUE_RGB; 50], None).unwrap();
        assert!(model.covariance.determinant() > 0.0);
    }

    #[test]
    fn mahalanobis_matches_explicit_solve() {
        let model = ColorModel::new(
            Vector2::new(10.0, -30.0),
            Matrix2::new(4.0, 1.0, 1.0, 9.0),
            CHI2_2DOF_99,
        )
        .unwrap();
        let ab = Vector2::new(12.0, -25.0);
        let d = ab - model.mean;
        let expected = (model.covariance.try_inverse().unwrap() * d).dot(&d);
        assert!((model.mahalanobis_sq(&ab) - expected).abs() < 1e-12);
    }

    #[test]
    fn model_text_round_trips() {
        let model = ColorModel::new(
            Vector2::new(-3.5, 28.0),
            Matrix2::new(6.0, -0.5, -0.5, 3.0),
            7.0,
        )
        .unwrap();
        let back = ColorModel::from_text(&model.to_text()).unwrap();
        assert_eq!(model, back);
        assert!(ColorModel::from_text("mean 1 2\n").is_err());
        assert!(ColorModel::from_text("mean 1\ncov 1 0 1\n").is_err());
    }

    fn test_models() -> (ColorModel, ColorModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let blue = fit_color_model(&noisy_samples(BLUE_RGB, 2000, 10.0, &mut rng), None).unwrap();
        let yellow =
            fit_color_model(&noisy_samples(YELLOW_RGB, 2000, 10.0, &mut rng), None).unwrap();
        (blue, yellow)
    }

    #[test]
    fn labeling_separates_colors_and_guards_saturation() {
        let (blue, yellow) = test_models();
        let mut img = RgbImage::filled(6, 2, [120, 40, 35]);
        img.set(0, 0, BLUE_RGB);
        img.set(1, 0, YELLOW_RGB);
        img.set(2, 0, [252, 252, 250]); // glare
        img.set(3, 0, [45, 95, 175]); // near blue
        let labels = label_image(&img, &blue, &yellow);
        assert_eq!(labels.get(0, 0), PixelLabel::Marker(MarkerColor::Blue));
        assert_eq!(labels.get(1, 0), PixelLabel::Marker(MarkerColor::Yellow));
        assert_eq!(labels.get(2, 0), PixelLabel::Background);
        assert_eq!(labels.get(3, 0), PixelLabel::Marker(MarkerColor::Blue));
        assert_eq!(labels.get(5, 1), PixelLabel::Background);
    }

    #[test]
    fn ambiguous_pixels_go_to_the_nearer_model() {
        // Two overlapping models around the same mean region.
        let near = ColorModel::new(Vector2::new(0.0, 10.0), Matrix2::identity() * 25.0, 50.0)
            .unwrap();
        let far = ColorModel::new(Vector2::new(0.0, 16.0), Matrix2::identity() * 25.0, 50.0)
            .unwrap();
        // Gray-ish pixel with b between the means, closer to `near`.
        let ab = chromaticity([128, 128, 118]);
        assert!(near.accepts(&ab) && far.accepts(&ab));
        assert!(near.mahalanobis_sq(&ab) < far.mahalanobis_sq(&ab));
    }

    fn paint_rect(img: &mut RgbImage, x0: usize, y0: usize, w: usize, h: usize, color: [u8; 3]) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                img.set(x, y, color);
            }
        }
    }

    #[test]
    fn rectangle_moments_match_the_uniform_distribution() {
        let (blue, yellow) = test_models();
        let mut img = RgbImage::filled(60, 40, [120, 40, 35]);
        paint_rect(&mut img, 10, 5, 21, 9, BLUE_RGB);
        let labels = label_image(&img, &blue, &yellow);
        let regions = extract_regions(&labels, 15);
        assert_eq!(regions.len(), 1);
        let region = &regions[0];
        assert_eq!(region.area_px, 21 * 9);
        assert!((region.centroid - Pixel::new(20.0, 9.0)).norm() < 1e-9);
        // Uniform rectangle of width w has variance (w^2 - 1)/12 over the
        // discrete pixel grid; half_axes = 2 sigma.
        let major = 2.0 * ((21.0_f64 * 21.0 - 1.0) / 12.0).sqrt();
        let minor = 2.0 * ((9.0_f64 * 9.0 - 1.0) / 12.0).sqrt();
        assert!((region.half_axes.y - major).abs() < 1e-9);
        assert!((region.half_axes.x - minor).abs() < 1e-9);
        assert!(region.orientation_rad.abs() < 1e-9);
    }

    #[test]
    fn moments_recomputed_from_pixel_set_match() {
        let (blue, yellow) = test_models();
        let mut img = RgbImage::filled(64, 64, [120, 40, 35]);
        paint_rect(&mut img, 8, 8, 14, 6, YELLOW_RGB);
        paint_rect(&mut img, 20, 13, 10, 7, YELLOW_RGB); // overlapping L-shape
        let labels = label_image(&img, &blue, &yellow);
        let regions = extract_regions(&labels, 15);
        assert_eq!(regions.len(), 1);
        let region = &regions[0];
        let (centroid, half_axes, orientation) = shape_from_pixels(&region.pixels);
        assert_eq!(centroid, region.centroid);
        assert_eq!(half_axes, region.half_axes);
        assert_eq!(orientation, region.orientation_rad);
    }

    #[test]
    fn diagonal_touch_is_connected_and_small_regions_drop() {
        let (blue, yellow) = test_models();
        let mut img = RgbImage::filled(40, 40, [120, 40, 35]);
        // Two 4x4 squares touching only at one diagonal corner.
        paint_rect(&mut img, 4, 4, 4, 4, BLUE_RGB);
        paint_rect(&mut img, 8, 8, 4, 4, BLUE_RGB);
        // A speck below any reasonable min_area.
        paint_rect(&mut img, 30, 30, 2, 2, BLUE_RGB);
        let labels = label_image(&img, &blue, &yellow);
        let regions = extract_regions(&labels, 15);
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].area_px, 32);
    }

    #[test]
    fn separate_colors_make_separate_regions() {
        let (blue, yellow) = test_models();
        let mut img = RgbImage::filled(40, 20, [120, 40, 35]);
        paint_rect(&mut img, 2, 2, 8, 8, BLUE_RGB);
        paint_rect(&mut img, 10, 2, 8, 8, YELLOW_RGB); // adjacent, other color
        let labels = label_image(&img, &blue, &yellow);
        let regions = extract_regions(&labels, 15);
        assert_eq!(regions.len(), 2);
        assert_ne!(regions[0].color, regions[1].color);
    }

    #[test]
    fn min_area_scales_with_image_width() {
        assert_eq!(default_min_area(768), 15);
        assert_eq!(default_min_area(384), 4);
        assert_eq!(default_min_area(1536), 60);
        assert_eq!(default_min_area(50), 1);
    }

    #[test]
    fn labeling_is_deterministic_across_runs() {
        let (blue, yellow) = test_models();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut img = RgbImage::new(97, 53);
        for y in 0..53 {
            for x in 0..97 {
                img.set(x, y, [rng.random(), rng.random(), rng.random()]);
            }
        }
        let a = label_image(&img, &blue, &yellow);
        let b = label_image(&img, &blue, &yellow);
        for y in 0..53 {
            for x in 0..97 {
                assert_eq!(a.get(x, y), b.get(x, y));
            }
        }
    }
}
