//! Model-predicted image features: apparent marker-transition corners, the
//! apparent contour of the instrument, projected marker centroids, and the
//! finite-difference Jacobian of the corners with respect to the 7-DOF
//! configuration.
//!
//! Near a marker transition the instrument surface is treated as a straight
//! cylinder around the local backbone tangent. A viewing ray grazes that
//! cylinder along two generator lines; the transition corners are the points
//! of the transition circle lying on those lines. This exact tangency keeps
//! the predicted corners on the rendered silhouette to machine precision.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraModel, Pixel};
use crate::instrument::{
    backbone_pose_extended, marker_boundary_sections, Configuration, CrossSection, GeometryError,
    InstrumentGeometry,
};

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("corner {0:?} is not visible at the given configuration")]
    CornerNotVisible(CornerLabel),
    #[error("no visible corners at the given configuration")]
    NothingVisible,
}

/// Which side of the projected instrument axis a corner lies on, with the
/// axis oriented base to tip and image y pointing down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Side {
    Upper,
    Lower,
}

impl Side {
    pub fn opposite(self) -> Self {
        match self {
            Side::Upper => Side::Lower,
            Side::Lower => Side::Upper,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Upper => "upper",
            Side::Lower => "lower",
        }
    }
}

/// Identity of an apparent corner: transition index (0 at the bend base)
/// plus the side of the instrument axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CornerLabel {
    pub boundary_index: usize,
    pub side: Side,
}

impl CornerLabel {
    pub fn new(boundary_index: usize, side: Side) -> Self {
        CornerLabel { boundary_index, side }
    }

    /// All labels for a geometry, ordered base to tip, upper before lower.
    pub fn all(n_markers: usize) -> Vec<CornerLabel> {
        let mut labels = Vec::with_capacity(2 * (n_markers + 1));
        for j in 0..=n_markers {
            labels.push(CornerLabel::new(j, Side::Upper));
            labels.push(CornerLabel::new(j, Side::Lower));
        }
        labels
    }
}

impl std::fmt::Display for CornerLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.boundary_index, self.side.as_str())
    }
}

/// Model-predicted corners for one configuration. `visibility` holds an
/// entry for every label of the geometry; `corners` holds pixels for the
/// visible ones.
#[derive(Debug, Clone)]
pub struct FeaturePrediction {
    pub corners: BTreeMap<CornerLabel, Pixel>,
    pub visibility: BTreeMap<CornerLabel, bool>,
}

impl FeaturePrediction {
    pub fn visible_labels(&self) -> Vec<CornerLabel> {
        self.visibility
            .iter()
            .filter_map(|(label, &v)| v.then_some(*label))
            .collect()
    }

    pub fn n_visible(&self) -> usize {
        self.visibility.values().filter(|v| **v).count()
    }
}

/// Tangency points of the viewing rays grazing a local cylinder of radius
/// `radius` around axis direction `normal` through `center`. Returns the
/// two surface points and their outward radial directions, or `None` when
/// the camera center is inside the cylinder or looks along its axis.
pub fn limb_points(
    center: &Vector3<f64>,
    normal: &Vector3<f64>,
    radius: f64,
) -> Option<[(Vector3<f64>, Vector3<f64>); 2]> {
    let n = normal.normalize();
    let cross = center.cross(&n);
    let offaxis = cross.norm();
    // Distance from the camera center to the cylinder axis.
    if offaxis <= radius * (1.0 + 1e-12) {
        return None;
    }
    let e1 = cross / offaxis;
    let e2 = n.cross(&e1);
    let sin_a = -radius / center.dot(&e2);
    let cos_a = (1.0 - sin_a * sin_a).max(0.0).sqrt();
    let u_plus = cos_a * e1 + sin_a * e2;
    let u_minus = -cos_a * e1 + sin_a * e2;
    Some([
        (center + radius * u_plus, u_plus),
        (center + radius * u_minus, u_minus),
    ])
}

/// Signed z component of the 2D cross product `d × w`; negative means `w`
/// points to the upper side of direction `d` (image y grows downward).
fn cross_z(d: &Vector2<f64>, w: &Vector2<f64>) -> f64 {
    d.x * w.y - d.y * w.x
}

/// Image direction of the backbone at arc position `s`, from projecting two
/// nearby extended backbone points.
fn image_axis_direction(
    geometry: &InstrumentGeometry,
    camera: &CameraModel,
    config: &Configuration,
    s: f64,
) -> Option<Vector2<f64>> {
    let h = 0.25 * geometry.marker_length_mm;
    let behind = backbone_pose_extended(geometry, config, s - h).position;
    let ahead = backbone_pose_extended(geometry, config, s + h).position;
    let a = camera.project(&behind).ok()?;
    let b = camera.project(&ahead).ok()?;
    let d = b - a;
    if d.norm() < 1e-12 {
        return None;
    }
    Some(d / d.norm())
}

fn classify_side(direction: &Vector2<f64>, base: &Pixel, point: &Pixel) -> Side {
    if cross_z(direction, &(point - base)) < 0.0 {
        Side::Upper
    } else {
        Side::Lower
    }
}

fn section_corners(
    camera: &CameraModel,
    section: &CrossSection,
    axis_dir: Option<Vector2<f64>>,
) -> Option<[(Side, Pixel); 2]> {
    let points = limb_points(&section.center, &section.normal, section.radius_mm)?;
    let direction = axis_dir?;
    let base = camera.project(&section.center).ok()?;
    let mut out = Vec::with_capacity(2);
    for (point, _) in &points {
        if point.z <= 0.0 {
            return None;
        }
        let px = camera.project(point).ok()?;
        out.push((classify_side(&direction, &base, &px), px));
    }
    if out[0].0 == out[1].0 {
        // Projective degeneracy: both tangency points on one side.
        return None;
    }
    Some([out[0], out[1]])
}

/// Arc positions retracted into the channel are hidden.
fn retracted(config: &Configuration, s: f64) -> bool {
    config.lambda_mm + s < -1e-9
}

/// Predicts the apparent marker-transition corners of a configuration.
/// Corners behind the camera, outside the image, retracted into the channel
/// or lost to a tangency degeneracy are reported as not visible.
pub fn apparent_corners(
    geometry: &InstrumentGeometry,
    camera: &CameraModel,
    config: &Configuration,
) -> FeaturePrediction {
    let mut corners = BTreeMap::new();
    let mut visibility = BTreeMap::new();
    for label in CornerLabel::all(geometry.n_markers) {
        visibility.insert(label, false);
    }
    for section in marker_boundary_sections(geometry, config) {
        let s = section.boundary_index as f64 * geometry.marker_length_mm;
        if retracted(config, s) || section.center.z <= 0.0 {
            continue;
        }
        let axis_dir = image_axis_direction(geometry, camera, config, s);
        let Some(pair) = section_corners(camera, &section, axis_dir) else {
            continue;
        };
        for (side, px) in pair {
            let label = CornerLabel::new(section.boundary_index, side);
            if camera.contains(&px) {
                corners.insert(label, px);
                visibility.insert(label, true);
            }
        }
    }
    FeaturePrediction { corners, visibility }
}

/// Projected backbone midpoints of the markers (one per marker) for the
/// centroid-based sensitivity baseline.
pub fn marker_centroids(
    geometry: &InstrumentGeometry,
    camera: &CameraModel,
    config: &Configuration,
) -> Result<Vec<Pixel>, ProjectionError> {
    let mut out = Vec::with_capacity(geometry.n_markers);
    for m in 0..geometry.n_markers {
        let s = (m as f64 + 0.5) * geometry.marker_length_mm;
        let pose = backbone_pose_extended(geometry, config, s);
        let px = camera
            .project(&pose.position)
            .map_err(|_| ProjectionError::NothingVisible)?;
        out.push(px);
    }
    Ok(out)
}

/// Apparent contour of the bendable section as two ordered polylines
/// (upper, lower), sampled at `n_samples` arc positions. Samples lost to
/// degeneracies are skipped; ordering along the backbone is kept.
pub fn apparent_contours(
    geometry: &InstrumentGeometry,
    camera: &CameraModel,
    config: &Configuration,
    n_samples: usize,
) -> (Vec<Pixel>, Vec<Pixel>) {
    let mut upper = Vec::new();
    let mut lower = Vec::new();
    let n = n_samples.max(2);
    for i in 0..n {
        let s = geometry.bend_length_mm * i as f64 / (n - 1) as f64;
        if retracted(config, s) {
            continue;
        }
        let pose = backbone_pose_extended(geometry, config, s);
        if pose.position.z <= 0.0 {
            continue;
        }
        let section = CrossSection {
            center: pose.position,
            normal: nalgebra::Unit::new_normalize(pose.tangent()),
            radius_mm: geometry.radius_mm(),
            boundary_index: 0,
        };
        let axis_dir = image_axis_direction(geometry, camera, config, s);
        let Some(pair) = section_corners(camera, &section, axis_dir) else {
            continue;
        };
        for (side, px) in pair {
            match side {
                Side::Upper => upper.push(px),
                Side::Lower => lower.push(px),
            }
        }
    }
    (upper, lower)
}

/// Finite-difference Jacobian of the corner pixels with respect to the
/// seven configuration parameters, rows ordered `(u, v)` per label in the
/// given order. Columns whose perturbation makes any requested corner
/// invisible are flagged invalid and zeroed.
#[derive(Debug, Clone)]
pub struct FeatureJacobian {
    pub matrix: DMatrix<f64>,
    pub labels: Vec<CornerLabel>,
    pub column_valid: [bool; 7],
}

/// Central-difference steps per parameter: 1e-4 mm for translations and the
/// feed, 1e-5 rad for angles.
pub const JACOBIAN_STEPS: [f64; 7] = [1e-4, 1e-4, 1e-5, 1e-5, 1e-4, 1e-5, 1e-5];

pub fn feature_jacobian(
    geometry: &InstrumentGeometry,
    camera: &CameraModel,
    config: &Configuration,
    labels: &[CornerLabel],
) -> Result<FeatureJacobian, ProjectionError> {
    let center = apparent_corners(geometry, camera, config);
    for label in labels {
        if !center.visibility.get(label).copied().unwrap_or(false) {
            return Err(ProjectionError::CornerNotVisible(*label));
        }
    }
    let mut matrix = DMatrix::zeros(2 * labels.len(), 7);
    let mut column_valid = [true; 7];
    let base = config.as_array();
    for j in 0..7 {
        let h = JACOBIAN_STEPS[j];
        let mut plus = base;
        let mut minus = base;
        plus[j] += h;
        minus[j] -= h;
        let fp = apparent_corners(geometry, camera, &Configuration::from_array(plus));
        let fm = apparent_corners(geometry, camera, &Configuration::from_array(minus));
        for (i, label) in labels.iter().enumerate() {
            match (fp.corners.get(label), fm.corners.get(label)) {
                (Some(p), Some(m)) => {
                    matrix[(2 * i, j)] = (p.x - m.x) / (2.0 * h);
                    matrix[(2 * i + 1, j)] = (p.y - m.y) / (2.0 * h);
                }
                _ => {
                    // Visibility lost under perturbation; the column carries
                    // no usable gradient.
                    column_valid[j] = false;
                }
            }
        }
        if !column_valid[j] {
            for i in 0..2 * labels.len() {
                matrix[(i, j)] = 0.0;
            }
        }
    }
    Ok(FeatureJacobian { matrix, labels: labels.to_vec(), column_valid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instrument::MechanicalParams;

    fn setup() -> (InstrumentGeometry, CameraModel) {
        (InstrumentGeometry::default(), CameraModel::synthetic_pal())
    }

    fn centered_config() -> Configuration {
        Configuration::new(MechanicalParams::new(-4.0, 2.5, 0.15, -0.10), 12.0, 0.8, 0.9)
    }

    #[test]
    fn tangency_residual_is_machine_precision() {
        let center = Vector3::new(-3.0, 4.0, 25.0);
        let normal = Vector3::new(0.3, -0.1, 0.95);
        let points = limb_points(&center, &normal, 1.81).unwrap();
        for (point, radial) in points {
            // The viewing ray must be orthogonal to the surface normal.
            let rel = radial.dot(&point).abs() / point.norm();
            assert!(rel < 1e-9, "tangency residual {rel}");
            // And the point must lie on the cylinder surface.
            let n = normal.normalize();
            let to_axis = (point - center) - (point - center).dot(&n) * n;
            assert!((to_axis.norm() - 1.81).abs() < 1e-12);
        }
    }

    #[test]
    fn limb_points_degenerate_when_axis_passes_near_the_camera() {
        // Axis through the camera center: off-axis distance below radius.
        let center = Vector3::new(0.0, 0.0, 25.0);
        let normal = Vector3::new(0.0, 0.0, 1.0);
        assert!(limb_points(&center, &normal, 1.81).is_none());
        let off = Vector3::new(1.0, 0.0, 25.0);
        assert!(limb_points(&off, &normal, 1.81).is_none());
        let clear = Vector3::new(5.0, 0.0, 25.0);
        assert!(limb_points(&clear, &normal, 1.81).is_some());
    }

    #[test]
    fn visible_corners_cover_both_sides_of_every_transition() {
        let (geometry, camera) = setup();
        let prediction = apparent_corners(&geometry, &camera, &centered_config());
        assert_eq!(prediction.n_visible(), 2 * (geometry.n_markers + 1));
        for j in 0..=geometry.n_markers {
            let u = prediction.corners[&CornerLabel::new(j, Side::Upper)];
            let l = prediction.corners[&CornerLabel::new(j, Side::Lower)];
            // Corner pairs straddle the projected axis roughly one diameter
            // apart on screen.
            let gap = (u - l).norm();
            assert!(gap > 5.0 && gap < 120.0, "gap {gap} at transition {j}");
            assert!(camera.contains(&u) && camera.contains(&l));
        }
    }

    #[test]
    fn corner_pairs_straddle_the_projected_axis() {
        let (geometry, camera) = setup();
        let config = centered_config();
        let prediction = apparent_corners(&geometry, &camera, &config);
        for j in 0..=geometry.n_markers {
            let s = j as f64 * geometry.marker_length_mm;
            let direction = image_axis_direction(&geometry, &camera, &config, s).unwrap();
            let base = camera
                .project(&backbone_pose_extended(&geometry, &config, s).position)
                .unwrap();
            let u = prediction.corners[&CornerLabel::new(j, Side::Upper)];
            let l = prediction.corners[&CornerLabel::new(j, Side::Lower)];
            assert!(cross_z(&direction, &(u - base)) < 0.0);
            assert!(cross_z(&direction, &(l - base)) > 0.0);
        }
    }

    #[test]
    fn side_labels_are_stable_under_small_perturbations() {
        let (geometry, camera) = setup();
        let config = centered_config();
        let reference = apparent_corners(&geometry, &camera, &config);
        for j in 0..7 {
            for sign in [-1.0, 1.0] {
                let mut v = config.as_array();
                v[j] += sign * 1e-3 * JACOBIAN_STEPS[j] / 1e-4;
                let perturbed = apparent_corners(&geometry, &camera, &Configuration::from_array(v));
                for (label, px) in &reference.corners {
                    let moved = perturbed.corners.get(label).expect("corner vanished");
                    assert!((moved - px).norm() < 5.0);
                }
            }
        }
    }

    #[test]
    fn retracted_transitions_are_hidden() {
        let (geometry, camera) = setup();
        let mut config = centered_config();
        config.lambda_mm = -5.0;
        let prediction = apparent_corners(&geometry, &camera, &config);
        // Transition 0 (s=0) and 1 (s=3.7) sit behind the channel mouth.
        for j in 0..2 {
            assert!(!prediction.visibility[&CornerLabel::new(j, Side::Upper)]);
            assert!(!prediction.visibility[&CornerLabel::new(j, Side::Lower)]);
        }
        assert!(prediction.visibility[&CornerLabel::new(3, Side::Upper)]);
    }

    #[test]
    fn contours_bracket_the_corners() {
        let (geometry, camera) = setup();
        let config = centered_config();
        let (upper, lower) = apparent_contours(&geometry, &camera, &config, 200);
        assert!(upper.len() > 150 && lower.len() > 150);
        let prediction = apparent_corners(&geometry, &camera, &config);
        for (label, px) in &prediction.corners {
            let polyline = match label.side {
                Side::Upper => &upper,
                Side::Lower => &lower,
            };
            let nearest = polyline
                .iter()
                .map(|p| (p - px).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest < 1.0, "corner {label} off its contour by {nearest}");
        }
    }

    #[test]
    fn jacobian_matches_a_coarser_difference() {
        let (geometry, camera) = setup();
        let config = centered_config();
        let labels = apparent_corners(&geometry, &camera, &config).visible_labels();
        let jac = feature_jacobian(&geometry, &camera, &config, &labels).unwrap();
        assert!(jac.column_valid.iter().all(|&v| v));
        // Independent check with a 10x larger step.
        for j in 0..7 {
            let h = 10.0 * JACOBIAN_STEPS[j];
            let mut plus = config.as_array();
            let mut minus = config.as_array();
            plus[j] += h;
            minus[j] -= h;
            let fp = apparent_corners(&geometry, &camera, &Configuration::from_array(plus));
            let fm = apparent_corners(&geometry, &camera, &Configuration::from_array(minus));
            for (i, label) in labels.iter().enumerate() {
                let d = (fp.corners[label] - fm.corners[label]) / (2.0 * h);
                assert!((jac.matrix[(2 * i, j)] - d.x).abs() < 2e-2);
                assert!((jac.matrix[(2 * i + 1, j)] - d.y).abs() < 2e-2);
            }
        }
    }

    #[test]
    fn jacobian_rejects_invisible_labels() {
        let (geometry, camera) = setup();
        let mut config = centered_config();
        config.lambda_mm = -5.0;
        let labels = vec![CornerLabel::new(0, Side::Upper)];
        assert!(matches!(
            feature_jacobian(&geometry, &camera, &config, &labels),
            Err(ProjectionError::CornerNotVisible(_))
        ));
    }

    #[test]
    fn centroids_follow_the_marker_midpoints() {
        let (geometry, camera) = setup();
        let config = centered_config();
        let centroids = marker_centroids(&geometry, &camera, &config).unwrap();
        assert_eq!(centroids.len(), geometry.n_markers);
        let prediction = apparent_corners(&geometry, &camera, &config);
        for (m, centroid) in centroids.iter().enumerate() {
            // Midpoint between neighboring transitions, roughly.
            let a = prediction.corners[&CornerLabel::new(m, Side::Upper)];
            let b = prediction.corners[&CornerLabel::new(m + 1, Side::Lower)];
            let mid = 0.5 * (a + b);
            assert!((centroid - mid).norm() < 20.0);
        }
    }
}
