//! Instrument geometry and constant-curvature forward kinematics.
//!
//! The bendable section is modeled as a single circular arc of fixed length
//! preceded by a straight feed-out segment. The section leaves an instrument
//! channel whose pose relative to the camera is described by four mechanical
//! parameters; three more parameters (feed, axial roll, bending angle) give
//! the full 7-DOF configuration `[x_ch, y_ch, psi, mu, lambda, phi, theta]`.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("arc position {s} mm outside [0, {max}] mm")]
    ArcOutOfRange { s: f64, max: f64 },
    #[error("invalid instrument geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),
}

/// Marker paint colors, alternating along the instrument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MarkerColor {
    Blue,
    Yellow,
}

impl MarkerColor {
    pub fn opposite(self) -> Self {
        match self {
            MarkerColor::Blue => MarkerColor::Yellow,
            MarkerColor::Yellow => MarkerColor::Blue,
        }
    }
}

/// Fixed geometry of the marked bendable section.
///
/// Lengths are millimeters. Markers of equal length start at the bend base
/// (arc position 0) and tile the section contiguously toward the tip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentGeometry {
    pub bend_length_mm: f64,
    pub diameter_mm: f64,
    pub n_markers: usize,
    pub marker_length_mm: f64,
    /// Distance from the end of the bendable section to the tool center point.
    pub tip_offset_mm: f64,
    pub first_marker_color: MarkerColor,
    /// Depth of the channel exit along the camera axis.
    pub channel_z_mm: f64,
}

impl Default for InstrumentGeometry {
    fn default() -> Self {
        InstrumentGeometry {
            bend_length_mm: 18.5,
            diameter_mm: 3.62,
            n_markers: 5,
            marker_length_mm: 3.7,
            tip_offset_mm: 15.8,
            first_marker_color: MarkerColor::Blue,
            channel_z_mm: 0.0,
        }
    }
}

impl InstrumentGeometry {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let positive = [
            ("bend_length_mm", self.bend_length_mm),
            ("diameter_mm", self.diameter_mm),
            ("marker_length_mm", self.marker_length_mm),
            ("tip_offset_mm", self.tip_offset_mm),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(GeometryError::InvalidGeometry(format!(
                    "{name} must be positive, got {value}"
                )));
            }
        }
        if self.n_markers == 0 {
            return Err(GeometryError::InvalidGeometry("n_markers must be > 0".into()));
        }
        let marked = self.n_markers as f64 * self.marker_length_mm;
        if marked > self.bend_length_mm + 1e-6 {
            return Err(GeometryError::InvalidGeometry(format!(
                "markers cover {marked} mm but the bendable section is only {} mm",
                self.bend_length_mm
            )));
        }
        Ok(())
    }

    pub fn radius_mm(&self) -> f64 {
        0.5 * self.diameter_mm
    }

    /// Arc positions of the marker transition planes, base to tip
    /// (`n_markers + 1` values, first is the bend base).
    pub fn boundary_arcs_mm(&self) -> Vec<f64> {
        (0..=self.n_markers)
            .map(|j| j as f64 * self.marker_length_mm)
            .collect()
    }

    /// Marker color at arc position `s`, or `None` outside the marked span.
    pub fn marker_color_at(&self, s: f64) -> Option<MarkerColor> {
        if s < 0.0 || s > self.n_markers as f64 * self.marker_length_mm {
            return None;
        }
        let index = ((s / self.marker_length_mm) as usize).min(self.n_markers - 1);
        Some(if index % 2 == 0 {
            self.first_marker_color
        } else {
            self.first_marker_color.opposite()
        })
    }
}

/// Mounting of the instrument channel in the camera frame: translation of the
/// channel exit in the image plane and two tilt angles of the channel axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanicalParams {
    pub x_ch_mm: f64,
    pub y_ch_mm: f64,
    /// Tilt about the camera y axis, radians.
    pub psi_rad: f64,
    /// Tilt about the camera x axis, radians.
    pub mu_rad: f64,
}

impl MechanicalParams {
    pub fn new(x_ch_mm: f64, y_ch_mm: f64, psi_rad: f64, mu_rad: f64) -> Self {
        MechanicalParams { x_ch_mm, y_ch_mm, psi_rad, mu_rad }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x_ch_mm, self.y_ch_mm, self.psi_rad, self.mu_rad]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        MechanicalParams::new(v[0], v[1], v[2], v[3])
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        for (name, angle) in [("psi", self.psi_rad), ("mu", self.mu_rad)] {
            if !(angle.abs() < std::f64::consts::FRAC_PI_2) {
                return Err(GeometryError::InvalidConfiguration(format!(
                    "{name} must stay within (-pi/2, pi/2), got {angle}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for MechanicalParams {
    fn default() -> Self {
        MechanicalParams::new(0.0, 0.0, 0.0, 0.0)
    }
}

/// Full 7-DOF state `[x_ch, y_ch, psi, mu, lambda, phi, theta]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub mech: MechanicalParams,
    /// Straight feed-out between channel exit and bend base, mm. Negative
    /// values retract part of the bendable section into the channel.
    pub lambda_mm: f64,
    /// Axial roll of the bending plane, radians.
    pub phi_rad: f64,
    /// Total bending angle of the section, radians. Zero means straight.
    pub theta_rad: f64,
}

impl Default for Configuration {
    fn default() -> Self {
        Configuration::straight(MechanicalParams::default(), 0.0)
    }
}

impl Configuration {
    pub fn new(mech: MechanicalParams, lambda_mm: f64, phi_rad: f64, theta_rad: f64) -> Self {
        Configuration { mech, lambda_mm, phi_rad, theta_rad }
    }

    pub fn straight(mech: MechanicalParams, lambda_mm: f64) -> Self {
        Configuration::new(mech, lambda_mm, 0.0, 0.0)
    }

    pub fn as_array(&self) -> [f64; 7] {
        let m = self.mech.as_array();
        [m[0], m[1], m[2], m[3], self.lambda_mm, self.phi_rad, self.theta_rad]
    }

    pub fn from_array(v: [f64; 7]) -> Self {
        Configuration::new(
            MechanicalParams::new(v[0], v[1], v[2], v[3]),
            v[4],
            v[5],
            v[6],
        )
    }

    pub fn validate(&self, geometry: &InstrumentGeometry) -> Result<(), GeometryError> {
        self.mech.validate()?;
        if self.lambda_mm < -geometry.bend_length_mm {
            return Err(GeometryError::InvalidConfiguration(format!(
                "lambda {} mm retracts past the whole section",
                self.lambda_mm
            )));
        }
        if !self.theta_rad.is_finite() || self.theta_rad.abs() >= std::f64::consts::PI {
            return Err(GeometryError::InvalidConfiguration(format!(
                "theta must stay within (-pi, pi), got {}",
                self.theta_rad
            )));
        }
        Ok(())
    }
}

/// Position and orientation of a backbone cross-section in the camera frame.
/// Column 2 of `orientation` is the backbone tangent.
#[derive(Debug, Clone, Copy)]
pub struct BackbonePose {
    pub position: Vector3<f64>,
    pub orientation: Matrix3<f64>,
}

impl BackbonePose {
    pub fn tangent(&self) -> Vector3<f64> {
        self.orientation.column(2).into_owned()
    }
}

/// Circular cross-section of the instrument surface at a marker transition.
#[derive(Debug, Clone, Copy)]
pub struct CrossSection {
    pub center: Vector3<f64>,
    pub normal: Unit<Vector3<f64>>,
    pub radius_mm: f64,
    /// Transition index, 0 at the bend base.
    pub boundary_index: usize,
}

/// Rotation of the channel axis: tilt about y, then about x.
pub fn channel_rotation(mech: &MechanicalParams) -> Matrix3<f64> {
    let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), mech.psi_rad);
    let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), mech.mu_rad);
    (ry * rx).into_inner()
}

pub fn channel_origin(geometry: &InstrumentGeometry, mech: &MechanicalParams) -> Vector3<f64> {
    Vector3::new(mech.x_ch_mm, mech.y_ch_mm, geometry.channel_z_mm)
}

/// Unit direction of the channel axis in the camera frame.
pub fn channel_axis(mech: &MechanicalParams) -> Unit<Vector3<f64>> {
    Unit::new_normalize(channel_rotation(mech) * Vector3::z())
}

/// `(1 - cos a) / a`, stable near zero.
fn versine_over(a: f64) -> f64 {
    let h = 0.5 * a;
    let s = h.sin();
    if a.abs() < 1e-8 {
        h
    } else {
        2.0 * s * s / a
    }
}

/// `sin(a) / a`, stable near zero.
fn sinc(a: f64) -> f64 {
    if a.abs() < 1e-8 {
        1.0 - a * a / 6.0
    } else {
        a.sin() / a
    }
}

fn pose_unchecked(geometry: &InstrumentGeometry, config: &Configuration, s: f64) -> BackbonePose {
    let r_ch = channel_rotation(&config.mech);
    let origin = channel_origin(geometry, &config.mech);
    let r_pre = r_ch * Rotation3::from_axis_angle(&Vector3::z_axis(), config.phi_rad).into_inner();
    let base = origin + r_ch * Vector3::new(0.0, 0.0, config.lambda_mm);

    let length = geometry.bend_length_mm;
    if s <= 0.0 {
        // Straight continuation into the channel; used when part of the
        // section is retracted.
        return BackbonePose {
            position: base + r_pre * Vector3::new(0.0, 0.0, s),
            orientation: r_pre,
        };
    }
    let s_arc = s.min(length);
    let kappa_s = config.theta_rad * s_arc / length;
    let local = Vector3::new(s_arc * versine_over(kappa_s), 0.0, s_arc * sinc(kappa_s));
    let r_local = Rotation3::from_axis_angle(&Vector3::y_axis(), kappa_s).into_inner();
    let mut position = base + r_pre * local;
    let orientation = r_pre * r_local;
    if s > length {
        // Straight continuation past the bend, along the end tangent.
        position += (s - length) * orientation.column(2);
    }
    BackbonePose { position, orientation }
}

/// Backbone pose at arc position `s` within the bendable section.
pub fn backbone_pose(
    geometry: &InstrumentGeometry,
    config: &Configuration,
    s: f64,
) -> Result<BackbonePose, GeometryError> {
    let max = geometry.bend_length_mm;
    if !(-1e-9..=max + 1e-9).contains(&s) {
        return Err(GeometryError::ArcOutOfRange { s, max });
    }
    Ok(pose_unchecked(geometry, config, s.clamp(0.0, max)))
}

/// Backbone pose extended past both ends of the bendable section: straight
/// along the pre-bend axis for `s < 0` and along the end tangent for
/// `s > bend_length`.
pub fn backbone_pose_extended(
    geometry: &InstrumentGeometry,
    config: &Configuration,
    s: f64,
) -> BackbonePose {
    pose_unchecked(geometry, config, s)
}

/// Tool center point in the camera frame.
pub fn tcp_position(geometry: &InstrumentGeometry, config: &Configuration) -> Vector3<f64> {
    let end = pose_unchecked(geometry, config, geometry.bend_length_mm);
    end.position + geometry.tip_offset_mm * end.tangent()
}

/// Surface cross-sections at all marker transitions, base to tip.
pub fn marker_boundary_sections(
    geometry: &InstrumentGeometry,
    config: &Configuration,
) -> Vec<CrossSection> {
    geometry
        .boundary_arcs_mm()
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            let pose = pose_unchecked(geometry, config, s);
            CrossSection {
                center: pose.position,
                normal: Unit::new_normalize(pose.tangent()),
                radius_mm: geometry.radius_mm(),
                boundary_index: j,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn skew(v: Vector3<f64>) -> Matrix3<f64> {
        Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
    }

    /// Reference backbone pose by RK4 integration of the frame equations
    /// dp/ds = R e_z, dR/ds = R [0, kappa, 0]_x, from the bend base.
    fn integrated_pose(
        geometry: &InstrumentGeometry,
        config: &Configuration,
        s_end: f64,
        steps: usize,
    ) -> BackbonePose {
        let r_ch = channel_rotation(&config.mech);
        let r_pre =
            r_ch * Rotation3::from_axis_angle(&Vector3::z_axis(), config.phi_rad).into_inner();
        let mut p = channel_origin(geometry, &config.mech)
            + r_ch * Vector3::new(0.0, 0.0, config.lambda_mm);
        let mut r = r_pre;
        let kappa = config.theta_rad / geometry.bend_length_mm;
        let omega = skew(Vector3::new(0.0, kappa, 0.0));
        let h = s_end / steps as f64;
        for _ in 0..steps {
            // RK4 on the coupled (p, R) system; R drift is re-orthonormalized
            // only implicitly through small step size.
            let k1p = r * Vector3::z();
            let k1r = r * omega;
            let r2 = r + 0.5 * h * k1r;
            let k2p = r2 * Vector3::z();
            let k2r = r2 * omega;
            let r3 = r + 0.5 * h * k2r;
            let k3p = r3 * Vector3::z();
            let k3r = r3 * omega;
            let r4 = r + h * k3r;
            let k4p = r4 * Vector3::z();
            let k4r = r4 * omega;
            p += h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
            r += h / 6.0 * (k1r + 2.0 * k2r + 2.0 * k3r + k4r);
        }
        BackbonePose { position: p, orientation: r }
    }

    fn geometry() -> InstrumentGeometry {
        InstrumentGeometry::default()
    }

    #[test]
    fn straight_configuration_matches_hand_computation() {
        let geometry = geometry();
        let mech = MechanicalParams::new(-13.3, 6.2, 10.0_f64.to_radians(), 0.0);
        let config = Configuration::straight(mech, 0.0);
        let pose = backbone_pose(&geometry, &config, geometry.bend_length_mm).unwrap();
        // 18.5 mm along an axis tilted 10 degrees about y.
        assert!((pose.position.x - -10.088).abs() < 1e-3);
        assert!((pose.position.y - 6.200).abs() < 1e-3);
        assert!((pose.position.z - 18.218).abs() < 1e-3);
    }

    #[test]
    fn quarter_bend_matches_closed_form_arc() {
        let geometry = geometry();
        let config = Configuration::new(
            MechanicalParams::default(),
            0.0,
            0.0,
            std::f64::consts::FRAC_PI_2,
        );
        let pose = backbone_pose(&geometry, &config, geometry.bend_length_mm).unwrap();
        let radius = geometry.bend_length_mm / std::f64::consts::FRAC_PI_2;
        assert_relative_eq!(pose.position.x, radius, epsilon = 1e-9);
        assert_relative_eq!(pose.position.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(pose.position.z, radius, epsilon = 1e-9);
    }

    #[test]
    fn closed_form_matches_integrated_frame_equations() {
        let geometry = geometry();
        let cases = [
            Configuration::new(MechanicalParams::new(-13.3, 6.2, 0.17, -0.08), 4.0, 0.7, 1.2),
            Configuration::new(MechanicalParams::new(2.0, -1.0, -0.1, 0.2), 9.0, -2.1, -0.9),
            Configuration::new(MechanicalParams::default(), 0.0, 0.0, std::f64::consts::FRAC_PI_2),
            Configuration::new(MechanicalParams::new(1.0, 1.0, 0.05, 0.05), 2.0, 3.0, 1e-5),
        ];
        for config in &cases {
            for s in [3.7, 11.1, geometry.bend_length_mm] {
                let closed = backbone_pose(&geometry, config, s).unwrap();
                let reference = integrated_pose(&geometry, config, s, 20_000);
                assert!(
                    (closed.position - reference.position).norm() < 1e-4,
                    "position mismatch at s={s}: {:?} vs {:?}",
                    closed.position,
                    reference.position
                );
                assert!((closed.orientation - reference.orientation).norm() < 1e-4);
            }
        }
    }

    #[test]
    fn near_zero_theta_is_continuous() {
        let geometry = geometry();
        let mech = MechanicalParams::new(1.0, -2.0, 0.1, 0.05);
        let straight = Configuration::new(mech, 3.0, 0.4, 0.0);
        let bent = Configuration::new(mech, 3.0, 0.4, 1e-9);
        for s in [0.0, 5.0, 18.5] {
            let a = backbone_pose(&geometry, &straight, s).unwrap();
            let b = backbone_pose(&geometry, &bent, s).unwrap();
            assert!((a.position - b.position).norm() < 1e-6);
        }
    }

    #[test]
    fn straight_limit_matches_axis_formula() {
        let geometry = geometry();
        let mech = MechanicalParams::new(-3.0, 4.0, 0.12, -0.21);
        let config = Configuration::new(mech, 6.0, 1.3, 1e-6);
        let origin = channel_origin(&geometry, &mech);
        let axis = channel_axis(&mech);
        for i in 0..=20 {
            let s = geometry.bend_length_mm * i as f64 / 20.0;
            let pose = backbone_pose(&geometry, &config, s).unwrap();
            let straight = origin + (config.lambda_mm + s) * axis.into_inner();
            assert!((pose.position - straight).norm() < 1e-4);
        }
    }

    #[test]
    fn arc_is_planar_and_has_correct_length() {
        let geometry = geometry();
        let config = Configuration::new(MechanicalParams::new(2.0, -3.0, 0.2, -0.15), 5.0, 1.1, 1.4);
        let samples: Vec<Vector3<f64>> = (0..=1000)
            .map(|i| {
                let s = geometry.bend_length_mm * i as f64 / 1000.0;
                backbone_pose(&geometry, &config, s).unwrap().position
            })
            .collect();
        // Plane spanned by the pre-bend tangent and the bending direction.
        let base = samples[0];
        let p_mid = samples[500] - base;
        let p_end = samples[1000] - base;
        let normal = Unit::new_normalize(p_mid.cross(&p_end));
        for p in &samples {
            assert!((p - base).dot(&normal).abs() < 1e-9);
        }
        let polyline: f64 = samples.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
        assert_relative_eq!(polyline, geometry.bend_length_mm, epsilon = 1e-3);
    }

    #[test]
    fn phi_rotates_about_the_channel_axis() {
        let geometry = geometry();
        let mech = MechanicalParams::new(-1.0, 2.0, 0.3, 0.1);
        let delta = 0.83;
        let a = Configuration::new(mech, 4.0, 0.5, 1.0);
        let b = Configuration::new(mech, 4.0, 0.5 + delta, 1.0);
        let base = backbone_pose(&geometry, &a, 0.0).unwrap().position;
        let axis = channel_axis(&mech);
        let rot = Rotation3::from_axis_angle(&axis, delta);
        for s in [4.0, 12.0, 18.5] {
            let pa = backbone_pose(&geometry, &a, s).unwrap().position;
            let pb = backbone_pose(&geometry, &b, s).unwrap().position;
            assert!((pb - (base + rot * (pa - base))).norm() < 1e-9);
        }
        let c = Configuration::new(mech, 4.0, 0.5 + 2.0 * std::f64::consts::PI, 1.0);
        let pa = tcp_position(&geometry, &a);
        let pc = tcp_position(&geometry, &c);
        assert!((pa - pc).norm() < 1e-9);
    }

    #[test]
    fn tcp_extends_the_end_tangent() {
        let geometry = geometry();
        let config = Configuration::new(MechanicalParams::new(0.5, 0.5, -0.1, 0.2), 7.0, 2.0, -1.1);
        let end = backbone_pose(&geometry, &config, geometry.bend_length_mm).unwrap();
        let tcp = tcp_position(&geometry, &config);
        assert!((tcp - (end.position + geometry.tip_offset_mm * end.tangent())).norm() < 1e-12);
        let reference = integrated_pose(&geometry, &config, geometry.bend_length_mm, 20_000);
        let tcp_ref = reference.position + geometry.tip_offset_mm * reference.orientation.column(2);
        assert!((tcp - tcp_ref).norm() < 1e-4);
    }

    #[test]
    fn boundary_sections_are_evenly_spaced_cross_sections() {
        let geometry = geometry();
        let config = Configuration::new(MechanicalParams::default(), 2.0, 0.0, 0.9);
        let sections = marker_boundary_sections(&geometry, &config);
        assert_eq!(sections.len(), geometry.n_markers + 1);
        for (j, section) in sections.iter().enumerate() {
            assert_eq!(section.boundary_index, j);
            assert_relative_eq!(section.radius_mm, geometry.radius_mm());
            let pose = backbone_pose(&geometry, &config, j as f64 * geometry.marker_length_mm)
                .unwrap();
            assert!((section.center - pose.position).norm() < 1e-12);
            assert!((section.normal.into_inner() - pose.tangent().normalize()).norm() < 1e-12);
        }
    }

    #[test]
    fn boundary_chord_never_exceeds_marker_length() {
        let geometry = geometry();
        for i in 0..=40 {
            let theta = -1.5 + 3.0 * i as f64 / 40.0;
            let config = Configuration::new(MechanicalParams::default(), 3.0, 0.7, theta);
            let sections = marker_boundary_sections(&geometry, &config);
            for w in sections.windows(2) {
                let chord = (w[1].center - w[0].center).norm();
                assert!(chord <= geometry.marker_length_mm + 1e-9);
                if theta.abs() < 1e-12 {
                    assert_relative_eq!(chord, geometry.marker_length_mm, epsilon = 1e-9);
                } else {
                    assert!(chord < geometry.marker_length_mm);
                }
            }
        }
    }

    #[test]
    fn marker_colors_alternate_from_the_base() {
        let geometry = geometry();
        assert_eq!(geometry.marker_color_at(0.1), Some(MarkerColor::Blue));
        assert_eq!(geometry.marker_color_at(3.8), Some(MarkerColor::Yellow));
        assert_eq!(geometry.marker_color_at(18.4), Some(MarkerColor::Blue));
        assert_eq!(geometry.marker_color_at(-0.1), None);
        assert_eq!(geometry.marker_color_at(18.6), None);
    }

    #[test]
    fn validation_rejects_bad_inputs() {
        let mut geometry = geometry();
        geometry.marker_length_mm = 4.0;
        assert!(geometry.validate().is_err());
        let geometry = InstrumentGeometry::default();
        assert!(geometry.validate().is_ok());
        assert!(backbone_pose(&geometry, &Configuration::default(), -0.5).is_err());
        assert!(backbone_pose(&geometry, &Configuration::default(), 19.0).is_err());
        let bad = Configuration::new(MechanicalParams::new(0.0, 0.0, 1.6, 0.0), 0.0, 0.0, 0.0);
        assert!(bad.validate(&geometry).is_err());
    }

    #[test]
    fn configuration_round_trips_through_array() {
        let config = Configuration::new(MechanicalParams::new(1.0, 2.0, 0.3, 0.4), 5.0, 6.0, 0.7);
        assert_eq!(Configuration::from_array(config.as_array()), config);
    }
}
