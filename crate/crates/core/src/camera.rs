//! Wide-angle camera model: pinhole intrinsics with radial and tangential
//! lens distortion, inverse distortion by fixed-point iteration, and the
//! analytic Jacobian of the projection.

use nalgebra::{Matrix2x3, Unit, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Pixel = Vector2<f64>;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("point with z = {z} mm is behind the camera")]
    BehindCamera { z: f64 },
    #[error("inverse distortion did not converge at pixel ({u:.1}, {v:.1})")]
    UndistortDiverged { u: f64, v: f64 },
    #[error("invalid camera model: {0}")]
    InvalidModel(String),
    #[error("calibration file: {0}")]
    Calibration(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Intrinsics and distortion of a calibrated camera.
///
/// Distortion follows the usual polynomial model: three radial terms acting
/// on the squared normalized radius and two tangential (decentering) terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub skew: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub p1: f64,
    pub p2: f64,
    pub width: u32,
    pub height: u32,
}

const UNDISTORT_MAX_ITER: usize = 20;
const UNDISTORT_TOL: f64 = 1e-10;

impl CameraModel {
    /// Synthetic PAL-resolution endoscope camera used throughout the tests
    /// and the rendering lab: strong barrel distortion, square pixels.
    pub fn synthetic_pal() -> Self {
        CameraModel {
            fx: 400.0,
            fy: 400.0,
            cx: 384.0,
            cy: 288.0,
            skew: 0.0,
            k1: -0.35,
            k2: 0.12,
            k3: 0.0,
            p1: 0.0,
            p2: 0.0,
            width: 768,
            height: 576,
        }
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(CameraError::InvalidModel(format!(
                "focal lengths must be positive ({}, {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(CameraError::InvalidModel("empty image".into()));
        }
        Ok(())
    }

    /// Applies distortion to normalized image coordinates.
    pub fn distort(&self, x: f64, y: f64) -> (f64, f64) {
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        let xd = x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
        let yd = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
        (xd, yd)
    }

    fn normalized_to_pixel(&self, xd: f64, yd: f64) -> Pixel {
        Pixel::new(self.fx * xd + self.skew * yd + self.cx, self.fy * yd + self.cy)
    }

    fn pixel_to_normalized(&self, px: &Pixel) -> (f64, f64) {
        let yd = (px.y - self.cy) / self.fy;
        let xd = (px.x - self.cx - self.skew * yd) / self.fx;
        (xd, yd)
    }

    /// Projects a camera-frame point (mm) to pixel coordinates.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Pixel, CameraError> {
        if p.z <= 0.0 {
            return Err(CameraError::BehindCamera { z: p.z });
        }
        let (xd, yd) = self.distort(p.x / p.z, p.y / p.z);
        Ok(self.normalized_to_pixel(xd, yd))
    }

    /// Partial derivatives of the distorted normalized coordinates with
    /// respect to the undistorted ones: `(dxd_dx, dxd_dy, dyd_dx, dyd_dy)`.
    fn distortion_jacobian(&self, x: f64, y: f64) -> (f64, f64, f64, f64) {
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        let dr = self.k1 + r2 * (2.0 * self.k2 + 3.0 * r2 * self.k3);
        let dxd_dx = radial + 2.0 * x * x * dr + 2.0 * self.p1 * y + 6.0 * self.p2 * x;
        let dxd_dy = 2.0 * x * y * dr + 2.0 * self.p1 * x + 2.0 * self.p2 * y;
        let dyd_dx = dxd_dy;
        let dyd_dy = radial + 2.0 * y * y * dr + 6.0 * self.p1 * y + 2.0 * self.p2 * x;
        (dxd_dx, dxd_dy, dyd_dx, dyd_dy)
    }

    /// Unit ray through a pixel, undoing distortion by a damped Newton
    /// iteration on the normalized coordinates. A plain fixed-point sweep is
    /// not contractive close to the corners of strongly barrel-distorted
    /// images, so the update uses the distortion Jacobian instead.
    pub fn undistort_ray(&self, px: &Pixel) -> Result<Unit<Vector3<f64>>, CameraError> {
        let (xd, yd) = self.pixel_to_normalized(px);
        let mut x = xd;
        let mut y = yd;
        let mut residual = {
            let (cx, cy) = self.distort(x, y);
            ((cx - xd).powi(2) + (cy - yd).powi(2)).sqrt()
        };
        for _ in 0..UNDISTORT_MAX_ITER {
            if residual < UNDISTORT_TOL {
                break;
            }
            let r2 = x * x + y * y;
            if !r2.is_finite() || r2 > 100.0 {
                return Err(CameraError::UndistortDiverged { u: px.x, v: px.y });
            }
            let (cx, cy) = self.distort(x, y);
            let (a, b, c, d) = self.distortion_jacobian(x, y);
            let det = a * d - b * c;
            if det.abs() < 1e-12 {
                return Err(CameraError::UndistortDiverged { u: px.x, v: px.y });
            }
            let rx = cx - xd;
            let ry = cy - yd;
            let full_dx = -(d * rx - b * ry) / det;
            let full_dy = -(-c * rx + a * ry) / det;
            // Backtracking keeps the iterate inside the monotone domain.
            let mut scale = 1.0;
            loop {
                let nx = x + scale * full_dx;
                let ny = y + scale * full_dy;
                let (tx, ty) = self.distort(nx, ny);
                let new_residual = ((tx - xd).powi(2) + (ty - yd).powi(2)).sqrt();
                if new_residual < residual || scale < 0.1 {
                    x = nx;
                    y = ny;
                    residual = new_residual;
                    break;
                }
                scale *= 0.5;
            }
        }
        if residual > 1e-9 {
            return Err(CameraError::UndistortDiverged { u: px.x, v: px.y });
        }
        Ok(Unit::new_normalize(Vector3::new(x, y, 1.0)))
    }

    /// Analytic 2x3 Jacobian of `project` with respect to the 3D point.
    pub fn projection_jacobian(&self, p: &Vector3<f64>) -> Result<Matrix2x3<f64>, CameraError> {
        if p.z <= 0.0 {
            return Err(CameraError::BehindCamera { z: p.z });
        }
        let inv_z = 1.0 / p.z;
        let x = p.x * inv_z;
        let y = p.y * inv_z;
        let (dxd_dx, dxd_dy, dyd_dx, dyd_dy) = self.distortion_jacobian(x, y);

        // Normalized coordinates vs. the 3D point.
        let dx = Vector3::new(inv_z, 0.0, -x * inv_z);
        let dy = Vector3::new(0.0, inv_z, -y * inv_z);

        let row_xd = dxd_dx * dx + dxd_dy * dy;
        let row_yd = dyd_dx * dx + dyd_dy * dy;
        let row_u = self.fx * row_xd + self.skew * row_yd;
        let row_v = self.fy * row_yd;
        Ok(Matrix2x3::from_rows(&[row_u.transpose(), row_v.transpose()]))
    }

    /// True when the pixel lies inside the image bounds.
    pub fn contains(&self, px: &Pixel) -> bool {
        px.x >= 0.0
            && px.y >= 0.0
            && px.x <= (self.width - 1) as f64
            && px.y <= (self.height - 1) as f64
    }

    /// Parses a plain-text calibration: one `key value` pair per line,
    /// `#` comments. Unlisted distortion terms and skew default to zero.
    pub fn parse_calibration(text: &str) -> Result<Self, CameraError> {
        let mut model = CameraModel {
            fx: f64::NAN,
            fy: f64::NAN,
            cx: f64::NAN,
            cy: f64::NAN,
            skew: 0.0,
            k1: 0.0,
            k2: 0.0,
            k3: 0.0,
            p1: 0.0,
            p2: 0.0,
            width: 0,
            height: 0,
        };
        for (number, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap();
            let value: f64 = parts
                .next()
                .ok_or_else(|| CameraError::Calibration(format!("line {}: missing value", number + 1)))?
                .parse()
                .map_err(|_| CameraError::Calibration(format!("line {}: bad number", number + 1)))?;
            match key {
                "fx" => model.fx = value,
                "fy" => model.fy = value,
                "cx" => model.cx = value,
                "cy" => model.cy = value,
                "skew" => model.skew = value,
                "k1" => model.k1 = value,
                "k2" => model.k2 = value,
                "k3" => model.k3 = value,
                "p1" => model.p1 = value,
                "p2" => model.p2 = value,
                "width" => model.width = value as u32,
                "height" => model.height = value as u32,
                other => {
                    return Err(CameraError::Calibration(format!(
                        "line {}: unknown key '{other}'",
                        number + 1
                    )))
                }
            }
        }
        for (name, value) in [("fx", model.fx), ("fy", model.fy), ("cx", model.cx), ("cy", model.cy)]
        {
            if value.is_nan() {
                return Err(CameraError::Calibration(format!("missing required key '{name}'")));
            }
        }
        if model.width == 0 || model.height == 0 {
            return Err(CameraError::Calibration("missing width/height".into()));
        }
        model.validate()?;
        Ok(model)
    }

    pub fn from_calibration_file(path: &std::path::Path) -> Result<Self, CameraError> {
        Self::parse_calibration(&std::fs::read_to_string(path)?)
    }

    pub fn to_calibration_string(&self) -> String {
        format!(
            "# camera calibration\n\
             width {}\nheight {}\n\
             fx {}\nfy {}\ncx {}\ncy {}\nskew {}\n\
             k1 {}\nk2 {}\nk3 {}\np1 {}\np2 {}\n",
            self.width,
            self.height,
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.skew,
            self.k1,
            self.k2,
            self.k3,
            self.p1,
            self.p2
        )
    }
}
