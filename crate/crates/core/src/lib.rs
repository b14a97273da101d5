//! Monocular 3D position estimation for single-section bendable instruments.
//!
//! The library recovers the tool center point of a cable-driven bendable
//! instrument from one camera image. The instrument carries alternating
//! blue/yellow cylindrical markers; the estimator extracts the apparent
//! marker transition corners from the image and fits a constant-curvature
//! kinematic model to them with a penalized Levenberg-Marquardt solver that
//! also adapts the mechanical mounting parameters of the instrument channel.
//!
//! Modules follow the processing order:
//!
//! * [`instrument`]: geometry and forward kinematics of the bendable section
//! * [`camera`]: wide-angle camera model (projection, distortion, Jacobian)
//! * [`projection`]: model-predicted image features and feature Jacobian
//! * [`img`]: minimal raster image type with PPM/PNG I/O and overlay drawing
//! * [`segmentation`]: Lab color models, pixel labeling, connected regions
//! * [`markers`]: graph interpretation of regions into an ordered marker chain
//! * [`bezier`]: robust quadratic Bezier fitting for the instrument borders
//! * [`extraction`]: skeleton-guided border sampling and corner extraction
//! * [`solver`]: penalized adaptive Levenberg-Marquardt pose estimation
//! * [`synth`]: synthetic renderer with ground truth, plus validation studies
//! * [`pipeline`]: configuration, per-frame driver, reports

pub mod bezier;
pub mod camera;
pub mod extraction;
pub mod img;
pub mod instrument;
pub mod markers;
pub mod pipeline;
pub mod projection;
pub mod segmentation;
pub mod solver;
pub mod synth;
