//! Quadratic Bezier curves and a robust IRLS fit for the instrument border.
//!
//! The fit alternates three ingredients: a joint Gauss-Newton refinement of
//! the control points and the per-point curve parameters, Tukey biweight
//! reweighting against a MAD-based scale, and an exact reparameterization
//! that pins the data span to [0, 1]. Scale and parameters are frozen after
//! a few bootstrap rounds so the remaining reweighting is a plain
//! majorize-minimize descent; a final polish with frozen weights drives
//! exact data to machine precision.

use nalgebra::{Matrix3, Matrix6, Vector2, Vector3, Vector6};
use thiserror::Error;

use crate::camera::Pixel;

#[derive(Debug, Error)]
pub enum BezierError {
    #[error("need at least {min} points for a robust fit, got {got}")]
    TooFewPoints { got: usize, min: usize },
    #[error("non-finite input point at index {0}")]
    NonFinitePoint(usize),
}

/// Quadratic Bezier curve `B(t) = (1-t)^2 p0 + 2t(1-t) p1 + t^2 p2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadBezier {
    pub p0: Pixel,
    pub p1: Pixel,
    pub p2: Pixel,
}

impl QuadBezier {
    pub fn new(p0: Pixel, p1: Pixel, p2: Pixel) -> Self {
        QuadBezier { p0, p1, p2 }
    }

    pub fn eval(&self, t: f64) -> Pixel {
        let u = 1.0 - t;
        u * u * self.p0 + 2.0 * t * u * self.p1 + t * t * self.p2
    }

    pub fn derivative(&self, t: f64) -> Vector2<f64> {
        2.0 * (1.0 - t) * (self.p1 - self.p0) + 2.0 * t * (self.p2 - self.p1)
    }

    pub fn second_derivative(&self) -> Vector2<f64> {
        2.0 * (self.p2 - 2.0 * self.p1 + self.p0)
    }

    /// Signed curvature at `t`; zero for degenerate tangents.
    pub fn curvature(&self, t: f64) -> f64 {
        let d = self.derivative(t);
        let dd = self.second_derivative();
        let speed = d.norm();
        if speed < 1e-12 {
            return 0.0;
        }
        (d.x * dd.y - d.y * dd.x) / (speed * speed * speed)
    }

    /// Curve parameter of the point closest to `p`, restricted to [0, 1].
    /// Coarse sampling followed by Newton refinement on the squared
    /// distance; exact to machine precision away from degeneracies.
    pub fn nearest_t(&self, p: &Pixel) -> f64 {
        self.nearest_t_in(p, 0.0, 1.0)
    }

    /// [`QuadBezier::nearest_t`] over an arbitrary parameter interval; the
    /// curve extrapolates naturally outside [0, 1].
    pub fn nearest_t_in(&self, p: &Pixel, lo: f64, hi: f64) -> f64 {
        let mut best_t = lo;
        let mut best_d = f64::INFINITY;
        const COARSE: usize = 32;
        for i in 0..=COARSE {
            let t = lo + (hi - lo) * i as f64 / COARSE as f64;
            let d = (self.eval(t) - p).norm_squared();
            if d < best_d {
                best_d = d;
                best_t = t;
            }
        }
        let mut t = best_t;
        for _ in 0..8 {
            let e = self.eval(t) - p;
            let d1 = self.derivative(t);
            let d2 = self.second_derivative();
            let g = e.dot(&d1);
            let h = d1.norm_squared() + e.dot(&d2);
            if h.abs() < 1e-14 {
                break;
            }
            let step = g / h;
            t = (t - step).clamp(lo, hi);
            if step.abs() < 1e-14 {
                break;
            }
        }
        t
    }

    /// Local foot-point refinement from a warm start: unclamped Newton on
    /// the squared distance, staying in the basin of `t0`. Used to extend
    /// feet past the segment ends without jumping to a far branch of the
    /// parabola.
    fn local_foot(&self, p: &Pixel, t0: f64) -> f64 {
        let mut t = t0;
        for _ in 0..12 {
            let e = self.eval(t) - p;
            let d1 = self.derivative(t);
            let g = e.dot(&d1);
            let h = d1.norm_squared() + e.dot(&self.second_derivative());
            if h.abs() < 1e-14 {
                break;
            }
            let step = g / h;
            t -= step;
            if step.abs() < 1e-14 {
                break;
            }
        }
        t
    }

    /// Total turning angle between the start and end tangents, radians.
    pub fn turn_angle(&self) -> f64 {
        let a = self.derivative(0.0);
        let b = self.derivative(1.0);
        if a.norm() < 1e-12 || b.norm() < 1e-12 {
            return 0.0;
        }
        let cross = a.x * b.y - a.y * b.x;
        cross.atan2(a.dot(&b))
    }
}

/// Options for [`fit_bezier_irls`].
#[derive(Debug, Clone)]
pub struct IrlsOptions {
    /// Tukey cutoff in units of the robust scale.
    pub cutoff: f64,
    /// Iterations during which the scale and the curve parameters update.
    pub bootstrap_iters: usize,
    /// Reweighting iterations after the freeze.
    pub max_iters: usize,
    /// Stop when the largest weight change falls below this.
    pub weight_tol: f64,
    /// Fixed-weight polish iterations after weight convergence.
    pub polish_iters: usize,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        IrlsOptions {
            cutoff: 1.5,
            bootstrap_iters: 4,
            max_iters: 20,
            weight_tol: 1e-6,
            polish_iters: 30,
        }
    }
}

/// Result of the robust fit.
#[derive(Debug, Clone)]
pub struct BezierFit {
    pub curve: QuadBezier,
    /// Final Tukey weight per input point, in input order.
    pub weights: Vec<f64>,
    /// Final curve parameter per input point.
    pub t: Vec<f64>,
    /// Frozen robust scale.
    pub scale: f64,
    pub iterations: usize,
    /// True when the points were collinear and a line segment was fitted.
    pub degenerate_line: bool,
    /// Robust cost after each post-freeze iteration.
    pub cost_trace: Vec<f64>,
}

const MIN_POINTS: usize = 6;
const SCALE_FLOOR: f64 = 1e-8;

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Robust scale from the pooled coordinate residuals: a consistency-scaled
/// upper quantile of the absolute values. The 0.6 quantile keeps a 0.4
/// breakdown point against displaced points, yet stays anchored to the
/// whole track when a hard reweighting round has left one part fitted much
/// tighter than the rest; the plain median locks onto the tight half and
/// starves the other. 1.1882 = 1 / probit(0.8) makes the estimate
/// consistent for Gaussian noise.
fn robust_scale(residuals: &[f64]) -> f64 {
    let mut abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let pos = 0.6 * (abs.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    let q = if i + 1 < abs.len() { abs[i] * (1.0 - frac) + abs[i + 1] * frac } else { abs[i] };
    (1.1882 * q).max(SCALE_FLOOR)
}

// Abramowitz-Stegun 7.1.26, |error| < 1.5e-7.
fn erf(x: f64) -> f64 {
    let s = x.signum();
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly =
        ((((1.061405429 * t - 1.453152027) * t + 1.421413741) * t - 0.284496736) * t + 0.254829592)
            * t;
    s * (1.0 - poly * (-x * x).exp())
}

/// Gaussian sigma recovered from the RMS of residuals truncated at
/// `+-cutoff`, by fixed-point inversion of the truncated second moment.
fn truncated_sigma(rms: f64, cutoff: f64) -> f64 {
    if rms < SCALE_FLOOR {
        return rms;
    }
    let mut sigma = rms;
    for _ in 0..8 {
        let a = cutoff / sigma;
        let phi = (-0.5 * a * a).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mass = erf(a / std::f64::consts::SQRT_2);
        if mass < 1e-6 {
            break;
        }
        // E[q^2 | |q| < a sigma] / sigma^2; capped so a cutoff deep inside
        // the noise cannot blow the correction up.
        let factor = (1.0 - 2.0 * a * phi / mass).max(0.05);
        sigma = rms / factor.sqrt();
    }
    sigma
}

fn tukey_weight(q: f64, cutoff_scale: f64) -> f64 {
    let u = q / cutoff_scale;
    if u.abs() >= 1.0 {
        0.0
    } else {
        let v = 1.0 - u * u;
        v * v
    }
}

/// Tukey biweight rho, capped at the cutoff.
fn tukey_rho(q: f64, cutoff_scale: f64) -> f64 {
    let cap = cutoff_scale * cutoff_scale / 6.0;
    let u = q / cutoff_scale;
    if u.abs() >= 1.0 {
        cap
    } else {
        let v = 1.0 - u * u;
        cap * (1.0 - v * v * v)
    }
}

/// Median-filtered copy of the ordered points (window 5, shortened at the
/// ends). Isolated displaced points and pairs vanish, so the chord
/// parameterization and the initial fit see the underlying track instead
/// of a polyline with outlier detours.
fn median_filtered(points: &[Pixel]) -> Vec<Pixel> {
    let n = points.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(2);
        let hi = (i + 2).min(n - 1);
        let mut xs: Vec<f64> = points[lo..=hi].iter().map(|p| p.x).collect();
        let mut ys: Vec<f64> = points[lo..=hi].iter().map(|p| p.y).collect();
        out.push(Pixel::new(median(&mut xs), median(&mut ys)));
    }
    out
}

/// Median per-index parameter increment over the weighted points in
/// `[first, last]`, with a uniform-spacing fallback when fewer than two
/// points carry weight.
fn median_weighted_step(t: &[f64], w: &[f64], first: usize, last: usize) -> f64 {
    let mut increments = Vec::new();
    let mut prev: Option<(usize, f64)> = None;
    for i in first..=last {
        if w[i] > 0.0 {
            if let Some((j, tj)) = prev {
                increments.push((t[i] - tj) / (i - j) as f64);
            }
            prev = Some((i, t[i]));
        }
    }
    if increments.is_empty() {
        1.0 / (t.len() as f64 - 1.0)
    } else {
        median(&mut increments)
    }
}

fn chord_parameters(points: &[Pixel]) -> Vec<f64> {
    let mut t = Vec::with_capacity(points.len());
    let mut total = 0.0;
    t.push(0.0);
    for pair in points.windows(2) {
        total += (pair[1] - pair[0]).norm();
        t.push(total);
    }
    if total < 1e-12 {
        return (0..points.len()).map(|i| i as f64 / (points.len() - 1) as f64).collect();
    }
    t.iter().map(|v| v / total).collect()
}

/// Weighted least-squares quadratic through `(t_i, p_i)`; `None` when the
/// normal matrix is rank deficient (collinear or clustered parameters).
fn solve_quadratic(points: &[Pixel], t: &[f64], w: &[f64]) -> Option<QuadBezier> {
    let mut m = Matrix3::zeros();
    let mut bx = Vector3::zeros();
    let mut by = Vector3::zeros();
    let mut total = 0.0;
    for i in 0..points.len() {
        if w[i] == 0.0 {
            continue;
        }
        total += w[i];
        let u = 1.0 - t[i];
        let basis = Vector3::new(u * u, 2.0 * t[i] * u, t[i] * t[i]);
        m += w[i] * basis * basis.transpose();
        bx += w[i] * basis * points[i].x;
        by += w[i] * basis * points[i].y;
    }
    if total < 1e-9 {
        return None;
    }
    // Scale-aware rank check on the normal matrix.
    let det = m.determinant();
    if det.abs() < 1e-10 * (m.trace() / 3.0).powi(3).max(1e-30) {
        return None;
    }
    let inv = m.try_inverse()?;
    let cx = inv * bx;
    let cy = inv * by;
    Some(QuadBezier::new(
        Pixel::new(cx[0], cy[0]),
        Pixel::new(cx[1], cy[1]),
        Pixel::new(cx[2], cy[2]),
    ))
}

/// Weighted line fallback for collinear data: principal direction through
/// the weighted mean, endpoints at the extreme projections.
fn solve_line(points: &[Pixel], w: &[f64]) -> QuadBezier {
    let total: f64 = w.iter().sum();
    let weights: Vec<f64> = if total < 1e-9 { vec![1.0; points.len()] } else { w.to_vec() };
    let total: f64 = weights.iter().sum();
    let mut mean = Pixel::zeros();
    for (p, wi) in points.iter().zip(&weights) {
        mean += *wi * p;
    }
    mean /= total;
    let mut xx = 0.0;
    let mut xy = 0.0;
    let mut yy = 0.0;
    for (p, wi) in points.iter().zip(&weights) {
        let d = p - mean;
        xx += wi * d.x * d.x;
        xy += wi * d.x * d.y;
        yy += wi * d.y * d.y;
    }
    let angle = 0.5 * (2.0 * xy).atan2(xx - yy);
    let dir = Vector2::new(angle.cos(), angle.sin());
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in points {
        let s = (p - mean).dot(&dir);
        lo = lo.min(s);
        hi = hi.max(s);
    }
    let p0 = mean + lo * dir;
    let p2 = mean + hi * dir;
    QuadBezier::new(p0, 0.5 * (p0 + p2), p2)
}

fn residuals(curve: &QuadBezier, points: &[Pixel], t: &[f64]) -> Vec<Vector2<f64>> {
    points
        .iter()
        .zip(t)
        .map(|(p, &ti)| curve.eval(ti) - p)
        .collect()
}

fn rho_cost(res: &[Vector2<f64>], cutoff_scale: f64) -> f64 {
    res.iter()
        .map(|r| tukey_rho(r.x, cutoff_scale) + tukey_rho(r.y, cutoff_scale))
        .sum()
}

/// Exact affine reparameterization so the parameter span of the weighted
/// points maps to [0, 1]. The curve geometry and every residual are
/// unchanged; this only fixes the gauge freedom of the fit and keeps
/// rejected points from defining the reported segment.
fn normalize_gauge(curve: &mut QuadBezier, t: &mut [f64], w: &[f64]) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (ti, wi) in t.iter().zip(w) {
        if *wi > 0.0 {
            lo = lo.min(*ti);
            hi = hi.max(*ti);
        }
    }
    reparam(curve, t, lo, hi);
}

/// Affine reparameterization carrying `[lo, hi]` to `[0, 1]`: the same
/// polynomial over a renamed parameter, so every residual is untouched.
fn reparam(curve: &mut QuadBezier, t: &mut [f64], lo: f64, hi: f64) {
    if !(hi - lo > 1e-9) {
        return;
    }
    // Power basis B(t) = c0 + c1 t + c2 t^2, substituted t -> lo + span u.
    let c0 = curve.p0;
    let c1 = 2.0 * (curve.p1 - curve.p0);
    let c2 = curve.p0 - 2.0 * curve.p1 + curve.p2;
    let span = hi - lo;
    let d0 = c0 + lo * c1 + lo * lo * c2;
    let d1 = span * (c1 + 2.0 * lo * c2);
    let d2 = span * span * c2;
    curve.p0 = d0;
    curve.p1 = d0 + 0.5 * d1;
    curve.p2 = d0 + d1 + d2;
    for ti in t.iter_mut() {
        *ti = (*ti - lo) / span;
    }
}

/// Weighted orthogonal-distance refinement of the control points. Each
/// point's parameter is eliminated exactly by foot-point projection onto
/// the current curve, and a damped Gauss-Newton step updates the six
/// control coordinates. Interior feet contribute their normal-distance
/// residual (the tangential component is free there); feet clamped at the
/// segment ends keep the full residual, which is what pulls the curve out
/// to cover the data span. Weights stay fixed. Returns the final weighted
/// squared cost, with `t` holding the final feet.
fn refine_orthogonal(
    points: &[Pixel],
    w: &[f64],
    t: &mut [f64],
    curve: &mut QuadBezier,
    max_iters: usize,
) -> f64 {
    let n = points.len();
    let project = |c: &QuadBezier, t: &mut [f64]| {
        for (ti, p) in t.iter_mut().zip(points) {
            *ti = c.nearest_t(p);
        }
    };
    let sq_cost = |c: &QuadBezier, t: &[f64]| -> f64 {
        points
            .iter()
            .zip(t)
            .zip(w)
            .map(|((p, &ti), &wi)| wi * (c.eval(ti) - p).norm_squared())
            .sum()
    };
    project(curve, t);
    let mut cost = sq_cost(curve, t);
    if w.iter().sum::<f64>() < 1e-9 {
        return cost;
    }
    let mut damping = 1e-6;
    for _ in 0..max_iters {
        let mut a = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for i in 0..n {
            let wi = w[i];
            if wi == 0.0 {
                continue;
            }
            let ti = t[i];
            let u = 1.0 - ti;
            let b = Vector3::new(u * u, 2.0 * ti * u, ti * ti);
            let r = curve.eval(ti) - points[i];
            let d = curve.derivative(ti);
            let interior = ti > 1e-9 && ti < 1.0 - 1e-9 && d.norm_squared() > 1e-18;
            let mut rows: Vec<(Vector6<f64>, f64)> = Vec::with_capacity(2);
            if interior {
                // Single row along the unit normal at the foot.
                let nrm = Vector2::new(-d.y, d.x).normalize();
                let mut j = Vector6::zeros();
                j.fixed_view_mut::<3, 1>(0, 0).copy_from(&(nrm.x * b));
                j.fixed_view_mut::<3, 1>(3, 0).copy_from(&(nrm.y * b));
                rows.push((j, nrm.dot(&r)));
            } else {
                let mut jx = Vector6::zeros();
                jx.fixed_view_mut::<3, 1>(0, 0).copy_from(&b);
                rows.push((jx, r.x));
                let mut jy = Vector6::zeros();
                jy.fixed_view_mut::<3, 1>(3, 0).copy_from(&b);
                rows.push((jy, r.y));
            }
            for (j, res) in rows {
                a += wi * j * j.transpose();
                g += wi * j * res;
            }
        }
        let lhs = a + Matrix6::identity() * damping;
        let Some(dc) = lhs.lu().solve(&(-g)) else {
            break;
        };
        let trial_curve = QuadBezier::new(
            curve.p0 + Pixel::new(dc[0], dc[3]),
            curve.p1 + Pixel::new(dc[1], dc[4]),
            curve.p2 + Pixel::new(dc[2], dc[5]),
        );
        let mut trial_t = t.to_vec();
        project(&trial_curve, &mut trial_t);
        let trial_cost = sq_cost(&trial_curve, &trial_t);
        if trial_cost < cost {
            let improvement = cost - trial_cost;
            *curve = trial_curve;
            t.copy_from_slice(&trial_t);
            cost = trial_cost;
            damping = (damping * 0.3).max(1e-12);
            if improvement < 1e-18 * (1.0 + cost) {
                break;
            }
        } else {
            damping *= 10.0;
            if damping > 1e8 {
                break;
            }
        }
    }
    cost
}

/// Robust quadratic Bezier fit with Tukey biweight IRLS.
///
/// Residuals are measured per coordinate at the point's curve parameter;
/// a point's weight is the smaller of its two coordinate weights. During
/// the bootstrap iterations the robust scale re-estimates from the pooled
/// residuals and the parameters re-project onto the current curve; both are
/// frozen afterwards so the reweighting descends a fixed robust cost.
pub fn fit_bezier_irls(points: &[Pixel], options: &IrlsOptions) -> Result<BezierFit, BezierError> {
    if points.len() < MIN_POINTS {
        return Err(BezierError::TooFewPoints { got: points.len(), min: MIN_POINTS });
    }
    for (i, p) in points.iter().enumerate() {
        if !(p.x.is_finite() && p.y.is_finite()) {
            return Err(BezierError::NonFinitePoint(i));
        }
    }
    let n = points.len();
    // Chord-length parameters come from the median-filtered track; the raw
    // polyline length through displaced points would shift every
    // downstream parameter by the outlier detours.
    let filtered = median_filtered(points);
    let t_chord = chord_parameters(&filtered);
    let mut t = t_chord.clone();
    let mut w = vec![1.0; n];
    let mut scale = f64::INFINITY;
    let mut rank_fallback = false;
    let mut cost_trace = Vec::new();
    let mut curve = solve_line(points, &w);
    let mut iterations = 0;

    // Bootstrap: round zero fits the filtered track at its chord
    // parameters, an initial geometry that no isolated displaced point or
    // pair can bend. The later rounds refine orthogonally on the real
    // points under the current weights. Scale and weights re-derive each
    // round from foot-point residuals, which measure geometric misfit free
    // of parameterization bias.
    for iter in 0..options.bootstrap_iters {
        iterations = iter + 1;
        if iter == 0 {
            curve = match solve_quadratic(&filtered, &t_chord, &w) {
                Some(c) => c,
                None => {
                    rank_fallback = true;
                    solve_line(&filtered, &w)
                }
            };
            for (ti, p) in t.iter_mut().zip(points) {
                *ti = curve.nearest_t(p);
            }
        } else {
            refine_orthogonal(points, &w, &mut t, &mut curve, 60);
        }
        let res = residuals(&curve, points, &t);
        let pooled: Vec<f64> = res.iter().flat_map(|r| [r.x, r.y]).collect();
        scale = robust_scale(&pooled);
        let cutoff_scale = options.cutoff * scale;
        for i in 0..n {
            w[i] =
                tukey_weight(res[i].x, cutoff_scale).min(tukey_weight(res[i].y, cutoff_scale));
        }
    }

    // Geometric refinement on the surviving points: orthogonal distance
    // with the parameters eliminated by foot projection. This removes the
    // chord-length interpolation bias, so model-class data converges to
    // machine precision.
    refine_orthogonal(points, &w, &mut t, &mut curve, 60);
    normalize_gauge(&mut curve, &mut t, &w);

    // Rejoin pass: points rejected for chord-length bias may sit on the
    // natural continuation of the fitted segment. Feet past the surviving
    // span extrapolate at the span's median per-index increment, so a
    // rejected neighbor cannot poison the warm start, and the local
    // refinement then follows the continuation; a genuinely displaced
    // point keeps its large residual wherever its foot lands.
    if let Some(first) = w.iter().position(|&wi| wi > 0.0) {
        let last = n - 1 - w.iter().rev().position(|&wi| wi > 0.0).unwrap();
        let step = median_weighted_step(&t, &w, first, last);
        for i in last + 1..n {
            t[i] = curve.local_foot(&points[i], t[last] + step * (i - last) as f64);
        }
        for i in (0..first).rev() {
            t[i] = curve.local_foot(&points[i], t[first] - step * (first - i) as f64);
        }
        for i in first + 1..last {
            if w[i] == 0.0 {
                t[i] = curve.local_foot(&points[i], 0.5 * (t[i - 1] + t[i + 1]));
            }
        }
    }

    // Reweighting at the frozen feet and scale. The shared min-weight
    // coupling is only an approximate majorizer, so guard the descent: a
    // step that raises the robust cost is rolled back and reweighting
    // stops.
    let mut previous_curve = curve;
    let mut frozen_cost = f64::INFINITY;
    for _ in 0..options.max_iters {
        iterations += 1;
        let res = residuals(&curve, points, &t);
        let cutoff_scale = options.cutoff * scale;
        let cost = rho_cost(&res, cutoff_scale);
        if cost > frozen_cost {
            curve = previous_curve;
            break;
        }
        frozen_cost = cost;
        cost_trace.push(cost);
        previous_curve = curve;
        let mut max_change = 0.0_f64;
        for i in 0..n {
            let wi = tukey_weight(res[i].x, cutoff_scale).min(tukey_weight(res[i].y, cutoff_scale));
            max_change = max_change.max((wi - w[i]).abs());
            w[i] = wi;
        }
        if max_change < options.weight_tol {
            break;
        }
        curve = match solve_quadratic(points, &t, &w) {
            Some(c) => {
                rank_fallback = false;
                c
            }
            None => {
                rank_fallback = true;
                solve_line(points, &w)
            }
        };
    }

    // Re-span the segment over the current inliers (rejoined points may
    // lie beyond the old ends), then polish with frozen weights. The
    // refinement descends the weighted squared error, which can differ
    // from the robust cost near the cutoff, so a step that raises the
    // robust cost is rolled back.
    normalize_gauge(&mut curve, &mut t, &w);
    let cutoff_scale = options.cutoff * scale;
    let saved_curve = curve;
    let saved_t = t.clone();
    refine_orthogonal(points, &w, &mut t, &mut curve, options.polish_iters);
    normalize_gauge(&mut curve, &mut t, &w);
    let polished = rho_cost(&residuals(&curve, points, &t), cutoff_scale);
    if polished > frozen_cost {
        curve = saved_curve;
        t = saved_t;
    }

    // Gates for island eviction and span extension below. The loose gate
    // is the outer limit of plausibility for a point claimed by the
    // track's continuation: a few point spacings of accumulated error,
    // still clearly inside the displacement this fit is meant to reject.
    let spacing = {
        let mut gaps: Vec<f64> =
            filtered.windows(2).map(|pair| (pair[1] - pair[0]).norm()).collect();
        median(&mut gaps)
    };
    let strict_gate = (12.0 * cutoff_scale).max(6.0);
    let loose_gate = (2.5 * spacing).max(12.0);

    // Island review: a same-side cluster of displaced points corrupts even
    // the filtered track around it, and the fit can anchor on the cluster
    // from round zero, rejecting the real points next to it or spending a
    // large stretch of unsupported parameter on a hook out to the cluster.
    // The signature is weighted groups cut off from the main weighted
    // body, by several zero-weight points in a row or by a foot gap far
    // beyond the point spacing. When that happens, a refit on the main
    // body alone competes against the current curve, and the fit settles
    // on whichever serves the array better; the extension pass below then
    // readmits whatever the surviving geometry accepts.
    {
        let mut groups: Vec<(usize, usize)> = Vec::new();
        let mut prev: Option<usize> = None;
        let foot_gap = {
            let first = w.iter().position(|&wi| wi > 0.0);
            match first {
                Some(f) => {
                    let l = n - 1 - w.iter().rev().position(|&wi| wi > 0.0).unwrap();
                    (6.0 * median_weighted_step(&t, &w, f, l).abs()).max(1e-6)
                }
                None => f64::INFINITY,
            }
        };
        for i in 0..n {
            if w[i] > 0.0 {
                match (prev, groups.last_mut()) {
                    (Some(p), Some(g)) if i - p < 4 && (t[i] - t[p]).abs() < foot_gap => g.1 = i,
                    _ => groups.push((i, i)),
                }
                prev = Some(i);
            }
        }
        if std::env::var_os("BEZDBG").is_some() {
            eprintln!("islands: foot_gap {foot_gap:.4} groups {groups:?}");
            eprintln!("  w[0..10] {:?}", &w[..10.min(n)]);
            eprintln!("  t[0..10] {:?}", &t[..10.min(n)].iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>());
        }
        if groups.len() > 1 {
            // Two hypotheses explain a fragmented weight pattern: the
            // minor groups are split-off stretches of the real track, or
            // they are junk an early contortion latched onto. Give each
            // hypothesis its converged best case: settle the current
            // curve as it stands, and settle a rival refit on the main
            // group alone, whose clean extension can recruit whatever the
            // contortion was holding away from it.
            let settle =
                |curve: &mut QuadBezier, t: &mut [f64], w: &mut [f64]| {
                    for _ in 0..2 {
                        for (ti, p) in t.iter_mut().zip(points) {
                            *ti = curve.nearest_t(p);
                        }
                        let res = residuals(curve, points, t);
                        for i in 0..n {
                            w[i] = tukey_weight(res[i].x, cutoff_scale)
                                .min(tukey_weight(res[i].y, cutoff_scale));
                        }
                        refine_orthogonal(points, w, t, curve, 30);
                    }
                };
            let mut ca = curve;
            let mut ta = t.clone();
            let mut wa = w.clone();
            settle(&mut ca, &mut ta, &mut wa);
            let main = groups
                .iter()
                .map(|g| w[g.0..=g.1].iter().filter(|&&wi| wi > 0.0).count())
                .enumerate()
                .max_by_key(|&(_, c)| c)
                .map(|(i, _)| i)
                .unwrap();
            let mut cb = curve;
            let mut tb = t.clone();
            let mut wb = vec![0.0; n];
            wb[groups[main].0..=groups[main].1]
                .copy_from_slice(&w[groups[main].0..=groups[main].1]);
            refine_orthogonal(points, &wb, &mut tb, &mut cb, 30);
            for _ in 0..2 {
                for i in 0..n {
                    if wb[i] > 0.0 {
                        tb[i] = cb.nearest_t(&points[i]);
                    }
                }
                refine_orthogonal(points, &wb, &mut tb, &mut cb, 30);
            }
            settle(&mut cb, &mut tb, &mut wb);
            // Score each settled fit by how much of the array it serves
            // as a forward march: weighted points counted along the
            // longest index run with advancing feet. A contortion that
            // grazes bystanders holds them at crammed, disordered
            // parameters and earns nothing from them here, while a curve
            // lying along the track is paid for every point on it.
            let march = |t: &[f64], w: &[f64]| -> usize {
                let mut tails: Vec<f64> = Vec::new();
                for i in 0..n {
                    if w[i] > 0.0 {
                        let pos = tails.partition_point(|&x| x < t[i]);
                        if pos == tails.len() {
                            tails.push(t[i]);
                        } else {
                            tails[pos] = t[i];
                        }
                    }
                }
                tails.len()
            };
            let sa = march(&ta, &wa);
            let sb = march(&tb, &wb);
            if std::env::var_os("BEZDBG").is_some() {
                eprintln!("  march: current {sa} main-only {sb}");
            }
            if sb >= sa {
                curve = cb;
                t = tb;
                w = wb;
            } else {
                curve = ca;
                t = ta;
                w = wa;
            }
            normalize_gauge(&mut curve, &mut t, &w);
            if std::env::var_os("BEZDBG").is_some() {
                let lo = n.saturating_sub(20);
                let res = residuals(&curve, points, &t);
                eprintln!(
                    "  settled w[{lo}..] {:?}",
                    w[lo..].iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>()
                );
                eprintln!(
                    "  settled t[{lo}..] {:?}",
                    t[lo..].iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>()
                );
                eprintln!(
                    "  settled r[{lo}..] {:?}",
                    res[lo..].iter().map(|r| (r.norm() * 1e2).round() / 1e2).collect::<Vec<_>>()
                );
            }
        }
    }

    // Span extension: an outlier-dense tail can leave clean points beyond
    // what the extension forecast reaches, with residuals a few times the
    // cutoff from accumulated end bias. Each zero-weight point past the
    // surviving span is admitted provisionally and kept only if the refit
    // still holds it within the cutoff. The refit alone cannot be the
    // judge at the far end, where nothing anchors the extension and it can
    // bend to pass through a lone displaced point exactly, so a lone
    // candidate must first lie near the natural continuation of the
    // current curve: end bias stays within a few cutoffs of it, a
    // displaced point does not. When sparse end support lets the end
    // direction swing, the miss at a genuine continuation point grows
    // past any bound a lone point could be trusted at. Such points are
    // recovered in pairs instead: both are admitted together and the
    // joint refit must hold both through the flow checks in the admission
    // below, which two displaced points cannot pass without folding the
    // curve.
    if let Some(first) = w.iter().position(|&wi| wi > 0.0) {
        let last = n - 1 - w.iter().rev().position(|&wi| wi > 0.0).unwrap();
        if std::env::var_os("BEZDBG").is_some() {
            eprintln!(
                "zipper: first {first} last {last} gates {strict_gate:.2}/{loose_gate:.2} cutoff {cutoff_scale:.3}"
            );
        }
        // Miss of a candidate against the forecast extension. The foot is
        // confined to the forecast neighborhood, widened with the
        // extrapolated distance: far from the span the quadratic
        // extension curls, and an unclamped projection onto it can pass
        // close to a genuinely displaced point.
        let miss = |cand: usize, forecast: f64, gap: usize, step: f64, curve: &QuadBezier| -> f64 {
            let slack = step.abs() * (1.0 + 0.5 * gap as f64);
            let tf = curve
                .local_foot(&points[cand], forecast)
                .clamp(forecast - slack, forecast + slack);
            (curve.eval(tf) - points[cand]).norm()
        };
        // Provisional admission: restate the gauge over the span extended
        // to the candidates' forecasts, so each enters with a distinct
        // seed foot on unchanged geometry, then refit. Every candidate
        // must survive the working cutoff, and every link of the chain
        // from the old edge through the candidates must carry consistent
        // flow: the curve's own arc estimate across the link has to match
        // the pixel distance between the served positions, in forecast
        // order. That closes the one escape the residual check alone
        // leaves open: the parabola's vertex can curl around a displaced
        // cluster and graze each member, but it serves them crammed at
        // nearly one parameter, a near-zero-flow link no genuine forward
        // march produces.
        let hold = |anchor: usize,
                    cands: &[(usize, f64)],
                    curve: &mut QuadBezier,
                    t: &mut Vec<f64>,
                    w: &mut Vec<f64>|
         -> bool {
            let saved = (*curve, t.clone(), w.clone());
            let lo = cands.iter().fold(0.0f64, |m, &(_, f)| m.min(f));
            let hi = cands.iter().fold(1.0f64, |m, &(_, f)| m.max(f));
            reparam(curve, t, lo, hi);
            let span = hi - lo;
            for &(c, f) in cands {
                t[c] = (f - lo) / span;
                w[c] = 1.0;
            }
            refine_orthogonal(points, w, t, curve, 30);
            let mut feet: Vec<(usize, f64)> = Vec::with_capacity(cands.len());
            let mut prev = (t[anchor], (saved.1[anchor] - lo) / span);
            let mut ok = true;
            for &(c, f) in cands {
                let foot = curve.nearest_t(&points[c]);
                let r = curve.eval(foot) - points[c];
                let wi = tukey_weight(r.x, cutoff_scale).min(tukey_weight(r.y, cutoff_scale));
                let seed = (f - lo) / span;
                let dt = foot - prev.0;
                let chord = (curve.eval(foot) - curve.eval(prev.0)).norm();
                let flow = curve.derivative(0.5 * (foot + prev.0)).norm() * dt.abs()
                    / chord.max(1e-9);
                ok &= wi > 0.0
                    && dt * (seed - prev.1) > 0.0
                    && (1.0 / 3.0..=3.0).contains(&flow);
                if std::env::var_os("BEZDBG").is_some() {
                    eprintln!(
                        "    hold cand {c}: foot {foot:.4} |r| {:.3} wi {wi:.3} flow {flow:.2} ok {ok}",
                        r.norm()
                    );
                }
                if !ok {
                    (*curve, *t, *w) = saved;
                    return false;
                }
                feet.push((c, foot));
                w[c] = wi;
                prev = (foot, seed);
            }
            for &(c, foot) in &feet {
                t[c] = foot;
            }
            true
        };
        for dir in [1isize, -1] {
            let (mut edge_i, mut edge_t) =
                if dir > 0 { (last, t[last]) } else { (first, t[first]) };
            // Forecast spacing from the outermost weighted feet on this
            // side: the gauge need not run uniformly, and the global
            // median can undershoot the end-local spacing severely enough
            // to clamp every probe short of its target.
            let step = {
                let idxs: Vec<usize> =
                    (first..=last).filter(|&i| w[i] > 0.0).collect();
                let k = 8.min(idxs.len());
                let side = if dir > 0 { &idxs[idxs.len() - k..] } else { &idxs[..k] };
                let mut inc: Vec<f64> = side
                    .windows(2)
                    .map(|p| (t[p[1]] - t[p[0]]) / (p[1] - p[0]) as f64)
                    .collect();
                if inc.is_empty() {
                    median_weighted_step(&t, &w, first, last)
                } else {
                    median(&mut inc)
                }
            };
            if std::env::var_os("BEZDBG").is_some() {
                eprintln!("  dir {dir} step {step:.4}");
            }
            let outward: Vec<usize> = if dir > 0 {
                (last + 1..n).collect()
            } else {
                (0..first).rev().collect()
            };
            let mut idx = 0;
            loop {
                while idx < outward.len() {
                    let cand = outward[idx];
                    idx += 1;
                    let gap = cand.abs_diff(edge_i);
                    let forecast = edge_t + dir as f64 * step * gap as f64;
                    if miss(cand, forecast, gap, step, &curve) <= strict_gate
                        && hold(edge_i, &[(cand, forecast)], &mut curve, &mut t, &mut w)
                    {
                        edge_i = cand;
                        edge_t = t[cand];
                    }
                }
                let quals: Vec<(usize, f64)> = outward
                    .iter()
                    .filter_map(|&cand| {
                        let beyond = if dir > 0 { cand > edge_i } else { cand < edge_i };
                        if w[cand] > 0.0 || !beyond {
                            return None;
                        }
                        let gap = cand.abs_diff(edge_i);
                        let forecast = edge_t + dir as f64 * step * gap as f64;
                        (miss(cand, forecast, gap, step, &curve) <= loose_gate)
                            .then_some((cand, forecast))
                    })
                    .collect();
                if std::env::var_os("BEZDBG").is_some() && !quals.is_empty() {
                    eprintln!("  pair quals dir {dir}: {quals:?}");
                }
                let mut advanced = false;
                for pair in quals.windows(2).take(4) {
                    if hold(edge_i, &[pair[0], pair[1]], &mut curve, &mut t, &mut w) {
                        if std::env::var_os("BEZDBG").is_some() {
                            eprintln!("  pair held dir {dir}: {pair:?}");
                        }
                        edge_i = pair[1].0;
                        edge_t = t[pair[1].0];
                        idx = outward.iter().position(|&c| c == pair[1].0).unwrap() + 1;
                        advanced = true;
                        break;
                    }
                }
                if !advanced {
                    break;
                }
            }
        }
    }

    // Final consolidation: re-derive every weight from the refined
    // geometry and polish, twice, so interior points clipped during the
    // noisy early rounds re-enter and the refit then serves them too. The
    // scale stays frozen, and nothing displaced beyond the cutoff can
    // return.
    for pass in 0..2 {
        for (ti, p) in t.iter_mut().zip(points) {
            *ti = curve.nearest_t(p);
        }
        let res = residuals(&curve, points, &t);
        for i in 0..n {
            w[i] = tukey_weight(res[i].x, cutoff_scale).min(tukey_weight(res[i].y, cutoff_scale));
        }
        if std::env::var_os("BEZDBG").is_some() {
            eprintln!(
                "consolidate {pass}: w[0..8] {:?} r[0..8] {:?}",
                &w[..8.min(n)],
                res[..8.min(n)].iter().map(|r| (r.norm() * 1e3).round() / 1e3).collect::<Vec<_>>()
            );
        }
        refine_orthogonal(points, &w, &mut t, &mut curve, options.polish_iters);
    }
    normalize_gauge(&mut curve, &mut t, &w);

    // The working scale is deliberately conservative against truncation
    // lock-in, so it misstates the inlier noise. Re-estimate it from the
    // residuals the fit actually kept, undoing the truncation at the
    // working cutoff, and re-derive the reported weights at the consistent
    // cutoff; the geometry stays untouched.
    let res = residuals(&curve, points, &t);
    let mut sum = 0.0;
    let mut kept = 0usize;
    for i in 0..n {
        if w[i] > 0.0 {
            sum += res[i].norm_squared();
            kept += 2;
        }
    }
    if kept > 0 {
        let rms = (sum / kept as f64).sqrt();
        scale = truncated_sigma(rms, options.cutoff * scale).max(SCALE_FLOOR);
        let cutoff_scale = options.cutoff * scale;
        for i in 0..n {
            w[i] = tukey_weight(res[i].x, cutoff_scale).min(tukey_weight(res[i].y, cutoff_scale));
        }
    }

    // A quadratic whose control point sits on the chord is a straight
    // segment; report it as the line case.
    let chord = (curve.p2 - curve.p0).norm();
    let sagitta = (curve.p1 - 0.5 * (curve.p0 + curve.p2)).norm();
    let degenerate_line = rank_fallback || sagitta < (1e-6 * chord).max(0.25);

    Ok(BezierFit { curve, weights: w, t, scale, iterations, degenerate_line, cost_trace })
}
