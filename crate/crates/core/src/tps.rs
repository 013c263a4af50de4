//! Thin-plate splines: fitting, evaluation, rasterization, dense-field inversion
//! and the adjoint used by the optimizer.
//!
//! Kernel convention is `U(r) = r² log r²` with `U(0) = 0`. A spline maps
//! `p ↦ A·[x, y, 1] + Σᵢ wᵢ U(‖p − srcᵢ‖)`.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, Dyn, Vector2, LU};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::SamplingField;

pub type Point = Vector2<f64>;

/// Default stride for sampling a dense field before inversion.
pub const DEFAULT_INVERSION_STRIDE: usize = 8;
/// Default bending regularization for inversion fits.
pub const DEFAULT_INVERSION_REGULARIZATION: f64 = 1e-3;
/// Fits whose estimated 1-norm condition number exceeds this are rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// Bookstein kernel as a function of the squared radius.
#[inline]
pub fn kernel_r2(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// Gradient of `U(‖v‖)` with respect to `v`.
#[inline]
fn kernel_grad(v: Point) -> Point {
    let r2 = v.norm_squared();
    if r2 <= 0.0 {
        Point::zeros()
    } else {
        v * (2.0 * (r2.ln() + 1.0))
    }
}

/// A fitted thin-plate spline.
///
/// Internally the fit lives in a normalized frame `(p − origin) / scale`
/// (centroid and RMS radius of the sources) with the regularization divided
/// by `scale²`. The interpolant is the same function as the pixel-frame fit,
/// but the linear system stays well conditioned at any image size.
#[derive(Clone)]
pub struct ThinPlateSpline {
    control_points_src: Vec<Point>,
    control_points_dst: Vec<Point>,
    origin: Point,
    scale: f64,
    normalized_src: Vec<Point>,
    /// `[[ax, ay, a0] for x-output, [ax, ay, a0] for y-output]`, normalized frame.
    affine: [[f64; 3]; 2],
    weights: Vec<Point>,
    regularization: f64,
    system: Arc<LU<f64, Dyn, Dyn>>,
}

impl std::fmt::Debug for ThinPlateSpline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ThinPlateSpline")
            .field("control_points", &self.control_points_src.len())
            .field("affine_part", &self.affine_part())
            .field("regularization", &self.regularization)
            .finish()
    }
}

/// Gradients of a scalar loss with respect to the spline's control points,
/// given upstream gradients at evaluated points.
#[derive(Debug, Clone)]
pub struct TpsGradient {
    pub d_src: Vec<Point>,
    pub d_dst: Vec<Point>,
}

/// One correspondence pair as stored in `correspondence.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointPair {
    pub src: [f64; 2],
    pub dst: [f64; 2],
}

pub fn read_correspondence(path: &Path) -> Result<Vec<PointPair>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn write_correspondence(path: &Path, pairs: &[PointPair]) -> Result<()> {
    let json = serde_json::to_string_pretty(pairs)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Splits point pairs into `(src, dst)` point lists.
pub fn split_pairs(pairs: &[PointPair]) -> (Vec<Point>, Vec<Point>) {
    pairs
        .iter()
        .map(|p| (Point::new(p.src[0], p.src[1]), Point::new(p.dst[0], p.dst[1])))
        .unzip()
}

/// Checks that at least three points are given, all finite, pairwise
/// distinct and not all on one line.
pub fn check_control_points(src: &[Point]) -> Result<()> {
    if src.len() < 3 {
        return Err(Error::Degenerate(format!(
            "need at least 3 control points, got {}",
            src.len()
        )));
    }
    if let Some(i) = src.iter().position(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::Argument(format!("control point {i} is not finite")));
    }
    let mut order: Vec<usize> = (0..src.len()).collect();
    order.sort_by(|&a, &b| {
        src[a]
            .x
            .total_cmp(&src[b].x)
            .then(src[a].y.total_cmp(&src[b].y))
    });
    for w in order.windows(2) {
        if src[w[0]] == src[w[1]] {
            let (i, j) = (w[0].min(w[1]), w[0].max(w[1]));
            return Err(Error::Degenerate(format!(
                "control points {i} and {j} coincide at ({}, {})",
                src[i].x, src[i].y
            )));
        }
    }
    let n = src.len() as f64;
    let c = src.iter().sum::<Point>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in src {
        let d = p - c;
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = ((tr * tr / 4.0) - det).max(0.0).sqrt();
    let (lmax, lmin) = (tr / 2.0 + disc, tr / 2.0 - disc);
    if lmax <= 0.0 || lmin <= 1e-12 * lmax {
        return Err(Error::Degenerate(format!(
            "{} control points are collinear",
            src.len()
        )));
    }
    Ok(())
}

fn closest_pair(src: &[Point]) -> (usize, usize) {
    let mut best = (0, 1, f64::INFINITY);
    for i in 0..src.len() {
        for j in i + 1..src.len() {
            let d = (src[i] - src[j]).norm_squared();
            if d < best.2 {
                best = (i, j, d);
            }
        }
    }
    (best.0, best.1)
}

/// Hager's estimate of `‖A⁻¹‖₁` for a symmetric `A` given its LU factors.
fn inverse_norm1_estimate(lu: &LU<f64, Dyn, Dyn>, n: usize) -> Option<f64> {
    let mut x = DMatrix::from_element(n, 1, 1.0 / n as f64);
    let mut est = 0.0;
    for _ in 0..5 {
        let y = lu.solve(&x)?;
        est = y.iter().map(|v| v.abs()).sum::<f64>();
        let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let z = lu.solve(&xi)?;
        let (jmax, zmax) = z
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |acc, (i, v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
        let ztx: f64 = z.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        if zmax <= ztx {
            break;
        }
        x.fill(0.0);
        x[jmax] = 1.0;
    }
    Some(est)
}

/// Fits a thin-plate spline mapping `src[i] ↦ dst[i]`.
///
/// With `regularization = 0` the spline interpolates; otherwise the kernel
/// block becomes `K + regularization·I`.
pub fn fit_tps(src: &[Point], dst: &[Point], regularization: f64) -> Result<ThinPlateSpline> {
    if src.len() != dst.len() {
        return Err(Error::Argument(format!(
            "{} source points but {} destination points",
            src.len(),
            dst.len()
        )));
    }
    if !(regularization >= 0.0 && regularization.is_finite()) {
        return Err(Error::Argument(format!(
            "regularization must be finite and nonnegative, got {regularization}"
        )));
    }
    check_control_points(src)?;
    if let Some(i) = dst.iter().position(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::Argument(format!("destination point {i} is not finite")));
    }

    let n = src.len();
    let m = n + 3;
    let origin = src.iter().sum::<Point>() / n as f64;
    let scale = (src.iter().map(|p| (p - origin).norm_squared()).sum::<f64>() / n as f64).sqrt();
    let normalized_src: Vec<Point> = src.iter().map(|p| (p - origin) / scale).collect();
    let q = &normalized_src;
    let mut l = DMatrix::<f64>::zeros(m, m);
    for i in 0..n {
        for j in i + 1..n {
            let u = kernel_r2((q[i] - q[j]).norm_squared());
            l[(i, j)] = u;
            l[(j, i)] = u;
        }
        l[(i, i)] = regularization / (scale * scale);
        l[(i, n)] = 1.0;
        l[(i, n + 1)] = q[i].x;
        l[(i, n + 2)] = q[i].y;
        l[(n, i)] = 1.0;
        l[(n + 1, i)] = q[i].x;
        l[(n + 2, i)] = q[i].y;
    }
    let norm1 = (0..m)
        .map(|c| l.column(c).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);

    let lu = l.lu();
    let singular = |detail: &str| {
        let (i, j) = closest_pair(src);
        Error::Solver(format!(
            "{detail} for {n} control points (closest pair: #{i} ({:.3}, {:.3}) and #{j} ({:.3}, {:.3}))",
            src[i].x, src[i].y, src[j].x, src[j].y
        ))
    };
    let inv_norm = inverse_norm1_estimate(&lu, m).ok_or_else(|| singular("singular system"))?;
    let cond = norm1 * inv_norm;
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(singular(&format!("condition number {cond:.3e} exceeds {MAX_CONDITION:.0e}")));
    }
    let (affine, weights) = solve_coefficients(&lu, dst).ok_or_else(|| singular("singular system"))?;
    Ok(ThinPlateSpline {
        control_points_src: src.to_vec(),
        control_points_dst: dst.to_vec(),
        origin,
        scale,
        normalized_src,
        affine,
        weights,
        regularization,
        system: Arc::new(lu),
    })
}

type Coefficients = ([[f64; 3]; 2], Vec<Point>);

fn solve_coefficients(lu: &LU<f64, Dyn, Dyn>, dst: &[Point]) -> Option<Coefficients> {
    let n = dst.len();
    let mut rhs = DMatrix::<f64>::zeros(n + 3, 2);
    for (i, d) in dst.iter().enumerate() {
        rhs[(i, 0)] = d.x;
        rhs[(i, 1)] = d.y;
    }
    let coef = lu.solve(&rhs)?;
    let affine = [
        [coef[(n + 1, 0)], coef[(n + 2, 0)], coef[(n, 0)]],
        [coef[(n + 1, 1)], coef[(n + 2, 1)], coef[(n, 1)]],
    ];
    let weights = (0..n).map(|i| Point::new(coef[(i, 0)], coef[(i, 1)])).collect();
    Some((affine, weights))
}

impl ThinPlateSpline {
    pub fn control_points_src(&self) -> &[Point] {
        &self.control_points_src
    }

    pub fn control_points_dst(&self) -> &[Point] {
        &self.control_points_dst
    }

    /// Affine part in pixel coordinates.
    pub fn affine_part(&self) -> [[f64; 3]; 2] {
        let (a, s, c) = (&self.affine, self.scale, self.origin);
        let w = self.kernel_weights();
        // Σ wᵢ‖srcᵢ‖² picks up the log-scale term of the kernel.
        let shift: Point = w
            .iter()
            .zip(&self.control_points_src)
            .map(|(w, p)| w * p.norm_squared())
            .sum::<Point>()
            * (s * s).ln();
        let row = |r: usize, sh: f64| {
            [
                a[r][0] / s,
                a[r][1] / s,
                a[r][2] - (a[r][0] * c.x + a[r][1] * c.y) / s - sh,
            ]
        };
        [row(0, shift.x), row(1, shift.y)]
    }

    /// Kernel weights in pixel coordinates.
    pub fn kernel_weights(&self) -> Vec<Point> {
        let s2 = self.scale * self.scale;
        self.weights.iter().map(|w| w / s2).collect()
    }

    #[inline]
    fn normalize(&self, p: Point) -> Point {
        (p - self.origin) / self.scale
    }

    pub fn regularization(&self) -> f64 {
        self.regularization
    }

    pub fn len(&self) -> usize {
        self.control_points_src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.control_points_src.is_empty()
    }

    pub fn pairs(&self) -> Vec<PointPair> {
        self.control_points_src
            .iter()
            .zip(&self.control_points_dst)
            .map(|(s, d)| PointPair {
                src: [s.x, s.y],
                dst: [d.x, d.y],
            })
            .collect()
    }

    /// Refits with the same sources and new destinations, reusing the
    /// factorized system.
    pub fn with_dst(&self, dst: &[Point]) -> Result<ThinPlateSpline> {
        if dst.len() != self.len() {
            return Err(Error::Argument(format!(
                "{} destinations for {} control points",
                dst.len(),
                self.len()
            )));
        }
        let (affine, weights) = solve_coefficients(&self.system, dst)
            .ok_or_else(|| Error::Solver("singular system on refit".into()))?;
        Ok(ThinPlateSpline {
            control_points_dst: dst.to_vec(),
            affine,
            weights,
            ..self.clone()
        })
    }

    #[inline]
    pub fn eval(&self, p: Point) -> Point {
        let q = self.normalize(p);
        let a = &self.affine;
        let mut out = Point::new(
            a[0][0] * q.x + a[0][1] * q.y + a[0][2],
            a[1][0] * q.x + a[1][1] * q.y + a[1][2],
        );
        for (s, w) in self.normalized_src.iter().zip(&self.weights) {
            out += w * kernel_r2((q - s).norm_squared());
        }
        out
    }

    /// Analytic Jacobian `∂eval/∂p` as `[[∂x'/∂x, ∂x'/∂y], [∂y'/∂x, ∂y'/∂y]]`.
    pub fn jacobian(&self, p: Point) -> [[f64; 2]; 2] {
        let q = self.normalize(p);
        let a = &self.affine;
        let mut j = [[a[0][0], a[0][1]], [a[1][0], a[1][1]]];
        for (s, w) in self.normalized_src.iter().zip(&self.weights) {
            let g = kernel_grad(q - s);
            j[0][0] += w.x * g.x;
            j[0][1] += w.x * g.y;
            j[1][0] += w.y * g.x;
            j[1][1] += w.y * g.y;
        }
        j.map(|r| r.map(|v| v / self.scale))
    }

    /// Adjoint of [`ThinPlateSpline::eval`] at `pts` with upstream gradients
    /// `upstream[r] = ∂loss/∂eval(pts[r])`, differentiating through the fit.
    pub fn backward(&self, pts: &[Point], upstream: &[Point]) -> Result<TpsGradient> {
        if pts.len() != upstream.len() {
            return Err(Error::Argument("backward: points/upstream length mismatch".into()));
        }
        let n = self.len();
        let m = n + 3;
        // The normalization frame is held fixed: the interpolant does not
        // depend on it, so this is still the exact derivative.
        let src = &self.normalized_src;

        // ∂loss/∂coef and the direct dependence of eval on the kernel centers.
        // Fixed-size chunks reduced in order keep the result bitwise reproducible.
        const CHUNK: usize = 512;
        let partials: Vec<(Vec<Point>, Vec<Point>)> = pts
            .par_chunks(CHUNK)
            .zip(upstream.par_chunks(CHUNK))
            .map(|(ps, gs)| {
                let mut gc = vec![Point::zeros(); m];
                let mut ds = vec![Point::zeros(); n];
                for (p, g) in ps.iter().zip(gs) {
                    if g.x == 0.0 && g.y == 0.0 {
                        continue;
                    }
                    let p = self.normalize(*p);
                    for i in 0..n {
                        let v = p - src[i];
                        gc[i] += g * kernel_r2(v.norm_squared());
                        let wg = self.weights[i].dot(g);
                        ds[i] -= kernel_grad(v) * wg;
                    }
                    gc[n] += g;
                    gc[n + 1] += g * p.x;
                    gc[n + 2] += g * p.y;
                }
                (gc, ds)
            })
            .collect();
        let mut g_coef = vec![Point::zeros(); m];
        let mut d_src = vec![Point::zeros(); n];
        for (gc, ds) in partials {
            g_coef.iter_mut().zip(gc).for_each(|(x, y)| *x += y);
            d_src.iter_mut().zip(ds).for_each(|(x, y)| *x += y);
        }

        let mut g = DMatrix::<f64>::zeros(m, 2);
        for (i, v) in g_coef.iter().enumerate() {
            g[(i, 0)] = v.x;
            g[(i, 1)] = v.y;
        }
        // The system matrix is symmetric, so L⁻ᵀ = L⁻¹.
        let lambda = self
            .system
            .solve(&g)
            .ok_or_else(|| Error::Solver("singular system in backward pass".into()))?;
        let d_dst = (0..n).map(|i| Point::new(lambda[(i, 0)], lambda[(i, 1)])).collect();

        // coef in row layout: w_i rows 0..n, then a0, ax, ay.
        let coef = |r: usize| -> Point {
            if r < n {
                self.weights[r]
            } else {
                let a = &self.affine;
                match r - n {
                    0 => Point::new(a[0][2], a[1][2]),
                    1 => Point::new(a[0][0], a[1][0]),
                    _ => Point::new(a[0][1], a[1][1]),
                }
            }
        };
        let lam = |r: usize| Point::new(lambda[(r, 0)], lambda[(r, 1)]);
        // ∂loss/∂L[r][c] = -λ_r · coef_c
        let gl = |r: usize, c: usize| -lam(r).dot(&coef(c));
        for i in 0..n {
            let mut acc = Point::zeros();
            for j in 0..n {
                if i != j {
                    acc += kernel_grad(src[i] - src[j]) * (gl(i, j) + gl(j, i));
                }
            }
            acc.x += gl(i, n + 1) + gl(n + 1, i);
            acc.y += gl(i, n + 2) + gl(n + 2, i);
            d_src[i] = (d_src[i] + acc) / self.scale;
        }
        Ok(TpsGradient { d_src, d_dst })
    }
}

/// Evaluates the spline at each point.
pub fn eval_tps(tps: &ThinPlateSpline, pts: &[Point]) -> Vec<Point> {
    pts.iter().map(|&p| tps.eval(p)).collect()
}

/// Rasterizes the spline at every integer pixel center of a `width × height` grid.
pub fn tps_to_field(tps: &ThinPlateSpline, width: usize, height: usize) -> Result<SamplingField> {
    if width == 0 || height == 0 {
        return Err(Error::Argument(format!("zero-area grid {width}x{height}")));
    }
    let values: Vec<Point> = (0..width * height)
        .into_par_iter()
        .map(|i| tps.eval(Point::new((i % width) as f64, (i / width) as f64)))
        .collect();
    SamplingField::from_values(width, height, values)
}

/// Pixel positions on a `stride` lattice covering the grid, always including
/// the last row and column.
pub fn lattice(width: usize, height: usize, stride: usize) -> Vec<(usize, usize)> {
    let axis = |n: usize| {
        let mut v: Vec<usize> = (0..n).step_by(stride.max(1)).collect();
        if *v.last().unwrap() != n - 1 {
            v.push(n - 1);
        }
        v
    };
    let xs = axis(width);
    let ys = axis(height);
    ys.iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .collect()
}

/// Inverts a dense sampling field by fitting a spline to the swapped
/// correspondences `field(p) ↦ p` on a `grid_stride` lattice.
pub fn invert_field_via_tps(
    field: &SamplingField,
    grid_stride: usize,
    regularization: f64,
) -> Result<ThinPlateSpline> {
    if grid_stride == 0 {
        return Err(Error::Argument("grid stride must be at least 1".into()));
    }
    let samples = lattice(field.width(), field.height(), grid_stride);
    invert_field_on_samples(field, &samples, regularization)
}

/// Inversion restricted to the given sample pixels. Fails on folds detected
/// among lattice triangles whose three corners are all sampled.
pub fn invert_field_on_samples(
    field: &SamplingField,
    samples: &[(usize, usize)],
    regularization: f64,
) -> Result<ThinPlateSpline> {
    if !field.is_finite() {
        return Err(Error::Argument("field has non-finite values".into()));
    }
    check_orientation(field, samples)?;
    let src: Vec<Point> = samples.iter().map(|&(x, y)| field.get(x, y)).collect();
    let dst: Vec<Point> = samples
        .iter()
        .map(|&(x, y)| Point::new(x as f64, y as f64))
        .collect();
    fit_tps(&src, &dst, regularization).map_err(|e| match e {
        Error::Degenerate(msg) => Error::Degenerate(format!("field is not invertible: {msg}")),
        other => other,
    })
}

fn check_orientation(field: &SamplingField, samples: &[(usize, usize)]) -> Result<()> {
    let set: HashSet<(usize, usize)> = samples.iter().copied().collect();
    let xs: std::collections::BTreeSet<usize> = samples.iter().map(|s| s.0).collect();
    let ys: std::collections::BTreeSet<usize> = samples.iter().map(|s| s.1).collect();
    let next = |s: &std::collections::BTreeSet<usize>, v: usize| s.range(v + 1..).next().copied();
    let (mut pos, mut neg) = (0usize, 0usize);
    for &(x, y) in samples {
        let (Some(x1), Some(y1)) = (next(&xs, x), next(&ys, y)) else {
            continue;
        };
        if !set.contains(&(x1, y)) || !set.contains(&(x, y1)) {
            continue;
        }
        let p = field.get(x, y);
        let a = field.get(x1, y) - p;
        let b = field.get(x, y1) - p;
        let cross = a.x * b.y - a.y * b.x;
        let scale = a.norm() * b.norm();
        if cross > 1e-9 * scale {
            pos += 1;
        } else if cross < -1e-9 * scale {
            neg += 1;
        }
    }
    if pos > 0 && neg > 0 {
        return Err(Error::Degenerate(format!(
            "field folds over itself ({pos} positively and {neg} negatively oriented cells)"
        )));
    }
    Ok(())
}
