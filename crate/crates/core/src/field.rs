//! Dense warp fields.
//!
//! A [`SamplingField`] named "X→Y" lives on the Y grid and stores, per pixel,
//! the X coordinate to read from (backward warping). A [`DeformationField`]
//! stores displacements in pixels of the grid it lives on.
//!
//! The vector transform matrix of a warp is the Jacobian of the forward map
//! X→Y, i.e. the per-pixel inverse of the sampled field's Jacobian.

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::{Border, Raster};

pub type Vec2 = Vector2<f64>;

/// Pixels whose Jacobian determinant falls below this are flagged invalid.
pub const DET_EPSILON: f64 = 1e-6;

fn check_values(width: usize, height: usize, len: usize) -> Result<()> {
    if len != width * height {
        return Err(Error::Argument(format!(
            "field holds {len} values, expected {width}x{height}"
        )));
    }
    Ok(())
}

macro_rules! vector_grid {
    ($name:ident) => {
        impl $name {
            pub fn from_values(width: usize, height: usize, values: Vec<Vec2>) -> Result<Self> {
                check_values(width, height, values.len())?;
                Ok(Self { width, height, values })
            }

            pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> Vec2) -> Self {
                let values = (0..width * height).map(|i| f(i % width, i / width)).collect();
                Self { width, height, values }
            }

            #[inline]
            pub fn width(&self) -> usize {
                self.width
            }

            #[inline]
            pub fn height(&self) -> usize {
                self.height
            }

            #[inline]
            pub fn dims(&self) -> (usize, usize) {
                (self.width, self.height)
            }

            #[inline]
            pub fn get(&self, x: usize, y: usize) -> Vec2 {
                self.values[y * self.width + x]
            }

            #[inline]
            pub fn set(&mut self, x: usize, y: usize, v: Vec2) {
                self.values[y * self.width + x] = v;
            }

            pub fn values(&self) -> &[Vec2] {
                &self.values
            }

            pub fn values_mut(&mut self) -> &mut [Vec2] {
                &mut self.values
            }

            pub fn is_finite(&self) -> bool {
                self.values.iter().all(|v| v.x.is_finite() && v.y.is_finite())
            }

            /// Two-channel raster view of the values.
            pub fn to_raster(&self) -> Raster {
                let data = self.values.iter().flat_map(|v| [v.x, v.y]).collect();
                Raster::from_vec(self.width, self.height, 2, data).expect("shape is consistent")
            }

            pub fn from_raster(r: &Raster) -> Result<Self> {
                if r.channels() != 2 {
                    return Err(Error::Argument(format!(
                        "vector field needs 2 channels, got {}",
                        r.channels()
                    )));
                }
                let values = r.data().chunks_exact(2).map(|c| Vec2::new(c[0], c[1])).collect();
                Ok(Self { width: r.width(), height: r.height(), values })
            }

            /// Bilinear read of the vector at continuous `(x, y)`.
            #[inline]
            pub fn sample(&self, x: f64, y: f64, border: Border) -> Vec2 {
                let taps = crate::raster::BilinearTaps::new(x, y, self.width, self.height, border);
                let mut out = Vec2::zeros();
                for t in 0..4 {
                    if let Some(i) = taps.index[t] {
                        out += self.values[i] * taps.weight[t];
                    }
                }
                out
            }
        }
    };
}

/// Per-pixel absolute coordinates into a source grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingField {
    width: usize,
    height: usize,
    values: Vec<Vec2>,
}

/// Per-pixel displacement vectors in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    width: usize,
    height: usize,
    values: Vec<Vec2>,
}

vector_grid!(SamplingField);
vector_grid!(DeformationField);

impl SamplingField {
    pub fn identity(width: usize, height: usize) -> Self {
        Self::from_fn(width, height, |x, y| Vec2::new(x as f64, y as f64))
    }

    /// Displacement view: `d(p) = F(p) − p`.
    pub fn to_deformation(&self) -> DeformationField {
        DeformationField::from_fn(self.width, self.height, |x, y| {
            self.get(x, y) - Vec2::new(x as f64, y as f64)
        })
    }
}

impl DeformationField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::from_fn(width, height, |_, _| Vec2::zeros())
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| v.x == 0.0 && v.y == 0.0)
    }
}

/// Per-pixel 2×2 matrices with validity flags.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianField {
    width: usize,
    height: usize,
    matrices: Vec<Matrix2<f64>>,
    valid: Vec<bool>,
}

impl JacobianField {
    pub fn from_parts(
        width: usize,
        height: usize,
        matrices: Vec<Matrix2<f64>>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        check_values(width, height, matrices.len())?;
        check_values(width, height, valid.len())?;
        Ok(Self { width, height, matrices, valid })
    }

    /// Same matrix everywhere; validity from its determinant.
    pub fn constant(width: usize, height: usize, m: Matrix2<f64>) -> Self {
        let ok = m.determinant().abs() >= DET_EPSILON;
        Self {
            width,
            height,
            matrices: vec![m; width * height],
            valid: vec![ok; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Matrix2<f64> {
        self.matrices[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn matrices(&self) -> &[Matrix2<f64>] {
        &self.matrices
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    /// Fraction of pixels flagged invalid.
    pub fn degenerate_fraction(&self) -> f64 {
        if self.valid.is_empty() {
            return 0.0;
        }
        self.valid.iter().filter(|v| !**v).count() as f64 / self.valid.len() as f64
    }
}

/// `out(p) = bilinear(image, field(p))` per channel.
pub fn sample(field: &SamplingField, image: &Raster, border: Border) -> Result<Raster> {
    if image.is_empty() {
        return Err(Error::Argument("cannot sample an empty image".into()));
    }
    let c = image.channels();
    let mut out = Raster::zeros(field.width, field.height, c);
    out.data_mut()
        .par_chunks_mut(c)
        .zip(field.values.par_iter())
        .for_each(|(px, p)| image.sample_into(p.x, p.y, border, px));
    Ok(out)
}

/// Resamples a vector field: `out(p) = bilinear(d, field(p))`.
pub fn sample_vectors(field: &SamplingField, d: &DeformationField, border: Border) -> DeformationField {
    let values = field
        .values
        .par_iter()
        .map(|p| d.sample(p.x, p.y, border))
        .collect();
    DeformationField {
        width: field.width,
        height: field.height,
        values,
    }
}

/// `F(p) = p + d(p)`.
pub fn as_sampling_field(d: &DeformationField) -> SamplingField {
    SamplingField::from_fn(d.width, d.height, |x, y| Vec2::new(x as f64, y as f64) + d.get(x, y))
}

/// Finite-difference Jacobian of a sampling field. Columns are the x and y
/// partials (central differences with steps `dx`, `dy`; one-sided at borders).
/// Non-integer steps read the field bilinearly.
pub fn jacobian_of_field(field: &SamplingField, dx: f64, dy: f64) -> Result<JacobianField> {
    if !(dx > 0.0 && dy > 0.0) {
        return Err(Error::Argument(format!("steps must be positive, got ({dx}, {dy})")));
    }
    let (w, h) = field.dims();
    let integral = dx.fract() == 0.0 && dy.fract() == 0.0;
    let read = |x: f64, y: f64| -> Vec2 {
        if integral {
            field.get(x as usize, y as usize)
        } else {
            field.sample(x, y, Border::Clamp)
        }
    };
    let partial = |x: usize, y: usize, along_x: bool| -> Vec2 {
        let (pos, step, extent) = if along_x { (x as f64, dx, w) } else { (y as f64, dy, h) };
        let max = (extent - 1) as f64;
        let at = |v: f64| if along_x { read(v, y as f64) } else { read(x as f64, v) };
        if extent == 1 {
            // No neighbours along this axis: assume unit stretch.
            return if along_x { Vec2::new(1.0, 0.0) } else { Vec2::new(0.0, 1.0) };
        }
        let lo = pos - step;
        let hi = pos + step;
        if lo >= 0.0 && hi <= max {
            (at(hi) - at(lo)) / (2.0 * step)
        } else if hi <= max {
            (at(hi) - at(pos)) / step
        } else if lo >= 0.0 {
            (at(pos) - at(lo)) / step
        } else {
            // Step wider than the grid: span it.
            (at(max) - at(0.0)) / max
        }
    };
    let (matrices, valid): (Vec<_>, Vec<_>) = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let cx = partial(x, y, true);
            let cy = partial(x, y, false);
            let m = Matrix2::new(cx.x, cy.x, cx.y, cy.y);
            let ok = m.determinant().abs() >= DET_EPSILON && m.iter().all(|v| v.is_finite());
            (m, ok)
        })
        .unzip();
    Ok(JacobianField {
        width: w,
        height: h,
        matrices,
        valid,
    })
}

/// Per-pixel inverse; degenerate pixels become identity and stay flagged.
pub fn invert_jacobians(j: &JacobianField) -> JacobianField {
    let (matrices, valid) = j
        .matrices
        .iter()
        .zip(&j.valid)
        .map(|(m, &v)| {
            let det = m.determinant();
            if v && det.abs() >= DET_EPSILON {
                let inv = Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det;
                (inv, true)
            } else {
                (Matrix2::identity(), false)
            }
        })
        .unzip();
    JacobianField {
        width: j.width,
        height: j.height,
        matrices,
        valid,
    }
}

/// `out(p) = J(p) · d(p)`; invalid pixels pass `d` through.
pub fn transform_vectors(j: &JacobianField, d: &DeformationField) -> Result<DeformationField> {
    if j.dims() != d.dims() {
        return Err(Error::Dimension {
            what: "transform_vectors",
            expected: j.dims(),
            actual: d.dims(),
        });
    }
    let values = j
        .matrices
        .iter()
        .zip(&j.valid)
        .zip(&d.values)
        .map(|((m, &ok), v)| if ok { m * v } else { *v })
        .collect();
    Ok(DeformationField {
        width: d.width,
        height: d.height,
        values,
    })
}

/// Output of [`push_through_warp`]: the re-expressed field plus the forward
/// Jacobians used (with their validity flags).
#[derive(Debug, Clone)]
pub struct PushedField {
    pub field: DeformationField,
    pub transform: JacobianField,
}

/// Carries a deformation living on the source grid of `w` onto its
/// destination grid: resample through `w`, then re-express each vector with
/// the forward Jacobian `∂dest/∂src` (the inverse of `w`'s Jacobian).
pub fn push_through_warp(
    d_src: &DeformationField,
    w: &SamplingField,
    dx: f64,
    dy: f64,
) -> Result<PushedField> {
    if !d_src.is_finite() || !w.is_finite() {
        return Err(Error::Argument("push_through_warp: non-finite input".into()));
    }
    let resampled = sample_vectors(w, d_src, Border::Clamp);
    let transform = invert_jacobians(&jacobian_of_field(w, dx, dy)?);
    let field = transform_vectors(&transform, &resampled)?;
    Ok(PushedField { field, transform })
}

/// `out(p) = t · d(p)`.
pub fn scale_deformation(d: &DeformationField, t: f64) -> DeformationField {
    DeformationField {
        width: d.width,
        height: d.height,
        values: d.values.iter().map(|v| v * t).collect(),
    }
}
