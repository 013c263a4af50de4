//! Keyframe edit propagation: warp the edit into source shape, back-project
//! it to the atlas, carry the keyframe deformation through atlas space to
//! every frame, deform UV and alpha, and render.

use rayon::prelude::*;

use crate::error::{Error, Result, StageExt};
use crate::field::{self, DeformationField, JacobianField, PushedField, SamplingField};
use crate::layers::{self, AtlasLayer, EditBundle, LayeredVideo};
use crate::raster::{Border, Raster};
use crate::tps::{self, ThinPlateSpline};

/// Frames whose stage-2 degenerate fraction exceeds this get a warning.
pub const DEGENERATE_WARNING_FRACTION: f64 = 0.05;
/// Finite-difference step for every Jacobian in the pipeline.
pub const JACOBIAN_STEP: f64 = 1.0;
/// Dilation of the foreground support used to pick inversion samples.
pub const INVERSION_MARGIN: usize = 4;
/// Sample-count window for the adaptive inversion stride.
pub const MIN_INVERSION_SAMPLES: usize = 16;
pub const MAX_INVERSION_SAMPLES: usize = 600;
/// Deformations with every vector below this length are treated as zero.
pub const ZERO_DEFORMATION: f64 = 1e-9;

/// All intermediate products of one propagation run.
#[derive(Debug, Clone)]
pub struct PropagationResult {
    pub edited_atlas: AtlasLayer,
    pub keyframe_deformation: DeformationField,
    pub atlas_deformation: DeformationField,
    pub per_frame_deformation: Vec<DeformationField>,
    pub per_frame_uv_t: Vec<SamplingField>,
    pub per_frame_alpha_t: Vec<Raster>,
    pub edited_frames: Vec<Raster>,
    /// Fraction of atlas pixels with a degenerate frame→atlas Jacobian.
    pub atlas_degenerate_fraction: f64,
    /// Per frame, fraction of pixels with a degenerate atlas→frame Jacobian.
    pub degenerate_fraction: Vec<f64>,
    pub warnings: Vec<String>,
}

impl PropagationResult {
    pub fn frame_count(&self) -> usize {
        self.edited_frames.len()
    }
}

/// `d_k(p) = corr(p) − p` on the keyframe grid.
pub fn keyframe_deformation(bundle: &EditBundle) -> Result<DeformationField> {
    tps_deformation(&bundle.correspondence, bundle.frame_size())
}

pub(crate) fn tps_deformation(tps: &ThinPlateSpline, (w, h): (usize, usize)) -> Result<DeformationField> {
    Ok(tps::tps_to_field(tps, w, h)?.to_deformation())
}

/// Edited keyframe resampled into source shape: `out(p) = edited(corr(p))`.
pub fn warp_edit_to_source(bundle: &EditBundle) -> Result<Raster> {
    let (w, h) = bundle.frame_size();
    let f = tps::tps_to_field(&bundle.correspondence, w, h)?;
    field::sample(&f, &bundle.edited_keyframe, Border::Clamp)
}

/// Back-projects the source-shaped edit into the foreground atlas through the
/// keyframe. Atlas pixels the keyframe does not cover keep the original
/// foreground content and are marked uncovered.
pub fn build_edited_atlas(video: &LayeredVideo, warped_edit: &Raster) -> Result<AtlasLayer> {
    let k = video.keyframe_index();
    let projected = layers::backproject_to_atlas(warped_edit, video, k)?;
    let mut image = video.fg_atlas().image().clone();
    for (i, &covered) in projected.coverage().iter().enumerate() {
        if covered {
            image.data_mut()[i * 3..i * 3 + 3].copy_from_slice(&projected.image().data()[i * 3..i * 3 + 3]);
        }
    }
    AtlasLayer::new(image, projected.coverage().to_vec())
}

/// Atlas deformation plus per-frame deformations with their transforms.
#[derive(Debug, Clone)]
pub struct DeformationPropagation {
    pub atlas: PushedField,
    pub frames: Vec<PushedField>,
}

impl DeformationPropagation {
    pub fn degenerate_fractions(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.transform.degenerate_fraction()).collect()
    }
}

/// Stage 1: keyframe deformation pushed onto the atlas grid.
pub fn deformation_to_atlas(video: &LayeredVideo, d_k: &DeformationField) -> Result<PushedField> {
    if d_k.dims() != video.frame_size() {
        return Err(Error::Dimension {
            what: "keyframe deformation",
            expected: video.frame_size(),
            actual: d_k.dims(),
        });
    }
    let f2a = video.uv_frame_to_atlas(video.keyframe_index())?;
    field::push_through_warp(d_k, f2a, JACOBIAN_STEP, JACOBIAN_STEP)
}

/// Stage 2: atlas deformation pushed onto frame `j`'s grid.
pub fn deformation_to_frame(video: &LayeredVideo, d_atlas: &DeformationField, j: usize) -> Result<PushedField> {
    if d_atlas.dims() != video.atlas_size() {
        return Err(Error::Dimension {
            what: "atlas deformation",
            expected: video.atlas_size(),
            actual: d_atlas.dims(),
        });
    }
    field::push_through_warp(d_atlas, video.uv_atlas_to_frame(j)?, JACOBIAN_STEP, JACOBIAN_STEP)
}

pub fn propagate_deformation(video: &LayeredVideo, d_k: &DeformationField) -> Result<DeformationPropagation> {
    let atlas = deformation_to_atlas(video, d_k)?;
    let frames = (1..=video.frame_count())
        .into_par_iter()
        .map(|j| deformation_to_frame(video, &atlas.field, j))
        .collect::<Result<Vec<_>>>()?;
    Ok(DeformationPropagation { atlas, frames })
}

/// Inversion samples: the foreground support of `alpha` grown by
/// [`INVERSION_MARGIN`], on a lattice whose stride adapts so the count stays
/// within the sample window. Falls back to the full lattice when the support
/// is too small to fit a spline.
pub fn inversion_samples(alpha: &Raster) -> Vec<(usize, usize)> {
    let (w, h) = alpha.dims();
    let support = dilate(&alpha.data().iter().map(|&a| a > layers::FG_THRESHOLD).collect::<Vec<_>>(), w, h, INVERSION_MARGIN);
    let pick = |stride: usize| -> Vec<(usize, usize)> {
        tps::lattice(w, h, stride)
            .into_iter()
            .filter(|&(x, y)| support[y * w + x])
            .collect()
    };
    let mut stride = tps::DEFAULT_INVERSION_STRIDE;
    let mut samples = pick(stride);
    while samples.len() < MIN_INVERSION_SAMPLES && stride > 1 {
        stride /= 2;
        samples = pick(stride);
    }
    while samples.len() > MAX_INVERSION_SAMPLES {
        stride *= 2;
        samples = pick(stride);
    }
    if samples.len() < 3 {
        return tps::lattice(w, h, tps::DEFAULT_INVERSION_STRIDE);
    }
    samples
}

/// Square dilation of a boolean mask by `r` pixels.
fn dilate(mask: &[bool], w: usize, h: usize, r: usize) -> Vec<bool> {
    let mut rows = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            rows[y * w + x] = (lo..=hi).any(|i| mask[y * w + i]);
        }
    }
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
            out[y * w + x] = (lo..=hi).any(|i| rows[i * w + x]);
        }
    }
    out
}

/// Spline inverse of the target→source deformation `d_j`: maps target-shape
/// positions back to source-shape positions.
pub fn invert_frame_deformation(
    d_j: &DeformationField,
    samples: &[(usize, usize)],
) -> Result<ThinPlateSpline> {
    tps::invert_field_on_samples(
        &field::as_sampling_field(d_j),
        samples,
        tps::DEFAULT_INVERSION_REGULARIZATION,
    )
}

/// UV field and alpha matte of frame `j` deformed into the target shape.
pub fn deform_uv_and_alpha(video: &LayeredVideo, d_j: &DeformationField, j: usize) -> Result<(SamplingField, Raster)> {
    let uv = video.uv_atlas_to_frame(j)?;
    let alpha = video.alpha(j)?;
    if d_j.dims() != uv.dims() {
        return Err(Error::Dimension {
            what: "frame deformation",
            expected: uv.dims(),
            actual: d_j.dims(),
        });
    }
    if d_j.values().iter().all(|v| v.norm() <= ZERO_DEFORMATION) {
        return Ok((uv.clone(), alpha.clone()));
    }
    let inv = invert_frame_deformation(d_j, &inversion_samples(alpha))
        .map_err(|e| annotate_frame(e, j))?;
    let (w, h) = uv.dims();
    let s = tps::tps_to_field(&inv, w, h)?;
    Ok(deform_with(&s, uv, alpha))
}

fn annotate_frame(e: Error, j: usize) -> Error {
    match e {
        Error::Degenerate(m) => Error::Degenerate(format!("frame {j}: {m}")),
        Error::Solver(m) => Error::Solver(format!("frame {j}: {m}")),
        other => other,
    }
}

/// `uv_t = uv ⊗ s`, `alpha_t = clamp(alpha ⊗ s)` with zero fill outside.
pub(crate) fn deform_with(s: &SamplingField, uv: &SamplingField, alpha: &Raster) -> (SamplingField, Raster) {
    let uv_t = SamplingField::from_raster(&field::sample(s, &uv.to_raster(), Border::Clamp).expect("uv is non-empty"))
        .expect("two channels");
    let alpha_t = field::sample(s, alpha, Border::Zero)
        .expect("alpha is non-empty")
        .clamp01();
    (uv_t, alpha_t)
}

/// End-to-end propagation of the bundle's edit to every frame.
pub fn propagate_edit(video: &LayeredVideo, bundle: &EditBundle) -> Result<PropagationResult> {
    if bundle.keyframe_index != video.keyframe_index() {
        return Err(Error::Argument(format!(
            "edit is for keyframe {} but the video's keyframe is {}",
            bundle.keyframe_index,
            video.keyframe_index()
        )));
    }
    if bundle.frame_size() != video.frame_size() {
        return Err(Error::Dimension {
            what: "edit bundle",
            expected: video.frame_size(),
            actual: bundle.frame_size(),
        });
    }
    let warped = warp_edit_to_source(bundle).stage("warp_edit_to_source")?;
    let edited_atlas = build_edited_atlas(video, &warped).stage("build_edited_atlas")?;
    let d_k = keyframe_deformation(bundle).stage("warp_edit_to_source")?;
    let atlas = deformation_to_atlas(video, &d_k).stage("propagate_deformation")?;
    finish(video, edited_atlas, d_k, atlas.field, atlas.transform.degenerate_fraction())
}

/// Stage 2, UV/alpha deformation and rendering from a given atlas deformation.
pub(crate) fn finish(
    video: &LayeredVideo,
    edited_atlas: AtlasLayer,
    keyframe_deformation: DeformationField,
    atlas_deformation: DeformationField,
    atlas_degenerate_fraction: f64,
) -> Result<PropagationResult> {
    struct Frame {
        d: DeformationField,
        transform: JacobianField,
        uv: SamplingField,
        alpha: Raster,
        render: Raster,
    }
    let frames = (1..=video.frame_count())
        .into_par_iter()
        .map(|j| -> Result<Frame> {
            let pushed = deformation_to_frame(video, &atlas_deformation, j).stage("propagate_deformation")?;
            let (uv, alpha) = deform_uv_and_alpha(video, &pushed.field, j).stage("deform_uv_and_alpha")?;
            let render = layers::render_edited_frame(video, &edited_atlas, &uv, &alpha, j).stage("render")?;
            Ok(Frame {
                d: pushed.field,
                transform: pushed.transform,
                uv,
                alpha,
                render,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let degenerate_fraction: Vec<f64> = frames.iter().map(|f| f.transform.degenerate_fraction()).collect();
    let warnings = degenerate_fraction
        .iter()
        .enumerate()
        .filter(|(_, &f)| f > DEGENERATE_WARNING_FRACTION)
        .map(|(i, f)| format!("frame {}: {:.1}% of pixels have a degenerate Jacobian", i + 1, f * 100.0))
        .collect();
    let mut result = PropagationResult {
        edited_atlas,
        keyframe_deformation,
        atlas_deformation,
        per_frame_deformation: Vec::with_capacity(frames.len()),
        per_frame_uv_t: Vec::with_capacity(frames.len()),
        per_frame_alpha_t: Vec::with_capacity(frames.len()),
        edited_frames: Vec::with_capacity(frames.len()),
        atlas_degenerate_fraction,
        degenerate_fraction,
        warnings,
    };
    for f in frames {
        result.per_frame_deformation.push(f.d);
        result.per_frame_uv_t.push(f.uv);
        result.per_frame_alpha_t.push(f.alpha);
        result.edited_frames.push(f.render);
    }
    Ok(result)
}

/// Frames and mattes rendered with every frame deformation scaled by `t`.
pub fn interpolate_layers(result: &PropagationResult, video: &LayeredVideo, t: f64) -> Result<Vec<(Raster, Raster)>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Argument(format!("interpolation parameter {t} outside [0, 1]")));
    }
    if result.frame_count() != video.frame_count() {
        return Err(Error::Argument(format!(
            "result has {} frames, video has {}",
            result.frame_count(),
            video.frame_count()
        )));
    }
    (1..=video.frame_count())
        .into_par_iter()
        .map(|j| {
            let d = field::scale_deformation(&result.per_frame_deformation[j - 1], t);
            let (uv, alpha) = deform_uv_and_alpha(video, &d, j)?;
            let frame = layers::render_edited_frame(video, &result.edited_atlas, &uv, &alpha, j)?;
            Ok((frame, alpha))
        })
        .collect()
}

/// Shape interpolation between the source (t = 0) and edited (t = 1) shapes.
pub fn interpolate_shape(result: &PropagationResult, video: &LayeredVideo, t: f64) -> Result<Vec<Raster>> {
    Ok(interpolate_layers(result, video, t)?.into_iter().map(|(f, _)| f).collect())
}

/// Mean absolute error of `frame` against `reference` on pixels where
/// `support > 0.5`.
pub fn support_error(frame: &Raster, reference: &Raster, support: &Raster) -> Result<f64> {
    frame.masked_mean_abs_diff(reference, support)
}

/// Max length of a deformation difference over pixels where `mask` holds.
pub fn max_deviation(a: &DeformationField, b: &DeformationField, mask: impl Fn(usize, usize) -> bool) -> f64 {
    let (w, h) = a.dims();
    let mut worst = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            if mask(x, y) {
                worst = worst.max((a.get(x, y) - b.get(x, y)).norm());
            }
        }
    }
    worst
}
