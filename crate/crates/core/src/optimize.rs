//! Atlas refinement.
//!
//! The refined quantities are direct parameters: an appearance residual added
//! to the edited atlas (then clamped), a deformation residual added to the
//! atlas deformation, and offsets on the correspondence control-point
//! destinations. The forward pass re-runs the propagation pipeline on the
//! refined quantities; the backward pass is the hand-derived adjoint of that
//! pipeline, including the dependence of the spline inverse on its samples.
//! An external guidance raster enters as `∂L/∂(rendered frame)`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{self, DeformationField, JacobianField, Vec2};
use crate::layers::{AtlasLayer, EditBundle, LayeredVideo};
use crate::lwf;
use crate::propagate::{self, PropagationResult};
use crate::raster::{Border, Raster};
use crate::tps::{self, Point, ThinPlateSpline};

pub const DEFAULT_STEP: f64 = 1e-2;
/// Control offsets move this many times faster than the residual grids.
pub const OFFSET_STEP_SCALE: f64 = 10.0;
pub const DEFAULT_ITERATIONS: usize = 800;
pub const DEFAULT_FRAME_COUNT: usize = 3;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub keyframe: f64,
    pub tv: f64,
    pub semantic: f64,
}

impl LossWeights {
    /// λ_k, λ_A, λ_SC = 10⁶, 10³, 10³.
    pub const DEFAULT: LossWeights = LossWeights {
        keyframe: 1e6,
        tv: 1e3,
        semantic: 1e3,
    };

    /// Keyframe weight lowered so the mask term can move the control points.
    pub const SHAPE_REFINEMENT: LossWeights = LossWeights {
        keyframe: 1e4,
        tv: 1e3,
        semantic: 1e3,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("keyframe", self.keyframe), ("tv", self.tv), ("semantic", self.semantic)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!("{name} weight must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Component losses of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub keyframe: f64,
    pub tv: f64,
    pub semantic: f64,
}

/// `λ_k L_k + λ_A L_A + λ_SC L_SC`.
pub fn weighted_total(w: &LossWeights, l: &Losses) -> f64 {
    w.keyframe * l.keyframe + w.tv * l.tv + w.semantic * l.semantic
}

/// Mean absolute difference over all pixels and channels.
pub fn loss_keyframe(rendered: &Raster, target: &Raster) -> Result<f64> {
    rendered.mean_abs_diff(target)
}

/// Mean over pixels of the absolute forward differences in x and y, summed
/// over channels.
pub fn loss_tv(atlas: &Raster) -> f64 {
    let (w, h, c) = (atlas.width(), atlas.height(), atlas.channels());
    let d = atlas.data();
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) * c;
            for ch in 0..c {
                if x + 1 < w {
                    sum += (d[i + c + ch] - d[i + ch]).abs();
                }
                if y + 1 < h {
                    sum += (d[i + w * c + ch] - d[i + ch]).abs();
                }
            }
        }
    }
    sum / (w * h).max(1) as f64
}

/// Mean absolute difference between the deformed target mask and the source mask.
pub fn loss_semantic(deformed_target_mask: &Raster, source_mask: &Raster) -> Result<f64> {
    deformed_target_mask.mean_abs_diff(source_mask)
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Accumulates `scale · ∂loss_tv/∂atlas` into `out`.
fn loss_tv_grad(atlas: &Raster, scale: f64, out: &mut Raster) {
    let (w, h, c) = (atlas.width(), atlas.height(), atlas.channels());
    let s = scale / (w * h).max(1) as f64;
    let d = atlas.data();
    let g = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) * c;
            for ch in 0..c {
                if x + 1 < w {
                    let t = s * sign(d[i + c + ch] - d[i + ch]);
                    g[i + c + ch] += t;
                    g[i + ch] -= t;
                }
                if y + 1 < h {
                    let t = s * sign(d[i + w * c + ch] - d[i + ch]);
                    g[i + w * c + ch] += t;
                    g[i + ch] -= t;
                }
            }
        }
    }
}

/// Refinement parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationState {
    pub appearance_residual: Raster,
    pub deformation_residual: DeformationField,
    pub control_offsets: Vec<Vec2>,
    pub weights: LossWeights,
    pub step_size: f64,
    pub iteration: usize,
}

impl OptimizationState {
    pub fn zeros(atlas_size: (usize, usize), controls: usize, weights: LossWeights, step_size: f64) -> Self {
        Self {
            appearance_residual: Raster::zeros(atlas_size.0, atlas_size.1, 3),
            deformation_residual: DeformationField::zeros(atlas_size.0, atlas_size.1),
            control_offsets: vec![Vec2::zeros(); controls],
            weights,
            step_size,
            iteration: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.appearance_residual.data().iter().all(|v| v.is_finite())
            && self.deformation_residual.is_finite()
            && self.control_offsets.iter().all(|v| v.x.is_finite() && v.y.is_finite())
    }
}

/// Gradient of the objective with respect to every parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGradient {
    pub appearance: Raster,
    pub deformation: DeformationField,
    pub offsets: Vec<Vec2>,
}

impl StateGradient {
    pub fn norm(&self) -> f64 {
        let a: f64 = self.appearance.data().iter().map(|v| v * v).sum();
        let d: f64 = self.deformation.values().iter().map(|v| v.norm_squared()).sum();
        let o: f64 = self.offsets.iter().map(|v| v.norm_squared()).sum();
        (a + d + o).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.appearance.data().iter().all(|v| v.is_finite())
            && self.deformation.is_finite()
            && self.offsets.iter().all(|v| v.x.is_finite() && v.y.is_finite())
    }
}

/// Source of the injected per-pixel gradient on rendered frames.
pub trait GuidanceProvider: Send + Sync {
    /// Gradient raster for `rendered` (frame `frame`, 1-based), same shape.
    fn gradient(&self, rendered: &Raster, frame: usize) -> Result<Raster>;
}

/// Calls the provider and enforces its output contract.
pub fn query_guidance(provider: &dyn GuidanceProvider, rendered: &Raster, frame: usize) -> Result<Raster> {
    let g = provider.gradient(rendered, frame)?;
    if !g.same_shape(rendered) {
        return Err(Error::Contract(format!(
            "guidance for frame {frame} has shape {}x{}x{}, expected {}x{}x{}",
            g.width(),
            g.height(),
            g.channels(),
            rendered.width(),
            rendered.height(),
            rendered.channels()
        )));
    }
    if g.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract(format!("guidance for frame {frame} has non-finite values")));
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroGuidance;

impl GuidanceProvider for ZeroGuidance {
    fn gradient(&self, rendered: &Raster, _frame: usize) -> Result<Raster> {
        Ok(Raster::zeros(rendered.width(), rendered.height(), rendered.channels()))
    }
}

/// Pulls rendered frames toward references: returns `rendered − reference`,
/// the gradient of `½‖rendered − reference‖²`.
#[derive(Debug, Clone)]
pub struct TargetImageGuidance {
    references: BTreeMap<usize, Raster>,
}

pub fn guidance_target_image(references: impl IntoIterator<Item = (usize, Raster)>) -> TargetImageGuidance {
    TargetImageGuidance {
        references: references.into_iter().collect(),
    }
}

impl TargetImageGuidance {
    pub fn reference(&self, frame: usize) -> Option<&Raster> {
        self.references.get(&frame)
    }
}

impl GuidanceProvider for TargetImageGuidance {
    fn gradient(&self, rendered: &Raster, frame: usize) -> Result<Raster> {
        let r = self
            .references
            .get(&frame)
            .ok_or_else(|| Error::Contract(format!("no reference image for frame {frame}")))?;
        if !r.same_shape(rendered) {
            return Err(Error::Contract(format!("reference for frame {frame} does not match the render shape")));
        }
        let data = rendered.data().iter().zip(r.data()).map(|(a, b)| a - b).collect();
        Raster::from_vec(rendered.width(), rendered.height(), rendered.channels(), data)
    }
}

/// Fixed gradient rasters per frame, independent of the render.
#[derive(Debug, Clone)]
pub struct ConstantGuidance {
    rasters: BTreeMap<usize, Raster>,
}

impl ConstantGuidance {
    pub fn new(rasters: impl IntoIterator<Item = (usize, Raster)>) -> Self {
        Self {
            rasters: rasters.into_iter().collect(),
        }
    }
}

impl GuidanceProvider for ConstantGuidance {
    fn gradient(&self, rendered: &Raster, frame: usize) -> Result<Raster> {
        Ok(self
            .rasters
            .get(&frame)
            .cloned()
            .unwrap_or_else(|| Raster::zeros(rendered.width(), rendered.height(), rendered.channels())))
    }
}

/// Header carrying the 1-based frame index on guidance requests.
pub const FRAME_INDEX_HEADER: &str = "X-Frame-Index";
pub const SEED_HEADER: &str = "X-Seed";

/// Round-trips frames to an external process: `POST {base}/guidance` with
/// an LWF1 body, expecting an LWF1 gradient of the same shape back.
pub struct HttpGuidance {
    endpoint: String,
    agent: ureq::Agent,
    seed: u64,
}

impl HttpGuidance {
    pub fn new(base_url: &str, timeout: Duration, seed: u64) -> Self {
        let base = base_url.trim_end_matches('/');
        let endpoint = if base.ends_with("/guidance") {
            base.to_string()
        } else {
            format!("{base}/guidance")
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { endpoint, agent, seed }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl GuidanceProvider for HttpGuidance {
    fn gradient(&self, rendered: &Raster, frame: usize) -> Result<Raster> {
        let fail = |detail: String| Error::Contract(format!("guidance request to {} failed: {detail}", self.endpoint));
        let body = lwf::encode(rendered, None);
        let response = self
            .agent
            .post(&self.endpoint)
            .header(FRAME_INDEX_HEADER, frame.to_string())
            .header(SEED_HEADER, self.seed.to_string())
            .header("Content-Type", "application/octet-stream")
            .send(&body[..])
            .map_err(|e| fail(e.to_string()))?;
        let bytes = response
            .into_body()
            .with_config()
            .limit(1 << 30)
            .read_to_vec()
            .map_err(|e| fail(e.to_string()))?;
        let grid = lwf::decode(&bytes).map_err(|e| fail(e.to_string()))?;
        Ok(grid.raster)
    }
}

/// Evenly spread frame selection that always contains the first frame, the
/// keyframe and the last frame.
pub fn select_frames(n: usize, k: usize, count: usize) -> Vec<usize> {
    let mut set: BTreeSet<usize> = [1, k, n].into_iter().collect();
    let count = count.clamp(set.len(), n);
    if count > 1 {
        for i in 0..count {
            if set.len() >= count {
                break;
            }
            let j = 1 + ((i * (n - 1)) as f64 / (count - 1) as f64).round() as usize;
            set.insert(j);
        }
    }
    let mut j = 1;
    while set.len() < count {
        set.insert(j);
        j += 1;
    }
    set.into_iter().collect()
}

struct FrameSetup {
    j: usize,
    transform: JacobianField,
    samples: Vec<(usize, usize)>,
    uv: Raster,
    bg: Raster,
}

/// Everything about a refinement problem that does not depend on the state.
pub struct Problem<'a> {
    video: &'a LayeredVideo,
    bundle: &'a EditBundle,
    base_atlas: AtlasLayer,
    atlas_transform: JacobianField,
    frames: Vec<usize>,
    setups: Vec<FrameSetup>,
    pixels: Vec<Point>,
}

/// Output of one objective evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub losses: Losses,
    /// λ-weighted total, excluding the guidance term.
    pub total: f64,
    pub gradient: StateGradient,
    /// Rendered frames in ascending frame order (guidance frames plus the keyframe).
    pub renders: Vec<(usize, Raster)>,
    /// Target mask pulled back through the refined correspondence.
    pub deformed_target_mask: Raster,
}

struct FrameOutput {
    j: usize,
    render: Raster,
    g_atlas: Raster,
    g_deform: Raster,
}

impl<'a> Problem<'a> {
    /// `frames` are the guidance frames; the keyframe is always rendered for
    /// the keyframe loss.
    pub fn new(video: &'a LayeredVideo, bundle: &'a EditBundle, frames: &[usize]) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Argument("no frames selected".into()));
        }
        for &j in frames {
            video.check_frame(j)?;
        }
        if bundle.keyframe_index != video.keyframe_index() || bundle.frame_size() != video.frame_size() {
            return Err(Error::Argument("edit bundle does not match the video".into()));
        }
        let warped = propagate::warp_edit_to_source(bundle)?;
        let base_atlas = propagate::build_edited_atlas(video, &warped)?;
        let f2a = video.uv_frame_to_atlas(video.keyframe_index())?;
        let atlas_transform = field::invert_jacobians(&field::jacobian_of_field(
            f2a,
            propagate::JACOBIAN_STEP,
            propagate::JACOBIAN_STEP,
        )?);
        let frames: Vec<usize> = frames.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let mut rendered: BTreeSet<usize> = frames.iter().copied().collect();
        rendered.insert(video.keyframe_index());
        let setups = rendered
            .into_iter()
            .map(|j| {
                let a2f = video.uv_atlas_to_frame(j)?;
                Ok(FrameSetup {
                    j,
                    transform: field::invert_jacobians(&field::jacobian_of_field(
                        a2f,
                        propagate::JACOBIAN_STEP,
                        propagate::JACOBIAN_STEP,
                    )?),
                    samples: propagate::inversion_samples(video.alpha(j)?),
                    uv: a2f.to_raster(),
                    bg: field::sample(a2f, video.bg_atlas().image(), Border::Clamp)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (w, h) = video.frame_size();
        let pixels = (0..w * h).map(|i| Point::new((i % w) as f64, (i / w) as f64)).collect();
        Ok(Self {
            video,
            bundle,
            base_atlas,
            atlas_transform,
            frames,
            setups,
            pixels,
        })
    }

    pub fn frames(&self) -> &[usize] {
        &self.frames
    }

    pub fn base_atlas(&self) -> &AtlasLayer {
        &self.base_atlas
    }

    pub fn initial_state(&self, weights: LossWeights, step_size: f64) -> OptimizationState {
        OptimizationState::zeros(self.video.atlas_size(), self.bundle.correspondence.len(), weights, step_size)
    }

    /// Correspondence with destinations moved by the state's offsets.
    pub fn correspondence(&self, state: &OptimizationState) -> Result<ThinPlateSpline> {
        let base = &self.bundle.correspondence;
        if state.control_offsets.len() != base.len() {
            return Err(Error::Argument(format!(
                "{} control offsets for {} control points",
                state.control_offsets.len(),
                base.len()
            )));
        }
        if state.control_offsets.iter().all(|o| o.x == 0.0 && o.y == 0.0) {
            return Ok(base.clone());
        }
        let dst: Vec<Point> = base
            .control_points_dst()
            .iter()
            .zip(&state.control_offsets)
            .map(|(d, o)| d + o)
            .collect();
        base.with_dst(&dst)
    }

    /// Refined atlas `clamp(I_A + residual)`.
    pub fn refined_atlas(&self, state: &OptimizationState) -> Result<AtlasLayer> {
        let base = self.base_atlas.image();
        base.check_same_shape(&state.appearance_residual, "appearance residual")?;
        let data = base
            .data()
            .iter()
            .zip(state.appearance_residual.data())
            .map(|(a, r)| (a + r).clamp(0.0, 1.0))
            .collect();
        AtlasLayer::new(
            Raster::from_vec(base.width(), base.height(), 3, data)?,
            self.base_atlas.coverage().to_vec(),
        )
    }

    fn atlas_deformation(&self, d_k: &DeformationField, state: &OptimizationState) -> Result<DeformationField> {
        if state.deformation_residual.dims() != self.video.atlas_size() {
            return Err(Error::Dimension {
                what: "deformation residual",
                expected: self.video.atlas_size(),
                actual: state.deformation_residual.dims(),
            });
        }
        let f2a = self.video.uv_frame_to_atlas(self.video.keyframe_index())?;
        let mut d_a = field::transform_vectors(&self.atlas_transform, &field::sample_vectors(f2a, d_k, Border::Clamp))?;
        for (v, r) in d_a.values_mut().iter_mut().zip(state.deformation_residual.values()) {
            *v += r;
        }
        Ok(d_a)
    }

    /// Objective value and gradient at `state`.
    pub fn evaluate(&self, state: &OptimizationState, guidance: &dyn GuidanceProvider) -> Result<Evaluation> {
        let weights = state.weights;
        weights.validate()?;
        let video = self.video;
        let k = video.keyframe_index();
        let (w, h) = video.frame_size();
        let (aw, ah) = video.atlas_size();

        let corr = self.correspondence(state)?;
        let corr_field = tps::tps_to_field(&corr, w, h)?;
        let d_k = corr_field.to_deformation();
        let d_a = self.atlas_deformation(&d_k, state)?;
        let atlas = self.refined_atlas(state)?;
        let atlas_img = atlas.image();

        let outputs = self
            .setups
            .par_iter()
            .map(|s| self.frame_pass(s, &d_a, atlas_img, weights, guidance))
            .collect::<Result<Vec<_>>>()?;

        // Reduce per-frame contributions in frame order.
        let mut g_atlas = Raster::zeros(aw, ah, 3);
        let mut g_deform = Raster::zeros(aw, ah, 2);
        let mut l_k = 0.0;
        let mut renders = Vec::with_capacity(outputs.len());
        for out in outputs {
            for (a, b) in g_atlas.data_mut().iter_mut().zip(out.g_atlas.data()) {
                *a += b;
            }
            for (a, b) in g_deform.data_mut().iter_mut().zip(out.g_deform.data()) {
                *a += b;
            }
            if out.j == k {
                l_k = loss_keyframe(&out.render, &self.bundle.edited_keyframe)?;
            }
            renders.push((out.j, out.render));
        }

        // Atlas smoothness, then the clamp.
        let l_a = loss_tv(atlas_img);
        loss_tv_grad(atlas_img, weights.tv, &mut g_atlas);
        let base = self.base_atlas.image().data();
        for ((g, b), r) in g_atlas
            .data_mut()
            .iter_mut()
            .zip(base)
            .zip(state.appearance_residual.data())
        {
            let raw = b + r;
            if !(0.0..=1.0).contains(&raw) {
                *g = 0.0;
            }
        }

        // Stage 1 adjoint: atlas grid back to the keyframe grid.
        let g_deform = DeformationField::from_raster(&g_deform)?;
        let f2a = video.uv_frame_to_atlas(k)?;
        let mut g_dk = Raster::zeros(w, h, 2);
        for y in 0..ah {
            for x in 0..aw {
                let g = g_deform.get(x, y);
                if g.x == 0.0 && g.y == 0.0 {
                    continue;
                }
                let v = self.atlas_transform.get(x, y).transpose() * g;
                let p = f2a.get(x, y);
                g_dk.splat_add(p.x, p.y, Border::Clamp, &[v.x, v.y]);
            }
        }

        // Semantic loss on the keyframe grid.
        let tm = &self.bundle.target_mask;
        let sm = &self.bundle.source_mask;
        let n_px = (w * h) as f64;
        let mut deformed = Raster::zeros(w, h, 1);
        let mut l_sc = 0.0;
        let mut upstream = Vec::with_capacity(w * h);
        for (i, q) in corr_field.values().iter().enumerate() {
            let (mut v, mut dx, mut dy) = ([0.0], [0.0], [0.0]);
            tm.sample_with_grad(q.x, q.y, Border::Zero, &mut v, &mut dx, &mut dy);
            deformed.data_mut()[i] = v[0];
            let r = v[0] - sm.data()[i];
            l_sc += r.abs();
            let s = weights.semantic * sign(r) / n_px;
            let gk = Vec2::new(g_dk.data()[2 * i], g_dk.data()[2 * i + 1]);
            upstream.push(gk + Vec2::new(s * dx[0], s * dy[0]));
        }
        l_sc /= n_px;
        let offsets = corr.backward(&self.pixels, &upstream)?.d_dst;

        let losses = Losses {
            keyframe: l_k,
            tv: l_a,
            semantic: l_sc,
        };
        Ok(Evaluation {
            losses,
            total: weighted_total(&weights, &losses),
            gradient: StateGradient {
                appearance: g_atlas,
                deformation: g_deform,
                offsets,
            },
            renders,
            deformed_target_mask: deformed,
        })
    }

    /// Forward and adjoint for one rendered frame.
    fn frame_pass(
        &self,
        setup: &FrameSetup,
        d_a: &DeformationField,
        atlas: &Raster,
        weights: LossWeights,
        guidance: &dyn GuidanceProvider,
    ) -> Result<FrameOutput> {
        let video = self.video;
        let j = setup.j;
        let a2f = video.uv_atlas_to_frame(j)?;
        let alpha = video.alpha(j)?;
        let (w, h) = video.frame_size();
        let (aw, ah) = video.atlas_size();

        let d_j = field::transform_vectors(&setup.transform, &field::sample_vectors(a2f, d_a, Border::Clamp))?;
        let inv = propagate::invert_frame_deformation(&d_j, &setup.samples)?;

        struct Px {
            uv: [f64; 2],
            duv_dx: [f64; 2],
            duv_dy: [f64; 2],
            alpha: f64,
            alpha_raw: f64,
            da: [f64; 2],
            fg: [f64; 3],
            dfg_dx: [f64; 3],
            dfg_dy: [f64; 3],
        }
        let px: Vec<Px> = self
            .pixels
            .par_iter()
            .map(|p| {
                let s = inv.eval(*p);
                let (mut uv, mut duv_dx, mut duv_dy) = ([0.0; 2], [0.0; 2], [0.0; 2]);
                setup.uv.sample_with_grad(s.x, s.y, Border::Clamp, &mut uv, &mut duv_dx, &mut duv_dy);
                let (mut a, mut ax, mut ay) = ([0.0], [0.0], [0.0]);
                alpha.sample_with_grad(s.x, s.y, Border::Zero, &mut a, &mut ax, &mut ay);
                let (mut fg, mut fx, mut fy) = ([0.0; 3], [0.0; 3], [0.0; 3]);
                atlas.sample_with_grad(uv[0], uv[1], Border::Clamp, &mut fg, &mut fx, &mut fy);
                Px {
                    uv,
                    duv_dx,
                    duv_dy,
                    alpha: a[0].clamp(0.0, 1.0),
                    alpha_raw: a[0],
                    da: [ax[0], ay[0]],
                    fg,
                    dfg_dx: fx,
                    dfg_dy: fy,
                }
            })
            .collect();

        let mut render = Raster::zeros(w, h, 3);
        for (i, q) in px.iter().enumerate() {
            let bg = &setup.bg.data()[3 * i..3 * i + 3];
            for (out, (f, b)) in render.data_mut()[3 * i..3 * i + 3].iter_mut().zip(q.fg.iter().zip(bg)) {
                *out = f * q.alpha + b * (1.0 - q.alpha);
            }
        }

        // ∂L/∂render: keyframe loss plus injected guidance.
        let mut g_r = Raster::zeros(w, h, 3);
        if j == video.keyframe_index() {
            let target = &self.bundle.edited_keyframe;
            let s = weights.keyframe / (w * h * 3) as f64;
            for ((g, r), t) in g_r.data_mut().iter_mut().zip(render.data()).zip(target.data()) {
                *g += s * sign(r - t);
            }
        }
        if self.frames.contains(&j) {
            let g = query_guidance(guidance, &render, j)?;
            for (a, b) in g_r.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }

        let mut g_atlas = Raster::zeros(aw, ah, 3);
        let mut g_s = vec![Point::zeros(); w * h];
        for (i, q) in px.iter().enumerate() {
            let gr = &g_r.data()[3 * i..3 * i + 3];
            if gr.iter().all(|v| *v == 0.0) {
                continue;
            }
            let bg = &setup.bg.data()[3 * i..3 * i + 3];
            let mut g_alpha = 0.0;
            let mut g_fg = [0.0; 3];
            for c in 0..3 {
                g_alpha += gr[c] * (q.fg[c] - bg[c]);
                g_fg[c] = gr[c] * q.alpha;
            }
            if !(0.0..=1.0).contains(&q.alpha_raw) {
                g_alpha = 0.0;
            }
            g_atlas.splat_add(q.uv[0], q.uv[1], Border::Clamp, &g_fg);
            let mut g_uv = [0.0; 2];
            for ((g, dx), dy) in g_fg.iter().zip(&q.dfg_dx).zip(&q.dfg_dy) {
                g_uv[0] += g * dx;
                g_uv[1] += g * dy;
            }
            g_s[i] = Point::new(
                g_uv[0] * q.duv_dx[0] + g_uv[1] * q.duv_dx[1] + g_alpha * q.da[0],
                g_uv[0] * q.duv_dy[0] + g_uv[1] * q.duv_dy[1] + g_alpha * q.da[1],
            );
        }

        // Through the spline inverse: sources are p + d_j(p) at the samples.
        let g_src = inv.backward(&self.pixels, &g_s)?.d_src;
        let mut g_deform = Raster::zeros(aw, ah, 2);
        for (&(x, y), g) in setup.samples.iter().zip(&g_src) {
            let v = setup.transform.get(x, y).transpose() * g;
            let a = a2f.get(x, y);
            g_deform.splat_add(a.x, a.y, Border::Clamp, &[v.x, v.y]);
        }
        Ok(FrameOutput {
            j,
            render,
            g_atlas,
            g_deform,
        })
    }

    /// Full propagation output for a state: every frame rendered with the
    /// refined atlas, atlas deformation and correspondence.
    pub fn render_state(&self, state: &OptimizationState) -> Result<PropagationResult> {
        let (w, h) = self.video.frame_size();
        let corr = self.correspondence(state)?;
        let d_k = propagate::tps_deformation(&corr, (w, h))?;
        let d_a = self.atlas_deformation(&d_k, state)?;
        let atlas = self.refined_atlas(state)?;
        propagate::finish(self.video, atlas, d_k, d_a, self.atlas_transform.degenerate_fraction())
    }
}

/// First/second-moment adaptive step over a flat parameter vector.
#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, t: usize, lr: f64, params: &mut [f64], grads: &[f64]) {
        let t = t as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPSILON);
        }
    }
}

/// One row of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub l_k: f64,
    pub l_a: f64,
    pub l_sc: f64,
    pub total: f64,
}

impl LossRecord {
    fn new(iteration: usize, e: &Evaluation) -> Self {
        Self {
            iteration,
            l_k: e.losses.keyframe,
            l_a: e.losses.tv,
            l_sc: e.losses.semantic,
            total: e.total,
        }
    }
}

/// Result of [`optimize`].
#[derive(Debug, Clone)]
pub struct OptimizationRun {
    pub state: OptimizationState,
    /// Losses at the start of each iteration.
    pub trace: Vec<LossRecord>,
    /// Losses at the returned state (absent when no iteration ran).
    pub final_losses: Option<LossRecord>,
}

impl OptimizationRun {
    /// Trace rows followed by the final evaluation.
    pub fn records(&self) -> Vec<LossRecord> {
        self.trace.iter().copied().chain(self.final_losses).collect()
    }
}

pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("iteration,L_k,L_A,L_SC,total\n");
    for r in records {
        text.push_str(&format!("{},{:e},{:e},{:e},{:e}\n", r.iteration, r.l_k, r.l_a, r.l_sc, r.total));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Runs `iterations` adaptive-moment steps from `state`.
pub fn optimize_from(
    problem: &Problem<'_>,
    mut state: OptimizationState,
    guidance: &dyn GuidanceProvider,
    iterations: usize,
) -> Result<OptimizationRun> {
    state.weights.validate()?;
    if !(state.step_size > 0.0 && state.step_size.is_finite()) {
        return Err(Error::Argument(format!("step size must be positive, got {}", state.step_size)));
    }
    let mut trace = Vec::with_capacity(iterations);
    if iterations == 0 {
        return Ok(OptimizationRun {
            state,
            trace,
            final_losses: None,
        });
    }
    let mut adam_a = Adam::new(state.appearance_residual.data().len());
    let mut adam_d = Adam::new(state.deformation_residual.values().len() * 2);
    let mut adam_o = Adam::new(state.control_offsets.len() * 2);
    for _ in 0..iterations {
        let it = state.iteration;
        let eval = problem.evaluate(&state, guidance).map_err(|e| divergence_or(e, it))?;
        if !eval.total.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                detail: format!("objective is {}", eval.total),
            });
        }
        if !eval.gradient.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                detail: "gradient has non-finite entries".into(),
            });
        }
        trace.push(LossRecord::new(it, &eval));
        let t = it + 1;
        let lr = state.step_size;
        adam_a.step(t, lr, state.appearance_residual.data_mut(), eval.gradient.appearance.data());
        let mut flat: Vec<f64> = state.deformation_residual.values().iter().flat_map(|v| [v.x, v.y]).collect();
        let grad: Vec<f64> = eval.gradient.deformation.values().iter().flat_map(|v| [v.x, v.y]).collect();
        adam_d.step(t, lr, &mut flat, &grad);
        for (v, c) in state.deformation_residual.values_mut().iter_mut().zip(flat.chunks_exact(2)) {
            *v = Vec2::new(c[0], c[1]);
        }
        let mut flat: Vec<f64> = state.control_offsets.iter().flat_map(|v| [v.x, v.y]).collect();
        let grad: Vec<f64> = eval.gradient.offsets.iter().flat_map(|v| [v.x, v.y]).collect();
        adam_o.step(t, lr * OFFSET_STEP_SCALE, &mut flat, &grad);
        for (v, c) in state.control_offsets.iter_mut().zip(flat.chunks_exact(2)) {
            *v = Vec2::new(c[0], c[1]);
        }
        state.iteration = t;
        if !state.is_finite() {
            return Err(Error::Divergence {
                iteration: t,
                detail: "parameters became non-finite".into(),
            });
        }
    }
    let last = problem.evaluate(&state, guidance).map_err(|e| divergence_or(e, state.iteration))?;
    if !last.total.is_finite() {
        return Err(Error::Divergence {
            iteration: state.iteration,
            detail: format!("objective is {}", last.total),
        });
    }
    Ok(OptimizationRun {
        final_losses: Some(LossRecord::new(state.iteration, &last)),
        state,
        trace,
    })
}

/// A spline that can no longer be fitted mid-run is a divergence.
fn divergence_or(e: Error, iteration: usize) -> Error {
    match e {
        Error::Degenerate(d) | Error::Solver(d) => Error::Divergence { iteration, detail: d },
        other => other,
    }
}

/// Refines from the zero state with the default loss weights.
pub fn optimize(
    video: &LayeredVideo,
    bundle: &EditBundle,
    frames: &[usize],
    guidance: &dyn GuidanceProvider,
    iterations: usize,
    step_size: f64,
) -> Result<OptimizationRun> {
    let problem = Problem::new(video, bundle, frames)?;
    let state = problem.initial_state(LossWeights::DEFAULT, step_size);
    optimize_from(&problem, state, guidance, iterations)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyframe_loss_examples() {
        let a = Raster::filled(4, 4, 3, 0.3);
        assert_eq!(loss_keyframe(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.02);
        assert!((loss_keyframe(&b, &a).unwrap() - 0.02).abs() < 1e-12);
        let half = Raster::from_fn(4, 4, 3, |x, _, o| o.fill(if x < 2 { 0.4 } else { 0.3 }));
        assert!((loss_keyframe(&half, &a).unwrap() - 0.05).abs() < 1e-12);
        assert!(loss_keyframe(&a, &Raster::zeros(3, 4, 3)).is_err());
    }

    #[test]
    fn tv_examples() {
        assert_eq!(loss_tv(&Raster::filled(5, 3, 3, 0.7)), 0.0);
        let r = Raster::from_vec(2, 1, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(loss_tv(&r), 0.5);
        let step = Raster::from_fn(6, 4, 1, |_, y, o| o[0] = if y < 2 { 0.0 } else { 1.0 });
        let transposed = Raster::from_fn(4, 6, 1, |x, _, o| o[0] = if x < 2 { 0.0 } else { 1.0 });
        assert_eq!(loss_tv(&step), loss_tv(&transposed));
    }

    #[test]
    fn semantic_loss_examples() {
        let a = Raster::from_fn(4, 4, 1, |x, y, o| o[0] = if x < 2 && y < 2 { 1.0 } else { 0.0 });
        let b = Raster::from_fn(4, 4, 1, |x, y, o| o[0] = if x >= 2 && y >= 2 { 1.0 } else { 0.0 });
        assert_eq!(loss_semantic(&a, &a).unwrap(), 0.0);
        assert_eq!(loss_semantic(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn weighting_matches_hand_arithmetic() {
        let l = Losses {
            keyframe: 0.01,
            tv: 0.002,
            semantic: 0.003,
        };
        assert_eq!(weighted_total(&LossWeights::DEFAULT, &l), 10005.0);
    }

    #[test]
    fn tv_gradient_matches_differences() {
        let r = Raster::from_fn(5, 4, 2, |x, y, o| {
            o[0] = ((x * 7 + y * 3) % 5) as f64 * 0.13 + 0.01 * x as f64;
            o[1] = ((x + 2 * y) % 3) as f64 * 0.21 + 0.003 * y as f64;
        });
        let mut g = Raster::zeros(5, 4, 2);
        loss_tv_grad(&r, 1.0, &mut g);
        let h = 1e-7;
        for i in 0..r.data().len() {
            let mut p = r.clone();
            p.data_mut()[i] += h;
            let mut m = r.clone();
            m.data_mut()[i] -= h;
            let fd = (loss_tv(&p) - loss_tv(&m)) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-6, "{i}: {fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn frame_selection_spreads_and_keeps_anchors() {
        assert_eq!(select_frames(8, 4, 3), vec![1, 4, 8]);
        assert_eq!(select_frames(8, 1, 3), vec![1, 5, 8]);
        let five = select_frames(8, 4, 5);
        assert_eq!(five.len(), 5);
        assert!(five.contains(&1) && five.contains(&4) && five.contains(&8));
        assert_eq!(select_frames(2, 2, 3), vec![1, 2]);
        assert_eq!(select_frames(8, 4, 100).len(), 8);
    }

    #[test]
    fn guidance_contract() {
        let r = Raster::filled(3, 2, 3, 0.5);
        let target = guidance_target_image([(1, r.clone())]);
        assert!(query_guidance(&target, &r, 1).unwrap().data().iter().all(|v| *v == 0.0));
        let up = r.map(|v| v + 0.1);
        let g = query_guidance(&target, &up, 1).unwrap();
        assert!(g.data().iter().all(|v| (v - 0.1).abs() < 1e-12));
        assert!(matches!(query_guidance(&target, &r, 2), Err(Error::Contract(_))));
        let wrong = ConstantGuidance::new([(1, Raster::zeros(2, 2, 3))]);
        assert!(matches!(query_guidance(&wrong, &r, 1), Err(Error::Contract(_))));
        let nan = ConstantGuidance::new([(1, Raster::filled(3, 2, 3, f64::NAN))]);
        assert!(matches!(query_guidance(&nan, &r, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_http_guidance_is_a_contract_error() {
        let g = HttpGuidance::new("http://127.0.0.1:1", Duration::from_millis(500), 0);
        assert_eq!(g.endpoint(), "http://127.0.0.1:1/guidance");
        let r = Raster::zeros(2, 2, 3);
        assert!(matches!(g.gradient(&r, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn adam_first_step_has_step_size_magnitude() {
        let mut a = Adam::new(2);
        let mut p = [1.0, -1.0];
        a.step(1, 0.1, &mut p, &[5.0, -0.001]);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-4);
    }
}
