//! Layered video model: atlases, per-frame UV fields and alpha, plus the
//! rendering and back-projection operators.
//!
//! Frame indices are 1-based throughout the public API.

use crate::error::{Error, Result};
use crate::field::{self, SamplingField, Vec2};
use crate::raster::{Border, Raster};
use crate::tps::{self, ThinPlateSpline};

/// Threshold separating foreground support from background in alpha mattes.
pub const FG_THRESHOLD: f64 = 0.5;

/// Bidirectional UV consistency tolerance on the foreground support, in pixels.
pub const UV_CONSISTENCY_TOLERANCE: f64 = 0.5;

/// One canonical layer: RGB image in [0, 1] plus a coverage flag per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasLayer {
    image: Raster,
    coverage: Vec<bool>,
}

impl AtlasLayer {
    pub fn new(image: Raster, coverage: Vec<bool>) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::Argument(format!(
                "atlas must be RGB, got {} channels",
                image.channels()
            )));
        }
        if coverage.len() != image.width() * image.height() {
            return Err(Error::Argument("coverage does not match atlas size".into()));
        }
        if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!("atlas value {v} outside [0, 1]")));
        }
        Ok(Self { image, coverage })
    }

    /// Fully covered layer.
    pub fn complete(image: Raster) -> Result<Self> {
        let n = image.width() * image.height();
        Self::new(image, vec![true; n])
    }

    pub fn image(&self) -> &Raster {
        &self.image
    }

    pub fn coverage(&self) -> &[bool] {
        &self.coverage
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }

    pub fn coverage_fraction(&self) -> f64 {
        self.coverage.iter().filter(|c| **c).count() as f64 / self.coverage.len().max(1) as f64
    }

    pub fn is_complete(&self) -> bool {
        self.coverage.iter().all(|c| *c)
    }

    /// Coverage as a single-channel 0/1 raster.
    pub fn coverage_raster(&self) -> Raster {
        let data = self.coverage.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
        Raster::from_vec(self.width(), self.height(), 1, data).expect("shape is consistent")
    }
}

/// Foreground/background layered decomposition of a video.
#[derive(Debug, Clone)]
pub struct LayeredVideo {
    fg_atlas: AtlasLayer,
    bg_atlas: AtlasLayer,
    frame_size: (usize, usize),
    uv_atlas_to_frame: Vec<SamplingField>,
    uv_frame_to_atlas: Vec<SamplingField>,
    alpha: Vec<Raster>,
    keyframe_index: usize,
}

impl LayeredVideo {
    pub fn new(
        fg_atlas: AtlasLayer,
        bg_atlas: AtlasLayer,
        frame_size: (usize, usize),
        uv_atlas_to_frame: Vec<SamplingField>,
        uv_frame_to_atlas: Vec<SamplingField>,
        alpha: Vec<Raster>,
        keyframe_index: usize,
    ) -> Result<Self> {
        let n = alpha.len();
        if n < 2 {
            return Err(Error::Argument(format!("need at least 2 frames, got {n}")));
        }
        if uv_atlas_to_frame.len() != n || uv_frame_to_atlas.len() != n {
            return Err(Error::Argument(format!(
                "{n} alpha mattes but {} atlas→frame and {} frame→atlas fields",
                uv_atlas_to_frame.len(),
                uv_frame_to_atlas.len()
            )));
        }
        if !(1..=n).contains(&keyframe_index) {
            return Err(Error::Argument(format!("keyframe index {keyframe_index} outside 1..={n}")));
        }
        if !bg_atlas.is_complete() {
            return Err(Error::Argument("background atlas must be fully covered".into()));
        }
        for (j, ((a2f, f2a), a)) in uv_atlas_to_frame.iter().zip(&uv_frame_to_atlas).zip(&alpha).enumerate() {
            if a2f.dims() != frame_size || a.dims() != frame_size || a.channels() != 1 {
                return Err(Error::Dimension {
                    what: "frame grid (atlas→frame UV / alpha)",
                    expected: frame_size,
                    actual: if a2f.dims() != frame_size { a2f.dims() } else { a.dims() },
                });
            }
            if f2a.dims() != fg_atlas.dims() {
                return Err(Error::Dimension {
                    what: "frame→atlas UV",
                    expected: fg_atlas.dims(),
                    actual: f2a.dims(),
                });
            }
            if !a2f.is_finite() || !f2a.is_finite() {
                return Err(Error::Argument(format!("frame {}: non-finite UV values", j + 1)));
            }
            if a.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Argument(format!("frame {}: alpha outside [0, 1]", j + 1)));
            }
        }
        let video = Self {
            fg_atlas,
            bg_atlas,
            frame_size,
            uv_atlas_to_frame,
            uv_frame_to_atlas,
            alpha,
            keyframe_index,
        };
        for j in 1..=n {
            let err = video.bidirectional_error(j)?;
            if err > UV_CONSISTENCY_TOLERANCE {
                return Err(Error::Argument(format!(
                    "frame {j}: UV round trip error {err:.3} px exceeds {UV_CONSISTENCY_TOLERANCE} px on the foreground"
                )));
            }
        }
        Ok(video)
    }

    pub fn frame_count(&self) -> usize {
        self.alpha.len()
    }

    pub fn frame_size(&self) -> (usize, usize) {
        self.frame_size
    }

    pub fn keyframe_index(&self) -> usize {
        self.keyframe_index
    }

    pub fn fg_atlas(&self) -> &AtlasLayer {
        &self.fg_atlas
    }

    pub fn bg_atlas(&self) -> &AtlasLayer {
        &self.bg_atlas
    }

    pub fn atlas_size(&self) -> (usize, usize) {
        self.fg_atlas.dims()
    }

    pub fn check_frame(&self, j: usize) -> Result<usize> {
        if (1..=self.frame_count()).contains(&j) {
            Ok(j - 1)
        } else {
            Err(Error::Argument(format!(
                "frame index {j} outside 1..={}",
                self.frame_count()
            )))
        }
    }

    pub fn uv_atlas_to_frame(&self, j: usize) -> Result<&SamplingField> {
        Ok(&self.uv_atlas_to_frame[self.check_frame(j)?])
    }

    pub fn uv_frame_to_atlas(&self, j: usize) -> Result<&SamplingField> {
        Ok(&self.uv_frame_to_atlas[self.check_frame(j)?])
    }

    pub fn alpha(&self, j: usize) -> Result<&Raster> {
        Ok(&self.alpha[self.check_frame(j)?])
    }

    /// Same video with a different keyframe.
    pub fn with_keyframe(&self, k: usize) -> Result<Self> {
        self.check_frame(k)?;
        Ok(Self {
            keyframe_index: k,
            ..self.clone()
        })
    }

    /// Same video with a replaced foreground atlas.
    pub fn with_fg_atlas(&self, fg: AtlasLayer) -> Result<Self> {
        if fg.dims() != self.fg_atlas.dims() {
            return Err(Error::Dimension {
                what: "replacement foreground atlas",
                expected: self.fg_atlas.dims(),
                actual: fg.dims(),
            });
        }
        Ok(Self {
            fg_atlas: fg,
            ..self.clone()
        })
    }

    /// Max `‖f2a(a2f(p)) − p‖` over frame pixels with alpha above the
    /// foreground threshold (0 when the frame has no foreground).
    pub fn bidirectional_error(&self, j: usize) -> Result<f64> {
        let i = self.check_frame(j)?;
        let a2f = &self.uv_atlas_to_frame[i];
        let f2a = &self.uv_frame_to_atlas[i];
        let alpha = &self.alpha[i];
        let mut worst = 0.0f64;
        for y in 0..self.frame_size.1 {
            for x in 0..self.frame_size.0 {
                if alpha.get(x, y, 0) > FG_THRESHOLD {
                    let a = a2f.get(x, y);
                    let back = f2a.sample(a.x, a.y, Border::Clamp);
                    worst = worst.max((back - Vec2::new(x as f64, y as f64)).norm());
                }
            }
        }
        Ok(worst)
    }
}

/// The keyframe edit: source/edited keyframes, object masks and the
/// correspondence spline mapping source-shape positions to edited-shape
/// positions.
#[derive(Debug, Clone)]
pub struct EditBundle {
    pub keyframe_index: usize,
    pub source_keyframe: Raster,
    pub edited_keyframe: Raster,
    pub source_mask: Raster,
    pub target_mask: Raster,
    pub correspondence: ThinPlateSpline,
}

impl EditBundle {
    pub fn new(
        keyframe_index: usize,
        source_keyframe: Raster,
        edited_keyframe: Raster,
        source_mask: Raster,
        target_mask: Raster,
        correspondence: ThinPlateSpline,
    ) -> Result<Self> {
        let dims = source_keyframe.dims();
        for (what, r) in [
            ("edited keyframe", &edited_keyframe),
            ("source mask", &source_mask),
            ("target mask", &target_mask),
        ] {
            if r.dims() != dims {
                return Err(Error::Dimension {
                    what,
                    expected: dims,
                    actual: r.dims(),
                });
            }
        }
        if source_keyframe.channels() != 3 || edited_keyframe.channels() != 3 {
            return Err(Error::Argument("keyframes must be RGB".into()));
        }
        for (name, m) in [("source", &source_mask), ("target", &target_mask)] {
            if m.channels() != 1 || m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Argument(format!("{name} mask must be single-channel {{0, 1}}")));
            }
        }
        Ok(Self {
            keyframe_index,
            source_keyframe,
            edited_keyframe,
            source_mask,
            target_mask,
            correspondence,
        })
    }

    pub fn frame_size(&self) -> (usize, usize) {
        self.source_keyframe.dims()
    }

    /// Dense sampling field of the correspondence on the keyframe grid.
    pub fn correspondence_field(&self) -> Result<SamplingField> {
        let (w, h) = self.frame_size();
        tps::tps_to_field(&self.correspondence, w, h)
    }

    /// IoU between the target mask pulled back through the correspondence
    /// and the source mask (both thresholded at 0.5).
    pub fn correspondence_iou(&self) -> Result<f64> {
        let f = self.correspondence_field()?;
        let warped = field::sample(&f, &self.target_mask, Border::Zero)?;
        Ok(iou(&warped, &self.source_mask))
    }

    pub fn with_correspondence(&self, correspondence: ThinPlateSpline) -> Self {
        Self {
            correspondence,
            ..self.clone()
        }
    }
}

/// Per-channel alpha blend `fg·α + bg·(1 − α)`.
pub fn blend(fg: &Raster, bg: &Raster, alpha: &Raster) -> Result<Raster> {
    fg.check_same_shape(bg, "blend")?;
    if alpha.dims() != fg.dims() || alpha.channels() != 1 {
        return Err(Error::Dimension {
            what: "blend alpha",
            expected: fg.dims(),
            actual: alpha.dims(),
        });
    }
    let c = fg.channels();
    let mut out = fg.clone();
    for (i, px) in out.data_mut().chunks_exact_mut(c).enumerate() {
        let a = alpha.data()[i];
        for (ch, v) in px.iter_mut().enumerate() {
            *v = *v * a + bg.data()[i * c + ch] * (1.0 - a);
        }
    }
    Ok(out)
}

/// Reconstructs frame `j` by sampling both atlases through its UV field and
/// alpha-blending.
pub fn render_frame(video: &LayeredVideo, j: usize) -> Result<Raster> {
    let uv = video.uv_atlas_to_frame(j)?;
    let fg = field::sample(uv, video.fg_atlas.image(), Border::Clamp)?;
    let bg = field::sample(uv, video.bg_atlas.image(), Border::Clamp)?;
    blend(&fg, &bg, video.alpha(j)?)
}

/// Pulls a frame-space image into foreground atlas space through frame `j`'s
/// frame→atlas field. Coverage marks atlas pixels whose source location lies
/// inside the frame and on the foreground support.
pub fn backproject_to_atlas(frame_image: &Raster, video: &LayeredVideo, j: usize) -> Result<AtlasLayer> {
    if frame_image.dims() != video.frame_size() {
        return Err(Error::Dimension {
            what: "back-projected frame",
            expected: video.frame_size(),
            actual: frame_image.dims(),
        });
    }
    let f2a = video.uv_frame_to_atlas(j)?;
    let alpha = video.alpha(j)?;
    let image = field::sample(f2a, frame_image, Border::Clamp)?.clamp01();
    let (w, h) = video.frame_size();
    let coverage = f2a
        .values()
        .iter()
        .map(|p| {
            let inside = p.x >= 0.0 && p.y >= 0.0 && p.x <= (w - 1) as f64 && p.y <= (h - 1) as f64;
            inside && alpha.sample_scalar(p.x, p.y, 0, Border::Zero) > FG_THRESHOLD
        })
        .collect();
    AtlasLayer::new(image, coverage)
}

/// Renders frame `j` with a (possibly deformed) foreground: the edited atlas
/// sampled through `uv_t`, blended by `alpha_t` over the background sampled
/// through the frame's original UV field.
pub fn render_edited_frame(
    video: &LayeredVideo,
    edited_fg: &AtlasLayer,
    uv_t: &SamplingField,
    alpha_t: &Raster,
    j: usize,
) -> Result<Raster> {
    let frame = video.frame_size();
    if uv_t.dims() != frame {
        return Err(Error::Dimension {
            what: "deformed UV",
            expected: frame,
            actual: uv_t.dims(),
        });
    }
    if alpha_t.dims() != frame {
        return Err(Error::Dimension {
            what: "deformed alpha",
            expected: frame,
            actual: alpha_t.dims(),
        });
    }
    let fg = field::sample(uv_t, edited_fg.image(), Border::Clamp)?;
    let bg = field::sample(video.uv_atlas_to_frame(j)?, video.bg_atlas.image(), Border::Clamp)?;
    blend(&fg, &bg, alpha_t)
}

/// Derives the frame→atlas field from an atlas→frame field by inverting it
/// over the foreground support of `alpha`.
pub fn derive_frame_to_atlas(
    uv_atlas_to_frame: &SamplingField,
    alpha: &Raster,
    atlas_size: (usize, usize),
) -> Result<SamplingField> {
    let samples = support_samples(alpha, tps::DEFAULT_INVERSION_STRIDE);
    let inv = tps::invert_field_on_samples(uv_atlas_to_frame, &samples, tps::DEFAULT_INVERSION_REGULARIZATION)?;
    tps::tps_to_field(&inv, atlas_size.0, atlas_size.1)
}

/// Lattice pixels (at `stride`) on the foreground support, falling back to
/// the full lattice when the support holds fewer than three of them.
pub fn support_samples(alpha: &Raster, stride: usize) -> Vec<(usize, usize)> {
    let on: Vec<_> = tps::lattice(alpha.width(), alpha.height(), stride)
        .into_iter()
        .filter(|&(x, y)| alpha.get(x, y, 0) > FG_THRESHOLD)
        .collect();
    if on.len() >= 3 {
        on
    } else {
        tps::lattice(alpha.width(), alpha.height(), stride)
    }
}

/// Binary mask `alpha > threshold`.
pub fn threshold(alpha: &Raster, t: f64) -> Raster {
    alpha.map(|v| if v > t { 1.0 } else { 0.0 })
}

/// Intersection-over-union of the `> 0.5` supports of two single-channel rasters.
pub fn iou(a: &Raster, b: &Raster) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (p, q) = (*x > FG_THRESHOLD, *y > FG_THRESHOLD);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Alpha-weighted centroid, `None` for an empty matte.
pub fn centroid(alpha: &Raster) -> Option<Vec2> {
    let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
    for y in 0..alpha.height() {
        for x in 0..alpha.width() {
            let a = alpha.get(x, y, 0);
            sx += a * x as f64;
            sy += a * y as f64;
            s += a;
        }
    }
    (s > 0.0).then(|| Vec2::new(sx / s, sy / s))
}

/// Sum of alpha (area in pixels).
pub fn area(alpha: &Raster) -> f64 {
    alpha.data().iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_video(alpha_value: f64) -> LayeredVideo {
        let fg = AtlasLayer::complete(Raster::filled(6, 6, 3, 1.0)).unwrap();
        let bg = AtlasLayer::complete(Raster::filled(6, 6, 3, 0.0)).unwrap();
        let uv: Vec<_> = (0..2).map(|_| SamplingField::identity(4, 4)).collect();
        let f2a: Vec<_> = (0..2).map(|_| SamplingField::identity(6, 6)).collect();
        let alpha = vec![Raster::filled(4, 4, 1, alpha_value); 2];
        LayeredVideo::new(fg, bg, (4, 4), uv, f2a, alpha, 1).unwrap()
    }

    #[test]
    fn blend_definition() {
        let v = tiny_video(0.5);
        let out = render_frame(&v, 1).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.5));
        let v = tiny_video(1.0);
        assert!(render_frame(&v, 2).unwrap().data().iter().all(|&x| x == 1.0));
        let v = tiny_video(0.0);
        assert!(render_frame(&v, 2).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn frame_index_is_checked() {
        let v = tiny_video(1.0);
        assert!(matches!(render_frame(&v, 0), Err(Error::Argument(_))));
        assert!(matches!(render_frame(&v, 3), Err(Error::Argument(_))));
    }

    #[test]
    fn video_invariants_are_enforced() {
        let fg = AtlasLayer::complete(Raster::filled(6, 6, 3, 1.0)).unwrap();
        let bg = AtlasLayer::complete(Raster::filled(6, 6, 3, 0.0)).unwrap();
        let one = LayeredVideo::new(
            fg.clone(),
            bg.clone(),
            (4, 4),
            vec![SamplingField::identity(4, 4)],
            vec![SamplingField::identity(6, 6)],
            vec![Raster::filled(4, 4, 1, 1.0)],
            1,
        );
        assert!(one.is_err());
        let mut partial = bg.clone();
        partial.coverage[0] = false;
        let r = LayeredVideo::new(
            fg,
            partial,
            (4, 4),
            vec![SamplingField::identity(4, 4); 2],
            vec![SamplingField::identity(6, 6); 2],
            vec![Raster::filled(4, 4, 1, 1.0); 2],
            1,
        );
        assert!(r.is_err());
    }

    #[test]
    fn inconsistent_uv_is_rejected() {
        let fg = AtlasLayer::complete(Raster::filled(6, 6, 3, 1.0)).unwrap();
        let bg = fg.clone();
        let shifted = SamplingField::from_fn(6, 6, |x, y| Vec2::new(x as f64 + 2.0, y as f64));
        let r = LayeredVideo::new(
            fg,
            bg,
            (4, 4),
            vec![SamplingField::identity(4, 4); 2],
            vec![shifted.clone(), shifted],
            vec![Raster::filled(4, 4, 1, 1.0); 2],
            1,
        );
        assert!(r.is_err());
    }

    #[test]
    fn constant_frame_backprojects_to_constant_atlas() {
        let v = tiny_video(1.0);
        let frame = Raster::filled(4, 4, 3, 0.25);
        let atlas = backproject_to_atlas(&frame, &v, 1).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let covered = atlas.coverage()[y * 6 + x];
                assert_eq!(covered, x < 4 && y < 4, "({x},{y})");
                if covered {
                    assert_eq!(atlas.image().pixel(x, y), &[0.25, 0.25, 0.25]);
                }
            }
        }
    }

    #[test]
    fn edited_render_degenerates_to_plain_render() {
        let v = tiny_video(0.3);
        let out = render_edited_frame(&v, v.fg_atlas(), v.uv_atlas_to_frame(1).unwrap(), v.alpha(1).unwrap(), 1).unwrap();
        assert_eq!(out, render_frame(&v, 1).unwrap());
        let zero = Raster::zeros(4, 4, 1);
        let out = render_edited_frame(&v, v.fg_atlas(), v.uv_atlas_to_frame(1).unwrap(), &zero, 1).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
        let bad = Raster::zeros(3, 4, 1);
        assert!(render_edited_frame(&v, v.fg_atlas(), v.uv_atlas_to_frame(1).unwrap(), &bad, 1).is_err());
    }

    #[test]
    fn iou_and_centroid() {
        let a = Raster::from_fn(4, 1, 1, |x, _, o| o[0] = if x < 2 { 1.0 } else { 0.0 });
        let b = Raster::from_fn(4, 1, 1, |x, _, o| o[0] = if (1..3).contains(&x) { 1.0 } else { 0.0 });
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(centroid(&a).unwrap(), Vec2::new(0.5, 0.0));
        assert!(centroid(&Raster::zeros(2, 2, 1)).is_none());
    }
}
