//! Synthetic layered scenes with closed-form affine ground truth.
//!
//! Motion `f_j` maps atlas coordinates to frame `j`; the edit `g` maps
//! source-shape keyframe positions to edited-shape positions. Everything the
//! pipeline estimates has an analytic counterpart here.

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affine::Affine2;
use crate::error::{Error, Result};
use crate::field::{self, DeformationField, SamplingField, Vec2};
use crate::layers::{self, AtlasLayer, EditBundle, LayeredVideo};
use crate::raster::{Border, Raster};
use crate::tps::{self, Point};

/// Minimum |det| for frame motions and the edit.
pub const MIN_DET: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Checker {
        #[serde(default = "default_cell")]
        cell: f64,
        #[serde(default)]
        seed: u64,
    },
    Noise {
        #[serde(default = "default_noise_scale")]
        scale: f64,
        #[serde(default)]
        seed: u64,
    },
    Gradient {
        #[serde(default)]
        seed: u64,
    },
}

fn default_cell() -> f64 {
    8.0
}

fn default_noise_scale() -> f64 {
    12.0
}

/// Object outline in atlas coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskShape {
    Disk {
        center: [f64; 2],
        radius: f64,
    },
    RoundedRect {
        center: [f64; 2],
        half_size: [f64; 2],
        corner: f64,
    },
    Blob {
        center: [f64; 2],
        radius: f64,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Recolor {
    #[default]
    None,
    HueShift {
        degrees: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSpec {
    /// Source→target forward map in keyframe coordinates.
    pub affine: Affine2,
    #[serde(default)]
    pub recolor: Recolor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub frame_size: [usize; 2],
    /// Defaults to twice the larger frame dimension on each side.
    #[serde(default)]
    pub atlas_size: Option<[usize; 2]>,
    pub frame_count: usize,
    pub keyframe_index: usize,
    pub atlas_texture: Texture,
    pub bg_texture: Texture,
    pub object_mask_shape: MaskShape,
    /// Per-frame atlas→frame maps.
    pub motion: Vec<Affine2>,
    pub edit: EditSpec,
    /// Correspondence control lattice is `control_grid × control_grid`.
    #[serde(default = "default_control_grid")]
    pub control_grid: usize,
}

fn default_control_grid() -> usize {
    5
}

impl SceneSpec {
    /// Canonical translating scene: 48×48 frames over a 64×64 atlas, eight
    /// frames panning 2 px per frame, keyframe 4, disk of radius 10, edit is
    /// a 1.25× horizontal stretch about the disk center plus a hue shift.
    pub fn s1() -> Self {
        let motion = (1..=8)
            .map(|j| Affine2::translation(-2.0 * (j - 1) as f64, 0.0))
            .collect();
        let center = [32.0, 24.0];
        let mut spec = SceneSpec {
            frame_size: [48, 48],
            atlas_size: Some([64, 64]),
            frame_count: 8,
            keyframe_index: 4,
            atlas_texture: Texture::Noise { scale: 12.0, seed: 7 },
            bg_texture: Texture::Checker { cell: 8.0, seed: 3 },
            object_mask_shape: MaskShape::Disk { center, radius: 10.0 },
            motion,
            edit: EditSpec {
                affine: Affine2::IDENTITY,
                recolor: Recolor::HueShift { degrees: 90.0 },
            },
            control_grid: 5,
        };
        spec.edit.affine = spec.stretch_about_object(1.25, 1.0);
        spec
    }

    /// As [`SceneSpec::s1`] but with frames rotating 4° per frame plus a slow pan.
    pub fn s2() -> Self {
        let atlas_center = [31.5, 31.5];
        let frame_center = [23.5, 23.5];
        let motion = (1..=8)
            .map(|j| {
                let s = (j - 1) as f64;
                Affine2::translation(frame_center[0] - 0.5 * s, frame_center[1] + 0.25 * s)
                    .then_after(&Affine2::rotation_deg(4.0 * s))
                    .then_after(&Affine2::translation(-atlas_center[0], -atlas_center[1]))
            })
            .collect();
        let mut spec = SceneSpec {
            object_mask_shape: MaskShape::Disk {
                center: [32.0, 30.0],
                radius: 10.0,
            },
            motion,
            ..Self::s1()
        };
        spec.edit.affine = spec.stretch_about_object(1.25, 1.0);
        spec
    }

    /// [`SceneSpec::s1`] scaled so the frames are `width × height`; lengths
    /// scale with `min(width, height) / 48`.
    pub fn s1_at(width: usize, height: usize) -> Self {
        let s = width.min(height) as f64 / 48.0;
        let pad = (16.0 * s).round() as usize;
        let motion = (1..=8)
            .map(|j| Affine2::translation(-2.0 * s * (j - 1) as f64, 0.0))
            .collect();
        let mut spec = SceneSpec {
            frame_size: [width, height],
            atlas_size: Some([width + pad, height + pad]),
            atlas_texture: Texture::Noise { scale: 12.0 * s, seed: 7 },
            bg_texture: Texture::Checker { cell: 8.0 * s, seed: 3 },
            object_mask_shape: MaskShape::Disk {
                center: [width as f64 / 2.0 + 8.0 * s, height as f64 / 2.0],
                radius: 10.0 * s,
            },
            motion,
            ..Self::s1()
        };
        spec.edit.affine = spec.stretch_about_object(1.25, 1.0);
        spec
    }

    /// 16×16 miniature of [`SceneSpec::s1`]: 24×24 atlas, four frames,
    /// keyframe 2, disk of radius 4.
    pub fn miniature() -> Self {
        let motion = (1..=4)
            .map(|j| Affine2::translation(-2.0 * (j - 1) as f64, 0.0))
            .collect();
        let mut spec = SceneSpec {
            frame_size: [16, 16],
            atlas_size: Some([24, 24]),
            frame_count: 4,
            keyframe_index: 2,
            atlas_texture: Texture::Noise { scale: 6.0, seed: 7 },
            bg_texture: Texture::Checker { cell: 4.0, seed: 3 },
            object_mask_shape: MaskShape::Disk {
                center: [12.0, 8.0],
                radius: 4.0,
            },
            motion,
            edit: EditSpec {
                affine: Affine2::IDENTITY,
                recolor: Recolor::HueShift { degrees: 90.0 },
            },
            control_grid: 4,
        };
        spec.edit.affine = spec.stretch_about_object(1.25, 1.0);
        spec
    }

    /// Same scene with no shape change and no recolor.
    pub fn with_identity_edit(mut self) -> Self {
        self.edit = EditSpec {
            affine: Affine2::IDENTITY,
            recolor: Recolor::None,
        };
        self
    }

    /// Scale about the object's center as seen in the keyframe.
    pub fn stretch_about_object(&self, sx: f64, sy: f64) -> Affine2 {
        let c = self.object_center();
        let ck = self.motion[self.keyframe_index - 1].apply(Vec2::new(c[0], c[1]));
        Affine2::about([ck.x, ck.y], Affine2::scale(sx, sy))
    }

    pub fn object_center(&self) -> [f64; 2] {
        match &self.object_mask_shape {
            MaskShape::Disk { center, .. }
            | MaskShape::RoundedRect { center, .. }
            | MaskShape::Blob { center, .. } => *center,
        }
    }

    pub fn resolved_atlas_size(&self) -> [usize; 2] {
        self.atlas_size.unwrap_or_else(|| {
            let m = 2 * self.frame_size[0].max(self.frame_size[1]);
            [m, m]
        })
    }

    pub fn validate(&self) -> Result<()> {
        let [w, h] = self.frame_size;
        if w == 0 || h == 0 {
            return Err(Error::Spec(format!("frame size {w}x{h} is empty")));
        }
        let [aw, ah] = self.resolved_atlas_size();
        if aw == 0 || ah == 0 {
            return Err(Error::Spec(format!("atlas size {aw}x{ah} is empty")));
        }
        if self.frame_count < 2 {
            return Err(Error::Spec(format!("need at least 2 frames, got {}", self.frame_count)));
        }
        if self.motion.len() != self.frame_count {
            return Err(Error::Spec(format!(
                "{} motion matrices for {} frames",
                self.motion.len(),
                self.frame_count
            )));
        }
        if !(1..=self.frame_count).contains(&self.keyframe_index) {
            return Err(Error::Spec(format!(
                "keyframe index {} outside 1..={}",
                self.keyframe_index, self.frame_count
            )));
        }
        for (i, m) in self.motion.iter().enumerate() {
            if !m.is_finite() || m.det().abs() <= MIN_DET {
                return Err(Error::Spec(format!(
                    "frame {}: motion is not invertible (det = {})",
                    i + 1,
                    m.det()
                )));
            }
        }
        let g = &self.edit.affine;
        if !g.is_finite() || g.det().abs() <= MIN_DET {
            return Err(Error::Spec(format!("edit is not invertible (det = {})", g.det())));
        }
        if self.control_grid < 2 {
            return Err(Error::Spec("control grid needs at least 2 points per side".into()));
        }
        Ok(())
    }
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
}

fn random_color(r: &mut ChaCha8Rng) -> [f64; 3] {
    [r.random_range(0.1..0.9), r.random_range(0.1..0.9), r.random_range(0.1..0.9)]
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Procedural texture rasterized at integer pixel centers.
pub fn render_texture(tex: &Texture, width: usize, height: usize) -> Raster {
    match *tex {
        Texture::Checker { cell, seed } => {
            let mut r = rng(seed, 1);
            let (a, b) = (random_color(&mut r), random_color(&mut r));
            Raster::from_fn(width, height, 3, |x, y, o| {
                let odd = ((x as f64 / cell).floor() + (y as f64 / cell).floor()) as i64 % 2 != 0;
                o.copy_from_slice(if odd { &b } else { &a });
            })
        }
        Texture::Noise { scale, seed } => {
            let mut r = rng(seed, 2);
            let gw = (width as f64 / scale).ceil() as usize + 2;
            let gh = (height as f64 / scale).ceil() as usize + 2;
            let lattice: Vec<[f64; 3]> = (0..gw * gh)
                .map(|_| [r.random_range(0.15..0.85), r.random_range(0.15..0.85), r.random_range(0.15..0.85)])
                .collect();
            Raster::from_fn(width, height, 3, |x, y, o| {
                let (fx, fy) = (x as f64 / scale, y as f64 / scale);
                let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
                let (tx, ty) = (smoothstep(fx.fract()), smoothstep(fy.fract()));
                for (c, v) in o.iter_mut().enumerate() {
                    let at = |i: usize, j: usize| lattice[j * gw + i][c];
                    let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
                    let bot = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
                    *v = top * (1.0 - ty) + bot * ty;
                }
            })
        }
        Texture::Gradient { seed } => {
            let mut r = rng(seed, 3);
            let (a, b, c) = (random_color(&mut r), random_color(&mut r), random_color(&mut r));
            let (sw, sh) = ((width.max(2) - 1) as f64, (height.max(2) - 1) as f64);
            Raster::from_fn(width, height, 3, |x, y, o| {
                let (u, v) = (x as f64 / sw, y as f64 / sh);
                for i in 0..3 {
                    o[i] = a[i] + (b[i] - a[i]) * u + (c[i] - a[i]) * v * 0.5;
                    o[i] = o[i].clamp(0.0, 1.0);
                }
            })
        }
    }
}

/// Point-in-shape test in atlas coordinates.
pub struct ShapeTest {
    shape: MaskShape,
    harmonics: Vec<(f64, f64, f64)>,
}

impl ShapeTest {
    pub fn new(shape: &MaskShape) -> Self {
        let harmonics = match shape {
            MaskShape::Blob { seed, .. } => {
                let mut r = rng(*seed, 4);
                (2..=4)
                    .map(|k| (k as f64, r.random_range(0.03..0.1), r.random_range(0.0..std::f64::consts::TAU)))
                    .collect()
            }
            _ => Vec::new(),
        };
        Self {
            shape: shape.clone(),
            harmonics,
        }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        match &self.shape {
            MaskShape::Disk { center, radius } => (p - Vec2::new(center[0], center[1])).norm() <= *radius,
            MaskShape::RoundedRect {
                center,
                half_size,
                corner,
            } => {
                let qx = (p.x - center[0]).abs() - (half_size[0] - corner);
                let qy = (p.y - center[1]).abs() - (half_size[1] - corner);
                let outside = Vec2::new(qx.max(0.0), qy.max(0.0)).norm();
                outside + qx.max(qy).min(0.0) - corner <= 0.0
            }
            MaskShape::Blob { center, radius, .. } => {
                let d = p - Vec2::new(center[0], center[1]);
                let theta = d.y.atan2(d.x);
                let r = radius
                    * (1.0
                        + self
                            .harmonics
                            .iter()
                            .map(|(k, a, phi)| a * (k * theta + phi).cos())
                            .sum::<f64>());
                d.norm() <= r
            }
        }
    }

    /// 2×2 supersampled coverage of the pixel at `q`, where `to_atlas` maps
    /// pixel-space points into atlas coordinates.
    pub fn coverage(&self, q: Vec2, to_atlas: &Affine2) -> f64 {
        const OFFSETS: [(f64, f64); 4] = [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)];
        OFFSETS
            .iter()
            .filter(|(dx, dy)| self.contains(to_atlas.apply(q + Vec2::new(*dx, *dy))))
            .count() as f64
            / 4.0
    }

    pub fn matte(&self, width: usize, height: usize, to_atlas: &Affine2) -> Raster {
        Raster::from_fn(width, height, 1, |x, y, o| {
            o[0] = self.coverage(Vec2::new(x as f64, y as f64), to_atlas)
        })
    }
}

/// Hue rotation about the gray axis.
pub fn hue_rotation(degrees: f64) -> Matrix3<f64> {
    let (s, c) = degrees.to_radians().sin_cos();
    let k = (1.0 - c) / 3.0;
    let r = (1.0f64 / 3.0).sqrt() * s;
    Matrix3::new(c + k, k - r, k + r, k + r, c + k, k - r, k - r, k + r, c + k)
}

pub fn apply_recolor(img: &Raster, recolor: Recolor) -> Raster {
    match recolor {
        Recolor::None => img.clone(),
        Recolor::HueShift { degrees } => {
            let m = hue_rotation(degrees);
            let mut out = img.clone();
            for px in out.data_mut().chunks_exact_mut(3) {
                let v = m * nalgebra::Vector3::new(px[0], px[1], px[2]);
                for c in 0..3 {
                    px[c] = v[c].clamp(0.0, 1.0);
                }
            }
            out
        }
    }
}

/// Analytic ground truth for a generated scene.
#[derive(Debug, Clone)]
pub struct SceneOracle {
    spec: SceneSpec,
    motion_inv: Vec<Affine2>,
    edited_fg: Raster,
    bg: Raster,
}

impl SceneOracle {
    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    /// Recolored foreground atlas, i.e. the ideal edited atlas.
    pub fn edited_atlas(&self) -> &Raster {
        &self.edited_fg
    }

    fn is_identity_edit(&self) -> bool {
        self.spec.edit.affine == Affine2::IDENTITY
    }

    /// `h_j = f_j ∘ f_k⁻¹ ∘ g ∘ f_k ∘ f_j⁻¹` on frame `j`'s grid.
    pub fn frame_edit_map(&self, j: usize) -> Affine2 {
        let k = self.spec.keyframe_index - 1;
        let i = j - 1;
        self.spec.motion[i]
            .then_after(&self.motion_inv[k])
            .then_after(&self.spec.edit.affine)
            .then_after(&self.spec.motion[k])
            .then_after(&self.motion_inv[i])
    }

    /// Frame pixel ↦ atlas coordinate of the target-shape object:
    /// `f_k⁻¹ ∘ g⁻¹ ∘ f_k ∘ f_j⁻¹`.
    pub fn target_to_atlas(&self, j: usize) -> Affine2 {
        if self.is_identity_edit() {
            return self.motion_inv[j - 1];
        }
        let k = self.spec.keyframe_index - 1;
        let g_inv = self.spec.edit.affine.inverse().expect("validated invertible");
        self.motion_inv[k]
            .then_after(&g_inv)
            .then_after(&self.spec.motion[k])
            .then_after(&self.motion_inv[j - 1])
    }

    fn frame_field(&self, m: &Affine2) -> SamplingField {
        let [w, h] = self.spec.frame_size;
        SamplingField::from_fn(w, h, |x, y| m.apply(Vec2::new(x as f64, y as f64)))
    }

    /// Closed-form `D^{t→s}_j(p) = h_j(p) − p`.
    pub fn frame_deformation(&self, j: usize) -> DeformationField {
        let [w, h] = self.spec.frame_size;
        if self.is_identity_edit() {
            return DeformationField::zeros(w, h);
        }
        let m = self.frame_edit_map(j);
        DeformationField::from_fn(w, h, |x, y| {
            let p = Vec2::new(x as f64, y as f64);
            m.apply(p) - p
        })
    }

    /// Target-shape UV field of frame `j`.
    pub fn target_uv(&self, j: usize) -> SamplingField {
        self.frame_field(&self.target_to_atlas(j))
    }

    /// Target-shape alpha matte of frame `j`.
    pub fn target_alpha(&self, j: usize) -> Raster {
        let [w, h] = self.spec.frame_size;
        ShapeTest::new(&self.spec.object_mask_shape).matte(w, h, &self.target_to_atlas(j))
    }

    /// Edited frame `j` rendered directly from the edited atlas with the
    /// target-shape matte.
    pub fn target_frame(&self, j: usize) -> Raster {
        let fg = field::sample(&self.target_uv(j), &self.edited_fg, Border::Clamp).expect("non-empty atlas");
        let bg = field::sample(&self.frame_field(&self.motion_inv[j - 1]), &self.bg, Border::Clamp)
            .expect("non-empty atlas");
        layers::blend(&fg, &bg, &self.target_alpha(j)).expect("consistent shapes")
    }

    pub fn target_frames(&self) -> Vec<Raster> {
        (1..=self.spec.frame_count).map(|j| self.target_frame(j)).collect()
    }
}

pub fn oracle_frame_deformation(oracle: &SceneOracle, j: usize) -> DeformationField {
    oracle.frame_deformation(j)
}

pub fn oracle_target_frames(oracle: &SceneOracle) -> Vec<Raster> {
    oracle.target_frames()
}

/// Everything produced for one synthetic scene.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub video: LayeredVideo,
    pub bundle: EditBundle,
    pub oracle: SceneOracle,
    /// Input frames (equal to `render_frame` of the video).
    pub frames: Vec<Raster>,
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let [w, h] = spec.frame_size;
    let [aw, ah] = spec.resolved_atlas_size();
    let motion_inv: Vec<Affine2> = spec
        .motion
        .iter()
        .map(|m| m.inverse().expect("validated invertible"))
        .collect();
    let shape = ShapeTest::new(&spec.object_mask_shape);

    let fg_img = render_texture(&spec.atlas_texture, aw, ah);
    let bg_img = render_texture(&spec.bg_texture, aw, ah);
    let atlas_matte = shape.matte(aw, ah, &Affine2::IDENTITY);
    let fg_coverage = atlas_matte.data().iter().map(|&a| a > layers::FG_THRESHOLD).collect();
    let fg_atlas = AtlasLayer::new(fg_img.clone(), fg_coverage)?;
    let bg_atlas = AtlasLayer::complete(bg_img.clone())?;

    let uv_a2f: Vec<SamplingField> = motion_inv
        .iter()
        .map(|m| SamplingField::from_fn(w, h, |x, y| m.apply(Vec2::new(x as f64, y as f64))))
        .collect();
    let uv_f2a: Vec<SamplingField> = spec
        .motion
        .iter()
        .map(|m| SamplingField::from_fn(aw, ah, |x, y| m.apply(Vec2::new(x as f64, y as f64))))
        .collect();
    let alpha: Vec<Raster> = motion_inv.iter().map(|m| shape.matte(w, h, m)).collect();
    let video = LayeredVideo::new(fg_atlas, bg_atlas, (w, h), uv_a2f, uv_f2a, alpha, spec.keyframe_index)?;
    let frames = (1..=spec.frame_count)
        .map(|j| layers::render_frame(&video, j))
        .collect::<Result<Vec<_>>>()?;

    let oracle = SceneOracle {
        spec: spec.clone(),
        motion_inv,
        edited_fg: apply_recolor(&fg_img, spec.edit.recolor),
        bg: bg_img,
    };

    let k = spec.keyframe_index;
    let source_keyframe = frames[k - 1].clone();
    let edited_keyframe = oracle.target_frame(k);
    let source_mask = layers::threshold(video.alpha(k)?, layers::FG_THRESHOLD);
    let target_mask = layers::threshold(&oracle.target_alpha(k), layers::FG_THRESHOLD);
    let (src, dst) = control_lattice(video.alpha(k)?, spec.control_grid, &spec.edit.affine);
    let correspondence = tps::fit_tps(&src, &dst, 0.0)?;
    let bundle = EditBundle::new(k, source_keyframe, edited_keyframe, source_mask, target_mask, correspondence)?;

    Ok(SyntheticScene {
        video,
        bundle,
        oracle,
        frames,
    })
}

/// `n × n` lattice over the matte's bounding box (grown by 2 px), mapped by `g`.
fn control_lattice(alpha: &Raster, n: usize, g: &Affine2) -> (Vec<Point>, Vec<Point>) {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for y in 0..alpha.height() {
        for x in 0..alpha.width() {
            if alpha.get(x, y, 0) > 0.0 {
                x0 = x0.min(x as f64);
                y0 = y0.min(y as f64);
                x1 = x1.max(x as f64);
                y1 = y1.max(y as f64);
            }
        }
    }
    if x0 > x1 {
        // Empty matte: spread over the whole frame.
        (x0, y0, x1, y1) = (0.0, 0.0, (alpha.width() - 1) as f64, (alpha.height() - 1) as f64);
    } else {
        x0 = (x0 - 2.0).max(0.0);
        y0 = (y0 - 2.0).max(0.0);
        x1 = (x1 + 2.0).min((alpha.width() - 1) as f64);
        y1 = (y1 + 2.0).min((alpha.height() - 1) as f64);
    }
    let lerp = |a: f64, b: f64, i: usize| a + (b - a) * i as f64 / (n - 1) as f64;
    let src: Vec<Point> = (0..n)
        .flat_map(|j| (0..n).map(move |i| Point::new(lerp(x0, x1, i), lerp(y0, y1, j))))
        .collect();
    let dst = src.iter().map(|p| g.apply(*p)).collect();
    (src, dst)
}
