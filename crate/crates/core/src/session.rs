//! Session directory I/O.
//!
//! ```text
//! config.json
//! frames/0001.png …        alpha/0001.png …
//! uv_a2f/0001.lwf …        uv_f2a/0001.lwf …
//! atlas_fg.png  atlas_bg.png  atlas_fg_coverage.png
//! edit/source.png  edit/edited.png  edit/mask_src.png  edit/mask_tgt.png
//! edit/correspondence.json
//! oracle/frames/0001.png … oracle/alpha_t/0001.png …   (synthetic scenes only)
//! ```
//!
//! Frame files are numbered from 1.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imageio;
use crate::layers::{self, AtlasLayer, EditBundle, LayeredVideo};
use crate::lwf;
use crate::propagate::PropagationResult;
use crate::raster::Raster;
use crate::synth::SyntheticScene;
use crate::tps;

pub const CONFIG_FILE: &str = "config.json";
pub const CORRESPONDENCE_FILE: &str = "edit/correspondence.json";
pub const NO_EDIT_FLAG: &str = "no-edit fixed point satisfied";
/// Per-frame mean absolute error allowed by the no-edit check.
pub const NO_EDIT_TOLERANCE: f64 = 3.0 / 255.0;
/// Per-frame foreground error allowed against oracle renders.
pub const ORACLE_TOLERANCE: f64 = 4.0 / 255.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub frame_count: usize,
    pub frame_size: [usize; 2],
    pub atlas_size: [usize; 2],
    pub keyframe_index: usize,
}

pub fn frame_name(j: usize, ext: &str) -> String {
    format!("{j:04}.{ext}")
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_config(root: &Path) -> Result<SessionConfig> {
    let path = root.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes the full session layout for a layered video and its edit.
pub fn write_session(root: &Path, video: &LayeredVideo, bundle: &EditBundle, frames: &[Raster]) -> Result<()> {
    for dir in ["frames", "alpha", "uv_a2f", "uv_f2a", "edit"] {
        mkdir(&root.join(dir))?;
    }
    let (w, h) = video.frame_size();
    let (aw, ah) = video.atlas_size();
    let config = SessionConfig {
        frame_count: video.frame_count(),
        frame_size: [w, h],
        atlas_size: [aw, ah],
        keyframe_index: video.keyframe_index(),
    };
    write_json(&root.join(CONFIG_FILE), &config)?;
    for j in 1..=video.frame_count() {
        imageio::write_png(&root.join("frames").join(frame_name(j, "png")), &frames[j - 1])?;
        imageio::write_png(&root.join("alpha").join(frame_name(j, "png")), video.alpha(j)?)?;
        lwf::write_sampling_field(&root.join("uv_a2f").join(frame_name(j, "lwf")), video.uv_atlas_to_frame(j)?)?;
        lwf::write_sampling_field(&root.join("uv_f2a").join(frame_name(j, "lwf")), video.uv_frame_to_atlas(j)?)?;
    }
    imageio::write_png(&root.join("atlas_fg.png"), video.fg_atlas().image())?;
    imageio::write_png(&root.join("atlas_bg.png"), video.bg_atlas().image())?;
    imageio::write_png(&root.join("atlas_fg_coverage.png"), &video.fg_atlas().coverage_raster())?;
    write_bundle(root, bundle)
}

pub fn write_bundle(root: &Path, bundle: &EditBundle) -> Result<()> {
    let edit = root.join("edit");
    mkdir(&edit)?;
    imageio::write_png(&edit.join("source.png"), &bundle.source_keyframe)?;
    imageio::write_png(&edit.join("edited.png"), &bundle.edited_keyframe)?;
    imageio::write_png(&edit.join("mask_src.png"), &bundle.source_mask)?;
    imageio::write_png(&edit.join("mask_tgt.png"), &bundle.target_mask)?;
    tps::write_correspondence(&root.join(CORRESPONDENCE_FILE), &bundle.correspondence.pairs())
}

/// Writes a synthetic scene plus its oracle renders.
pub fn write_synthetic(root: &Path, scene: &SyntheticScene) -> Result<()> {
    write_session(root, &scene.video, &scene.bundle, &scene.frames)?;
    let frames_dir = root.join("oracle/frames");
    let alpha_dir = root.join("oracle/alpha_t");
    mkdir(&frames_dir)?;
    mkdir(&alpha_dir)?;
    for j in 1..=scene.video.frame_count() {
        imageio::write_png(&frames_dir.join(frame_name(j, "png")), &scene.oracle.target_frame(j))?;
        imageio::write_png(&alpha_dir.join(frame_name(j, "png")), &scene.oracle.target_alpha(j))?;
    }
    Ok(())
}

/// Loads the layered video; `keyframe` overrides the configured keyframe.
pub fn load_video(root: &Path, keyframe: Option<usize>) -> Result<LayeredVideo> {
    let config = read_config(root)?;
    let n = config.frame_count;
    let fg = imageio::read_rgb(&root.join("atlas_fg.png"))?;
    let coverage = imageio::read_gray(&root.join("atlas_fg_coverage.png"))?;
    if coverage.dims() != fg.dims() {
        return Err(Error::Dimension {
            what: "atlas_fg_coverage.png",
            expected: fg.dims(),
            actual: coverage.dims(),
        });
    }
    let fg = AtlasLayer::new(fg, coverage.data().iter().map(|&c| c > 0.5).collect())?;
    let bg = AtlasLayer::complete(imageio::read_rgb(&root.join("atlas_bg.png"))?)?;
    let mut a2f = Vec::with_capacity(n);
    let mut f2a = Vec::with_capacity(n);
    let mut alpha = Vec::with_capacity(n);
    for j in 1..=n {
        a2f.push(lwf::read_sampling_field(&root.join("uv_a2f").join(frame_name(j, "lwf")))?);
        f2a.push(lwf::read_sampling_field(&root.join("uv_f2a").join(frame_name(j, "lwf")))?);
        alpha.push(imageio::read_gray(&root.join("alpha").join(frame_name(j, "png")))?);
    }
    let size = (config.frame_size[0], config.frame_size[1]);
    LayeredVideo::new(fg, bg, size, a2f, f2a, alpha, keyframe.unwrap_or(config.keyframe_index))
}

/// Loads the input frames.
pub fn load_frames(root: &Path, n: usize) -> Result<Vec<Raster>> {
    (1..=n)
        .map(|j| imageio::read_rgb(&root.join("frames").join(frame_name(j, "png"))))
        .collect()
}

/// Loads the edit bundle for keyframe `k`.
pub fn load_bundle(root: &Path, k: usize) -> Result<EditBundle> {
    let edit = root.join("edit");
    let source = imageio::read_rgb(&edit.join("source.png"))?;
    let edited = imageio::read_rgb(&edit.join("edited.png"))?;
    let mask_src = layers::threshold(&imageio::read_gray(&edit.join("mask_src.png"))?, 0.5);
    let mask_tgt = layers::threshold(&imageio::read_gray(&edit.join("mask_tgt.png"))?, 0.5);
    let pairs = tps::read_correspondence(&root.join(CORRESPONDENCE_FILE))?;
    let (src, dst) = tps::split_pairs(&pairs);
    let corr = tps::fit_tps(&src, &dst, 0.0)?;
    EditBundle::new(k, source, edited, mask_src, mask_tgt, corr)
}

/// Oracle renders and target mattes when the session has them.
pub fn load_oracle(root: &Path, n: usize) -> Result<Option<(Vec<Raster>, Vec<Raster>)>> {
    let dir = root.join("oracle");
    if !dir.join("frames").is_dir() {
        return Ok(None);
    }
    let mut frames = Vec::with_capacity(n);
    let mut alpha = Vec::with_capacity(n);
    for j in 1..=n {
        frames.push(imageio::read_rgb(&dir.join("frames").join(frame_name(j, "png")))?);
        alpha.push(imageio::read_gray(&dir.join("alpha_t").join(frame_name(j, "png")))?);
    }
    Ok(Some((frames, alpha)))
}

/// Input files that determine a run, relative to the session root.
pub fn input_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut files = vec![
        PathBuf::from(CONFIG_FILE),
        PathBuf::from("atlas_fg.png"),
        PathBuf::from("atlas_bg.png"),
        PathBuf::from("atlas_fg_coverage.png"),
    ];
    for dir in ["frames", "alpha", "uv_a2f", "uv_f2a", "edit"] {
        let path = root.join(dir);
        let mut names: Vec<PathBuf> = fs::read_dir(&path)
            .map_err(|e| Error::io(&path, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .map(|e| PathBuf::from(dir).join(e.file_name()))
            .collect();
        names.sort();
        files.extend(names);
    }
    Ok(files)
}

/// Content hash over the session inputs: SHA-256 over, for each file in
/// sorted order, `path NUL length NUL bytes`.
pub fn input_hash(root: &Path) -> Result<String> {
    let mut files = input_files(root)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in files {
        let path = root.join(&rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0]);
        hasher.update(bytes.len().to_string().as_bytes());
        hasher.update([0]);
        hasher.update(&bytes);
    }
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub mae: Vec<f64>,
    pub max_mae: f64,
    pub tolerance: f64,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoEditReport {
    pub mae: Vec<f64>,
    pub max_mae: f64,
    pub tolerance: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationReport {
    pub input_hash: String,
    pub frames: usize,
    pub keyframe: usize,
    pub frame_size: [usize; 2],
    pub correspondence_iou: f64,
    pub atlas_coverage: f64,
    pub atlas_degenerate_fraction: f64,
    pub degenerate_fraction: Vec<f64>,
    pub warnings: Vec<String>,
    /// Present when the edit is the identity.
    pub no_edit: Option<NoEditReport>,
    /// Present when the session carries oracle renders.
    pub oracle: Option<OracleReport>,
    pub flags: Vec<String>,
}

/// Whether the bundle leaves the keyframe unchanged.
pub fn is_identity_edit(bundle: &EditBundle) -> bool {
    let c = &bundle.correspondence;
    c.control_points_src()
        .iter()
        .zip(c.control_points_dst())
        .all(|(s, d)| (s - d).norm() <= 1e-9)
        && bundle.source_keyframe == bundle.edited_keyframe
}

pub fn oracle_report(frames: &[Raster], oracle: &(Vec<Raster>, Vec<Raster>)) -> Result<OracleReport> {
    let mae = frames
        .iter()
        .zip(oracle.0.iter().zip(&oracle.1))
        .map(|(f, (o, a))| f.masked_mean_abs_diff(o, a))
        .collect::<Result<Vec<_>>>()?;
    let max_mae = mae.iter().copied().fold(0.0, f64::max);
    Ok(OracleReport {
        within_tolerance: max_mae < ORACLE_TOLERANCE,
        mae,
        max_mae,
        tolerance: ORACLE_TOLERANCE,
    })
}

pub fn build_report(
    root: &Path,
    video: &LayeredVideo,
    bundle: &EditBundle,
    result: &PropagationResult,
) -> Result<PropagationReport> {
    let n = video.frame_count();
    let no_edit = if is_identity_edit(bundle) {
        let inputs = load_frames(root, n)?;
        let mae = result
            .edited_frames
            .iter()
            .zip(&inputs)
            .map(|(a, b)| a.mean_abs_diff(b))
            .collect::<Result<Vec<_>>>()?;
        let max_mae = mae.iter().copied().fold(0.0, f64::max);
        Some(NoEditReport {
            satisfied: max_mae < NO_EDIT_TOLERANCE,
            mae,
            max_mae,
            tolerance: NO_EDIT_TOLERANCE,
        })
    } else {
        None
    };
    let oracle = match load_oracle(root, n)? {
        Some(o) => Some(oracle_report(&result.edited_frames, &o)?),
        None => None,
    };
    let mut flags = Vec::new();
    if no_edit.as_ref().is_some_and(|r| r.satisfied) {
        flags.push(NO_EDIT_FLAG.to_string());
    }
    let (w, h) = video.frame_size();
    Ok(PropagationReport {
        input_hash: input_hash(root)?,
        frames: n,
        keyframe: video.keyframe_index(),
        frame_size: [w, h],
        correspondence_iou: bundle.correspondence_iou()?,
        atlas_coverage: result.edited_atlas.coverage_fraction(),
        atlas_degenerate_fraction: result.atlas_degenerate_fraction,
        degenerate_fraction: result.degenerate_fraction.clone(),
        warnings: result.warnings.clone(),
        no_edit,
        oracle,
        flags,
    })
}

/// Writes frames, deformations, deformed UV/alpha and the edited atlas.
pub fn write_result(out: &Path, result: &PropagationResult) -> Result<()> {
    for dir in ["frames", "deform", "uv_t", "alpha_t"] {
        mkdir(&out.join(dir))?;
    }
    for j in 1..=result.frame_count() {
        let i = j - 1;
        imageio::write_png(&out.join("frames").join(frame_name(j, "png")), &result.edited_frames[i])?;
        lwf::write_deformation(&out.join("deform").join(frame_name(j, "lwf")), &result.per_frame_deformation[i])?;
        lwf::write_sampling_field(&out.join("uv_t").join(frame_name(j, "lwf")), &result.per_frame_uv_t[i])?;
        imageio::write_png(&out.join("alpha_t").join(frame_name(j, "png")), &result.per_frame_alpha_t[i])?;
    }
    imageio::write_png(&out.join("atlas_edited.png"), result.edited_atlas.image())
}

pub fn write_report(path: &Path, report: &impl Serialize) -> Result<()> {
    write_json(path, report)
}

/// Writes a list of rendered frames as `dir/0001.png …`.
pub fn write_frames(dir: &Path, frames: &[Raster]) -> Result<()> {
    mkdir(dir)?;
    for (i, f) in frames.iter().enumerate() {
        imageio::write_png(&dir.join(frame_name(i + 1, "png")), f)?;
    }
    Ok(())
}
