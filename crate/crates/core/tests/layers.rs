mod common;

use common::*;
use lw_core::layers::{backproject_to_atlas, blend, render_frame};
use lw_core::session;
use lw_core::synth::SceneSpec;
use lw_core::Raster;
use proptest::prelude::*;

fn specs() -> Vec<SceneSpec> {
    vec![SceneSpec::s1(), SceneSpec::s2(), SceneSpec::miniature()]
}

#[test]
fn rendering_reconstructs_ground_truth_frames() {
    for spec in specs() {
        // The oracle of an unedited scene renders each frame in closed form.
        let sc = scene(&spec.with_identity_edit());
        for j in 1..=sc.video.frame_count() {
            let r = render_frame(&sc.video, j).unwrap();
            assert!(mean_abs(&r, &sc.oracle.target_frame(j)) < 2.0 / 255.0, "frame {j}");
            assert_eq!(r, sc.frames[j - 1]);
        }
    }
}

#[test]
fn rendering_matches_frames_read_back_from_disk() {
    let sc = scene(&SceneSpec::s1());
    let dir = tempfile::tempdir().unwrap();
    session::write_synthetic(dir.path(), &sc).unwrap();
    let video = session::load_video(dir.path(), None).unwrap();
    let frames = session::load_frames(dir.path(), video.frame_count()).unwrap();
    for (j, f) in frames.iter().enumerate() {
        assert!(mean_abs(&render_frame(&video, j + 1).unwrap(), f) < 2.0 / 255.0);
    }
}

#[test]
fn backprojected_keyframe_rerenders_its_foreground() {
    let sc = scene(&SceneSpec::s1());
    let k = sc.video.keyframe_index();
    let projected = backproject_to_atlas(&sc.frames[k - 1], &sc.video, k).unwrap();
    let mut image = sc.video.fg_atlas().image().clone();
    for (i, &c) in projected.coverage().iter().enumerate() {
        if c {
            image.data_mut()[3 * i..3 * i + 3].copy_from_slice(&projected.image().data()[3 * i..3 * i + 3]);
        }
    }
    let video = sc
        .video
        .with_fg_atlas(lw_core::AtlasLayer::new(image, projected.coverage().to_vec()).unwrap())
        .unwrap();
    let rerendered = render_frame(&video, k).unwrap();
    let support = sc.video.alpha(k).unwrap();
    let err = rerendered.masked_mean_abs_diff(&sc.frames[k - 1], support).unwrap();
    assert!(err < 3.0 / 255.0, "{}", err * 255.0);
}

#[test]
fn synthetic_uv_fields_are_mutually_inverse() {
    for spec in specs() {
        let sc = scene(&spec);
        for j in 1..=sc.video.frame_count() {
            assert!(sc.video.bidirectional_error(j).unwrap() < 0.05);
        }
    }
}

proptest! {
    #[test]
    fn blending_stays_between_layers(
        fg in prop::collection::vec(0.0..1.0f64, 48),
        bg in prop::collection::vec(0.0..1.0f64, 48),
        alpha in prop::collection::vec(0.0..=1.0f64, 16),
    ) {
        let fg = Raster::from_vec(4, 4, 3, fg).unwrap();
        let bg = Raster::from_vec(4, 4, 3, bg).unwrap();
        let a = Raster::from_vec(4, 4, 1, alpha).unwrap();
        let out = blend(&fg, &bg, &a).unwrap();
        for i in 0..48 {
            let (lo, hi) = (fg.data()[i].min(bg.data()[i]), fg.data()[i].max(bg.data()[i]));
            prop_assert!(out.data()[i] >= lo - 1e-12 && out.data()[i] <= hi + 1e-12);
        }
    }
}
