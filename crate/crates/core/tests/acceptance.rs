//! One test per acceptance criterion. Each prints a single PASS/FAIL line.

mod common;

use std::time::{Duration, Instant};

use common::*;
use lw_core::affine::Affine2;
use lw_core::field::{jacobian_of_field, SamplingField};
use lw_core::layers::{self, centroid, iou};
use lw_core::optimize::{optimize_from, select_frames, weighted_total, LossWeights, Losses, Problem, ZeroGuidance};
use lw_core::propagate::{interpolate_layers, propagate_edit};
use lw_core::session;
use lw_core::synth::SceneSpec;
use lw_core::tps::{fit_tps, invert_field_via_tps, tps_to_field, Point};

fn verdict(name: &str, pass: bool, detail: String) {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

#[test]
fn affine_oracle_equivalence() {
    let start = Instant::now();
    let mut details = Vec::new();
    let mut pass = true;
    for (name, spec) in [("S1", SceneSpec::s1()), ("S2", SceneSpec::s2())] {
        let sc = scene(&spec);
        let r = propagate_edit(&sc.video, &sc.bundle).unwrap();
        let (fraction, worst_frame) = deformation_agreement(&sc, &r, 0.1);
        pass &= fraction >= 0.99;
        details.push(format!("{name} {:.2}% within 0.1 px (worst frame {:.2}%)", 100.0 * fraction, 100.0 * worst_frame));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(10);
    verdict("affine oracle equivalence", pass, format!("{}; {elapsed:.2?}", details.join(", ")));
}

#[test]
fn end_to_end_oracle_render() {
    let sc = scene(&SceneSpec::s2());
    let r = propagate_edit(&sc.video, &sc.bundle).unwrap();
    let errors: Vec<f64> = (1..=sc.video.frame_count())
        .map(|j| {
            lw_core::propagate::support_error(&r.edited_frames[j - 1], &sc.oracle.target_frame(j), &sc.oracle.target_alpha(j))
                .unwrap()
                * 255.0
        })
        .collect();
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    verdict(
        "end-to-end oracle render",
        worst < 4.0,
        format!("S2 per-frame MAE x255 {errors:.2?}, worst {worst:.3} < 4"),
    );
}

#[test]
fn no_edit_fixed_point() {
    let mut worst = 0.0f64;
    for spec in [SceneSpec::s1(), SceneSpec::s2()] {
        let sc = scene(&spec.with_identity_edit());
        let r = propagate_edit(&sc.video, &sc.bundle).unwrap();
        for (j, input) in sc.frames.iter().enumerate() {
            worst = worst.max(mean_abs(&r.edited_frames[j], input));
        }
    }
    verdict(
        "no-edit fixed point",
        worst < 3.0 / 255.0,
        format!("worst per-frame MAE x255 {:.4} < 3 on S1 and S2", worst * 255.0),
    );
}

#[test]
fn jacobian_correctness() {
    let a = Affine2([[1.3, -0.4, 2.0], [0.25, 0.8, -1.5]]);
    let f = SamplingField::from_fn(40, 30, |x, y| a.apply(Point::new(x as f64, y as f64)));
    let j = jacobian_of_field(&f, 1.0, 1.0).unwrap();
    let lin = a.linear();
    let mut affine_err = 0.0f64;
    for y in 1..29 {
        for x in 1..39 {
            affine_err = affine_err.max((j.get(x, y) - lin).abs().max());
        }
    }

    // Smooth spline over a 64×64 grid: unit-amplitude sinusoidal displacement
    // on a 16 px control lattice.
    let src: Vec<Point> = (0..4)
        .flat_map(|i| (0..4).map(move |k| Point::new(8.0 + 16.0 * i as f64, 8.0 + 16.0 * k as f64)))
        .collect();
    let dst: Vec<Point> = src
        .iter()
        .map(|p| p + Point::new((p.y * 0.1).sin(), (p.x * 0.08).cos()))
        .collect();
    let tps = fit_tps(&src, &dst, 0.0).unwrap();
    let jf = jacobian_of_field(&tps_to_field(&tps, 64, 64).unwrap(), 1.0, 1.0).unwrap();
    let mut tps_err = 0.0f64;
    for y in 1..63 {
        for x in 1..63 {
            let an = tps.jacobian(Point::new(x as f64, y as f64));
            let m = jf.get(x, y);
            for r in 0..2 {
                for c in 0..2 {
                    tps_err = tps_err.max((m[(r, c)] - an[r][c]).abs());
                }
            }
        }
    }
    verdict(
        "jacobian correctness",
        affine_err < 1e-10 && tps_err < 1e-3,
        format!("affine max error {affine_err:.2e} < 1e-10, spline max error {tps_err:.2e} < 1e-3"),
    );
}

#[test]
fn inversion_contract() {
    let a = Affine2([[1.1, 0.15, -3.0], [-0.1, 0.95, 2.5]]);
    let (w, h) = (48, 40);
    let f = SamplingField::from_fn(w, h, |x, y| a.apply(Point::new(x as f64, y as f64)));
    let inv = invert_field_via_tps(&f, 8, 1e-3).unwrap();
    let mut worst = 0.0f64;
    for &(x, y) in &lw_core::tps::lattice(w, h, 8) {
        let p = Point::new(x as f64, y as f64);
        worst = worst.max((inv.eval(f.get(x, y)) - p).norm());
    }
    verdict("inversion contract", worst < 1e-4, format!("affine round-trip max error {worst:.2e} px < 1e-4"));
}

#[test]
fn gradient_suite() {
    let start = Instant::now();
    let blocks = finite_difference_check();
    let elapsed = start.elapsed();
    let pass = blocks.iter().all(|b| b.worst_relative < 1e-3) && elapsed < Duration::from_secs(60);
    let detail = blocks
        .iter()
        .map(|b| format!("{} {:.2e} over {}", b.name, b.worst_relative, b.checked))
        .collect::<Vec<_>>()
        .join(", ");
    verdict("gradient suite", pass, format!("{detail}; {elapsed:.2?} < 60 s"));
}

#[test]
fn loss_weighting() {
    let total = weighted_total(
        &LossWeights::DEFAULT,
        &Losses {
            keyframe: 0.01,
            tv: 0.002,
            semantic: 0.003,
        },
    );
    verdict("loss weighting", total == 10005.0, format!("total {total:?}"));
}

#[test]
fn optimization_recovery() {
    let start = Instant::now();
    let sc = scene(&SceneSpec::s2());
    let bundle = corrupt(&sc.bundle, 2.0, 11);
    let frames = select_frames(sc.video.frame_count(), sc.video.keyframe_index(), 3);
    let p = Problem::new(&sc.video, &bundle, &frames).unwrap();
    let s0 = p.initial_state(LossWeights::SHAPE_REFINEMENT, 1e-2);
    let before = iou(&p.evaluate(&s0, &ZeroGuidance).unwrap().deformed_target_mask, &bundle.source_mask);
    let run = optimize_from(&p, s0, &ZeroGuidance, 300).unwrap();
    let after = iou(&p.evaluate(&run.state, &ZeroGuidance).unwrap().deformed_target_mask, &bundle.source_mask);
    let elapsed = start.elapsed();
    verdict(
        "optimization recovery",
        after > 0.95 && after > before && elapsed < Duration::from_secs(300),
        format!("S2 deformed-mask IoU {before:.4} -> {after:.4} (> 0.95) in 300 iterations, {elapsed:.2?}"),
    );
}

#[test]
fn interpolation() {
    let sc = scene(&SceneSpec::s2());
    let r = propagate_edit(&sc.video, &sc.bundle).unwrap();
    let at = |t| interpolate_layers(&r, &sc.video, t).unwrap();
    let (l0, l_half, l1) = (at(0.0), at(0.5), at(1.0));

    let mut exact = true;
    for j in 1..=sc.video.frame_count() {
        let uv = sc.video.uv_atlas_to_frame(j).unwrap();
        let alpha = sc.video.alpha(j).unwrap();
        let source_shaped = layers::render_edited_frame(&sc.video, &r.edited_atlas, uv, alpha, j).unwrap();
        exact &= l0[j - 1].0 == source_shaped && l1[j - 1].0 == r.edited_frames[j - 1];
    }

    let mut worst = 0.0f64;
    for j in 0..sc.video.frame_count() {
        let c0 = centroid(&l0[j].1).unwrap();
        let c1 = centroid(&l1[j].1).unwrap();
        let ch = centroid(&l_half[j].1).unwrap();
        worst = worst.max((ch - (c0 + c1) / 2.0).norm());
    }
    verdict(
        "interpolation",
        exact && worst < 0.5,
        format!("endpoints bitwise equal: {exact}; S2 worst centroid-midpoint error {worst:.4} px < 0.5"),
    );
}

#[test]
fn full_resolution_support() {
    let start = Instant::now();
    let sc = scene(&SceneSpec::s1_at(768, 432));
    let dir = tempfile::tempdir().unwrap();
    session::write_synthetic(dir.path(), &sc).unwrap();
    let video = session::load_video(dir.path(), None).unwrap();
    let bundle = session::load_bundle(dir.path(), video.keyframe_index()).unwrap();
    let r = propagate_edit(&video, &bundle).unwrap();
    let (fraction, _) = deformation_agreement(&sc, &r, 0.1);
    let mae = worst_oracle_mae(&sc, &r) * 255.0;

    let frames = select_frames(video.frame_count(), video.keyframe_index(), 3);
    let p = Problem::new(&video, &bundle, &frames).unwrap();
    let run = optimize_from(&p, p.initial_state(LossWeights::DEFAULT, 1e-2), &target_guidance(&sc, &frames), 2).unwrap();
    let refined = p.render_state(&run.state).unwrap();
    session::write_result(&dir.path().join("out"), &refined).unwrap();

    verdict(
        "resolution support",
        fraction >= 0.99 && mae < 4.0 && run.state.is_finite(),
        format!(
            "768x432: {:.2}% within 0.1 px, worst MAE x255 {mae:.3} < 4, 2 refinement steps finite; {:.2?}",
            100.0 * fraction,
            start.elapsed()
        ),
    );
}
