#![allow(dead_code)]

use lw_core::optimize::{
    guidance_target_image, select_frames, ConstantGuidance, GuidanceProvider, LossWeights, OptimizationState, Problem,
};
use lw_core::synth::{generate_scene, SceneSpec, SyntheticScene};
use lw_core::tps::{fit_tps, Point};
use lw_core::{EditBundle, PropagationResult, Raster, Vec2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn scene(spec: &SceneSpec) -> SyntheticScene {
    generate_scene(spec).expect("scene generation")
}

/// Moves every control destination `px` pixels in a random direction.
pub fn corrupt(bundle: &EditBundle, px: f64, seed: u64) -> EditBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = &bundle.correspondence;
    let dst: Vec<Point> = c
        .control_points_dst()
        .iter()
        .map(|d| {
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            d + Vec2::new(a.cos(), a.sin()) * px
        })
        .collect();
    bundle.with_correspondence(fit_tps(c.control_points_src(), &dst, 0.0).expect("corrupted fit"))
}

/// Fraction of foreground pixels (alpha > 0.5) of every frame whose propagated
/// deformation is within `tol` px of the closed form, and the worst frame.
pub fn deformation_agreement(sc: &SyntheticScene, r: &PropagationResult, tol: f64) -> (f64, f64) {
    let (mut ok, mut total) = (0usize, 0usize);
    let mut worst = 1.0f64;
    for j in 1..=sc.video.frame_count() {
        let oracle = sc.oracle.frame_deformation(j);
        let got = &r.per_frame_deformation[j - 1];
        let alpha = sc.video.alpha(j).unwrap();
        let (w, h) = oracle.dims();
        let (mut fok, mut ftot) = (0usize, 0usize);
        for y in 0..h {
            for x in 0..w {
                if alpha.get(x, y, 0) > 0.5 {
                    ftot += 1;
                    if (oracle.get(x, y) - got.get(x, y)).norm() <= tol {
                        fok += 1;
                    }
                }
            }
        }
        ok += fok;
        total += ftot;
        worst = worst.min(fok as f64 / ftot.max(1) as f64);
    }
    (ok as f64 / total.max(1) as f64, worst)
}

/// Worst per-frame foreground MAE of the propagated frames against the oracle.
pub fn worst_oracle_mae(sc: &SyntheticScene, r: &PropagationResult) -> f64 {
    (1..=sc.video.frame_count())
        .map(|j| {
            lw_core::propagate::support_error(
                &r.edited_frames[j - 1],
                &sc.oracle.target_frame(j),
                &sc.oracle.target_alpha(j),
            )
            .unwrap()
        })
        .fold(0.0, f64::max)
}

/// Per-block result of a central finite-difference check.
#[derive(Debug)]
pub struct BlockCheck {
    pub name: &'static str,
    pub checked: usize,
    pub worst_relative: f64,
}

/// Central differences of the guidance-linearized objective against the
/// analytic gradient on a 16×16 miniature, every component of every block.
///
/// Components smaller than the finite-difference noise floor are compared
/// against that floor: with objective magnitude `|φ|` and step `h`, roundoff
/// alone perturbs a difference quotient by about `ε·|φ|/h`, so relative error
/// is measured against `max(|fd|, 1e3·ε·|φ|/h)`.
pub fn finite_difference_check() -> Vec<BlockCheck> {
    let sc = scene(&SceneSpec::miniature());
    let frames = select_frames(4, 2, 3);
    let p = Problem::new(&sc.video, &sc.bundle, &frames).unwrap();
    let mut st = p.initial_state(LossWeights::DEFAULT, 1e-2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for v in st.appearance_residual.data_mut() {
        *v = rng.random_range(-0.05..0.05);
    }
    for v in st.deformation_residual.values_mut() {
        *v = Vec2::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    }
    for v in st.control_offsets.iter_mut() {
        *v = Vec2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
    }

    // Freeze the guidance raster at the base point so the objective is
    // φ(θ) = total(θ) + Σ ⟨g, render(θ)⟩.
    let refs: Vec<(usize, Raster)> = frames.iter().map(|&j| (j, sc.oracle.target_frame(j))).collect();
    let target = guidance_target_image(refs);
    let e0 = p.evaluate(&st, &target).unwrap();
    let fixed = ConstantGuidance::new(
        e0.renders
            .iter()
            .filter(|(j, _)| frames.contains(j))
            .map(|(j, r)| (*j, target.gradient(r, *j).unwrap())),
    );
    let phi = |s: &OptimizationState| {
        let e = p.evaluate(s, &fixed).unwrap();
        let lin: f64 = e
            .renders
            .iter()
            .filter(|(j, _)| frames.contains(j))
            .map(|(j, r)| {
                let g = fixed.gradient(r, *j).unwrap();
                g.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum();
        e.total + lin
    };
    let grad = p.evaluate(&st, &fixed).unwrap().gradient;
    let h = 1e-6;
    let floor = 1e3 * f64::EPSILON * phi(&st).abs() / h;

    let check = |name: &'static str, len: usize, analytic: &dyn Fn(usize) -> f64, bump: &dyn Fn(&mut OptimizationState, usize, f64)| {
        let mut worst = 0.0f64;
        for i in 0..len {
            let mut a = st.clone();
            let mut b = st.clone();
            bump(&mut a, i, h);
            bump(&mut b, i, -h);
            let fd = (phi(&a) - phi(&b)) / (2.0 * h);
            let rel = (analytic(i) - fd).abs() / fd.abs().max(floor);
            worst = worst.max(rel);
        }
        BlockCheck {
            name,
            checked: len,
            worst_relative: worst,
        }
    };
    let comp = |v: Vec2, c: usize| if c == 0 { v.x } else { v.y };
    let bump_vec = |v: &mut Vec2, c: usize, d: f64| {
        if c == 0 {
            v.x += d
        } else {
            v.y += d
        }
    };
    vec![
        check(
            "appearance residual",
            st.appearance_residual.data().len(),
            &|i| grad.appearance.data()[i],
            &|s, i, d| s.appearance_residual.data_mut()[i] += d,
        ),
        check(
            "deformation residual",
            2 * st.deformation_residual.values().len(),
            &|i| comp(grad.deformation.values()[i / 2], i % 2),
            &|s, i, d| bump_vec(&mut s.deformation_residual.values_mut()[i / 2], i % 2, d),
        ),
        check(
            "control offsets",
            2 * st.control_offsets.len(),
            &|i| comp(grad.offsets[i / 2], i % 2),
            &|s, i, d| bump_vec(&mut s.control_offsets[i / 2], i % 2, d),
        ),
    ]
}

pub fn mean_abs(a: &Raster, b: &Raster) -> f64 {
    a.mean_abs_diff(b).unwrap()
}

pub fn frames_for(sc: &SyntheticScene) -> Vec<usize> {
    select_frames(sc.video.frame_count(), sc.video.keyframe_index(), 3)
}

pub fn target_guidance(sc: &SyntheticScene, frames: &[usize]) -> impl GuidanceProvider {
    guidance_target_image(frames.iter().map(|&j| (j, sc.oracle.target_frame(j))))
}
