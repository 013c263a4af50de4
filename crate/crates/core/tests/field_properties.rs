use lw_core::affine::Affine2;
use lw_core::field::{
    invert_jacobians, jacobian_of_field, push_through_warp, sample, scale_deformation, transform_vectors,
    DeformationField, SamplingField, Vec2,
};
use lw_core::{Border, Raster};
use nalgebra::Matrix2;
use proptest::prelude::*;

fn affine() -> impl Strategy<Value = Affine2> {
    (0.8..1.25f64, -0.2..0.2f64, -3.0..3.0f64, -0.2..0.2f64, 0.8..1.25f64, -3.0..3.0f64)
        .prop_map(|(a, b, c, d, e, f)| Affine2([[a, b, c], [d, e, f]]))
}

/// Sampling field of the affine warp `f`: stored on the destination grid,
/// naming source coordinates `f⁻¹(q)`.
fn warp_field(f: &Affine2, w: usize, h: usize) -> SamplingField {
    let inv = f.inverse().unwrap();
    SamplingField::from_fn(w, h, |x, y| inv.apply(Vec2::new(x as f64, y as f64)))
}

fn raster(w: usize, h: usize, seed: u64) -> Raster {
    Raster::from_fn(w, h, 3, |x, y, o| {
        for (c, v) in o.iter_mut().enumerate() {
            *v = (((x * 31 + y * 17 + c * 7) as u64 ^ seed) % 97) as f64 / 96.0;
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jacobian_is_exact_on_affine_fields(a in affine()) {
        let f = SamplingField::from_fn(24, 20, |x, y| a.apply(Vec2::new(x as f64, y as f64)));
        let j = jacobian_of_field(&f, 1.0, 1.0).unwrap();
        for y in 1..19 {
            for x in 1..23 {
                prop_assert!((j.get(x, y) - a.linear()).abs().max() < 1e-10);
            }
        }
    }

    #[test]
    fn pushing_composes(f in affine(), g in affine(), b in prop::array::uniform6(-0.05..0.05f64)) {
        let (w, h) = (40, 40);
        // A deformation linear in position survives repeated bilinear resampling.
        let d = DeformationField::from_fn(w, h, |x, y| {
            let (x, y) = (x as f64, y as f64);
            Vec2::new(b[0] * x + b[1] * y + b[2] * 10.0, b[3] * x + b[4] * y + b[5] * 10.0)
        });
        let two_step = push_through_warp(&push_through_warp(&d, &warp_field(&f, w, h), 1.0, 1.0).unwrap().field,
            &warp_field(&g, w, h), 1.0, 1.0).unwrap().field;
        let gf = g.then_after(&f);
        let direct = push_through_warp(&d, &warp_field(&gf, w, h), 1.0, 1.0).unwrap().field;
        let (fi, gi) = (f.inverse().unwrap(), g.inverse().unwrap());
        // Valid pixels: every bilinear tap of the second resampling lands
        // where the first one did not clamp.
        let inside = |p: Vec2, m: f64| p.x >= m && p.y >= m && p.x <= w as f64 - 1.0 - m && p.y <= h as f64 - 1.0 - m;
        for y in 0..h {
            for x in 0..w {
                let q = gi.apply(Vec2::new(x as f64, y as f64));
                if inside(q, 1.0) && inside(fi.apply(q), 3.0) {
                    prop_assert!((two_step.get(x, y) - direct.get(x, y)).norm() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn sampling_is_linear_in_the_image(a in affine(), s in -2.0..2.0f64, t in -2.0..2.0f64, seed in 0u64..1000) {
        let (w, h) = (20, 16);
        let field = warp_field(&a, w, h);
        let (i1, i2) = (raster(w, h, seed), raster(w, h, seed.wrapping_mul(7) + 3));
        let mix = Raster::from_vec(w, h, 3, i1.data().iter().zip(i2.data()).map(|(p, q)| s * p + t * q).collect()).unwrap();
        for border in [Border::Clamp, Border::Zero] {
            let lhs = sample(&field, &mix, border).unwrap();
            let (r1, r2) = (sample(&field, &i1, border).unwrap(), sample(&field, &i2, border).unwrap());
            for ((l, p), q) in lhs.data().iter().zip(r1.data()).zip(r2.data()) {
                prop_assert!((l - (s * p + t * q)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn transform_then_inverse_restores(a in affine(), v in prop::array::uniform2(-5.0..5.0f64)) {
        let f = SamplingField::from_fn(12, 10, |x, y| a.apply(Vec2::new(x as f64, y as f64)));
        let j = jacobian_of_field(&f, 1.0, 1.0).unwrap();
        let d = DeformationField::from_fn(12, 10, |x, y| Vec2::new(v[0] + x as f64 * 0.1, v[1] - y as f64 * 0.2));
        let there = transform_vectors(&j, &d).unwrap();
        let back = transform_vectors(&invert_jacobians(&j), &there).unwrap();
        for y in 0..10 {
            for x in 0..12 {
                if j.is_valid(x, y) {
                    prop_assert!((back.get(x, y) - d.get(x, y)).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn scaling_is_linear(t1 in 0.0..0.5f64, t2 in 0.0..0.5f64, v in prop::array::uniform2(-9.0..9.0f64)) {
        let d = DeformationField::from_fn(6, 5, |x, y| Vec2::new(v[0] * x as f64, v[1] + y as f64));
        let lhs = scale_deformation(&d, t1 + t2);
        let (a, b) = (scale_deformation(&d, t1), scale_deformation(&d, t2));
        for i in 0..lhs.values().len() {
            prop_assert!((lhs.values()[i] - (a.values()[i] + b.values()[i])).norm() < 1e-12);
        }
    }
}

#[test]
fn singular_jacobians_fall_back_to_identity_and_are_flagged() {
    // Collapse the x axis on the right half.
    let f = SamplingField::from_fn(16, 8, |x, y| Vec2::new(if x < 8 { x as f64 } else { 8.0 }, y as f64));
    let j = invert_jacobians(&jacobian_of_field(&f, 1.0, 1.0).unwrap());
    assert!(!j.is_valid(12, 4));
    assert_eq!(j.get(12, 4), Matrix2::identity());
    assert!(j.is_valid(3, 4));
    assert!(j.degenerate_fraction() > 0.3);
}

#[test]
fn identity_warp_leaves_deformations_unchanged() {
    let d = DeformationField::from_fn(9, 7, |x, y| Vec2::new(x as f64 * 0.5, -(y as f64)));
    let p = push_through_warp(&d, &SamplingField::identity(9, 7), 1.0, 1.0).unwrap();
    assert_eq!(p.field, d);
    assert_eq!(p.transform.degenerate_fraction(), 0.0);
}

#[test]
fn translation_warp_shifts_a_deformation() {
    // Destination = source + (3, 0); the deformation moves along unchanged.
    let (w, h) = (20, 10);
    let d = DeformationField::from_fn(w, h, |x, _| Vec2::new(x as f64, 1.0));
    let shift = warp_field(&Affine2::translation(3.0, 0.0), w, h);
    let p = push_through_warp(&d, &shift, 1.0, 1.0).unwrap().field;
    for x in 3..w {
        assert!((p.get(x, 4) - Vec2::new((x - 3) as f64, 1.0)).norm() < 1e-12);
    }
}

#[test]
fn non_finite_inputs_are_rejected() {
    let mut d = DeformationField::zeros(4, 4);
    d.set(1, 1, Vec2::new(f64::NAN, 0.0));
    assert!(push_through_warp(&d, &SamplingField::identity(4, 4), 1.0, 1.0).is_err());
}
