use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use waterformer::color::{rgb_to_yiq, rgb_to_yiq_pixel, yiq_to_rgb, yiq_to_rgb_pixel};
use waterformer::physics::{
    degrade, make_water_type, recon_vars, recover_analytic, soft_reconstruct_image, DegradationParams, Depth,
    WaterTable, WATER_TYPES,
};
use waterformer::ImageRgb;

fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> ImageRgb {
    ImageRgb::from_fn(h, w, |_, _| std::array::from_fn(|_| rng.random_range(0.0..1.0))).unwrap()
}

fn random_params(rng: &mut impl Rng, h: usize, w: usize) -> DegradationParams {
    let background = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let t = (0..h * w * 3).map(|_| rng.random_range(0.1..=1.0)).collect();
    DegradationParams::new(background, h, w, t).unwrap()
}

#[test]
fn analytic_recovery_inverts_degradation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(4..40), rng.random_range(4..40));
        let clean = random_image(&mut rng, h, w);
        let params = random_params(&mut rng, h, w);
        let (degraded, clamp) = degrade(&clean, &params).unwrap();
        assert!(!clamp.clipped(), "a convex combination stays in range");
        let (recovered, _) = recover_analytic(&degraded, &params, 0.1).unwrap();
        for (a, b) in clean.pixels().iter().zip(recovered.pixels()) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-6, "max error {worst:e}");
}

#[test]
fn soft_reconstruction_with_true_variables_recovers_the_scene() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let clean = random_image(&mut rng, 12, 9);
    let params = random_params(&mut rng, 12, 9);
    let (degraded, _) = degrade(&clean, &params).unwrap();
    let (out, _) = soft_reconstruct_image(&degraded, &recon_vars::<f64>(&params)).unwrap();
    for (a, b) in clean.pixels().iter().zip(out.pixels()) {
        assert!((a - b).abs() <= 1e-9);
    }
}

#[test]
fn recovery_refuses_transmission_below_the_floor() {
    let params = DegradationParams::uniform([0.2, 0.4, 0.5], 4, 4, [0.04, 0.5, 0.5]).unwrap();
    let img = ImageRgb::filled(4, 4, [0.3; 3]).unwrap();
    assert!(recover_analytic(&img, &params, 0.05).is_err());
    assert!(DegradationParams::uniform([0.2; 3], 4, 4, [0.0, 0.5, 0.5]).is_err());
    assert!(DegradationParams::uniform([1.2, 0.2, 0.2], 4, 4, [0.5; 3]).is_err());
}

#[test]
fn builtin_water_types_are_physical_and_darken_with_depth() {
    let table = WaterTable::builtin();
    for id in WATER_TYPES {
        let shallow = make_water_type(&table, id, &Depth::Constant(0.5), 2, 2).unwrap();
        let deep = make_water_type(&table, id, &Depth::Constant(5.0), 2, 2).unwrap();
        for (s, d) in shallow.transmission().iter().zip(deep.transmission()) {
            assert!(*d > 0.0 && d < s && *s <= 1.0, "type {id}");
        }
    }
    assert!(make_water_type(&table, "nope", &Depth::Constant(1.0), 2, 2).is_err());
}

#[test]
fn yiq_round_trip_is_exact_to_a_micro() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let img = random_image(&mut rng, 8, 8);
        let (back, _) = yiq_to_rgb(&rgb_to_yiq(&img)).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-6, "{worst:e}");
}

#[test]
fn yiq_spot_values() {
    assert_eq!(rgb_to_yiq_pixel([1.0, 0.0, 0.0]), [0.299, 0.596, 0.211]);
    assert_eq!(rgb_to_yiq_pixel([0.0, 1.0, 0.0]), [0.587, -0.274, -0.523]);
    assert_eq!(rgb_to_yiq_pixel([0.0, 0.0, 1.0]), [0.114, -0.322, 0.312]);
    // white has unit luma and (numerically) no chroma
    let white = rgb_to_yiq_pixel([1.0; 3]);
    assert!((white[0] - 1.0).abs() < 1e-15 && white[1].abs() < 1e-15 && white[2].abs() < 1e-15);
    let gray = yiq_to_rgb_pixel([0.4, 0.0, 0.0]);
    assert_eq!(gray, [0.4; 3]);
}
