//! Property tests over the metric, image-format and tool invariants.

use proptest::prelude::*;

use optir_core::degrade::{apply_degradation, DegParams, ALL_KINDS};
use optir_core::image::Image;
use optir_core::io::{load_image, save_image};
use optir_core::metrics::{gsim, metric_vector, psnr, ssim};
use optir_core::planner::grpo_advantages;
use optir_core::prng::Prng;
use optir_core::tools::{ToolId, ToolRegistry};

fn seeded_image(seed: u64, h: usize, w: usize, c: usize) -> Image {
    let mut rng = Prng::new(seed);
    let data = (0..h * w * c).map(|_| rng.uniform()).collect();
    Image::new(h, w, c, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn metric_vector_ranges(seed_a in 0u64..10_000, seed_b in 0u64..10_000,
                            h in 8usize..24, w in 8usize..24, gray in any::<bool>()) {
        let c = if gray { 1 } else { 3 };
        let a = seeded_image(seed_a, h, w, c);
        let b = seeded_image(seed_b, h, w, c);
        let m = metric_vector(&a, &b).unwrap();
        prop_assert!((0.0..=100.0).contains(&m.psnr));
        prop_assert!((-1.0..=1.0).contains(&m.ssim));
        prop_assert!((0.0..=1.0).contains(&m.gsim));
        prop_assert!((0.0..1.0).contains(&m.nr_sharp));
        prop_assert!((0.0..1.0).contains(&m.nr_balance));
        prop_assert!(m.psnr.is_finite() && m.ssim.is_finite());
    }

    #[test]
    fn fr_metrics_symmetric(seed_a in 0u64..10_000, seed_b in 0u64..10_000) {
        let a = seeded_image(seed_a, 16, 16, 3);
        let b = seeded_image(seed_b, 16, 16, 3);
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((gsim(&a, &b).unwrap() - gsim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn psnr_cap_is_exact(seed in 0u64..10_000) {
        let a = seeded_image(seed, 12, 12, 3);
        prop_assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    }

    #[test]
    fn image_roundtrip_bits(seed in 0u64..10_000, h in 8usize..20, w in 8usize..20,
                            gray in any::<bool>()) {
        let c = if gray { 1 } else { 3 };
        let img = seeded_image(seed, h, w, c);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.opimg");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        prop_assert_eq!(img.data(), back.data());
    }

    #[test]
    fn tools_preserve_shape_and_range(seed in 0u64..10_000, tool in 0usize..10,
                                      h in 8usize..24, w in 8usize..24) {
        let registry = ToolRegistry::default_registry();
        let img = seeded_image(seed, h, w, 3);
        let out = registry.apply_tool(ToolId(tool), &img).unwrap();
        prop_assert!(out.same_shape(&img));
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn degradations_preserve_shape_and_range(seed in 0u64..10_000, kind in 0usize..8) {
        let img = seeded_image(seed, 16, 16, 3);
        let params = DegParams::default_for(ALL_KINDS[kind]);
        let out = apply_degradation(&img, &params, &mut Prng::new(seed ^ 0xd36)).unwrap();
        prop_assert!(out.same_shape(&img));
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn advantages_zero_sum_unit_scale(rewards in prop::collection::vec(0.0f64..1.0, 2..16)) {
        let advs = grpo_advantages(&rewards, 1e-8);
        let sum: f64 = advs.iter().sum();
        prop_assert!(sum.abs() < 1e-9, "sum {sum}");
        prop_assert!(advs.iter().all(|a| a.is_finite()));
    }
}
