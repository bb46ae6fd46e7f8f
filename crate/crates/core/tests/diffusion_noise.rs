use aseg_core::prompt::{noise_schedule, DiffusionConfig, PromptEncoder};
use aseg_core::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn schedule_is_reciprocal_over_full_range() {
    let cfg = DiffusionConfig::default();
    for t in 0..=10_000u32 {
        let s = noise_schedule(t as i64).unwrap();
        // 1/n is correctly rounded, so the product is within one ulp of 1
        let back = s * (t as f64 + 1.0);
        assert!((back - 1.0).abs() <= f64::EPSILON, "t={t}");
        assert_eq!(s.to_bits(), (1.0 / f64::from(t + 1)).to_bits());
        assert_eq!(cfg.noise_std(t as usize), s);
    }
}

#[test]
fn injected_noise_has_scheduled_std() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let enc = PromptEncoder::new(&mut store, 2, 16, 16, DiffusionConfig::default(), &mut rng).unwrap();
    // 13 × 32 × 16 × 16 = 106 496 draws per step
    let b = 13;
    for t in [0usize, 1, 4, 9] {
        let mut g = Graph::<f64>::no_grad();
        let f_i = g.constant(Tensor::zeros(&[b, 32, 16, 16]));
        let c = g.constant(Tensor::zeros(&[b, 1, 16, 16]));
        let mut noise = ChaCha8Rng::seed_from_u64(100 + t as u64);
        let out = enc.forward_diffuse(&mut g, f_i, c, &vec![t; b], Some(&mut noise)).unwrap();
        let v = g.value(out).data();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let want = 1.0 / (t as f64 + 1.0);
        assert!(((std - want) / want).abs() < 0.02, "t={t}: std {std} vs {want}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_is_positive_and_decreasing(t in 0i64..1_000_000) {
        let a = noise_schedule(t).unwrap();
        let b = noise_schedule(t + 1).unwrap();
        prop_assert!(a > b && b > 0.0);
    }
}
