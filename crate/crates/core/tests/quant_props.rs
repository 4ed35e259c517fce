use proptest::prelude::*;
use quantcal_core::quant::{
    activation_qparams, compute_weight_qparams, fake_quantize, fake_quantize_value,
};
use quantcal_core::Tensor;

fn range() -> impl Strategy<Value = (f32, f32)> {
    (-100.0f32..100.0, 0.001f32..200.0).prop_map(|(lo, w)| (lo, lo + w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn activation_params_are_valid((lo, hi) in range()) {
        let qp = activation_qparams(lo, hi);
        prop_assert!(qp.is_valid());
        prop_assert!((0..=255).contains(&qp.zero_point));
        let (rlo, rhi) = qp.representable_range(0);
        // zero sits on the grid and the observed range is (nearly) covered
        prop_assert!(rlo <= 0.0 && rhi >= 0.0);
        let s = qp.scale[0];
        prop_assert!(rlo <= lo.min(0.0) + s && rhi >= hi.max(0.0) - s);
    }

    #[test]
    fn roundtrip_error_within_half_step((lo, hi) in range(), t in 0.0f32..=1.0) {
        let qp = activation_qparams(lo, hi);
        let (lo0, hi0) = (lo.min(0.0), hi.max(0.0));
        let x = lo0 + t * (hi0 - lo0);
        let (rlo, rhi) = qp.representable_range(0);
        prop_assume!(x >= rlo && x <= rhi);
        let s = qp.scale[0];
        let y = fake_quantize_value(x, s, qp.zero_point as f32, 0.0, 255.0);
        prop_assert!((x - y).abs() <= s / 2.0 + 1e-7 + f32::EPSILON * x.abs(),
            "x {x} y {y} scale {s}");
    }

    #[test]
    fn fake_quantize_is_idempotent((lo, hi) in range(), xs in prop::collection::vec(-300.0f32..300.0, 1..64)) {
        let qp = activation_qparams(lo, hi);
        let x = Tensor::new(vec![xs.len()], xs).unwrap();
        let once = fake_quantize(&x, &qp);
        prop_assert_eq!(fake_quantize(&once, &qp), once);
    }

    #[test]
    fn fake_quantize_is_monotone((lo, hi) in range(), a in -300.0f32..300.0, b in -300.0f32..300.0) {
        let qp = activation_qparams(lo, hi);
        let (s, zp) = (qp.scale[0], qp.zero_point as f32);
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(fake_quantize_value(a, s, zp, 0.0, 255.0) <= fake_quantize_value(b, s, zp, 0.0, 255.0));
    }

    #[test]
    fn at_most_256_distinct_values((lo, hi) in range(), xs in prop::collection::vec(-300.0f32..300.0, 300..600)) {
        let qp = activation_qparams(lo, hi);
        let y = fake_quantize(&Tensor::new(vec![xs.len()], xs).unwrap(), &qp);
        let mut v: Vec<u32> = y.data().iter().map(|f| f.to_bits()).collect();
        v.sort_unstable();
        v.dedup();
        prop_assert!(v.len() <= 256);
    }

    #[test]
    fn weight_quantization_is_bounded_and_idempotent(
        rows in 1usize..6,
        cols in 1usize..10,
        seed in prop::collection::vec(-5.0f32..5.0, 60),
    ) {
        let w = Tensor::from_fn(vec![rows, cols], |i| seed[i % seed.len()] * (1.0 + (i / cols) as f32));
        let qp = compute_weight_qparams(&w, 0);
        prop_assert!(qp.is_valid());
        prop_assert_eq!(qp.zero_point, 0);
        let q = fake_quantize(&w, &qp);
        for (i, (a, b)) in w.data().iter().zip(q.data()).enumerate() {
            let s = qp.scale[i / cols];
            prop_assert!((a - b).abs() <= s / 2.0 + 1e-7 + f32::EPSILON * a.abs());
        }
        prop_assert_eq!(fake_quantize(&q, &qp), q);
    }
}

#[test]
fn ten_thousand_values_within_observed_ranges() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let lo: f32 = rng.gen_range(-50.0..10.0);
        let hi: f32 = lo + rng.gen_range(0.01..80.0);
        let qp = activation_qparams(lo, hi);
        let (s, zp) = (qp.scale[0], qp.zero_point as f32);
        let (rlo, rhi) = qp.representable_range(0);
        for _ in 0..500 {
            let x: f32 = rng.gen_range(lo.max(rlo)..=hi.min(rhi));
            let y = fake_quantize_value(x, s, zp, 0.0, 255.0);
            assert!(
                (x - y).abs() <= s / 2.0 + 1e-7 + f32::EPSILON * x.abs(),
                "{x} {y} {s}"
            );
        }
    }
}
