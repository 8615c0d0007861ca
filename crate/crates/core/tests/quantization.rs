mod common;

use common::quantref;
use ircount::nn::Mode;
use ircount::quant::{fake_quant, fold_batchnorm, QuantParams, Requant};
use ircount::zoo::Frame;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn integer_forward_matches_reference_on_100_models() {
    for seed in 0..100 {
        quantref::check_bit_exact(seed, 5).unwrap();
    }
}

#[test]
fn folded_model_matches_unfolded() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = quantref::random_float_model(&mut rng);
        let f = fold_batchnorm(&m);
        let data: Vec<Vec<Frame>> = (0..6)
            .map(|_| quantref::random_window(&mut rng, m.spec.window))
            .collect();
        let wins: Vec<&[Frame]> = data.iter().map(|w| w.as_slice()).collect();
        let a = m.forward_batch(&wins, Mode::Infer).unwrap().logits;
        let b = f.forward_batch(&wins, Mode::Infer).unwrap().logits;
        for (ra, rb) in a.iter().zip(&b) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-5, "{}: {x} vs {y}", m.spec);
            }
        }
    }
}

proptest! {
    #[test]
    fn fake_quant_is_idempotent(x in -50.0f64..50.0, lo in -10.0f64..0.0, hi in 0.0f64..10.0) {
        let qp = QuantParams::from_range(lo, hi);
        let once = fake_quant(x, &qp);
        prop_assert_eq!(fake_quant(once, &qp), once);
    }

    #[test]
    fn fake_quant_error_within_half_step(lo in -10.0f64..0.0, hi in 0.0f64..10.0, t in 0.0f64..1.0) {
        let qp = QuantParams::from_range(lo, hi);
        let s = qp.scale as f64;
        // inside the representable range
        let a = qp.dequantize(qp.qmin());
        let b = qp.dequantize(qp.qmax());
        let x = a + t * (b - a);
        prop_assert!((fake_quant(x, &qp) - x).abs() <= s / 2.0 * (1.0 + 1e-9));
    }

    #[test]
    fn symmetric_fake_quant_error_within_half_step(m in 1e-3f64..10.0, t in -1.0f64..1.0) {
        let qp = QuantParams::symmetric(m);
        let x = t * qp.dequantize(127);
        prop_assert!((fake_quant(x, &qp) - x).abs() <= qp.scale as f64 / 2.0 * (1.0 + 1e-9));
    }

    #[test]
    fn requant_matches_reference_rounding(m in 1e-6f64..4.0, acc in -20_000_000i32..20_000_000) {
        let r = Requant::from_real(m).unwrap();
        prop_assert!((1 << 30..1i64 << 31).contains(&(r.multiplier as i64)));
        prop_assert_eq!(r.apply(acc), quantref::rescale(acc as i64, r.multiplier, r.shift));
    }
}
