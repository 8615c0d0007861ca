mod common;

use common::blobs::{self, flood_fill};
use ircount::baseline::*;
use ircount::zoo::{Frame, FRAME_PIXELS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn labeling_matches_flood_fill_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..2000 {
        let side = rng.random_range(1..=16);
        let density = rng.random_range(0.05..0.8);
        let mask: Vec<bool> = (0..side * side).map(|_| rng.random_bool(density)).collect();
        for conn in [Connectivity::Four, Connectivity::Eight] {
            assert_eq!(label_components(&mask, side, conn), flood_fill(&mask, side, conn));
        }
    }
}

#[test]
fn diagonal_pixels_join_only_under_eight_connectivity() {
    let mask = [true, false, false, true];
    assert_eq!(label_components(&mask, 2, Connectivity::Four).1, 2);
    assert_eq!(label_components(&mask, 2, Connectivity::Eight).1, 1);
}

#[test]
fn scripted_sessions_give_exact_counts_after_warmup() {
    let cfg = BaselineConfig::default();
    let script = blobs::script(cfg.warmup);
    let counts = run_baseline(&blobs::scripted_session(&script, 0.0), &cfg).unwrap();
    assert_eq!(&counts[cfg.warmup..], &script[cfg.warmup..]);
}

#[test]
fn counts_do_not_depend_on_ambient_offset() {
    let cfg = BaselineConfig::default();
    let script = blobs::script(cfg.warmup);
    let base = run_baseline(&blobs::scripted_session(&script, 0.0), &cfg).unwrap();
    for offset in [-6.0, 3.5, 10.0] {
        let shifted = run_baseline(&blobs::scripted_session(&script, offset), &cfg).unwrap();
        assert_eq!(shifted, base, "offset {offset}");
    }
}

#[test]
fn ema_smoothing_closed_form() {
    let cfg = BaselineConfig {
        interp_factor: 1,
        alpha: 0.3,
        ..Default::default()
    };
    let mut counter = BaselineCounter::new(cfg.clone()).unwrap();
    let xs = [20.0, 25.0, 21.0, 30.0, 22.5, 19.0];
    for (t, &x) in xs.iter().enumerate() {
        let g = counter.preprocess(&[x as f32; FRAME_PIXELS]);
        // s_t = (1-a)^t x_0 + sum_{k=1..t} a (1-a)^(t-k) x_k
        let a = cfg.alpha;
        let mut want = (1.0 - a).powi(t as i32) * xs[0];
        for k in 1..=t {
            want += a * (1.0 - a).powi((t - k) as i32) * xs[k];
        }
        assert!((g.at(3, 4) - want).abs() < 1e-9, "t={t}: {} vs {want}", g.at(3, 4));
    }
}

#[test]
fn two_separate_blobs_are_two_people() {
    let cfg = BaselineConfig::default();
    let side = cfg.side();
    let bg = Grid::filled(side, 20.0);
    let mut f = bg.clone();
    for &(r, c) in &[(2, 2), (2, 3), (3, 2), (3, 3), (11, 11), (11, 12), (12, 11)] {
        f.data[r * side + c] = 25.0;
    }
    let blobs = segment(&f, &bg, &cfg).unwrap();
    assert_eq!(blobs.len(), 2);
    assert_eq!(blobs[0].area, 4);
    assert_eq!(blobs[1].area, 3);
    assert_eq!(blobs[0].centroid, (2.5, 2.5));
    assert_eq!(classify_and_count(&blobs, &cfg), 2);
}

#[test]
fn oversize_and_single_pixel_blobs_are_not_people() {
    let cfg = BaselineConfig::default();
    let side = cfg.side();
    let bg = Grid::filled(side, 20.0);
    let mut f = bg.clone();
    for r in 0..7 {
        for c in 0..7 {
            f.data[r * side + c] = 26.0;
        }
    }
    f.data[14 * side + 14] = 26.0;
    let blobs = segment(&f, &bg, &cfg).unwrap();
    assert_eq!(blobs.iter().map(|b| b.area).collect::<Vec<_>>(), vec![49, 1]);
    assert_eq!(classify_and_count(&blobs, &cfg), 0);
}

#[test]
fn count_is_clamped_to_label_range() {
    let cfg = BaselineConfig::default();
    let side = cfg.side();
    let bg = Grid::filled(side, 20.0);
    let mut f = bg.clone();
    for k in 0..5 {
        let (r, c) = (1 + 3 * k, 1);
        f.data[r * side + c] = 25.0;
        f.data[r * side + c + 1] = 25.0;
    }
    let blobs = segment(&f, &bg, &cfg).unwrap();
    assert_eq!(blobs.len(), 5);
    assert_eq!(classify_and_count(&blobs, &cfg), MAX_COUNT);
}

#[test]
fn background_tracks_slow_drift() {
    let cfg = BaselineConfig::default();
    let mut counter = BaselineCounter::new(cfg.clone()).unwrap();
    let cold: Frame = [20.0; FRAME_PIXELS];
    for _ in 0..cfg.warmup {
        counter.step(&cold);
    }
    let warm: Frame = [21.0; FRAME_PIXELS];
    let n = 400;
    // the first few warm frames are still ramping through the EMA smoother
    for _ in 0..n {
        assert_eq!(counter.step(&warm), 0);
    }
    let bg = counter.background().unwrap().at(5, 5);
    assert!((bg - 21.0).abs() < 1.0 * (1.0 - cfg.beta).powi(n - 20), "{bg}");
}

#[test]
fn config_text_round_trip_and_errors() {
    let mut cfg = BaselineConfig::default();
    cfg.set("connectivity", "4").unwrap();
    cfg.set("delta_t", "2.25").unwrap();
    assert_eq!(BaselineConfig::parse(&cfg.to_text()).unwrap(), cfg);
    assert!(BaselineConfig::parse("alpha = 0").is_err());
    assert!(BaselineConfig::parse("colour = red").is_err());
    assert!(BaselineConfig::parse("min_area = 9\nmax_area = 3").is_err());
    assert!(BaselineConfig::parse("alpha").is_err());
}

proptest! {
    #[test]
    fn upsampling_keeps_native_samples(vals in proptest::collection::vec(-5.0f64..40.0, FRAME_PIXELS), factor in 1usize..5) {
        let mut f = [0f32; FRAME_PIXELS];
        for (d, v) in f.iter_mut().zip(&vals) {
            *d = *v as f32;
        }
        let g = Grid::from_frame(&f);
        let up = bilinear_upsample(&g, factor);
        for r in 0..8 {
            for c in 0..8 {
                prop_assert!((up.at(r * factor, c * factor) - g.at(r, c)).abs() < 1e-9);
            }
        }
    }
}
