use coreg_core::inlet::{probe_offset, ProbeResponse};
use coreg_core::sim::{simulate_session, SimConfig, EEG_RATE_HZ, GAZE_RATE_HZ, INPUT_RATE_HZ};
use coreg_core::stream::{
    dejitter_timestamps, fit_clock_offset, synchronize, ClockOffsetMeasurement, StreamKind,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_alignment_error_ms(seed: u64, kind: StreamKind, rate: f64) -> f64 {
    let cfg = SimConfig {
        seed,
        ..Default::default()
    };
    let (rec, _) = simulate_session(&cfg).unwrap();
    let s = rec.stream_of_kind(kind).unwrap();
    let (aligned, _) = synchronize(&s.info, &s.samples, &s.clock_offsets).unwrap();
    aligned
        .timestamps
        .iter()
        .enumerate()
        .map(|(k, t)| (t - k as f64 / rate).abs() * 1000.0)
        .fold(0.0, f64::max)
}

#[test]
fn regular_streams_align_within_a_millisecond() {
    for seed in 0..3 {
        for (kind, rate) in [
            (StreamKind::Gaze, GAZE_RATE_HZ),
            (StreamKind::Eeg, EEG_RATE_HZ),
            (StreamKind::Input, INPUT_RATE_HZ),
        ] {
            let e = max_alignment_error_ms(seed, kind, rate);
            assert!(e <= 1.0, "seed {seed} {kind:?}: {e} ms");
        }
    }
}

#[test]
fn drift_and_offset_are_recovered_from_probes() {
    let cfg = SimConfig {
        seed: 4,
        ..Default::default()
    };
    let (rec, _) = simulate_session(&cfg).unwrap();
    let g = rec.stream_of_kind(StreamKind::Gaze).unwrap();
    let m = fit_clock_offset(&g.clock_offsets).unwrap();
    // local = t (1 + p) + o, so the correction is t = local (1 / (1 + p)) - o / (1 + p)
    let (o, p) = (cfg.clock.gaze.offset_s, cfg.clock.gaze.drift_ppm * 1e-6);
    assert!((m.intercept + o / (1.0 + p)).abs() < 1e-4, "{m:?}");
    assert!((m.slope + p / (1.0 + p)).abs() * 1e6 < 2.0, "{m:?}");
}

#[test]
fn symmetric_latency_probes_are_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let true_offset = 0.75;
    let mut err = 0.0;
    for _ in 0..1000 {
        let t0: f64 = rng.gen_range(0.0..100.0);
        let one_way: f64 = rng.gen_range(0.0001..0.01);
        let turnaround: f64 = rng.gen_range(0.0..0.002);
        let t1 = t0 + one_way + true_offset;
        let t2 = t1 + turnaround;
        let t3 = t2 - true_offset + one_way;
        let m = probe_offset(
            &ProbeResponse {
                probe_id: 0,
                t0,
                t1,
                t2,
            },
            t3,
        )
        .unwrap();
        err += m.measured_offset - true_offset;
    }
    assert!((err / 1000.0).abs() * 1000.0 < 0.1);
}

proptest! {
    #[test]
    fn exact_linear_offsets_are_recovered(a in -10.0f64..10.0, ppm in -500.0f64..500.0, n in 2usize..40) {
        let b = ppm * 1e-6;
        let ms: Vec<ClockOffsetMeasurement> = (0..n)
            .map(|k| {
                let t = k as f64 * 5.0;
                ClockOffsetMeasurement { local_time: t, measured_offset: a + b * t }
            })
            .collect();
        let m = fit_clock_offset(&ms).unwrap();
        prop_assert!((m.intercept - a).abs() < 1e-9);
        prop_assert!((m.slope - b).abs() < 1e-12);
        // correction is monotone for any realistic drift
        prop_assert!(m.apply(1.0) < m.apply(1.0 + 1e-6));
    }

    #[test]
    fn dejitter_keeps_order_and_bounds_error(seed in any::<u64>(), jitter_ms in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rate = 300.0;
        let truth: Vec<f64> = (0..3000).map(|k| 10.0 + k as f64 / rate).collect();
        let noisy: Vec<f64> = truth.iter().map(|t| t + rng.gen_range(-1.0..=1.0) * jitter_ms / 1000.0).collect();
        let out = dejitter_timestamps(&noisy, rate, 0.5).unwrap();
        prop_assert!(out.windows(2).all(|w| w[1] > w[0]));
        let worst = out.iter().zip(&truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(worst <= jitter_ms / 1000.0 + 1e-9);
    }
}
