use coreg_core::gaze::{detect_fixations_ivt, gaze_samples, GazeSample, IvtParams};
use coreg_core::sim::{simulate_session, SimConfig};
use coreg_core::stream::{synchronize, StreamKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RATE: f64 = 300.0;
const RAMP: usize = 9;

/// Noise-free scanpath: still periods joined by linear ramps. Returns samples
/// and the true fixation positions.
fn scanpath(seed: u64) -> (Vec<GazeSample>, Vec<(f64, f64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_fix = rng.gen_range(5..15);
    let mut points: Vec<(f64, f64)> = Vec::new();
    while points.len() < n_fix {
        let p = (
            rng.gen_range(0.0..1920.0f64).round(),
            rng.gen_range(0.0..1080.0f64).round(),
        );
        // saccade velocity must clear the threshold on every ramp step
        if points
            .last()
            .is_none_or(|q: &(f64, f64)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt() > 60.0)
        {
            points.push(p);
        }
    }
    let mut out = Vec::new();
    let mut k = 0usize;
    let mut push = |x: f64, y: f64, out: &mut Vec<GazeSample>| {
        out.push(GazeSample {
            t: k as f64 / RATE,
            x,
            y,
            valid: true,
        });
        k += 1;
    };
    for (i, &(x, y)) in points.iter().enumerate() {
        for _ in 0..rng.gen_range(30..120) {
            push(x, y, &mut out);
        }
        if let Some(&(nx, ny)) = points.get(i + 1) {
            for s in 1..=RAMP {
                let f = s as f64 / (RAMP + 1) as f64;
                push(x + (nx - x) * f, y + (ny - y) * f, &mut out);
            }
        }
    }
    (out, points)
}

#[test]
fn noise_free_scanpaths_are_recovered_exactly() {
    for seed in 0..50 {
        let (samples, truth) = scanpath(seed);
        let fx = detect_fixations_ivt(&samples, &IvtParams::default()).unwrap();
        assert_eq!(fx.len(), truth.len(), "seed {seed}");
        for (f, (x, y)) in fx.iter().zip(&truth) {
            assert!(
                (f.centroid_x - x).abs() <= 0.5 && (f.centroid_y - y).abs() <= 0.5,
                "seed {seed}: {f:?} vs {x},{y}"
            );
        }
    }
}

#[test]
fn short_blinks_inside_a_fixation_are_bridged() {
    let (mut samples, truth) = scanpath(7);
    // 50 ms of lost tracking in the middle of the first fixation
    for s in samples.iter_mut().skip(10).take(15) {
        s.valid = false;
        s.x = f64::NAN;
    }
    let fx = detect_fixations_ivt(&samples, &IvtParams::default()).unwrap();
    assert_eq!(fx.len(), truth.len());
}

#[test]
fn simulated_noise_free_gaze_matches_ground_truth() {
    for seed in 0..5 {
        let cfg = SimConfig {
            seed,
            duration_s: 30.0,
            n_sentences: 6,
            words_per_sentence: 6,
            gaze_noise_px: 0.0,
            ..Default::default()
        };
        let (rec, truth) = simulate_session(&cfg).unwrap();
        let g = rec.stream_of_kind(StreamKind::Gaze).unwrap();
        let (aligned, _) = synchronize(&g.info, &g.samples, &g.clock_offsets).unwrap();
        let fx =
            detect_fixations_ivt(&gaze_samples(&aligned).unwrap(), &IvtParams::default()).unwrap();
        assert_eq!(fx.len(), truth.fixations.len(), "seed {seed}");
        for (f, t) in fx.iter().zip(&truth.fixations) {
            // float32 storage limits the positional precision
            assert!(
                (f.centroid_x - t.x).abs() <= 0.5 && (f.centroid_y - t.y).abs() <= 0.5,
                "seed {seed}"
            );
            assert!(
                (f.start_t - t.start_s).abs() < 1e-3,
                "seed {seed}: {} vs {}",
                f.start_t,
                t.start_s
            );
            assert!(
                (f.duration_ms() - t.duration_ms).abs() <= 1000.0 / 300.0 + 1.0,
                "seed {seed}"
            );
        }
    }
}
