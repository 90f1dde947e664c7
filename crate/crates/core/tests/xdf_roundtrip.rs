use coreg_core::sim::{simulate_session, SimConfig};
use coreg_core::stream::{
    ChannelFormat, ClockOffsetMeasurement, SampleValues, StreamInfo, StreamKind, TimedSamples,
};
use coreg_core::xdf::{
    decode_session, decode_session_with, encode_session, DecodeOptions, RecordedStream,
    SessionRecording,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_sim(seed: u64) -> SimConfig {
    SimConfig {
        seed,
        duration_s: 4.0,
        n_sentences: 2,
        words_per_sentence: 3,
        ..Default::default()
    }
}

fn numeric_stream(
    id: &str,
    rate: f64,
    stamps: Vec<f64>,
    values: Vec<f64>,
    ch: usize,
) -> RecordedStream {
    let labels: Vec<String> = (0..ch).map(|i| format!("c{i}")).collect();
    let labels: Vec<&str> = labels.iter().map(String::as_str).collect();
    let mut info = StreamInfo::new(id, StreamKind::Eeg, &labels, rate);
    info.channel_format = ChannelFormat::Double64;
    let mut rs = RecordedStream::new(info);
    rs.samples = TimedSamples {
        channel_count: ch,
        timestamps: stamps,
        values: SampleValues::Numeric(values),
    };
    rs
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn simulated_sessions_round_trip(seed in any::<u64>()) {
        let (rec, _) = simulate_session(&small_sim(seed)).unwrap();
        let bytes = encode_session(&rec).unwrap();
        prop_assert_eq!(decode_session(&bytes).unwrap(), rec);
    }

    #[test]
    fn arbitrary_numeric_streams_round_trip(
        ch in 1usize..5,
        rows in 0usize..200,
        rate in prop_oneof![Just(0.0), 1.0f64..1000.0],
        start in -1e6f64..1e6,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = start;
        let stamps: Vec<f64> = (0..rows)
            .map(|_| {
                // mostly on the nominal grid, sometimes off it
                t += if rate > 0.0 && rng.gen_bool(0.8) { 1.0 / rate } else { rng.gen_range(0.0..0.1) };
                t
            })
            .collect();
        let values: Vec<f64> = (0..rows * ch).map(|_| rng.gen_range(-1e9..1e9)).collect();
        let mut rs = numeric_stream("s", rate, stamps, values, ch);
        rs.clock_offsets = (0..rng.gen_range(0..4))
            .map(|k| ClockOffsetMeasurement { local_time: k as f64, measured_offset: rng.gen_range(-1.0..1.0) })
            .collect();
        let rec = SessionRecording { streams: vec![rs], ..Default::default() };
        let bytes = encode_session(&rec).unwrap();
        prop_assert_eq!(decode_session(&bytes).unwrap(), rec);
    }

    #[test]
    fn text_streams_round_trip(rows in proptest::collection::vec(("[^\u{0}]{0,12}", "[a-z0-9 <>&\"]{0,8}"), 0..20)) {
        let info = StreamInfo::new("r", StreamKind::Rating, &["a", "b"], 0.0);
        let mut rs = RecordedStream::new(info);
        let stamps: Vec<f64> = (0..rows.len()).map(|i| i as f64 * 0.25).collect();
        let vals: Vec<String> = rows.into_iter().flat_map(|(a, b)| [a, b]).collect();
        rs.samples = TimedSamples { channel_count: 2, timestamps: stamps, values: SampleValues::Text(vals) };
        let rec = SessionRecording { streams: vec![rs], ..Default::default() };
        prop_assert_eq!(decode_session(&encode_session(&rec).unwrap()).unwrap(), rec);
    }
}

#[test]
fn mutated_files_never_panic() {
    let (rec, _) = simulate_session(&small_sim(3)).unwrap();
    let clean = encode_session(&rec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..2000 {
        let mut b = clean.clone();
        match rng.gen_range(0..4) {
            0 => {
                for _ in 0..rng.gen_range(1..8) {
                    let i = rng.gen_range(0..b.len());
                    b[i] = rng.gen();
                }
            }
            1 => b.truncate(rng.gen_range(0..b.len())),
            2 => {
                let i = rng.gen_range(0..b.len());
                let junk: Vec<u8> = (0..rng.gen_range(1..16)).map(|_| rng.gen()).collect();
                b.splice(i..i, junk);
            }
            _ => {
                // large length prefixes are the classic over-read trigger
                let i = rng.gen_range(4..b.len());
                b[i] = 8;
            }
        }
        let _ = decode_session(&b);
        let _ = decode_session_with(
            &b,
            DecodeOptions {
                recover_truncated: true,
            },
        );
    }
}

#[test]
fn truncation_recovers_a_prefix() {
    let (rec, _) = simulate_session(&small_sim(5)).unwrap();
    let bytes = encode_session(&rec).unwrap();
    for cut in [bytes.len() / 3, bytes.len() / 2, bytes.len() - 1] {
        let d = decode_session_with(
            &bytes[..cut],
            DecodeOptions {
                recover_truncated: true,
            },
        )
        .unwrap();
        assert!(!d.warnings.is_empty());
        for s in &d.session.streams {
            let full = rec.stream(&s.info.stream_id).unwrap();
            let n = s.samples.len();
            assert!(n <= full.samples.len());
            assert_eq!(s.samples.timestamps[..], full.samples.timestamps[..n]);
        }
    }
}
