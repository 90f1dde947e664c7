//! Deterministic synthetic reading sessions with known injected effects.
//!
//! A session is a single-column page of sentences read word by word. Gaze
//! holds still on each word for a log-normal dwell and moves between words
//! with 30 ms linear ramps. EEG is pink noise plus alpha, with theta bursts
//! and N400 bumps locked to first-fixation onsets and occasional blinks.
//! Each device stream runs on its own drifting clock, and clock probes are
//! recorded the way the inlet would record them.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaze::{BBox, LayoutSnapshot, Viewport, WordBox};
use crate::inlet::{probe_offset, ProbeResponse};
use crate::stats::Congruence;
use crate::stream::{SampleValues, StreamInfo, StreamKind, TimedSamples};
use crate::xdf::{RecordedStream, SessionRecording};

pub const GAZE_RATE_HZ: f64 = 300.0;
pub const EEG_RATE_HZ: f64 = 125.0;
pub const INPUT_RATE_HZ: f64 = 1000.0;

pub const MONTAGE: [&str; 16] = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "C3", "Cz", "C4", "T7", "T8", "P3", "Pz", "P4",
    "Oz",
];

const READING_START_S: f64 = 1.0;
const SACCADE_SAMPLES: usize = 9;
const MIN_DWELL_SAMPLES: usize = 24;
const RATING_INTERVAL_S: f64 = 0.5;

const THETA_HZ: f64 = 6.5;
const THETA_BURST_S: f64 = 0.6;
const N400_CENTER_S: f64 = 0.4;
const N400_SD_S: f64 = 0.05;
const N400_WINDOW_S: (f64, f64) = (0.3, 0.5);
const BLINK_SD_S: f64 = 0.05;
const BLINK_UV: f64 = 350.0;

// page geometry (document pixels)
const PAGE_LEFT: f64 = 100.0;
const PAGE_TOP: f64 = 100.0;
const COLUMN_WIDTH: f64 = 1200.0;
const LINE_HEIGHT: f64 = 40.0;
const WORD_HEIGHT: f64 = 24.0;
const CHAR_WIDTH: f64 = 14.0;
const WORD_GAP: f64 = 12.0;
const SCREEN_W: f64 = 1920.0;
const SCREEN_H: f64 = 1080.0;
const SCROLL_STEP: f64 = 600.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("I/O failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("serialization failure: {0}")]
    Serialize(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClockConfig {
    pub offset_s: f64,
    pub drift_ppm: f64,
}

impl Default for ClockConfig {
    fn default() -> Self {
        Self {
            offset_s: 0.0,
            drift_ppm: 0.0,
        }
    }
}

impl ClockConfig {
    /// Device clock reading at recorder time `t`.
    pub fn local(&self, t: f64) -> f64 {
        t * (1.0 + self.drift_ppm * 1e-6) + self.offset_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamClocks {
    pub gaze: ClockConfig,
    pub eeg: ClockConfig,
    pub input: ClockConfig,
    /// Browser clock, shared by the layout and rating streams.
    pub browser: ClockConfig,
}

impl Default for StreamClocks {
    fn default() -> Self {
        Self {
            gaze: ClockConfig {
                offset_s: 0.5,
                drift_ppm: 50.0,
            },
            eeg: ClockConfig {
                offset_s: -1.2,
                drift_ppm: -30.0,
            },
            input: ClockConfig {
                offset_s: 0.02,
                drift_ppm: 10.0,
            },
            browser: ClockConfig {
                offset_s: 0.25,
                drift_ppm: 20.0,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EegNoise {
    /// Standard deviation of the 1/f background, µV.
    pub pink_noise_scale: f64,
    /// 10 Hz alpha amplitude at the occipital peak, µV.
    pub alpha_amplitude: f64,
}

impl Default for EegNoise {
    fn default() -> Self {
        Self {
            pink_noise_scale: 5.0,
            alpha_amplitude: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub duration_s: f64,
    pub n_sentences: usize,
    pub words_per_sentence: usize,
    pub congruent_fraction: f64,
    /// Mean dwell per word (congruent, incongruent), ms.
    pub fixation_ms_means: (f64, f64),
    /// Shape of the log-normal dwell distribution.
    pub fixation_log_sd: f64,
    pub gaze_noise_px: f64,
    pub theta_gain: f64,
    /// Theta burst amplitude on incongruent words, µV.
    pub theta_amplitude_uv: f64,
    /// Mean N400 deflection over 300–500 ms on incongruent words, µV.
    pub n400_uv: f64,
    pub eeg_noise: EegNoise,
    pub clock: StreamClocks,
    /// Probability that a word onset is followed by a blink.
    pub artifact_rate: f64,
    /// Uniform timestamp jitter half-width on regular streams, ms.
    pub timestamp_jitter_ms: f64,
    pub probe_period_s: f64,
    /// One-way network latency of clock probes, ms.
    pub probe_latency_ms: f64,
    pub include_input: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            duration_s: 60.0,
            n_sentences: 20,
            words_per_sentence: 10,
            congruent_fraction: 0.5,
            fixation_ms_means: (260.0, 200.0),
            fixation_log_sd: 0.25,
            gaze_noise_px: 0.5,
            theta_gain: 0.3,
            theta_amplitude_uv: 5.0,
            n400_uv: -5.0,
            eeg_noise: EegNoise::default(),
            clock: StreamClocks::default(),
            artifact_rate: 0.05,
            timestamp_jitter_ms: 0.25,
            probe_period_s: 5.0,
            probe_latency_ms: 0.5,
            include_input: true,
        }
    }
}

impl SimConfig {
    /// Same session design with every injected effect switched off.
    pub fn null_effects(mut self) -> Self {
        self.theta_gain = 0.0;
        self.n400_uv = 0.0;
        let m = self.fixation_ms_means.1;
        self.fixation_ms_means = (m, m);
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |field, reason: &str| {
            Err(SimError::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_pos(self.duration_s) {
            return bad("duration_s", "must be a positive number of seconds");
        }
        if self.n_sentences > 0 && self.words_per_sentence == 0 {
            return bad("words_per_sentence", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.congruent_fraction) {
            return bad("congruent_fraction", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.artifact_rate) {
            return bad("artifact_rate", "must lie in [0, 1]");
        }
        if !finite_pos(self.fixation_ms_means.0) || !finite_pos(self.fixation_ms_means.1) {
            return bad("fixation_ms_means", "must be positive");
        }
        if !finite_nonneg(self.fixation_log_sd) {
            return bad("fixation_log_sd", "must be non-negative");
        }
        if !finite_nonneg(self.gaze_noise_px) {
            return bad("gaze_noise_px", "must be non-negative");
        }
        if !self.theta_gain.is_finite() || self.theta_gain <= -1.0 {
            return bad("theta_gain", "must be greater than -1");
        }
        if !finite_nonneg(self.theta_amplitude_uv) {
            return bad("theta_amplitude_uv", "must be non-negative");
        }
        if !self.n400_uv.is_finite() {
            return bad("n400_uv", "must be finite");
        }
        if !finite_nonneg(self.eeg_noise.pink_noise_scale)
            || !finite_nonneg(self.eeg_noise.alpha_amplitude)
        {
            return bad("eeg_noise", "amplitudes must be non-negative");
        }
        for c in [
            self.clock.gaze,
            self.clock.eeg,
            self.clock.input,
            self.clock.browser,
        ] {
            if !c.offset_s.is_finite() || !c.drift_ppm.is_finite() || c.drift_ppm.abs() >= 1e4 {
                return bad("clock", "offsets must be finite and |drift_ppm| < 10000");
            }
        }
        if !finite_nonneg(self.timestamp_jitter_ms)
            || self.timestamp_jitter_ms >= 1000.0 / INPUT_RATE_HZ / 2.0
        {
            return bad(
                "timestamp_jitter_ms",
                "must be non-negative and below half the fastest sample period",
            );
        }
        if !finite_pos(self.probe_period_s) {
            return bad("probe_period_s", "must be positive");
        }
        if !finite_nonneg(self.probe_latency_ms) {
            return bad("probe_latency_ms", "must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueFixation {
    pub word_id: String,
    pub sentence_id: String,
    /// Recorder time of the first fixation sample.
    pub start_s: f64,
    pub duration_ms: f64,
    /// Screen position of the fixation.
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceTruth {
    pub sentence_id: String,
    pub congruence: Congruence,
    pub read: bool,
    /// Sum of planned dwell times of the sentence's words, ms.
    pub dwell_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueOnset {
    pub word_id: String,
    pub sentence_id: String,
    pub t: f64,
    pub condition: Congruence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueArtifact {
    pub peak_s: f64,
    /// Words whose default epoch (−200..800 ms) contains the blink peak.
    pub affected_word_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueClock {
    pub stream_id: String,
    pub offset_s: f64,
    pub drift_ppm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub fixations: Vec<TrueFixation>,
    pub sentences: Vec<SentenceTruth>,
    pub onsets: Vec<TrueOnset>,
    pub artifacts: Vec<TrueArtifact>,
    pub clocks: Vec<TrueClock>,
}

impl GroundTruth {
    pub fn congruence_of(&self, sentence_id: &str) -> Option<Congruence> {
        self.sentences
            .iter()
            .find(|s| s.sentence_id == sentence_id)
            .map(|s| s.congruence)
    }
}

pub fn export_ground_truth(gt: &GroundTruth, path: &Path) -> Result<(), SimError> {
    let json = serde_json::to_string_pretty(gt)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth, SimError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

// ---------------------------------------------------------------------------
// signal components

fn hann_burst(t_rel: f64) -> f64 {
    if (0.0..=THETA_BURST_S).contains(&t_rel) {
        0.5 - 0.5 * (2.0 * PI * t_rel / THETA_BURST_S).cos()
    } else {
        0.0
    }
}

/// Theta burst of the given amplitude at `t_rel` seconds after onset.
pub fn theta_burst(t_rel: f64, amplitude_uv: f64) -> f64 {
    amplitude_uv * hann_burst(t_rel) * (2.0 * PI * THETA_HZ * t_rel).sin()
}

/// Mean of the unit Gaussian bump over the N400 window.
pub fn n400_window_factor() -> f64 {
    // mean of exp(-(t - c)^2 / 2 sd^2) over [a, b], via the error function
    let z = |t: f64| (t - N400_CENTER_S) / (N400_SD_S * 2f64.sqrt());
    let integral =
        N400_SD_S * (PI / 2.0).sqrt() * (erf(z(N400_WINDOW_S.1)) - erf(z(N400_WINDOW_S.0)));
    integral / (N400_WINDOW_S.1 - N400_WINDOW_S.0)
}

fn erf(x: f64) -> f64 {
    // Maclaurin series near zero, continued fraction in the tails
    if x.abs() < 3.0 {
        let mut sum = x;
        let mut term = x;
        let x2 = x * x;
        let mut n = 0.0;
        while term.abs() > 1e-17 * sum.abs() {
            n += 1.0;
            term *= -x2 / n;
            sum += term / (2.0 * n + 1.0);
        }
        2.0 / PI.sqrt() * sum
    } else {
        let sign = x.signum();
        let x = x.abs();
        let mut f = 0.0;
        for k in (1..60).rev() {
            f = k as f64 / 2.0 / (x + f);
        }
        sign * (1.0 - (-x * x).exp() / PI.sqrt() / (x + f))
    }
}

/// N400 deflection whose mean over 300–500 ms equals `mean_uv`.
pub fn n400_bump(t_rel: f64, mean_uv: f64) -> f64 {
    let peak = mean_uv / n400_window_factor();
    peak * (-(t_rel - N400_CENTER_S).powi(2) / (2.0 * N400_SD_S * N400_SD_S)).exp()
}

fn blink(t_rel: f64) -> f64 {
    BLINK_UV * (-(t_rel * t_rel) / (2.0 * BLINK_SD_S * BLINK_SD_S)).exp()
}

fn weight(label: &str, table: &[(&str, f64)], default: f64) -> f64 {
    table
        .iter()
        .find(|(l, _)| *l == label)
        .map_or(default, |(_, w)| *w)
}

const THETA_WEIGHTS: [(&str, f64); 8] = [
    ("Pz", 1.0),
    ("P3", 0.9),
    ("P4", 0.9),
    ("Cz", 0.7),
    ("C3", 0.6),
    ("C4", 0.6),
    ("Oz", 0.5),
    ("Fz", 0.4),
];
const N400_WEIGHTS: [(&str, f64); 8] = [
    ("Cz", 1.0),
    ("Pz", 1.0),
    ("P3", 0.9),
    ("P4", 0.9),
    ("C3", 0.8),
    ("C4", 0.8),
    ("Fz", 0.5),
    ("Oz", 0.5),
];
const BLINK_WEIGHTS: [(&str, f64); 7] = [
    ("Fp1", 1.0),
    ("Fp2", 1.0),
    ("F7", 0.6),
    ("F8", 0.6),
    ("F3", 0.5),
    ("F4", 0.5),
    ("Fz", 0.5),
];
const ALPHA_WEIGHTS: [(&str, f64); 4] = [("Oz", 1.0), ("P3", 0.8), ("Pz", 0.8), ("P4", 0.8)];

/// Gaussian white noise shaped to a 1/f power spectrum, scaled to unit sd.
fn pink_noise(n: usize, rng: &mut ChaCha8Rng, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    if n < 2 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut buf: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(normal.sample(rng), 0.0))
        .collect();
    planner.plan_fft_forward(n).process(&mut buf);
    buf[0] = Complex64::new(0.0, 0.0);
    for (k, b) in buf.iter_mut().enumerate().skip(1) {
        let f = k.min(n - k) as f64;
        *b /= f.sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let x: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let m = x.iter().sum::<f64>() / n as f64;
    let sd = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
    x.iter().map(|v| (v - m) / sd).collect()
}

// ---------------------------------------------------------------------------
// session layout and scanpath

struct PlannedWord {
    word: WordBox,
}

fn random_word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(3..=9);
    (0..len)
        .map(|_| (b'a' + rng.gen_range(0..26)) as char)
        .collect()
}

fn layout_page(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<PlannedWord>> {
    let mut x = PAGE_LEFT;
    let mut line = 0;
    (0..cfg.n_sentences)
        .map(|s| {
            (0..cfg.words_per_sentence)
                .map(|w| {
                    let text = random_word(rng);
                    let width = text.len() as f64 * CHAR_WIDTH;
                    if x + width > PAGE_LEFT + COLUMN_WIDTH && x > PAGE_LEFT {
                        x = PAGE_LEFT;
                        line += 1;
                    }
                    let bbox = BBox {
                        left: x,
                        top: PAGE_TOP + line as f64 * LINE_HEIGHT,
                        width,
                        height: WORD_HEIGHT,
                    };
                    x += width + WORD_GAP;
                    PlannedWord {
                        word: WordBox {
                            word_id: format!("s{s}w{w}"),
                            sentence_id: format!("s{s}"),
                            text,
                            bbox,
                            expectedness: Some((rng.gen::<f64>() * 1000.0).round() / 1000.0),
                        },
                    }
                })
                .collect()
        })
        .collect()
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

fn jittered(clock: &ClockConfig, t: f64, jitter_s: f64, rng: &mut ChaCha8Rng) -> f64 {
    let j = if jitter_s > 0.0 {
        rng.gen_range(-jitter_s..jitter_s)
    } else {
        0.0
    };
    clock.local(t) + j
}

fn probes(
    clock: &ClockConfig,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<crate::stream::ClockOffsetMeasurement> {
    let lat = cfg.probe_latency_ms / 1000.0;
    let n = (cfg.duration_s / cfg.probe_period_s).floor() as usize;
    (0..=n)
        .map(|i| {
            let t0 = i as f64 * cfg.probe_period_s;
            let up = lat * (1.0 + rng.gen_range(-0.1..0.1));
            let turnaround = 5e-5;
            let down = lat * (1.0 + rng.gen_range(-0.1..0.1));
            let response = ProbeResponse {
                probe_id: i as u64,
                t0,
                t1: clock.local(t0 + up),
                t2: clock.local(t0 + up + turnaround),
            };
            probe_offset(&response, t0 + up + turnaround + down)
                .expect("ordered probe times")
                .reversed()
        })
        .collect()
}

fn viewport(sy: f64) -> Viewport {
    Viewport {
        scroll_x: 0.0,
        scroll_y: sy,
        width: SCREEN_W,
        height: SCREEN_H,
    }
}

/// Generates one session. Identical configs give identical output.
pub fn simulate_session(cfg: &SimConfig) -> Result<(SessionRecording, GroundTruth), SimError> {
    cfg.validate()?;
    let sub = |stream: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(stream);
        r
    };
    let mut page_rng = sub(1);
    let mut dwell_rng = sub(2);
    let mut gaze_rng = sub(3);
    let mut eeg_rng = sub(4);
    let mut clock_rng = sub(5);
    let mut input_rng = sub(6);

    // conditions
    let n_cong = (cfg.n_sentences as f64 * cfg.congruent_fraction).round() as usize;
    let mut labels: Vec<Congruence> = (0..cfg.n_sentences)
        .map(|i| {
            if i < n_cong {
                Congruence::Congruent
            } else {
                Congruence::Incongruent
            }
        })
        .collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut page_rng);
    let page = layout_page(cfg, &mut page_rng);

    // dwell plan on the gaze sample grid
    let dwell = |c: Congruence, rng: &mut ChaCha8Rng| {
        let mean = if c == Congruence::Congruent {
            cfg.fixation_ms_means.0
        } else {
            cfg.fixation_ms_means.1
        };
        let s = cfg.fixation_log_sd;
        let d = LogNormal::new(mean.ln() - s * s / 2.0, s)
            .unwrap()
            .sample(rng);
        ((d / 1000.0 * GAZE_RATE_HZ).round() as usize).max(MIN_DWELL_SAMPLES)
    };
    let plans: Vec<Vec<usize>> = page
        .iter()
        .zip(&labels)
        .map(|(words, &c)| words.iter().map(|_| dwell(c, &mut dwell_rng)).collect())
        .collect();

    let n_gaze = (cfg.duration_s * GAZE_RATE_HZ).floor() as usize + 1;
    let start = (READING_START_S * GAZE_RATE_HZ).round() as usize;
    let mut gt = GroundTruth {
        seed: cfg.seed,
        ..Default::default()
    };
    struct Hold {
        first: usize,
        last: usize,
        x: f64,
        y: f64,
    }
    let mut holds: Vec<Hold> = Vec::new();
    let mut snapshots: Vec<(f64, f64)> = vec![(READING_START_S / 2.0, 0.0)];
    let mut sy = 0.0;
    let mut cursor = start;
    for (s, words) in page.iter().enumerate() {
        // a sentence is read only if it and every rating prompt still fit
        let mut end = cursor;
        for &d in &plans[s] {
            end += d + SACCADE_SAMPLES;
        }
        let end_s = end as f64 / GAZE_RATE_HZ;
        if end_s + 1.0 + RATING_INTERVAL_S * (s + 2) as f64 > cfg.duration_s {
            for (k, _) in page.iter().enumerate().skip(s) {
                gt.sentences.push(SentenceTruth {
                    sentence_id: format!("s{k}"),
                    congruence: labels[k],
                    read: false,
                    dwell_ms: 0.0,
                });
            }
            break;
        }
        let mut sentence_ms = 0.0;
        for (w, pw) in words.iter().enumerate() {
            let b = &pw.word.bbox;
            let doc_y = b.top + b.height / 2.0;
            if doc_y > sy + SCREEN_H - 100.0 {
                sy += SCROLL_STEP * ((doc_y - (sy + SCREEN_H - 100.0)) / SCROLL_STEP).ceil();
                let t = if cursor > start {
                    (cursor - SACCADE_SAMPLES) as f64
                } else {
                    cursor as f64 - 3.0
                };
                snapshots.push((t / GAZE_RATE_HZ, sy));
            }
            let x = b.left + b.width / 2.0 + gaze_rng.gen_range(-b.width / 8.0..=b.width / 8.0);
            let y = doc_y - sy;
            let d = plans[s][w];
            holds.push(Hold {
                first: cursor,
                last: cursor + d,
                x,
                y,
            });
            let start_s = cursor as f64 / GAZE_RATE_HZ;
            let duration_ms = d as f64 / GAZE_RATE_HZ * 1000.0;
            sentence_ms += duration_ms;
            gt.fixations.push(TrueFixation {
                word_id: pw.word.word_id.clone(),
                sentence_id: pw.word.sentence_id.clone(),
                start_s,
                duration_ms,
                x,
                y,
            });
            gt.onsets.push(TrueOnset {
                word_id: pw.word.word_id.clone(),
                sentence_id: pw.word.sentence_id.clone(),
                t: start_s,
                condition: labels[s],
            });
            cursor += d + SACCADE_SAMPLES;
        }
        gt.sentences.push(SentenceTruth {
            sentence_id: format!("s{s}"),
            congruence: labels[s],
            read: true,
            dwell_ms: sentence_ms,
        });
    }

    // gaze samples: holds, ramps between consecutive holds, invalid elsewhere
    let noise = Normal::new(0.0, cfg.gaze_noise_px.max(f64::MIN_POSITIVE)).unwrap();
    let mut gaze_pos: Vec<Option<(f64, f64)>> = vec![None; n_gaze];
    for (i, h) in holds.iter().enumerate() {
        for p in gaze_pos.iter_mut().take(h.last + 1).skip(h.first) {
            *p = Some((h.x, h.y));
        }
        if let Some(next) = holds.get(i + 1) {
            for j in 1..SACCADE_SAMPLES {
                let f = j as f64 / SACCADE_SAMPLES as f64;
                gaze_pos[h.last + j] = Some((h.x + f * (next.x - h.x), h.y + f * (next.y - h.y)));
            }
        }
    }
    let jitter = cfg.timestamp_jitter_ms / 1000.0;
    let gaze_info = StreamInfo::new("gaze", StreamKind::Gaze, &["x", "y", "valid"], GAZE_RATE_HZ);
    let mut gaze_values = Vec::with_capacity(n_gaze * 3);
    let mut gaze_stamps = Vec::with_capacity(n_gaze);
    for (k, p) in gaze_pos.iter().enumerate() {
        gaze_stamps.push(jittered(
            &cfg.clock.gaze,
            k as f64 / GAZE_RATE_HZ,
            jitter,
            &mut clock_rng,
        ));
        match p {
            Some((x, y)) => {
                let (nx, ny) = if cfg.gaze_noise_px > 0.0 {
                    (noise.sample(&mut gaze_rng), noise.sample(&mut gaze_rng))
                } else {
                    (0.0, 0.0)
                };
                gaze_values.extend([quantize(x + nx), quantize(y + ny), 1.0]);
            }
            None => gaze_values.extend([0.0, 0.0, 0.0]),
        }
    }

    // EEG
    let n_eeg = (cfg.duration_s * EEG_RATE_HZ).floor() as usize + 1;
    let mut planner = FftPlanner::new();
    let mut eeg: Vec<Vec<f64>> = MONTAGE
        .iter()
        .map(|_| {
            pink_noise(n_eeg, &mut eeg_rng, &mut planner)
                .into_iter()
                .map(|v| v * cfg.eeg_noise.pink_noise_scale)
                .collect()
        })
        .collect();
    for (c, label) in MONTAGE.iter().enumerate() {
        let w = weight(label, &ALPHA_WEIGHTS, 0.4) * cfg.eeg_noise.alpha_amplitude;
        let phase = eeg_rng.gen_range(0.0..2.0 * PI);
        for (k, v) in eeg[c].iter_mut().enumerate() {
            *v += w * (2.0 * PI * 10.0 * k as f64 / EEG_RATE_HZ + phase).sin();
        }
    }
    let add_event = |eeg: &mut Vec<Vec<f64>>,
                     at: f64,
                     from: f64,
                     to: f64,
                     f: &dyn Fn(f64) -> f64,
                     weights: &[(&str, f64)],
                     other: f64| {
        let k0 = ((at + from) * EEG_RATE_HZ).ceil().max(0.0) as usize;
        let k1 = (((at + to) * EEG_RATE_HZ).floor() as usize).min(n_eeg - 1);
        for k in k0..=k1 {
            let v = f(k as f64 / EEG_RATE_HZ - at);
            for (c, label) in MONTAGE.iter().enumerate() {
                eeg[c][k] += weight(label, weights, other) * v;
            }
        }
    };
    for o in &gt.onsets {
        let gain = if o.condition == Congruence::Congruent {
            1.0 + cfg.theta_gain
        } else {
            1.0
        };
        let amp = cfg.theta_amplitude_uv * gain;
        add_event(
            &mut eeg,
            o.t,
            0.0,
            THETA_BURST_S,
            &|t| theta_burst(t, amp),
            &THETA_WEIGHTS,
            0.2,
        );
        if o.condition == Congruence::Incongruent && cfg.n400_uv != 0.0 {
            let m = cfg.n400_uv;
            add_event(
                &mut eeg,
                o.t,
                0.15,
                0.65,
                &|t| n400_bump(t, m),
                &N400_WEIGHTS,
                0.2,
            );
        }
        if eeg_rng.gen::<f64>() < cfg.artifact_rate {
            let peak = o.t + eeg_rng.gen_range(0.2..0.5);
            add_event(&mut eeg, peak, -0.25, 0.25, &blink, &BLINK_WEIGHTS, 0.05);
            let affected = gt
                .onsets
                .iter()
                .filter(|w| peak >= w.t - 0.2 + 0.01 && peak <= w.t + 0.8 - 0.01)
                .map(|w| w.word_id.clone())
                .collect();
            gt.artifacts.push(TrueArtifact {
                peak_s: peak,
                affected_word_ids: affected,
            });
        }
    }
    let eeg_info = StreamInfo::new("eeg", StreamKind::Eeg, &MONTAGE, EEG_RATE_HZ);
    let eeg_stamps: Vec<f64> = (0..n_eeg)
        .map(|k| {
            jittered(
                &cfg.clock.eeg,
                k as f64 / EEG_RATE_HZ,
                jitter,
                &mut clock_rng,
            )
        })
        .collect();
    let mut eeg_values = Vec::with_capacity(n_eeg * MONTAGE.len());
    for k in 0..n_eeg {
        eeg_values.extend(eeg.iter().map(|ch| quantize(ch[k])));
    }

    // layout snapshots on the browser clock
    let words: Vec<WordBox> = page.iter().flatten().map(|p| p.word.clone()).collect();
    let layout_info = StreamInfo::new("layout", StreamKind::Layout, &["snapshot"], 0.0);
    let mut layout_stamps = Vec::new();
    let mut layout_values = Vec::new();
    for (t, sy) in &snapshots {
        let local = cfg.clock.browser.local(*t);
        let snap = LayoutSnapshot {
            t: local,
            words: words.clone(),
            viewport: viewport(*sy),
        };
        layout_stamps.push(local);
        layout_values.push(serde_json::to_string(&snap)?);
    }

    // ratings after reading, one prompt every RATING_INTERVAL_S
    let rating_info = StreamInfo::new(
        "rating",
        StreamKind::Rating,
        &["sentence_id", "agreement"],
        0.0,
    );
    let read_end = cursor as f64 / GAZE_RATE_HZ;
    let mut rating_stamps = Vec::new();
    let mut rating_values = Vec::new();
    let mut key_presses = Vec::new();
    for (i, s) in gt.sentences.iter().filter(|s| s.read).enumerate() {
        let t = read_end + 1.0 + RATING_INTERVAL_S * i as f64;
        let agreement = if s.congruence == Congruence::Congruent {
            5
        } else {
            1
        };
        rating_stamps.push(cfg.clock.browser.local(t));
        rating_values.push(s.sentence_id.clone());
        rating_values.push(agreement.to_string());
        key_presses.push((t, 48.0 + agreement as f64));
    }

    let mut streams = Vec::new();
    let mut push = |info: StreamInfo,
                    stamps: Vec<f64>,
                    values: SampleValues,
                    clock: &ClockConfig,
                    rng: &mut ChaCha8Rng| {
        let mut rs = RecordedStream::new(info);
        rs.info
            .source_metadata
            .insert("device".into(), "simulated".into());
        rs.samples = TimedSamples {
            channel_count: rs.info.channel_count,
            timestamps: stamps,
            values,
        };
        rs.clock_offsets = probes(clock, cfg, rng);
        gt.clocks.push(TrueClock {
            stream_id: rs.info.stream_id.clone(),
            offset_s: clock.offset_s,
            drift_ppm: clock.drift_ppm,
        });
        streams.push(rs);
    };
    push(
        gaze_info,
        gaze_stamps,
        SampleValues::Numeric(gaze_values),
        &cfg.clock.gaze,
        &mut clock_rng,
    );
    push(
        eeg_info,
        eeg_stamps,
        SampleValues::Numeric(eeg_values),
        &cfg.clock.eeg,
        &mut clock_rng,
    );
    if cfg.include_input {
        let n_input = (cfg.duration_s * INPUT_RATE_HZ).floor() as usize + 1;
        let info = StreamInfo::new(
            "input",
            StreamKind::Input,
            &["mouse_x", "mouse_y", "key_code"],
            INPUT_RATE_HZ,
        );
        let mut stamps = Vec::with_capacity(n_input);
        let mut values = Vec::with_capacity(n_input * 3);
        let (mut mx, mut my) = (SCREEN_W / 2.0, SCREEN_H / 2.0);
        let mut next_key = 0;
        for k in 0..n_input {
            let t = k as f64 / INPUT_RATE_HZ;
            stamps.push(jittered(&cfg.clock.input, t, jitter, &mut clock_rng));
            if input_rng.gen::<f64>() < 0.01 {
                mx = (mx + input_rng.gen_range(-5.0..5.0)).clamp(0.0, SCREEN_W);
                my = (my + input_rng.gen_range(-5.0..5.0)).clamp(0.0, SCREEN_H);
            }
            let mut key = 0.0;
            if let Some(&(kt, code)) = key_presses.get(next_key) {
                if t >= kt {
                    key = code;
                    next_key += 1;
                }
            }
            values.extend([quantize(mx), quantize(my), key]);
        }
        push(
            info,
            stamps,
            SampleValues::Numeric(values),
            &cfg.clock.input,
            &mut clock_rng,
        );
    }
    push(
        layout_info,
        layout_stamps,
        SampleValues::Text(layout_values),
        &cfg.clock.browser,
        &mut clock_rng,
    );
    push(
        rating_info,
        rating_stamps,
        SampleValues::Text(rating_values),
        &cfg.clock.browser,
        &mut clock_rng,
    );

    let session = SessionRecording {
        streams,
        ..Default::default()
    };
    Ok((session, gt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eeg::{integrate_band, welch_psd};

    fn small() -> SimConfig {
        SimConfig {
            duration_s: 20.0,
            n_sentences: 4,
            words_per_sentence: 5,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let (a, ga) = simulate_session(&small()).unwrap();
        let (b, gb) = simulate_session(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
        let (c, _) = simulate_session(&SimConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn recording_passes_invariants() {
        let (s, _) = simulate_session(&small()).unwrap();
        s.check().unwrap();
        assert_eq!(s.streams.len(), 5);
    }

    #[test]
    fn invalid_config_names_field() {
        let err = simulate_session(&SimConfig {
            duration_s: -1.0,
            ..small()
        })
        .unwrap_err();
        assert!(err.to_string().contains("duration_s"));
        let err = simulate_session(&SimConfig {
            congruent_fraction: 1.5,
            ..small()
        })
        .unwrap_err();
        assert!(err.to_string().contains("congruent_fraction"));
    }

    #[test]
    fn dwell_plan_matches_fixations() {
        let (_, gt) = simulate_session(&small()).unwrap();
        for s in gt.sentences.iter().filter(|s| s.read) {
            let total: f64 = gt
                .fixations
                .iter()
                .filter(|f| f.sentence_id == s.sentence_id)
                .map(|f| f.duration_ms)
                .sum();
            assert_eq!(total, s.dwell_ms);
        }
        assert_eq!(gt.onsets.len(), gt.fixations.len());
    }

    #[test]
    fn n400_window_mean_is_the_configured_amplitude() {
        let n = 20_000;
        let f = |i: usize| n400_bump(0.3 + 0.2 * i as f64 / n as f64, -5.0);
        let mean = ((1..n).map(f).sum::<f64>() + (f(0) + f(n)) / 2.0) / n as f64;
        assert!((mean + 5.0).abs() < 1e-4, "{mean}");
        assert!((erf(0.5) - 0.520_499_877_813_046_5).abs() < 1e-14);
        assert!((erf(3.5) - 0.999_999_256_901_627_7).abs() < 1e-14);
    }

    #[test]
    fn theta_ratio_on_noiseless_component() {
        let gain = 0.3;
        let burst = |a: f64| {
            (0..100)
                .map(|k| theta_burst(k as f64 / EEG_RATE_HZ, a))
                .collect::<Vec<_>>()
        };
        let mut planner = FftPlanner::new();
        let power = |x: &[f64], planner: &mut FftPlanner<f64>| {
            let (f, p) = welch_psd(x, EEG_RATE_HZ, planner).unwrap();
            integrate_band(&f, &p, 5.0, 8.0)
        };
        let ratio =
            power(&burst(5.0 * (1.0 + gain)), &mut planner) / power(&burst(5.0), &mut planner);
        assert!((ratio / (1.0 + gain).powi(2) - 1.0).abs() < 0.02);
    }

    #[test]
    fn pink_noise_has_falling_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut planner = FftPlanner::new();
        let x = pink_noise(8192, &mut rng, &mut planner);
        let (f, p) = welch_psd(&x, EEG_RATE_HZ, &mut planner).unwrap();
        let low = integrate_band(&f, &p, 1.0, 4.0) / 3.0;
        let high = integrate_band(&f, &p, 30.0, 40.0) / 10.0;
        assert!(low > 4.0 * high);
    }

    #[test]
    fn empty_session_truth_is_valid_json() {
        let (_, gt) = simulate_session(&SimConfig {
            n_sentences: 0,
            ..small()
        })
        .unwrap();
        assert!(gt.fixations.is_empty() && gt.onsets.is_empty() && gt.sentences.is_empty());
        let json = serde_json::to_string(&gt).unwrap();
        assert_eq!(serde_json::from_str::<GroundTruth>(&json).unwrap(), gt);
    }
}
