//! EEG preprocessing and fixation-locked features: zero-phase band-pass
//! filtering, epoching, peak-to-peak artifact rejection, Welch theta power,
//! and ERP / N400 averaging.

use std::collections::BTreeMap;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stream::{StreamInfo, TimedSamples};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EegError {
    #[error("invalid band {low}-{high} Hz at {rate} Hz sampling")]
    InvalidBand { low: f64, high: f64, rate: f64 },
    #[error("invalid epoch window: {0}")]
    InvalidWindow(String),
    #[error("analysis window holds {samples} samples, fewer than two Welch segments of {segment}")]
    WindowTooShort { samples: usize, segment: usize },
    #[error("no epochs for condition {0:?}")]
    EmptyCondition(String),
    #[error("none of the channels {0:?} are in the montage")]
    MissingChannels(Vec<String>),
    #[error("EEG stream is empty or not numeric")]
    EmptyRecording,
}

/// Continuous multichannel EEG on a regular grid starting at `t0`.
#[derive(Debug, Clone, PartialEq)]
pub struct EegRecording {
    pub channel_labels: Vec<String>,
    pub rate_hz: f64,
    pub t0: f64,
    /// channel × time, microvolts
    pub data: Vec<Vec<f64>>,
}

impl EegRecording {
    /// Builds a recording from an aligned (dejittered) stream. The sampling
    /// rate is taken from the aligned timestamps so clock drift corrections
    /// carry over into sample positions.
    pub fn from_stream(info: &StreamInfo, samples: &TimedSamples) -> Result<Self, EegError> {
        let n = samples.len();
        if n == 0 || samples.numeric_row(0).is_none() {
            return Err(EegError::EmptyRecording);
        }
        let rate_hz = if n >= 2 {
            (n - 1) as f64 / (samples.timestamps[n - 1] - samples.timestamps[0])
        } else {
            info.nominal_rate_hz
        };
        let data = (0..info.channel_count)
            .map(|c| samples.channel(c))
            .collect();
        Ok(Self {
            channel_labels: info.channel_labels.clone(),
            rate_hz,
            t0: samples.timestamps[0],
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel_index(&self, label: &str) -> Option<usize> {
        self.channel_labels.iter().position(|l| l == label)
    }
}

// ---------------------------------------------------------------------------
// filtering

/// One biquad section `b0 + b1 z^-1 + b2 z^-2 / (1 + a1 z^-1 + a2 z^-2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn response(&self, z: Complex64) -> Complex64 {
        let zi = z.inv();
        let zi2 = zi * zi;
        (self.b[0] + zi * self.b[1] + zi2 * self.b[2])
            / (Complex64::new(1.0, 0.0) + zi * self.a[0] + zi2 * self.a[1])
    }
}

/// Cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Sos(pub Vec<Biquad>);

impl Sos {
    /// Magnitude response at `freq_hz`.
    pub fn gain(&self, freq_hz: f64, fs: f64) -> f64 {
        let z = Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * freq_hz / fs);
        self.0
            .iter()
            .map(|s| s.response(z))
            .product::<Complex64>()
            .norm()
    }

    /// Causal filtering with per-section initial state `zi` (transposed direct form II).
    fn run(&self, x: &mut [f64], zi: &[[f64; 2]]) {
        for (sec, z0) in self.0.iter().zip(zi) {
            let [b0, b1, b2] = sec.b;
            let [a1, a2] = sec.a;
            let (mut z1, mut z2) = (z0[0], z0[1]);
            for v in x.iter_mut() {
                let xin = *v;
                let y = b0 * xin + z1;
                z1 = b1 * xin - a1 * y + z2;
                z2 = b2 * xin - a2 * y;
                *v = y;
            }
        }
    }

    /// Steady-state section states for a unit step input.
    fn step_state(&self) -> Vec<[f64; 2]> {
        let mut level = 1.0;
        self.0
            .iter()
            .map(|s| {
                let [b0, b1, b2] = s.b;
                let [a1, a2] = s.a;
                let g = (b0 + b1 + b2) / (1.0 + a1 + a2);
                let y = g * level;
                let z2 = b2 * level - a2 * y;
                let z1 = y - b0 * level;
                level = y;
                [z1, z2]
            })
            .collect()
    }

    /// Forward-backward filtering with odd-extension padding and steady-state
    /// initial conditions. The result has zero phase and squared magnitude.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n < 2 {
            return x.to_vec();
        }
        let pad = (3 * (2 * self.0.len() + 1)).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

        let zi = self.step_state();
        let scaled = |v: f64| zi.iter().map(|z| [z[0] * v, z[1] * v]).collect::<Vec<_>>();
        let first = ext[0];
        self.run(&mut ext, &scaled(first));
        ext.reverse();
        let first = ext[0];
        self.run(&mut ext, &scaled(first));
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

fn bilinear(s: Complex64, fs: f64) -> Complex64 {
    (2.0 * fs + s) / (2.0 * fs - s)
}

/// Groups digital poles into conjugate pairs (real poles pair up among themselves).
fn pole_pairs(poles: &[Complex64]) -> Vec<(Complex64, Complex64)> {
    let eps = 1e-12;
    let mut upper: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > eps).collect();
    upper.sort_by(|a, b| a.re.total_cmp(&b.re));
    let mut reals: Vec<Complex64> = poles
        .iter()
        .copied()
        .filter(|p| p.im.abs() <= eps)
        .collect();
    reals.sort_by(|a, b| a.re.total_cmp(&b.re));
    let mut pairs: Vec<(Complex64, Complex64)> = upper.into_iter().map(|p| (p, p.conj())).collect();
    for ch in reals.chunks(2) {
        pairs.push((ch[0], *ch.get(1).unwrap_or(&Complex64::new(0.0, 0.0))));
    }
    pairs
}

fn section(p: (Complex64, Complex64), b: [f64; 3]) -> Biquad {
    let sum = p.0 + p.1;
    let prod = p.0 * p.1;
    Biquad {
        b,
        a: [-sum.re, prod.re],
    }
}

fn butter_prototype(order: usize) -> Vec<Complex64> {
    (1..=order)
        .map(|k| {
            let theta = std::f64::consts::PI * (2 * k + order - 1) as f64 / (2 * order) as f64;
            Complex64::from_polar(1.0, theta)
        })
        .collect()
}

/// Butterworth band-pass (`order` is the prototype order; the digital filter
/// has `2 * order` poles). Unity gain at the band's geometric center.
pub fn butter_bandpass(order: usize, low_hz: f64, high_hz: f64, fs: f64) -> Sos {
    let warp = |f: f64| 2.0 * fs * (std::f64::consts::PI * f / fs).tan();
    let (wl, wh) = (warp(low_hz), warp(high_hz));
    let bw = wh - wl;
    let w0 = (wl * wh).sqrt();
    let mut poles = Vec::with_capacity(2 * order);
    for p in butter_prototype(order) {
        let half = p * (bw / 2.0);
        let disc = (half * half - w0 * w0).sqrt();
        poles.push(bilinear(half + disc, fs));
        poles.push(bilinear(half - disc, fs));
    }
    let mut sos = Sos(pole_pairs(&poles)
        .into_iter()
        .map(|p| section(p, [1.0, 0.0, -1.0]))
        .collect());
    let center = 2.0 * (w0 / (2.0 * fs)).atan() * fs / (2.0 * std::f64::consts::PI);
    let g = sos.gain(center, fs);
    for b in &mut sos.0[0].b {
        *b /= g;
    }
    sos
}

/// Butterworth low-pass with unity DC gain.
pub fn butter_lowpass(order: usize, cutoff_hz: f64, fs: f64) -> Sos {
    let wc = 2.0 * fs * (std::f64::consts::PI * cutoff_hz / fs).tan();
    let poles: Vec<Complex64> = butter_prototype(order)
        .into_iter()
        .map(|p| bilinear(p * wc, fs))
        .collect();
    let mut sos = Sos(pole_pairs(&poles)
        .into_iter()
        .map(|p| section(p, [1.0, 2.0, 1.0]))
        .collect());
    if order % 2 == 1 {
        // the lone real pole got paired with z = 0; drop the matching zero
        let last = sos.0.last_mut().unwrap();
        last.b = [1.0, 1.0, 0.0];
    }
    let g = sos.gain(0.0, fs);
    for b in &mut sos.0[0].b {
        *b /= g;
    }
    sos
}

/// Prototype order used by [`bandpass_filter`].
pub const FILTER_ORDER: usize = 4;

/// Zero-phase Butterworth band-pass of every channel. `low_hz == 0` gives a low-pass.
pub fn bandpass_filter(
    rec: &EegRecording,
    low_hz: f64,
    high_hz: f64,
) -> Result<EegRecording, EegError> {
    let fs = rec.rate_hz;
    if !(low_hz >= 0.0 && low_hz < high_hz && high_hz < fs / 2.0) {
        return Err(EegError::InvalidBand {
            low: low_hz,
            high: high_hz,
            rate: fs,
        });
    }
    let sos = if low_hz == 0.0 {
        butter_lowpass(FILTER_ORDER, high_hz, fs)
    } else {
        butter_bandpass(FILTER_ORDER, low_hz, high_hz, fs)
    };
    Ok(EegRecording {
        channel_labels: rec.channel_labels.clone(),
        rate_hz: fs,
        t0: rec.t0,
        data: rec.data.iter().map(|ch| sos.filtfilt(ch)).collect(),
    })
}

// ---------------------------------------------------------------------------
// epochs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Onset {
    pub t: f64,
    pub word_id: Option<String>,
    pub condition: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    pub onset_t: f64,
    pub pre_ms: f64,
    pub post_ms: f64,
    pub rate_hz: f64,
    pub channel_labels: Arc<Vec<String>>,
    /// channel × time
    pub data: Vec<Vec<f64>>,
    pub condition_tag: Option<String>,
    pub word_id: Option<String>,
}

impl Epoch {
    pub fn n_samples(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }

    /// Time of sample `j` relative to onset, in ms.
    pub fn time_ms(&self, j: usize) -> f64 {
        -self.pre_ms + j as f64 * 1000.0 / self.rate_hz
    }

    /// Sample indices whose relative time lies in `[from_ms, to_ms)`.
    pub fn span(&self, from_ms: f64, to_ms: f64) -> std::ops::Range<usize> {
        let eps = 1e-6;
        let n = self.n_samples();
        let a = (0..n)
            .find(|&j| self.time_ms(j) >= from_ms - eps)
            .unwrap_or(n);
        let b = (a..n)
            .find(|&j| self.time_ms(j) >= to_ms - eps)
            .unwrap_or(n);
        a..b
    }

    /// Like [`Epoch::span`] but including a sample that falls on `to_ms`.
    pub fn span_inclusive(&self, from_ms: f64, to_ms: f64) -> std::ops::Range<usize> {
        self.span(from_ms, to_ms + 1e-3)
    }

    pub fn channel_indices(&self, labels: &[String]) -> Vec<usize> {
        labels
            .iter()
            .filter_map(|l| self.channel_labels.iter().position(|c| c == l))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExclusionReason {
    OutOfBounds,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub onset_index: usize,
    pub onset_t: f64,
    pub word_id: Option<String>,
    pub reason: ExclusionReason,
}

/// Cuts `[-pre_ms, post_ms)` around each onset and subtracts the per-channel
/// mean of the baseline window `[b0, b1)` (ms, relative to onset).
pub fn epoch_around_onsets(
    rec: &EegRecording,
    onsets: &[Onset],
    pre_ms: f64,
    post_ms: f64,
    baseline_ms: (f64, f64),
) -> Result<(Vec<Epoch>, Vec<Exclusion>), EegError> {
    if !(pre_ms >= 0.0 && post_ms >= 0.0 && pre_ms + post_ms > 0.0) {
        return Err(EegError::InvalidWindow(format!(
            "pre {pre_ms} ms, post {post_ms} ms"
        )));
    }
    let (b0, b1) = baseline_ms;
    if !(b0 >= -pre_ms && b1 <= post_ms && b0 < b1) {
        return Err(EegError::InvalidWindow(format!(
            "baseline [{b0}, {b1}) outside [-{pre_ms}, {post_ms}]"
        )));
    }
    let fs = rec.rate_hz;
    let n = ((pre_ms + post_ms) / 1000.0 * fs).round() as usize;
    let labels = Arc::new(rec.channel_labels.clone());
    let len = rec.len() as i64;

    let mut epochs = Vec::new();
    let mut excluded = Vec::new();
    for (i, o) in onsets.iter().enumerate() {
        let start = ((o.t - pre_ms / 1000.0 - rec.t0) * fs).round();
        let exclude = |reason| Exclusion {
            onset_index: i,
            onset_t: o.t,
            word_id: o.word_id.clone(),
            reason,
        };
        if !start.is_finite() || start < 0.0 || start as i64 + n as i64 > len {
            excluded.push(exclude(ExclusionReason::OutOfBounds));
            continue;
        }
        let start = start as usize;
        let mut ep = Epoch {
            onset_t: o.t,
            pre_ms,
            post_ms,
            rate_hz: fs,
            channel_labels: labels.clone(),
            data: rec
                .data
                .iter()
                .map(|ch| ch[start..start + n].to_vec())
                .collect(),
            condition_tag: o.condition.clone(),
            word_id: o.word_id.clone(),
        };
        let base = ep.span(b0, b1);
        if base.is_empty() {
            return Err(EegError::InvalidWindow(format!(
                "baseline [{b0}, {b1}) holds no samples"
            )));
        }
        if ep.data.iter().flatten().any(|v| !v.is_finite()) {
            excluded.push(exclude(ExclusionReason::NonFinite));
            continue;
        }
        for ch in &mut ep.data {
            let m = ch[base.clone()].iter().sum::<f64>() / base.len() as f64;
            ch.iter_mut().for_each(|v| *v -= m);
        }
        epochs.push(ep);
    }
    Ok((epochs, excluded))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub epoch_index: usize,
    pub word_id: Option<String>,
    pub channel: String,
    pub peak_to_peak_uv: f64,
}

/// Drops every epoch in which some channel's max − min exceeds the threshold.
pub fn reject_artifacts(epochs: Vec<Epoch>, peak_to_peak_uv: f64) -> (Vec<Epoch>, Vec<Rejection>) {
    let mut kept = Vec::with_capacity(epochs.len());
    let mut rejected = Vec::new();
    for (i, ep) in epochs.into_iter().enumerate() {
        let worst = ep
            .data
            .iter()
            .enumerate()
            .map(|(c, ch)| {
                let (lo, hi) = ch
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                        (lo.min(v), hi.max(v))
                    });
                (c, hi - lo)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match worst {
            Some((c, ptp)) if ptp > peak_to_peak_uv => rejected.push(Rejection {
                epoch_index: i,
                word_id: ep.word_id.clone(),
                channel: ep.channel_labels[c].clone(),
                peak_to_peak_uv: ptp,
            }),
            _ => kept.push(ep),
        }
    }
    (kept, rejected)
}

// ---------------------------------------------------------------------------
// spectral power

pub const WELCH_SEGMENT: usize = 64;
pub const WELCH_STEP: usize = WELCH_SEGMENT / 2;

/// One-sided Welch PSD (density scaling, periodic Hann, constant detrend).
/// Returns `(frequencies, psd)`; `None` when fewer than two segments fit.
pub fn welch_psd(
    x: &[f64],
    fs: f64,
    planner: &mut FftPlanner<f64>,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let seg = WELCH_SEGMENT;
    if x.len() < seg {
        return None;
    }
    let n_seg = (x.len() - seg) / WELCH_STEP + 1;
    if n_seg < 2 {
        return None;
    }
    let window: Vec<f64> = (0..seg)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / seg as f64).cos())
        .collect();
    let wss: f64 = window.iter().map(|w| w * w).sum();
    let fft = planner.plan_fft_forward(seg);
    let n_bins = seg / 2 + 1;
    let mut psd = vec![0.0; n_bins];
    let mut buf = vec![Complex64::new(0.0, 0.0); seg];
    for s in 0..n_seg {
        let chunk = &x[s * WELCH_STEP..s * WELCH_STEP + seg];
        let mean = chunk.iter().sum::<f64>() / seg as f64;
        for (b, (&v, &w)) in buf.iter_mut().zip(chunk.iter().zip(&window)) {
            *b = Complex64::new((v - mean) * w, 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in psd.iter_mut().enumerate() {
            let mut v = buf[k].norm_sqr() / (fs * wss);
            if k != 0 && !(seg.is_multiple_of(2) && k == seg / 2) {
                v *= 2.0;
            }
            *p += v;
        }
    }
    psd.iter_mut().for_each(|p| *p /= n_seg as f64);
    let freqs = (0..n_bins).map(|k| k as f64 * fs / seg as f64).collect();
    Some((freqs, psd))
}

/// Sum of PSD bins with centre frequency in `[lo, hi]`, times the bin width.
pub fn integrate_band(freqs: &[f64], psd: &[f64], lo: f64, hi: f64) -> f64 {
    let df = if freqs.len() > 1 {
        freqs[1] - freqs[0]
    } else {
        0.0
    };
    freqs
        .iter()
        .zip(psd)
        .filter(|(f, _)| **f >= lo - 1e-9 && **f <= hi + 1e-9)
        .map(|(_, p)| p * df)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPowerFeature {
    pub word_id: Option<String>,
    /// µV² per channel, montage order
    pub channel_power: Vec<f64>,
    pub parietal_mean: f64,
}

/// Welch band power of one epoch over the post-onset `window_ms`.
pub fn theta_band_power(
    epoch: &Epoch,
    band_hz: (f64, f64),
    window_ms: (f64, f64),
    parietal: &[String],
) -> Result<BandPowerFeature, EegError> {
    if window_ms.0 < 0.0 || window_ms.1 > epoch.post_ms + 1e-9 || window_ms.0 >= window_ms.1 {
        return Err(EegError::InvalidWindow(format!(
            "analysis window {window_ms:?} outside the post-onset span"
        )));
    }
    let span = epoch.span(window_ms.0, window_ms.1);
    let mut planner = FftPlanner::new();
    let mut channel_power = Vec::with_capacity(epoch.data.len());
    for ch in &epoch.data {
        let (f, p) = welch_psd(&ch[span.clone()], epoch.rate_hz, &mut planner).ok_or(
            EegError::WindowTooShort {
                samples: span.len(),
                segment: WELCH_SEGMENT,
            },
        )?;
        channel_power.push(integrate_band(&f, &p, band_hz.0, band_hz.1));
    }
    let idx = epoch.channel_indices(parietal);
    if idx.is_empty() {
        return Err(EegError::MissingChannels(parietal.to_vec()));
    }
    let parietal_mean = idx.iter().map(|&i| channel_power[i]).sum::<f64>() / idx.len() as f64;
    Ok(BandPowerFeature {
        word_id: epoch.word_id.clone(),
        channel_power,
        parietal_mean,
    })
}

// ---------------------------------------------------------------------------
// ERPs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErpResult {
    pub condition: String,
    pub n_epochs: usize,
    pub mean_waveform: Vec<Vec<f64>>,
    pub n400_amplitude_uv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErpAnalysis {
    pub conditions: Vec<ErpResult>,
    /// `minuend − subtrahend` of the requested contrast.
    pub difference: ErpResult,
}

/// Mean over the window (inclusive ends) and the named channels.
pub fn window_mean(
    data: &[Vec<f64>],
    epoch: &Epoch,
    window_ms: (f64, f64),
    channels: &[usize],
) -> f64 {
    let span = epoch.span_inclusive(window_ms.0, window_ms.1);
    if span.is_empty() || channels.is_empty() {
        return f64::NAN;
    }
    let total: f64 = channels
        .iter()
        .map(|&c| data[c][span.clone()].iter().sum::<f64>())
        .sum();
    total / (span.len() * channels.len()) as f64
}

/// Single-trial N400 amplitude of one epoch.
pub fn n400_amplitude(
    epoch: &Epoch,
    window_ms: (f64, f64),
    channels: &[String],
) -> Result<f64, EegError> {
    let idx = epoch.channel_indices(channels);
    if idx.is_empty() {
        return Err(EegError::MissingChannels(channels.to_vec()));
    }
    Ok(window_mean(&epoch.data, epoch, window_ms, &idx))
}

/// Averages epochs per condition tag and forms the difference wave
/// `contrast.0 − contrast.1` (by default incongruent − congruent).
pub fn compute_erp(
    epochs: &[Epoch],
    contrast: (&str, &str),
    n400_window_ms: (f64, f64),
    n400_channels: &[String],
) -> Result<ErpAnalysis, EegError> {
    let mut groups: BTreeMap<&str, Vec<&Epoch>> = BTreeMap::new();
    for e in epochs {
        if let Some(tag) = e.condition_tag.as_deref() {
            groups.entry(tag).or_default().push(e);
        }
    }
    for name in [contrast.0, contrast.1] {
        if groups.get(name).is_none_or(|g| g.is_empty()) {
            return Err(EegError::EmptyCondition(name.to_string()));
        }
    }
    let template = groups[contrast.0][0];
    let idx = template.channel_indices(n400_channels);
    if idx.is_empty() {
        return Err(EegError::MissingChannels(n400_channels.to_vec()));
    }
    let average = |name: &str, members: &[&Epoch]| {
        let (nc, nt) = (members[0].data.len(), members[0].n_samples());
        let mut mean = vec![vec![0.0; nt]; nc];
        for e in members {
            for (acc, ch) in mean.iter_mut().zip(&e.data) {
                acc.iter_mut().zip(ch).for_each(|(a, v)| *a += v);
            }
        }
        let k = members.len() as f64;
        mean.iter_mut().flatten().for_each(|v| *v /= k);
        let amp = window_mean(&mean, template, n400_window_ms, &idx);
        ErpResult {
            condition: name.to_string(),
            n_epochs: members.len(),
            mean_waveform: mean,
            n400_amplitude_uv: amp,
        }
    };
    let conditions: Vec<ErpResult> = groups
        .iter()
        .map(|(name, members)| average(name, members))
        .collect();
    let a = conditions
        .iter()
        .find(|c| c.condition == contrast.0)
        .unwrap();
    let b = conditions
        .iter()
        .find(|c| c.condition == contrast.1)
        .unwrap();
    let diff: Vec<Vec<f64>> = a
        .mean_waveform
        .iter()
        .zip(&b.mean_waveform)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect())
        .collect();
    let amp = window_mean(&diff, template, n400_window_ms, &idx);
    let difference = ErpResult {
        condition: format!("{} - {}", contrast.0, contrast.1),
        n_epochs: a.n_epochs + b.n_epochs,
        mean_waveform: diff,
        n400_amplitude_uv: amp,
    };
    Ok(ErpAnalysis {
        conditions,
        difference,
    })
}
