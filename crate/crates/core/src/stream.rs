//! Multi-rate timestamped streams and their mapping onto one recording clock.
//!
//! Clock offsets follow the XDF convention: a [`ClockOffsetMeasurement`] on a
//! stream records the value that must be *added* to the stream's local
//! timestamps to express them on the recording clock. A [`ClockModel`] fitted
//! to those measurements is applied the same way.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fraction of probes discarded as outliers before the final clock fit.
pub const CLOCK_TRIM_FRACTION: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StreamError {
    #[error("too few clock offset measurements: {0} (need at least 2)")]
    TooFewMeasurements(usize),
    #[error("all clock offset measurements share the same local time")]
    DegenerateTimes,
    #[error("empty timestamp list")]
    EmptyInput,
    #[error("invalid nominal rate {0} Hz")]
    InvalidRate(f64),
    #[error("invalid gap threshold {0} s")]
    InvalidGapThreshold(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Gaze,
    Eeg,
    Input,
    Layout,
    Rating,
    Marker,
}

impl StreamKind {
    /// Content type string used in stream header XML.
    pub fn as_str(self) -> &'static str {
        match self {
            StreamKind::Gaze => "Gaze",
            StreamKind::Eeg => "EEG",
            StreamKind::Input => "Input",
            StreamKind::Layout => "Layout",
            StreamKind::Rating => "Rating",
            StreamKind::Marker => "Markers",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaze" => Some(StreamKind::Gaze),
            "eeg" => Some(StreamKind::Eeg),
            "input" => Some(StreamKind::Input),
            "layout" => Some(StreamKind::Layout),
            "rating" => Some(StreamKind::Rating),
            "markers" | "marker" => Some(StreamKind::Marker),
            _ => None,
        }
    }

    /// Wire format a stream of this kind uses unless told otherwise.
    pub fn default_format(self) -> ChannelFormat {
        match self {
            StreamKind::Gaze | StreamKind::Eeg | StreamKind::Input => ChannelFormat::Float32,
            StreamKind::Layout | StreamKind::Rating | StreamKind::Marker => ChannelFormat::String,
        }
    }
}

/// Value type of a stream's channels on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelFormat {
    Float32,
    Double64,
    String,
}

impl ChannelFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelFormat::Float32 => "float32",
            ChannelFormat::Double64 => "double64",
            ChannelFormat::String => "string",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "float32" => Some(ChannelFormat::Float32),
            "double64" => Some(ChannelFormat::Double64),
            "string" => Some(ChannelFormat::String),
            _ => None,
        }
    }

    pub fn is_numeric(self) -> bool {
        !matches!(self, ChannelFormat::String)
    }
}

/// Static description of one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamInfo {
    pub stream_id: String,
    pub kind: StreamKind,
    pub channel_count: usize,
    /// 0 marks an irregular stream.
    pub nominal_rate_hz: f64,
    pub channel_labels: Vec<String>,
    #[serde(default)]
    pub source_metadata: BTreeMap<String, String>,
    pub channel_format: ChannelFormat,
}

impl StreamInfo {
    pub fn new(
        stream_id: impl Into<String>,
        kind: StreamKind,
        labels: &[&str],
        nominal_rate_hz: f64,
    ) -> Self {
        Self {
            stream_id: stream_id.into(),
            kind,
            channel_count: labels.len(),
            nominal_rate_hz,
            channel_labels: labels.iter().map(|s| s.to_string()).collect(),
            source_metadata: BTreeMap::new(),
            channel_format: kind.default_format(),
        }
    }

    pub fn format(&self) -> ChannelFormat {
        self.channel_format
    }

    pub fn is_regular(&self) -> bool {
        self.nominal_rate_hz > 0.0
    }

    /// Checks the per-stream invariants; returns a description of the first violation.
    pub fn check(&self) -> Result<(), String> {
        if self.stream_id.is_empty() {
            return Err("stream_id is empty".into());
        }
        if self.channel_count == 0 {
            return Err(format!(
                "stream {}: channel_count must be positive",
                self.stream_id
            ));
        }
        if self.channel_labels.len() != self.channel_count {
            return Err(format!(
                "stream {}: {} channel labels for {} channels",
                self.stream_id,
                self.channel_labels.len(),
                self.channel_count
            ));
        }
        if !(self.nominal_rate_hz.is_finite() && self.nominal_rate_hz >= 0.0) {
            return Err(format!(
                "stream {}: nominal_rate_hz must be >= 0",
                self.stream_id
            ));
        }
        Ok(())
    }
}

/// Row-major sample values; `len == rows * channel_count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleValues {
    Numeric(Vec<f64>),
    Text(Vec<String>),
}

impl SampleValues {
    pub fn len(&self) -> usize {
        match self {
            SampleValues::Numeric(v) => v.len(),
            SampleValues::Text(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn empty_for(format: ChannelFormat) -> Self {
        if format.is_numeric() {
            SampleValues::Numeric(Vec::new())
        } else {
            SampleValues::Text(Vec::new())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedSamples {
    pub channel_count: usize,
    pub timestamps: Vec<f64>,
    pub values: SampleValues,
}

impl TimedSamples {
    pub fn empty(info: &StreamInfo) -> Self {
        Self {
            channel_count: info.channel_count,
            timestamps: Vec::new(),
            values: SampleValues::empty_for(info.format()),
        }
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn numeric_row(&self, i: usize) -> Option<&[f64]> {
        match &self.values {
            SampleValues::Numeric(v) => v.get(i * self.channel_count..(i + 1) * self.channel_count),
            SampleValues::Text(_) => None,
        }
    }

    pub fn text_row(&self, i: usize) -> Option<&[String]> {
        match &self.values {
            SampleValues::Text(v) => v.get(i * self.channel_count..(i + 1) * self.channel_count),
            SampleValues::Numeric(_) => None,
        }
    }

    /// Numeric values of one channel across all rows.
    pub fn channel(&self, ch: usize) -> Vec<f64> {
        match &self.values {
            SampleValues::Numeric(v) => v
                .iter()
                .skip(ch)
                .step_by(self.channel_count.max(1))
                .copied()
                .collect(),
            SampleValues::Text(_) => Vec::new(),
        }
    }
}

/// One clock offset observation: the value to add to a timestamp of the
/// measured clock, sampled at `local_time` on that same clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockOffsetMeasurement {
    pub local_time: f64,
    pub measured_offset: f64,
}

impl ClockOffsetMeasurement {
    /// Re-expresses the observation from the other clock's point of view.
    ///
    /// If `self` says clock B reads `local_time + measured_offset` when clock A
    /// reads `local_time`, the result says clock A reads `t - measured_offset`
    /// when clock B reads `t = local_time + measured_offset`.
    pub fn reversed(self) -> Self {
        Self {
            local_time: self.local_time + self.measured_offset,
            measured_offset: -self.measured_offset,
        }
    }
}

/// Linear clock correction `offset(t) = intercept + slope * t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockModel {
    pub intercept: f64,
    pub slope: f64,
    pub fit_residual_rms: f64,
    pub n_points: usize,
}

impl ClockModel {
    pub fn identity() -> Self {
        Self {
            intercept: 0.0,
            slope: 0.0,
            fit_residual_rms: 0.0,
            n_points: 0,
        }
    }

    #[inline]
    pub fn offset_at(&self, t: f64) -> f64 {
        self.intercept + self.slope * t
    }

    #[inline]
    pub fn apply(&self, t: f64) -> f64 {
        t + self.offset_at(t)
    }
}

/// Least-squares line through (x, y), computed on centered data.
/// Returns (intercept, slope) or `None` if all x are equal.
pub(crate) fn line_fit(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for &(x, y) in points {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((my - slope * mx, slope))
}

/// Fits a linear clock model with one robust re-fit pass that drops the
/// [`CLOCK_TRIM_FRACTION`] of points with the largest initial residuals.
pub fn fit_clock_offset(
    measurements: &[ClockOffsetMeasurement],
) -> Result<ClockModel, StreamError> {
    if measurements.len() < 2 {
        return Err(StreamError::TooFewMeasurements(measurements.len()));
    }
    if measurements
        .iter()
        .any(|m| !m.local_time.is_finite() || !m.measured_offset.is_finite())
    {
        return Err(StreamError::NonFinite("clock offset measurements"));
    }
    let points: Vec<(f64, f64)> = measurements
        .iter()
        .map(|m| (m.local_time, m.measured_offset))
        .collect();
    let (a0, b0) = line_fit(&points).ok_or(StreamError::DegenerateTimes)?;

    let n_trim = (CLOCK_TRIM_FRACTION * points.len() as f64).floor() as usize;
    let mut kept = points.clone();
    if n_trim > 0 {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let resid = |i: usize| (points[i].1 - (a0 + b0 * points[i].0)).abs();
        // stable order keeps the trim deterministic under ties
        order.sort_by(|&i, &j| resid(i).total_cmp(&resid(j)));
        let mut keep_idx: Vec<usize> = order[..points.len() - n_trim].to_vec();
        keep_idx.sort_unstable();
        kept = keep_idx.iter().map(|&i| points[i]).collect();
    }
    let (intercept, slope) = match line_fit(&kept) {
        Some(fit) if kept.len() >= 2 => fit,
        _ => {
            kept = points;
            (a0, b0)
        }
    };
    let ss: f64 = kept
        .iter()
        .map(|&(x, y)| (y - (intercept + slope * x)).powi(2))
        .sum();
    Ok(ClockModel {
        intercept,
        slope,
        fit_residual_rms: (ss / kept.len() as f64).sqrt(),
        n_points: kept.len(),
    })
}

/// Default segmentation threshold for dejittering: `max(1 s, 10 / rate)`.
pub fn default_gap_threshold(nominal_rate_hz: f64) -> f64 {
    if nominal_rate_hz > 0.0 {
        (10.0 / nominal_rate_hz).max(1.0)
    } else {
        1.0
    }
}

/// Replaces jittered timestamps of a regular stream by a per-segment
/// least-squares line over sample index. Segments break at gaps larger than
/// `gap_threshold_s`. Irregular streams (`nominal_rate_hz == 0`) are returned as is.
pub fn dejitter_timestamps(
    stamps: &[f64],
    nominal_rate_hz: f64,
    gap_threshold_s: f64,
) -> Result<Vec<f64>, StreamError> {
    if stamps.is_empty() {
        return Err(StreamError::EmptyInput);
    }
    if !(nominal_rate_hz.is_finite() && nominal_rate_hz >= 0.0) {
        return Err(StreamError::InvalidRate(nominal_rate_hz));
    }
    if nominal_rate_hz == 0.0 {
        return Ok(stamps.to_vec());
    }
    if !(gap_threshold_s > 0.0) {
        return Err(StreamError::InvalidGapThreshold(gap_threshold_s));
    }
    let mut out = Vec::with_capacity(stamps.len());
    let mut start = 0;
    for i in 1..=stamps.len() {
        let at_break = i == stamps.len() || stamps[i] - stamps[i - 1] > gap_threshold_s;
        if at_break {
            out.extend(regularize_segment(&stamps[start..i]));
            start = i;
        }
    }
    Ok(out)
}

fn regularize_segment(seg: &[f64]) -> Vec<f64> {
    if seg.len() < 2 {
        return seg.to_vec();
    }
    let n = seg.len() as f64;
    let mk = (n - 1.0) / 2.0;
    let mt = seg.iter().sum::<f64>() / n;
    let mut skk = 0.0;
    let mut skt = 0.0;
    for (k, &t) in seg.iter().enumerate() {
        let dk = k as f64 - mk;
        skk += dk * dk;
        skt += dk * (t - mt);
    }
    let step = skt / skk;
    (0..seg.len())
        .map(|k| mt + step * (k as f64 - mk))
        .collect()
}

/// Maps every timestamp through the clock model.
pub fn to_recording_clock(samples: &TimedSamples, model: &ClockModel) -> TimedSamples {
    TimedSamples {
        channel_count: samples.channel_count,
        timestamps: samples.timestamps.iter().map(|&t| model.apply(t)).collect(),
        values: samples.values.clone(),
    }
}

/// Full alignment of one recorded stream: clock fit (identity when fewer than
/// two probes exist), correction, then dejittering for regular streams.
pub fn synchronize(
    info: &StreamInfo,
    samples: &TimedSamples,
    offsets: &[ClockOffsetMeasurement],
) -> Result<(TimedSamples, ClockModel), StreamError> {
    let model = if offsets.len() >= 2 {
        fit_clock_offset(offsets)?
    } else if let Some(m) = offsets.first() {
        ClockModel {
            intercept: m.measured_offset,
            slope: 0.0,
            fit_residual_rms: 0.0,
            n_points: 1,
        }
    } else {
        ClockModel::identity()
    };
    let mut aligned = to_recording_clock(samples, &model);
    if info.is_regular() && !aligned.timestamps.is_empty() {
        let gap = default_gap_threshold(info.nominal_rate_hz);
        aligned.timestamps = dejitter_timestamps(&aligned.timestamps, info.nominal_rate_hz, gap)?;
    }
    Ok((aligned, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meas(t: f64, o: f64) -> ClockOffsetMeasurement {
        ClockOffsetMeasurement {
            local_time: t,
            measured_offset: o,
        }
    }

    #[test]
    fn constant_offset_fit() {
        let m: Vec<_> = (0..10).map(|i| meas(i as f64 * 5.0, 0.5)).collect();
        let model = fit_clock_offset(&m).unwrap();
        assert!((model.intercept - 0.5).abs() < 1e-9);
        assert!(model.slope.abs() < 1e-9);
    }

    #[test]
    fn drift_fit_matches_closed_form() {
        let m: Vec<_> = (0..=100)
            .map(|i| meas(i as f64, 0.5 + 5e-5 * i as f64))
            .collect();
        let model = fit_clock_offset(&m).unwrap();
        assert!((model.slope - 5e-5).abs() < 1e-9, "slope {}", model.slope);
        assert!((model.intercept - 0.5).abs() < 1e-9);
    }

    #[test]
    fn fit_errors() {
        assert_eq!(
            fit_clock_offset(&[meas(1.0, 0.1)]),
            Err(StreamError::TooFewMeasurements(1))
        );
        assert_eq!(
            fit_clock_offset(&[meas(1.0, 0.1), meas(1.0, 0.2)]),
            Err(StreamError::DegenerateTimes)
        );
    }

    #[test]
    fn fit_trims_outlier_probe() {
        let mut m: Vec<_> = (0..20)
            .map(|i| meas(i as f64 * 3.0, 0.25 + 1e-5 * i as f64 * 3.0))
            .collect();
        m[7].measured_offset += 0.05;
        let model = fit_clock_offset(&m).unwrap();
        assert_eq!(model.n_points, 16);
        assert!((model.intercept - 0.25).abs() < 1e-9);
        assert!((model.slope - 1e-5).abs() < 1e-9);
    }

    #[test]
    fn dejitter_regular_is_identity() {
        let t0 = 12.5;
        let s: Vec<f64> = (0..900).map(|k| t0 + k as f64 / 300.0).collect();
        let d = dejitter_timestamps(&s, 300.0, default_gap_threshold(300.0)).unwrap();
        for (a, b) in s.iter().zip(&d) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dejitter_reduces_uniform_jitter() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let truth: Vec<f64> = (0..3000).map(|k| 3.0 + k as f64 / 300.0).collect();
        let noisy: Vec<f64> = truth
            .iter()
            .map(|t| t + rng.gen_range(-0.002..0.002))
            .collect();
        let d = dejitter_timestamps(&noisy, 300.0, 1.0).unwrap();
        let rms = (truth
            .iter()
            .zip(&d)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / truth.len() as f64)
            .sqrt();
        assert!(rms < 2e-4, "rms {rms}");
    }

    #[test]
    fn dejitter_preserves_gap() {
        let mut s: Vec<f64> = (0..100).map(|k| k as f64 / 100.0).collect();
        let last = *s.last().unwrap();
        s.extend((0..100).map(|k| last + 2.0 + k as f64 / 100.0));
        let d = dejitter_timestamps(&s, 100.0, 1.0).unwrap();
        assert!((d[100] - d[99] - 2.0).abs() < 1e-9);
        assert!((d[0] - 0.0).abs() < 1e-9);
    }

    #[test]
    fn dejitter_passthrough_and_errors() {
        let s = vec![0.0, 0.3, 0.31, 5.0];
        assert_eq!(dejitter_timestamps(&s, 0.0, 1.0).unwrap(), s);
        assert_eq!(
            dejitter_timestamps(&[], 10.0, 1.0),
            Err(StreamError::EmptyInput)
        );
    }

    #[test]
    fn recording_clock_examples() {
        let s = TimedSamples {
            channel_count: 1,
            timestamps: vec![1.0, 2.0],
            values: SampleValues::Numeric(vec![0.0, 0.0]),
        };
        assert_eq!(
            to_recording_clock(&s, &ClockModel::identity()).timestamps,
            vec![1.0, 2.0]
        );
        let m = ClockModel {
            intercept: -0.5,
            slope: 0.0,
            fit_residual_rms: 0.0,
            n_points: 2,
        };
        assert_eq!(to_recording_clock(&s, &m).timestamps, vec![0.5, 1.5]);
    }

    #[test]
    fn drift_model_round_trips_remote_grid() {
        // remote clock: local = rec * (1 + d) + o
        let (o, d) = (0.5, 5e-5);
        let rec: Vec<f64> = (0..6000).map(|k| k as f64 / 100.0).collect();
        let local: Vec<f64> = rec.iter().map(|t| t * (1.0 + d) + o).collect();
        let probes: Vec<_> = (0..=12)
            .map(|i| {
                let tr = i as f64 * 5.0;
                let tl = tr * (1.0 + d) + o;
                meas(tl, tr - tl)
            })
            .collect();
        let model = fit_clock_offset(&probes).unwrap();
        let s = TimedSamples {
            channel_count: 1,
            timestamps: local,
            values: SampleValues::Numeric(vec![0.0; 6000]),
        };
        let back = to_recording_clock(&s, &model);
        for (a, b) in rec.iter().zip(&back.timestamps) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn reversed_is_involution() {
        let m = meas(10.0, 0.25);
        let r = m.reversed();
        assert_eq!(r.local_time, 10.25);
        assert_eq!(r.measured_offset, -0.25);
        assert_eq!(r.reversed(), m);
    }
}
