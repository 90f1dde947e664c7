//! Fixation detection, word AOI mapping, and word/sentence fixation metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stream::TimedSamples;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GazeError {
    #[error("no gaze samples")]
    EmptyInput,
    #[error("no layout snapshot at or before t = {0}")]
    NoLayoutAvailable(f64),
    #[error("word {0} is not part of the layout")]
    UnknownWord(String),
    #[error("invalid I-VT parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("layout sample {index} is not a valid snapshot: {reason}")]
    BadLayoutJson { index: usize, reason: String },
    #[error("gaze stream needs 3 channels (x, y, valid), found {0}")]
    BadGazeStream(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeSample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub valid: bool,
}

/// Reads `(x, y, valid)` rows from an aligned gaze stream.
pub fn gaze_samples(samples: &TimedSamples) -> Result<Vec<GazeSample>, GazeError> {
    if samples.channel_count != 3 {
        return Err(GazeError::BadGazeStream(samples.channel_count));
    }
    Ok((0..samples.len())
        .filter_map(|i| {
            let r = samples.numeric_row(i)?;
            let valid = r[2] > 0.5 && r[0].is_finite() && r[1].is_finite();
            Some(GazeSample {
                t: samples.timestamps[i],
                x: r[0],
                y: r[1],
                valid,
            })
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fixation {
    pub start_t: f64,
    pub end_t: f64,
    pub centroid_x: f64,
    pub centroid_y: f64,
    pub sample_count: usize,
}

impl Fixation {
    pub fn duration_ms(&self) -> f64 {
        (self.end_t - self.start_t) * 1000.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IvtParams {
    pub velocity_threshold_px_s: f64,
    pub min_duration_ms: f64,
    pub max_gap_ms: f64,
    /// When set, `velocity_threshold_px_s` is read as degrees per second and
    /// converted with this factor.
    pub px_per_degree: Option<f64>,
}

impl Default for IvtParams {
    fn default() -> Self {
        Self {
            velocity_threshold_px_s: 1000.0,
            min_duration_ms: 60.0,
            max_gap_ms: 75.0,
            px_per_degree: None,
        }
    }
}

impl IvtParams {
    fn threshold_px_s(&self) -> f64 {
        match self.px_per_degree {
            Some(k) => self.velocity_threshold_px_s * k,
            None => self.velocity_threshold_px_s,
        }
    }
}

/// Velocity-threshold fixation identification.
///
/// Each pair of consecutive valid samples forms an interval whose
/// point-to-point velocity is compared with the threshold. Maximal runs of
/// slow intervals become fixations spanning from the first to the last sample
/// of the run. Runs of invalid samples up to `max_gap_ms` are bridged; longer
/// gaps end the current run.
pub fn detect_fixations_ivt(
    samples: &[GazeSample],
    params: &IvtParams,
) -> Result<Vec<Fixation>, GazeError> {
    if samples.is_empty() {
        return Err(GazeError::EmptyInput);
    }
    let threshold = params.threshold_px_s();
    if !(threshold > 0.0) {
        return Err(GazeError::InvalidParameter(
            "velocity threshold must be positive",
        ));
    }
    if !(params.min_duration_ms > 0.0) || params.max_gap_ms < 0.0 {
        return Err(GazeError::InvalidParameter("durations must be positive"));
    }
    let max_gap = params.max_gap_ms / 1000.0;

    let mut out = Vec::new();
    let mut run: Vec<&GazeSample> = Vec::new();
    let mut close = |run: &mut Vec<&GazeSample>| {
        if run.len() >= 2 {
            let (start_t, end_t) = (run[0].t, run[run.len() - 1].t);
            if end_t > start_t && (end_t - start_t) * 1000.0 >= params.min_duration_ms {
                let n = run.len() as f64;
                out.push(Fixation {
                    start_t,
                    end_t,
                    centroid_x: run.iter().map(|s| s.x).sum::<f64>() / n,
                    centroid_y: run.iter().map(|s| s.y).sum::<f64>() / n,
                    sample_count: run.len(),
                });
            }
        }
        run.clear();
    };

    let mut prev: Option<&GazeSample> = None;
    for s in samples.iter().filter(|s| s.valid) {
        if let Some(p) = prev {
            let dt = s.t - p.t;
            let dist = (s.x - p.x).hypot(s.y - p.y);
            let slow = if dt > max_gap {
                false
            } else if dt > 0.0 {
                dist / dt < threshold
            } else {
                dist == 0.0
            };
            if dt > max_gap {
                close(&mut run);
            } else if slow {
                if run.is_empty() {
                    run.push(p);
                }
                run.push(s);
            } else {
                close(&mut run);
            }
        }
        prev = Some(s);
    }
    close(&mut run);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    #[serde(rename = "l")]
    pub left: f64,
    #[serde(rename = "t")]
    pub top: f64,
    #[serde(rename = "w")]
    pub width: f64,
    #[serde(rename = "h")]
    pub height: f64,
}

impl BBox {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.left
            && x <= self.left + self.width
            && y >= self.top
            && y <= self.top + self.height
    }

    /// Euclidean distance from a point to the box (0 inside).
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        let dx = (self.left - x).max(0.0).max(x - (self.left + self.width));
        let dy = (self.top - y).max(0.0).max(y - (self.top + self.height));
        dx.hypot(dy)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.left + self.width / 2.0, self.top + self.height / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordBox {
    pub word_id: String,
    pub sentence_id: String,
    pub text: String,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expectedness: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Viewport {
    #[serde(rename = "sx")]
    pub scroll_x: f64,
    #[serde(rename = "sy")]
    pub scroll_y: f64,
    #[serde(rename = "w")]
    pub width: f64,
    #[serde(rename = "h")]
    pub height: f64,
}

/// Word geometry in document coordinates plus the scroll state at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSnapshot {
    pub t: f64,
    pub words: Vec<WordBox>,
    pub viewport: Viewport,
}

impl LayoutSnapshot {
    pub fn word(&self, word_id: &str) -> Option<&WordBox> {
        self.words.iter().find(|w| w.word_id == word_id)
    }
}

/// Parses a layout stream. Each sample is one JSON snapshot; its `t` is
/// replaced by the (aligned) sample timestamp.
pub fn parse_layout_stream(samples: &TimedSamples) -> Result<Vec<LayoutSnapshot>, GazeError> {
    let mut out = Vec::with_capacity(samples.len());
    for i in 0..samples.len() {
        let row = samples
            .text_row(i)
            .ok_or_else(|| GazeError::BadLayoutJson {
                index: i,
                reason: "not a text stream".into(),
            })?;
        let mut snap: LayoutSnapshot =
            serde_json::from_str(&row[0]).map_err(|e| GazeError::BadLayoutJson {
                index: i,
                reason: e.to_string(),
            })?;
        snap.t = samples.timestamps[i];
        out.push(snap);
    }
    out.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(out)
}

/// Maps a fixation onto a word using the latest snapshot at or before the
/// fixation start. Screen coordinates are shifted by that snapshot's scroll
/// offsets into document coordinates.
pub fn map_fixation_to_word(
    f: &Fixation,
    layouts: &[LayoutSnapshot],
    slack_px: f64,
) -> Result<Option<String>, GazeError> {
    let idx = layouts.partition_point(|l| l.t <= f.start_t);
    if idx == 0 {
        return Err(GazeError::NoLayoutAvailable(f.start_t));
    }
    let snap = &layouts[idx - 1];
    let x = f.centroid_x + snap.viewport.scroll_x;
    let y = f.centroid_y + snap.viewport.scroll_y;
    if let Some(w) = snap.words.iter().find(|w| w.bbox.contains(x, y)) {
        return Ok(Some(w.word_id.clone()));
    }
    let nearest = snap
        .words
        .iter()
        .map(|w| (w.bbox.distance(x, y), w))
        .filter(|(d, _)| *d <= slack_px)
        .min_by(|a, b| a.0.total_cmp(&b.0));
    Ok(nearest.map(|(_, w)| w.word_id.clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordMetrics {
    pub word_id: String,
    pub total_fixation_ms: f64,
    pub first_fixation_start_t: f64,
    pub first_fixation_end_t: f64,
    pub fixation_count: usize,
}

/// Per-word totals over `(fixation, word)` hits, ordered by first fixation.
pub fn aggregate_word_metrics(hits: &[(Fixation, String)]) -> Vec<WordMetrics> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut out: Vec<WordMetrics> = Vec::new();
    for (f, w) in hits {
        match index.get(w.as_str()) {
            Some(&i) => {
                let m = &mut out[i];
                m.total_fixation_ms += f.duration_ms();
                m.fixation_count += 1;
                if f.start_t < m.first_fixation_start_t {
                    m.first_fixation_start_t = f.start_t;
                    m.first_fixation_end_t = f.end_t;
                }
            }
            None => {
                index.insert(w, out.len());
                out.push(WordMetrics {
                    word_id: w.clone(),
                    total_fixation_ms: f.duration_ms(),
                    first_fixation_start_t: f.start_t,
                    first_fixation_end_t: f.end_t,
                    fixation_count: 1,
                });
            }
        }
    }
    out.sort_by(|a, b| {
        a.first_fixation_start_t
            .total_cmp(&b.first_fixation_start_t)
    });
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceMetrics {
    pub sentence_id: String,
    pub total_fixation_ms: f64,
    pub words_fixated: usize,
    pub first_entry_t: f64,
}

/// Rolls word metrics up to their sentences, ordered by first entry.
pub fn sentence_metrics(
    words: &[WordMetrics],
    layout: &LayoutSnapshot,
) -> Result<Vec<SentenceMetrics>, GazeError> {
    let sentence_of: HashMap<&str, &str> = layout
        .words
        .iter()
        .map(|w| (w.word_id.as_str(), w.sentence_id.as_str()))
        .collect();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut out: Vec<SentenceMetrics> = Vec::new();
    for w in words {
        let sid = *sentence_of
            .get(w.word_id.as_str())
            .ok_or_else(|| GazeError::UnknownWord(w.word_id.clone()))?;
        match index.get(sid) {
            Some(&i) => {
                let s = &mut out[i];
                s.total_fixation_ms += w.total_fixation_ms;
                s.words_fixated += 1;
                s.first_entry_t = s.first_entry_t.min(w.first_fixation_start_t);
            }
            None => {
                index.insert(sid, out.len());
                out.push(SentenceMetrics {
                    sentence_id: sid.to_string(),
                    total_fixation_ms: w.total_fixation_ms,
                    words_fixated: 1,
                    first_entry_t: w.first_fixation_start_t,
                });
            }
        }
    }
    out.sort_by(|a, b| a.first_entry_t.total_cmp(&b.first_entry_t));
    Ok(out)
}

/// Ids of the `k` sentences with the longest total fixation time; ties go to
/// the sentence entered first.
pub fn select_longest_fixated(sentences: &[SentenceMetrics], k: usize) -> Vec<String> {
    let mut ranked: Vec<&SentenceMetrics> = sentences.iter().collect();
    ranked.sort_by(|a, b| {
        b.total_fixation_ms
            .total_cmp(&a.total_fixation_ms)
            .then(a.first_entry_t.total_cmp(&b.first_entry_t))
    });
    ranked
        .into_iter()
        .take(k)
        .map(|s| s.sentence_id.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const RATE: f64 = 300.0;

    fn hold(t0: f64, n: usize, x: f64, y: f64) -> Vec<GazeSample> {
        (0..n)
            .map(|k| GazeSample {
                t: t0 + k as f64 / RATE,
                x,
                y,
                valid: true,
            })
            .collect()
    }

    fn fix(start: f64, dur_ms: f64) -> Fixation {
        Fixation {
            start_t: start,
            end_t: start + dur_ms / 1000.0,
            centroid_x: 0.0,
            centroid_y: 0.0,
            sample_count: 10,
        }
    }

    #[test]
    fn two_clusters_joined_by_sweep() {
        // 300 ms at (100, 200), 40 ms sweep to (400, 220), 300 ms hold
        let mut s = hold(0.0, 90, 100.0, 200.0);
        let t_sweep = 90.0 / RATE;
        for k in 1..12 {
            let a = k as f64 / 12.0;
            s.push(GazeSample {
                t: t_sweep + (k - 1) as f64 / RATE,
                x: 100.0 + 300.0 * a,
                y: 200.0 + 20.0 * a,
                valid: true,
            });
        }
        s.extend(hold(t_sweep + 11.0 / RATE, 90, 400.0, 220.0));
        let f = detect_fixations_ivt(&s, &IvtParams::default()).unwrap();
        assert_eq!(f.len(), 2);
        assert!((f[0].centroid_x - 100.0).abs() < 0.5 && (f[0].centroid_y - 200.0).abs() < 0.5);
        assert!((f[1].centroid_x - 400.0).abs() < 0.5 && (f[1].centroid_y - 220.0).abs() < 0.5);
    }

    #[test]
    fn smooth_motion_has_no_fixations() {
        let s: Vec<_> = (0..600)
            .map(|k| GazeSample {
                t: k as f64 / RATE,
                x: 5.0 * k as f64,
                y: 0.0,
                valid: true,
            })
            .collect();
        assert!(detect_fixations_ivt(&s, &IvtParams::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn short_run_below_min_duration() {
        let s = hold(0.0, 13, 10.0, 10.0); // 40 ms span
        let p = IvtParams {
            min_duration_ms: 60.0,
            ..Default::default()
        };
        assert!(detect_fixations_ivt(&s, &p).unwrap().is_empty());
        assert_eq!(detect_fixations_ivt(&[], &p), Err(GazeError::EmptyInput));
    }

    #[test]
    fn invalid_gaps_bridge_or_split() {
        let mut s = hold(0.0, 120, 50.0, 50.0);
        for g in &mut s[40..55] {
            g.valid = false; // 50 ms gap: bridged
        }
        assert_eq!(
            detect_fixations_ivt(&s, &IvtParams::default())
                .unwrap()
                .len(),
            1
        );
        for g in &mut s[40..70] {
            g.valid = false; // 100 ms gap: split
        }
        assert_eq!(
            detect_fixations_ivt(&s, &IvtParams::default())
                .unwrap()
                .len(),
            2
        );
    }

    #[test]
    fn degree_threshold_conversion() {
        let s: Vec<_> = (0..120)
            .map(|k| GazeSample {
                t: k as f64 / RATE,
                x: 2.0 * k as f64,
                y: 0.0,
                valid: true,
            })
            .collect();
        // 600 px/s: slow at 1000 px/s, fast at 10 deg/s * 40 px/deg = 400 px/s
        assert_eq!(
            detect_fixations_ivt(&s, &IvtParams::default())
                .unwrap()
                .len(),
            1
        );
        let p = IvtParams {
            velocity_threshold_px_s: 10.0,
            px_per_degree: Some(40.0),
            ..Default::default()
        };
        assert!(detect_fixations_ivt(&s, &p).unwrap().is_empty());
    }

    fn layout(t: f64, sy: f64) -> LayoutSnapshot {
        let word = |id: &str, sid: &str, l: f64, top: f64| WordBox {
            word_id: id.into(),
            sentence_id: sid.into(),
            text: id.into(),
            bbox: BBox {
                left: l,
                top,
                width: 60.0,
                height: 20.0,
            },
            expectedness: None,
        };
        LayoutSnapshot {
            t,
            words: vec![
                word("w1", "s1", 100.0, 100.0),
                word("w2", "s1", 200.0, 100.0),
                word("w3", "s2", 100.0, 300.0),
            ],
            viewport: Viewport {
                scroll_x: 0.0,
                scroll_y: sy,
                width: 1920.0,
                height: 1080.0,
            },
        }
    }

    #[test]
    fn mapping_uses_scroll_and_slack() {
        let mut f = fix(1.0, 200.0);
        (f.centroid_x, f.centroid_y) = (130.0, 110.0);
        let ls = vec![layout(0.0, 0.0)];
        assert_eq!(
            map_fixation_to_word(&f, &ls, 0.0).unwrap().as_deref(),
            Some("w1")
        );
        // scrolled by 100: screen (130, 210) is document (130, 310)
        (f.centroid_x, f.centroid_y) = (130.0, 210.0);
        let ls = vec![layout(0.0, 0.0), layout(0.5, 100.0), layout(2.0, 0.0)];
        assert_eq!(
            map_fixation_to_word(&f, &ls, 0.0).unwrap().as_deref(),
            Some("w3")
        );
        // 30 px away from every box
        (f.centroid_x, f.centroid_y) = (130.0, 150.0);
        assert_eq!(
            map_fixation_to_word(&f, &[layout(0.0, 0.0)], 10.0).unwrap(),
            None
        );
        assert_eq!(
            map_fixation_to_word(&f, &[layout(0.0, 0.0)], 35.0)
                .unwrap()
                .as_deref(),
            Some("w1")
        );
        assert!(matches!(
            map_fixation_to_word(&f, &[layout(5.0, 0.0)], 0.0),
            Err(GazeError::NoLayoutAvailable(_))
        ));
    }

    #[test]
    fn word_metrics_additivity() {
        let m = aggregate_word_metrics(&[(fix(1.0, 200.0), "w".into())]);
        assert_eq!(m.len(), 1);
        assert!((m[0].total_fixation_ms - 200.0).abs() < 1e-9);
        let m =
            aggregate_word_metrics(&[(fix(2.0, 150.0), "w".into()), (fix(1.0, 200.0), "w".into())]);
        assert!((m[0].total_fixation_ms - 350.0).abs() < 1e-9);
        assert_eq!(m[0].fixation_count, 2);
        assert_eq!(m[0].first_fixation_start_t, 1.0);
    }

    #[test]
    fn sentence_rollup_and_ranking() {
        let hits = vec![
            (fix(1.0, 300.0), "w1".to_string()),
            (fix(1.5, 600.0), "w2".into()),
            (fix(2.5, 400.0), "w3".into()),
        ];
        let words = aggregate_word_metrics(&hits);
        let s = sentence_metrics(&words, &layout(0.0, 0.0)).unwrap();
        assert_eq!(s.len(), 2);
        assert!((s[0].total_fixation_ms - 900.0).abs() < 1e-9);
        assert_eq!(s[0].words_fixated, 2);
        assert_eq!(select_longest_fixated(&s, 1), vec!["s1"]);
        assert_eq!(select_longest_fixated(&s, 10).len(), 2);
        let bad = aggregate_word_metrics(&[(fix(1.0, 10.0), "zz".into())]);
        assert_eq!(
            sentence_metrics(&bad, &layout(0.0, 0.0)),
            Err(GazeError::UnknownWord("zz".into()))
        );
    }

    #[test]
    fn ties_go_to_earlier_entry() {
        let s = vec![
            SentenceMetrics {
                sentence_id: "s1".into(),
                total_fixation_ms: 500.0,
                words_fixated: 2,
                first_entry_t: 3.0,
            },
            SentenceMetrics {
                sentence_id: "s2".into(),
                total_fixation_ms: 500.0,
                words_fixated: 2,
                first_entry_t: 1.0,
            },
        ];
        assert_eq!(select_longest_fixated(&s, 2), vec!["s2", "s1"]);
    }

    #[test]
    fn layout_json_field_names() {
        let js = r#"{"t": 1.5, "words": [{"word_id": "w1", "sentence_id": "s1", "text": "Hi",
            "bbox": {"l": 1, "t": 2, "w": 3, "h": 4}, "expectedness": 0.25}],
            "viewport": {"sx": 0, "sy": 10, "w": 800, "h": 600}}"#;
        let s: LayoutSnapshot = serde_json::from_str(js).unwrap();
        assert_eq!(s.words[0].bbox.height, 4.0);
        assert_eq!(s.words[0].expectedness, Some(0.25));
        assert_eq!(s.viewport.scroll_y, 10.0);
        let back = serde_json::to_value(&s).unwrap();
        assert_eq!(back["words"][0]["bbox"]["l"], 1.0);
    }
}
