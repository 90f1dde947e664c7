//! End-to-end analysis of a recorded session: alignment, fixations, word
//! mapping, EEG features, feature tables, and the statistics report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eeg::{self, EegError, EegRecording, Onset};
use crate::gaze::{self, GazeError, IvtParams, LayoutSnapshot};
use crate::stats::{
    self, ClassifierParams, ClassifierResult, ComparisonResult, Congruence, Correlation,
    FeatureTable, LabelRule, Rating, StatsError, TestStatistic, WordFeatures,
};
use crate::stream::{synchronize, ClockModel, StreamError, StreamInfo, StreamKind, TimedSamples};
use crate::xdf::SessionRecording;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("session has no {0} stream")]
    MissingStream(&'static str),
    #[error("no ratings: the session has no rating stream and none were supplied")]
    NoRatings,
    #[error("rating sample {index} is malformed: {reason}")]
    BadRating { index: usize, reason: String },
    #[error("stream {stream}: {source}")]
    Stream { stream: String, source: StreamError },
    #[error(transparent)]
    Gaze(#[from] GazeError),
    #[error(transparent)]
    Eeg(#[from] EegError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GazeConfig {
    pub ivt: IvtParams,
    /// Fixations outside every word box but within this distance map to the nearest word.
    pub aoi_slack_px: f64,
}

impl Default for GazeConfig {
    fn default() -> Self {
        Self {
            ivt: IvtParams::default(),
            aoi_slack_px: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EegConfig {
    pub filter_band_hz: (f64, f64),
    pub epoch_pre_ms: f64,
    pub epoch_post_ms: f64,
    pub baseline_ms: (f64, f64),
    pub artifact_threshold_uv: f64,
    pub theta_band_hz: (f64, f64),
    pub theta_window_ms: (f64, f64),
    pub parietal_channels: Vec<String>,
    pub n400_window_ms: (f64, f64),
    pub n400_channels: Vec<String>,
}

impl Default for EegConfig {
    fn default() -> Self {
        Self {
            filter_band_hz: (0.1, 40.0),
            epoch_pre_ms: 200.0,
            epoch_post_ms: 800.0,
            baseline_ms: (-200.0, 0.0),
            artifact_threshold_uv: 150.0,
            theta_band_hz: (5.0, 8.0),
            theta_window_ms: (0.0, 800.0),
            parietal_channels: ["P3", "Pz", "P4"].map(String::from).to_vec(),
            n400_window_ms: (300.0, 500.0),
            n400_channels: ["Cz", "P3", "Pz", "P4"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub label_rule: LabelRule,
    pub n_permutations: usize,
    pub test_statistic: TestStatistic,
    pub seed: u64,
    pub compared_features: Vec<String>,
    pub eeg_features: Vec<String>,
    pub gaze_features: Vec<String>,
    pub classifier_features: Vec<String>,
    pub k_folds: usize,
    pub classifier: ClassifierParams,
}

impl Default for StatsConfig {
    fn default() -> Self {
        let compared: Vec<String> = ["total_fixation_ms", "theta_parietal_uv2", "n400_uv"]
            .map(String::from)
            .to_vec();
        Self {
            label_rule: LabelRule::default(),
            n_permutations: 10_000,
            test_statistic: TestStatistic::Welch,
            seed: 0,
            compared_features: compared.clone(),
            eeg_features: ["theta_parietal_uv2", "n400_uv"].map(String::from).to_vec(),
            gaze_features: ["total_fixation_ms", "fixation_count"]
                .map(String::from)
                .to_vec(),
            classifier_features: compared,
            k_folds: 5,
            classifier: ClassifierParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub gaze: GazeConfig,
    pub eeg: EegConfig,
    pub stats: StatsConfig,
    /// Number of longest-fixated sentences listed in the report.
    pub k_sentences: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            gaze: GazeConfig::default(),
            eeg: EegConfig::default(),
            stats: StatsConfig::default(),
            k_sentences: 5,
        }
    }
}

impl AnalysisConfig {
    /// Returns `(field, reason)` for the first invalid setting.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let bad = |f: &str, r: &str| Err((f.to_string(), r.to_string()));
        let e = &self.eeg;
        if !(e.filter_band_hz.0 >= 0.0 && e.filter_band_hz.0 < e.filter_band_hz.1) {
            return bad("eeg.filter_band_hz", "need 0 <= low < high");
        }
        if !(e.theta_band_hz.0 >= 0.0 && e.theta_band_hz.0 < e.theta_band_hz.1) {
            return bad("eeg.theta_band_hz", "need 0 <= low < high");
        }
        if !(e.epoch_pre_ms >= 0.0 && e.epoch_post_ms > 0.0) {
            return bad(
                "eeg.epoch_pre_ms",
                "epoch bounds must be non-negative with a positive post-onset span",
            );
        }
        if !(e.baseline_ms.0 >= -e.epoch_pre_ms
            && e.baseline_ms.1 <= e.epoch_post_ms
            && e.baseline_ms.0 < e.baseline_ms.1)
        {
            return bad(
                "eeg.baseline_ms",
                "must be a non-empty interval inside the epoch",
            );
        }
        if !(e.theta_window_ms.0 >= 0.0
            && e.theta_window_ms.1 <= e.epoch_post_ms
            && e.theta_window_ms.0 < e.theta_window_ms.1)
        {
            return bad(
                "eeg.theta_window_ms",
                "must lie inside the post-onset part of the epoch",
            );
        }
        if !(e.n400_window_ms.0 >= -e.epoch_pre_ms
            && e.n400_window_ms.1 <= e.epoch_post_ms
            && e.n400_window_ms.0 < e.n400_window_ms.1)
        {
            return bad("eeg.n400_window_ms", "must lie inside the epoch");
        }
        if !(e.artifact_threshold_uv > 0.0) {
            return bad("eeg.artifact_threshold_uv", "must be positive");
        }
        if e.parietal_channels.is_empty() || e.n400_channels.is_empty() {
            return bad("eeg.parietal_channels", "channel sets must not be empty");
        }
        let g = &self.gaze;
        if !(g.ivt.velocity_threshold_px_s > 0.0
            && g.ivt.min_duration_ms > 0.0
            && g.ivt.max_gap_ms >= 0.0)
        {
            return bad("gaze.ivt", "thresholds must be positive");
        }
        if !(g.aoi_slack_px >= 0.0) {
            return bad("gaze.aoi_slack_px", "must be non-negative");
        }
        let s = &self.stats;
        if s.n_permutations < 100 {
            return bad("stats.n_permutations", "must be at least 100");
        }
        if s.k_folds < 2 {
            return bad("stats.k_folds", "must be at least 2");
        }
        if s.label_rule.incongruent_max >= s.label_rule.congruent_min {
            return bad(
                "stats.label_rule",
                "incongruent_max must be below congruent_min",
            );
        }
        if !(s.classifier.lambda >= 0.0
            && s.classifier.tolerance > 0.0
            && s.classifier.max_iterations > 0)
        {
            return bad(
                "stats.classifier",
                "lambda >= 0, tolerance > 0 and max_iterations > 0 required",
            );
        }
        for f in s
            .compared_features
            .iter()
            .chain(&s.eeg_features)
            .chain(&s.gaze_features)
            .chain(&s.classifier_features)
        {
            if !stats::FEATURE_NAMES.contains(&f.as_str()) {
                return Err(("stats".into(), format!("unknown feature {f:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamAlignment {
    pub stream_id: String,
    pub kind: StreamKind,
    pub sample_count: usize,
    pub probe_count: usize,
    pub intercept_s: f64,
    pub drift_ppm: f64,
    pub fit_residual_rms_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErpSummary {
    pub n_congruent: usize,
    pub n_incongruent: usize,
    #[serde(with = "stats::nullable_f64")]
    pub n400_congruent_uv: f64,
    #[serde(with = "stats::nullable_f64")]
    pub n400_incongruent_uv: f64,
    /// incongruent − congruent
    #[serde(with = "stats::nullable_f64")]
    pub n400_difference_uv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub fixations: usize,
    pub mapped_fixations: usize,
    pub words_fixated: usize,
    pub sentences_rated: usize,
    pub congruent: usize,
    pub incongruent: usize,
    pub excluded: usize,
    pub epochs: usize,
    pub epochs_out_of_bounds: usize,
    pub epochs_rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub ratings_source: String,
    pub streams: Vec<StreamAlignment>,
    pub counts: Counts,
    pub comparisons: Vec<ComparisonResult>,
    pub correlations: Vec<Correlation>,
    pub classifier: Option<ClassifierResult>,
    pub erp: Option<ErpSummary>,
    pub longest_fixated_sentences: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordRow {
    pub word_id: String,
    pub sentence_id: String,
    pub condition: Option<Congruence>,
    pub first_fixation_start_t: f64,
    pub features: WordFeatures,
    pub rejected: bool,
}

#[derive(Debug, Clone)]
pub struct AnalysisOutput {
    pub words: Vec<WordRow>,
    pub sentence_table: FeatureTable,
    pub word_table: FeatureTable,
    pub fixations: Vec<gaze::Fixation>,
    pub epochs: Vec<eeg::Epoch>,
    pub rejections: Vec<eeg::Rejection>,
    pub exclusions: Vec<eeg::Exclusion>,
    pub report: AnalysisReport,
}

pub struct AlignedStream {
    pub info: StreamInfo,
    pub samples: TimedSamples,
    pub model: ClockModel,
}

pub fn align_stream(
    session: &SessionRecording,
    kind: StreamKind,
    name: &'static str,
) -> Result<AlignedStream, PipelineError> {
    let rs = session
        .stream_of_kind(kind)
        .ok_or(PipelineError::MissingStream(name))?;
    let (samples, model) =
        synchronize(&rs.info, &rs.samples, &rs.clock_offsets).map_err(|source| {
            PipelineError::Stream {
                stream: rs.info.stream_id.clone(),
                source,
            }
        })?;
    Ok(AlignedStream {
        info: rs.info.clone(),
        samples,
        model,
    })
}

/// Reads `(sentence_id, agreement)` rows from a rating stream.
pub fn ratings_from_stream(samples: &TimedSamples) -> Result<Vec<Rating>, PipelineError> {
    (0..samples.len())
        .map(|i| {
            let bad = |reason: String| PipelineError::BadRating { index: i, reason };
            let row = samples
                .text_row(i)
                .ok_or_else(|| bad("rating stream is not a string stream".into()))?;
            if row.len() < 2 {
                return Err(bad(format!(
                    "{} channels, need sentence_id and agreement",
                    row.len()
                )));
            }
            let v: f64 = row[1]
                .trim()
                .parse()
                .map_err(|_| bad(format!("agreement {:?} is not a number", row[1])))?;
            if !(1.0..=5.0).contains(&v) || v.fract() != 0.0 {
                return Err(bad(format!("agreement {v} is not an integer in 1..=5")));
            }
            Ok(Rating {
                sentence_id: row[0].clone(),
                agreement: v as u8,
            })
        })
        .collect()
}

fn as_refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn model_summary(a: &AlignedStream, probes: usize) -> StreamAlignment {
    StreamAlignment {
        stream_id: a.info.stream_id.clone(),
        kind: a.info.kind,
        sample_count: a.samples.len(),
        probe_count: probes,
        intercept_s: a.model.intercept,
        drift_ppm: a.model.slope * 1e6,
        fit_residual_rms_s: a.model.fit_residual_rms,
    }
}

/// Runs the whole pipeline. `fallback_ratings` are used only when the session
/// carries no rating stream (e.g. ratings from a simulator truth sidecar).
pub fn analyze_session(
    session: &SessionRecording,
    fallback_ratings: Option<(&str, Vec<Rating>)>,
    cfg: &AnalysisConfig,
) -> Result<AnalysisOutput, PipelineError> {
    let gaze_s = align_stream(session, StreamKind::Gaze, "Gaze")?;
    let eeg_s = align_stream(session, StreamKind::Eeg, "EEG")?;
    let layout_s = align_stream(session, StreamKind::Layout, "Layout")?;
    let rating_s = session
        .stream_of_kind(StreamKind::Rating)
        .map(|_| align_stream(session, StreamKind::Rating, "Rating"));
    let mut warnings = Vec::new();

    let (ratings_source, ratings) = match rating_s {
        Some(r) => {
            let r = r?;
            (
                "rating stream".to_string(),
                ratings_from_stream(&r.samples)?,
            )
        }
        None => match fallback_ratings {
            Some((src, r)) => (src.to_string(), r),
            None => return Err(PipelineError::NoRatings),
        },
    };

    // gaze → words
    let layouts = gaze::parse_layout_stream(&layout_s.samples)?;
    let samples = gaze::gaze_samples(&gaze_s.samples)?;
    let fixations = if samples.is_empty() {
        Vec::new()
    } else {
        gaze::detect_fixations_ivt(&samples, &cfg.gaze.ivt)?
    };
    let mut hits = Vec::new();
    for f in &fixations {
        match gaze::map_fixation_to_word(f, &layouts, cfg.gaze.aoi_slack_px) {
            Ok(Some(w)) => hits.push((*f, w)),
            Ok(None) => {}
            Err(GazeError::NoLayoutAvailable(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    let word_metrics = gaze::aggregate_word_metrics(&hits);

    let mut word_info: BTreeMap<&str, (&str, Option<f64>)> = BTreeMap::new();
    let mut sentences: BTreeSet<String> = BTreeSet::new();
    for snap in &layouts {
        for w in &snap.words {
            word_info.insert(&w.word_id, (&w.sentence_id, w.expectedness));
            sentences.insert(w.sentence_id.clone());
        }
    }
    let known: Vec<String> = sentences.into_iter().collect();
    let labels: BTreeMap<String, Congruence> = {
        let known_set: BTreeSet<&str> = known.iter().map(String::as_str).collect();
        let mut m = BTreeMap::new();
        for r in &ratings {
            if !known_set.contains(r.sentence_id.as_str()) {
                return Err(StatsError::UnknownSentenceId(r.sentence_id.clone()).into());
            }
            m.insert(
                r.sentence_id.clone(),
                cfg.stats.label_rule.label(r.agreement),
            );
        }
        m
    };

    // EEG features per first-fixation onset
    let rec = EegRecording::from_stream(&eeg_s.info, &eeg_s.samples)?;
    let (lo, hi) = cfg.eeg.filter_band_hz;
    let filtered = eeg::bandpass_filter(&rec, lo, hi.min(rec.rate_hz / 2.0 * 0.99))?;
    let onsets: Vec<Onset> = word_metrics
        .iter()
        .map(|w| {
            let sid = word_info.get(w.word_id.as_str()).map(|(s, _)| *s);
            Onset {
                t: w.first_fixation_start_t,
                word_id: Some(w.word_id.clone()),
                condition: sid
                    .and_then(|s| labels.get(s))
                    .map(|c| c.as_str().to_string()),
            }
        })
        .collect();
    let (epochs, exclusions) = eeg::epoch_around_onsets(
        &filtered,
        &onsets,
        cfg.eeg.epoch_pre_ms,
        cfg.eeg.epoch_post_ms,
        cfg.eeg.baseline_ms,
    )?;
    let n_epochs = epochs.len();
    let (kept, rejections) = eeg::reject_artifacts(epochs, cfg.eeg.artifact_threshold_uv);
    let mut eeg_features: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for ep in &kept {
        let theta = eeg::theta_band_power(
            ep,
            cfg.eeg.theta_band_hz,
            cfg.eeg.theta_window_ms,
            &cfg.eeg.parietal_channels,
        )?;
        let n400 = eeg::n400_amplitude(ep, cfg.eeg.n400_window_ms, &cfg.eeg.n400_channels)?;
        if let Some(id) = &ep.word_id {
            eeg_features.insert(id.clone(), (theta.parietal_mean, n400));
        }
    }
    let rejected: BTreeSet<&str> = rejections
        .iter()
        .filter_map(|r| r.word_id.as_deref())
        .collect();

    let mut words = Vec::with_capacity(word_metrics.len());
    for w in &word_metrics {
        let Some(&(sid, expectedness)) = word_info.get(w.word_id.as_str()) else {
            warnings.push(format!(
                "word {} is missing from every layout snapshot",
                w.word_id
            ));
            continue;
        };
        let feats = eeg_features.get(&w.word_id);
        words.push(WordRow {
            word_id: w.word_id.clone(),
            sentence_id: sid.to_string(),
            condition: labels.get(sid).copied(),
            first_fixation_start_t: w.first_fixation_start_t,
            rejected: rejected.contains(w.word_id.as_str()),
            features: WordFeatures {
                word_id: w.word_id.clone(),
                sentence_id: sid.to_string(),
                total_fixation_ms: w.total_fixation_ms,
                fixation_count: w.fixation_count,
                theta_parietal_uv2: feats.map(|f| f.0),
                n400_uv: feats.map(|f| f.1),
                expectedness,
            },
        });
    }
    let word_features: Vec<WordFeatures> = words.iter().map(|w| w.features.clone()).collect();
    let sentence_table =
        stats::build_feature_table(&word_features, &known, &ratings, &cfg.stats.label_rule)?;
    let word_table =
        stats::build_word_table(&word_features, &known, &ratings, &cfg.stats.label_rule)?;

    // statistics; one failing analysis does not sink the others
    let st = &cfg.stats;
    let mut comparisons = Vec::new();
    for (i, f) in st.compared_features.iter().enumerate() {
        match stats::paired_comparison(
            &sentence_table,
            f,
            st.n_permutations,
            st.seed.wrapping_add(i as u64),
            st.test_statistic,
        ) {
            Ok(c) => comparisons.push(c),
            Err(e) => warnings.push(format!("comparison {f}: {e}")),
        }
    }
    stats::apply_bonferroni(&mut comparisons);
    let correlations = match stats::correlate_modalities(
        &sentence_table,
        &as_refs(&st.eeg_features),
        &as_refs(&st.gaze_features),
    ) {
        Ok(c) => c,
        Err(e) => {
            warnings.push(format!("correlations: {e}"));
            Vec::new()
        }
    };
    let classifier = match stats::train_eval_classifier(
        &sentence_table,
        &as_refs(&st.classifier_features),
        st.k_folds,
        st.seed,
        &st.classifier,
    ) {
        Ok(c) => Some(c),
        Err(e) => {
            warnings.push(format!("classifier: {e}"));
            None
        }
    };
    let erp = match eeg::compute_erp(
        &kept,
        ("incongruent", "congruent"),
        cfg.eeg.n400_window_ms,
        &cfg.eeg.n400_channels,
    ) {
        Ok(a) => {
            let amp = |name: &str| {
                a.conditions
                    .iter()
                    .find(|c| c.condition == name)
                    .map(|c| (c.n_epochs, c.n400_amplitude_uv))
            };
            let (nc, ac) = amp("congruent").unwrap_or((0, f64::NAN));
            let (ni, ai) = amp("incongruent").unwrap_or((0, f64::NAN));
            Some(ErpSummary {
                n_congruent: nc,
                n_incongruent: ni,
                n400_congruent_uv: ac,
                n400_incongruent_uv: ai,
                n400_difference_uv: a.difference.n400_amplitude_uv,
            })
        }
        Err(e) => {
            warnings.push(format!("ERP: {e}"));
            None
        }
    };
    let longest = match layouts.last() {
        Some(last) => gaze::select_longest_fixated(
            &gaze::sentence_metrics(&word_metrics, &merged_layout(&layouts, last))?,
            cfg.k_sentences,
        ),
        None => Vec::new(),
    };

    let mut streams = Vec::new();
    for rs in &session.streams {
        match synchronize(&rs.info, &rs.samples, &rs.clock_offsets) {
            Ok((samples, model)) => {
                let a = AlignedStream {
                    info: rs.info.clone(),
                    samples,
                    model,
                };
                streams.push(model_summary(&a, rs.clock_offsets.len()));
            }
            Err(e) => warnings.push(format!("stream {}: {e}", rs.info.stream_id)),
        }
    }
    let counts = Counts {
        fixations: fixations.len(),
        mapped_fixations: hits.len(),
        words_fixated: words.len(),
        sentences_rated: sentence_table.rows.len(),
        congruent: sentence_table.count(Congruence::Congruent),
        incongruent: sentence_table.count(Congruence::Incongruent),
        excluded: sentence_table.count(Congruence::Excluded),
        epochs: n_epochs,
        epochs_out_of_bounds: exclusions.len(),
        epochs_rejected: rejections.len(),
    };
    let report = AnalysisReport {
        ratings_source,
        streams,
        counts,
        comparisons,
        correlations,
        classifier,
        erp,
        longest_fixated_sentences: longest,
        warnings,
    };
    Ok(AnalysisOutput {
        words,
        sentence_table,
        word_table,
        fixations,
        epochs: kept,
        rejections,
        exclusions,
        report,
    })
}

/// Last snapshot extended with words that only appeared in earlier ones.
fn merged_layout(all: &[LayoutSnapshot], last: &LayoutSnapshot) -> LayoutSnapshot {
    let mut merged = last.clone();
    let present: BTreeSet<String> = merged.words.iter().map(|w| w.word_id.clone()).collect();
    let mut extra = BTreeMap::new();
    for snap in all {
        for w in &snap.words {
            if !present.contains(&w.word_id) {
                extra.insert(w.word_id.clone(), w.clone());
            }
        }
    }
    merged.words.extend(extra.into_values());
    merged
}

/// Word-level feature CSV.
pub fn words_csv(words: &[WordRow]) -> String {
    let mut out = String::from(
        "word_id,sentence_id,condition,theta_parietal_uv2,n400_uv,total_fixation_ms,expectedness\n",
    );
    let opt = |v: Option<f64>| {
        v.filter(|x| x.is_finite())
            .map(|x| x.to_string())
            .unwrap_or_default()
    };
    for w in words {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            stats::csv_field(&w.word_id),
            stats::csv_field(&w.sentence_id),
            w.condition.map_or("", |c| c.as_str()),
            opt(w.features.theta_parietal_uv2),
            opt(w.features.n400_uv),
            w.features.total_fixation_ms,
            opt(w.features.expectedness),
        );
    }
    out
}

fn num(v: f64) -> String {
    if v.is_nan() {
        "n/a".into()
    } else if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-3) {
        format!("{v:.3e}")
    } else {
        format!("{v:.3}")
    }
}

/// Human-readable report.
pub fn report_markdown(r: &AnalysisReport) -> String {
    let mut s = String::from("# Session analysis\n\n");
    let c = &r.counts;
    let _ = writeln!(
        s,
        "Ratings from {}: {} sentences ({} congruent, {} incongruent, {} excluded).\n",
        r.ratings_source, c.sentences_rated, c.congruent, c.incongruent, c.excluded
    );
    let _ = writeln!(
        s,
        "Fixations: {} detected, {} mapped to words, {} words fixated. Epochs: {} cut, {} out of bounds, {} rejected as artifacts.\n",
        c.fixations, c.mapped_fixations, c.words_fixated, c.epochs, c.epochs_out_of_bounds, c.epochs_rejected
    );
    s.push_str("## Clock alignment\n\n| stream | kind | samples | probes | correction (s) | drift correction (ppm) | residual rms (s) |\n|---|---|---|---|---|---|---|\n");
    for a in &r.streams {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} |",
            a.stream_id,
            a.kind.as_str(),
            a.sample_count,
            a.probe_count,
            num(a.intercept_s),
            num(a.drift_ppm),
            num(a.fit_residual_rms_s)
        );
    }
    s.push_str("\n## Congruent vs incongruent\n\n| feature | n (c/i) | mean congruent | mean incongruent | t | p (perm) | p (Bonferroni) | Cohen's d | BF10 |\n|---|---|---|---|---|---|---|---|---|\n");
    for k in &r.comparisons {
        let _ = writeln!(
            s,
            "| {} | {}/{} | {} | {} | {} | {} | {} | {} | {} |",
            k.feature_name,
            k.n_congruent,
            k.n_incongruent,
            num(k.mean_congruent),
            num(k.mean_incongruent),
            num(k.t_statistic),
            num(k.p_permutation),
            num(k.p_bonferroni),
            num(k.cohens_d),
            num(k.bayes_factor_10)
        );
    }
    if !r.correlations.is_empty() {
        s.push_str("\n## EEG vs gaze correlations\n\n| EEG feature | gaze feature | n | Pearson r | Spearman rho |\n|---|---|---|---|---|\n");
        for k in &r.correlations {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} |",
                k.eeg_feature,
                k.gaze_feature,
                k.n,
                num(k.pearson_r),
                num(k.spearman_rho)
            );
        }
    }
    if let Some(k) = &r.classifier {
        let _ = writeln!(
            s,
            "\n## Congruence classifier\n\n{}-fold cross-validation on {} sentences: accuracy {}, AUC {}.\n",
            k.k_folds,
            k.n_rows,
            num(k.cv_accuracy),
            num(k.cv_auc)
        );
        s.push_str("| term | coefficient |\n|---|---|\n");
        let _ = writeln!(s, "| intercept | {} |", num(k.model.intercept));
        for (n, w) in k.model.feature_names.iter().zip(&k.model.coefficients) {
            let _ = writeln!(s, "| {n} | {} |", num(*w));
        }
    }
    if let Some(e) = &r.erp {
        let _ = writeln!(
            s,
            "\n## N400\n\nMean amplitude: congruent {} µV ({} epochs), incongruent {} µV ({} epochs), difference {} µV.",
            num(e.n400_congruent_uv),
            e.n_congruent,
            num(e.n400_incongruent_uv),
            e.n_incongruent,
            num(e.n400_difference_uv)
        );
    }
    if !r.longest_fixated_sentences.is_empty() {
        let _ = writeln!(
            s,
            "\n## Longest-fixated sentences\n\n{}",
            r.longest_fixated_sentences.join(", ")
        );
    }
    if !r.warnings.is_empty() {
        s.push_str("\n## Warnings\n\n");
        for w in &r.warnings {
            let _ = writeln!(s, "- {w}");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate_session, SimConfig};

    #[test]
    fn config_json_round_trip_and_unknown_keys() {
        let cfg = AnalysisConfig::default();
        let v = serde_json::to_value(&cfg).unwrap();
        assert_eq!(serde_json::from_value::<AnalysisConfig>(v).unwrap(), cfg);
        assert!(serde_json::from_str::<AnalysisConfig>(r#"{"eeg":{"filter_bnd":[1,2]}}"#).is_err());
        cfg.validate().unwrap();
    }

    #[test]
    fn labels_follow_truth_on_a_simulated_session() {
        let sim = SimConfig {
            duration_s: 30.0,
            n_sentences: 8,
            words_per_sentence: 6,
            ..Default::default()
        };
        let (rec, gt) = simulate_session(&sim).unwrap();
        let cfg = AnalysisConfig {
            stats: StatsConfig {
                n_permutations: 200,
                k_folds: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = analyze_session(&rec, None, &cfg).unwrap();
        assert!(!out.sentence_table.rows.is_empty());
        for row in &out.sentence_table.rows {
            assert_eq!(Some(row.congruence), gt.congruence_of(&row.unit_id));
        }
        assert_eq!(out.report.comparisons.len(), 3);
        // undefined statistics travel as null and come back as NaN
        let json = serde_json::to_string(&out.report).unwrap();
        let back: AnalysisReport = serde_json::from_str(&json).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
        assert!(report_markdown(&out.report).contains("theta_parietal_uv2"));
        assert!(words_csv(&out.words).starts_with("word_id,sentence_id,condition,theta_parietal_uv2,n400_uv,total_fixation_ms,expectedness\n"));
    }

    #[test]
    fn missing_eeg_is_named() {
        let sim = SimConfig {
            duration_s: 10.0,
            n_sentences: 2,
            words_per_sentence: 3,
            ..Default::default()
        };
        let (mut rec, _) = simulate_session(&sim).unwrap();
        rec.streams.retain(|s| s.info.kind != StreamKind::Eeg);
        let err = analyze_session(&rec, None, &AnalysisConfig::default()).unwrap_err();
        assert!(matches!(err, PipelineError::MissingStream("EEG")));
    }
}
