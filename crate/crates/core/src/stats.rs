//! Feature tables and the statistical program: permutation-tested group
//! comparisons with effect sizes and BIC Bayes factors, cross-modal
//! correlations, and a cross-validated logistic congruence classifier.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("rating refers to unknown sentence {0:?}")]
    UnknownSentenceId(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("only one class present")]
    SingleClass,
    #[error("classifier did not converge within {0} iterations")]
    NonConvergence(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("duplicate unit id {0:?}")]
    DuplicateUnit(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Congruence {
    Congruent,
    Incongruent,
    Excluded,
}

impl Congruence {
    pub fn as_str(self) -> &'static str {
        match self {
            Congruence::Congruent => "congruent",
            Congruence::Incongruent => "incongruent",
            Congruence::Excluded => "excluded",
        }
    }
}

/// Maps an agreement rating to a congruence label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelRule {
    pub congruent_min: u8,
    pub incongruent_max: u8,
}

impl Default for LabelRule {
    fn default() -> Self {
        Self {
            congruent_min: 4,
            incongruent_max: 2,
        }
    }
}

impl LabelRule {
    pub fn label(&self, agreement: u8) -> Congruence {
        if agreement >= self.congruent_min {
            Congruence::Congruent
        } else if agreement <= self.incongruent_max {
            Congruence::Incongruent
        } else {
            Congruence::Excluded
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub sentence_id: String,
    pub agreement: u8,
}

/// Per-word inputs joined from the gaze and EEG pipelines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordFeatures {
    pub word_id: String,
    pub sentence_id: String,
    pub total_fixation_ms: f64,
    pub fixation_count: usize,
    pub theta_parietal_uv2: Option<f64>,
    pub n400_uv: Option<f64>,
    pub expectedness: Option<f64>,
}

pub const FEATURE_NAMES: [&str; 5] = [
    "total_fixation_ms",
    "theta_parietal_uv2",
    "n400_uv",
    "expectedness",
    "fixation_count",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub unit_id: String,
    pub congruence: Congruence,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub feature_names: Vec<String>,
    pub rows: Vec<FeatureRow>,
}

impl FeatureTable {
    pub fn new(feature_names: Vec<String>) -> Self {
        Self {
            feature_names,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: FeatureRow) -> Result<(), StatsError> {
        if row.features.len() != self.feature_names.len() {
            return Err(StatsError::InvalidParameter(format!(
                "row {} has {} features, table has {}",
                row.unit_id,
                row.features.len(),
                self.feature_names.len()
            )));
        }
        if self.rows.iter().any(|r| r.unit_id == row.unit_id) {
            return Err(StatsError::DuplicateUnit(row.unit_id));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn feature_index(&self, name: &str) -> Result<usize, StatsError> {
        self.feature_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| StatsError::UnknownFeature(name.into()))
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>, StatsError> {
        let i = self.feature_index(name)?;
        Ok(self.rows.iter().map(|r| r.features[i]).collect())
    }

    pub fn count(&self, label: Congruence) -> usize {
        self.rows.iter().filter(|r| r.congruence == label).count()
    }

    /// CSV with header `unit_id,congruence,<features>`; missing values are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("unit_id,congruence");
        for n in &self.feature_names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&csv_field(&r.unit_id));
            out.push(',');
            out.push_str(r.congruence.as_str());
            for v in &r.features {
                out.push(',');
                if v.is_finite() {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.filter(|v| v.is_finite()) {
        s += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn latest_ratings(
    ratings: &[Rating],
    known: &BTreeSet<&str>,
    rule: &LabelRule,
) -> Result<BTreeMap<String, Congruence>, StatsError> {
    let mut labels = BTreeMap::new();
    for r in ratings {
        if !known.contains(r.sentence_id.as_str()) {
            return Err(StatsError::UnknownSentenceId(r.sentence_id.clone()));
        }
        labels.insert(r.sentence_id.clone(), rule.label(r.agreement));
    }
    Ok(labels)
}

/// Sentence-level table: one row per rated sentence. Fixation time and
/// count are summed over words; EEG features and expectedness are averaged
/// over the words that have them. A later rating of the same sentence
/// replaces an earlier one.
pub fn build_feature_table(
    words: &[WordFeatures],
    known_sentences: &[String],
    ratings: &[Rating],
    rule: &LabelRule,
) -> Result<FeatureTable, StatsError> {
    let known: BTreeSet<&str> = known_sentences.iter().map(String::as_str).collect();
    let labels = latest_ratings(ratings, &known, rule)?;
    let mut table = FeatureTable::new(FEATURE_NAMES.iter().map(|s| s.to_string()).collect());
    let mut seen = BTreeSet::new();
    for r in ratings {
        if !seen.insert(r.sentence_id.as_str()) {
            continue;
        }
        let members: Vec<&WordFeatures> = words
            .iter()
            .filter(|w| w.sentence_id == r.sentence_id)
            .collect();
        let features = vec![
            members.iter().map(|w| w.total_fixation_ms).sum(),
            mean_of(members.iter().filter_map(|w| w.theta_parietal_uv2)),
            mean_of(members.iter().filter_map(|w| w.n400_uv)),
            mean_of(members.iter().filter_map(|w| w.expectedness)),
            members.iter().map(|w| w.fixation_count as f64).sum(),
        ];
        table.push(FeatureRow {
            unit_id: r.sentence_id.clone(),
            congruence: labels[&r.sentence_id],
            features,
        })?;
    }
    Ok(table)
}

/// Word-level table; each word inherits its sentence's label. Words of
/// unrated sentences are left out.
pub fn build_word_table(
    words: &[WordFeatures],
    known_sentences: &[String],
    ratings: &[Rating],
    rule: &LabelRule,
) -> Result<FeatureTable, StatsError> {
    let known: BTreeSet<&str> = known_sentences.iter().map(String::as_str).collect();
    let labels = latest_ratings(ratings, &known, rule)?;
    let mut table = FeatureTable::new(FEATURE_NAMES.iter().map(|s| s.to_string()).collect());
    for w in words {
        let Some(&congruence) = labels.get(&w.sentence_id) else {
            continue;
        };
        let features = vec![
            w.total_fixation_ms,
            w.theta_parietal_uv2.unwrap_or(f64::NAN),
            w.n400_uv.unwrap_or(f64::NAN),
            w.expectedness.unwrap_or(f64::NAN),
            w.fixation_count as f64,
        ];
        table.push(FeatureRow {
            unit_id: w.word_id.clone(),
            congruence,
            features,
        })?;
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// group comparison

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestStatistic {
    /// Welch t on the raw values.
    #[default]
    Welch,
    /// Welch t on pooled average ranks.
    Rank,
}

/// Serde adapter for statistics that may be undefined: NaN is written as
/// `null` and read back as NaN.
pub mod nullable_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub feature_name: String,
    pub n_congruent: usize,
    pub n_incongruent: usize,
    #[serde(with = "nullable_f64")]
    pub mean_congruent: f64,
    #[serde(with = "nullable_f64")]
    pub mean_incongruent: f64,
    #[serde(with = "nullable_f64")]
    pub t_statistic: f64,
    #[serde(with = "nullable_f64")]
    pub p_permutation: f64,
    #[serde(with = "nullable_f64")]
    pub p_bonferroni: f64,
    #[serde(with = "nullable_f64")]
    pub cohens_d: f64,
    #[serde(with = "nullable_f64")]
    pub bayes_factor_10: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Welch t of `a − b`. Zero when both groups are constant and equal.
pub fn welch_t(a: &[f64], b: &[f64]) -> f64 {
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let se = (va / a.len() as f64 + vb / b.len() as f64).sqrt();
    let diff = ma - mb;
    if se == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        }
    } else {
        diff / se
    }
}

/// Cohen's d of `a − b` with the pooled standard deviation.
pub fn cohens_d(a: &[f64], b: &[f64]) -> f64 {
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let s = (((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0)).sqrt();
    let diff = ma - mb;
    if s == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        }
    } else {
        diff / s
    }
}

/// BF10 from the BIC difference between the intercept-only model and the
/// model with a group indicator.
pub fn bic_bayes_factor(a: &[f64], b: &[f64]) -> f64 {
    let n = (a.len() + b.len()) as f64;
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let grand = all.iter().sum::<f64>() / n;
    let rss0: f64 = all.iter().map(|v| (v - grand).powi(2)).sum();
    let (ma, _) = mean_var(a);
    let (mb, _) = mean_var(b);
    let rss1: f64 = a.iter().map(|v| (v - ma).powi(2)).sum::<f64>()
        + b.iter().map(|v| (v - mb).powi(2)).sum::<f64>();
    let log_ratio = if rss1 == 0.0 && rss0 == 0.0 {
        0.0
    } else if rss1 == 0.0 {
        f64::INFINITY
    } else {
        (rss0 / rss1).ln()
    };
    let log_bf = ((n * log_ratio - n.ln()) / 2.0).min(700.0);
    log_bf.exp()
}

/// Average ranks (1-based) with ties sharing the mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn split(values: &[f64], is_a: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (&v, &f) in values.iter().zip(is_a) {
        if f {
            a.push(v)
        } else {
            b.push(v)
        }
    }
    (a, b)
}

/// Two-sided permutation p-value of the Welch t under label shuffles.
pub fn permutation_p(values: &[f64], is_a: &[bool], n_permutations: usize, seed: u64) -> f64 {
    let (a, b) = split(values, is_a);
    let t_obs = welch_t(&a, &b).abs();
    let threshold = t_obs * (1.0 - 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = is_a.to_vec();
    let mut hits = 0usize;
    for _ in 0..n_permutations {
        labels.shuffle(&mut rng);
        let (pa, pb) = split(values, &labels);
        if welch_t(&pa, &pb).abs() >= threshold {
            hits += 1;
        }
    }
    (1 + hits) as f64 / (1 + n_permutations) as f64
}

/// Compares congruent against incongruent rows on one feature. Rows with a
/// missing value are dropped. Signs follow `congruent − incongruent`.
pub fn paired_comparison(
    table: &FeatureTable,
    feature_name: &str,
    n_permutations: usize,
    seed: u64,
    statistic: TestStatistic,
) -> Result<ComparisonResult, StatsError> {
    if n_permutations < 100 {
        return Err(StatsError::InvalidParameter(format!(
            "n_permutations = {n_permutations} < 100"
        )));
    }
    let col = table.feature_index(feature_name)?;
    let mut values = Vec::new();
    let mut is_cong = Vec::new();
    for r in &table.rows {
        let v = r.features[col];
        if !v.is_finite() || r.congruence == Congruence::Excluded {
            continue;
        }
        values.push(v);
        is_cong.push(r.congruence == Congruence::Congruent);
    }
    let (a, b) = split(&values, &is_cong);
    if a.len() < 2 || b.len() < 2 {
        return Err(StatsError::InsufficientData(format!(
            "{feature_name}: {} congruent and {} incongruent rows, need 2 each",
            a.len(),
            b.len()
        )));
    }
    let tested = match statistic {
        TestStatistic::Welch => values.clone(),
        TestStatistic::Rank => average_ranks(&values),
    };
    let (ta, tb) = split(&tested, &is_cong);
    let p = permutation_p(&tested, &is_cong, n_permutations, seed);
    Ok(ComparisonResult {
        feature_name: feature_name.to_string(),
        n_congruent: a.len(),
        n_incongruent: b.len(),
        mean_congruent: mean_var(&a).0,
        mean_incongruent: mean_var(&b).0,
        t_statistic: welch_t(&ta, &tb),
        p_permutation: p,
        p_bonferroni: p,
        cohens_d: cohens_d(&a, &b),
        bayes_factor_10: bic_bayes_factor(&a, &b),
    })
}

/// Fills in Bonferroni-adjusted p-values across a family of comparisons.
pub fn apply_bonferroni(results: &mut [ComparisonResult]) {
    let m = results.len() as f64;
    for r in results {
        r.p_bonferroni = (r.p_permutation * m).min(1.0);
    }
}

// ---------------------------------------------------------------------------
// correlation

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub eeg_feature: String,
    pub gaze_feature: String,
    pub n: usize,
    #[serde(with = "nullable_f64")]
    pub pearson_r: f64,
    #[serde(with = "nullable_f64")]
    pub spearman_rho: f64,
}

/// Pearson and Spearman coefficients for every EEG × gaze feature pair over
/// pairwise-complete rows (all labels).
pub fn correlate_modalities(
    table: &FeatureTable,
    eeg_features: &[&str],
    gaze_features: &[&str],
) -> Result<Vec<Correlation>, StatsError> {
    let mut out = Vec::new();
    for e in eeg_features {
        let ec = table.column(e)?;
        for g in gaze_features {
            let gc = table.column(g)?;
            let (x, y): (Vec<f64>, Vec<f64>) = ec
                .iter()
                .zip(&gc)
                .filter(|(a, b)| a.is_finite() && b.is_finite())
                .map(|(a, b)| (*a, *b))
                .unzip();
            if x.len() < 3 {
                return Err(StatsError::InsufficientData(format!(
                    "{e} x {g}: {} complete rows, need 3",
                    x.len()
                )));
            }
            out.push(Correlation {
                eeg_feature: e.to_string(),
                gaze_feature: g.to_string(),
                n: x.len(),
                pearson_r: pearson(&x, &y),
                spearman_rho: spearman(&x, &y),
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// classifier

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierParams {
    /// L2 penalty on the standardized slopes (intercept unpenalized).
    pub lambda: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for ClassifierParams {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            tolerance: 1e-6,
            max_iterations: 10_000,
        }
    }
}

/// Logistic model on the original feature scale: `P(congruent) = σ(b0 + w·x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub feature_names: Vec<String>,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub iterations: usize,
}

impl LogisticModel {
    pub fn probability(&self, x: &[f64]) -> f64 {
        sigmoid(
            self.intercept
                + self
                    .coefficients
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum::<f64>(),
        )
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fits by accelerated gradient ascent on the mean penalized log-likelihood.
/// Features are standardized internally; the returned model is mapped back.
pub fn fit_logistic(
    x: &[Vec<f64>],
    y: &[bool],
    feature_names: &[String],
    params: &ClassifierParams,
) -> Result<LogisticModel, StatsError> {
    let n = x.len();
    let p = feature_names.len();
    if !y.iter().any(|&v| v) || y.iter().all(|&v| v) {
        return Err(StatsError::SingleClass);
    }
    let mut mu = vec![0.0; p];
    let mut sd = vec![0.0; p];
    for j in 0..p {
        mu[j] = x.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        sd[j] = (x.iter().map(|r| (r[j] - mu[j]).powi(2)).sum::<f64>() / n as f64).sqrt();
        if sd[j] == 0.0 {
            sd[j] = 1.0;
        }
    }
    let z: Vec<Vec<f64>> = x
        .iter()
        .map(|r| (0..p).map(|j| (r[j] - mu[j]) / sd[j]).collect())
        .collect();
    let yf: Vec<f64> = y.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();

    let gradient = |beta: &[f64]| {
        let mut g = vec![0.0; p + 1];
        for (row, &t) in z.iter().zip(&yf) {
            let eta = beta[0] + row.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>();
            let r = t - sigmoid(eta);
            g[0] += r;
            for j in 0..p {
                g[j + 1] += r * row[j];
            }
        }
        for (j, gj) in g.iter_mut().enumerate() {
            *gj /= n as f64;
            if j > 0 {
                *gj -= params.lambda * beta[j];
            }
        }
        g
    };

    // the Hessian of the mean log-likelihood is bounded by (p + 1) / 4 + λ
    let step = 1.0 / (0.25 * (p + 1) as f64 + params.lambda);
    let mut beta = vec![0.0; p + 1];
    let mut prev = beta.clone();
    let mut momentum = 1.0f64;
    let mut converged = None;
    for it in 1..=params.max_iterations {
        let next_m = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
        let w = (momentum - 1.0) / next_m;
        let look: Vec<f64> = beta
            .iter()
            .zip(&prev)
            .map(|(b, q)| b + w * (b - q))
            .collect();
        let g = gradient(&look);
        let cand: Vec<f64> = look.iter().zip(&g).map(|(b, d)| b + step * d).collect();
        // restart momentum when the update opposes the gradient
        let restart = g
            .iter()
            .zip(cand.iter().zip(&beta))
            .map(|(d, (c, b))| d * (c - b))
            .sum::<f64>()
            < 0.0;
        prev = std::mem::replace(&mut beta, cand);
        momentum = if restart { 1.0 } else { next_m };
        if gradient(&beta).iter().all(|d| d.abs() < params.tolerance) {
            converged = Some(it);
            break;
        }
    }
    let iterations = converged.ok_or(StatsError::NonConvergence(params.max_iterations))?;
    let coefficients: Vec<f64> = (0..p).map(|j| beta[j + 1] / sd[j]).collect();
    let intercept = beta[0] - (0..p).map(|j| beta[j + 1] * mu[j] / sd[j]).sum::<f64>();
    Ok(LogisticModel {
        feature_names: feature_names.to_vec(),
        intercept,
        coefficients,
        iterations,
    })
}

/// Area under the ROC curve via the Mann-Whitney statistic; ties count half.
pub fn auc(scores: &[f64], positive: &[bool]) -> f64 {
    let ranks = average_ranks(scores);
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    let rank_sum: f64 = ranks
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(r, _)| r)
        .sum();
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

/// Fold index per row: each class is shuffled and dealt round-robin.
pub fn stratified_folds(y: &[bool], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; y.len()];
    let mut dealt = 0;
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            folds[i] = dealt % k;
            dealt += 1;
        }
    }
    folds
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierResult {
    pub model: LogisticModel,
    pub k_folds: usize,
    pub n_rows: usize,
    pub cv_accuracy: f64,
    /// Mean over folds whose test split holds both classes.
    #[serde(with = "nullable_f64")]
    pub cv_auc: f64,
    pub fold_accuracy: Vec<f64>,
    pub fold_auc: Vec<Option<f64>>,
}

/// Stratified k-fold evaluation plus a final fit on all labeled rows.
/// Positive class is `congruent`; rows with any missing feature are dropped.
pub fn train_eval_classifier(
    table: &FeatureTable,
    feature_set: &[&str],
    k_folds: usize,
    seed: u64,
    params: &ClassifierParams,
) -> Result<ClassifierResult, StatsError> {
    if k_folds < 2 {
        return Err(StatsError::InvalidParameter(format!(
            "k_folds = {k_folds} < 2"
        )));
    }
    let cols: Vec<usize> = feature_set
        .iter()
        .map(|f| table.feature_index(f))
        .collect::<Result<_, _>>()?;
    let names: Vec<String> = feature_set.iter().map(|s| s.to_string()).collect();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for r in &table.rows {
        if r.congruence == Congruence::Excluded {
            continue;
        }
        let row: Vec<f64> = cols.iter().map(|&c| r.features[c]).collect();
        if row.iter().all(|v| v.is_finite()) {
            x.push(row);
            y.push(r.congruence == Congruence::Congruent);
        }
    }
    if !y.iter().any(|&v| v) || y.iter().all(|&v| v) {
        return Err(StatsError::SingleClass);
    }
    if y.len() < k_folds {
        return Err(StatsError::InsufficientData(format!(
            "{} rows for {k_folds} folds",
            y.len()
        )));
    }
    let folds = stratified_folds(&y, k_folds, seed);
    let mut fold_accuracy = Vec::with_capacity(k_folds);
    let mut fold_auc = Vec::with_capacity(k_folds);
    for f in 0..k_folds {
        let (mut xtr, mut ytr, mut xte, mut yte) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for i in 0..y.len() {
            if folds[i] == f {
                xte.push(x[i].clone());
                yte.push(y[i]);
            } else {
                xtr.push(x[i].clone());
                ytr.push(y[i]);
            }
        }
        let model = fit_logistic(&xtr, &ytr, &names, params)?;
        let scores: Vec<f64> = xte.iter().map(|r| model.probability(r)).collect();
        let correct = scores
            .iter()
            .zip(&yte)
            .filter(|(s, &t)| (**s >= 0.5) == t)
            .count();
        fold_accuracy.push(correct as f64 / yte.len() as f64);
        let both = yte.iter().any(|&v| v) && !yte.iter().all(|&v| v);
        fold_auc.push(both.then(|| auc(&scores, &yte)));
    }
    let aucs: Vec<f64> = fold_auc.iter().flatten().copied().collect();
    let cv_auc = if aucs.is_empty() {
        f64::NAN
    } else {
        aucs.iter().sum::<f64>() / aucs.len() as f64
    };
    Ok(ClassifierResult {
        model: fit_logistic(&x, &y, &names, params)?,
        k_folds,
        n_rows: y.len(),
        cv_accuracy: fold_accuracy.iter().sum::<f64>() / k_folds as f64,
        cv_auc,
        fold_accuracy,
        fold_auc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn table(a: &[f64], b: &[f64]) -> FeatureTable {
        let mut t = FeatureTable::new(vec!["f".into()]);
        for (i, v) in a.iter().enumerate() {
            t.push(FeatureRow {
                unit_id: format!("a{i}"),
                congruence: Congruence::Congruent,
                features: vec![*v],
            })
            .unwrap();
        }
        for (i, v) in b.iter().enumerate() {
            t.push(FeatureRow {
                unit_id: format!("b{i}"),
                congruence: Congruence::Incongruent,
                features: vec![*v],
            })
            .unwrap();
        }
        t
    }

    #[test]
    fn label_rule_examples() {
        let known: Vec<String> = ["s1", "s2", "s3"].iter().map(|s| s.to_string()).collect();
        let ratings: Vec<Rating> = [("s1", 5), ("s2", 1), ("s3", 3)]
            .iter()
            .map(|(s, a)| Rating {
                sentence_id: s.to_string(),
                agreement: *a,
            })
            .collect();
        let t = build_feature_table(&[], &known, &ratings, &LabelRule::default()).unwrap();
        let labels: Vec<_> = t.rows.iter().map(|r| r.congruence).collect();
        assert_eq!(
            labels,
            [
                Congruence::Congruent,
                Congruence::Incongruent,
                Congruence::Excluded
            ]
        );
        let bad = [Rating {
            sentence_id: "s9".into(),
            agreement: 4,
        }];
        assert_eq!(
            build_feature_table(&[], &known, &bad, &LabelRule::default()),
            Err(StatsError::UnknownSentenceId("s9".into()))
        );
    }

    #[test]
    fn sentence_aggregation_sums_gaze_and_averages_eeg() {
        let w = |id: &str, ms: f64, theta: Option<f64>| WordFeatures {
            word_id: id.into(),
            sentence_id: "s1".into(),
            total_fixation_ms: ms,
            fixation_count: 1,
            theta_parietal_uv2: theta,
            n400_uv: None,
            expectedness: Some(0.5),
        };
        let words = [
            w("w1", 200.0, Some(2.0)),
            w("w2", 300.0, Some(4.0)),
            w("w3", 100.0, None),
        ];
        let t = build_feature_table(
            &words,
            &["s1".into()],
            &[Rating {
                sentence_id: "s1".into(),
                agreement: 4,
            }],
            &LabelRule::default(),
        )
        .unwrap();
        assert_eq!(t.column("total_fixation_ms").unwrap(), [600.0]);
        assert_eq!(t.column("theta_parietal_uv2").unwrap(), [3.0]);
        assert!(t.column("n400_uv").unwrap()[0].is_nan());
        assert_eq!(t.column("fixation_count").unwrap(), [3.0]);
        assert!(t
            .to_csv()
            .starts_with("unit_id,congruence,total_fixation_ms"));
    }

    #[test]
    fn identical_groups_are_null() {
        let t = table(&[3.0; 10], &[3.0; 10]);
        let r = paired_comparison(&t, "f", 1000, 1, TestStatistic::Welch).unwrap();
        assert_eq!(r.cohens_d, 0.0);
        assert!(r.p_permutation >= 0.9);
        assert!(r.bayes_factor_10 < 1.0 && r.bayes_factor_10 > 0.0);
    }

    #[test]
    fn separated_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..50)
            .map(|_| Normal::new(0.0, 0.1).unwrap().sample(&mut rng))
            .collect();
        let b: Vec<f64> = (0..50)
            .map(|_| Normal::new(1.0, 0.1).unwrap().sample(&mut rng))
            .collect();
        let r = paired_comparison(&table(&b, &a), "f", 2000, 7, TestStatistic::Welch).unwrap();
        assert!(r.p_permutation < 0.001);
        assert!(r.cohens_d > 5.0);
        assert!(r.bayes_factor_10 > 1e10);
    }

    #[test]
    fn insufficient_rows() {
        let t = table(&[1.0], &[2.0, 3.0]);
        assert!(matches!(
            paired_comparison(&t, "f", 100, 0, TestStatistic::Welch),
            Err(StatsError::InsufficientData(_))
        ));
        assert!(matches!(
            paired_comparison(&t, "f", 10, 0, TestStatistic::Welch),
            Err(StatsError::InvalidParameter(_))
        ));
    }

    /// Exhaustive permutation distribution on a 3 + 3 split.
    #[test]
    fn permutation_p_matches_exhaustive_on_small_sample() {
        let values = [0.1, -0.05, 0.02, 1.1, 0.93, 1.04];
        let labels = [true, true, true, false, false, false];
        let (a, b) = split(&values, &labels);
        let t_obs = welch_t(&a, &b).abs();
        let mut extreme = 0;
        let mut total = 0;
        for mask in 0u32..64 {
            if mask.count_ones() != 3 {
                continue;
            }
            let lab: Vec<bool> = (0..6).map(|i| mask >> i & 1 == 1).collect();
            let (pa, pb) = split(&values, &lab);
            total += 1;
            if welch_t(&pa, &pb).abs() >= t_obs * (1.0 - 1e-12) {
                extreme += 1;
            }
        }
        let exact = extreme as f64 / total as f64;
        assert!((exact - 0.1).abs() < 1e-12);
        let p = permutation_p(&values, &labels, 20_000, 11);
        assert!((p - exact).abs() < 0.01, "{p} vs {exact}");
    }

    #[test]
    fn correlation_examples() {
        let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &x) - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &y) - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &y) - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..200).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..200).map(|_| rng.gen()).collect();
        assert!(pearson(&a, &b).abs() < 0.2);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 10.0, 5.0]),
            [2.5, 4.0, 2.5, 1.0]
        );
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), 1.0);
        assert_eq!(auc(&[0.5; 4], &[false, true, false, true]), 0.5);
    }

    #[test]
    fn separable_classifier() {
        let mut t = FeatureTable::new(vec!["x".into(), "noise".into()]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..100 {
            let pos = i % 2 == 0;
            let x = if pos { 2.0 } else { -2.0 } + rng.gen_range(-1.0..1.0);
            t.push(FeatureRow {
                unit_id: format!("u{i}"),
                congruence: if pos {
                    Congruence::Congruent
                } else {
                    Congruence::Incongruent
                },
                features: vec![x, rng.gen()],
            })
            .unwrap();
        }
        let r =
            train_eval_classifier(&t, &["x", "noise"], 5, 1, &ClassifierParams::default()).unwrap();
        assert!(r.cv_accuracy >= 0.95);
        assert!(r.model.coefficients[0] > 0.0);
    }

    #[test]
    fn single_class_rejected() {
        let t = table(&[1.0, 2.0, 3.0], &[]);
        assert_eq!(
            train_eval_classifier(&t, &["f"], 2, 0, &ClassifierParams::default()).unwrap_err(),
            StatsError::SingleClass
        );
    }
}
