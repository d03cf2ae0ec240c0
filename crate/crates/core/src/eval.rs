//! Classification metrics, the horizon sweep and report files.
//!
//! Malware is the positive class throughout.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{check_json_format, REPORT_FORMAT};
use crate::corpus::{ApiTrace, Label, Vocabulary};
use crate::detector::{
    batch_classify_prefix, batch_detect_horizons, config_hash, examples, BatchDetection, DetectorModel, EarlyDetectConfig,
};
use crate::error::{Error, Result};
use crate::genlm::{GenerativeLm, Strategy};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }
}

fn check_lengths(scores: usize, labels: usize) -> Result<()> {
    if scores != labels {
        return Err(Error::InvalidArgument(format!(
            "{scores} scores for {labels} labels"
        )));
    }
    Ok(())
}

/// Counts with `score >= threshold` predicted malware.
pub fn confusion(scores: &[f32], labels: &[Label], threshold: f32) -> Result<ConfusionCounts> {
    check_lengths(scores.len(), labels.len())?;
    let mut c = ConfusionCounts::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, Label::Malware) => c.tp += 1,
            (true, Label::Benign) => c.fp += 1,
            (false, Label::Benign) => c.tn += 1,
            (false, Label::Malware) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Precision, recall and F1 for one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// `num / den`, or 0 when `den` is 0.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_metrics(hit: u64, predicted: u64, support: u64) -> ClassMetrics {
    let precision = ratio(hit, predicted);
    let recall = ratio(hit, support);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassMetrics {
        precision,
        recall,
        f1,
        support,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub accuracy: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub malware: ClassMetrics,
    pub benign: ClassMetrics,
}

/// Accuracy, the four rates and per-class P/R/F1. Ratios with a zero
/// denominator are 0.
pub fn rates_and_prf(c: &ConfusionCounts) -> Result<Rates> {
    if c.total() == 0 {
        return Err(Error::EmptyInput("confusion counts"));
    }
    Ok(Rates {
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
        tpr: ratio(c.tp, c.positives()),
        tnr: ratio(c.tn, c.negatives()),
        fpr: ratio(c.fp, c.negatives()),
        fnr: ratio(c.fn_, c.positives()),
        malware: class_metrics(c.tp, c.tp + c.fp, c.positives()),
        benign: class_metrics(c.tn, c.tn + c.fn_, c.negatives()),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Macro (unweighted) and support-weighted averages over classes.
pub fn macro_weighted(per_class: &[ClassMetrics]) -> Result<(Averages, Averages)> {
    let total: u64 = per_class.iter().map(|c| c.support).sum();
    if per_class.is_empty() || total == 0 {
        return Err(Error::EmptyInput("class support"));
    }
    let n = per_class.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n;
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        per_class.iter().map(|c| f(c) * c.support as f64).sum::<f64>() / total as f64
    };
    Ok((
        Averages {
            precision: mean(|c| c.precision),
            recall: mean(|c| c.recall),
            f1: mean(|c| c.f1),
        },
        Averages {
            precision: weighted(|c| c.precision),
            recall: weighted(|c| c.recall),
            f1: weighted(|c| c.f1),
        },
    ))
}

/// Mann–Whitney AUC: P(malware score > benign score) with half credit for ties.
pub fn auc_roc(scores: &[f32], labels: &[Label]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let mut pairs: Vec<(f32, Label)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let positives = labels.iter().filter(|&&l| l == Label::Malware).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass);
    }
    // Twice the credit, so ties stay integral.
    let mut credit2: u64 = 0;
    let mut below: u64 = 0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            match pairs[j].1 {
                Label::Malware => pos += 1,
                Label::Benign => neg += 1,
            }
            j += 1;
        }
        credit2 += pos * (2 * below + neg);
        below += neg;
        i = j;
    }
    Ok(credit2 as f64 / (2 * positives * negatives) as f64)
}

/// Every metric for one set of scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f32,
    pub confusion: ConfusionCounts,
    pub accuracy: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub malware: ClassMetrics,
    pub benign: ClassMetrics,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    pub auc_roc: f64,
}

impl MetricsReport {
    pub fn from_scores(scores: &[f32], labels: &[Label], threshold: f32) -> Result<Self> {
        let confusion = confusion(scores, labels, threshold)?;
        let r = rates_and_prf(&confusion)?;
        let (macro_avg, weighted_avg) = macro_weighted(&[r.malware, r.benign])?;
        Ok(MetricsReport {
            threshold,
            confusion,
            accuracy: r.accuracy,
            tpr: r.tpr,
            tnr: r.tnr,
            fpr: r.fpr,
            fnr: r.fnr,
            malware: r.malware,
            benign: r.benign,
            macro_avg,
            weighted_avg,
            auc_roc: auc_roc(scores, labels)?,
        })
    }

    /// Scalar metrics in report column order.
    pub fn summary(&self) -> Summary {
        Summary {
            accuracy: self.accuracy,
            auc: self.auc_roc,
            tpr: self.tpr,
            tnr: self.tnr,
            fpr: self.fpr,
            fnr: self.fnr,
            precision_malware: self.malware.precision,
            recall_malware: self.malware.recall,
            f1_malware: self.malware.f1,
            precision_benign: self.benign.precision,
            recall_benign: self.benign.recall,
            f1_benign: self.benign.f1,
            macro_precision: self.macro_avg.precision,
            macro_recall: self.macro_avg.recall,
            macro_f1: self.macro_avg.f1,
            weighted_precision: self.weighted_avg.precision,
            weighted_recall: self.weighted_avg.recall,
            weighted_f1: self.weighted_avg.f1,
        }
    }
}

/// Flat scalar metrics; also the shape of the averages row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: f64,
    pub auc: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub precision_malware: f64,
    pub recall_malware: f64,
    pub f1_malware: f64,
    pub precision_benign: f64,
    pub recall_benign: f64,
    pub f1_benign: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
}

const SUMMARY_FIELDS: usize = 18;

impl Summary {
    fn values(&self) -> [f64; SUMMARY_FIELDS] {
        [
            self.accuracy,
            self.auc,
            self.tpr,
            self.tnr,
            self.fpr,
            self.fnr,
            self.precision_malware,
            self.recall_malware,
            self.f1_malware,
            self.precision_benign,
            self.recall_benign,
            self.f1_benign,
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
            self.weighted_precision,
            self.weighted_recall,
            self.weighted_f1,
        ]
    }

    fn from_values(v: [f64; SUMMARY_FIELDS]) -> Self {
        Summary {
            accuracy: v[0],
            auc: v[1],
            tpr: v[2],
            tnr: v[3],
            fpr: v[4],
            fnr: v[5],
            precision_malware: v[6],
            recall_malware: v[7],
            f1_malware: v[8],
            precision_benign: v[9],
            recall_benign: v[10],
            f1_benign: v[11],
            macro_precision: v[12],
            macro_recall: v[13],
            macro_f1: v[14],
            weighted_precision: v[15],
            weighted_recall: v[16],
            weighted_f1: v[17],
        }
    }

    /// Field-wise mean.
    pub fn mean(items: &[Summary]) -> Result<Summary> {
        if items.is_empty() {
            return Err(Error::EmptyInput("rows"));
        }
        let mut acc = [0.0f64; SUMMARY_FIELDS];
        for s in items {
            for (a, v) in acc.iter_mut().zip(s.values()) {
                *a += v;
            }
        }
        Ok(Summary::from_values(acc.map(|a| a / items.len() as f64)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub prefix_len: usize,
    pub horizon: usize,
    pub total_len: usize,
    pub metrics: MetricsReport,
}

/// What produced a report. Everything here is deterministic under fixed seeds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seeds: BTreeMap<String, u64>,
    pub config_hashes: BTreeMap<String, String>,
    pub strategy: Option<Strategy>,
    pub k: usize,
    pub temperature: f32,
    pub threshold: f32,
    pub test_traces: usize,
    pub test_malware: usize,
    pub test_benign: usize,
    /// Ids of traces that could not be scored and were left out.
    pub failed_traces: Vec<String>,
    /// Resolved run configuration, when the caller supplies one.
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub format: String,
    pub meta: RunMeta,
    pub rows: Vec<SweepRow>,
    pub average: Summary,
}

impl SweepResult {
    pub fn row(&self, horizon: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.horizon == horizon)
    }
}

fn labels_of(traces: &[ApiTrace]) -> Vec<Label> {
    traces.iter().map(|t| t.label).collect()
}

/// Metrics over the traces a batch could score; failed ids are returned.
pub fn metrics_for(out: &BatchDetection, traces: &[ApiTrace], threshold: f32) -> Result<(MetricsReport, Vec<String>)> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut failed = Vec::new();
    for (v, t) in out.verdicts.iter().zip(traces) {
        match v {
            Ok(v) => {
                scores.push(v.probability);
                labels.push(t.label);
            }
            Err(f) => failed.push(f.id.clone()),
        }
    }
    Ok((MetricsReport::from_scores(&scores, &labels, threshold)?, failed))
}

/// Seeds and config hashes of a model pair and detection settings.
pub fn run_meta(lm: Option<&GenerativeLm>, model: &DetectorModel, traces: &[ApiTrace], cfg: &EarlyDetectConfig) -> Result<RunMeta> {
    let mut meta = RunMeta {
        strategy: Some(cfg.strategy),
        k: cfg.k,
        temperature: cfg.temperature,
        threshold: cfg.threshold,
        test_traces: traces.len(),
        test_malware: labels_of(traces).iter().filter(|&&l| l == Label::Malware).count(),
        config: serde_json::Value::Null,
        ..Default::default()
    };
    meta.test_benign = meta.test_traces - meta.test_malware;
    meta.seeds.insert("generation".into(), cfg.seed);
    meta.seeds.insert("detector".into(), model.meta.seed);
    meta.seeds.insert("encoder".into(), model.encoder.config().seed);
    meta.seeds.insert("head".into(), model.head.config().seed);
    meta.config_hashes.insert("encoder".into(), model.meta.encoder_config_hash.clone());
    meta.config_hashes.insert("head".into(), model.meta.head_config_hash.clone());
    meta.config_hashes.insert("vocab".into(), model.vocab_hash().to_string());
    meta.config_hashes.insert("detect".into(), config_hash(cfg)?);
    if let Some(lm) = lm {
        meta.seeds.insert("lm".into(), lm.config().seed);
        meta.config_hashes.insert("lm".into(), config_hash(lm.config())?);
    }
    Ok(meta)
}

/// Early detection at every horizon with a shared prefix length; one row per
/// horizon in the given order plus the mean of the rows.
pub fn run_sweep(
    lm: &GenerativeLm,
    model: &DetectorModel,
    vocab: &Vocabulary,
    traces: &[ApiTrace],
    prefix_len: usize,
    horizons: &[usize],
    cfg: &EarlyDetectConfig,
) -> Result<SweepResult> {
    if horizons.is_empty() {
        return Err(Error::EmptyInput("horizons"));
    }
    let cfg = EarlyDetectConfig {
        prefix_len,
        ..cfg.clone()
    };
    let outs = batch_detect_horizons(lm, model, vocab, traces, &cfg, horizons)?;
    let mut meta = run_meta(Some(lm), model, traces, &cfg)?;
    let mut rows = Vec::with_capacity(horizons.len());
    for (&h, out) in horizons.iter().zip(&outs) {
        let (metrics, failed) = metrics_for(out, traces, cfg.threshold)?;
        meta.failed_traces = failed;
        rows.push(SweepRow {
            prefix_len,
            horizon: h,
            total_len: prefix_len + h,
            metrics,
        });
    }
    let average = Summary::mean(&rows.iter().map(|r| r.metrics.summary()).collect::<Vec<_>>())?;
    Ok(SweepResult {
        format: REPORT_FORMAT.to_string(),
        meta,
        rows,
        average,
    })
}

/// What the classifier saw in an evaluation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Whole traces, truncated to the encoder capacity.
    Full,
    /// The observed prefix only, with no generated calls.
    Prefix,
}

/// Metrics of the classifier alone, without suffix generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub format: String,
    pub mode: EvalMode,
    pub prefix_len: Option<usize>,
    pub meta: RunMeta,
    pub metrics: MetricsReport,
}

fn classifier_meta(model: &DetectorModel, traces: &[ApiTrace], threshold: f32) -> Result<RunMeta> {
    let cfg = EarlyDetectConfig {
        threshold,
        ..Default::default()
    };
    let mut meta = run_meta(None, model, traces, &cfg)?;
    meta.strategy = None;
    meta.k = 0;
    meta.temperature = 0.0;
    meta.seeds.remove("generation");
    meta.config_hashes.remove("detect");
    Ok(meta)
}

pub fn evaluate_full(model: &DetectorModel, vocab: &Vocabulary, traces: &[ApiTrace], threshold: f32) -> Result<EvaluationReport> {
    if model.vocab_hash() != vocab.hash() {
        return Err(Error::VocabMismatch {
            expected: vocab.hash(),
            found: model.vocab_hash().to_string(),
        });
    }
    let rows: Vec<Vec<u32>> = examples(traces, vocab, model.max_len()).into_iter().map(|e| e.ids).collect();
    let scores = model.score_rows(&rows)?;
    let labels = labels_of(traces);
    Ok(EvaluationReport {
        format: REPORT_FORMAT.to_string(),
        mode: EvalMode::Full,
        prefix_len: None,
        meta: classifier_meta(model, traces, threshold)?,
        metrics: MetricsReport::from_scores(&scores, &labels, threshold)?,
    })
}

pub fn evaluate_prefix(
    model: &DetectorModel,
    vocab: &Vocabulary,
    traces: &[ApiTrace],
    prefix_len: usize,
    threshold: f32,
) -> Result<EvaluationReport> {
    let out = batch_classify_prefix(model, vocab, traces, prefix_len, threshold)?;
    let (metrics, failed) = metrics_for(&out, traces, threshold)?;
    let mut meta = classifier_meta(model, traces, threshold)?;
    meta.failed_traces = failed;
    Ok(EvaluationReport {
        format: REPORT_FORMAT.to_string(),
        mode: EvalMode::Prefix,
        prefix_len: Some(prefix_len),
        meta,
        metrics,
    })
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        check_json_format(bytes, REPORT_FORMAT)?;
        Ok(serde_json::from_slice(bytes)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        })
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(Error::InvalidArgument(format!("unknown report format `{s}`"))),
        }
    }
}

/// Leading CSV line carrying the format and run metadata as JSON.
const CSV_META_PREFIX: &str = "# ";
const AVERAGE: &str = "average";
const CSV_HEADER: [&str; 3 + SUMMARY_FIELDS + 5] = [
    "prefix_len",
    "horizon",
    "total_len",
    "accuracy",
    "auc",
    "tpr",
    "tnr",
    "fpr",
    "fnr",
    "precision_malware",
    "recall_malware",
    "f1_malware",
    "precision_benign",
    "recall_benign",
    "f1_benign",
    "macro_precision",
    "macro_recall",
    "macro_f1",
    "weighted_precision",
    "weighted_recall",
    "weighted_f1",
    "tp",
    "fp",
    "tn",
    "fn",
    "threshold",
];

#[derive(Serialize, Deserialize)]
struct CsvMeta {
    format: String,
    meta: RunMeta,
}

pub fn report_to_json(result: &SweepResult) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(result)?;
    out.push(b'\n');
    Ok(out)
}

pub fn report_to_csv(result: &SweepResult) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CSV_META_PREFIX.as_bytes());
    serde_json::to_writer(
        &mut out,
        &CsvMeta {
            format: result.format.clone(),
            meta: result.meta.clone(),
        },
    )?;
    out.push(b'\n');
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in &result.rows {
        let c = &r.metrics.confusion;
        let mut rec = vec![r.prefix_len.to_string(), r.horizon.to_string(), r.total_len.to_string()];
        rec.extend(r.metrics.summary().values().iter().map(f64::to_string));
        rec.extend([c.tp, c.fp, c.tn, c.fn_].iter().map(u64::to_string));
        rec.push(r.metrics.threshold.to_string());
        w.write_record(&rec)?;
    }
    let prefix = result.rows.first().map_or(String::new(), |r| r.prefix_len.to_string());
    let mut rec = vec![prefix, AVERAGE.to_string(), AVERAGE.to_string()];
    rec.extend(result.average.values().iter().map(f64::to_string));
    rec.extend(std::iter::repeat(String::new()).take(5));
    w.write_record(&rec)?;
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn emit_report(result: &SweepResult, path: &Path, format: ReportFormat) -> Result<()> {
    let bytes = match format {
        ReportFormat::Json => report_to_json(result)?,
        ReportFormat::Csv => report_to_csv(result)?,
    };
    crate::checkpoint::write_file(path, &bytes)
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: usize) -> Result<T> {
    let raw = rec.get(i).unwrap_or("");
    raw.parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad value {raw:?} in column `{}`", CSV_HEADER[i]),
    })
}

fn summary_at(rec: &csv::StringRecord, line: usize) -> Result<Summary> {
    let mut v = [0.0; SUMMARY_FIELDS];
    for (k, slot) in v.iter_mut().enumerate() {
        *slot = field(rec, 3 + k, line)?;
    }
    Ok(Summary::from_values(v))
}

/// Rebuilds per-class metrics and averages from a CSV row.
fn metrics_from_row(s: &Summary, c: ConfusionCounts, threshold: f32) -> MetricsReport {
    MetricsReport {
        threshold,
        confusion: c,
        accuracy: s.accuracy,
        tpr: s.tpr,
        tnr: s.tnr,
        fpr: s.fpr,
        fnr: s.fnr,
        malware: ClassMetrics {
            precision: s.precision_malware,
            recall: s.recall_malware,
            f1: s.f1_malware,
            support: c.positives(),
        },
        benign: ClassMetrics {
            precision: s.precision_benign,
            recall: s.recall_benign,
            f1: s.f1_benign,
            support: c.negatives(),
        },
        macro_avg: Averages {
            precision: s.macro_precision,
            recall: s.macro_recall,
            f1: s.macro_f1,
        },
        weighted_avg: Averages {
            precision: s.weighted_precision,
            recall: s.weighted_recall,
            f1: s.weighted_f1,
        },
        auc_roc: s.auc,
    }
}

pub fn report_from_csv(bytes: &[u8]) -> Result<SweepResult> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Corrupt("report is not UTF-8".into()))?;
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let head = first.strip_prefix(CSV_META_PREFIX).ok_or(Error::FormatVersion {
        expected: REPORT_FORMAT.to_string(),
        found: "<csv without metadata line>".to_string(),
    })?;
    check_json_format(head.as_bytes(), REPORT_FORMAT)?;
    let CsvMeta { format, meta } = serde_json::from_str(head)?;
    let mut rd = csv::Reader::from_reader(rest.as_bytes());
    if rd.headers()?.iter().ne(CSV_HEADER) {
        return Err(Error::Parse {
            line: 2,
            message: "unexpected CSV header".into(),
        });
    }
    let mut rows = Vec::new();
    let mut average = None;
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let line = i + 3;
        if rec.len() != CSV_HEADER.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} columns, found {}", CSV_HEADER.len(), rec.len()),
            });
        }
        let summary = summary_at(&rec, line)?;
        if rec.get(1) == Some(AVERAGE) {
            average = Some(summary);
            continue;
        }
        let base = 3 + SUMMARY_FIELDS;
        let c = ConfusionCounts {
            tp: field(&rec, base, line)?,
            fp: field(&rec, base + 1, line)?,
            tn: field(&rec, base + 2, line)?,
            fn_: field(&rec, base + 3, line)?,
        };
        rows.push(SweepRow {
            prefix_len: field(&rec, 0, line)?,
            horizon: field(&rec, 1, line)?,
            total_len: field(&rec, 2, line)?,
            metrics: metrics_from_row(&summary, c, field(&rec, base + 4, line)?),
        });
    }
    Ok(SweepResult {
        format,
        meta,
        rows,
        average: average.ok_or_else(|| Error::Corrupt("report has no averages row".into()))?,
    })
}

pub fn report_from_json(bytes: &[u8]) -> Result<SweepResult> {
    check_json_format(bytes, REPORT_FORMAT)?;
    Ok(serde_json::from_slice(bytes)?)
}

/// Reads a report written by [`emit_report`] in either format.
pub fn read_report(path: &Path) -> Result<SweepResult> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(CSV_META_PREFIX.as_bytes()) {
        report_from_csv(&bytes)
    } else {
        report_from_json(&bytes)
    }
}
