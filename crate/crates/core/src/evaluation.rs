//! Per-level metrics, taxonomic error severity and model comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{LabelPath, Level, TaxonomyTree, DEPTH};

/// Largest taxonomic distance (different class).
pub const MAX_DISTANCE: usize = DEPTH;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub level: Level,
    pub n: usize,
    pub accuracy: f64,
    /// Support-weighted F1; a class never predicted correctly scores 0.
    pub weighted_f1: f64,
}

/// Accuracy and support-weighted F1 of two label sequences.
pub fn accuracy_and_weighted_f1(predicted: &[usize], truth: &[usize]) -> Result<(f64, f64)> {
    if predicted.len() != truth.len() {
        return Err(Error::dim("predicted labels", truth.len(), predicted.len()));
    }
    if truth.is_empty() {
        return Err(Error::Parameter("cannot score an empty label set".into()));
    }
    // (true positives, predicted count, true count)
    let mut counts: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (&p, &t) in predicted.iter().zip(truth) {
        counts.entry(p).or_default().1 += 1;
        let e = counts.entry(t).or_default();
        e.2 += 1;
        if p == t {
            e.0 += 1;
            correct += 1;
        }
    }
    let n = truth.len() as f64;
    let f1: f64 = counts
        .values()
        .filter(|c| c.2 > 0)
        .map(|&(tp, pred, support)| {
            let f = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (pred + support) as f64 };
            f * support as f64 / n
        })
        .sum();
    Ok((correct as f64 / n, f1))
}

/// Metrics at every level for which all predictions carry a label.
pub fn per_level_metrics(predictions: &[[Option<usize>; DEPTH]], truths: &[LabelPath]) -> Result<Vec<LevelMetrics>> {
    if predictions.len() != truths.len() {
        return Err(Error::dim("predictions", truths.len(), predictions.len()));
    }
    let mut out = Vec::new();
    for level in Level::ALL {
        let l = level.ordinal();
        let Some(pred): Option<Vec<usize>> = predictions.iter().map(|p| p[l]).collect() else {
            continue;
        };
        let truth: Vec<usize> = truths.iter().map(|t| t.0[l]).collect();
        let (accuracy, weighted_f1) = accuracy_and_weighted_f1(&pred, &truth)?;
        out.push(LevelMetrics {
            level,
            n: truth.len(),
            accuracy,
            weighted_f1,
        });
    }
    Ok(out)
}

/// Distribution of taxonomic distance between predicted and true species.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    /// Count of samples at distance 0..=5.
    pub histogram: [usize; MAX_DISTANCE + 1],
    pub n: usize,
    pub errors: usize,
    pub mean_all: f64,
    /// Mean over misclassified samples; absent without errors.
    pub mean_errors: Option<f64>,
    /// Population standard deviation over misclassified samples.
    pub std_errors: Option<f64>,
    /// Sample (n - 1) standard deviation over misclassified samples.
    pub std_errors_sample: Option<f64>,
    /// Fraction of errors at each distance 1..=5.
    pub error_shares: Option<[f64; MAX_DISTANCE]>,
}

impl DistanceStats {
    pub fn from_histogram(histogram: [usize; MAX_DISTANCE + 1]) -> Result<Self> {
        let n: usize = histogram.iter().sum();
        if n == 0 {
            return Err(Error::Parameter("distance histogram is empty".into()));
        }
        let errors = n - histogram[0];
        let total: f64 = histogram.iter().enumerate().map(|(d, &c)| (d * c) as f64).sum();
        let mut stats = DistanceStats {
            histogram,
            n,
            errors,
            mean_all: total / n as f64,
            mean_errors: None,
            std_errors: None,
            std_errors_sample: None,
            error_shares: None,
        };
        if errors > 0 {
            let mean = total / errors as f64;
            let ss: f64 = histogram[1..]
                .iter()
                .enumerate()
                .map(|(i, &c)| c as f64 * ((i + 1) as f64 - mean).powi(2))
                .sum();
            stats.mean_errors = Some(mean);
            stats.std_errors = Some((ss / errors as f64).sqrt());
            stats.std_errors_sample = (errors > 1).then(|| (ss / (errors - 1) as f64).sqrt());
            let mut shares = [0.0; MAX_DISTANCE];
            for (s, &c) in shares.iter_mut().zip(&histogram[1..]) {
                *s = c as f64 / errors as f64;
            }
            stats.error_shares = Some(shares);
        }
        Ok(stats)
    }

    /// Relative drop in mean error distance against `baseline`:
    /// 1 - mean_errors / baseline.mean_errors. Absent when either side has
    /// no errors.
    pub fn severity_reduction(&self, baseline: &DistanceStats) -> Option<f64> {
        Some(1.0 - self.mean_errors? / baseline.mean_errors?)
    }
}

/// Distance statistics between predicted and true species indices.
pub fn distance_stats(tree: &TaxonomyTree, predicted: &[usize], truth: &[usize]) -> Result<DistanceStats> {
    if predicted.len() != truth.len() {
        return Err(Error::dim("predicted species", truth.len(), predicted.len()));
    }
    let mut histogram = [0usize; MAX_DISTANCE + 1];
    for (&p, &t) in predicted.iter().zip(truth) {
        histogram[tree.taxonomic_distance(p, t)? as usize] += 1;
    }
    DistanceStats::from_histogram(histogram)
}

/// Among samples wrong at `deepest`, how often each coarser level was right.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorPropagation {
    pub deepest: Level,
    pub errors: usize,
    pub ancestor_correct: Vec<(Level, f64)>,
}

pub fn error_propagation(
    predictions: &[[Option<usize>; DEPTH]],
    truths: &[LabelPath],
    deepest: Level,
) -> Result<Option<ErrorPropagation>> {
    if predictions.len() != truths.len() {
        return Err(Error::dim("predictions", truths.len(), predictions.len()));
    }
    let d = deepest.ordinal();
    let mut wrong = Vec::new();
    for (p, t) in predictions.iter().zip(truths) {
        let label = p[d].ok_or_else(|| Error::Parameter(format!("predictions carry no {deepest} label")))?;
        if label != t.0[d] {
            wrong.push((p, t));
        }
    }
    if wrong.is_empty() {
        return Ok(None);
    }
    let mut ancestor_correct = Vec::new();
    for level in &Level::ALL[..d] {
        let l = level.ordinal();
        let mut right = 0;
        for (p, t) in &wrong {
            match p[l] {
                Some(v) if v == t.0[l] => right += 1,
                Some(_) => {}
                None => return Err(Error::Parameter(format!("predictions carry no {level} label"))),
            }
        }
        ancestor_correct.push((*level, right as f64 / wrong.len() as f64));
    }
    Ok(Some(ErrorPropagation {
        deepest,
        errors: wrong.len(),
        ancestor_correct,
    }))
}

/// Everything reported for one model on one evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub strategy: String,
    pub taxonomy_checksum: String,
    pub n: usize,
    pub levels: Vec<LevelMetrics>,
    pub path_valid_rate: f64,
    /// Present when species labels are available.
    pub distance: Option<DistanceStats>,
    pub severity_reduction: Option<f64>,
    pub propagation: Option<ErrorPropagation>,
}

impl MetricsReport {
    pub fn level(&self, level: Level) -> Option<&LevelMetrics> {
        self.levels.iter().find(|m| m.level == level)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Builds a report. `path_valid` holds one flag per prediction; `baseline`
/// supplies the distance statistics that severity reduction is measured against.
pub fn evaluate(
    tree: &TaxonomyTree,
    model: &str,
    strategy: &str,
    predictions: &[[Option<usize>; DEPTH]],
    path_valid: &[bool],
    truths: &[LabelPath],
    baseline: Option<&DistanceStats>,
) -> Result<MetricsReport> {
    if path_valid.len() != predictions.len() {
        return Err(Error::dim("path validity flags", predictions.len(), path_valid.len()));
    }
    let levels = per_level_metrics(predictions, truths)?;
    let deepest = levels
        .last()
        .map(|m| m.level)
        .ok_or_else(|| Error::Parameter("predictions carry no complete level".into()))?;
    let species = Level::Species.ordinal();
    let distance = match predictions.iter().map(|p| p[species]).collect::<Option<Vec<_>>>() {
        Some(pred) => {
            let truth: Vec<usize> = truths.iter().map(|t| t.0[species]).collect();
            Some(distance_stats(tree, &pred, &truth)?)
        }
        None => None,
    };
    let severity_reduction = match (&distance, baseline) {
        (Some(d), Some(b)) => d.severity_reduction(b),
        _ => None,
    };
    Ok(MetricsReport {
        model: model.to_owned(),
        strategy: strategy.to_owned(),
        taxonomy_checksum: tree.checksum(),
        n: truths.len(),
        path_valid_rate: path_valid.iter().filter(|&&v| v).count() as f64 / path_valid.len().max(1) as f64,
        levels,
        distance,
        severity_reduction,
        propagation: error_propagation(predictions, truths, deepest)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    /// Long-format CSV: `model,strategy,metric,level,value,delta`.
    pub csv: String,
    pub summary: String,
}

fn report_rows(r: &MetricsReport) -> Vec<(String, String, f64)> {
    let mut rows = Vec::new();
    for m in &r.levels {
        rows.push(("accuracy".to_owned(), m.level.to_string(), m.accuracy));
        rows.push(("weighted_f1".to_owned(), m.level.to_string(), m.weighted_f1));
    }
    rows.push(("path_valid_rate".to_owned(), String::new(), r.path_valid_rate));
    if let Some(d) = &r.distance {
        rows.push(("mean_distance_all".to_owned(), String::new(), d.mean_all));
        if let Some(v) = d.mean_errors {
            rows.push(("mean_distance_errors".to_owned(), String::new(), v));
        }
        if let Some(shares) = d.error_shares {
            for (i, s) in shares.iter().enumerate() {
                rows.push((format!("error_share_d{}", i + 1), String::new(), *s));
            }
        }
    }
    if let Some(p) = &r.propagation {
        for (level, v) in &p.ancestor_correct {
            rows.push(("ancestor_correct_given_error".to_owned(), level.to_string(), *v));
        }
    }
    rows
}

/// Side-by-side table of reports on the same taxonomy and evaluation set.
/// Deltas are taken against the first report.
pub fn compare_models(reports: &[MetricsReport]) -> Result<Comparison> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Parameter("nothing to compare".into()))?;
    for r in &reports[1..] {
        if r.taxonomy_checksum != first.taxonomy_checksum {
            return Err(Error::ChecksumMismatch {
                expected: first.taxonomy_checksum.clone(),
                found: r.taxonomy_checksum.clone(),
            });
        }
        if r.n != first.n {
            return Err(Error::dim("evaluation samples", first.n, r.n));
        }
    }
    let base: BTreeMap<(String, String), f64> = report_rows(first)
        .into_iter()
        .map(|(m, l, v)| ((m, l), v))
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "strategy", "metric", "level", "value", "delta"])?;
    let mut summary = String::new();
    for r in reports {
        for (metric, level, value) in report_rows(r) {
            let delta = base
                .get(&(metric.clone(), level.clone()))
                .map(|b| (value - b).to_string())
                .unwrap_or_default();
            w.write_record([r.model.as_str(), &r.strategy, &metric, &level, &value.to_string(), &delta])?;
        }
        let _ = write!(summary, "{} ({})", r.model, r.strategy);
        if let Some(m) = r.levels.last() {
            let _ = write!(summary, ": {} acc {:.4} F1 {:.4}", m.level, m.accuracy, m.weighted_f1);
        }
        if let Some(v) = r.distance.as_ref().and_then(|d| d.mean_errors) {
            let _ = write!(summary, ", mean error distance {v:.3}");
        }
        summary.push('\n');
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(Comparison {
        csv: String::from_utf8(bytes).expect("csv output is utf-8"),
        summary,
    })
}
