//! Scoring every round of a dataset and aggregating the metrics.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::{Dataset, DialogInstance};
use crate::decoder::{rank_candidates, ScoreDistribution};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, classify_sc_si, Metrics, MetricsReport, RoundResult};

/// Anything that turns a dialog into one distribution per round.
pub trait Scorer: Sync {
    fn score_dialog(&self, data: &Dataset, dialog: &DialogInstance) -> Result<Vec<ScoreDistribution>>;
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub rounds: Vec<RoundResult>,
}

pub fn score_all<S: Scorer + ?Sized>(scorer: &S, data: &Dataset) -> Result<Vec<Vec<ScoreDistribution>>> {
    data.dialogs
        .dialogs
        .par_iter()
        .map(|d| scorer.score_dialog(data, d))
        .collect()
}

/// Ranks every round and aggregates; dialogs are scored in parallel and
/// reduced in file order.
pub fn evaluate<S: Scorer + ?Sized>(scorer: &S, data: &Dataset) -> Result<Evaluation> {
    let scores = score_all(scorer, data)?;
    evaluate_scores(data, &scores)
}

pub fn evaluate_scores(data: &Dataset, scores: &[Vec<ScoreDistribution>]) -> Result<Evaluation> {
    let mut rounds = Vec::with_capacity(data.dialogs.round_count());
    for (d, dists) in data.dialogs.dialogs.iter().zip(scores) {
        if dists.len() != d.rounds.len() {
            return Err(Error::usage(format!(
                "{}: {} distributions for {} rounds",
                d.image_id,
                dists.len(),
                d.rounds.len()
            )));
        }
        for (r, dist) in d.rounds.iter().zip(dists) {
            if dist.len() != r.candidates.len() {
                return Err(Error::usage(format!(
                    "{}: {} scores for {} candidates",
                    d.image_id,
                    dist.len(),
                    r.candidates.len()
                )));
            }
            rounds.push(RoundResult::new(
                rank_candidates(dist),
                r.gt_index,
                r.relevance.clone(),
                classify_sc_si(&r.question),
            )?);
        }
    }
    Ok(Evaluation {
        report: aggregate(&rounds)?,
        rounds,
    })
}

/// Mean of the members' probability distributions, summed in `f64` in member
/// order.
pub struct Ensemble<'a> {
    pub members: Vec<&'a (dyn Scorer + 'a)>,
}

impl Scorer for Ensemble<'_> {
    fn score_dialog(&self, data: &Dataset, dialog: &DialogInstance) -> Result<Vec<ScoreDistribution>> {
        if self.members.is_empty() {
            return Err(Error::usage("ensemble needs at least one member"));
        }
        let per_member = self
            .members
            .iter()
            .map(|m| m.score_dialog(data, dialog))
            .collect::<Result<Vec<_>>>()?;
        average(&per_member)
    }
}

/// Round-wise average of several members' distributions.
pub fn average(per_member: &[Vec<ScoreDistribution>]) -> Result<Vec<ScoreDistribution>> {
    let first = &per_member[0];
    let m = per_member.len() as f64;
    (0..first.len())
        .map(|r| {
            let a = first[r].len();
            let mut sum = vec![0.0; a];
            for member in per_member {
                let d = member
                    .get(r)
                    .ok_or_else(|| Error::usage("ensemble members disagree on the number of rounds"))?;
                if d.len() != a {
                    return Err(Error::usage(format!(
                        "ensemble members disagree on candidate count: {} vs {a}",
                        d.len()
                    )));
                }
                for (s, p) in sum.iter_mut().zip(&d.p) {
                    *s += p;
                }
            }
            ScoreDistribution::from_probs(sum.into_iter().map(|s| s / m).collect())
        })
        .collect()
}

/// One `metrics.csv` row per (model, split) pair, plus `split:sc` and
/// `split:si` rows when those subsets are non-empty.
pub struct MetricsRow {
    pub model: String,
    pub split: String,
    pub metrics: Metrics,
}

pub const METRICS_HEADER: [&str; 9] = ["model", "split", "n", "ndcg", "mrr", "r1", "r5", "r10", "mean_rank"];

pub fn report_rows(model: &str, split: &str, report: &MetricsReport) -> Vec<MetricsRow> {
    let mut rows = vec![MetricsRow {
        model: model.to_string(),
        split: split.to_string(),
        metrics: report.overall.clone(),
    }];
    for (tag, m) in [("sc", &report.sc), ("si", &report.si)] {
        if let Some(m) = m {
            rows.push(MetricsRow {
                model: model.to_string(),
                split: format!("{split}:{tag}"),
                metrics: m.clone(),
            });
        }
    }
    rows
}

/// Writes `metrics.csv` and `metrics.json` into `dir`.
pub fn write_metrics(dir: &Path, rows: &[MetricsRow]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        let m = &r.metrics;
        w.write_record([
            r.model.clone(),
            r.split.clone(),
            m.n.to_string(),
            m.ndcg.map(|x| x.to_string()).unwrap_or_default(),
            m.mrr.to_string(),
            m.r1.to_string(),
            m.r5.to_string(),
            m.r10.to_string(),
            m.mean_rank.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let json: Vec<_> = rows
        .iter()
        .map(|r| serde_json::json!({"model": r.model, "split": r.split, "metrics": r.metrics}))
        .collect();
    let json_path = dir.join("metrics.json");
    let mut text = serde_json::to_string_pretty(&json).map_err(|e| Error::json(&json_path, e))?;
    text.push('\n');
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}

