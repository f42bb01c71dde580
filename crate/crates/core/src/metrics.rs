//! Binary classification metrics.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HsqError, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledScores {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub groups: Option<Vec<String>>,
}

fn metric(msg: impl Into<String>) -> HsqError {
    HsqError::Metric(msg.into())
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        let d = Self {
            scores,
            labels,
            groups: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.labels.len() {
            return Err(metric(format!(
                "{} scores but {} labels",
                self.scores.len(),
                self.labels.len()
            )));
        }
        if let Some(g) = &self.groups {
            if g.len() != self.scores.len() {
                return Err(metric(format!("{} scores but {} group ids", self.scores.len(), g.len())));
            }
        }
        if let Some(i) = self.scores.iter().position(|s| !s.is_finite()) {
            return Err(metric(format!("score {i} is not finite")));
        }
        Ok(())
    }

    /// One item per group: the maximum score, positive if any member is.
    pub fn aggregate_by_group(&self) -> Result<Self> {
        self.validate()?;
        let groups = self
            .groups
            .as_ref()
            .ok_or_else(|| metric("no group ids to aggregate by"))?;
        let mut agg: BTreeMap<&str, (f64, bool)> = BTreeMap::new();
        for ((g, &s), &l) in groups.iter().zip(&self.scores).zip(&self.labels) {
            let e = agg.entry(g).or_insert((f64::NEG_INFINITY, false));
            e.0 = e.0.max(s);
            e.1 |= l;
        }
        Ok(Self {
            groups: Some(agg.keys().map(|k| k.to_string()).collect()),
            scores: agg.values().map(|v| v.0).collect(),
            labels: agg.values().map(|v| v.1).collect(),
        })
    }
}

/// Threshold metrics. Precision is `None` without predicted positives, recall
/// is `None` without actual positives, and F1 is `None` when either is.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConfusionMetrics {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub r#fn: usize,
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// An item is predicted positive when its score is at least `threshold`.
pub fn confusion_metrics(d: &LabeledScores, threshold: f64) -> Result<ConfusionMetrics> {
    d.validate()?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(metric(format!("threshold {threshold} outside [0, 1]")));
    }
    if d.is_empty() {
        return Err(metric("no items"));
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
    for (&s, &l) in d.scores.iter().zip(&d.labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Ok(ConfusionMetrics {
        accuracy: (tp + tn) as f64 / d.len() as f64,
        precision,
        recall,
        f1,
        tp,
        fp,
        tn,
        r#fn: fneg,
    })
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, from midranks.
pub fn auc(d: &LabeledScores) -> Result<f64> {
    d.validate()?;
    let pos = d.labels.iter().filter(|&&l| l).count();
    let neg = d.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(metric(format!(
            "AUC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&a, &b| d.scores[a].total_cmp(&d.scores[b]));
    // Twice the rank sum of the positives, with tied items sharing the
    // average of their ranks; kept in integers so the result is exact.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && d.scores[idx[j + 1]] == d.scores[idx[i]] {
            j += 1;
        }
        let positives = idx[i..=j].iter().filter(|&&t| d.labels[t]).count() as u128;
        // Ranks i+1..=j+1, average (i+j+2)/2.
        twice_rank_sum += positives * (i + j + 2) as u128;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// Quadratic reference: counts every positive/negative pair.
pub fn auc_pairwise(d: &LabeledScores) -> Result<f64> {
    d.validate()?;
    let (mut twice_wins, mut pairs) = (0u128, 0u128);
    for (i, &li) in d.labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in d.labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1;
            twice_wins += match d.scores[i].partial_cmp(&d.scores[j]) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    if pairs == 0 {
        return Err(metric("AUC needs both classes"));
    }
    Ok(twice_wins as f64 / (2 * pairs) as f64)
}

#[derive(Debug, Deserialize)]
struct ScoreRow {
    id: String,
    group: String,
    score: f64,
    label: String,
}

fn parse_label(s: &str, line: usize) -> Result<bool> {
    match s.trim() {
        "1" | "true" | "malignant" => Ok(true),
        "0" | "false" | "benign" => Ok(false),
        other => Err(metric(format!("row {line}: label `{other}` is not 0 or 1"))),
    }
}

/// Reads `id,group,score,label`. Empty group ids fall back to the item id.
pub fn read_scores_csv(reader: impl Read) -> Result<(Vec<String>, LabeledScores)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["id", "group", "score", "label"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(metric(format!(
            "scores header must be `{}`, found `{}`",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let (mut ids, mut groups, mut scores, mut labels) = (vec![], vec![], vec![], vec![]);
    for (i, row) in rdr.deserialize::<ScoreRow>().enumerate() {
        let row = row?;
        if !(0.0..=1.0).contains(&row.score) {
            return Err(metric(format!("row {}: score {} outside [0, 1]", i + 1, row.score)));
        }
        labels.push(parse_label(&row.label, i + 1)?);
        groups.push(if row.group.is_empty() { row.id.clone() } else { row.group });
        ids.push(row.id);
        scores.push(row.score);
    }
    let d = LabeledScores {
        scores,
        labels,
        groups: Some(groups),
    };
    d.validate()?;
    Ok((ids, d))
}

pub fn load_scores_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, LabeledScores)> {
    read_scores_csv(std::fs::File::open(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub items: usize,
    pub threshold: f64,
    pub confusion: ConfusionMetrics,
    pub auc: f64,
}

pub fn evaluate(d: &LabeledScores, threshold: f64) -> Result<MetricReport> {
    Ok(MetricReport {
        items: d.len(),
        threshold,
        confusion: confusion_metrics(d, threshold)?,
        auc: auc(d)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ls(scores: &[f64], labels: &[u8]) -> LabeledScores {
        LabeledScores::new(scores.to_vec(), labels.iter().map(|&l| l == 1).collect()).unwrap()
    }

    #[test]
    fn separated_case() {
        let d = ls(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]);
        let m = confusion_metrics(&d, 0.5).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, Some(1.0), Some(1.0), Some(1.0)));
        assert_eq!(auc(&d).unwrap(), 1.0);
        let inv = ls(&[0.9, 0.8, 0.3, 0.2], &[0, 0, 1, 1]);
        assert_eq!(auc(&inv).unwrap(), 0.0);
    }

    #[test]
    fn hand_tabulated_cases() {
        let m = confusion_metrics(&ls(&[0.9, 0.6, 0.4, 0.2], &[1, 0, 1, 0]), 0.5).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (0.5, Some(0.5), Some(0.5), Some(0.5)));
        assert_eq!(auc(&ls(&[0.9, 0.4, 0.6, 0.2], &[1, 0, 0, 1])).unwrap(), 0.5);
        let all = confusion_metrics(&ls(&[0.7, 0.9], &[1, 1]), 0.5).unwrap();
        assert_eq!((all.recall, all.accuracy), (Some(1.0), 1.0));
    }

    #[test]
    fn undefined_markers() {
        let m = confusion_metrics(&ls(&[0.1, 0.2], &[1, 0]), 0.5).unwrap();
        assert_eq!((m.precision, m.f1), (None, None));
        let m = confusion_metrics(&ls(&[0.1, 0.7], &[0, 0]), 0.5).unwrap();
        assert_eq!(m.recall, None);
        assert!(auc(&ls(&[0.1, 0.7], &[0, 0])).is_err());
        assert!(confusion_metrics(&ls(&[0.1], &[0]), 1.5).is_err());
    }

    #[test]
    fn ties_count_half() {
        let d = ls(&[0.5, 0.5, 0.5], &[1, 0, 0]);
        assert_eq!(auc(&d).unwrap(), 0.5);
        assert_eq!(auc_pairwise(&d).unwrap(), 0.5);
    }

    #[test]
    fn group_aggregation_takes_max() {
        let d = LabeledScores {
            scores: vec![0.2, 0.9, 0.4, 0.1],
            labels: vec![false, true, false, false],
            groups: Some(vec!["a".into(), "a".into(), "b".into(), "b".into()]),
        };
        let g = d.aggregate_by_group().unwrap();
        assert_eq!(g.scores, vec![0.9, 0.4]);
        assert_eq!(g.labels, vec![true, false]);
    }

    #[test]
    fn csv_ingestion() {
        let text = "id,group,score,label\nx1,p1,0.9,1\nx2,,0.2,0\n";
        let (ids, d) = read_scores_csv(text.as_bytes()).unwrap();
        assert_eq!(ids, vec!["x1", "x2"]);
        assert_eq!(d.groups.unwrap(), vec!["p1", "x2"]);
        assert!(read_scores_csv("id,score\n".as_bytes()).is_err());
        assert!(read_scores_csv("id,group,score,label\na,b,0.3,maybe\n".as_bytes()).is_err());
        assert!(read_scores_csv("id,group,score,label\na,b,1.3,1\n".as_bytes()).is_err());
    }
}
