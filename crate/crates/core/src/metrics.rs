//! Accuracy, one-vs-rest AUC, confusion matrices and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Area under the ROC curve for binary labels, by the rank-sum statistic with
/// tied scores sharing their average rank. `None` unless both classes occur.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Macro average of one-vs-rest AUCs over classes that have both positive
/// and negative samples. `scores[i][c]` is the score of sample `i` for class `c`.
pub fn macro_auc(scores: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Option<f64> {
    let mut aucs = Vec::new();
    for c in 0..num_classes {
        let s: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if let Some(a) = binary_auc(&s, &pos) {
            aucs.push(a);
        }
    }
    if aucs.is_empty() {
        None
    } else {
        Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
    }
}

/// First index of the maximum score.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Counts with rows indexed by true class and columns by predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Self {
        let mut m = Self::new(num_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            m.counts[t][p] += 1;
        }
        m
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn column_sums(&self) -> Vec<usize> {
        (0..self.counts.len())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }

    /// Per predicted class; 0 where nothing was predicted.
    pub fn precision(&self) -> Vec<f64> {
        self.column_sums()
            .iter()
            .enumerate()
            .map(|(j, &s)| if s == 0 { 0.0 } else { self.counts[j][j] as f64 / s as f64 })
            .collect()
    }

    /// Per true class; 0 for classes with no samples.
    pub fn recall(&self) -> Vec<f64> {
        self.row_sums()
            .iter()
            .enumerate()
            .map(|(i, &s)| if s == 0 { 0.0 } else { self.counts[i][i] as f64 / s as f64 })
            .collect()
    }

    /// Grid of `count (pct%)` cells with percentages of each row total,
    /// truncated to two decimals.
    pub fn render(&self, class_names: &[String]) -> String {
        let cells: Vec<Vec<String>> = self
            .counts
            .iter()
            .map(|row| {
                let total: usize = row.iter().sum();
                row.iter().map(|&c| format_cell(c, total)).collect()
            })
            .collect();
        let label_w = class_names.iter().map(|n| n.len()).max().unwrap_or(0).max("true\\pred".len());
        let col_w = cells
            .iter()
            .flatten()
            .map(String::len)
            .chain(class_names.iter().map(String::len))
            .max()
            .unwrap_or(0);
        let mut out = String::new();
        let _ = write!(out, "{:<label_w$}", "true\\pred");
        for name in class_names {
            let _ = write!(out, " | {name:>col_w$}");
        }
        out.push('\n');
        out.push_str(&"-".repeat(label_w + class_names.len() * (col_w + 3)));
        out.push('\n');
        for (name, row) in class_names.iter().zip(&cells) {
            let _ = write!(out, "{name:<label_w$}");
            for cell in row {
                let _ = write!(out, " | {cell:>col_w$}");
            }
            out.push('\n');
        }
        out
    }
}

/// `count (pp.dd%)` with the share of `total` truncated, not rounded.
pub fn format_cell(count: usize, total: usize) -> String {
    let basis_points = if total == 0 { 0 } else { count as u128 * 10_000 / total as u128 };
    format!("{count} ({}.{:02}%)", basis_points / 100, basis_points % 100)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoReport {
    pub videos: usize,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub samples: usize,
    pub accuracy: f64,
    /// Macro one-vs-rest AUC; absent when no class has both outcomes.
    pub auc: Option<f64>,
    pub confusion: ConfusionMatrix,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub video: Option<VideoReport>,
}

impl EvalReport {
    /// `probs[i]` are class scores of sample `i`; `videos`, when given, names
    /// each sample's source video for the majority-vote report.
    pub fn from_scores(
        class_names: &[String],
        probs: &[Vec<f64>],
        labels: &[usize],
        videos: Option<&[String]>,
    ) -> Result<Self> {
        let c = class_names.len();
        if probs.len() != labels.len() || videos.is_some_and(|v| v.len() != labels.len()) {
            return Err(Error::Input("scores, labels and video ids differ in length".into()));
        }
        if probs.iter().any(|r| r.len() != c) {
            return Err(Error::Config(format!("scores must have {c} columns")));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Input(format!("label {l} outside {c} classes")));
        }
        let predicted: Vec<usize> = probs.iter().map(|r| argmax(r)).collect();
        let confusion = ConfusionMatrix::from_predictions(labels, &predicted, c);
        let video = videos.map(|ids| video_report(ids, probs, labels, c));
        Ok(Self {
            class_names: class_names.to_vec(),
            samples: labels.len(),
            accuracy: confusion.accuracy(),
            auc: macro_auc(probs, labels, c),
            precision: confusion.precision(),
            recall: confusion.recall(),
            confusion,
            video,
        })
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "samples: {}\naccuracy: {:.4}\nauc: {}\n\n",
            self.samples,
            self.accuracy,
            self.auc.map_or("n/a".into(), |a| format!("{a:.4}"))
        );
        out.push_str(&self.confusion.render(&self.class_names));
        out.push('\n');
        for (i, name) in self.class_names.iter().enumerate() {
            let _ = writeln!(
                out,
                "{name}: precision {:.4} recall {:.4}",
                self.precision[i], self.recall[i]
            );
        }
        if let Some(v) = &self.video {
            let _ = writeln!(out, "\nvideos: {} (majority vote accuracy {:.4})", v.videos, v.accuracy);
            out.push_str(&v.confusion.render(&self.class_names));
        }
        out
    }
}

/// Majority vote of patch predictions per video. Ties go to the class with
/// the larger summed score, then to the lower index.
pub fn majority_vote(probs: &[&[f64]]) -> usize {
    let c = probs.first().map_or(0, |r| r.len());
    let mut votes = vec![0usize; c];
    let mut mass = vec![0.0f64; c];
    for row in probs {
        votes[argmax(row)] += 1;
        for (m, v) in mass.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    let mut best = 0;
    for k in 1..c {
        if votes[k] > votes[best] || (votes[k] == votes[best] && mass[k] > mass[best]) {
            best = k;
        }
    }
    best
}

fn video_report(ids: &[String], probs: &[Vec<f64>], labels: &[usize], c: usize) -> VideoReport {
    let mut groups: BTreeMap<&str, (usize, Vec<&[f64]>)> = BTreeMap::new();
    for ((id, p), &l) in ids.iter().zip(probs).zip(labels) {
        groups.entry(id).or_insert_with(|| (l, Vec::new())).1.push(p);
    }
    let mut truth = Vec::new();
    let mut predicted = Vec::new();
    for (label, rows) in groups.values() {
        truth.push(*label);
        predicted.push(majority_vote(rows));
    }
    let confusion = ConfusionMatrix::from_predictions(&truth, &predicted, c);
    VideoReport {
        videos: truth.len(),
        accuracy: confusion.accuracy(),
        confusion,
    }
}
