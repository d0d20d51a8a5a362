//! Confusion counts, accuracy/TPR/TNR and the evaluation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    pub fn new(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        ConfusionCounts { tp, fp, tn, fn_ }
    }

    /// Counts predictions `p >= 0.5` as positive.
    pub fn from_predictions(probs: &[f32], labels: &[u8]) -> Result<Self> {
        if probs.len() != labels.len() {
            return Err(Error::dim("confusion", &[probs.len()], &[labels.len()]));
        }
        let mut c = ConfusionCounts::default();
        for (&p, &y) in probs.iter().zip(labels) {
            c.add(predict_label(p), y);
        }
        Ok(c)
    }

    pub fn add(&mut self, prediction: u8, truth: u8) {
        match (prediction, truth) {
            (1, 1) => self.tp += 1,
            (1, _) => self.fp += 1,
            (_, 0) => self.tn += 1,
            _ => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `(TN + TP) / (TN + TP + FN + FP)`.
    pub fn accuracy(&self) -> f64 {
        ratio(self.tn + self.tp, self.total())
    }

    /// `TP / (TP + FP)`.
    pub fn tpr(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// `TN / (TN + FN)`.
    pub fn tnr(&self) -> f64 {
        ratio(self.tn, self.tn + self.fn_)
    }

    /// `TP / (TP + FN)`.
    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `TN / (TN + FP)`.
    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }
}

pub fn predict_label(p: f32) -> u8 {
    u8::from(p >= THRESHOLD)
}

/// Per-subject outcome of one evaluated model set.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectResult {
    pub subject_id: String,
    pub label: u8,
    pub probability: f32,
}

impl SubjectResult {
    pub fn prediction(&self) -> u8 {
        predict_label(self.probability)
    }

    pub fn correct(&self) -> bool {
        self.prediction() == self.label
    }
}

/// Results of one variant on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub variant: String,
    pub split: String,
    pub rows: Vec<SubjectResult>,
}

impl Evaluation {
    pub fn counts(&self) -> ConfusionCounts {
        let mut c = ConfusionCounts::default();
        for r in &self.rows {
            c.add(r.prediction(), r.label);
        }
        c
    }
}

/// Cells of a two-variant agreement table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Agreement {
    pub both: usize,
    pub first_only: usize,
    pub second_only: usize,
    pub neither: usize,
}

pub fn agreement(a: &Evaluation, b: &Evaluation) -> Result<Agreement> {
    let b_rows: BTreeMap<&str, &SubjectResult> = b.rows.iter().map(|r| (r.subject_id.as_str(), r)).collect();
    if a.rows.len() != b_rows.len() {
        return Err(Error::Validation(format!(
            "{} and {} were evaluated on different subjects",
            a.variant, b.variant
        )));
    }
    let mut out = Agreement::default();
    for r in &a.rows {
        let other = b_rows.get(r.subject_id.as_str()).ok_or_else(|| {
            Error::Validation(format!("subject {} missing from {}", r.subject_id, b.variant))
        })?;
        match (r.correct(), other.correct()) {
            (true, true) => out.both += 1,
            (true, false) => out.first_only += 1,
            (false, true) => out.second_only += 1,
            (false, false) => out.neither += 1,
        }
    }
    Ok(out)
}

fn summary(s: &mut String, e: &Evaluation) {
    let c = e.counts();
    let _ = writeln!(s, "[summary]");
    let _ = writeln!(s, "variant\t{}", e.variant);
    let _ = writeln!(s, "split\t{}", e.split);
    let _ = writeln!(s, "n\t{}", c.total());
    let _ = writeln!(s, "threshold\t{THRESHOLD}");
    for (k, v) in [("tp", c.tp), ("fp", c.fp), ("tn", c.tn), ("fn", c.fn_)] {
        let _ = writeln!(s, "{k}\t{v}");
    }
    for (k, v) in [
        ("accuracy", c.accuracy()),
        ("tpr", c.tpr()),
        ("tnr", c.tnr()),
        ("sensitivity", c.sensitivity()),
        ("specificity", c.specificity()),
    ] {
        let _ = writeln!(s, "{k}\t{v:.6}");
    }
}

/// Tab-separated report: per-subject rows and a summary block per variant, then
/// (for several variants) a correctness matrix and pairwise agreement tables.
pub fn format_report(evals: &[Evaluation]) -> Result<String> {
    let mut s = String::new();
    for e in evals {
        let _ = writeln!(s, "[subjects]\t{}", e.variant);
        let _ = writeln!(s, "subject_id\tlabel\tprobability\tprediction\tcorrect");
        for r in &e.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.6}\t{}\t{}",
                r.subject_id,
                r.label,
                r.probability,
                r.prediction(),
                u8::from(r.correct())
            );
        }
        summary(&mut s, e);
    }
    if evals.len() > 1 {
        let _ = writeln!(s, "[correctness]");
        let names: Vec<&str> = evals.iter().map(|e| e.variant.as_str()).collect();
        let _ = writeln!(s, "subject_id\tlabel\t{}", names.join("\t"));
        for (i, r) in evals[0].rows.iter().enumerate() {
            let cells: Vec<String> = evals
                .iter()
                .map(|e| e.rows.get(i).map_or("-".into(), |x| u8::from(x.correct()).to_string()))
                .collect();
            let _ = writeln!(s, "{}\t{}\t{}", r.subject_id, r.label, cells.join("\t"));
        }
        let _ = writeln!(s, "[agreement]");
        let _ = writeln!(s, "first\tsecond\tboth_correct\tfirst_only\tsecond_only\tneither");
        for i in 0..evals.len() {
            for j in i + 1..evals.len() {
                let a = agreement(&evals[i], &evals[j])?;
                let _ = writeln!(
                    s,
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    evals[i].variant, evals[j].variant, a.both, a.first_only, a.second_only, a.neither
                );
            }
        }
    }
    Ok(s)
}

/// Reads the per-subject rows and summary values back out of a report.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedReport {
    /// Per variant: `(subject_id, label, probability, prediction)` rows.
    pub rows: BTreeMap<String, Vec<(String, u8, f32, u8)>>,
    /// Per variant: summary key/value pairs.
    pub summaries: BTreeMap<String, BTreeMap<String, String>>,
}

pub fn parse_report(text: &str) -> Result<ParsedReport> {
    let bad = |line: &str| Error::Validation(format!("malformed report line {line:?}"));
    let mut out = ParsedReport::default();
    let mut section = String::new();
    let mut variant = String::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix('[') {
            let (name, arg) = rest.split_once(']').ok_or_else(|| bad(line))?;
            section = name.to_string();
            if section == "subjects" {
                variant = arg.trim().to_string();
                out.rows.entry(variant.clone()).or_default();
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        match section.as_str() {
            "subjects" if fields[0] != "subject_id" => {
                let [id, label, p, pred, _] = fields[..] else {
                    return Err(bad(line));
                };
                let parse_u8 = |x: &str| x.parse::<u8>().map_err(|_| bad(line));
                let row = (
                    id.to_string(),
                    parse_u8(label)?,
                    p.parse::<f32>().map_err(|_| bad(line))?,
                    parse_u8(pred)?,
                );
                out.rows.get_mut(&variant).ok_or_else(|| bad(line))?.push(row);
            }
            "summary" => {
                let [k, v] = fields[..] else {
                    return Err(bad(line));
                };
                out.summaries
                    .entry(variant.clone())
                    .or_default()
                    .insert(k.to_string(), v.to_string());
            }
            _ => {}
        }
    }
    Ok(out)
}
