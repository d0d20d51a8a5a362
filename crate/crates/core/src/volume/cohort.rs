//! Clinical event records and converter/stable cohort selection.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::Modality;
use crate::error::{Error, Result};

pub const SCAN_WINDOW_DAYS: i64 = 365;
pub const DAYS_PER_DECADE: i64 = 3652;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Diagnosis {
    Cn,
    Mci,
    Ad,
}

impl Diagnosis {
    pub fn as_str(self) -> &'static str {
        match self {
            Diagnosis::Cn => "CN",
            Diagnosis::Mci => "MCI",
            Diagnosis::Ad => "AD",
        }
    }

    pub fn impaired(self) -> bool {
        self != Diagnosis::Cn
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Diagnosis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "CN" => Ok(Diagnosis::Cn),
            "MCI" => Ok(Diagnosis::Mci),
            "AD" => Ok(Diagnosis::Ad),
            _ => Err(Error::Validation(format!("unknown diagnosis {s:?}"))),
        }
    }
}

/// Diagnoses and scans of one subject, days counted from baseline.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub diagnoses: Vec<(i64, Diagnosis)>,
    pub scans: Vec<(i64, Modality)>,
}

impl SubjectRecord {
    pub fn new(subject_id: impl Into<String>) -> Self {
        SubjectRecord {
            subject_id: subject_id.into(),
            ..Default::default()
        }
    }

    pub fn diagnosis(mut self, day: i64, dx: Diagnosis) -> Self {
        self.diagnoses.push((day, dx));
        self
    }

    pub fn scan(mut self, day: i64, modality: Modality) -> Self {
        self.scans.push((day, modality));
        self
    }

    pub fn sort_events(&mut self) {
        self.diagnoses.sort_by_key(|e| e.0);
        self.scans.sort_by_key(|e| e.0);
    }

    /// Earliest scan of `modality` within the baseline window.
    pub fn scan_day(&self, modality: Modality) -> Option<i64> {
        self.scans
            .iter()
            .filter(|(d, m)| *m == modality && (0..=SCAN_WINDOW_DAYS).contains(d))
            .map(|(d, _)| *d)
            .min()
    }

    fn baseline(&self) -> Result<Option<Diagnosis>> {
        let at0: Vec<Diagnosis> = self.diagnoses.iter().filter(|(d, _)| *d == 0).map(|e| e.1).collect();
        if at0.is_empty() {
            return Err(Error::Validation(format!(
                "subject {} has no baseline diagnosis",
                self.subject_id
            )));
        }
        Ok(if at0.iter().all(|d| *d == Diagnosis::Cn) {
            Some(Diagnosis::Cn)
        } else {
            at0.into_iter().find(|d| d.impaired())
        })
    }

    /// 1 for converters, 0 for stable subjects, `None` if excluded.
    pub fn label(&self, window_days: i64) -> Result<Option<u8>> {
        if self.baseline()? != Some(Diagnosis::Cn) {
            return Ok(None);
        }
        if self.scan_day(Modality::Mri).is_none() || self.scan_day(Modality::Pet).is_none() {
            return Ok(None);
        }
        let first_impaired = self
            .diagnoses
            .iter()
            .filter(|(_, dx)| dx.impaired())
            .map(|(d, _)| *d)
            .min();
        if first_impaired.is_some_and(|d| d <= window_days) {
            return Ok(Some(1));
        }
        let stable = self
            .diagnoses
            .iter()
            .any(|&(d, dx)| dx == Diagnosis::Cn && d >= window_days && first_impaired.is_none_or(|i| i > d));
        Ok(stable.then_some(0))
    }
}

/// `(subject_id, label)` sorted by subject id. `window_years` years are counted
/// as `window_years · 3652 / 10` days.
pub fn select_cohort(records: &[SubjectRecord], window_years: u32) -> Result<Vec<(String, u8)>> {
    let window_days = window_years as i64 * DAYS_PER_DECADE / 10;
    let mut out = BTreeMap::new();
    for r in records {
        if let Some(label) = r.label(window_days)? {
            if out.insert(r.subject_id.clone(), label).is_some() {
                return Err(Error::Validation(format!("duplicate subject {}", r.subject_id)));
            }
        }
    }
    Ok(out.into_iter().collect())
}

pub fn format_records(records: &[SubjectRecord]) -> String {
    let mut s = String::from("# subject_id\tevent_kind\tday\tvalue\n");
    for r in records {
        for (d, dx) in &r.diagnoses {
            s.push_str(&format!("{}\tDX\t{d}\t{dx}\n", r.subject_id));
        }
        for (d, m) in &r.scans {
            s.push_str(&format!("{}\tSCAN\t{d}\t{m}\n", r.subject_id));
        }
    }
    s
}

pub fn parse_records(text: &str, path: &Path) -> Result<Vec<SubjectRecord>> {
    let mut by_id: BTreeMap<String, SubjectRecord> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Error::format(path, format!("line {}: {msg}", lineno + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, kind, day, value] = fields[..] else {
            return Err(bad(format!("expected 4 fields, got {}", fields.len())));
        };
        let day: i64 = day.parse().map_err(|_| bad(format!("bad day {day:?}")))?;
        let rec = by_id.entry(id.to_string()).or_insert_with(|| SubjectRecord::new(id));
        match kind {
            "DX" => rec.diagnoses.push((day, value.parse().map_err(|e: Error| bad(e.to_string()))?)),
            "SCAN" => rec.scans.push((day, value.parse().map_err(|e: Error| bad(e.to_string()))?)),
            _ => return Err(bad(format!("unknown event kind {kind:?}"))),
        }
    }
    let mut out: Vec<SubjectRecord> = by_id.into_values().collect();
    out.iter_mut().for_each(SubjectRecord::sort_events);
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<SubjectRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text, path)
}

pub fn write_records(path: &Path, records: &[SubjectRecord]) -> Result<()> {
    fs::write(path, format_records(records)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(id: &str) -> SubjectRecord {
        SubjectRecord::new(id).diagnosis(0, Diagnosis::Cn)
    }

    #[test]
    fn converter_included() {
        let r = base("a").scan(30, Modality::Mri).scan(30, Modality::Pet).diagnosis(1800, Diagnosis::Mci);
        assert_eq!(select_cohort(&[r], 10).unwrap(), vec![("a".to_string(), 1)]);
    }

    #[test]
    fn late_scan_excluded() {
        let r = base("a").scan(400, Modality::Mri).scan(400, Modality::Pet).diagnosis(1800, Diagnosis::Mci);
        assert!(select_cohort(&[r], 10).unwrap().is_empty());
    }

    #[test]
    fn stable_needs_late_cn() {
        let scans = |r: SubjectRecord| r.scan(10, Modality::Mri).scan(200, Modality::Pet);
        let stable = scans(base("s")).diagnosis(3652, Diagnosis::Cn);
        let short = scans(base("t")).diagnosis(3000, Diagnosis::Cn);
        let late_conv = scans(base("u")).diagnosis(4000, Diagnosis::Ad);
        let out = select_cohort(&[stable, short, late_conv], 10).unwrap();
        assert_eq!(out, vec![("s".to_string(), 0)]);
    }

    #[test]
    fn missing_baseline_is_error() {
        let r = SubjectRecord::new("a").diagnosis(5, Diagnosis::Cn);
        assert!(matches!(select_cohort(&[r], 10), Err(Error::Validation(_))));
    }

    #[test]
    fn records_round_trip() {
        let r = base("a").scan(30, Modality::Mri).scan(31, Modality::Pet).diagnosis(1800, Diagnosis::Ad);
        let back = parse_records(&format_records(std::slice::from_ref(&r)), Path::new("r")).unwrap();
        assert_eq!(back, vec![r]);
        assert!(parse_records("a\tDX\tx\tCN\n", Path::new("r")).is_err());
        assert!(parse_records("a\tFOO\t1\tCN\n", Path::new("r")).is_err());
    }
}
