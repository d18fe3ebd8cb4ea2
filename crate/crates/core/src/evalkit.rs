//! Recognition metrics and evaluation reports.

use std::fmt::Write;

use crate::corpus::Dataset;
use crate::error::{FanError, Result};
use crate::model::FanModel;
use crate::rfgeom::Center;

/// Unit-cost edit distance over characters.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = (diag + usize::from(ca != cb)).min(up + 1).min(row[j] + 1);
            diag = up;
        }
    }
    row[b.len()]
}

/// `levenshtein(pred, gt) / |gt|`.
pub fn ned(pred: &str, gt: &str) -> Result<f64> {
    let n = gt.chars().count();
    if n == 0 {
        return Err(FanError::invalid("normalized edit distance against an empty ground truth"));
    }
    Ok(levenshtein(pred, gt) as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub enum DecodeMode {
    Free,
    Lexicon(Vec<String>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub prediction: String,
    pub truth: String,
    pub ned: f64,
    /// Greedy-path attention centers, 0-indexed pixels.
    pub centers: Vec<Center>,
    /// Distances from each center to its character's box center over the
    /// common prefix; empty for unannotated samples.
    pub center_errors: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub count: usize,
    pub accuracy: f64,
    pub total_ned: f64,
    /// Mean over all annotated characters measured, if any.
    pub mean_center_error: Option<f64>,
    pub records: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn from_records(records: Vec<SampleRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(FanError::invalid("evaluation over an empty dataset"));
        }
        let count = records.len();
        let correct = records.iter().filter(|r| r.prediction == r.truth).count();
        let total_ned = records.iter().map(|r| r.ned).sum();
        let errs: Vec<f64> = records.iter().flat_map(|r| r.center_errors.iter().copied()).collect();
        let mean_center_error = (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64);
        Ok(EvalReport {
            count,
            accuracy: correct as f64 / count as f64,
            total_ned,
            mean_center_error,
            records,
        })
    }

    /// `metric=value` lines.
    pub fn metric_lines(&self) -> String {
        let mut s = format!(
            "samples={}\naccuracy={:.6}\ntotal_ned={:.6}\n",
            self.count, self.accuracy, self.total_ned
        );
        if let Some(e) = self.mean_center_error {
            let _ = writeln!(s, "mean_center_error={e:.6}");
        }
        s
    }

    /// Per-sample table followed by the totals.
    pub fn table(&self) -> String {
        let mut s = format!("{:>6}  {:<12} {:<12} {:>6}  {:>8}\n", "#", "truth", "prediction", "ned", "c_err");
        for (i, r) in self.records.iter().enumerate() {
            let cerr = if r.center_errors.is_empty() {
                "-".to_string()
            } else {
                format!("{:.2}", r.center_errors.iter().sum::<f64>() / r.center_errors.len() as f64)
            };
            let _ = writeln!(s, "{i:>6}  {:<12} {:<12} {:>6.3}  {cerr:>8}", r.truth, r.prediction, r.ned);
        }
        s.push_str(&self.metric_lines());
        s
    }
}

/// Decode every sample and aggregate. Center errors always come from the
/// greedy path, also in lexicon mode.
pub fn evaluate(model: &FanModel, data: &Dataset, mode: &DecodeMode) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(FanError::invalid("evaluation over an empty dataset"));
    }
    if let DecodeMode::Lexicon(words) = mode {
        if words.is_empty() {
            return Err(FanError::invalid("empty lexicon"));
        }
    }
    let mut records = Vec::with_capacity(data.len());
    for s in &data.samples {
        let truth = s.text.to_ascii_uppercase();
        let greedy = model.recognize(&s.image)?;
        let prediction = match mode {
            DecodeMode::Free => greedy.text.clone(),
            DecodeMode::Lexicon(words) => model.recognize_lexicon(&s.image, words)?.0,
        };
        let center_errors = match &s.boxes {
            Some(boxes) => greedy
                .centers
                .iter()
                .zip(boxes)
                .map(|(c, b)| c.distance(&b.center()))
                .collect(),
            None => Vec::new(),
        };
        records.push(SampleRecord {
            ned: ned(&prediction, &truth)?,
            prediction,
            truth,
            centers: greedy.centers,
            center_errors,
        });
    }
    EvalReport::from_records(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_examples() {
        assert_eq!(levenshtein("ABC", "ABC"), 0);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("831K", "83KM"), 2);
        assert_eq!(ned("831K", "83KM").unwrap(), 0.5);
        assert_eq!(ned("", "ABCD").unwrap(), 1.0);
        assert!(ned("A", "").is_err());
    }

    fn rec(p: &str, t: &str) -> SampleRecord {
        SampleRecord {
            prediction: p.into(),
            truth: t.into(),
            ned: ned(p, t).unwrap(),
            centers: vec![],
            center_errors: vec![],
        }
    }

    #[test]
    fn report_totals() {
        let r = EvalReport::from_records(vec![rec("ABCD", "ABCD"), rec("ABCE", "ABCD"), rec("WXYZ", "WXYZ")]).unwrap();
        assert_eq!(r.total_ned, 0.25);
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.mean_center_error, None);
        assert!(r.metric_lines().contains("total_ned=0.250000"));
        assert!(!r.metric_lines().contains("mean_center_error"));
        assert!(EvalReport::from_records(vec![]).is_err());
    }
}
