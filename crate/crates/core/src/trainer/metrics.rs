//! Confusion counts, the six clinical metrics, and fold averaging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Positive = cancer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Tallies one prediction; `truth`/`predicted` are "is positive".
    pub fn record(&mut self, truth: bool, predicted: bool) {
        match (truth, predicted) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
        }
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// `None` marks a metric whose denominator was zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: Option<f64>,
    pub spe: Option<f64>,
    pub sen: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub f1: Option<f64>,
}

pub const METRIC_NAMES: [&str; 6] = ["acc", "spe", "sen", "ppv", "npv", "f1"];

impl MetricsReport {
    pub fn values(&self) -> [Option<f64>; 6] {
        [self.acc, self.spe, self.sen, self.ppv, self.npv, self.f1]
    }

    fn from_values(v: [Option<f64>; 6]) -> Self {
        Self {
            acc: v[0],
            spe: v[1],
            sen: v[2],
            ppv: v[3],
            npv: v[4],
            f1: v[5],
        }
    }
}

pub fn compute_metrics(c: &ConfusionCounts) -> Result<MetricsReport> {
    if c.total() == 0 {
        return Err(Error::Data("no evaluated samples".into()));
    }
    let sen = ratio(c.tp, c.tp + c.fn_);
    let ppv = ratio(c.tp, c.tp + c.fp);
    let f1 = match (ppv, sen) {
        (Some(p), Some(s)) if p + s > 0.0 => Some(2.0 * p * s / (p + s)),
        _ => None,
    };
    Ok(MetricsReport {
        acc: c.accuracy(),
        spe: ratio(c.tn, c.tn + c.fp),
        sen,
        ppv,
        npv: ratio(c.tn, c.tn + c.fn_),
        f1,
    })
}

/// Mean over reports of each defined metric, with the number of reports in
/// which that metric was undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: MetricsReport,
    pub excluded: [usize; 6],
}

pub fn average(reports: &[MetricsReport]) -> Result<MetricSummary> {
    if reports.is_empty() {
        return Err(Error::Data("nothing to aggregate".into()));
    }
    let mut mean = [None; 6];
    let mut excluded = [0; 6];
    for i in 0..6 {
        let defined: Vec<f64> = reports.iter().filter_map(|r| r.values()[i]).collect();
        excluded[i] = reports.len() - defined.len();
        if !defined.is_empty() {
            mean[i] = Some(defined.iter().sum::<f64>() / defined.len() as f64);
        }
    }
    Ok(MetricSummary {
        mean: MetricsReport::from_values(mean),
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Option<f64>, b: f64) -> bool {
        a.is_some_and(|a| (a - b).abs() < 1e-6)
    }

    #[test]
    fn worked_counts() {
        let m = compute_metrics(&ConfusionCounts { tp: 90, fn_: 10, tn: 95, fp: 5 }).unwrap();
        assert!(close(m.sen, 0.9));
        assert!(close(m.spe, 0.95));
        assert!(close(m.acc, 0.925));
        assert!(close(m.ppv, 90.0 / 95.0));
        assert!(close(m.npv, 95.0 / 105.0));
        assert!(close(m.f1, 0.923077));
    }

    #[test]
    fn all_correct() {
        let m = compute_metrics(&ConfusionCounts { tp: 4, tn: 6, fp: 0, fn_: 0 }).unwrap();
        assert!(m.values().iter().all(|v| *v == Some(1.0)));
    }

    #[test]
    fn zero_denominator_is_isolated() {
        let m = compute_metrics(&ConfusionCounts { tp: 0, fp: 0, tn: 5, fn_: 3 }).unwrap();
        assert_eq!(m.ppv, None);
        assert_eq!(m.f1, None);
        assert!(m.acc.is_some() && m.spe.is_some() && m.sen.is_some() && m.npv.is_some());
        assert!(compute_metrics(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn averaging() {
        let base = compute_metrics(&ConfusionCounts { tp: 9, fn_: 1, tn: 9, fp: 1 }).unwrap();
        let s = average(&[base; 5]).unwrap();
        assert_eq!(s.mean, base);
        let a = MetricsReport { acc: Some(0.9), ..base };
        let b = MetricsReport { acc: Some(1.0), ..base };
        assert!(close(average(&[a, b]).unwrap().mean.acc, 0.95));
        let mut reps = vec![base; 5];
        reps[2].ppv = None;
        let s = average(&reps).unwrap();
        assert_eq!(s.excluded[3], 1);
        assert_eq!(s.mean.ppv, base.ppv);
        assert!(average(&[]).is_err());
    }

    #[test]
    fn json_uses_fn_key_and_null() {
        let c = ConfusionCounts { tp: 1, tn: 2, fp: 3, fn_: 4 };
        assert_eq!(serde_json::to_string(&c).unwrap(), r#"{"tp":1,"tn":2,"fp":3,"fn":4}"#);
        let m = compute_metrics(&ConfusionCounts { tp: 0, fp: 0, tn: 1, fn_: 1 }).unwrap();
        assert!(serde_json::to_string(&m).unwrap().contains(r#""ppv":null"#));
    }
}
