//! Pixel-wise detection and segmentation metrics, per-slice aggregation and
//! two-sample comparisons between methods.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::io::write_atomic;

/// One-vs-rest pixel counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    /// False negatives.
    pub fn_: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    /// `2 tp / (2 tp + fp + fn)`; undefined when both masks are empty.
    pub fn dice(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            precision: self.precision(),
            sensitivity: self.sensitivity(),
            specificity: self.specificity(),
            accuracy: self.accuracy(),
            dice: self.dice(),
        }
    }
}

/// `None` marks a 0/0 cell.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
    pub dice: Option<f64>,
}

pub const METRIC_NAMES: [&str; 5] = ["precision", "sensitivity", "specificity", "accuracy", "dice"];

impl Metrics {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "precision" => self.precision,
            "sensitivity" => self.sensitivity,
            "specificity" => self.specificity,
            "accuracy" => self.accuracy,
            "dice" => self.dice,
            _ => None,
        }
    }
}

pub fn confusion_masks(pred: &[bool], truth: &[bool]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Counts for `class` against all other labels.
pub fn confusion(pred: &[u8], truth: &[u8], class: u8) -> Result<ConfusionCounts> {
    let p: Vec<bool> = pred.iter().map(|&l| l == class).collect();
    let t: Vec<bool> = truth.iter().map(|&l| l == class).collect();
    confusion_masks(&p, &t)
}

/// Dice of two equally sized masks, `None` when both are empty.
///
/// # Panics
/// When the masks differ in length.
pub fn dice_masks(a: &[bool], b: &[bool]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "dice of masks with different sizes");
    confusion_masks(a, b).expect("lengths checked").dice()
}

/// Every nonzero class collapsed into one foreground class.
pub fn foreground_aggregate(pred: &[u8], truth: &[u8]) -> Result<(ConfusionCounts, Option<f64>)> {
    let p: Vec<bool> = pred.iter().map(|&l| l != 0).collect();
    let t: Vec<bool> = truth.iter().map(|&l| l != 0).collect();
    let c = confusion_masks(&p, &t)?;
    Ok((c, c.dice()))
}

/// Rows of a report: the three ROIs, the collapsed foreground and "other".
/// Dice is not reported for "other".
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Roi {
    Class(u8),
    Foreground,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoiSpec {
    pub name: String,
    pub roi: Roi,
    pub with_dice: bool,
}

/// ROI rows for class names indexed by label (index 0 is "other").
pub fn default_rois(class_names: &[&str]) -> Vec<RoiSpec> {
    let mut rows: Vec<RoiSpec> = (1..class_names.len())
        .map(|c| RoiSpec {
            name: class_names[c].to_string(),
            roi: Roi::Class(c as u8),
            with_dice: true,
        })
        .collect();
    rows.push(RoiSpec {
        name: "foreground".into(),
        roi: Roi::Foreground,
        with_dice: true,
    });
    rows.push(RoiSpec {
        name: class_names[0].to_string(),
        roi: Roi::Class(0),
        with_dice: false,
    });
    rows
}

pub fn roi_metrics(pred: &[u8], truth: &[u8], roi: Roi) -> Result<Metrics> {
    let c = match roi {
        Roi::Class(k) => confusion(pred, truth, k)?,
        Roi::Foreground => foreground_aggregate(pred, truth)?.0,
    };
    Ok(c.metrics())
}

/// Mean and sample standard deviation over the defined values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
    pub undefined: usize,
}

pub fn summarize(values: &[Option<f64>]) -> Summary {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    let n = defined.len();
    let mean = (n > 0).then(|| defined.iter().sum::<f64>() / n as f64);
    let std = mean.map(|m| {
        if n < 2 {
            0.0
        } else {
            (defined.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        }
    });
    Summary {
        mean,
        std,
        n,
        undefined: values.len() - n,
    }
}

/// Per-slice metric values of one method on one test set.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub method: String,
    pub rois: Vec<RoiSpec>,
    /// `(roi name, metric)` to one value per slice.
    pub per_slice: BTreeMap<(String, String), Vec<Option<f64>>>,
}

impl MetricsReport {
    pub fn new(method: impl Into<String>, rois: Vec<RoiSpec>) -> Self {
        MetricsReport {
            method: method.into(),
            rois,
            per_slice: BTreeMap::new(),
        }
    }

    /// Adds one slice given predicted and true label maps.
    pub fn add_slice(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        for spec in &self.rois {
            let m = roi_metrics(pred, truth, spec.roi)?;
            for name in METRIC_NAMES {
                if name == "dice" && !spec.with_dice {
                    continue;
                }
                self.per_slice
                    .entry((spec.name.clone(), name.to_string()))
                    .or_default()
                    .push(m.get(name));
            }
        }
        Ok(())
    }

    /// Appends all slices of `other` (same method and ROIs), e.g. to pool folds.
    pub fn extend(&mut self, other: &MetricsReport) {
        for (k, v) in &other.per_slice {
            self.per_slice.entry(k.clone()).or_default().extend(v);
        }
    }

    pub fn values(&self, roi: &str, metric: &str) -> &[Option<f64>] {
        self.per_slice
            .get(&(roi.to_string(), metric.to_string()))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn summary(&self, roi: &str, metric: &str) -> Summary {
        summarize(self.values(roi, metric))
    }

    pub fn mean(&self, roi: &str, metric: &str) -> Option<f64> {
        self.summary(roi, metric).mean
    }

    /// `(roi, metric)` pairs in report order.
    pub fn rows(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for spec in &self.rois {
            for name in METRIC_NAMES {
                if name == "dice" && !spec.with_dice {
                    continue;
                }
                out.push((spec.name.clone(), name.to_string()));
            }
        }
        out
    }
}

/// Two-sample t-test with pooled variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    /// Pooled variance was zero; `p` is 1 for equal means and 0 otherwise.
    pub degenerate: bool,
}

/// Two-sided two-sample t-test (pooled variance) between per-slice values.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Contract(format!(
            "t-test needs at least two values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let ss = |x: &[f64], m: f64| x.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let df = na + nb - 2.0;
    let pooled = (ss(a, ma) + ss(b, mb)) / df;
    let se = (pooled * (1.0 / na + 1.0 / nb)).sqrt();
    let diff = ma - mb;
    if !(se > 0.0) {
        let equal = diff == 0.0;
        return Ok(TTest {
            t: if equal { 0.0 } else { diff.signum() * f64::INFINITY },
            df,
            p_value: if equal { 1.0 } else { 0.0 },
            degenerate: true,
        });
    }
    let t = diff / se;
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    let p_value = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTest {
        t,
        df,
        p_value,
        degenerate: false,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub const METRICS_HEADER: &str = "method,roi,metric,mean,std,n,undefined_count";
pub const COMPARISONS_HEADER: &str = "method_a,method_b,roi,metric,p_value";

pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in reports {
        for (roi, metric) in r.rows() {
            let s = r.summary(&roi, &metric);
            writeln!(
                out,
                "{},{roi},{metric},{},{},{},{}",
                r.method,
                fmt_opt(s.mean),
                fmt_opt(s.std),
                s.n,
                s.undefined
            )
            .unwrap();
        }
    }
    out
}

/// Pairwise t-tests between every pair of reports on every shared row.
/// Rows where either side has fewer than two defined values get an empty
/// p-value.
pub fn comparisons_csv(reports: &[MetricsReport]) -> String {
    let mut out = format!("{COMPARISONS_HEADER}\n");
    for (i, a) in reports.iter().enumerate() {
        for b in &reports[i + 1..] {
            for (roi, metric) in a.rows() {
                let va: Vec<f64> = a.values(&roi, &metric).iter().flatten().copied().collect();
                let vb: Vec<f64> = b.values(&roi, &metric).iter().flatten().copied().collect();
                let p = paired_ttest(&va, &vb).ok().map(|t| t.p_value);
                writeln!(out, "{},{},{roi},{metric},{}", a.method, b.method, fmt_opt(p)).unwrap();
            }
        }
    }
    out
}

pub fn write_reports(dir: &Path, reports: &[MetricsReport]) -> Result<()> {
    write_atomic(&dir.join("metrics.csv"), metrics_csv(reports).as_bytes())?;
    write_atomic(&dir.join("comparisons.csv"), comparisons_csv(reports).as_bytes())
}
