//! Confusion counts, classification metrics and the greedy parameter sweep.

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Confusion { tp, fp, fn_, tn }
    }

    pub fn from_pairs(predicted: &[Label], truth: &[Label]) -> Self {
        let mut c = Confusion::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            c.record(p, t);
        }
        c
    }

    pub fn record(&mut self, predicted: Label, truth: Label) {
        match (truth, predicted) {
            (Label::Positive, Label::Positive) => self.tp += 1,
            (Label::Negative, Label::Positive) => self.fp += 1,
            (Label::Positive, Label::Negative) => self.fn_ += 1,
            (Label::Negative, Label::Negative) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&self, other: &Confusion) -> Confusion {
        Confusion::new(self.tp + other.tp, self.fp + other.fp, self.fn_ + other.fn_, self.tn + other.tn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a precision, recall or F1 denominator was zero and the
    /// value was reported as 0.
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(c: &Confusion) -> Result<MetricsReport> {
    let total = c.total();
    if total == 0 {
        return Err(Error::InvalidArgument("metrics of an empty confusion matrix".into()));
    }
    let mut degenerate = false;
    let accuracy = (c.tp + c.tn) as f64 / total as f64;
    let precision = ratio(c.tp, c.tp + c.fp, &mut degenerate);
    let recall = ratio(c.tp, c.tp + c.fn_, &mut degenerate);
    // Harmonic mean of precision and recall, rearranged to a single
    // division of counts so the result is correctly rounded.
    let f1 = if c.tp > 0 {
        (2 * c.tp) as f64 / (2 * c.tp + c.fp + c.fn_) as f64
    } else {
        degenerate = true;
        0.0
    };
    Ok(MetricsReport {
        accuracy,
        precision,
        recall,
        f1,
        degenerate,
    })
}

/// 2×2 table with true labels as rows and predictions as columns, as text
/// and CSV.
pub fn confusion_render(c: &Confusion) -> (String, String) {
    let w = [c.tp, c.fp, c.fn_, c.tn].iter().map(|v| v.to_string().len()).max().unwrap_or(1).max(3);
    let text = format!(
        "true\\pred {:>w$} {:>w$}\npos: {:>w$} {:>w$}\nneg: {:>w$} {:>w$}\n",
        "pos", "neg", c.tp, c.fn_, c.fp, c.tn
    );
    let csv = format!("true,pred_pos,pred_neg\npos,{},{}\nneg,{},{}\n", c.tp, c.fn_, c.fp, c.tn);
    (text, csv)
}

/// Inverse of the CSV half of [`confusion_render`].
pub fn parse_confusion_csv(s: &str) -> Result<Confusion> {
    let bad = || Error::InvalidArgument(format!("not a confusion CSV: {s:?}"));
    let mut rdr = csv::Reader::from_reader(s.as_bytes());
    let mut rows = Vec::new();
    for r in rdr.records() {
        let r = r.map_err(|_| bad())?;
        let nums: Vec<u64> = r.iter().skip(1).map(|v| v.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        rows.push((r[0].to_string(), nums));
    }
    match rows.as_slice() {
        [(p, a), (n, b)] if p == "pos" && n == "neg" && a.len() == 2 && b.len() == 2 => {
            Ok(Confusion::new(a[0], b[0], a[1], b[1]))
        }
        _ => Err(bad()),
    }
}

/// Tunable dimensions of the pipeline and topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Square kernel size K (K×K).
    Kernel,
    Blocks,
    Frames,
    Window,
    Filters,
    Hop,
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "kernel" | "k" => Axis::Kernel,
            "blocks" | "b" => Axis::Blocks,
            "frames" | "f" => Axis::Frames,
            "window" | "w" => Axis::Window,
            "filters" | "p" => Axis::Filters,
            "hop" | "h" => Axis::Hop,
            other => return Err(format!("unknown sweep axis {other:?}")),
        })
    }
}

/// One point of the sweep space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPoint {
    pub kernel: usize,
    pub blocks: usize,
    pub frames: usize,
    pub window: usize,
    pub filters: usize,
    pub hop: usize,
}

impl Default for SweepPoint {
    fn default() -> Self {
        SweepPoint {
            kernel: 5,
            blocks: 5,
            frames: 60,
            window: 1024,
            filters: 32,
            hop: 256,
        }
    }
}

impl SweepPoint {
    pub fn get(&self, axis: Axis) -> usize {
        match axis {
            Axis::Kernel => self.kernel,
            Axis::Blocks => self.blocks,
            Axis::Frames => self.frames,
            Axis::Window => self.window,
            Axis::Filters => self.filters,
            Axis::Hop => self.hop,
        }
    }

    pub fn with(mut self, axis: Axis, v: usize) -> Self {
        *match axis {
            Axis::Kernel => &mut self.kernel,
            Axis::Blocks => &mut self.blocks,
            Axis::Frames => &mut self.frames,
            Axis::Window => &mut self.window,
            Axis::Filters => &mut self.filters,
            Axis::Hop => &mut self.hop,
        } = v;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisCandidates {
    pub axis: Axis,
    pub values: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPlan {
    pub baseline: SweepPoint,
    /// Processed in order; each axis is fixed at its best value before the next.
    pub axes: Vec<AxisCandidates>,
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::Config("sweep plan has no axes".into()));
        }
        for a in &self.axes {
            if a.values.len() < 2 {
                return Err(Error::Config(format!("sweep axis {:?} needs >= 2 candidates", a.axis)));
            }
        }
        Ok(())
    }
}

/// What a sweep run reports for one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepScore {
    /// Mean metrics across folds.
    pub metrics: MetricsReport,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub axis: Axis,
    pub point: SweepPoint,
    pub score: SweepScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepLog {
    pub records: Vec<SweepRecord>,
    pub best: SweepPoint,
}

/// Greedy coordinate search: best by F1, ties to fewer parameters, then to
/// the first-listed candidate.
pub fn greedy_sweep<F>(plan: &SweepPlan, mut run: F) -> Result<SweepLog>
where
    F: FnMut(&SweepPoint) -> Result<SweepScore>,
{
    plan.validate()?;
    let mut current = plan.baseline;
    let mut records = Vec::new();
    for a in &plan.axes {
        let mut best: Option<(usize, SweepScore)> = None;
        for &v in &a.values {
            let point = current.with(a.axis, v);
            let score = run(&point)?;
            records.push(SweepRecord {
                axis: a.axis,
                point,
                score,
            });
            let better = match best {
                None => true,
                Some((_, b)) => {
                    score.metrics.f1 > b.metrics.f1 || (score.metrics.f1 == b.metrics.f1 && score.params < b.params)
                }
            };
            if better {
                best = Some((v, score));
            }
        }
        current = current.with(a.axis, best.expect("validated non-empty axis").0);
    }
    Ok(SweepLog { records, best: current })
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        if values.is_empty() {
            return Stat { mean: 0.0, std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Stat { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub accuracy: Stat,
    pub precision: Stat,
    pub recall: Stat,
    pub f1: Stat,
}

impl MetricStats {
    pub fn of(reports: &[MetricsReport]) -> Self {
        let col = |f: fn(&MetricsReport) -> f64| Stat::of(&reports.iter().map(f).collect::<Vec<_>>());
        MetricStats {
            accuracy: col(|m| m.accuracy),
            precision: col(|m| m.precision),
            recall: col(|m| m.recall),
            f1: col(|m| m.f1),
        }
    }

    /// Means as a report, for ranking.
    pub fn mean(&self) -> MetricsReport {
        MetricsReport {
            accuracy: self.accuracy.mean,
            precision: self.precision.mean,
            recall: self.recall.mean,
            f1: self.f1.mean,
            degenerate: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let m = metrics(&Confusion::new(3, 1, 1, 5)).unwrap();
        assert!((m.accuracy - 0.8).abs() < 1e-12);
        assert!((m.precision - 0.75).abs() < 1e-12);
        assert!((m.recall - 0.75).abs() < 1e-12);
        assert!((m.f1 - 0.75).abs() < 1e-12);
        assert!(!m.degenerate);
    }

    #[test]
    fn perfect_and_degenerate() {
        let m = metrics(&Confusion::new(4, 0, 0, 6)).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
        let d = metrics(&Confusion::new(0, 0, 2, 3)).unwrap();
        assert_eq!(d.precision, 0.0);
        assert!(d.degenerate);
        assert!(metrics(&Confusion::default()).is_err());
    }

    #[test]
    fn render_layout() {
        let (text, csv) = confusion_render(&Confusion::new(3, 1, 1, 5));
        let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split_whitespace().collect()).collect();
        assert_eq!(rows, vec![vec!["pos:", "3", "1"], vec!["neg:", "1", "5"]]);
        assert_eq!(parse_confusion_csv(&csv).unwrap(), Confusion::new(3, 1, 1, 5));
        let (t, _) = confusion_render(&Confusion::new(0, 0, 0, 7));
        assert!(t.contains("pos:   0   0") && t.contains("neg:   0   7"));
    }

    #[test]
    fn sweep_count_and_path() {
        let plan = SweepPlan {
            baseline: SweepPoint::default(),
            axes: vec![
                AxisCandidates { axis: Axis::Kernel, values: vec![3, 5] },
                AxisCandidates { axis: Axis::Blocks, values: vec![4, 5] },
            ],
        };
        let mut n = 0;
        let log = greedy_sweep(&plan, |p| {
            n += 1;
            let f1 = if p.kernel == 3 && p.blocks == 4 { 1.0 } else { 0.5 };
            Ok(SweepScore {
                metrics: MetricsReport { accuracy: f1, precision: f1, recall: f1, f1, degenerate: false },
                params: p.kernel * p.blocks,
            })
        })
        .unwrap();
        assert_eq!(n, 4);
        assert_eq!(log.records.len(), 4);
        assert_eq!((log.best.kernel, log.best.blocks), (3, 4));
    }

    #[test]
    fn sweep_ties_prefer_smaller_model() {
        let plan = SweepPlan {
            baseline: SweepPoint::default(),
            axes: vec![AxisCandidates { axis: Axis::Filters, values: vec![64, 16, 32] }],
        };
        let log = greedy_sweep(&plan, |p| {
            Ok(SweepScore {
                metrics: MetricsReport { accuracy: 0.9, precision: 0.9, recall: 0.9, f1: 0.9, degenerate: false },
                params: p.filters,
            })
        })
        .unwrap();
        assert_eq!(log.best.filters, 16);
    }
}
