//! Confusion matrices, exact-rational classification metrics and curve
//! export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::trainer::{EpochRecord, Stage, TrainHistory};

/// Two-class outcome counts relative to a positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    /// Index of the positive class.
    pub positive: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// The same outcomes seen with the other class as positive.
    pub fn swapped(&self) -> Self {
        ConfusionMatrix {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
            positive: 1 - self.positive,
        }
    }
}

/// Counts outcomes of two-class predictions; `positive` is a class index.
pub fn confusion(predictions: &[usize], labels: &[usize], positive: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if positive > 1 {
        return Err(Error::Validation(format!("positive class {positive} is not 0 or 1")));
    }
    let mut cm = ConfusionMatrix {
        positive,
        ..Default::default()
    };
    for (&p, &y) in predictions.iter().zip(labels) {
        if p > 1 || y > 1 {
            return Err(Error::Validation(format!("class index {} outside the two-class set", p.max(y))));
        }
        match (p == positive, y == positive) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

/// A rational metric. Undefined values (zero denominator) hold the sentinel 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Metric {
    pub value: Ratio<u64>,
    pub defined: bool,
}

impl Metric {
    fn ratio(num: u64, den: u64) -> Self {
        if den == 0 {
            Metric::undefined()
        } else {
            Metric {
                value: Ratio::new(num, den),
                defined: true,
            }
        }
    }

    fn undefined() -> Self {
        Metric {
            value: Ratio::from_integer(0),
            defined: false,
        }
    }

    /// F1 as `2tp/(2tp+fp+fn)`, which is the harmonic mean of precision and
    /// recall whenever both are defined and not both zero.
    fn f1(cm: &ConfusionMatrix, p: Metric, r: Metric) -> Self {
        if !p.defined || !r.defined || cm.tp == 0 {
            return Metric::undefined();
        }
        Metric::ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_)
    }

    fn mean(a: Metric, b: Metric) -> Self {
        Metric {
            value: (a.value + b.value) / 2,
            defined: a.defined && b.defined,
        }
    }

    pub fn to_f64(&self) -> f64 {
        *self.value.numer() as f64 / *self.value.denom() as f64
    }

    /// Decimal rendering, rounded half up at `digits` places.
    pub fn rounded(&self, digits: u32) -> String {
        round_ratio(&self.value, digits)
    }
}

/// Exact decimal rounding (half away from zero) of a non-negative rational.
pub fn round_ratio(r: &Ratio<u64>, digits: u32) -> String {
    let scale = 10u128.pow(digits);
    let (n, d) = (*r.numer() as u128, *r.denom() as u128);
    let scaled = (2 * n * scale + d) / (2 * d);
    let int = scaled / scale;
    if digits == 0 {
        return int.to_string();
    }
    format!("{int}.{:0width$}", scaled % scale, width = digits as usize)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: Metric,
    pub recall: Metric,
    pub f1: Metric,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: Metric,
    /// Positive-class precision, recall and F1.
    pub precision: Metric,
    pub recall: Metric,
    pub f1: Metric,
    pub macro_precision: Metric,
    pub macro_recall: Metric,
    pub macro_f1: Metric,
    /// Indexed by class.
    pub per_class: [ClassMetrics; 2],
}

fn class_metrics(cm: &ConfusionMatrix) -> ClassMetrics {
    let precision = Metric::ratio(cm.tp, cm.tp + cm.fp);
    let recall = Metric::ratio(cm.tp, cm.tp + cm.fn_);
    ClassMetrics {
        class: cm.positive,
        precision,
        recall,
        f1: Metric::f1(cm, precision, recall),
        support: cm.tp + cm.fn_,
    }
}

pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> MetricsReport {
    let pos = class_metrics(cm);
    let neg = class_metrics(&cm.swapped());
    let mut per_class = [pos, neg];
    per_class.sort_by_key(|c| c.class);
    MetricsReport {
        confusion: *cm,
        accuracy: Metric::ratio(cm.tp + cm.tn, cm.total()),
        precision: pos.precision,
        recall: pos.recall,
        f1: pos.f1,
        macro_precision: Metric::mean(pos.precision, neg.precision),
        macro_recall: Metric::mean(pos.recall, neg.recall),
        macro_f1: Metric::mean(pos.f1, neg.f1),
        per_class,
    }
}

fn metric_json(m: &Metric) -> serde_json::Value {
    json!({
        "exact": format!("{}/{}", m.value.numer(), m.value.denom()),
        "value": m.rounded(4),
        "defined": m.defined,
    })
}

impl MetricsReport {
    /// Structured report: counts, metrics at 4 decimals and the 2-decimal
    /// table view. `classes` names the class indices.
    pub fn to_json(&self, classes: &[String]) -> serde_json::Value {
        let name = |i: usize| classes.get(i).cloned().unwrap_or_else(|| i.to_string());
        let cm = &self.confusion;
        json!({
            "positive_class": name(cm.positive),
            "counts": {"tp": cm.tp, "fp": cm.fp, "fn": cm.fn_, "tn": cm.tn, "total": cm.total()},
            "metrics": {
                "accuracy": metric_json(&self.accuracy),
                "precision": metric_json(&self.precision),
                "recall": metric_json(&self.recall),
                "f1": metric_json(&self.f1),
            },
            "macro": {
                "precision": metric_json(&self.macro_precision),
                "recall": metric_json(&self.macro_recall),
                "f1": metric_json(&self.macro_f1),
            },
            "per_class": self.per_class.iter().map(|c| json!({
                "class": name(c.class),
                "precision": metric_json(&c.precision),
                "recall": metric_json(&c.recall),
                "f1": metric_json(&c.f1),
                "support": c.support,
            })).collect::<Vec<_>>(),
            "table": {
                "accuracy": self.accuracy.rounded(2),
                "precision": self.precision.rounded(2),
                "recall": self.recall.rounded(2),
                "f1": self.f1.rounded(2),
            },
        })
    }

    pub fn to_text(&self, classes: &[String]) -> String {
        let cm = &self.confusion;
        let name = |i: usize| classes.get(i).map(String::as_str).unwrap_or("?");
        let flag = |m: &Metric| if m.defined { "" } else { " (undefined)" };
        let mut s = String::new();
        let _ = writeln!(s, "positive class: {}", name(cm.positive));
        let _ = writeln!(s, "tp {}  fp {}  fn {}  tn {}  (n = {})", cm.tp, cm.fp, cm.fn_, cm.tn, cm.total());
        for (label, m) in [
            ("accuracy", &self.accuracy),
            ("precision", &self.precision),
            ("recall", &self.recall),
            ("f1", &self.f1),
        ] {
            let _ = writeln!(s, "{label:<10} {}  [{}]{}", m.rounded(4), m.rounded(2), flag(m));
        }
        let _ = writeln!(
            s,
            "macro      precision {}  recall {}  f1 {}",
            self.macro_precision.rounded(4),
            self.macro_recall.rounded(4),
            self.macro_f1.rounded(4)
        );
        s
    }

    pub fn write(&self, classes: &[String], path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_json(classes))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

pub const CURVES_BEFORE: &str = "curves_before_fine_tuning";
pub const CURVES_AFTER: &str = "curves_after_fine_tuning";
const CSV_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,seconds";

fn stage_file(stage: Stage) -> &'static str {
    match stage {
        Stage::Head => CURVES_BEFORE,
        Stage::FineTune => CURVES_AFTER,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes one CSV per non-empty stage (before / after fine-tuning) and, if
/// `plot` is set, a PNG rendering of each. Returns the files written.
pub fn export_curves(history: &TrainHistory, dir: impl AsRef<Path>, plot: bool) -> Result<Vec<PathBuf>> {
    if history.is_empty() {
        return Err(Error::Validation("cannot export curves of an empty history".into()));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for stage in [Stage::Head, Stage::FineTune] {
        let rows: Vec<&EpochRecord> = history.stage(stage).collect();
        if rows.is_empty() {
            continue;
        }
        let mut csv = String::from(CSV_HEADER);
        csv.push('\n');
        for r in &rows {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{}",
                r.epoch,
                r.train_loss,
                r.train_acc,
                opt(r.val_loss),
                opt(r.val_acc),
                r.seconds
            );
        }
        let path = dir.join(format!("{}.csv", stage_file(stage)));
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        if plot {
            let path = dir.join(format!("{}.png", stage_file(stage)));
            render_plot(&rows, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

fn parse_csv(text: &str, stage: Stage, path: &Path) -> Result<Vec<EpochRecord>> {
    let bad = |line: usize, what: &str| Error::Format(format!("{}:{line}: {what}", path.display()));
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(i + 2, "expected 6 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 2, "bad number"));
        let opt_num = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        out.push(EpochRecord {
            epoch: f[0].parse().map_err(|_| bad(i + 2, "bad epoch"))?,
            stage,
            train_loss: num(f[1])?,
            train_acc: num(f[2])?,
            val_loss: opt_num(f[3])?,
            val_acc: opt_num(f[4])?,
            seconds: num(f[5])?,
        });
    }
    Ok(out)
}

/// Reads back the CSV files written by [`export_curves`].
pub fn read_curves(dir: impl AsRef<Path>) -> Result<TrainHistory> {
    let dir = dir.as_ref();
    let mut records = Vec::new();
    for stage in [Stage::Head, Stage::FineTune] {
        let path = dir.join(format!("{}.csv", stage_file(stage)));
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            records.extend(parse_csv(&text, stage, &path)?);
        }
    }
    Ok(TrainHistory { records })
}

const PLOT_W: u32 = 320;
const PLOT_H: u32 = 240;
const MARGIN: i64 = 20;

fn draw_line(img: &mut image::RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let x = x0 + (x1 - x0) * s / steps;
        let y = y0 + (y1 - y0) * s / steps;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
    }
}

fn draw_panel(img: &mut image::RgbImage, x_off: i64, series: &[Vec<Option<f64>>]) {
    let w = PLOT_W as i64 - 2 * MARGIN;
    let h = PLOT_H as i64 - 2 * MARGIN;
    let axis = [90, 90, 90];
    draw_line(img, (x_off + MARGIN, MARGIN), (x_off + MARGIN, MARGIN + h), axis);
    draw_line(img, (x_off + MARGIN, MARGIN + h), (x_off + MARGIN + w, MARGIN + h), axis);
    let values: Vec<f64> = series.iter().flatten().flatten().copied().filter(|v| v.is_finite()).collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() {
        return;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let colors = [[31, 119, 180], [255, 127, 14]];
    for (s, color) in series.iter().zip(colors) {
        let n = s.len().max(2) as i64 - 1;
        let pt = |i: usize, v: f64| (x_off + MARGIN + w * i as i64 / n, MARGIN + h - ((v - lo) / span * h as f64) as i64);
        let pts: Vec<(usize, f64)> = s
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.filter(|v| v.is_finite()).map(|v| (i, v)))
            .collect();
        for win in pts.windows(2) {
            draw_line(img, pt(win[0].0, win[0].1), pt(win[1].0, win[1].1), color);
        }
        if let [(i, v)] = pts[..] {
            let (x, y) = pt(i, v);
            draw_line(img, (x - 2, y), (x + 2, y), color);
        }
    }
}

/// Accuracy (left) and loss (right); blue is training, orange validation.
fn render_plot(rows: &[&EpochRecord], path: &Path) -> Result<()> {
    let mut img = image::RgbImage::from_pixel(2 * PLOT_W, PLOT_H, image::Rgb([255, 255, 255]));
    let acc = [
        rows.iter().map(|r| Some(r.train_acc)).collect(),
        rows.iter().map(|r| r.val_acc).collect(),
    ];
    let loss = [
        rows.iter().map(|r| Some(r.train_loss)).collect(),
        rows.iter().map(|r| r.val_loss).collect(),
    ];
    draw_panel(&mut img, 0, &acc);
    draw_panel(&mut img, PLOT_W as i64, &loss);
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}
