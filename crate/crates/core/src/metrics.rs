//! Accuracy, MAE, Cohen's kappa, one-vs-rest rates, micro averages and ROC
//! curves over ordinal level predictions.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

/// `K×K` counts, rows are ground truth and columns predictions. Levels are
/// 1-based everywhere outside this struct.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    levels: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_counts(levels: usize, counts: Vec<u64>) -> Result<Self> {
        if levels == 0 || counts.len() != levels * levels {
            return Err(Error::invalid(format!(
                "{} counts do not form a {levels}×{levels} matrix",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { levels, counts })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[(truth - 1) * self.levels + pred - 1]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (1..=self.levels).map(|j| self.get(j, j)).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (1..=self.levels).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (1..=self.levels).map(|t| self.get(t, pred)).sum()
    }

    /// Rows as CSV with a `truth\pred` header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("truth\\pred");
        for p in 1..=self.levels {
            let _ = write!(out, ",{p}");
        }
        out.push('\n');
        for t in 1..=self.levels {
            let _ = write!(out, "{t}");
            for p in 1..=self.levels {
                let _ = write!(out, ",{}", self.get(t, p));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion(y_true: &[usize], y_pred: &[usize], levels: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::invalid(format!(
            "{} truths against {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::from_counts(levels, vec![0; levels * levels])?;
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if !(1..=levels).contains(&t) || !(1..=levels).contains(&p) {
            return Err(Error::invalid(format!("label pair ({t}, {p}) outside 1..={levels}")));
        }
        cm.counts[(t - 1) * levels + p - 1] += 1;
    }
    Ok(cm)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("accuracy of an empty confusion matrix"));
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// Mean absolute rank error.
pub fn mae(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return Err(Error::invalid("mae needs two non-empty label lists of equal length"));
    }
    let sum: usize = y_true.iter().zip(y_pred).map(|(&a, &b)| a.abs_diff(b)).sum();
    Ok(sum as f64 / y_true.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: u64,
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

/// Recall, specificity, precision and negative predictive value. `None`
/// marks a zero denominator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Rates {
    pub re: Option<f64>,
    pub sp: Option<f64>,
    pub pr: Option<f64>,
    pub npv: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl Counts {
    pub fn rates(&self) -> Rates {
        Rates {
            re: ratio(self.tp, self.tp + self.fn_),
            sp: ratio(self.tn, self.tn + self.fp),
            pr: ratio(self.tp, self.tp + self.fp),
            npv: ratio(self.tn, self.tn + self.fn_),
        }
    }
}

/// Level `level` against every other level.
pub fn one_vs_rest(cm: &ConfusionMatrix, level: usize) -> Counts {
    let tp = cm.get(level, level);
    let fn_ = cm.row_sum(level) - tp;
    let fp = cm.col_sum(level) - tp;
    Counts {
        tp,
        fn_,
        fp,
        tn: cm.total() - tp - fn_ - fp,
    }
}

/// Pools the one-vs-rest counts of every level, returning `(Re, Sp)`.
pub fn micro_average(cm: &ConfusionMatrix) -> (Option<f64>, Option<f64>) {
    let mut pooled = Counts::default();
    for j in 1..=cm.levels() {
        let c = one_vs_rest(cm, j);
        pooled.tp += c.tp;
        pooled.fn_ += c.fn_;
        pooled.fp += c.fp;
        pooled.tn += c.tn;
    }
    let r = pooled.rates();
    (r.re, r.sp)
}

pub fn kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total() as f64;
    if total == 0.0 {
        return Err(Error::invalid("kappa of an empty confusion matrix"));
    }
    let po = cm.trace() as f64 / total;
    let pe = (1..=cm.levels())
        .map(|j| cm.row_sum(j) as f64 * cm.col_sum(j) as f64)
        .sum::<f64>()
        / (total * total);
    if pe == 1.0 {
        return Ok(if po == 1.0 { 1.0 } else { 0.0 });
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Hand-computed kappa values: `(levels, row-major counts, kappa)`.
pub const KAPPA_FIXTURES: &[(usize, &[u64], f64)] = &[
    // p_o = 0.5, p_e = 0.5.
    (2, &[1, 1, 1, 1], 0.0),
    (3, &[2, 0, 0, 0, 3, 0, 0, 0, 1], 1.0),
    // p_o = 0.7, p_e = (25·30 + 25·20) / 50² = 0.5.
    (2, &[20, 5, 10, 15], 0.4),
    // p_o = 14/20, p_e = (6·7 + 10·8 + 4·5) / 20² = 0.355.
    (3, &[5, 1, 0, 2, 6, 2, 0, 1, 3], 23.0 / 43.0),
    // Everything in one cell: p_e = p_o = 1.
    (2, &[4, 0, 0, 0], 1.0),
    // Systematic disagreement: p_o = 0, p_e = 0.5.
    (2, &[0, 3, 3, 0], -1.0),
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Roc {
    /// `(fpr, tpr)` from `(0,0)` to `(1,1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Sweeps a threshold through every gap between distinct scores, so tied
/// scores move together, and integrates the curve with the trapezoid rule.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<Roc> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("roc_auc"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("roc needs at least one positive and one negative"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();
    Ok(Roc { points, auc })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub mae: f64,
    pub kappa: f64,
    pub levels: Vec<Rates>,
    /// One entry per level; `None` when the level is absent or universal.
    pub roc: Vec<Option<Roc>>,
    #[serde(skip)]
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    /// `scores[i][j]` is the score of sample `i` for level `j + 1`.
    pub fn compute(y_true: &[usize], y_pred: &[usize], scores: &[Vec<f64>], levels: usize) -> Result<Self> {
        let cm = confusion(y_true, y_pred, levels)?;
        if scores.len() != y_true.len() || scores.iter().any(|s| s.len() != levels) {
            return Err(Error::invalid("one score per level and sample expected"));
        }
        let roc = (1..=levels)
            .map(|j| {
                let labels: Vec<bool> = y_true.iter().map(|&t| t == j).collect();
                let s: Vec<f64> = scores.iter().map(|row| row[j - 1]).collect();
                roc_auc(&s, &labels).ok()
            })
            .collect();
        Ok(MetricsReport {
            acc: accuracy(&cm)?,
            mae: mae(y_true, y_pred)?,
            kappa: kappa(&cm)?,
            levels: (1..=levels).map(|j| one_vs_rest(&cm, j).rates()).collect(),
            roc,
            confusion: cm,
        })
    }

    /// `level,fpr,tpr` rows, one block per level.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("level,fpr,tpr\n");
        for (j, roc) in self.roc.iter().enumerate() {
            for (fpr, tpr) in roc.iter().flat_map(|r| &r.points) {
                let _ = writeln!(out, "{},{fpr},{tpr}", j + 1);
            }
        }
        out
    }
}
