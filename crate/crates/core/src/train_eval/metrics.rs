//! Evaluation metrics and binned error reports.

use crate::error::{validation, Result};

pub const N_CLASSES: usize = 3;

/// Error statistics of `pred − truth` for one parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamError {
    pub mu: f64,
    /// Population standard deviation.
    pub sigma: f64,
    pub mae: f64,
}

pub fn regression_metrics(pred: &[f64], truth: &[f64]) -> Result<ParamError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(validation(format!("regression metrics need equal non-empty inputs, got {} and {}", pred.len(), truth.len())));
    }
    let n = pred.len() as f64;
    let diffs: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p - t).collect();
    let mu = diffs.iter().sum::<f64>() / n;
    let sigma = (diffs.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / n).sqrt();
    let mae = diffs.iter().map(|d| d.abs()).sum::<f64>() / n;
    Ok(ParamError { mu, sigma, mae })
}

/// `counts[t][p]`: samples of true class `t` predicted as `p`.
pub type Confusion = [[u64; N_CLASSES]; N_CLASSES];

pub fn confusion_matrix(predicted: &[usize], targets: &[usize]) -> Result<Confusion> {
    if predicted.len() != targets.len() {
        return Err(validation("confusion matrix needs one prediction per target"));
    }
    let mut c = [[0u64; N_CLASSES]; N_CLASSES];
    for (&p, &t) in predicted.iter().zip(targets) {
        if p >= N_CLASSES || t >= N_CLASSES {
            return Err(validation(format!("class index out of range: predicted {p}, target {t}")));
        }
        c[t][p] += 1;
    }
    Ok(c)
}

/// Multiclass MCC from a confusion matrix:
/// `(c·s − Σ p_k t_k) / sqrt((s² − Σ p_k²)(s² − Σ t_k²))`, with `c` the
/// trace, `s` the total, `p_k`/`t_k` predicted/true counts. Zero when a
/// factor of the denominator vanishes.
pub fn mcc(c: &Confusion) -> f64 {
    let s: f64 = c.iter().flatten().map(|&v| v as f64).sum();
    let correct: f64 = (0..N_CLASSES).map(|k| c[k][k] as f64).sum();
    let t: Vec<f64> = (0..N_CLASSES).map(|k| c[k].iter().sum::<u64>() as f64).collect();
    let p: Vec<f64> = (0..N_CLASSES).map(|k| (0..N_CLASSES).map(|r| c[r][k]).sum::<u64>() as f64).collect();
    let cov = correct * s - p.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>();
    let dp = s * s - p.iter().map(|v| v * v).sum::<f64>();
    let dt = s * s - t.iter().map(|v| v * v).sum::<f64>();
    if dp <= 0.0 || dt <= 0.0 {
        0.0
    } else {
        cov / (dp * dt).sqrt()
    }
}

/// Area under the ROC curve via the rank-sum statistic, tied scores
/// receiving their average rank. `None` unless both groups are present.
pub fn rank_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 || scores.len() != positive.len() {
        return None;
    }
    let ranks = average_ranks(scores);
    let pos_rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Some((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// 1-based ranks with ties averaged.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation with average ranks; `None` when either input is
/// constant or shorter than two.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationMetrics {
    /// Macro one-vs-rest rank AUC over classes present in the targets.
    pub auc: f64,
    pub f1: f64,
    /// Geometric mean of the recalls of the present classes.
    pub g_mean: f64,
    pub mcc: f64,
    pub confusion: Confusion,
    /// Classes without support, left out of the macro averages.
    pub excluded: Vec<usize>,
}

impl ClassificationMetrics {
    pub fn warning(&self) -> Option<String> {
        (!self.excluded.is_empty()).then(|| format!("classes {:?} have no support and were excluded", self.excluded))
    }
}

pub fn argmax_rows(scores: &[f64], width: usize) -> Vec<usize> {
    scores
        .chunks(width)
        .map(|row| {
            row.iter().enumerate().fold(0, |best, (i, v)| if *v > row[best] { i } else { best })
        })
        .collect()
}

/// `scores` is row-major `[n, 3]` (logits or probabilities); the predicted
/// class is the row argmax.
pub fn classification_metrics(scores: &[f64], targets: &[usize]) -> Result<ClassificationMetrics> {
    if targets.is_empty() || scores.len() != targets.len() * N_CLASSES {
        return Err(validation(format!("{} scores for {} targets of {N_CLASSES} classes", scores.len(), targets.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(validation("non-finite classification scores"));
    }
    let predicted = argmax_rows(scores, N_CLASSES);
    let confusion = confusion_matrix(&predicted, targets)?;
    let support: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
    let present: Vec<usize> = (0..N_CLASSES).filter(|&k| support[k] > 0).collect();
    let excluded = (0..N_CLASSES).filter(|&k| support[k] == 0).collect();

    let mut auc = 0.0;
    let mut f1 = 0.0;
    let mut log_recall = 0.0;
    let mut zero_recall = false;
    for &k in &present {
        let col: Vec<f64> = scores.chunks(N_CLASSES).map(|r| r[k]).collect();
        let pos: Vec<bool> = targets.iter().map(|&t| t == k).collect();
        // a single present class has no negatives; its AUC is undefined
        auc += rank_auc(&col, &pos).unwrap_or(0.5);
        let tp = confusion[k][k] as f64;
        let fp = (0..N_CLASSES).filter(|&r| r != k).map(|r| confusion[r][k]).sum::<u64>() as f64;
        let fn_ = support[k] as f64 - tp;
        if 2.0 * tp + fp + fn_ > 0.0 {
            f1 += 2.0 * tp / (2.0 * tp + fp + fn_);
        }
        let recall = tp / support[k] as f64;
        if recall == 0.0 {
            zero_recall = true;
        } else {
            log_recall += recall.ln();
        }
    }
    let m = present.len() as f64;
    Ok(ClassificationMetrics {
        auc: auc / m,
        f1: f1 / m,
        g_mean: if zero_recall { 0.0 } else { (log_recall / m).exp() },
        mcc: mcc(&confusion),
        confusion,
        excluded,
    })
}

/// Samples falling in one bin of a 1-D report.
#[derive(Clone, Debug, PartialEq)]
pub struct BinStat {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub mean: Option<f64>,
}

impl BinStat {
    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Index of the bin `[edges[i], edges[i+1])` holding `x`; the last bin is
/// closed on the right.
fn bin_index(edges: &[f64], x: f64) -> Option<usize> {
    let last = edges.len() - 1;
    if !(x >= edges[0] && x <= edges[last]) {
        return None;
    }
    Some(edges.partition_point(|&e| e <= x).clamp(1, last) - 1)
}

fn check_edges(edges: &[f64], what: &str) -> Result<()> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(validation(format!("{what} edges must be at least two strictly increasing values")));
    }
    Ok(())
}

/// Mean of `values` per SNR bin. Every SNR must fall inside the edges.
pub fn snr_binned_report(values: &[f64], snrs: &[f64], edges: &[f64]) -> Result<Vec<BinStat>> {
    check_edges(edges, "SNR bin")?;
    if values.len() != snrs.len() {
        return Err(validation("one SNR per value required"));
    }
    let mut sums = vec![(0usize, 0.0f64); edges.len() - 1];
    for (&v, &s) in values.iter().zip(snrs) {
        let b = bin_index(edges, s)
            .ok_or_else(|| validation(format!("SNR {s} outside bin edges {}..{}", edges[0], edges[edges.len() - 1])))?;
        sums[b].0 += 1;
        sums[b].1 += v;
    }
    Ok(sums
        .iter()
        .enumerate()
        .map(|(i, &(count, sum))| BinStat {
            lo: edges[i],
            hi: edges[i + 1],
            count,
            mean: (count > 0).then(|| sum / count as f64),
        })
        .collect())
}

/// `n + 1` edges splitting `[lo, hi]` evenly.
pub fn linear_edges(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

/// `n + 1` edges splitting `[lo, hi]` evenly in log space.
pub fn log_edges(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..=n).map(|i| (a + (b - a) * i as f64 / n as f64).exp()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityCell {
    pub ix: usize,
    pub iy: usize,
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub count: usize,
    pub mean_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityReport {
    /// Row-major over `(ix, iy)`.
    pub cells: Vec<DensityCell>,
    /// Samples outside the grid.
    pub outside: usize,
}

/// Per-sample normalised absolute error sum: each parameter's `|error|`
/// divided by the population std of that parameter's errors, summed over
/// parameters. A parameter whose errors have zero spread is left
/// unscaled.
pub fn normalized_error_sum(errors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = errors.first().map_or(0, Vec::len);
    if n == 0 || errors.iter().any(|e| e.len() != n) {
        return Err(validation("error columns must be non-empty and of equal length"));
    }
    let mut out = vec![0.0; n];
    for col in errors {
        let mean = col.iter().sum::<f64>() / n as f64;
        let sd = (col.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n as f64).sqrt();
        let scale = if sd > 0.0 { sd } else { 1.0 };
        for (o, e) in out.iter_mut().zip(col) {
            *o += e.abs() / scale;
        }
    }
    Ok(out)
}

/// Occupancy and mean normalised error on the grid `x_edges × y_edges`.
/// `errors` holds one column per parameter.
pub fn density_binned_report(
    errors: &[Vec<f64>],
    x: &[f64],
    y: &[f64],
    x_edges: &[f64],
    y_edges: &[f64],
) -> Result<DensityReport> {
    check_edges(x_edges, "density x")?;
    check_edges(y_edges, "density y")?;
    let score = normalized_error_sum(errors)?;
    if x.len() != score.len() || y.len() != score.len() {
        return Err(validation("one coordinate pair per sample required"));
    }
    let (nx, ny) = (x_edges.len() - 1, y_edges.len() - 1);
    let mut acc = vec![(0usize, 0.0f64); nx * ny];
    let mut outside = 0;
    for i in 0..score.len() {
        match (bin_index(x_edges, x[i]), bin_index(y_edges, y[i])) {
            (Some(a), Some(b)) => {
                acc[a * ny + b].0 += 1;
                acc[a * ny + b].1 += score[i];
            }
            _ => outside += 1,
        }
    }
    let cells = acc
        .iter()
        .enumerate()
        .map(|(k, &(count, sum))| {
            let (ix, iy) = (k / ny, k % ny);
            DensityCell {
                ix,
                iy,
                x: (x_edges[ix], x_edges[ix + 1]),
                y: (y_edges[iy], y_edges[iy + 1]),
                count,
                mean_error: (count > 0).then(|| sum / count as f64),
            }
        })
        .collect();
    Ok(DensityReport { cells, outside })
}

/// Spearman ρ between occupied-cell counts and their mean errors.
pub fn density_error_correlation(report: &DensityReport) -> Option<f64> {
    let (c, e): (Vec<f64>, Vec<f64>) =
        report.cells.iter().filter_map(|c| c.mean_error.map(|e| (c.count as f64, e))).unzip();
    spearman(&c, &e)
}

/// Spearman ρ between bin centres and bin means over non-empty bins.
pub fn snr_trend(bins: &[BinStat]) -> Option<f64> {
    let (c, m): (Vec<f64>, Vec<f64>) = bins.iter().filter_map(|b| b.mean.map(|m| (b.center(), m))).unzip();
    spearman(&c, &m)
}
