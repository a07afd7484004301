//! Text renderings of metrics: `key = value` reports and comma-separated
//! tables. Numbers use Rust's shortest round-trip formatting so rendered
//! bytes are a pure function of the values.

use super::metrics::{BinStat, ClassificationMetrics, DensityReport, ParamError};
use crate::pdvfn::Target;

pub fn render_regression(rows: &[(Target, ParamError)]) -> String {
    let mut s = String::new();
    for (t, e) in rows {
        s.push_str(&format!("{t}.mu = {}\n{t}.sigma = {}\n{t}.mae = {}\n", e.mu, e.sigma, e.mae));
    }
    s
}

pub fn render_classification(m: &ClassificationMetrics) -> String {
    let mut s = format!("auc = {}\nf1 = {}\ng_mean = {}\nmcc = {}\n", m.auc, m.f1, m.g_mean, m.mcc);
    if let Some(w) = m.warning() {
        s.push_str(&format!("# warning: {w}\n"));
    }
    s
}

pub fn confusion_csv(m: &ClassificationMetrics) -> String {
    let mut s = String::from("true\\predicted,nmp,cemp,cnmp\n");
    for (name, row) in ["nmp", "cemp", "cnmp"].iter().zip(&m.confusion) {
        s.push_str(&format!("{name},{},{},{}\n", row[0], row[1], row[2]));
    }
    s
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// `lo,hi,count,mean`; empty bins leave `mean` blank.
pub fn bins_csv(bins: &[BinStat]) -> String {
    let mut s = String::from("lo,hi,count,mean\n");
    for b in bins {
        s.push_str(&format!("{},{},{},{}\n", b.lo, b.hi, b.count, opt(b.mean)));
    }
    s
}

pub fn density_csv(r: &DensityReport) -> String {
    let mut s = String::from("x_lo,x_hi,y_lo,y_hi,count,mean_error\n");
    for c in &r.cells {
        s.push_str(&format!("{},{},{},{},{},{}\n", c.x.0, c.x.1, c.y.0, c.y.1, c.count, opt(c.mean_error)));
    }
    s
}

/// `lo,hi,count,fraction` histogram of `values` over `edges` (last bin
/// closed). Values outside the edges are not counted.
pub fn histogram_csv(values: &[f64], edges: &[f64]) -> String {
    let last = edges.len() - 1;
    let mut s = String::from("lo,hi,count,fraction\n");
    for i in 0..last {
        let (lo, hi) = (edges[i], edges[i + 1]);
        let count = values.iter().filter(|&&v| v >= lo && (v < hi || (i + 1 == last && v == hi))).count();
        s.push_str(&format!("{lo},{hi},{count},{}\n", count as f64 / values.len().max(1) as f64));
    }
    s
}
