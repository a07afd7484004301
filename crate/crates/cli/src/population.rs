//! Per-sample evaluation results (`population.tsv`) and the binned tables
//! derived from them.
//!
//! Columns are `id split snr fe_h c_fe` followed by, for regression,
//! `<t>.true <t>.pred <t>.sigma` per target and, for classification,
//! `class predicted logit.nmp logit.cemp logit.cnmp`.

use anyhow::{bail, Result};
use weaksig::catalog::Split;
use weaksig::pdvfn::Target;
use weaksig::train_eval::metrics::{
    density_binned_report, log_edges, linear_edges, snr_binned_report, BinStat, DensityReport,
};

pub const POPULATION_FILE: &str = "population.tsv";

/// Lower and upper ends of the default SNR binning.
pub const SNR_SPAN: (f64, f64) = (5.0, 300.0);
pub const SNR_BINS: usize = 6;
/// Histogram edges for the SNR distribution table.
pub const SNR_HISTOGRAM_EDGES: [f64; 5] = [5.0, 20.0, 50.0, 100.0, 300.0];

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    /// One entry per target: truth, prediction, predicted σ.
    Regression { targets: Vec<Target>, truth: Vec<Vec<f64>>, pred: Vec<Vec<f64>>, sigma: Vec<Vec<f64>> },
    Classification { class: Vec<usize>, predicted: Vec<usize>, logits: Vec<[f64; 3]> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    pub ids: Vec<usize>,
    pub splits: Vec<Split>,
    pub snr: Vec<f64>,
    pub fe_h: Vec<f64>,
    pub c_fe: Vec<f64>,
    pub outcome: Outcome,
}

impl Population {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Per-parameter error columns: signed residuals for regression, a 0/1
    /// miss indicator for classification.
    pub fn error_columns(&self) -> Vec<(String, Vec<f64>)> {
        match &self.outcome {
            Outcome::Regression { targets, truth, pred, .. } => targets
                .iter()
                .enumerate()
                .map(|(j, t)| (t.to_string(), pred[j].iter().zip(&truth[j]).map(|(p, y)| p - y).collect()))
                .collect(),
            Outcome::Classification { class, predicted, .. } => vec![(
                "class".to_string(),
                class.iter().zip(predicted).map(|(c, p)| if c == p { 0.0 } else { 1.0 }).collect(),
            )],
        }
    }

    /// The error tracked against SNR: [Fe/H] when it was a target,
    /// otherwise the first column.
    pub fn primary_error(&self) -> (String, Vec<f64>) {
        let cols = self.error_columns();
        let i = cols.iter().position(|(n, _)| n == Target::FeH.as_str()).unwrap_or(0);
        let (name, col) = cols.into_iter().nth(i).expect("at least one error column");
        (name, col.into_iter().map(f64::abs).collect())
    }

    pub fn render(&self) -> String {
        let mut header = vec!["id".to_string(), "split".into(), "snr".into(), "fe_h".into(), "c_fe".into()];
        match &self.outcome {
            Outcome::Regression { targets, .. } => {
                for t in targets {
                    header.extend([format!("{t}.true"), format!("{t}.pred"), format!("{t}.sigma")]);
                }
            }
            Outcome::Classification { .. } => {
                header.extend(["class", "predicted", "logit.nmp", "logit.cemp", "logit.cnmp"].map(String::from));
            }
        }
        let mut s = header.join("\t");
        s.push('\n');
        for i in 0..self.len() {
            let mut row = vec![
                self.ids[i].to_string(),
                self.splits[i].to_string(),
                self.snr[i].to_string(),
                self.fe_h[i].to_string(),
                self.c_fe[i].to_string(),
            ];
            match &self.outcome {
                Outcome::Regression { truth, pred, sigma, .. } => {
                    for j in 0..truth.len() {
                        row.extend([truth[j][i].to_string(), pred[j][i].to_string(), sigma[j][i].to_string()]);
                    }
                }
                Outcome::Classification { class, predicted, logits } => {
                    row.extend([class[i].to_string(), predicted[i].to_string()]);
                    row.extend(logits[i].iter().map(|v| v.to_string()));
                }
            }
            s.push_str(&row.join("\t"));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let bad = |what: String| -> anyhow::Error { weaksig::Error::Integrity(format!("{source}: {what}")).into() };
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty file".into()))?.split('\t').collect();
        if header.len() < 5 || header[..5] != ["id", "split", "snr", "fe_h", "c_fe"] {
            return Err(bad("unexpected column header".into()));
        }
        let extra = &header[5..];
        let classification = extra == ["class", "predicted", "logit.nmp", "logit.cemp", "logit.cnmp"];
        let targets: Vec<Target> = if classification {
            Vec::new()
        } else {
            if extra.is_empty() || extra.len() % 3 != 0 {
                return Err(bad("unrecognised outcome columns".into()));
            }
            let mut ts = Vec::new();
            for c in extra.chunks(3) {
                let name = c[0].strip_suffix(".true").ok_or_else(|| bad(format!("unexpected column {}", c[0])))?;
                if c[1] != format!("{name}.pred") || c[2] != format!("{name}.sigma") {
                    return Err(bad(format!("columns for {name} out of order")));
                }
                ts.push(Target::parse(name)?);
            }
            ts
        };
        let k = targets.len();
        let mut p = Population {
            ids: Vec::new(),
            splits: Vec::new(),
            snr: Vec::new(),
            fe_h: Vec::new(),
            c_fe: Vec::new(),
            outcome: if classification {
                Outcome::Classification { class: Vec::new(), predicted: Vec::new(), logits: Vec::new() }
            } else {
                Outcome::Regression { targets, truth: vec![Vec::new(); k], pred: vec![Vec::new(); k], sigma: vec![Vec::new(); k] }
            },
        };
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != header.len() {
                return Err(bad(format!("row {} has {} fields, expected {}", n + 1, f.len(), header.len())));
            }
            let num = |i: usize| -> Result<f64> {
                f[i].parse().map_err(|_| bad(format!("row {}: bad {} {:?}", n + 1, header[i], f[i])))
            };
            let int = |i: usize| -> Result<usize> {
                f[i].parse().map_err(|_| bad(format!("row {}: bad {} {:?}", n + 1, header[i], f[i])))
            };
            p.ids.push(int(0)?);
            p.splits.push(Split::parse(f[1])?);
            p.snr.push(num(2)?);
            p.fe_h.push(num(3)?);
            p.c_fe.push(num(4)?);
            match &mut p.outcome {
                Outcome::Regression { truth, pred, sigma, .. } => {
                    for j in 0..k {
                        truth[j].push(num(5 + 3 * j)?);
                        pred[j].push(num(6 + 3 * j)?);
                        sigma[j].push(num(7 + 3 * j)?);
                    }
                }
                Outcome::Classification { class, predicted, logits } => {
                    class.push(int(5)?);
                    predicted.push(int(6)?);
                    logits.push([num(7)?, num(8)?, num(9)?]);
                }
            }
        }
        if p.is_empty() {
            bail!(weaksig::Error::Validation(format!("{source}: no samples")));
        }
        Ok(p)
    }
}

/// Log-spaced SNR edges covering [`SNR_SPAN`] and every observed SNR.
pub fn snr_edges(snr: &[f64]) -> Vec<f64> {
    let lo = snr.iter().copied().fold(SNR_SPAN.0, f64::min);
    let hi = snr.iter().copied().fold(SNR_SPAN.1, f64::max);
    log_edges(lo, hi, SNR_BINS)
}

/// `[Fe/H]` edges of the density grid, in dex.
pub fn fe_h_edges() -> Vec<f64> {
    linear_edges(-4.0, 0.5, 9)
}

/// `[C/Fe]` edges of the density grid, in dex.
pub fn c_fe_edges() -> Vec<f64> {
    linear_edges(-1.0, 3.0, 8)
}

/// Mean absolute primary error per SNR bin.
pub fn snr_table(p: &Population) -> Result<Vec<BinStat>> {
    let (_, err) = p.primary_error();
    Ok(snr_binned_report(&err, &p.snr, &snr_edges(&p.snr))?)
}

/// Occupancy and mean normalised error on the ([Fe/H], [C/Fe]) grid.
pub fn density_table(p: &Population) -> Result<DensityReport> {
    let errors: Vec<Vec<f64>> = p.error_columns().into_iter().map(|(_, e)| e).collect();
    Ok(density_binned_report(&errors, &p.fe_h, &p.c_fe, &fe_h_edges(), &c_fe_edges())?)
}

/// Heat grid of one cell quantity: header row of `[C/Fe]` bin centres,
/// then one row per `[Fe/H]` bin starting with its centre. Cells without
/// a value stay empty.
pub fn heat_grid_csv(r: &DensityReport, value: impl Fn(&weaksig::train_eval::metrics::DensityCell) -> Option<f64>) -> String {
    let (xe, ye) = (fe_h_edges(), c_fe_edges());
    let ny = ye.len() - 1;
    let mut s = String::from("fe_h\\c_fe");
    for w in ye.windows(2) {
        s.push_str(&format!(",{}", 0.5 * (w[0] + w[1])));
    }
    s.push('\n');
    for (ix, w) in xe.windows(2).enumerate() {
        s.push_str(&(0.5 * (w[0] + w[1])).to_string());
        for iy in 0..ny {
            let cell = &r.cells[ix * ny + iy];
            s.push(',');
            if let Some(v) = value(cell) {
                s.push_str(&v.to_string());
            }
        }
        s.push('\n');
    }
    s
}
