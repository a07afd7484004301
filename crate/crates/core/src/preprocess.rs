//! The five-step spectrum pipeline: rest-frame correction, resampling onto
//! a shared log-wavelength grid, median filtering, polynomial continuum
//! normalisation, and a single 3σ clip followed by z-scoring.

use nalgebra::{DMatrix, DVector};

use crate::error::{stage, validation, Result};
use crate::kv::KvMap;
use crate::spectra_synth::{RawSpectrum, C_KM_S, RV_RANGE};

/// Log-wavelength grid: node `i` sits at `ln λ = log_start + i · step`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogGrid {
    pub log_start: f64,
    pub step: f64,
    pub len: usize,
}

impl LogGrid {
    /// `len` nodes spanning `[λ_min, λ_max]`, both ends included.
    pub fn spanning(lambda_min: f64, lambda_max: f64, len: usize) -> Self {
        let log_start = lambda_min.ln();
        Self { log_start, step: (lambda_max.ln() - log_start) / (len - 1) as f64, len }
    }

    pub fn log_nodes(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.log_start + self.step * i as f64).collect()
    }

    pub fn wavelengths(&self) -> Vec<f64> {
        self.log_nodes().into_iter().map(f64::exp).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedSpectrum {
    pub values: Vec<f64>,
    pub log_grid: LogGrid,
    pub id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineConfig {
    pub target_length: usize,
    pub median_window: usize,
    pub continuum_degree: usize,
    pub clip_k: f64,
    /// Rest-frame interval shared by every spectrum, in Å.
    pub common_range: (f64, f64),
}

/// Rest-frame interval covered by every spectrum observed on
/// `[obs_min, obs_max]` with `|rv| <= max_rv`.
pub fn common_rest_range(obs_min: f64, obs_max: f64, max_rv: f64) -> (f64, f64) {
    let b = max_rv / C_KM_S;
    (obs_min / (1.0 - b), obs_max / (1.0 + b))
}

impl Default for PipelineConfig {
    /// The range is that of the default generator grid (3800–9100 Å) after
    /// the largest admissible Doppler shift.
    fn default() -> Self {
        Self {
            target_length: 3450,
            median_window: 3,
            continuum_degree: 5,
            clip_k: 3.0,
            common_range: common_rest_range(3800.0, 9100.0, RV_RANGE.1),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.median_window % 2 == 0 {
            return Err(validation(format!("median_window must be odd, got {}", self.median_window)));
        }
        if !(self.clip_k > 0.0) {
            return Err(validation(format!("clip_k must be positive, got {}", self.clip_k)));
        }
        if self.target_length < 2 || self.target_length <= self.continuum_degree {
            return Err(validation(format!(
                "target_length {} must exceed continuum_degree {} and be at least 2",
                self.target_length, self.continuum_degree
            )));
        }
        let (a, b) = self.common_range;
        if !(a > 0.0 && b > a && b.is_finite()) {
            return Err(validation(format!("invalid common_range ({a}, {b})")));
        }
        Ok(())
    }

    pub fn log_grid(&self) -> LogGrid {
        LogGrid::spanning(self.common_range.0, self.common_range.1, self.target_length)
    }

    /// Keys: `target_length`, `median_window`, `continuum_degree`, `clip_k`,
    /// `common_range` (`min,max` in Å).
    pub fn from_kv(mut kv: KvMap) -> Result<Self> {
        let d = Self::default();
        let range: Vec<f64> = kv.take_list("common_range", vec![d.common_range.0, d.common_range.1])?;
        if range.len() != 2 {
            return Err(validation("common_range needs two values"));
        }
        let cfg = Self {
            target_length: kv.take("target_length", d.target_length)?,
            median_window: kv.take("median_window", d.median_window)?,
            continuum_degree: kv.take("continuum_degree", d.continuum_degree)?,
            clip_k: kv.take("clip_k", d.clip_k)?,
            common_range: (range[0], range[1]),
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("target_length".into(), self.target_length.to_string()),
            ("median_window".into(), self.median_window.to_string()),
            ("continuum_degree".into(), self.continuum_degree.to_string()),
            ("clip_k".into(), self.clip_k.to_string()),
            ("common_range".into(), format!("{},{}", self.common_range.0, self.common_range.1)),
        ]
    }
}

/// `λ' = λ / (1 + rv / c)`.
pub fn rest_frame_correct(wavelengths: &[f64], rv: f64) -> Result<Vec<f64>> {
    if !(rv.abs() < C_KM_S) {
        return Err(validation(format!("|rv| = {} km/s is not below c", rv.abs())));
    }
    if wavelengths.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(validation("wavelengths must be strictly increasing"));
    }
    let f = 1.0 + rv / C_KM_S;
    Ok(wavelengths.iter().map(|l| l / f).collect())
}

/// Linear interpolation in `ln λ` onto `cfg.log_grid()`.
pub fn log_resample(wavelengths: &[f64], fluxes: &[f64], cfg: &PipelineConfig) -> Result<(LogGrid, Vec<f64>)> {
    if wavelengths.len() != fluxes.len() || wavelengths.len() < 2 {
        return Err(validation("log_resample needs matching arrays with at least 2 points"));
    }
    let grid = cfg.log_grid();
    let nodes = grid.log_nodes();
    let xs: Vec<f64> = wavelengths.iter().map(|l| l.ln()).collect();
    let (first, last) = (xs[0], xs[xs.len() - 1]);
    // tolerance of a few ulps in ln λ for inputs that end exactly on the range
    const SLACK: f64 = 1e-12;
    if first > nodes[0] + SLACK || last < nodes[nodes.len() - 1] - SLACK {
        return Err(validation(format!(
            "input covers {:.3}-{:.3} Å but the common range is {:.3}-{:.3} Å",
            wavelengths[0],
            wavelengths[wavelengths.len() - 1],
            cfg.common_range.0,
            cfg.common_range.1
        )));
    }
    let mut out = Vec::with_capacity(nodes.len());
    let mut j = 0;
    for &x in &nodes {
        // advance to the segment [xs[j], xs[j + 1]] containing x
        while j + 2 < xs.len() && xs[j + 1] < x {
            j += 1;
        }
        let (x0, x1) = (xs[j], xs[j + 1]);
        let t = (x - x0) / (x1 - x0);
        out.push(fluxes[j] + t * (fluxes[j + 1] - fluxes[j]));
    }
    Ok((grid, out))
}

/// Running median with edge replication.
pub fn median_filter(values: &[f64], window: usize) -> Result<Vec<f64>> {
    if window % 2 == 0 {
        return Err(validation(format!("median window must be odd, got {window}")));
    }
    if window > values.len() {
        return Err(validation(format!("median window {window} exceeds length {}", values.len())));
    }
    let half = window / 2;
    let n = values.len();
    let at = |i: isize| values[i.clamp(0, n as isize - 1) as usize];
    let mut buf = vec![0.0; window];
    Ok((0..n as isize)
        .map(|i| {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = at(i - half as isize + k as isize);
            }
            *buf.select_nth_unstable_by(half, f64::total_cmp).1
        })
        .collect())
}

/// Abscissa of the polynomial fit: node index mapped linearly to [-1, 1].
pub fn fit_abscissa(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![0.0];
    }
    (0..len).map(|i| -1.0 + 2.0 * i as f64 / (len - 1) as f64).collect()
}

/// Least-squares polynomial of `degree` through `values` on
/// [`fit_abscissa`], evaluated at the nodes. Solved by QR.
pub fn polynomial_fit(values: &[f64], degree: usize) -> Result<Vec<f64>> {
    let n = values.len();
    if n <= degree {
        return Err(validation(format!("{n} points cannot determine a degree-{degree} polynomial")));
    }
    let x = fit_abscissa(n);
    let vander = DMatrix::from_fn(n, degree + 1, |i, j| x[i].powi(j as i32));
    let qr = vander.clone().qr();
    let qtb = qr.q().transpose() * DVector::from_column_slice(values);
    let coef = qr
        .r()
        .solve_upper_triangular(&qtb)
        .ok_or_else(|| validation("singular polynomial design matrix"))?;
    Ok((vander * coef).iter().copied().collect())
}

/// `values / fit` where `fit` is the least-squares polynomial continuum.
pub fn continuum_normalize(values: &[f64], degree: usize) -> Result<Vec<f64>> {
    let fit = polynomial_fit(values, degree)?;
    let positive = fit.iter().all(|&c| c > 0.0);
    let negative = fit.iter().all(|&c| c < 0.0);
    if !(positive || negative) {
        return Err(validation("degenerate continuum: fitted polynomial reaches zero"));
    }
    Ok(values.iter().zip(&fit).map(|(v, c)| v / c).collect())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// One clipping pass, then z-scoring with the recomputed statistics.
///
/// Values outside `μ ± kσ` (population statistics of the input) are
/// replaced by `μ`.
pub fn sigma_clip_standardize(values: &[f64], clip_k: f64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(validation("cannot standardise an empty vector"));
    }
    if !(clip_k > 0.0) {
        return Err(validation(format!("clip_k must be positive, got {clip_k}")));
    }
    let (m, s) = mean_std(values);
    if s == 0.0 || !s.is_finite() {
        return Err(validation("zero variance: constant input cannot be standardised"));
    }
    let (lo, hi) = (m - clip_k * s, m + clip_k * s);
    let clipped: Vec<f64> = values.iter().map(|&v| if v < lo || v > hi { m } else { v }).collect();
    let (m2, s2) = mean_std(&clipped);
    if s2 == 0.0 {
        return Err(validation("zero variance after clipping"));
    }
    Ok(clipped.iter().map(|v| (v - m2) / s2).collect())
}

/// Intermediate arrays of one pipeline run.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineTrace {
    pub rest_wavelengths: Vec<f64>,
    pub resampled: Vec<f64>,
    pub filtered: Vec<f64>,
    pub normalized: Vec<f64>,
    pub output: ProcessedSpectrum,
}

/// All five steps in order, keeping each intermediate.
pub fn run_pipeline_traced(spec: &RawSpectrum, cfg: &PipelineConfig, id: usize) -> Result<PipelineTrace> {
    stage("config", cfg.validate())?;
    let rest_wavelengths = stage("rest_frame_correct", rest_frame_correct(&spec.wavelengths, spec.params.rv))?;
    let (log_grid, resampled) = stage("log_resample", log_resample(&rest_wavelengths, &spec.fluxes, cfg))?;
    let filtered = stage("median_filter", median_filter(&resampled, cfg.median_window))?;
    let normalized = stage("continuum_normalize", continuum_normalize(&filtered, cfg.continuum_degree))?;
    let values = stage("sigma_clip_standardize", sigma_clip_standardize(&normalized, cfg.clip_k))?;
    Ok(PipelineTrace {
        rest_wavelengths,
        resampled,
        filtered,
        normalized,
        output: ProcessedSpectrum { values, log_grid, id },
    })
}

/// Rest-frame correction → log resampling → median filter → continuum
/// normalisation → clip and standardise.
pub fn run_pipeline(spec: &RawSpectrum, cfg: &PipelineConfig, id: usize) -> Result<ProcessedSpectrum> {
    run_pipeline_traced(spec, cfg, id).map(|t| t.output)
}
