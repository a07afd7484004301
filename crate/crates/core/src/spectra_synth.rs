//! Seeded generator of synthetic stellar spectra.
//!
//! A spectrum is a smooth positive continuum multiplied by Gaussian
//! absorption dips, Doppler-shifted onto a fixed observed-frame grid, plus
//! i.i.d. Gaussian noise with per-pixel standard deviation `continuum / snr`.
//!
//! The continuum is a cubic in the normalised log-wavelength
//! `u = (ln λ_rest − ln λ_mid) / h` with `λ_mid`, `h` taken from the grid
//! bounds. A Doppler shift only translates `ln λ`, so in the observed frame
//! the continuum remains a cubic in `ln λ`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

use crate::catalog::{apportion, assign_label, carbon_ratio, ClassLabel};
use crate::error::{validation, Result};
use crate::kv::{join, KvMap};

/// Speed of light in km/s.
pub const C_KM_S: f64 = 299_792.458;

/// Physical parameter ranges: (min, max), inclusive.
pub const T_EFF_RANGE: (f64, f64) = (3500.0, 9000.0);
pub const LOG_G_RANGE: (f64, f64) = (0.0, 5.5);
pub const FE_H_RANGE: (f64, f64) = (-4.0, 0.5);
pub const C_H_RANGE: (f64, f64) = (-4.0, 1.5);
pub const RV_RANGE: (f64, f64) = (-500.0, 500.0);

const NOISE_STREAM: u64 = 1;
const SLOT_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StellarParams {
    /// Kelvin.
    pub t_eff: f64,
    /// dex.
    pub log_g: f64,
    /// dex.
    pub fe_h: f64,
    /// dex.
    pub c_h: f64,
    /// km/s.
    pub rv: f64,
}

impl StellarParams {
    pub fn new(t_eff: f64, log_g: f64, fe_h: f64, c_h: f64, rv: f64) -> Result<Self> {
        let p = Self { t_eff, log_g, fe_h, c_h, rv };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("t_eff", self.t_eff, T_EFF_RANGE),
            ("log_g", self.log_g, LOG_G_RANGE),
            ("fe_h", self.fe_h, FE_H_RANGE),
            ("c_h", self.c_h, C_H_RANGE),
            ("rv", self.rv, RV_RANGE),
        ];
        for (name, v, (lo, hi)) in checks {
            if !(v.is_finite() && v >= lo && v <= hi) {
                return Err(validation(format!("{name} = {v} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// `[C/Fe]`.
    pub fn c_fe(&self) -> f64 {
        self.c_h - self.fe_h
    }

    /// Regression targets in the order (T_eff, log g, [Fe/H], [C/H]).
    pub fn targets(&self) -> [f64; 4] {
        [self.t_eff, self.log_g, self.fe_h, self.c_h]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawSpectrum {
    pub wavelengths: Vec<f64>,
    pub fluxes: Vec<f64>,
    pub params: StellarParams,
    /// Target SNR; `f64::INFINITY` for noise-free spectra.
    pub snr: f64,
    pub class_label: Option<ClassLabel>,
}

impl RawSpectrum {
    pub fn new(
        wavelengths: Vec<f64>,
        fluxes: Vec<f64>,
        params: StellarParams,
        snr: f64,
        class_label: Option<ClassLabel>,
    ) -> Result<Self> {
        if wavelengths.len() != fluxes.len() {
            return Err(validation(format!(
                "{} wavelengths but {} fluxes",
                wavelengths.len(),
                fluxes.len()
            )));
        }
        if wavelengths.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(validation("wavelengths must be strictly increasing"));
        }
        if !(snr > 0.0) {
            return Err(validation(format!("snr must be positive, got {snr}")));
        }
        Ok(Self { wavelengths, fluxes, params, snr, class_label })
    }
}

/// Linear observed-frame wavelength grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub min: f64,
    pub max: f64,
    pub n_points: usize,
}

impl Grid {
    pub fn wavelengths(&self) -> Vec<f64> {
        let step = (self.max - self.min) / (self.n_points - 1) as f64;
        (0..self.n_points)
            .map(|i| if i + 1 == self.n_points { self.max } else { self.min + step * i as f64 })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LineDriver {
    FeH,
    CH,
    TEff,
}

impl LineDriver {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "fe_h" => Ok(Self::FeH),
            "c_h" => Ok(Self::CH),
            "t_eff" => Ok(Self::TEff),
            _ => Err(validation(format!("unknown line driver {s:?}"))),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Self::FeH => "fe_h",
            Self::CH => "c_h",
            Self::TEff => "t_eff",
        }
    }
}

/// Absorption line in the rest frame: Gaussian dip of standard deviation
/// `width` (Å) whose depth is `depth` scaled by the driver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Line {
    pub center: f64,
    pub depth: f64,
    pub width: f64,
    pub driver: LineDriver,
}

impl Line {
    /// Depth for `params`, clipped to `[0, 0.95]`.
    ///
    /// Metal and carbon lines scale as `10^(abundance / 2)`; temperature
    /// lines as `(T_eff / 9000)^3`.
    pub fn effective_depth(&self, params: &StellarParams) -> f64 {
        let scale = match self.driver {
            LineDriver::FeH => 10f64.powf(0.5 * params.fe_h),
            LineDriver::CH => 10f64.powf(0.5 * params.c_h),
            LineDriver::TEff => (params.t_eff / T_EFF_RANGE.1).powi(3),
        };
        (self.depth * scale).clamp(0.0, 0.95)
    }

    /// Gaussian width broadened mildly with surface gravity.
    pub fn effective_width(&self, params: &StellarParams) -> f64 {
        self.width * (1.0 + 0.08 * (params.log_g - 4.0))
    }
}

/// A mixture component: SNR drawn uniformly in `[lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnrComponent {
    pub lo: f64,
    pub hi: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub n_samples: usize,
    /// Indexed by class code (NMP, CEMP, CnMP).
    pub class_proportions: [f64; 3],
    pub snr_mixture: Vec<SnrComponent>,
    pub grid: Grid,
    pub seed: u64,
    pub line_catalog: Vec<Line>,
}

/// Line list used by the default configuration.
pub fn default_line_catalog() -> Vec<Line> {
    use LineDriver::*;
    let l = |center, depth, width, driver| Line { center, depth, width, driver };
    vec![
        l(3933.7, 0.75, 3.0, FeH),
        l(3968.5, 0.70, 3.0, FeH),
        l(4045.8, 0.50, 1.2, FeH),
        l(4063.6, 0.45, 1.2, FeH),
        l(4071.7, 0.45, 1.2, FeH),
        l(4143.9, 0.40, 1.2, FeH),
        l(4260.5, 0.40, 1.2, FeH),
        l(4383.5, 0.50, 1.2, FeH),
        l(4404.8, 0.45, 1.2, FeH),
        l(5175.0, 0.50, 2.0, FeH),
        l(5890.0, 0.50, 1.5, FeH),
        l(8542.0, 0.50, 2.0, FeH),
        l(4300.0, 0.60, 6.0, CH),
        l(5165.0, 0.35, 4.0, CH),
        l(4101.7, 0.55, 4.0, TEff),
        l(4340.5, 0.55, 4.0, TEff),
        l(4861.3, 0.55, 4.0, TEff),
        l(6562.8, 0.60, 4.0, TEff),
    ]
}

impl Default for GeneratorConfig {
    /// Desk-scale corpus: 1,316 samples with the class mix of the full
    /// survey sample (6,640 / 229 / 6,290) and 58% of the SNR mass below 50.
    fn default() -> Self {
        Self {
            n_samples: 1316,
            class_proportions: [0.5047, 0.0174, 0.4779],
            snr_mixture: vec![
                SnrComponent { lo: 5.0, hi: 20.0, weight: 0.25 },
                SnrComponent { lo: 20.0, hi: 50.0, weight: 0.33 },
                SnrComponent { lo: 50.0, hi: 100.0, weight: 0.22 },
                SnrComponent { lo: 100.0, hi: 300.0, weight: 0.20 },
            ],
            grid: Grid { min: 3800.0, max: 9100.0, n_points: 5301 },
            seed: 0,
            line_catalog: default_line_catalog(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.class_proportions;
        if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(validation(format!("class proportions must be non-negative and sum to 1, got {p:?}")));
        }
        if self.snr_mixture.is_empty() {
            return Err(validation("snr mixture is empty"));
        }
        for c in &self.snr_mixture {
            if !(c.lo > 0.0 && c.hi > c.lo && c.hi.is_finite() && c.weight >= 0.0) {
                return Err(validation(format!("invalid snr component {c:?}")));
            }
        }
        let w: f64 = self.snr_mixture.iter().map(|c| c.weight).sum();
        if (w - 1.0).abs() > 1e-9 {
            return Err(validation(format!("snr mixture weights sum to {w}, expected 1")));
        }
        let g = &self.grid;
        if g.n_points < 64 || !(g.min > 0.0 && g.max > g.min && g.max.is_finite()) {
            return Err(validation(format!("invalid grid {g:?} (need n_points >= 64, 0 < min < max)")));
        }
        for l in &self.line_catalog {
            if !(l.center > 0.0 && l.width > 0.0 && l.depth >= 0.0 && l.depth.is_finite()) {
                return Err(validation(format!("invalid line {l:?}")));
            }
        }
        Ok(())
    }

    /// Probability mass of SNR values below `threshold`.
    pub fn snr_mass_below(&self, threshold: f64) -> f64 {
        self.snr_mixture
            .iter()
            .map(|c| c.weight * ((threshold.clamp(c.lo, c.hi) - c.lo) / (c.hi - c.lo)))
            .sum()
    }

    /// Reads a config; absent keys keep their defaults.
    ///
    /// Keys: `n_samples`, `seed`, `class_proportions` (3 values),
    /// `snr_mixture` (`lo:hi:weight` items), `grid` (`min,max,n_points`),
    /// `lines` (`center:depth:width:driver` items, driver one of
    /// `fe_h`, `c_h`, `t_eff`).
    pub fn from_kv(mut kv: KvMap) -> Result<Self> {
        let d = Self::default();
        let props: Vec<f64> = kv.take_list("class_proportions", d.class_proportions.to_vec())?;
        if props.len() != 3 {
            return Err(validation("class_proportions needs 3 values"));
        }
        let snr_mixture = match kv.take_raw("snr_mixture") {
            None => d.snr_mixture,
            Some(v) => v
                .split(',')
                .map(|item| {
                    let f = parse_fields(item, 3, "snr_mixture")?;
                    Ok(SnrComponent { lo: f[0], hi: f[1], weight: f[2] })
                })
                .collect::<Result<_>>()?,
        };
        let grid = match kv.take_raw("grid") {
            None => d.grid,
            Some(v) => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                let bad = || validation(format!("grid expects min,max,n_points, got {v:?}"));
                if parts.len() != 3 {
                    return Err(bad());
                }
                Grid {
                    min: parts[0].parse().map_err(|_| bad())?,
                    max: parts[1].parse().map_err(|_| bad())?,
                    n_points: parts[2].parse().map_err(|_| bad())?,
                }
            }
        };
        let line_catalog = match kv.take_raw("lines") {
            None => d.line_catalog,
            Some(v) => v
                .split(',')
                .map(|item| {
                    let parts: Vec<&str> = item.trim().split(':').collect();
                    if parts.len() != 4 {
                        return Err(validation(format!("line expects center:depth:width:driver, got {item:?}")));
                    }
                    let num = |s: &str| s.parse::<f64>().map_err(|_| validation(format!("bad line field {s:?}")));
                    Ok(Line {
                        center: num(parts[0])?,
                        depth: num(parts[1])?,
                        width: num(parts[2])?,
                        driver: LineDriver::parse(parts[3])?,
                    })
                })
                .collect::<Result<_>>()?,
        };
        let cfg = Self {
            n_samples: kv.take("n_samples", d.n_samples)?,
            seed: kv.take("seed", d.seed)?,
            class_proportions: [props[0], props[1], props[2]],
            snr_mixture,
            grid,
            line_catalog,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Complete key/value snapshot readable by [`GeneratorConfig::from_kv`].
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let snr: Vec<String> = self.snr_mixture.iter().map(|c| format!("{}:{}:{}", c.lo, c.hi, c.weight)).collect();
        let lines: Vec<String> = self
            .line_catalog
            .iter()
            .map(|l| format!("{}:{}:{}:{}", l.center, l.depth, l.width, l.driver.as_str()))
            .collect();
        vec![
            ("n_samples".into(), self.n_samples.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("class_proportions".into(), join(&self.class_proportions)),
            ("snr_mixture".into(), snr.join(",")),
            ("grid".into(), format!("{},{},{}", self.grid.min, self.grid.max, self.grid.n_points)),
            ("lines".into(), lines.join(",")),
        ]
    }
}

fn parse_fields(item: &str, n: usize, key: &str) -> Result<Vec<f64>> {
    let f: Vec<f64> = item
        .trim()
        .split(':')
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| validation(format!("{key}: bad item {item:?}")))?;
    if f.len() != n {
        return Err(validation(format!("{key}: item {item:?} needs {n} fields")));
    }
    Ok(f)
}

/// Continuum at rest-frame wavelength `lambda` for a given temperature.
pub fn continuum(lambda: f64, t_eff: f64, grid: &Grid) -> f64 {
    let (a, b) = (grid.min.ln(), grid.max.ln());
    let u = (lambda.ln() - 0.5 * (a + b)) / (0.5 * (b - a));
    let tau = (t_eff - 6000.0) / 3000.0;
    1.0 - 0.35 * tau * u + (-0.15 - 0.05 * tau) * u * u + 0.05 * tau * u * u * u
}

/// Observed-frame `(flux, continuum)` without noise for radial velocity
/// `rv`: the rest-frame model evaluated at `λ / (1 + rv / c)`.
///
/// `rv` is only required to satisfy `|rv| < c`; the parameter-range check
/// is applied by [`generate_spectrum`].
pub fn noise_free_flux(
    wavelengths: &[f64],
    params: &StellarParams,
    rv: f64,
    cfg: &GeneratorConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(rv.abs() < C_KM_S) {
        return Err(validation(format!("|rv| = {} must be below c", rv.abs())));
    }
    let lines: Vec<(f64, f64, f64)> = cfg
        .line_catalog
        .iter()
        .map(|l| (l.center, l.effective_depth(params), l.effective_width(params)))
        .filter(|&(_, d, _)| d > 0.0)
        .collect();
    let factor = 1.0 + rv / C_KM_S;
    let mut flux = Vec::with_capacity(wavelengths.len());
    let mut cont = Vec::with_capacity(wavelengths.len());
    for &lam in wavelengths {
        let rest = lam / factor;
        let c = continuum(rest, params.t_eff, &cfg.grid);
        let mut f = c;
        for &(center, depth, width) in &lines {
            let z = (rest - center) / width;
            if z.abs() < 8.0 {
                f *= 1.0 - depth * (-0.5 * z * z).exp();
            }
        }
        flux.push(f);
        cont.push(c);
    }
    Ok((flux, cont))
}

/// One spectrum on `cfg.grid`. Equal `(params, snr, cfg, seed)` give
/// bit-identical output; the noise is `continuum / snr · z` with `z` a
/// standard normal stream fixed by `seed`.
pub fn generate_spectrum(params: &StellarParams, snr: f64, cfg: &GeneratorConfig, seed: u64) -> Result<RawSpectrum> {
    params.validate()?;
    if !(snr > 0.0) {
        return Err(validation(format!("snr must be positive, got {snr}")));
    }
    let wavelengths = cfg.grid.wavelengths();
    let (mut flux, cont) = noise_free_flux(&wavelengths, params, params.rv, cfg)?;
    if snr.is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(NOISE_STREAM);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        for (f, c) in flux.iter_mut().zip(&cont) {
            *f += c / snr * normal.sample(&mut rng);
        }
    }
    let label = assign_label(params.fe_h, carbon_ratio(params.c_h, params.fe_h)?)?;
    RawSpectrum::new(wavelengths, flux, *params, snr, Some(label))
}

/// Result of [`measure_snr`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SnrEstimate {
    Finite(f64),
    /// The residual has zero variance.
    NoiseFree,
}

/// `mean(continuum) / std(flux − continuum)` with the population std.
pub fn measure_snr(spec: &RawSpectrum, continuum: &[f64]) -> Result<SnrEstimate> {
    if continuum.len() != spec.fluxes.len() {
        return Err(validation("continuum and flux lengths differ"));
    }
    if continuum.iter().any(|c| !(*c > 0.0)) {
        return Err(validation("continuum must be strictly positive"));
    }
    let n = continuum.len() as f64;
    let resid: Vec<f64> = spec.fluxes.iter().zip(continuum).map(|(f, c)| f - c).collect();
    let m = resid.iter().sum::<f64>() / n;
    let var = resid.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / n;
    if var == 0.0 {
        return Ok(SnrEstimate::NoiseFree);
    }
    Ok(SnrEstimate::Finite(continuum.iter().sum::<f64>() / n / var.sqrt()))
}

fn truncated(rng: &mut ChaCha8Rng, d: &Normal<f64>, (lo, hi): (f64, f64)) -> f64 {
    loop {
        let v = d.sample(rng);
        if v >= lo && v <= hi {
            return v;
        }
    }
}

/// Draws parameters whose label is `class`.
///
/// Proposals concentrate near solar metallicity and thin out exponentially
/// below `[Fe/H] = -1`; a proposal is kept only if the labeling rule
/// returns `class` on the stored values.
pub fn sample_params(class: ClassLabel, rng: &mut ChaCha8Rng) -> Result<StellarParams> {
    let t_eff = Normal::new(5600.0, 900.0).expect("finite");
    let log_g = Normal::new(3.6, 1.0).expect("finite");
    let rv = Normal::new(0.0, 80.0).expect("finite");
    let nmp_fe = Normal::new(-0.35, 0.35).expect("finite");
    let nmp_cfe = Normal::new(0.0, 0.15).expect("finite");
    let mp_cfe = Normal::new(0.15, 0.3).expect("finite");
    let tail_cnmp = Exp::new(1.0 / 0.6).expect("positive rate");
    let tail_cemp = Exp::new(1.0).expect("positive rate");
    let excess = Exp::new(1.0 / 0.6).expect("positive rate");
    for _ in 0..100_000 {
        let (fe_h, c_fe) = match class {
            ClassLabel::Nmp => (nmp_fe.sample(rng), nmp_cfe.sample(rng)),
            ClassLabel::Cnmp => (-1.0 - tail_cnmp.sample(rng), mp_cfe.sample(rng)),
            ClassLabel::Cemp => (-1.0 - tail_cemp.sample(rng), 0.7 + excess.sample(rng)),
        };
        let Ok(p) = StellarParams::new(
            truncated(rng, &t_eff, T_EFF_RANGE),
            truncated(rng, &log_g, LOG_G_RANGE),
            fe_h,
            fe_h + c_fe,
            truncated(rng, &rv, RV_RANGE),
        ) else {
            continue;
        };
        if assign_label(p.fe_h, p.c_fe())? == class {
            return Ok(p);
        }
    }
    Err(validation(format!("rejection sampling found no parameters for class {class}")))
}

/// Per-sample class and SNR-component slots with exact (largest remainder)
/// counts, shuffled with the dataset seed.
fn slots(cfg: &GeneratorConfig) -> Result<(Vec<ClassLabel>, Vec<usize>)> {
    let counts = apportion(cfg.n_samples, &cfg.class_proportions);
    for (k, (&c, &p)) in counts.iter().zip(&cfg.class_proportions).enumerate() {
        if p > 0.0 && c < 3 {
            return Err(validation(format!(
                "class {} would receive {c} of {} samples; at least 3 are needed to split it",
                ClassLabel::from_code(k)?,
                cfg.n_samples
            )));
        }
    }
    let weights: Vec<f64> = cfg.snr_mixture.iter().map(|c| c.weight).collect();
    let snr_counts = apportion(cfg.n_samples, &weights);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SLOT_STREAM);
    let mut classes: Vec<ClassLabel> = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &c)| std::iter::repeat_n(ClassLabel::ALL[k], c))
        .collect();
    let mut comps: Vec<usize> = snr_counts.iter().enumerate().flat_map(|(k, &c)| std::iter::repeat_n(k, c)).collect();
    classes.shuffle(&mut rng);
    comps.shuffle(&mut rng);
    Ok((classes, comps))
}

/// Seed of sample `index`.
pub fn sample_seed(cfg: &GeneratorConfig, index: usize) -> u64 {
    cfg.seed.wrapping_add(index as u64)
}

/// Generates sample `index` of the dataset described by `cfg`.
fn generate_sample(cfg: &GeneratorConfig, class: ClassLabel, comp: usize, index: usize) -> Result<RawSpectrum> {
    let seed = sample_seed(cfg, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.snr_mixture[comp];
    let snr = rng.random_range(c.lo..c.hi);
    let params = sample_params(class, &mut rng)?;
    generate_spectrum(&params, snr, cfg, seed)
}

/// The full dataset. Class counts are the largest-remainder apportionment
/// of `class_proportions`, so each is within one sample of its target; the
/// SNR components are apportioned the same way.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Vec<RawSpectrum>> {
    cfg.validate()?;
    let (classes, comps) = slots(cfg)?;
    (0..cfg.n_samples).map(|i| generate_sample(cfg, classes[i], comps[i], i)).collect()
}
