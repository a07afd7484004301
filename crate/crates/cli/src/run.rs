//! Resolved commands and their execution.
//!
//! An [`Invocation`] holds everything a command needs after flags and
//! config files are resolved. Its manifest snapshot rebuilds the identical
//! invocation, which is how `replay` repeats a run.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};
use weaksig::catalog::{stratified_split, ClassLabel, Split, DEFAULT_RATIOS};
use weaksig::corpus::{self, Manifest, Matrix, Record, FLUX_FILE, MANIFEST_FILE, PROCESSED_FILE};
use weaksig::kv::KvMap;
use weaksig::pdvfn::{Pdvfn, PdvfnConfig, Task, Views};
use weaksig::preprocess::{run_pipeline, PipelineConfig};
use weaksig::spectra_synth::{generate_dataset, GeneratorConfig, Grid, RawSpectrum};
use weaksig::train_eval::metrics::{argmax_rows, classification_metrics, regression_metrics};
use weaksig::train_eval::report::{
    bins_csv, confusion_csv, density_csv, histogram_csv, render_classification, render_regression,
};
use weaksig::train_eval::metrics::{density_error_correlation, snr_trend};
use weaksig::train_eval::{
    load_checkpoint, predict, render_log, save_checkpoint, train, Dataset, Labels, Predictions, TrainConfig,
};

use crate::manifest::{sha256_file, InputFile, OutputFile, RunManifest, MANIFEST_NAME};
use crate::population::{self, Outcome, Population, POPULATION_FILE, SNR_HISTOGRAM_EDGES};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_LOG_FILE: &str = "loss_log.tsv";
pub const METRICS_FILE: &str = "metrics.txt";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const SNR_BINS_FILE: &str = "snr_bins.csv";
pub const DENSITY_FILE: &str = "density.csv";
pub const MAE_VS_SNR_FILE: &str = "mae_vs_snr.csv";
pub const SNR_HISTOGRAM_FILE: &str = "snr_histogram.csv";
pub const DENSITY_COUNTS_FILE: &str = "density_counts.csv";
pub const DENSITY_ERROR_FILE: &str = "density_error.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

/// Prediction batch size; it affects speed only.
const PREDICT_BATCH: usize = 64;

/// Stage seed fanned out from the run seed: the first 8 bytes of
/// `SHA-256(seed_le ‖ stage)`.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Which corpus split `evaluate` scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitSel {
    One(Split),
    All,
}

impl SplitSel {
    pub fn parse(s: &str) -> weaksig::Result<Self> {
        if s == "all" {
            Ok(Self::All)
        } else {
            Split::parse(s).map(Self::One)
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::One(s) => s.as_str(),
            Self::All => "all",
        }
    }

    fn contains(self, s: Split) -> bool {
        match self {
            Self::One(x) => x == s,
            Self::All => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Invocation {
    Generate { generator: GeneratorConfig, split_seed: u64 },
    Preprocess { data: PathBuf, pipeline: PipelineConfig },
    Train { data: PathBuf, model: PdvfnConfig, train: TrainConfig, model_seed: u64 },
    Evaluate { data: PathBuf, checkpoint: PathBuf, split: SplitSel },
    Report { eval: PathBuf },
}

fn prefixed(prefix: &str, pairs: Vec<(String, String)>) -> Vec<(String, String)> {
    pairs.into_iter().map(|(k, v)| (format!("{prefix}.{k}"), v)).collect()
}

fn parse_u64(m: &RunManifest, key: &str) -> Result<u64> {
    let v = m.config_value(key)?;
    v.parse().map_err(|_| weaksig::Error::Integrity(format!("run manifest: bad config.{key} {v:?}")).into())
}

/// Reads a config section back through the same parser as config files.
fn section_kv(m: &RunManifest, prefix: &str) -> Result<KvMap> {
    Ok(KvMap::from_pairs(&m.config_section(prefix), &format!("run manifest config.{prefix}"))?)
}

impl Invocation {
    pub fn command(&self) -> &'static str {
        match self {
            Self::Generate { .. } => "generate",
            Self::Preprocess { .. } => "preprocess",
            Self::Train { .. } => "train",
            Self::Evaluate { .. } => "evaluate",
            Self::Report { .. } => "report",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Self::Generate { generator, .. } => Some(generator.seed),
            Self::Train { train, .. } => Some(train.seed),
            _ => None,
        }
    }

    fn args(&self) -> Vec<(String, String)> {
        let p = |k: &str, v: &Path| (k.to_string(), v.display().to_string());
        match self {
            Self::Generate { .. } => vec![],
            Self::Preprocess { data, .. } | Self::Train { data, .. } => vec![p("data", data)],
            Self::Evaluate { data, checkpoint, .. } => vec![p("data", data), p("checkpoint", checkpoint)],
            Self::Report { eval } => vec![p("eval", eval)],
        }
    }

    fn config(&self) -> Vec<(String, String)> {
        match self {
            Self::Generate { generator, split_seed } => {
                let mut c = prefixed("generator", generator.to_pairs());
                c.push(("split.seed".into(), split_seed.to_string()));
                c
            }
            Self::Preprocess { pipeline, .. } => prefixed("pipeline", pipeline.to_pairs()),
            Self::Train { model, train, model_seed, .. } => {
                let mut c = prefixed("model", model.to_pairs());
                c.extend(prefixed("train", train.to_pairs()));
                c.push(("model_seed".into(), model_seed.to_string()));
                c
            }
            Self::Evaluate { split, .. } => vec![("split".into(), split.as_str().into())],
            Self::Report { .. } => vec![],
        }
    }

    /// Files read by the command, by role.
    fn inputs(&self) -> Vec<(String, PathBuf)> {
        let corpus = |data: &Path, matrix: &str| {
            vec![("manifest".to_string(), data.join(MANIFEST_FILE)), (matrix.replace(".bin", ""), data.join(matrix))]
        };
        match self {
            Self::Generate { .. } => vec![],
            Self::Preprocess { data, .. } => corpus(data, FLUX_FILE),
            Self::Train { data, .. } => corpus(data, PROCESSED_FILE),
            Self::Evaluate { data, checkpoint, .. } => {
                let mut v = corpus(data, PROCESSED_FILE);
                v.push(("checkpoint".into(), checkpoint.clone()));
                v
            }
            Self::Report { eval } => vec![("population".into(), eval.join(POPULATION_FILE))],
        }
    }

    /// Rebuilds the invocation recorded in `m`.
    pub fn from_manifest(m: &RunManifest) -> Result<Self> {
        let path = |k: &str| -> Result<PathBuf> { Ok(PathBuf::from(m.arg(k)?)) };
        Ok(match m.command.as_str() {
            "generate" => Self::Generate {
                generator: GeneratorConfig::from_kv(section_kv(m, "generator")?)?,
                split_seed: parse_u64(m, "split.seed")?,
            },
            "preprocess" => {
                Self::Preprocess { data: path("data")?, pipeline: PipelineConfig::from_kv(section_kv(m, "pipeline")?)? }
            }
            "train" => Self::Train {
                data: path("data")?,
                model: PdvfnConfig::from_kv(section_kv(m, "model")?)?,
                train: TrainConfig::from_kv(section_kv(m, "train")?)?,
                model_seed: parse_u64(m, "model_seed")?,
            },
            "evaluate" => Self::Evaluate {
                data: path("data")?,
                checkpoint: path("checkpoint")?,
                split: SplitSel::parse(m.config_value("split")?)?,
            },
            "report" => Self::Report { eval: path("eval")? },
            other => bail!(weaksig::Error::Integrity(format!("run manifest names unknown command {other:?}"))),
        })
    }

    /// Runs the command into `out` and writes its run manifest there.
    pub fn run(&self, out: &Path) -> Result<RunManifest> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let inputs = self
            .inputs()
            .into_iter()
            .map(|(role, path)| {
                if !path.is_file() {
                    bail!(weaksig::Error::Validation(format!("{role} input {} does not exist", path.display())));
                }
                Ok(InputFile { sha256: sha256_file(&path)?, role, path: path.display().to_string() })
            })
            .collect::<Result<Vec<_>>>()?;
        let names = match self {
            Self::Generate { generator, split_seed } => generate(generator, *split_seed, out)?,
            Self::Preprocess { data, pipeline } => preprocess(data, pipeline, out)?,
            Self::Train { data, model, train, model_seed } => train_model(data, model, train, *model_seed, out)?,
            Self::Evaluate { data, checkpoint, split } => evaluate(data, checkpoint, *split, out)?,
            Self::Report { eval } => report(eval, out)?,
        };
        let outputs = names
            .into_iter()
            .map(|name| Ok(OutputFile { sha256: sha256_file(&out.join(name))?, name: name.to_string() }))
            .collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            command: self.command().into(),
            tool_version: TOOL_VERSION.into(),
            seed: self.seed(),
            args: self.args(),
            config: self.config(),
            inputs,
            outputs,
        };
        fs::write(out.join(MANIFEST_NAME), manifest.render())?;
        Ok(manifest)
    }
}

/// Outcome of a replay: the files whose checksums differ from the record.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayReport {
    pub manifest: RunManifest,
    pub mismatched: Vec<String>,
}

/// Re-runs the command recorded in `manifest` into `out` after checking
/// that its inputs are unchanged.
pub fn replay(recorded: &RunManifest, out: &Path) -> Result<ReplayReport> {
    recorded.verify_inputs()?;
    let inv = Invocation::from_manifest(recorded)?;
    let manifest = inv.run(out)?;
    let mut mismatched = Vec::new();
    for f in &recorded.outputs {
        match manifest.outputs.iter().find(|g| g.name == f.name) {
            Some(g) if g.sha256 == f.sha256 => {}
            _ => mismatched.push(f.name.clone()),
        }
    }
    for g in &manifest.outputs {
        if !recorded.outputs.iter().any(|f| f.name == g.name) {
            mismatched.push(g.name.clone());
        }
    }
    Ok(ReplayReport { manifest, mismatched })
}

fn write(out: &Path, name: &str, text: &str) -> Result<()> {
    fs::write(out.join(name), text).with_context(|| format!("writing {}", out.join(name).display()))
}

fn generate(cfg: &GeneratorConfig, split_seed: u64, out: &Path) -> Result<Vec<&'static str>> {
    let raw = generate_dataset(cfg)?;
    let labels: Vec<ClassLabel> =
        raw.iter().map(|s| s.class_label.expect("generated spectra are labelled")).collect();
    let splits = stratified_split(&labels, DEFAULT_RATIOS, split_seed)?;
    let records = raw
        .iter()
        .zip(&labels)
        .zip(&splits)
        .enumerate()
        .map(|(id, ((s, &class), &split))| Record { id, params: s.params, snr: s.snr, class, split })
        .collect();
    let manifest = Manifest {
        attrs: vec![("generator.seed".into(), cfg.seed.to_string()), ("split.seed".into(), split_seed.to_string())],
        records,
    };
    corpus::write_manifest(&out.join(MANIFEST_FILE), &manifest)?;
    let g = cfg.grid;
    let attrs = vec![
        ("grid.min".to_string(), g.min.to_string()),
        ("grid.max".to_string(), g.max.to_string()),
        ("grid.n_points".to_string(), g.n_points.to_string()),
    ];
    let rows: Vec<&[f64]> = raw.iter().map(|s| s.fluxes.as_slice()).collect();
    corpus::save_matrix(&out.join(FLUX_FILE), "flux", &rows, &attrs)?;
    Ok(vec![MANIFEST_FILE, FLUX_FILE])
}

/// A corpus manifest with its matrix; row `i` belongs to record `i`.
fn load_corpus(data: &Path, file: &str, kind: &str) -> Result<(Manifest, Matrix)> {
    let manifest = corpus::read_manifest(&data.join(MANIFEST_FILE))?;
    let matrix = corpus::load_matrix(&data.join(file), kind)?;
    if matrix.rows != manifest.records.len() {
        bail!(weaksig::Error::Integrity(format!(
            "{} has {} rows but the manifest lists {} records",
            data.join(file).display(),
            matrix.rows,
            manifest.records.len()
        )));
    }
    Ok((manifest, matrix))
}

fn preprocess(data: &Path, cfg: &PipelineConfig, out: &Path) -> Result<Vec<&'static str>> {
    let (manifest, flux) = load_corpus(data, FLUX_FILE, "flux")?;
    let grid = Grid {
        min: flux.attr_f64("grid.min")?,
        max: flux.attr_f64("grid.max")?,
        n_points: flux.attr("grid.n_points")?.parse().map_err(|_| weaksig::Error::Integrity("bad grid.n_points".into()))?,
    };
    if grid.n_points != flux.cols {
        bail!(weaksig::Error::Integrity(format!("flux matrix has {} columns but its grid has {}", flux.cols, grid.n_points)));
    }
    let wavelengths = grid.wavelengths();
    let mut rows = Vec::with_capacity(flux.rows);
    for (i, r) in manifest.records.iter().enumerate() {
        let spec = RawSpectrum::new(wavelengths.clone(), flux.row(i).to_vec(), r.params, r.snr, Some(r.class))
            .with_context(|| format!("record {i}"))?;
        rows.push(run_pipeline(&spec, cfg, i).with_context(|| format!("record {i}"))?.values);
    }
    let mut m = manifest.clone();
    m.attrs.push(("pipeline.target_length".into(), cfg.target_length.to_string()));
    corpus::write_manifest(&out.join(MANIFEST_FILE), &m)?;
    let (a, b) = cfg.common_range;
    let attrs = vec![("range.min".to_string(), a.to_string()), ("range.max".to_string(), b.to_string())];
    corpus::save_matrix(&out.join(PROCESSED_FILE), "processed", &rows, &attrs)?;
    Ok(vec![MANIFEST_FILE, PROCESSED_FILE])
}

/// Views and labels of the records selected by `keep`.
fn dataset(
    cfg: &PdvfnConfig,
    manifest: &Manifest,
    matrix: &Matrix,
    keep: impl Fn(&Record) -> bool,
) -> Result<(Vec<usize>, Dataset)> {
    if matrix.cols < cfg.input_len {
        bail!(weaksig::Error::Validation(format!(
            "dimension mismatch: corpus spectra have {} values but the model reads {}",
            matrix.cols, cfg.input_len
        )));
    }
    let idx: Vec<usize> = manifest.records.iter().filter(|r| keep(r)).map(|r| r.id).collect();
    let spectra: Vec<&[f64]> = idx.iter().map(|&i| matrix.row(i)).collect();
    let views = Views::build(cfg, &spectra)?;
    let labels = match &cfg.task {
        Task::Classification => Labels::Classification(idx.iter().map(|&i| manifest.records[i].class.code()).collect()),
        Task::Regression { targets } => Labels::Regression(
            idx.iter()
                .flat_map(|&i| {
                    let all = manifest.records[i].params.targets();
                    targets.iter().map(move |t| all[t.index()])
                })
                .collect(),
        ),
    };
    Ok((idx, Dataset { views, labels }))
}

fn train_model(
    data: &Path,
    model_cfg: &PdvfnConfig,
    cfg: &TrainConfig,
    model_seed: u64,
    out: &Path,
) -> Result<Vec<&'static str>> {
    let (manifest, matrix) = load_corpus(data, PROCESSED_FILE, "processed")?;
    let (_, tr) = dataset(model_cfg, &manifest, &matrix, |r| r.split == Split::Train)?;
    let (_, va) = dataset(model_cfg, &manifest, &matrix, |r| r.split == Split::Val)?;
    let mut model = Pdvfn::new(model_cfg.clone(), model_seed)?;
    let outcome = train(&mut model, &tr, &va, cfg)?;
    write(out, LOSS_LOG_FILE, &render_log(&outcome.log))?;
    let extra = vec![("train.best_epoch".to_string(), outcome.best_epoch.to_string())];
    let mut w = std::io::BufWriter::new(fs::File::create(out.join(CHECKPOINT_FILE))?);
    save_checkpoint(&mut w, &model, outcome.scaler.as_ref(), &extra)?;
    std::io::Write::flush(&mut w)?;
    Ok(vec![CHECKPOINT_FILE, LOSS_LOG_FILE])
}

fn evaluate(data: &Path, checkpoint: &Path, split: SplitSel, out: &Path) -> Result<Vec<&'static str>> {
    let ck = load_checkpoint(&mut BufReader::new(
        fs::File::open(checkpoint).with_context(|| format!("opening {}", checkpoint.display()))?,
    ))?;
    let (manifest, matrix) = load_corpus(data, PROCESSED_FILE, "processed")?;
    let cfg = ck.model.config().clone();
    let (idx, ds) = dataset(&cfg, &manifest, &matrix, |r| split.contains(r.split))?;
    if idx.is_empty() {
        bail!(weaksig::Error::Validation(format!("split {} has no samples", split.as_str())));
    }
    let preds = predict(&ck.model, &ds.views, ck.scaler.as_ref(), PREDICT_BATCH)?;
    let records: Vec<&Record> = idx.iter().map(|&i| &manifest.records[i]).collect();
    let outcome = match (&preds, &ds.labels, &cfg.task) {
        (Predictions::Classification { logits }, Labels::Classification(y), _) => {
            let m = classification_metrics(logits, y)?;
            write(out, METRICS_FILE, &render_classification(&m))?;
            write(out, CONFUSION_FILE, &confusion_csv(&m))?;
            Outcome::Classification {
                class: y.clone(),
                predicted: argmax_rows(logits, 3),
                logits: logits.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            }
        }
        (Predictions::Regression { mu, log_var, k }, Labels::Regression(y), Task::Regression { targets }) => {
            let col = |v: &[f64], j: usize| -> Vec<f64> { v.iter().skip(j).step_by(*k).copied().collect() };
            let truth: Vec<Vec<f64>> = (0..*k).map(|j| col(y, j)).collect();
            let pred: Vec<Vec<f64>> = (0..*k).map(|j| col(mu, j)).collect();
            let sigma: Vec<Vec<f64>> =
                (0..*k).map(|j| col(log_var, j).into_iter().map(|lv| (0.5 * lv).exp()).collect()).collect();
            let rows = targets
                .iter()
                .enumerate()
                .map(|(j, t)| Ok((*t, regression_metrics(&pred[j], &truth[j])?)))
                .collect::<weaksig::Result<Vec<_>>>()?;
            write(out, METRICS_FILE, &render_regression(&rows))?;
            Outcome::Regression { targets: targets.clone(), truth, pred, sigma }
        }
        _ => bail!(weaksig::Error::Validation("checkpoint task does not match its predictions".into())),
    };
    let pop = Population {
        ids: idx.clone(),
        splits: records.iter().map(|r| r.split).collect(),
        snr: records.iter().map(|r| r.snr).collect(),
        fe_h: records.iter().map(|r| r.params.fe_h).collect(),
        c_fe: records.iter().map(|r| r.params.c_fe()).collect(),
        outcome,
    };
    write(out, POPULATION_FILE, &pop.render())?;
    write(out, SNR_BINS_FILE, &bins_csv(&population::snr_table(&pop)?))?;
    write(out, DENSITY_FILE, &density_csv(&population::density_table(&pop)?))?;
    let mut names = vec![METRICS_FILE];
    if matches!(cfg.task, Task::Classification) {
        names.push(CONFUSION_FILE);
    }
    names.extend([POPULATION_FILE, SNR_BINS_FILE, DENSITY_FILE]);
    Ok(names)
}

/// Headline numbers of a report, also written to `summary.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportSummary {
    pub samples: usize,
    pub error_parameter: String,
    pub snr_below_50: f64,
    pub snr_bins_occupied: usize,
    pub snr_trend: Option<f64>,
    pub density_cells_occupied: usize,
    pub density_trend: Option<f64>,
}

impl ReportSummary {
    pub fn render(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| x.to_string());
        format!(
            "samples = {}\nerror_parameter = {}\nsnr.below_50 = {}\nsnr_trend.bins = {}\nsnr_trend.spearman = {}\n\
             density.cells = {}\ndensity.spearman = {}\n",
            self.samples,
            self.error_parameter,
            self.snr_below_50,
            self.snr_bins_occupied,
            opt(self.snr_trend),
            self.density_cells_occupied,
            opt(self.density_trend)
        )
    }
}

pub fn summarize(pop: &Population) -> Result<ReportSummary> {
    let bins = population::snr_table(pop)?;
    let density = population::density_table(pop)?;
    Ok(ReportSummary {
        samples: pop.len(),
        error_parameter: pop.primary_error().0,
        snr_below_50: pop.snr.iter().filter(|&&s| s < 50.0).count() as f64 / pop.len() as f64,
        snr_bins_occupied: bins.iter().filter(|b| b.count > 0).count(),
        snr_trend: snr_trend(&bins),
        density_cells_occupied: density.cells.iter().filter(|c| c.count > 0).count(),
        density_trend: density_error_correlation(&density),
    })
}

fn report(eval: &Path, out: &Path) -> Result<Vec<&'static str>> {
    let path = eval.join(POPULATION_FILE);
    let pop = Population::parse(&fs::read_to_string(&path)?, &path.display().to_string())?;
    let bins = population::snr_table(&pop)?;
    let mut curve = String::from("snr_center,mean_abs_error,count\n");
    for b in &bins {
        if let Some(m) = b.mean {
            curve.push_str(&format!("{},{},{}\n", b.center(), m, b.count));
        }
    }
    write(out, MAE_VS_SNR_FILE, &curve)?;
    let edges: Vec<f64> = {
        let mut e = SNR_HISTOGRAM_EDGES.to_vec();
        let lo = pop.snr.iter().copied().fold(e[0], f64::min);
        let hi = pop.snr.iter().copied().fold(e[e.len() - 1], f64::max);
        e[0] = lo;
        *e.last_mut().expect("edges") = hi;
        e
    };
    write(out, SNR_HISTOGRAM_FILE, &histogram_csv(&pop.snr, &edges))?;
    let density = population::density_table(&pop)?;
    write(out, DENSITY_COUNTS_FILE, &population::heat_grid_csv(&density, |c| Some(c.count as f64)))?;
    write(out, DENSITY_ERROR_FILE, &population::heat_grid_csv(&density, |c| c.mean_error))?;
    write(out, SUMMARY_FILE, &summarize(&pop)?.render())?;
    Ok(vec![MAE_VS_SNR_FILE, SNR_HISTOGRAM_FILE, DENSITY_COUNTS_FILE, DENSITY_ERROR_FILE, SUMMARY_FILE])
}
