//! Optimiser, step-decay schedule, the training loop, prediction and the
//! evaluation metrics.

pub mod metrics;
pub mod optim;
pub mod report;

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use weaksig_tensor::ParamStore;

use crate::error::{integrity, validation, Error, Result};
use crate::kv::KvMap;
use crate::objectives::{focal_loss_tensor, gaussian_nll_tensor, inverse_frequency_alpha};
use crate::pdvfn::{ModelOutput, Pdvfn, PdvfnConfig, Task, Views};
pub use optim::{adamw_step, AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adamw: AdamWConfig,
    pub focal_gamma: f64,
    /// Per-class focal weights; `None` uses the inverse class frequency of
    /// the training split.
    pub focal_alpha: Option<[f64; 3]>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-4,
            decay_factor: 0.1,
            decay_every: 10,
            epochs: 40,
            batch_size: 32,
            adamw: AdamWConfig::default(),
            focal_gamma: 2.0,
            focal_alpha: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(validation(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(validation(format!("decay_factor must be in (0, 1], got {}", self.decay_factor)));
        }
        if self.decay_every == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(validation("decay_every, epochs and batch_size must be positive"));
        }
        let a = &self.adamw;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) || !(a.weight_decay >= 0.0) {
            return Err(validation("adamw betas must lie in [0, 1), eps > 0 and weight_decay >= 0"));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(validation("focal_gamma must be >= 0"));
        }
        if let Some(a) = self.focal_alpha {
            if a.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(validation(format!("focal_alpha must be positive, got {a:?}")));
            }
        }
        Ok(())
    }

    pub fn from_kv(mut kv: KvMap) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            lr0: kv.take("lr0", d.lr0)?,
            decay_factor: kv.take("decay_factor", d.decay_factor)?,
            decay_every: kv.take("decay_every", d.decay_every)?,
            epochs: kv.take("epochs", d.epochs)?,
            batch_size: kv.take("batch_size", d.batch_size)?,
            adamw: AdamWConfig {
                beta1: kv.take("beta1", d.adamw.beta1)?,
                beta2: kv.take("beta2", d.adamw.beta2)?,
                eps: kv.take("adam_eps", d.adamw.eps)?,
                weight_decay: kv.take("weight_decay", d.adamw.weight_decay)?,
            },
            focal_gamma: kv.take("focal_gamma", d.focal_gamma)?,
            focal_alpha: match kv.take_raw("focal_alpha").as_deref() {
                None | Some("inverse_frequency") => None,
                Some(v) => {
                    let a: Vec<f64> = v.split(',').filter_map(|p| p.trim().parse().ok()).collect();
                    if a.len() != 3 || v.split(',').count() != 3 {
                        return Err(validation(format!("focal_alpha needs 3 values or inverse_frequency, got {v:?}")));
                    }
                    Some([a[0], a[1], a[2]])
                }
            },
            seed: kv.take("seed", d.seed)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("lr0", self.lr0.to_string()),
            ("decay_factor", self.decay_factor.to_string()),
            ("decay_every", self.decay_every.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("beta1", self.adamw.beta1.to_string()),
            ("beta2", self.adamw.beta2.to_string()),
            ("adam_eps", self.adamw.eps.to_string()),
            ("weight_decay", self.adamw.weight_decay.to_string()),
            ("focal_gamma", self.focal_gamma.to_string()),
            ("focal_alpha", self.focal_alpha.map_or_else(|| "inverse_frequency".into(), |a| crate::kv::join(&a))),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// `lr0 · decay_factor^⌊epoch / decay_every⌋`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

/// Supervision for one split.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    /// Row-major `[n, k]` physical target values in the task's order.
    Regression(Vec<f64>),
    /// Class codes.
    Classification(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub views: Views,
    pub labels: Labels,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.views.count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, task: &Task, name: &str) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(validation(format!("{name} split is empty")));
        }
        match (&self.labels, task) {
            (Labels::Regression(y), Task::Regression { targets }) if y.len() == n * targets.len() => Ok(()),
            (Labels::Classification(c), Task::Classification) if c.len() == n => Ok(()),
            _ => Err(validation(format!("{name} split labels do not match the {} task", task.name()))),
        }
    }
}

/// Per-target standardisation fitted on the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl TargetScaler {
    pub fn fit(y: &[f64], k: usize) -> Result<Self> {
        let n = y.len() / k;
        if n == 0 {
            return Err(validation("cannot fit a target scaler on no samples"));
        }
        let mean: Vec<f64> = (0..k).map(|j| (0..n).map(|i| y[i * k + j]).sum::<f64>() / n as f64).collect();
        let std = (0..k)
            .map(|j| {
                let v = (0..n).map(|i| (y[i * k + j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn transform(&self, y: &[f64]) -> Vec<f64> {
        let k = self.mean.len();
        y.iter().enumerate().map(|(i, v)| (v - self.mean[i % k]) / self.std[i % k]).collect()
    }

    /// Maps standardised `(mu, log_var)` back to physical units.
    pub fn inverse(&self, mu: &[f64], log_var: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let k = self.mean.len();
        let m = mu.iter().enumerate().map(|(i, v)| v * self.std[i % k] + self.mean[i % k]).collect();
        let lv = log_var.iter().enumerate().map(|(i, v)| v + 2.0 * self.std[i % k].ln()).collect();
        (m, lv)
    }

    fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("scaler.mean".into(), crate::kv::join(&self.mean)),
            ("scaler.std".into(), crate::kv::join(&self.std)),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean of the batch losses over the epoch.
    pub train_loss: f64,
    /// Per-sample mean loss on the validation split in evaluation mode.
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub scaler: Option<TargetScaler>,
    /// Focal-loss class weights, for classification.
    pub alpha: Option<Vec<f64>>,
}

/// Tab-separated loss log with a header row.
pub fn render_log(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch\tlr\ttrain_loss\tval_loss\n");
    for e in log {
        s.push_str(&format!("{}\t{:e}\t{:.12e}\t{:.12e}\n", e.epoch, e.lr, e.train_loss, e.val_loss));
    }
    s
}

enum Objective {
    Nll { y: Vec<f64>, k: usize },
    Focal { labels: Vec<usize>, alpha: Vec<f64>, gamma: f64 },
}

impl Objective {
    fn loss(&self, out: ModelOutput, rows: &[usize]) -> Result<weaksig_tensor::Tensor> {
        match (self, out) {
            (Objective::Nll { y, k }, ModelOutput::Regression { mu, log_var }) => {
                let yb: Vec<f64> = rows.iter().flat_map(|&r| y[r * k..(r + 1) * k].iter().copied()).collect();
                gaussian_nll_tensor(&mu, &log_var, &yb)
            }
            (Objective::Focal { labels, alpha, gamma }, ModelOutput::Classification { logits }) => {
                let t: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
                focal_loss_tensor(&logits, &t, alpha, *gamma)
            }
            _ => Err(validation("model output does not match the training objective")),
        }
    }
}

fn objective(ds: &Dataset, task: &Task, scaler: Option<&TargetScaler>, alpha: Option<&[f64]>, gamma: f64) -> Objective {
    match &ds.labels {
        Labels::Regression(y) => {
            let k = match task {
                Task::Regression { targets } => targets.len(),
                Task::Classification => 0,
            };
            Objective::Nll { y: scaler.map_or_else(|| y.clone(), |s| s.transform(y)), k }
        }
        Labels::Classification(c) => Objective::Focal {
            labels: c.clone(),
            alpha: alpha.map_or_else(|| vec![1.0; 3], <[f64]>::to_vec),
            gamma,
        },
    }
}

fn batches(n: usize, size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n.div_ceil(size)).map(move |b| b * size..((b + 1) * size).min(n))
}

fn eval_loss(model: &Pdvfn, ds: &Dataset, obj: &Objective, batch: usize) -> Result<f64> {
    let session = model.store().session(false);
    let rows: Vec<usize> = (0..ds.len()).collect();
    let mut total = 0.0;
    for r in batches(rows.len(), batch) {
        let idx = &rows[r];
        let (v, m) = ds.views.batch(idx)?;
        let loss = obj.loss(model.forward(&session, &v, &m)?, idx)?.item();
        total += loss * idx.len() as f64;
    }
    Ok(total / ds.len() as f64)
}

/// Trains `model` in place with AdamW on the step-decay schedule.
///
/// Regression targets are standardised with training-split statistics;
/// classification uses focal loss with inverse-frequency class weights.
/// Batches are shuffled each epoch from `cfg.seed`. On return the model
/// holds the parameters of the epoch with the lowest validation loss.
pub fn train(model: &mut Pdvfn, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let task = model.config().task.clone();
    train.check(&task, "train")?;
    val.check(&task, "validation")?;
    let (scaler, alpha) = match (&train.labels, &task) {
        (Labels::Regression(y), Task::Regression { targets }) => (Some(TargetScaler::fit(y, targets.len())?), None),
        (Labels::Classification(c), _) => {
            (None, Some(cfg.focal_alpha.map_or_else(|| inverse_frequency_alpha(c, 3), |a| a.to_vec())))
        }
        _ => unreachable!("checked above"),
    };
    let train_obj = objective(train, &task, scaler.as_ref(), alpha.as_deref(), cfg.focal_gamma);
    let val_obj = objective(val, &task, scaler.as_ref(), alpha.as_deref(), cfg.focal_gamma);

    let mut opt = AdamW::new(model.store(), cfg.adamw);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for r in batches(order.len(), cfg.batch_size) {
            let idx = &order[r];
            let (v, m) = train.views.batch(idx)?;
            let session = model.store().session(true);
            let loss = train_obj.loss(model.forward(&session, &v, &m)?, idx)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, detail: format!("training loss {value} at batch {count}") });
            }
            loss.backward()?;
            let grads = session.grads();
            model.store_mut().absorb_updates(&session);
            opt.step(model.store_mut(), &grads, lr)?;
            if let Some(e) = model.store().entries().iter().find(|e| e.data.iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence { epoch, detail: format!("parameter {} is non-finite after batch {count}", e.name) });
            }
            sum += value;
            count += 1;
        }
        let val_loss = eval_loss(model, val, &val_obj, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, detail: format!("validation loss {val_loss}") });
        }
        log.push(EpochLog { epoch, lr, train_loss: sum / count as f64, val_loss });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.store().clone()));
        }
    }
    let (_, best_epoch, store) = best.expect("at least one epoch");
    model.load_params(&store)?;
    Ok(TrainOutcome { log, best_epoch, scaler, alpha })
}

#[derive(Clone, Debug, PartialEq)]
pub enum Predictions {
    /// Row-major `[n, k]` in physical units.
    Regression { mu: Vec<f64>, log_var: Vec<f64>, k: usize },
    /// Row-major `[n, 3]`.
    Classification { logits: Vec<f64> },
}

/// Evaluation-mode forward passes over all rows of `views`.
pub fn predict(model: &Pdvfn, views: &Views, scaler: Option<&TargetScaler>, batch: usize) -> Result<Predictions> {
    let session = model.store().session(false);
    let (mut mu, mut lv, mut logits) = (Vec::new(), Vec::new(), Vec::new());
    let rows: Vec<usize> = (0..views.count()).collect();
    for r in batches(rows.len(), batch.max(1)) {
        let (v, m) = views.batch(&rows[r])?;
        match model.forward(&session, &v, &m)? {
            ModelOutput::Regression { mu: a, log_var: b } => {
                mu.extend_from_slice(a.data());
                lv.extend_from_slice(b.data());
            }
            ModelOutput::Classification { logits: l } => logits.extend_from_slice(l.data()),
        }
    }
    Ok(match &model.config().task {
        Task::Regression { targets } => {
            let (mu, log_var) = match scaler {
                Some(s) => s.inverse(&mu, &lv),
                None => (mu, lv),
            };
            Predictions::Regression { mu, log_var, k: targets.len() }
        }
        Task::Classification => Predictions::Classification { logits },
    })
}

/// Writes the model parameters with its configuration, scaler and any
/// extra metadata.
pub fn save_checkpoint(
    w: &mut impl Write,
    model: &Pdvfn,
    scaler: Option<&TargetScaler>,
    extra: &[(String, String)],
) -> Result<()> {
    let mut meta: Vec<(String, String)> =
        model.config().to_pairs().into_iter().map(|(k, v)| (format!("model.{k}"), v)).collect();
    if let Some(s) = scaler {
        meta.extend(s.to_pairs());
    }
    meta.extend_from_slice(extra);
    Ok(model.store().save(w, &meta)?)
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Pdvfn,
    pub scaler: Option<TargetScaler>,
    /// Metadata entries other than the model configuration and scaler.
    pub meta: Vec<(String, String)>,
}

pub fn load_checkpoint(r: &mut impl BufRead) -> Result<Checkpoint> {
    let (store, meta) = ParamStore::load(r).map_err(|e| match e {
        weaksig_tensor::TensorError::Checkpoint(m) => integrity(format!("checkpoint: {m}")),
        other => other.into(),
    })?;
    let mut model_pairs = Vec::new();
    let mut rest = Vec::new();
    let (mut mean, mut std) = (None, None);
    for (k, v) in meta {
        if let Some(key) = k.strip_prefix("model.") {
            model_pairs.push((key.to_string(), v));
        } else if k == "scaler.mean" {
            mean = Some(v);
        } else if k == "scaler.std" {
            std = Some(v);
        } else {
            rest.push((k, v));
        }
    }
    let cfg = PdvfnConfig::from_kv(KvMap::from_pairs(&model_pairs, "checkpoint")?)?;
    let mut model = Pdvfn::new(cfg, 0)?;
    model.load_params(&store)?;
    let parse = |s: &str| -> Result<Vec<f64>> {
        s.split(',').map(|p| p.trim().parse().map_err(|_| validation(format!("bad scaler value {p:?}")))).collect()
    };
    let scaler = match (mean, std) {
        (Some(m), Some(s)) => Some(TargetScaler { mean: parse(&m)?, std: parse(&s)? }),
        (None, None) => None,
        _ => return Err(validation("checkpoint has a partial target scaler")),
    };
    Ok(Checkpoint { model, scaler, meta: rest })
}
