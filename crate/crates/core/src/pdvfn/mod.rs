//! Parallel dual-view fusion network.
//!
//! The vector view (the first `input_len` processed values) feeds the
//! [`acr::Acr`] branch; the log-compressed STFT magnitude feeds the
//! [`pmtf::Pmtf`] branch. The two feature vectors are concatenated and
//! passed to a two-layer head that emits either `(mu, log_var)` per
//! regression target or three class logits.

pub mod acr;
pub mod config;
pub mod layers;
pub mod pmtf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use weaksig_tensor::{ParamStore, Session, Tensor};

pub use config::{AcrConfig, PdvfnConfig, PmtfConfig, Target, Task};

use crate::dualview::{log_compress, Stft};
use crate::error::{stage, validation, Result};
use layers::Dense;

/// Head output for a batch.
#[derive(Clone, Debug)]
pub enum ModelOutput {
    /// `mu` and `log_var` are `[n, k]` in the configured target order.
    Regression { mu: Tensor, log_var: Tensor },
    /// `[n, 3]` logits ordered NMP, CEMP, CnMP.
    Classification { logits: Tensor },
}

#[derive(Clone, Debug)]
pub struct Pdvfn {
    cfg: PdvfnConfig,
    store: ParamStore,
    acr: acr::Acr,
    pmtf: pmtf::Pmtf,
    hidden: Dense,
    output: Dense,
}

impl Pdvfn {
    /// Builds the network with parameters drawn from `seed`.
    pub fn new(cfg: PdvfnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let acr = acr::Acr::new(&mut store, &cfg.acr, &mut rng)?;
        let pmtf = pmtf::Pmtf::new(&mut store, &cfg.pmtf, &mut rng)?;
        let fused = cfg.acr.output_dim + cfg.pmtf.output_dim;
        let hidden = Dense::new(&mut store, "head.hidden", fused, cfg.head_hidden, &mut rng);
        let output = Dense::new(&mut store, "head.out", cfg.head_hidden, cfg.task.output_dim(), &mut rng);
        Ok(Self { cfg, store, acr, pmtf, hidden, output })
    }

    pub fn config(&self) -> &PdvfnConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn acr(&self) -> &acr::Acr {
        &self.acr
    }

    pub fn pmtf(&self) -> &pmtf::Pmtf {
        &self.pmtf
    }

    /// Replaces every parameter value with those of `other`, which must
    /// have the same names and shapes.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        Ok(self.store.load_values_from(other)?)
    }

    /// Branch features `([n, acr.output_dim], [n, pmtf.output_dim])`.
    pub fn features(&self, s: &Session, vectors: &Tensor, maps: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, len) = match vectors.shape() {
            [n, len] => (*n, *len),
            other => return Err(validation(format!("vector view must be [n, L], got {other:?}"))),
        };
        if len != self.cfg.input_len {
            return Err(validation(format!("vector view has length {len}, model expects {}", self.cfg.input_len)));
        }
        let (h, w) = self.cfg.map_shape()?;
        if maps.shape() != [n, h, w] {
            return Err(validation(format!("time-frequency view {:?} does not match [{n}, {h}, {w}]", maps.shape())));
        }
        let a = stage("acr", self.acr.forward(s, vectors))?;
        let p = stage("pmtf", self.pmtf.forward(s, maps))?;
        Ok((a, p))
    }

    /// Head applied to concatenated branch features `[n, a + p]`.
    pub fn head(&self, s: &Session, fused: &Tensor) -> Result<ModelOutput> {
        let z = self.output.forward(s, &self.hidden.forward(s, fused)?.relu())?;
        Ok(match &self.cfg.task {
            Task::Regression { targets } => {
                let k = targets.len();
                ModelOutput::Regression { mu: z.narrow(1, 0, k)?, log_var: z.narrow(1, k, k)? }
            }
            Task::Classification => ModelOutput::Classification { logits: z },
        })
    }

    pub fn forward(&self, s: &Session, vectors: &Tensor, maps: &Tensor) -> Result<ModelOutput> {
        let (a, p) = self.features(s, vectors, maps)?;
        stage("head", self.head(s, &Tensor::concat(&[a, p], 1)?))
    }
}

/// Both views of a set of spectra, stored row-major for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct Views {
    pub len: usize,
    pub frames: usize,
    pub bins: usize,
    /// `count × len`.
    pub vectors: Vec<f64>,
    /// `count × frames × bins`.
    pub maps: Vec<f64>,
}

impl Views {
    /// Truncates each spectrum to `cfg.input_len` and computes its
    /// log-compressed STFT, dropping a trailing odd frame or bin.
    pub fn build<S: AsRef<[f64]>>(cfg: &PdvfnConfig, spectra: &[S]) -> Result<Self> {
        let len = cfg.input_len;
        let (frames, bins) = cfg.map_shape()?;
        let stft = Stft::new(cfg.stft);
        let mut vectors = Vec::with_capacity(spectra.len() * len);
        let mut maps = Vec::with_capacity(spectra.len() * frames * bins);
        for (i, spec) in spectra.iter().enumerate() {
            let spec = spec.as_ref();
            if spec.len() < len {
                return Err(validation(format!("spectrum {i} has {} values, views need {len}", spec.len())));
            }
            let v = &spec[..len];
            let map = log_compress(&stft.magnitude(v)?, cfg.tf_eps)?;
            vectors.extend_from_slice(v);
            for f in 0..frames {
                maps.extend_from_slice(&map.row(f)[..bins]);
            }
        }
        Ok(Self { len, frames, bins, vectors, maps })
    }

    pub fn count(&self) -> usize {
        if self.len == 0 {
            0
        } else {
            self.vectors.len() / self.len
        }
    }

    /// Tensors `[b, len]` and `[b, frames, bins]` for the given rows.
    pub fn batch(&self, rows: &[usize]) -> Result<(Tensor, Tensor)> {
        let m = self.frames * self.bins;
        let mut v = Vec::with_capacity(rows.len() * self.len);
        let mut t = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            if r >= self.count() {
                return Err(validation(format!("row {r} out of range for {} samples", self.count())));
            }
            v.extend_from_slice(&self.vectors[r * self.len..(r + 1) * self.len]);
            t.extend_from_slice(&self.maps[r * m..(r + 1) * m]);
        }
        Ok((
            Tensor::new(v, &[rows.len(), self.len])?,
            Tensor::new(t, &[rows.len(), self.frames, self.bins])?,
        ))
    }
}
