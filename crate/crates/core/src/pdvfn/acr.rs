//! Vector-view branch: attention-augmented convolutions feeding a
//! bidirectional GRU stack and multi-head self-attention.
//!
//! `[n, L]` → conv/conv/pool/CBAM → conv/pool/CBAM → `[n, T, c]` → BiGRU
//! → MHA → mean over steps → dense → `[n, output_dim]`.

use rand_chacha::ChaCha8Rng;
use weaksig_tensor::nn::{self, AttentionWeights, GruLayer, GruWeights};
use weaksig_tensor::{ParamId, ParamStore, Session, Tensor};

use super::config::AcrConfig;
use super::layers::{Cbam, Conv, Dense};
use crate::error::{validation, Result};

#[derive(Clone, Debug)]
struct GruParams {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
}

impl GruParams {
    fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w_ih: store.uniform(&format!("{name}.w_ih"), &[d_in, 3 * hidden], hidden, rng),
            w_hh: store.uniform(&format!("{name}.w_hh"), &[hidden, 3 * hidden], hidden, rng),
            b_ih: store.constant(&format!("{name}.b_ih"), &[3 * hidden], 0.0),
            b_hh: store.constant(&format!("{name}.b_hh"), &[3 * hidden], 0.0),
        }
    }

    fn bind(&self, s: &Session) -> GruWeights {
        GruWeights {
            w_ih: s.var(self.w_ih).clone(),
            w_hh: s.var(self.w_hh).clone(),
            b_ih: s.var(self.b_ih).clone(),
            b_hh: s.var(self.b_hh).clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Acr {
    cfg: AcrConfig,
    conv1a: Conv,
    conv1b: Conv,
    cbam1: Cbam,
    conv2: Conv,
    cbam2: Cbam,
    gru: Vec<(GruParams, GruParams)>,
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    out: Dense,
}

/// Intermediate activations of one [`Acr`] pass.
#[derive(Clone, Debug)]
pub struct AcrTrace {
    /// `[n, T, 2 * gru_hidden]`.
    pub sequence: Tensor,
    /// `[n, heads, T, T]`.
    pub attention: Tensor,
    /// `[n, output_dim]`.
    pub output: Tensor,
}

impl Acr {
    pub fn new(store: &mut ParamStore, cfg: &AcrConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.channels;
        let h = cfg.gru_hidden;
        let d = 2 * h;
        let gru = (0..cfg.gru_layers)
            .map(|l| {
                let d_in = if l == 0 { c } else { d };
                (
                    GruParams::new(store, &format!("acr.gru{l}.fwd"), d_in, h, rng),
                    GruParams::new(store, &format!("acr.gru{l}.bwd"), d_in, h, rng),
                )
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            conv1a: Conv::new_1d(store, "acr.conv1a", 1, c, cfg.kernel1, rng),
            conv1b: Conv::new_1d(store, "acr.conv1b", c, c, cfg.kernel1, rng),
            cbam1: Cbam::new(store, "acr.cbam1", c, cfg.cbam_reduction, cfg.cbam_kernel, 1, rng)?,
            conv2: Conv::new_1d(store, "acr.conv2", c, c, cfg.kernel2, rng),
            cbam2: Cbam::new(store, "acr.cbam2", c, cfg.cbam_reduction, cfg.cbam_kernel, 1, rng)?,
            gru,
            q: Dense::new(store, "acr.attn.q", d, d, rng),
            k: Dense::new(store, "acr.attn.k", d, d, rng),
            v: Dense::new(store, "acr.attn.v", d, d, rng),
            o: Dense::new(store, "acr.attn.o", d, d, rng),
            out: Dense::new(store, "acr.out", d, cfg.output_dim, rng),
        })
    }

    /// Convolutional stages only: `[n, L]` → `[n, c, T]`.
    pub fn encode(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 {
            return Err(validation(format!("vector view must be [n, L], got {:?}", x.shape())));
        }
        let (n, len) = (x.shape()[0], x.shape()[1]);
        if len / self.cfg.pool1 / self.cfg.pool2 == 0 {
            return Err(validation(format!("vector view of length {len} is shorter than the pooling span")));
        }
        let y = x.reshape(&[n, 1, len])?;
        let y = self.conv1a.same_1d(s, &y)?.relu();
        let y = self.conv1b.same_1d(s, &y)?.relu();
        let y = y.max_pool1d(self.cfg.pool1, self.cfg.pool1)?;
        let y = self.cbam1.forward(s, &y)?;
        let y = self.conv2.same_1d(s, &y)?.relu();
        let y = y.max_pool1d(self.cfg.pool2, self.cfg.pool2)?;
        self.cbam2.forward(s, &y)
    }

    pub fn forward_traced(&self, s: &Session, x: &Tensor) -> Result<AcrTrace> {
        let seq = self.encode(s, x)?.permute(&[0, 2, 1])?;
        let layers: Vec<GruLayer> =
            self.gru.iter().map(|(f, b)| GruLayer { forward: f.bind(s), backward: b.bind(s) }).collect();
        let sequence = nn::gru_bidirectional(&seq, &layers)?;
        let weights = AttentionWeights {
            wq: s.var(self.q.w).clone(),
            bq: s.var(self.q.b).clone(),
            wk: s.var(self.k.w).clone(),
            bk: s.var(self.k.b).clone(),
            wv: s.var(self.v.w).clone(),
            bv: s.var(self.v.b).clone(),
            wo: s.var(self.o.w).clone(),
            bo: s.var(self.o.b).clone(),
        };
        let (attended, attention) = nn::multi_head_attention(&sequence, &weights, self.cfg.heads)?;
        let pooled = attended.mean_axes(&[1], false)?;
        let output = self.out.forward(s, &pooled)?;
        Ok(AcrTrace { sequence, attention, output })
    }

    pub fn forward(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        self.forward_traced(s, x).map(|t| t.output)
    }
}
