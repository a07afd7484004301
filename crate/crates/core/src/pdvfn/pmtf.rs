//! Time-frequency branch.
//!
//! The `[n, H, W]` map (frames × bins) runs through a three-scale pyramid
//! and a reverse-convolution block in parallel. Their channel concatenation
//! is reweighted per frequency bin, resized to a fixed grid, flattened
//! frame-major into tokens and passed through a stack of selective
//! state-space blocks.

use rand_chacha::ChaCha8Rng;
use weaksig_tensor::{ParamId, ParamStore, Session, Tensor};

use super::config::PmtfConfig;
use super::layers::{BatchNorm, Conv, Dense, LayerNorm};
use crate::error::{stage, validation, Result};

/// Three parallel 3×3 convolutions at half, native and double resolution.
/// Requires even spatial dims of at least 4.
#[derive(Clone, Debug)]
pub struct Mfpf {
    pub coarse: Conv,
    pub native: Conv,
    pub fine: Conv,
}

impl Mfpf {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, branch: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            coarse: Conv::new_2d(store, &format!("{name}.coarse"), c_in, branch, 3, rng),
            native: Conv::new_2d(store, &format!("{name}.native"), c_in, branch, 3, rng),
            fine: Conv::new_2d(store, &format!("{name}.fine"), c_in, branch, 3, rng),
        }
    }

    /// Returns the three paths before concatenation, in coarse, native,
    /// fine order.
    pub fn paths(&self, s: &Session, x: &Tensor) -> Result<[Tensor; 3]> {
        let sh = x.shape();
        if sh.len() != 4 || sh[2] < 4 || sh[3] < 4 || sh[2] % 2 != 0 || sh[3] % 2 != 0 {
            return Err(validation(format!("pyramid input must be [n, c, h, w] with even h, w >= 4, got {sh:?}")));
        }
        let coarse = self.coarse.same_2d(s, &x.avg_pool2d(2, 2)?)?.upsample_nearest2d(2)?;
        let native = self.native.same_2d(s, x)?;
        let fine = self.fine.same_2d(s, &x.upsample_nearest2d(2)?)?.avg_pool2d(2, 2)?;
        Ok([coarse, native, fine])
    }

    /// `[n, c, h, w]` → `[n, 3 · branch, h, w]`.
    pub fn forward(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        Ok(Tensor::concat(&self.paths(s, x)?, 1)?.relu())
    }
}

/// LayerNorm → 1×1 expand → 5×5 reverse conv → LayerNorm → 1×1 reduce →
/// BatchNorm, at unchanged resolution. The expanded width is
/// `ratio · c_out`.
#[derive(Clone, Debug)]
pub struct RcBlock {
    pub norm_in: LayerNorm,
    pub expand: Conv,
    pub reverse: Conv,
    pub norm_mid: LayerNorm,
    pub reduce: Conv,
    pub bn: BatchNorm,
}

pub const RC_KERNEL: usize = 5;

impl RcBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        ratio: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if ratio == 0 || c_in == 0 || c_out == 0 {
            return Err(validation("reverse-convolution block needs positive ratio and channels"));
        }
        let hidden = ratio * c_out;
        Ok(Self {
            norm_in: LayerNorm::new(store, &format!("{name}.norm_in"), &[c_in, 1, 1]),
            expand: Conv::new_2d(store, &format!("{name}.expand"), c_in, hidden, 1, rng),
            reverse: Conv::new_reverse(store, &format!("{name}.reverse"), hidden, hidden, RC_KERNEL, rng),
            norm_mid: LayerNorm::new(store, &format!("{name}.norm_mid"), &[hidden, 1, 1]),
            reduce: Conv::new_2d(store, &format!("{name}.reduce"), hidden, c_out, 1, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out),
        })
    }

    pub fn forward(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 4 {
            return Err(validation(format!("reverse-convolution block expects [n, c, h, w], got {:?}", x.shape())));
        }
        let y = self.norm_in.forward(s, x, &[1, 2, 3])?;
        let y = self.expand.same_2d(s, &y)?;
        let y = self.reverse.reverse_2d(s, &y)?;
        let y = self.norm_mid.forward(s, &y, &[1, 2, 3])?;
        let y = self.reduce.same_2d(s, &y)?;
        self.bn.forward(s, &y)
    }
}

/// Per-frequency gating followed by a 3×3 convolution and adaptive
/// pooling onto `target`.
#[derive(Clone, Debug)]
pub struct Ffc {
    pub squeeze: Conv,
    pub excite: Conv,
    pub resize: Conv,
    pub target: (usize, usize),
}

impl Ffc {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        target: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if reduction == 0 || reduction > channels {
            return Err(validation(format!("frequency gate reduction {reduction} must be in 1..={channels}")));
        }
        let hidden = channels / reduction;
        Ok(Self {
            squeeze: Conv::new_2d(store, &format!("{name}.squeeze"), channels, hidden, 1, rng),
            excite: Conv::new_2d(store, &format!("{name}.excite"), hidden, channels, 1, rng),
            resize: Conv::new_2d(store, &format!("{name}.resize"), channels, channels, 3, rng),
            target,
        })
    }

    /// Gate weights `[n, c, 1, w]`, each in (0, 1).
    pub fn weights(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        let w = x.shape()[3];
        let pooled = x.adaptive_avg_pool2d(1, w)?;
        Ok(self.excite.same_2d(s, &self.squeeze.same_2d(s, &pooled)?.relu())?.sigmoid())
    }

    pub fn forward(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        let sh = x.shape();
        let (th, tw) = self.target;
        if sh.len() != 4 || th > sh[2] || tw > sh[3] {
            return Err(validation(format!("frequency compression target {th}x{tw} does not fit input {sh:?}")));
        }
        let gated = x.mul(&self.weights(s, x)?)?;
        Ok(self.resize.same_2d(s, &gated)?.adaptive_avg_pool2d(th, tw)?)
    }
}

/// Simplified selective state-space block over `[n, T, d]`:
///
/// ```text
/// u = LN(x)
/// Δ = softplus(u W_Δ + b_Δ),  B = u W_B,  C = u W_C,  A = −exp(A_log)
/// h_t = exp(Δ_t A) ⊙ h_{t−1} + (Δ_t u_t) B_t
/// y_t = C_t · h_t + D ⊙ u_t
/// out = x + y W_o + b_o
/// ```
///
/// The recurrence only reads steps `≤ t`, so the block is causal.
#[derive(Clone, Debug)]
pub struct SsmBlock {
    pub norm: LayerNorm,
    pub delta: Dense,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub a_log: ParamId,
    pub skip: ParamId,
    pub out: Dense,
    pub state_dim: usize,
}

impl SsmBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, state_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if d == 0 || state_dim == 0 {
            return Err(validation("state-space block needs positive width and state dim"));
        }
        // A_k = −k for k = 1..=state_dim on every channel
        let a_init: Vec<f64> = (0..d).flat_map(|_| (1..=state_dim).map(|k| (k as f64).ln())).collect();
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), &[d]),
            delta: Dense::new(store, &format!("{name}.delta"), d, d, rng),
            w_b: store.uniform(&format!("{name}.w_b"), &[d, state_dim], d, rng),
            w_c: store.uniform(&format!("{name}.w_c"), &[d, state_dim], d, rng),
            a_log: store.add(&format!("{name}.a_log"), &[d, state_dim], a_init, true),
            skip: store.constant(&format!("{name}.skip"), &[d], 1.0),
            out: Dense::new(store, &format!("{name}.out"), d, d, rng),
            state_dim,
        })
    }

    /// Selective scan without the residual: `y` for normalised input `u`.
    pub fn scan(&self, s: &Session, u: &Tensor) -> Result<Tensor> {
        let sh = u.shape();
        if sh.len() != 3 {
            return Err(validation(format!("state-space block expects [n, T, d], got {sh:?}")));
        }
        let (n, t, d) = (sh[0], sh[1], sh[2]);
        let st = self.state_dim;
        let delta = self.delta.forward(s, u)?.softplus();
        let b = u.matmul(s.var(self.w_b))?;
        let c = u.matmul(s.var(self.w_c))?;
        let a = s.var(self.a_log).exp().neg();
        let d_a = delta.reshape(&[n, t, d, 1])?.mul(&a)?.exp();
        let d_bu = delta.mul(u)?.reshape(&[n, t, d, 1])?.mul(&b.reshape(&[n, t, 1, st])?)?;
        let mut h = Tensor::zeros(&[n, 1, d, st]);
        let mut states = Vec::with_capacity(t);
        for step in 0..t {
            h = d_a.narrow(1, step, 1)?.mul(&h)?.add(&d_bu.narrow(1, step, 1)?)?;
            states.push(h.clone());
        }
        let hs = Tensor::concat(&states, 1)?;
        let y = hs.mul(&c.reshape(&[n, t, 1, st])?)?.sum_axes(&[3], false)?;
        Ok(y.add(&u.mul(s.var(self.skip))?)?)
    }

    pub fn forward(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 3 {
            return Err(validation(format!("state-space block expects [n, T, d], got {:?}", x.shape())));
        }
        let last = x.rank() - 1;
        let u = self.norm.forward(s, x, &[last])?;
        let y = self.scan(s, &u)?;
        Ok(x.add(&self.out.forward(s, &y)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct Pmtf {
    cfg: PmtfConfig,
    mfpf: Mfpf,
    rc: RcBlock,
    ffc: Ffc,
    ssm: Vec<SsmBlock>,
    out: Dense,
}

impl Pmtf {
    pub fn new(store: &mut ParamStore, cfg: &PmtfConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let fused = cfg.fused_channels();
        Ok(Self {
            cfg: cfg.clone(),
            mfpf: Mfpf::new(store, "pmtf.mfpf", 1, cfg.branch_channels, rng),
            rc: RcBlock::new(store, "pmtf.rc", 1, cfg.rc_ratio, cfg.rc_channels, rng)?,
            ffc: Ffc::new(store, "pmtf.ffc", fused, cfg.ffc_reduction, cfg.ffc_target, rng)?,
            ssm: (0..cfg.ssm_blocks)
                .map(|i| SsmBlock::new(store, &format!("pmtf.ssm{i}"), fused, cfg.state_dim, rng))
                .collect::<Result<_>>()?,
            out: Dense::new(store, "pmtf.out", fused, cfg.output_dim, rng),
        })
    }

    /// Fused, compressed feature grid `[n, C, th, tw]` for `[n, H, W]` maps.
    pub fn compress(&self, s: &Session, maps: &Tensor) -> Result<Tensor> {
        if maps.rank() != 3 {
            return Err(validation(format!("time-frequency view must be [n, frames, bins], got {:?}", maps.shape())));
        }
        let sh = maps.shape();
        let x = maps.reshape(&[sh[0], 1, sh[1], sh[2]])?;
        let pyramid = stage("mfpf", self.mfpf.forward(s, &x))?;
        let rc = stage("rc_block", self.rc.forward(s, &x))?;
        let fused = Tensor::concat(&[pyramid, rc], 1)?;
        stage("ffc", self.ffc.forward(s, &fused))
    }

    pub fn forward(&self, s: &Session, maps: &Tensor) -> Result<Tensor> {
        let grid = self.compress(s, maps)?;
        let (n, c) = (grid.shape()[0], grid.shape()[1]);
        let (th, tw) = self.cfg.ffc_target;
        let mut tokens = grid.permute(&[0, 2, 3, 1])?.reshape(&[n, th * tw, c])?;
        for block in &self.ssm {
            tokens = stage("ssm", block.forward(s, &tokens))?;
        }
        self.out.forward(s, &tokens.mean_axes(&[1], false)?)
    }
}
