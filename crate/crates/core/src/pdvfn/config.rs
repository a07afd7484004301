use std::fmt;

use crate::dualview::{StftConfig, WindowFn};
use crate::error::{validation, Result};
use crate::kv::{join, KvMap};

/// Regression target, in the fixed output order of the joint head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Target {
    TEff,
    LogG,
    FeH,
    CH,
}

impl Target {
    pub const ALL: [Target; 4] = [Target::TEff, Target::LogG, Target::FeH, Target::CH];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Target::TEff => "teff",
            Target::LogG => "logg",
            Target::FeH => "feh",
            Target::CH => "ch",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| validation(format!("unknown target {s:?} (expected teff, logg, feh or ch)")))
    }

    /// `all` or a comma-separated list.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        if s == "all" {
            return Ok(Self::ALL.to_vec());
        }
        let list: Vec<Target> = s.split(',').map(|p| Self::parse(p.trim())).collect::<Result<_>>()?;
        if list.is_empty() {
            return Err(validation("empty target list"));
        }
        for (i, t) in list.iter().enumerate() {
            if list[..i].contains(t) {
                return Err(validation(format!("target {t} listed twice")));
            }
        }
        Ok(list)
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Task {
    /// Heteroscedastic regression of the listed targets.
    Regression { targets: Vec<Target> },
    /// Three-way NMP / CEMP / CnMP classification.
    Classification,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Regression { .. } => "regression",
            Task::Classification => "classification",
        }
    }

    pub fn parse(task: &str, targets: &str) -> Result<Self> {
        match task {
            "regression" => Ok(Task::Regression { targets: Target::parse_list(targets)? }),
            "classification" => Ok(Task::Classification),
            _ => Err(validation(format!("unknown task {task:?} (expected regression or classification)"))),
        }
    }

    /// Width of the head output.
    pub fn output_dim(&self) -> usize {
        match self {
            Task::Regression { targets } => 2 * targets.len(),
            Task::Classification => 3,
        }
    }

    pub fn targets_string(&self) -> String {
        match self {
            Task::Regression { targets } => targets.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(","),
            Task::Classification => "all".into(),
        }
    }
}

/// Vector-view branch.
#[derive(Clone, Debug, PartialEq)]
pub struct AcrConfig {
    pub channels: usize,
    /// Kernel of the two first-stage convolutions.
    pub kernel1: usize,
    /// Kernel of the second-stage convolution.
    pub kernel2: usize,
    /// Max-pool factor after each stage.
    pub pool1: usize,
    pub pool2: usize,
    pub cbam_reduction: usize,
    pub cbam_kernel: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub heads: usize,
    pub output_dim: usize,
}

/// Time-frequency branch.
#[derive(Clone, Debug, PartialEq)]
pub struct PmtfConfig {
    /// Channels of each of the three pyramid paths.
    pub branch_channels: usize,
    /// Expansion ratio of the reverse-convolution block.
    pub rc_ratio: usize,
    pub rc_channels: usize,
    /// Spatial size `(frames, bins)` after frequency-aware compression.
    pub ffc_target: (usize, usize),
    pub ffc_reduction: usize,
    pub ssm_blocks: usize,
    pub state_dim: usize,
    pub output_dim: usize,
}

impl PmtfConfig {
    /// Token width of the state-space stage.
    pub fn fused_channels(&self) -> usize {
        3 * self.branch_channels + self.rc_channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PdvfnConfig {
    /// Length of the vector view: the first `input_len` processed values.
    pub input_len: usize,
    pub stft: StftConfig,
    /// `ε` in the `ln(|STFT| + ε)` compression of the second view.
    pub tf_eps: f64,
    pub acr: AcrConfig,
    pub pmtf: PmtfConfig,
    pub head_hidden: usize,
    pub task: Task,
}

impl Default for PdvfnConfig {
    /// Full-length configuration for 3,450-point spectra.
    fn default() -> Self {
        Self {
            input_len: 3450,
            stft: StftConfig::default(),
            tf_eps: 1e-3,
            acr: AcrConfig {
                channels: 16,
                kernel1: 7,
                kernel2: 5,
                pool1: 4,
                pool2: 4,
                cbam_reduction: 4,
                cbam_kernel: 7,
                gru_hidden: 32,
                gru_layers: 4,
                heads: 4,
                output_dim: 64,
            },
            pmtf: PmtfConfig {
                branch_channels: 8,
                rc_ratio: 2,
                rc_channels: 8,
                ffc_target: (8, 16),
                ffc_reduction: 4,
                ssm_blocks: 4,
                state_dim: 16,
                output_dim: 64,
            },
            head_hidden: 64,
            task: Task::Regression { targets: Target::ALL.to_vec() },
        }
    }
}

impl PdvfnConfig {
    /// Desk-scale configuration: 512-point vector view and a 26×16 map.
    pub fn toy() -> Self {
        Self {
            input_len: 512,
            stft: StftConfig { window_length: 30, hop: 20, window_fn: WindowFn::Hann },
            tf_eps: 1e-3,
            acr: AcrConfig {
                channels: 8,
                kernel1: 7,
                kernel2: 5,
                pool1: 4,
                pool2: 2,
                cbam_reduction: 4,
                cbam_kernel: 7,
                gru_hidden: 8,
                gru_layers: 4,
                heads: 2,
                output_dim: 16,
            },
            pmtf: PmtfConfig {
                branch_channels: 4,
                rc_ratio: 2,
                rc_channels: 4,
                ffc_target: (4, 8),
                ffc_reduction: 4,
                ssm_blocks: 4,
                state_dim: 4,
                output_dim: 16,
            },
            head_hidden: 32,
            task: Task::Classification,
        }
    }

    /// Map shape fed to the time-frequency branch: the STFT shape with a
    /// trailing odd frame or bin dropped.
    pub fn map_shape(&self) -> Result<(usize, usize)> {
        let (f, b) = self.stft.shape(self.input_len)?;
        Ok((f - f % 2, b - b % 2))
    }

    /// Number of GRU steps after the two pooling stages.
    pub fn acr_steps(&self) -> usize {
        self.input_len / self.acr.pool1 / self.acr.pool2
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.acr;
        let p = &self.pmtf;
        let positive = [
            ("input_len", self.input_len),
            ("acr.channels", a.channels),
            ("acr.pool1", a.pool1),
            ("acr.pool2", a.pool2),
            ("acr.gru_hidden", a.gru_hidden),
            ("acr.gru_layers", a.gru_layers),
            ("acr.heads", a.heads),
            ("acr.output_dim", a.output_dim),
            ("pmtf.branch_channels", p.branch_channels),
            ("pmtf.rc_ratio", p.rc_ratio),
            ("pmtf.rc_channels", p.rc_channels),
            ("pmtf.ssm_blocks", p.ssm_blocks),
            ("pmtf.state_dim", p.state_dim),
            ("pmtf.output_dim", p.output_dim),
            ("head_hidden", self.head_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(validation(format!("{name} must be positive")));
            }
        }
        for (name, k) in [("acr.kernel1", a.kernel1), ("acr.kernel2", a.kernel2), ("acr.cbam_kernel", a.cbam_kernel)] {
            if k % 2 == 0 {
                return Err(validation(format!("{name} must be odd, got {k}")));
            }
        }
        if a.cbam_reduction == 0 || a.cbam_reduction > a.channels {
            return Err(validation(format!("acr.cbam_reduction must be in 1..={}", a.channels)));
        }
        if self.acr_steps() == 0 {
            return Err(validation("pooling leaves no steps for the recurrent stage"));
        }
        if (2 * a.gru_hidden) % a.heads != 0 {
            return Err(validation(format!("acr.heads {} must divide 2 * gru_hidden", a.heads)));
        }
        let (h, w) = self.map_shape()?;
        if h < 4 || w < 4 {
            return Err(validation(format!("time-frequency map {h}x{w} is below the 4x4 minimum")));
        }
        let (th, tw) = p.ffc_target;
        if th == 0 || tw == 0 || th > h || tw > w {
            return Err(validation(format!("pmtf.ffc_target {th}x{tw} must fit in the {h}x{w} map")));
        }
        if p.ffc_reduction == 0 || p.ffc_reduction > p.fused_channels() {
            return Err(validation(format!("pmtf.ffc_reduction must be in 1..={}", p.fused_channels())));
        }
        if !(self.tf_eps > 0.0) {
            return Err(validation("tf_eps must be positive"));
        }
        if let Task::Regression { targets } = &self.task {
            if targets.is_empty() {
                return Err(validation("regression needs at least one target"));
            }
        }
        Ok(())
    }

    /// Reads model keys over the toy defaults, or over the full defaults
    /// when `preset = full`. `task` and `targets` are optional.
    pub fn from_kv(mut kv: KvMap) -> Result<Self> {
        let preset = kv.take_raw("preset").unwrap_or_else(|| "toy".into());
        let d = match preset.as_str() {
            "toy" => Self::toy(),
            "full" => Self::default(),
            other => return Err(validation(format!("unknown preset {other:?} (expected toy or full)"))),
        };
        let window_fn = match kv.take_raw("stft.window_fn") {
            Some(s) => WindowFn::parse(&s)?,
            None => d.stft.window_fn,
        };
        let target = kv.take_list("pmtf.ffc_target", vec![d.pmtf.ffc_target.0, d.pmtf.ffc_target.1])?;
        if target.len() != 2 {
            return Err(validation("pmtf.ffc_target needs two values"));
        }
        let task_name = kv.take_raw("task").unwrap_or_else(|| d.task.name().into());
        let targets = kv.take_raw("targets").unwrap_or_else(|| "all".into());
        let cfg = Self {
            input_len: kv.take("input_len", d.input_len)?,
            stft: StftConfig {
                window_length: kv.take("stft.window_length", d.stft.window_length)?,
                hop: kv.take("stft.hop", d.stft.hop)?,
                window_fn,
            },
            tf_eps: kv.take("tf_eps", d.tf_eps)?,
            acr: AcrConfig {
                channels: kv.take("acr.channels", d.acr.channels)?,
                kernel1: kv.take("acr.kernel1", d.acr.kernel1)?,
                kernel2: kv.take("acr.kernel2", d.acr.kernel2)?,
                pool1: kv.take("acr.pool1", d.acr.pool1)?,
                pool2: kv.take("acr.pool2", d.acr.pool2)?,
                cbam_reduction: kv.take("acr.cbam_reduction", d.acr.cbam_reduction)?,
                cbam_kernel: kv.take("acr.cbam_kernel", d.acr.cbam_kernel)?,
                gru_hidden: kv.take("acr.gru_hidden", d.acr.gru_hidden)?,
                gru_layers: kv.take("acr.gru_layers", d.acr.gru_layers)?,
                heads: kv.take("acr.heads", d.acr.heads)?,
                output_dim: kv.take("acr.output_dim", d.acr.output_dim)?,
            },
            pmtf: PmtfConfig {
                branch_channels: kv.take("pmtf.branch_channels", d.pmtf.branch_channels)?,
                rc_ratio: kv.take("pmtf.rc_ratio", d.pmtf.rc_ratio)?,
                rc_channels: kv.take("pmtf.rc_channels", d.pmtf.rc_channels)?,
                ffc_target: (target[0], target[1]),
                ffc_reduction: kv.take("pmtf.ffc_reduction", d.pmtf.ffc_reduction)?,
                ssm_blocks: kv.take("pmtf.ssm_blocks", d.pmtf.ssm_blocks)?,
                state_dim: kv.take("pmtf.state_dim", d.pmtf.state_dim)?,
                output_dim: kv.take("pmtf.output_dim", d.pmtf.output_dim)?,
            },
            head_hidden: kv.take("head_hidden", d.head_hidden)?,
            task: Task::parse(&task_name, &targets)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Complete snapshot for [`PdvfnConfig::from_kv`].
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let a = &self.acr;
        let p = &self.pmtf;
        let pairs: Vec<(&str, String)> = vec![
            ("input_len", self.input_len.to_string()),
            ("stft.window_length", self.stft.window_length.to_string()),
            ("stft.hop", self.stft.hop.to_string()),
            ("stft.window_fn", self.stft.window_fn.as_str().into()),
            ("tf_eps", self.tf_eps.to_string()),
            ("acr.channels", a.channels.to_string()),
            ("acr.kernel1", a.kernel1.to_string()),
            ("acr.kernel2", a.kernel2.to_string()),
            ("acr.pool1", a.pool1.to_string()),
            ("acr.pool2", a.pool2.to_string()),
            ("acr.cbam_reduction", a.cbam_reduction.to_string()),
            ("acr.cbam_kernel", a.cbam_kernel.to_string()),
            ("acr.gru_hidden", a.gru_hidden.to_string()),
            ("acr.gru_layers", a.gru_layers.to_string()),
            ("acr.heads", a.heads.to_string()),
            ("acr.output_dim", a.output_dim.to_string()),
            ("pmtf.branch_channels", p.branch_channels.to_string()),
            ("pmtf.rc_ratio", p.rc_ratio.to_string()),
            ("pmtf.rc_channels", p.rc_channels.to_string()),
            ("pmtf.ffc_target", join(&[p.ffc_target.0, p.ffc_target.1])),
            ("pmtf.ffc_reduction", p.ffc_reduction.to_string()),
            ("pmtf.ssm_blocks", p.ssm_blocks.to_string()),
            ("pmtf.state_dim", p.state_dim.to_string()),
            ("pmtf.output_dim", p.output_dim.to_string()),
            ("head_hidden", self.head_hidden.to_string()),
            ("task", self.task.name().into()),
            ("targets", self.task.targets_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}
