//! Time-frequency view: STFT magnitude of a processed spectrum.
//!
//! The signal is reflect-padded by `window_length / 2` on both sides and cut
//! into frames every `hop` samples; each frame is windowed and transformed,
//! keeping the `window_length / 2 + 1` non-negative frequency bins.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{integrity, validation, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowFn {
    /// Periodic Hann, `0.5 − 0.5 cos(2πi / N)`.
    Hann,
    Rectangular,
}

impl WindowFn {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hann" => Ok(Self::Hann),
            "rectangular" => Ok(Self::Rectangular),
            _ => Err(validation(format!("unknown window function {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Hann => "hann",
            Self::Rectangular => "rectangular",
        }
    }

    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Self::Rectangular => vec![1.0; n],
            Self::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

/// Padding is always reflect padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop: usize,
    pub window_fn: WindowFn,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { window_length: 256, hop: 64, window_fn: WindowFn::Hann }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.window_length / 2 + 1
    }

    fn pad(&self) -> usize {
        self.window_length / 2
    }

    /// `(frames, bins)` for a signal of `len` samples.
    pub fn shape(&self, len: usize) -> Result<(usize, usize)> {
        if self.window_length == 0 || self.hop == 0 || self.hop > self.window_length {
            return Err(validation(format!(
                "need 0 < hop <= window_length, got hop {} and window {}",
                self.hop, self.window_length
            )));
        }
        if len <= self.pad() {
            return Err(validation(format!(
                "signal of length {len} is too short for reflect padding of {}",
                self.pad()
            )));
        }
        let padded = len + 2 * self.pad();
        if padded < self.window_length {
            return Err(validation(format!("padded length {padded} below window {}", self.window_length)));
        }
        Ok(((padded - self.window_length) / self.hop + 1, self.bins()))
    }
}

/// Row-major `frames × bins` non-negative magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeFrequencyMap {
    pub frames: usize,
    pub bins: usize,
    pub magnitudes: Vec<f64>,
    pub cfg: StftConfig,
}

impl TimeFrequencyMap {
    pub fn row(&self, frame: usize) -> &[f64] {
        &self.magnitudes[frame * self.bins..(frame + 1) * self.bins]
    }
}

/// Reflect padding without repeating the edge sample (`x[1], x[0], x[1]`).
pub fn reflect_pad(values: &[f64], pad: usize) -> Vec<f64> {
    let n = values.len() as isize;
    (-(pad as isize)..n + pad as isize)
        .map(|i| {
            let j = if i < 0 {
                -i
            } else if i >= n {
                2 * (n - 1) - i
            } else {
                i
            };
            values[j as usize]
        })
        .collect()
}

/// Reusable STFT with a cached FFT plan and window.
pub struct Stft {
    cfg: StftConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(cfg.window_length.max(1));
        Self { cfg, fft, window: cfg.window_fn.coefficients(cfg.window_length) }
    }

    pub fn magnitude(&self, values: &[f64]) -> Result<TimeFrequencyMap> {
        let (frames, bins) = self.cfg.shape(values.len())?;
        let padded = reflect_pad(values, self.cfg.pad());
        let w = self.cfg.window_length;
        let mut magnitudes = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); w];
        for f in 0..frames {
            let seg = &padded[f * self.cfg.hop..f * self.cfg.hop + w];
            for ((b, s), win) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = Complex::new(s * win, 0.0);
            }
            self.fft.process(&mut buf);
            magnitudes.extend(buf[..bins].iter().map(|c| c.norm()));
        }
        Ok(TimeFrequencyMap { frames, bins, magnitudes, cfg: self.cfg })
    }
}

pub fn stft_magnitude(values: &[f64], cfg: &StftConfig) -> Result<TimeFrequencyMap> {
    Stft::new(*cfg).magnitude(values)
}

/// `ln(m + eps)` entrywise.
pub fn log_compress(map: &TimeFrequencyMap, eps: f64) -> Result<TimeFrequencyMap> {
    if !(eps > 0.0) {
        return Err(validation(format!("eps must be positive, got {eps}")));
    }
    Ok(TimeFrequencyMap {
        magnitudes: map.magnitudes.iter().map(|m| (m + eps).ln()).collect(),
        ..map.clone()
    })
}

const CACHE_MAGIC: &str = "WEAKSIG-TFMAP 1";

/// Writes maps sharing one shape as a header line followed by
/// little-endian `f32` values, map after map, row-major frames.
pub fn write_cache(w: &mut impl Write, maps: &[TimeFrequencyMap], eps: f64) -> Result<()> {
    let (frames, bins, cfg) = match maps.first() {
        Some(m) => (m.frames, m.bins, m.cfg),
        None => return Err(validation("no maps to cache")),
    };
    if maps.iter().any(|m| m.frames != frames || m.bins != bins || m.cfg != cfg) {
        return Err(validation("cached maps must share shape and configuration"));
    }
    writeln!(
        w,
        "{CACHE_MAGIC} count={} frames={frames} bins={bins} window={} hop={} fn={} eps={eps}",
        maps.len(),
        cfg.window_length,
        cfg.hop,
        cfg.window_fn.as_str()
    )?;
    for m in maps {
        for v in &m.magnitudes {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a cache written by [`write_cache`]; returns the maps and `eps`.
pub fn read_cache(r: &mut impl BufRead) -> Result<(Vec<TimeFrequencyMap>, f64)> {
    let mut header = String::new();
    r.read_line(&mut header)?;
    let rest = header
        .trim_end()
        .strip_prefix(CACHE_MAGIC)
        .ok_or_else(|| integrity("not a time-frequency cache"))?;
    let field = |key: &str| -> Result<String> {
        rest.split_whitespace()
            .find_map(|t| t.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
            .map(str::to_string)
            .ok_or_else(|| integrity(format!("cache header lacks {key}")))
    };
    let num = |s: String| s.parse::<usize>().map_err(|_| integrity(format!("bad cache header value {s:?}")));
    let count = num(field("count")?)?;
    let frames = num(field("frames")?)?;
    let bins = num(field("bins")?)?;
    let cfg = StftConfig {
        window_length: num(field("window")?)?,
        hop: num(field("hop")?)?,
        window_fn: WindowFn::parse(&field("fn")?)?,
    };
    let eps: f64 = field("eps")?.parse().map_err(|_| integrity("bad eps in cache header"))?;
    let mut maps = Vec::with_capacity(count);
    let mut buf = vec![0u8; frames * bins * 4];
    for i in 0..count {
        r.read_exact(&mut buf).map_err(|_| integrity(format!("cache truncated in map {i}")))?;
        let magnitudes = buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        maps.push(TimeFrequencyMap { frames, bins, magnitudes, cfg });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(integrity("trailing bytes after cached maps"));
    }
    Ok((maps, eps))
}
