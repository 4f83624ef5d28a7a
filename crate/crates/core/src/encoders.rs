//! Epoch encoders: spectral band powers and the trainable convolutional net.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::{Network, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandDefinition {
    pub name: String,
    pub f_low: f64,
    pub f_high: f64,
}

impl BandDefinition {
    pub fn new(name: &str, f_low: f64, f_high: f64) -> Self {
        Self {
            name: name.to_string(),
            f_low,
            f_high,
        }
    }
}

/// delta, theta, low/high alpha, low/high beta, gamma.
pub fn default_bands() -> Vec<BandDefinition> {
    vec![
        BandDefinition::new("delta", 2.0, 4.0),
        BandDefinition::new("theta", 4.0, 8.0),
        BandDefinition::new("low_alpha", 8.0, 10.0),
        BandDefinition::new("high_alpha", 10.0, 13.0),
        BandDefinition::new("low_beta", 13.0, 16.0),
        BandDefinition::new("high_beta", 16.0, 25.0),
        BandDefinition::new("gamma", 25.0, 40.0),
    ]
}

/// Welch power spectral density: periodic Hann segments, 50% overlap,
/// per-segment mean removal, one-sided density in power per Hz.
#[derive(Clone)]
pub struct Welch {
    fs: f64,
    seg_len: usize,
    window: Vec<f64>,
    window_power: f64,
    fft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Welch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Welch")
            .field("fs", &self.fs)
            .field("seg_len", &self.seg_len)
            .finish()
    }
}

impl Welch {
    pub const SEGMENT_S: f64 = 2.0;

    pub fn new(fs: f64, seg_len: usize) -> Result<Self> {
        if !(fs > 0.0) || seg_len < 2 {
            return Err(Error::InvalidParameter(format!(
                "Welch needs fs > 0 and segments of at least 2 samples (fs {fs}, segment {seg_len})"
            )));
        }
        let window: Vec<f64> = (0..seg_len)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / seg_len as f64).cos())
            .collect();
        let window_power = window.iter().map(|w| w * w).sum();
        let fft = FftPlanner::new().plan_fft_forward(seg_len);
        Ok(Self {
            fs,
            seg_len,
            window,
            window_power,
            fft,
        })
    }

    /// Estimator for signals of `n` samples: 2 s segments, shortened to `n`
    /// when the signal is shorter.
    pub fn for_signal(fs: f64, n: usize) -> Result<Self> {
        let seg = ((Self::SEGMENT_S * fs).round() as usize).min(n);
        Self::new(fs, seg)
    }

    pub fn resolution(&self) -> f64 {
        self.fs / self.seg_len as f64
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..=self.seg_len / 2).map(|k| k as f64 * self.resolution()).collect()
    }

    pub fn psd(&self, x: ArrayView1<f64>) -> Result<Vec<f64>> {
        let n = x.len();
        if n < self.seg_len {
            return Err(Error::TooShort {
                needed: self.seg_len,
                got: n,
            });
        }
        let hop = self.seg_len / 2;
        let n_seg = (n - self.seg_len) / hop + 1;
        let bins = self.seg_len / 2 + 1;
        let mut acc = vec![0.0; bins];
        let mut buf = vec![Complex::new(0.0, 0.0); self.seg_len];
        for s in 0..n_seg {
            let seg = x.slice(ndarray::s![s * hop..s * hop + self.seg_len]);
            let mean = seg.sum() / self.seg_len as f64;
            for ((b, &v), &w) in buf.iter_mut().zip(seg.iter()).zip(&self.window) {
                *b = Complex::new((v - mean) * w, 0.0);
            }
            self.fft.process(&mut buf);
            for (a, c) in acc.iter_mut().zip(&buf) {
                *a += c.norm_sqr();
            }
        }
        let scale = 1.0 / (self.fs * self.window_power * n_seg as f64);
        let nyquist = if self.seg_len.is_multiple_of(2) {
            Some(bins - 1)
        } else {
            None
        };
        for (k, a) in acc.iter_mut().enumerate() {
            let one_sided = if k == 0 || Some(k) == nyquist { 1.0 } else { 2.0 };
            *a *= scale * one_sided;
        }
        Ok(acc)
    }

    /// Sum of `psd * df` over bins with `f_low <= f < f_high`.
    pub fn integrate(&self, psd: &[f64], band: &BandDefinition) -> Result<f64> {
        let df = self.resolution();
        let mut total = 0.0;
        let mut used = 0;
        for (k, p) in psd.iter().enumerate() {
            let f = k as f64 * df;
            if f >= band.f_low && f < band.f_high {
                total += p * df;
                used += 1;
            }
        }
        if used == 0 {
            return Err(Error::InvalidParameter(format!(
                "band '{}' [{}, {}) holds no frequency bin at {df} Hz resolution",
                band.name, band.f_low, band.f_high
            )));
        }
        Ok(total)
    }
}

/// Band power of one channel, integrated from the Welch density.
pub fn band_power(x: ArrayView1<f64>, fs: f64, band: &BandDefinition) -> Result<f64> {
    if !(band.f_low > 0.0 && band.f_low < band.f_high && band.f_high < fs / 2.0) {
        return Err(Error::InvalidBand {
            low: band.f_low,
            high: band.f_high,
            fs,
        });
    }
    let welch = Welch::for_signal(fs, x.len())?;
    welch.integrate(&welch.psd(x)?, band)
}

/// Whether an embedding came from unshifted (`Z`) or shifted data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Origin {
    #[serde(rename = "Z")]
    Z,
    #[serde(rename = "Zt")]
    ZShifted,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Z => "Z",
            Origin::ZShifted => "Zt",
        }
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Origin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Z" => Ok(Origin::Z),
            "Zt" | "Z_shifted" => Ok(Origin::ZShifted),
            other => Err(Error::Parse(format!("unknown origin '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub origin: Origin,
    pub recording_id: String,
    pub epoch_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub encoder_id: String,
    pub dim: usize,
    pub embeddings: Vec<Embedding>,
}

impl EmbeddingSet {
    pub fn new(encoder_id: impl Into<String>, dim: usize) -> Self {
        Self {
            encoder_id: encoder_id.into(),
            dim,
            embeddings: Vec::new(),
        }
    }

    pub fn push(&mut self, e: Embedding) -> Result<()> {
        if e.vector.len() != self.dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} dims", self.dim),
                got: format!("{} dims", e.vector.len()),
            });
        }
        if e.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "embedding of {}#{}",
                e.recording_id, e.epoch_index
            )));
        }
        self.embeddings.push(e);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn points(&self) -> Vec<&[f64]> {
        self.embeddings.iter().map(|e| e.vector.as_slice()).collect()
    }
}

/// Maps one preprocessed `channels x samples` epoch to a vector.
pub trait Encoder: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode(&self, epoch: &Array2<f64>) -> Result<Vec<f64>>;
}

/// Spectral encoder: `log(1 + band power)` per channel and band, channel-major.
#[derive(Debug, Clone)]
pub struct PsdEncoder {
    bands: Vec<BandDefinition>,
    channels: usize,
    welch: Welch,
}

impl PsdEncoder {
    pub fn new(channels: usize, fs: f64, samples: usize, bands: Vec<BandDefinition>) -> Result<Self> {
        for b in &bands {
            if !(b.f_low > 0.0 && b.f_low < b.f_high && b.f_high < fs / 2.0) {
                return Err(Error::InvalidBand {
                    low: b.f_low,
                    high: b.f_high,
                    fs,
                });
            }
        }
        let welch = Welch::for_signal(fs, samples)?;
        let probe = vec![0.0; welch.frequencies().len()];
        for b in &bands {
            welch.integrate(&probe, b)?;
        }
        Ok(Self { bands, channels, welch })
    }

    pub fn standard(fs: f64, samples: usize) -> Result<Self> {
        Self::new(crate::signal::STANDARD_CHANNELS.len(), fs, samples, default_bands())
    }

    pub fn bands(&self) -> &[BandDefinition] {
        &self.bands
    }
}

impl Encoder for PsdEncoder {
    fn id(&self) -> &str {
        "psde"
    }

    fn dim(&self) -> usize {
        self.channels * self.bands.len()
    }

    fn encode(&self, epoch: &Array2<f64>) -> Result<Vec<f64>> {
        if epoch.nrows() != self.channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channels", self.channels),
                got: format!("{} channels", epoch.nrows()),
            });
        }
        let mut out = Vec::with_capacity(self.dim());
        for row in epoch.rows() {
            let psd = self.welch.psd(row)?;
            for band in &self.bands {
                let p = self.welch.integrate(&psd, band)?;
                if !p.is_finite() {
                    return Err(Error::NonFinite(format!("{} band power", band.name)));
                }
                out.push(p.ln_1p());
            }
        }
        Ok(out)
    }
}

/// Deterministic (dropout-free) forward pass through the encoder part of a
/// trained network.
#[derive(Debug, Clone)]
pub struct NeuralEncoder {
    id: String,
    network: Arc<Network>,
}

impl NeuralEncoder {
    pub fn new(id: impl Into<String>, network: Arc<Network>) -> Self {
        Self { id: id.into(), network }
    }

    pub fn network(&self) -> &Network {
        &self.network
    }
}

impl Encoder for NeuralEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.network.embedding_dim()
    }

    fn encode(&self, epoch: &Array2<f64>) -> Result<Vec<f64>> {
        let x = Tensor::from_array2(epoch);
        Ok(self.network.embed(&x)?.into_data())
    }
}
