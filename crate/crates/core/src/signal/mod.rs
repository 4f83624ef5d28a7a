//! Multichannel recordings and the preprocessing pipeline.
//!
//! Raw recordings go through: channel reordering, resampling to 128 Hz,
//! 0.5-45 Hz band-pass, 10 s epoching, Cz-power artifact rejection, clipping
//! to +/-800 uV and per-channel normalization over the valid epochs.

pub mod filter;

use std::sync::Arc;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use filter::{design_bandpass, Resampler, ZeroPhaseFir};

/// Standard 10-20 channel order used throughout.
pub const STANDARD_CHANNELS: [&str; 19] = [
    "Fp1", "Fp2", "F3", "F4", "C3", "C4", "P3", "P4", "O1", "O2", "F7", "F8", "T7", "T8", "P7", "P8", "Fz", "Cz", "Pz",
];

/// Older 10-20 names mapped onto their modern equivalents.
const CHANNEL_ALIASES: [(&str, &str); 4] = [("T3", "T7"), ("T4", "T8"), ("T5", "P7"), ("T6", "P8")];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    names: Vec<String>,
}

impl ChannelLayout {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::InvalidParameter("channel layout is empty".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::InvalidParameter(format!("duplicate channel '{n}'")));
            }
        }
        Ok(Self { names })
    }

    pub fn standard() -> Self {
        Self {
            names: STANDARD_CHANNELS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Strips common montage decorations ("EEG FP1-REF") and maps old names.
fn canonical_channel(name: &str) -> String {
    let mut n = name.trim();
    if let Some(rest) = n.strip_prefix("EEG ") {
        n = rest.trim();
    }
    for suffix in ["-REF", "-LE", "-AR", "-AVG"] {
        if n.len() > suffix.len() && n[n.len() - suffix.len()..].eq_ignore_ascii_case(suffix) {
            n = &n[..n.len() - suffix.len()];
        }
    }
    let upper = n.to_ascii_uppercase();
    for (old, new) in CHANNEL_ALIASES {
        if upper == old.to_ascii_uppercase() {
            return new.to_ascii_uppercase();
        }
    }
    upper
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grade {
    Normal,
    Abnormal,
}

impl Grade {
    /// Positive class for classification is `Abnormal`.
    pub fn as_label(self) -> f64 {
        match self {
            Grade::Normal => 0.0,
            Grade::Abnormal => 1.0,
        }
    }
}

/// One fixed-length window of a recording, `channels x samples`, in uV.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelEpoch {
    pub layout: Arc<ChannelLayout>,
    pub fs: f64,
    pub data: Array2<f64>,
}

impl MultichannelEpoch {
    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn samples(&self) -> usize {
        self.data.ncols()
    }
}

/// A continuous recording before preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub id: String,
    pub layout: Arc<ChannelLayout>,
    pub fs: f64,
    pub data: Array2<f64>,
    pub grade: Option<Grade>,
    pub age: Option<f64>,
}

impl RawRecording {
    pub fn duration_s(&self) -> f64 {
        self.data.ncols() as f64 / self.fs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    pub layout: Arc<ChannelLayout>,
    pub fs: f64,
    pub epochs: Vec<MultichannelEpoch>,
    pub grade: Option<Grade>,
    pub age: Option<f64>,
    pub valid_mask: Vec<bool>,
}

impl Recording {
    pub fn valid_epochs(&self) -> impl Iterator<Item = (usize, &MultichannelEpoch)> {
        self.epochs.iter().enumerate().filter(|(i, _)| self.valid_mask[*i])
    }

    pub fn n_valid(&self) -> usize {
        self.valid_mask.iter().filter(|v| **v).count()
    }
}

fn check_finite(signal: &Array2<f64>, what: &str) -> Result<()> {
    if signal.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Resamples every channel from `fs_in` to `fs_out` Hz.
pub fn resample(signal: &Array2<f64>, fs_in: f64, fs_out: f64) -> Result<Array2<f64>> {
    check_finite(signal, "resampler input")?;
    Ok(Resampler::new(fs_in, fs_out)?.apply(signal))
}

/// Zero-phase FIR band-pass between `f_low` and `f_high` Hz (`f_low = 0` is a low-pass).
pub fn bandpass(signal: &Array2<f64>, f_low: f64, f_high: f64, fs: f64) -> Result<Array2<f64>> {
    let taps = design_bandpass(f_low, f_high, fs)?;
    check_finite(signal, "band-pass input")?;
    Ok(ZeroPhaseFir::new(taps).apply(signal))
}

/// Splits into contiguous non-overlapping windows; any remainder is dropped.
pub fn epoch_split(signal: &Array2<f64>, fs: f64, duration_s: f64) -> Vec<Array2<f64>> {
    let len = (duration_s * fs).round() as usize;
    let total = signal.ncols();
    if len == 0 || total < len {
        log::warn!("signal of {total} samples is shorter than one {duration_s} s epoch");
        return Vec::new();
    }
    (0..total / len)
        .map(|k| signal.slice(s![.., k * len..(k + 1) * len]).to_owned())
        .collect()
}

/// Mean squared amplitude of one channel of an epoch.
pub fn channel_power(epoch: &Array2<f64>, channel: usize) -> f64 {
    let row = epoch.row(channel);
    row.iter().map(|v| v * v).sum::<f64>() / row.len().max(1) as f64
}

/// Flags epochs whose reference-channel power exceeds `mean + k * sd` of the
/// recording (population sd, one-sided). Returns the validity mask.
pub fn reject_bad_epochs(recording: &Recording, ref_channel: &str, k: f64) -> Result<Vec<bool>> {
    let ch = recording
        .layout
        .index_of(ref_channel)
        .ok_or_else(|| Error::MissingChannel(ref_channel.to_string()))?;
    if recording.epochs.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "artifact rejection needs at least 2 epochs, got {}",
            recording.epochs.len()
        )));
    }
    let powers: Vec<f64> = recording.epochs.iter().map(|e| channel_power(&e.data, ch)).collect();
    Ok(power_outlier_mask(&powers, k))
}

pub(crate) fn power_outlier_mask(powers: &[f64], k: f64) -> Vec<bool> {
    let n = powers.len() as f64;
    let mean = powers.iter().sum::<f64>() / n;
    let var = powers.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    // Spread at rounding level means the powers are equal.
    let tiny = 1e-12 * mean.abs();
    if sd <= tiny {
        return vec![true; powers.len()];
    }
    let threshold = mean + k * sd;
    powers.iter().map(|&p| p <= threshold).collect()
}

pub fn clip(epoch: &mut Array2<f64>, limit: f64) {
    epoch.mapv_inplace(|v| v.clamp(-limit, limit));
}

/// Per-channel z-scoring with statistics from the valid epochs only.
pub fn normalize_per_channel(recording: &Recording) -> Result<Recording> {
    let n_valid = recording.n_valid();
    if n_valid == 0 {
        return Err(Error::NoValidEpochs);
    }
    let channels = recording.layout.len();
    let mut mean = vec![0.0; channels];
    let mut count = 0usize;
    for (_, e) in recording.valid_epochs() {
        for (c, row) in e.data.axis_iter(Axis(0)).enumerate() {
            mean[c] += row.sum();
        }
        count += e.samples();
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; channels];
    for (_, e) in recording.valid_epochs() {
        for (c, row) in e.data.axis_iter(Axis(0)).enumerate() {
            var[c] += row.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
        }
    }
    let sd: Vec<f64> = var
        .iter()
        .map(|v| {
            let sd = (v / count as f64).sqrt();
            if sd < 1e-12 {
                1.0
            } else {
                sd
            }
        })
        .collect();

    let mut out = recording.clone();
    for e in out.epochs.iter_mut() {
        for (c, mut row) in e.data.axis_iter_mut(Axis(0)).enumerate() {
            row.mapv_inplace(|v| (v - mean[c]) / sd[c]);
        }
    }
    Ok(out)
}

/// Settings for [`preprocess`]; defaults follow the standard pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_fs: f64,
    pub band: (f64, f64),
    pub epoch_s: f64,
    pub ref_channel: String,
    pub reject_k: f64,
    pub clip_uv: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_fs: 128.0,
            band: (0.5, 45.0),
            epoch_s: 10.0,
            ref_channel: "Cz".into(),
            reject_k: 2.0,
            clip_uv: 800.0,
        }
    }
}

/// Reorders rows of `raw` into the standard 19-channel order.
pub fn reorder_channels(raw: &RawRecording) -> Result<(Arc<ChannelLayout>, Array2<f64>)> {
    let standard = ChannelLayout::standard();
    let canon: Vec<String> = raw.layout.names().iter().map(|n| canonical_channel(n)).collect();
    let mut out = Array2::zeros((standard.len(), raw.data.ncols()));
    for (dst, name) in standard.names().iter().enumerate() {
        let want = canonical_channel(name);
        let src = canon
            .iter()
            .position(|c| *c == want)
            .ok_or_else(|| Error::MissingChannel(name.clone()))?;
        out.row_mut(dst).assign(&raw.data.row(src));
    }
    Ok((Arc::new(standard), out))
}

/// Full preprocessing pipeline. Errors carry the failing stage name.
pub fn preprocess(raw: &RawRecording, cfg: &PreprocessConfig) -> Result<Recording> {
    let (layout, data) = reorder_channels(raw).map_err(Error::in_stage("reorder"))?;
    let data = resample(&data, raw.fs, cfg.target_fs).map_err(Error::in_stage("resample"))?;
    let fs = cfg.target_fs;
    let data = bandpass(&data, cfg.band.0, cfg.band.1, fs).map_err(Error::in_stage("bandpass"))?;
    let windows = epoch_split(&data, fs, cfg.epoch_s);
    if windows.is_empty() {
        return Err(Error::in_stage("epoch")(Error::TooShort {
            needed: (cfg.epoch_s * fs).round() as usize,
            got: data.ncols(),
        }));
    }
    let mut rec = Recording {
        id: raw.id.clone(),
        layout: layout.clone(),
        fs,
        epochs: windows
            .into_iter()
            .map(|w| MultichannelEpoch {
                layout: layout.clone(),
                fs,
                data: w,
            })
            .collect(),
        grade: raw.grade,
        age: raw.age,
        valid_mask: Vec::new(),
    };
    rec.valid_mask = if rec.epochs.len() >= 2 {
        reject_bad_epochs(&rec, &cfg.ref_channel, cfg.reject_k).map_err(Error::in_stage("reject"))?
    } else {
        vec![true]
    };
    for e in rec.epochs.iter_mut() {
        clip(&mut e.data, cfg.clip_uv);
    }
    normalize_per_channel(&rec).map_err(Error::in_stage("normalize"))
}
