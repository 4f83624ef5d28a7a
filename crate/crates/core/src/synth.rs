//! Synthetic multichannel recordings with a learnable grade and age signal.
//!
//! Each channel is a sum of one sinusoidal oscillator per spectral band plus
//! `1/f^beta` background noise and a white noise floor. Abnormal recordings
//! have their alpha oscillators (8-13 Hz) scaled by `1 - grade_effect`; age
//! maps affinely onto the background exponent `beta`. Domain `B` is the same
//! generator with a covariate offset: alpha peaks 1 Hz lower, a steeper
//! background, different channel gains, and legacy channel names in a
//! different order.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::encoders::default_bands;
use crate::error::{Error, Result};
use crate::par;
use crate::rng;
use crate::signal::{ChannelLayout, Grade, RawRecording, STANDARD_CHANNELS};

const ALPHA_BANDS: [usize; 2] = [2, 3];
const REFERENCE_AGE: f64 = 50.0;
const AGE_RANGE: (f64, f64) = (20.0, 80.0);
const COMMON_NOISE_SHARE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Domain {
    #[default]
    A,
    B,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::A => 0xa,
            Domain::B => 0xb,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::A => "A",
            Domain::B => "B",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_recordings: usize,
    pub epochs_per_recording: usize,
    /// Fraction of abnormal recordings.
    pub abnormal_fraction: f64,
    pub domain: Domain,
    /// Sampling rate of the generated raw signal.
    pub fs: f64,
    /// RMS amplitude of the oscillator in each of the seven bands.
    pub band_amplitudes: [f64; 7],
    /// RMS amplitude of the `1/f^beta` background.
    pub background_rms: f64,
    /// Background exponent at the reference age of 50.
    pub exponent: f64,
    /// Change in exponent per year of age.
    pub age_slope: f64,
    /// Fractional reduction of alpha oscillator amplitude when abnormal.
    pub grade_effect: f64,
    /// RMS of the white noise floor.
    pub noise_floor: f64,
    /// Log-normal spread of per-channel gains.
    pub channel_gain_sd: f64,
    /// Log-normal spread of the overall per-recording amplitude.
    pub recording_gain_sd: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_recordings: 60,
            epochs_per_recording: 6,
            abnormal_fraction: 0.5,
            domain: Domain::A,
            fs: 256.0,
            band_amplitudes: [0.0147, 0.01225, 0.0364, 0.0273, 0.00315, 0.002625, 0.00126],
            background_rms: 0.01715,
            exponent: 1.2,
            age_slope: 0.01,
            grade_effect: 0.7,
            noise_floor: 0.0007,
            channel_gain_sd: 0.1,
            recording_gain_sd: 0.15,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.n_recordings == 0 || self.epochs_per_recording == 0 {
            return bad("need at least one recording and one epoch".into());
        }
        if !(0.0..=1.0).contains(&self.abnormal_fraction) {
            return bad(format!("abnormal fraction {} outside [0, 1]", self.abnormal_fraction));
        }
        if !(self.fs >= 100.0 && self.fs.is_finite()) {
            return bad(format!("sampling rate {} Hz is below 100 Hz", self.fs));
        }
        if !(0.0..1.0).contains(&self.grade_effect) {
            return bad(format!("grade effect {} outside [0, 1)", self.grade_effect));
        }
        let amplitudes = self.band_amplitudes.iter().chain([
            &self.background_rms,
            &self.noise_floor,
            &self.channel_gain_sd,
            &self.recording_gain_sd,
        ]);
        if amplitudes.into_iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return bad("amplitudes and spreads must be non-negative".into());
        }
        Ok(())
    }

    pub fn recording_id(&self, index: usize) -> String {
        format!("{}{index:04}", self.domain.as_str().to_ascii_lowercase())
    }

    fn layout(&self) -> ChannelLayout {
        match self.domain {
            Domain::A => ChannelLayout::standard(),
            Domain::B => {
                let legacy = |n: &'static str| -> &'static str {
                    match n {
                        "T7" => "T3",
                        "T8" => "T4",
                        "P7" => "T5",
                        "P8" => "T6",
                        other => other,
                    }
                };
                ChannelLayout::new(STANDARD_CHANNELS.iter().rev().map(|n| legacy(n).to_string()))
                    .expect("distinct names")
            }
        }
    }
}

/// `1/f^beta` noise with unit RMS, shaped in the frequency domain. Bins below
/// 0.5 Hz get the 0.5 Hz gain.
fn coloured_noise<R: Rng>(n: usize, fs: f64, beta: f64, r: &mut R, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(StandardNormal.sample(r), 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        let f = (bin as f64 * fs / n as f64).max(0.5);
        *c *= if k == 0 { 0.0 } else { f.powf(-beta / 2.0) };
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let x: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    x.into_iter().map(|v| v / rms.max(1e-300)).collect()
}

fn labels(spec: &SyntheticSpec) -> Vec<(Grade, f64)> {
    let n = spec.n_recordings;
    let n_abnormal = (spec.abnormal_fraction * n as f64).round() as usize;
    let mut grades: Vec<Grade> = (0..n)
        .map(|i| if i < n_abnormal { Grade::Abnormal } else { Grade::Normal })
        .collect();
    grades.shuffle(&mut rng::stream(spec.seed, &[spec.domain.tag(), 0x6c61]));
    grades
        .into_iter()
        .enumerate()
        .map(|(i, g)| {
            let mut r = rng::stream(spec.seed, &[spec.domain.tag(), 0x6167, i as u64]);
            let age = AGE_RANGE.0 + (AGE_RANGE.1 - AGE_RANGE.0) * r.random::<f64>();
            (g, (age * 10.0).round() / 10.0)
        })
        .collect()
}

fn generate_one(
    spec: &SyntheticSpec,
    index: usize,
    grade: Grade,
    age: f64,
    layout: &Arc<ChannelLayout>,
) -> RawRecording {
    let key = |part: u64| [spec.domain.tag(), index as u64, part];
    let n = (spec.epochs_per_recording as f64 * 10.0 * spec.fs).round() as usize;
    let m = layout.len();
    let bands = default_bands();
    let (alpha_shift, beta_offset) = match spec.domain {
        Domain::A => (0.0, 0.0),
        Domain::B => (-1.0, 0.3),
    };
    let beta = spec.exponent + beta_offset + spec.age_slope * (age - REFERENCE_AGE);

    let mut r = rng::stream(spec.seed, &key(1));
    let gain_sd = spec.recording_gain_sd;
    let z: f64 = StandardNormal.sample(&mut r);
    let recording_gain = (gain_sd * z - gain_sd * gain_sd / 2.0).exp();
    // One frequency per band and recording, kept 1 Hz inside the band edges
    // where the band allows.
    let freqs: Vec<f64> = bands
        .iter()
        .enumerate()
        .map(|(b, band)| {
            let margin = ((band.f_high - band.f_low) / 2.0).min(1.0);
            let (lo, hi) = (band.f_low + margin, band.f_high - margin);
            let f = lo + (hi - lo) * r.random::<f64>();
            if ALPHA_BANDS.contains(&b) {
                f + alpha_shift
            } else {
                f
            }
        })
        .collect();
    let amplitude = |b: usize| {
        let a = spec.band_amplitudes[b];
        if grade == Grade::Abnormal && ALPHA_BANDS.contains(&b) {
            a * (1.0 - spec.grade_effect)
        } else {
            a
        }
    };

    let mut planner = FftPlanner::new();
    let mut common_rng = rng::stream(spec.seed, &key(2));
    let common = coloured_noise(n, spec.fs, beta, &mut common_rng, &mut planner);
    let gain_dist = Normal::new(-spec.channel_gain_sd.powi(2) / 2.0, spec.channel_gain_sd).expect("finite sd");
    let mut data = Array2::zeros((m, n));
    for (c, mut row) in data.rows_mut().into_iter().enumerate() {
        let mut r = rng::stream(spec.seed, &[spec.domain.tag(), index as u64, 3, c as u64]);
        let own = coloured_noise(n, spec.fs, beta, &mut r, &mut planner);
        let gains: Vec<f64> = (0..bands.len()).map(|_| gain_dist.sample(&mut r).exp()).collect();
        let phases: Vec<f64> = (0..bands.len()).map(|_| 2.0 * PI * r.random::<f64>()).collect();
        let (w_common, w_own) = (COMMON_NOISE_SHARE.sqrt(), (1.0 - COMMON_NOISE_SHARE).sqrt());
        for (t, v) in row.iter_mut().enumerate() {
            let time = t as f64 / spec.fs;
            let mut x = spec.background_rms * (w_common * common[t] + w_own * own[t]);
            for b in 0..bands.len() {
                x += amplitude(b) * gains[b] * 2f64.sqrt() * (2.0 * PI * freqs[b] * time + phases[b]).sin();
            }
            let floor: f64 = StandardNormal.sample(&mut r);
            *v = recording_gain * (x + spec.noise_floor * floor);
        }
    }
    // Stored precision.
    data.mapv_inplace(|v| v as f32 as f64);
    RawRecording {
        id: spec.recording_id(index),
        layout: layout.clone(),
        fs: spec.fs,
        data,
        grade: Some(grade),
        age: Some(age),
    }
}

/// Generates `n_recordings` raw recordings; identical specs give identical
/// output for any worker count.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<Vec<RawRecording>> {
    spec.validate()?;
    let layout = Arc::new(spec.layout());
    let labels = labels(spec);
    Ok(par::map_range(spec.n_recordings, |i| {
        generate_one(spec, i, labels[i].0, labels[i].1, &layout)
    }))
}
