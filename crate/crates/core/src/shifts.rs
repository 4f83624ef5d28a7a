//! Acquisition-style data shifts applied to raw signals.
//!
//! Four transform families plus the identity:
//!
//! | kind | text form          | effect                                         |
//! |------|--------------------|------------------------------------------------|
//! | BP   | `BP(0.5,30)`       | zero-phase band-pass between the two edges      |
//! | QP   | `QP(8)`            | truncate every value to `D` decimal digits      |
//! | IN   | `IN(sigma=0.01, seed=7)` | add Gaussian noise low-passed at 1 Hz     |
//! | BN   | `BN(sigma=0.1, seed=7)`  | add white Gaussian noise                  |
//! | none | `NONE`             | identity                                        |
//!
//! `sigma` is the noise standard deviation. Noise is drawn independently per
//! channel from the stream `(seed, recording id, epoch index, channel)`.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::rng;
use crate::signal::{self, filter};

pub const QUANTIZATION_DIGITS: [u32; 3] = [12, 8, 6];
pub const NOISE_SIGMAS: [f64; 3] = [0.001, 0.01, 0.1];
pub const BANDPASS_GRID: [(f64, f64); 3] = [(0.5, 30.0), (1.0, 30.0), (1.0, 25.0)];
/// Upper edge of the impedance-noise low-pass.
pub const IMPEDANCE_CUTOFF_HZ: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShiftSpec {
    NoShift,
    BandPass { low: f64, high: f64 },
    Quantization { digits: u32 },
    ImpedanceNoise { sigma: f64, seed: u64 },
    BroadbandNoise { sigma: f64, seed: u64 },
}

/// Where a noise draw comes from: one recording (or file), one segment of it.
#[derive(Debug, Clone, Copy)]
pub struct NoiseKey<'a> {
    pub recording_id: &'a str,
    pub epoch_index: u64,
}

impl ShiftSpec {
    pub fn kind_code(&self) -> &'static str {
        match self {
            ShiftSpec::NoShift => "NONE",
            ShiftSpec::BandPass { .. } => "BP",
            ShiftSpec::Quantization { .. } => "QP",
            ShiftSpec::ImpedanceNoise { .. } => "IN",
            ShiftSpec::BroadbandNoise { .. } => "BN",
        }
    }

    fn kind_rank(&self) -> u8 {
        match self {
            ShiftSpec::NoShift => 0,
            ShiftSpec::BandPass { .. } => 1,
            ShiftSpec::Quantization { .. } => 2,
            ShiftSpec::ImpedanceNoise { .. } => 3,
            ShiftSpec::BroadbandNoise { .. } => 4,
        }
    }

    /// Row order of a report: kind first, then increasing shift strength.
    pub fn report_order(&self, other: &Self) -> Ordering {
        let strength = |s: &ShiftSpec| -> (f64, f64) {
            match *s {
                ShiftSpec::NoShift => (0.0, 0.0),
                // Raising the low edge or lowering the high edge narrows the band.
                ShiftSpec::BandPass { low, high } => (low, -high),
                ShiftSpec::Quantization { digits } => (-(digits as f64), 0.0),
                ShiftSpec::ImpedanceNoise { sigma, .. } | ShiftSpec::BroadbandNoise { sigma, .. } => (sigma, 0.0),
            }
        };
        self.kind_rank()
            .cmp(&other.kind_rank())
            .then_with(|| {
                let (a, b) = (strength(self), strength(other));
                a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1))
            })
            .then_with(|| self.to_string().cmp(&other.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ShiftSpec::NoShift => Ok(()),
            ShiftSpec::BandPass { low, high } => {
                if low >= 0.0 && low < high && high.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!("band [{low}, {high}] is not ordered")))
                }
            }
            ShiftSpec::Quantization { digits } => {
                if QUANTIZATION_DIGITS.contains(&digits) {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!(
                        "quantization digits must be one of {QUANTIZATION_DIGITS:?}, got {digits}"
                    )))
                }
            }
            ShiftSpec::ImpedanceNoise { sigma, .. } | ShiftSpec::BroadbandNoise { sigma, .. } => {
                if sigma > 0.0 && sigma.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")))
                }
            }
        }
    }

    /// The 12 transform settings plus the identity, in report order.
    pub fn full_grid(seed: u64) -> Vec<ShiftSpec> {
        let mut grid = vec![ShiftSpec::NoShift];
        grid.extend(
            BANDPASS_GRID
                .iter()
                .map(|&(low, high)| ShiftSpec::BandPass { low, high }),
        );
        grid.extend(
            QUANTIZATION_DIGITS
                .iter()
                .map(|&digits| ShiftSpec::Quantization { digits }),
        );
        grid.extend(
            NOISE_SIGMAS
                .iter()
                .map(|&sigma| ShiftSpec::ImpedanceNoise { sigma, seed }),
        );
        grid.extend(
            NOISE_SIGMAS
                .iter()
                .map(|&sigma| ShiftSpec::BroadbandNoise { sigma, seed }),
        );
        grid
    }

    /// Applies the shift to a `channels x samples` signal sampled at `fs` Hz.
    pub fn apply(&self, x: &Array2<f64>, fs: f64, key: NoiseKey<'_>) -> Result<Array2<f64>> {
        self.validate()?;
        match *self {
            ShiftSpec::NoShift => Ok(x.clone()),
            ShiftSpec::BandPass { low, high } => apply_bandpass_shift(x, low, high, fs),
            ShiftSpec::Quantization { digits } => Ok(apply_quantization(x, digits)),
            ShiftSpec::ImpedanceNoise { sigma, seed } => apply_impedance_noise(x, sigma, seed, fs, key),
            ShiftSpec::BroadbandNoise { sigma, seed } => Ok(apply_broadband_noise(x, sigma, seed, key)),
        }
    }
}

pub fn apply_bandpass_shift(x: &Array2<f64>, low: f64, high: f64, fs: f64) -> Result<Array2<f64>> {
    signal::bandpass(x, low, high, fs)
}

/// Truncates `v` toward zero at `digits` decimals.
///
/// A product `v * 10^D` within a few ulps of an integer is taken as that
/// integer, so values already on the decimal grid map to themselves and the
/// transform is idempotent.
pub fn quantize_value(v: f64, digits: u32) -> f64 {
    let scale = 10f64.powi(digits as i32);
    let scaled = v * scale;
    if !scaled.is_finite() || scaled.abs() >= 4.5e15 {
        return v;
    }
    let nearest = scaled.round();
    let k = if (scaled - nearest).abs() <= 8.0 * f64::EPSILON * scaled.abs() {
        nearest
    } else {
        scaled.trunc()
    };
    k / scale
}

pub fn apply_quantization(x: &Array2<f64>, digits: u32) -> Array2<f64> {
    x.mapv(|v| quantize_value(v, digits))
}

fn gaussian_noise(shape: (usize, usize), sigma: f64, seed: u64, key: NoiseKey<'_>) -> Array2<f64> {
    let mut noise = Array2::zeros(shape);
    let rec = rng::id_hash(key.recording_id);
    for (c, mut row) in noise.axis_iter_mut(Axis(0)).enumerate() {
        let mut r = rng::stream(seed, &[rec, key.epoch_index, c as u64]);
        row.iter_mut().for_each(|v| {
            let z: f64 = StandardNormal.sample(&mut r);
            *v = sigma * z;
        });
    }
    noise
}

/// Adds 0-1 Hz noise: white Gaussian noise of s.d. `sigma`, low-passed at 1 Hz.
///
/// The white noise is drawn half a filter length past both ends and the
/// filtered centre kept, so the result has no edge transients.
pub fn apply_impedance_noise(
    x: &Array2<f64>,
    sigma: f64,
    seed: u64,
    fs: f64,
    key: NoiseKey<'_>,
) -> Result<Array2<f64>> {
    let taps = impedance_filter_taps(fs)?;
    let pad = taps.len() / 2;
    let (rows, n) = x.dim();
    let z = gaussian_noise((rows, n + 2 * pad), sigma, seed, key);
    let eps = filter::ZeroPhaseFir::new(taps).apply(&z);
    Ok(x + &eps.slice(ndarray::s![.., pad..pad + n]))
}

pub fn apply_broadband_noise(x: &Array2<f64>, sigma: f64, seed: u64, key: NoiseKey<'_>) -> Array2<f64> {
    x + &gaussian_noise(x.dim(), sigma, seed, key)
}

/// Taps of the impedance-noise low-pass at `fs`.
pub fn impedance_filter_taps(fs: f64) -> Result<Vec<f64>> {
    filter::design_bandpass(0.0, IMPEDANCE_CUTOFF_HZ, fs)
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

impl fmt::Display for ShiftSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ShiftSpec::NoShift => write!(f, "NONE"),
            ShiftSpec::BandPass { low, high } => write!(f, "BP({},{})", fmt_num(low), fmt_num(high)),
            ShiftSpec::Quantization { digits } => write!(f, "QP({digits})"),
            ShiftSpec::ImpedanceNoise { sigma, seed } => {
                write!(f, "IN(sigma={},seed={seed})", fmt_num(sigma))
            }
            ShiftSpec::BroadbandNoise { sigma, seed } => {
                write!(f, "BN(sigma={},seed={seed})", fmt_num(sigma))
            }
        }
    }
}

impl FromStr for ShiftSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = |why: &str| Error::Parse(format!("shift '{s}': {why}"));
        let upper = s.to_ascii_uppercase();
        if matches!(upper.as_str(), "NONE" | "NOSHIFT" | "NO_SHIFT") {
            return Ok(ShiftSpec::NoShift);
        }
        let open = s.find('(').ok_or_else(|| bad("expected KIND(args)"))?;
        if !s.ends_with(')') {
            return Err(bad("missing ')'"));
        }
        let kind = s[..open].trim().to_ascii_uppercase();
        let args: Vec<&str> = s[open + 1..s.len() - 1]
            .split(',')
            .map(str::trim)
            .filter(|a| !a.is_empty())
            .collect();

        let num = |v: &str| v.parse::<f64>().map_err(|_| bad(&format!("'{v}' is not a number")));
        let spec = match kind.as_str() {
            "BP" => {
                if args.len() != 2 {
                    return Err(bad("BP takes two band edges"));
                }
                ShiftSpec::BandPass {
                    low: num(args[0])?,
                    high: num(args[1])?,
                }
            }
            "QP" => {
                if args.len() != 1 {
                    return Err(bad("QP takes one digit count"));
                }
                let digits = args[0].parse().map_err(|_| bad("digits must be an integer"))?;
                ShiftSpec::Quantization { digits }
            }
            "IN" | "BN" => {
                let mut sigma = None;
                let mut seed = 0u64;
                for (i, a) in args.iter().enumerate() {
                    match a.split_once('=') {
                        Some((k, v)) => match k.trim().to_ascii_lowercase().as_str() {
                            "sigma" => sigma = Some(num(v.trim())?),
                            "seed" => seed = v.trim().parse().map_err(|_| bad("seed must be an unsigned integer"))?,
                            other => return Err(bad(&format!("unknown argument '{other}'"))),
                        },
                        None if i == 0 => sigma = Some(num(a)?),
                        None => return Err(bad("positional arguments after the first are not allowed")),
                    }
                }
                let sigma = sigma.ok_or_else(|| bad("missing sigma"))?;
                if kind == "IN" {
                    ShiftSpec::ImpedanceNoise { sigma, seed }
                } else {
                    ShiftSpec::BroadbandNoise { sigma, seed }
                }
            }
            other => return Err(bad(&format!("unknown kind '{other}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl Serialize for ShiftSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ShiftSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
