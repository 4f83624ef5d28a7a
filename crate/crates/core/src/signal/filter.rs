//! Windowed-sinc FIR design, zero-phase filtering and polyphase resampling.

use ndarray::{Array2, ArrayView1, Axis};
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Hamming window main-lobe width factor: transition width ~= 3.3 * fs / taps.
const HAMMING_WIDTH: f64 = 3.3;

fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let m = (n - 1) as f64;
    (0..n).map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / m).cos()).collect()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn odd_taps_for(transition: f64, fs: f64) -> usize {
    let n = (HAMMING_WIDTH * fs / transition).ceil() as usize;
    n.max(3) | 1
}

/// Low-pass prototype with unit DC gain; `cutoff` is the -6 dB point.
fn lowpass_prototype(cutoff: f64, fs: f64, taps: usize) -> Vec<f64> {
    let center = (taps - 1) as f64 / 2.0;
    let fc = cutoff / fs;
    let w = hamming(taps);
    let mut h: Vec<f64> = (0..taps)
        .map(|i| 2.0 * fc * sinc(2.0 * fc * (i as f64 - center)) * w[i])
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    h
}

/// Transition width used for a band with lower edge `f_low`.
pub fn transition_width(f_low: f64) -> f64 {
    (0.25 * f_low).max(1.0)
}

/// Symmetric linear-phase band-pass taps. `f_low == 0` gives a pure low-pass.
pub fn design_bandpass(f_low: f64, f_high: f64, fs: f64) -> Result<Vec<f64>> {
    if !(fs > 0.0 && f_low >= 0.0 && f_low < f_high && f_high < fs / 2.0) {
        return Err(Error::InvalidBand {
            low: f_low,
            high: f_high,
            fs,
        });
    }
    let taps = odd_taps_for(transition_width(f_low), fs);
    let mut h = lowpass_prototype(f_high, fs, taps);
    if f_low > 0.0 {
        let low = lowpass_prototype(f_low, fs, taps);
        h.iter_mut().zip(&low).for_each(|(a, b)| *a -= b);
    }
    Ok(h)
}

/// Frequency response magnitude of real taps at `freq`, centred (zero-phase).
pub fn response(taps: &[f64], freq: f64, fs: f64) -> f64 {
    let center = (taps.len() - 1) as f64 / 2.0;
    let w = 2.0 * PI * freq / fs;
    let (re, im) = taps.iter().enumerate().fold((0.0, 0.0), |(re, im), (i, &h)| {
        let ph = w * (i as f64 - center);
        (re + h * ph.cos(), im - h * ph.sin())
    });
    re.hypot(im)
}

/// Centred FIR filter applied through FFT convolution; input edges are padded
/// by repeating the first/last sample so the output keeps the input length.
pub struct ZeroPhaseFir {
    taps: Vec<f64>,
}

impl ZeroPhaseFir {
    pub fn new(taps: Vec<f64>) -> Self {
        debug_assert!(taps.len() % 2 == 1);
        Self { taps }
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Filters every row of `signal`.
    pub fn apply(&self, signal: &Array2<f64>) -> Array2<f64> {
        let (rows, len) = signal.dim();
        let mut out = Array2::zeros((rows, len));
        if len == 0 {
            return out;
        }
        let half = (self.taps.len() - 1) / 2;
        let padded_len = len + 2 * half;
        let fft_len = (padded_len + self.taps.len() - 1).next_power_of_two();
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(fft_len);
        let inv = planner.plan_fft_inverse(fft_len);

        let mut kernel = vec![Complex::new(0.0, 0.0); fft_len];
        for (k, &h) in self.taps.iter().enumerate() {
            kernel[k].re = h;
        }
        fwd.process(&mut kernel);

        let mut buf = vec![Complex::new(0.0, 0.0); fft_len];
        for (row, mut dst) in signal.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            self.fill_padded(row, half, &mut buf);
            convolve_in_place(&mut buf, &kernel, fwd.as_ref(), inv.as_ref());
            // Full convolution index `n + 2*half` lines up with input sample `n`.
            let scale = 1.0 / fft_len as f64;
            for (n, v) in dst.iter_mut().enumerate() {
                *v = buf[n + 2 * half].re * scale;
            }
        }
        out
    }

    fn fill_padded(&self, row: ArrayView1<f64>, half: usize, buf: &mut [Complex<f64>]) {
        let len = row.len();
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        let first = row[0];
        let last = row[len - 1];
        for i in 0..half {
            buf[i].re = first;
            buf[half + len + i].re = last;
        }
        for (i, &v) in row.iter().enumerate() {
            buf[half + i].re = v;
        }
    }
}

fn convolve_in_place(buf: &mut [Complex<f64>], kernel: &[Complex<f64>], fwd: &dyn Fft<f64>, inv: &dyn Fft<f64>) {
    fwd.process(buf);
    buf.iter_mut().zip(kernel).for_each(|(a, b)| *a *= b);
    inv.process(buf);
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Rate ratio `up / down` for two sampling rates given to 1 mHz resolution.
fn rational_ratio(fs_in: f64, fs_out: f64) -> Result<(usize, usize)> {
    let to_milli = |fs: f64| {
        let m = fs * 1000.0;
        if (m - m.round()).abs() > 1e-6 {
            Err(Error::InvalidParameter(format!(
                "sampling rate {fs} Hz is not a multiple of 1 mHz"
            )))
        } else {
            Ok(m.round() as u64)
        }
    };
    let a = to_milli(fs_in)?;
    let b = to_milli(fs_out)?;
    let g = gcd(a, b);
    let (up, down) = ((b / g) as usize, (a / g) as usize);
    if up > 4096 || down > 4096 {
        return Err(Error::InvalidParameter(format!(
            "resampling ratio {up}/{down} is too large"
        )));
    }
    Ok((up, down))
}

/// Polyphase windowed-sinc rational resampler.
///
/// Output sample `j` sits at prototype-rate index `n = j * down`; it sums the
/// input samples `i` with `|n - i * up| <= half`, using the prototype taps of
/// phase `n mod up`. Each phase is scaled to unit DC gain so constants pass
/// through unchanged. Indices past either end repeat the edge sample.
pub struct Resampler {
    up: usize,
    down: usize,
    proto: Vec<f64>,
    phase_gain: Vec<f64>,
    half: usize,
}

impl Resampler {
    pub fn new(fs_in: f64, fs_out: f64) -> Result<Self> {
        if !(fs_in > 0.0 && fs_out > 0.0 && fs_in.is_finite() && fs_out.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sampling rates must be positive, got {fs_in} -> {fs_out}"
            )));
        }
        let (up, down) = rational_ratio(fs_in, fs_out)?;
        let slow = fs_in.min(fs_out);
        let fs_proto = fs_in * up as f64;
        let taps = odd_taps_for(0.05 * slow, fs_proto);
        let proto = lowpass_prototype(0.45 * slow, fs_proto, taps);
        let half = (taps - 1) / 2;
        let mut phase_gain = vec![0.0; up];
        for (k, &h) in proto.iter().enumerate() {
            let offset = k as isize - half as isize;
            phase_gain[offset.rem_euclid(up as isize) as usize] += h;
        }
        Ok(Self {
            up,
            down,
            proto,
            phase_gain,
            half,
        })
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        (input_len as f64 * self.up as f64 / self.down as f64).round() as usize
    }

    fn resample_row(&self, x: ArrayView1<f64>, out: &mut [f64]) {
        let last = x.len() as isize - 1;
        let up = self.up as isize;
        let half = self.half as isize;
        for (j, y) in out.iter_mut().enumerate() {
            let n = (j * self.down) as isize;
            let i_lo = (n - half + up - 1).div_euclid(up);
            let i_hi = (n + half).div_euclid(up);
            let mut acc = 0.0;
            for i in i_lo..=i_hi {
                let h = self.proto[(n - i * up + half) as usize];
                acc += h * x[i.clamp(0, last) as usize];
            }
            *y = acc / self.phase_gain[n.rem_euclid(up) as usize];
        }
    }

    pub fn apply(&self, signal: &Array2<f64>) -> Array2<f64> {
        let (rows, len) = signal.dim();
        let out_len = self.output_len(len);
        let mut out = Array2::zeros((rows, out_len));
        if len == 0 {
            return out;
        }
        if self.up == 1 && self.down == 1 {
            out.assign(signal);
            return out;
        }
        for (row, mut dst) in signal.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            let slice = dst
                .as_slice_mut()
                .expect("rows of a standard-layout array are contiguous");
            self.resample_row(row, slice);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bandpass_response_meets_ripple_and_stopband() {
        for &(lo, hi, fs) in &[
            (0.5, 45.0, 128.0),
            (1.0, 25.0, 256.0),
            (0.5, 30.0, 256.0),
            (0.0, 1.0, 128.0),
        ] {
            let h = design_bandpass(lo, hi, fs).unwrap();
            let tw = transition_width(lo);
            // Passband: between the edges, one transition width inside.
            let mut f = lo + tw;
            while f <= hi - tw {
                let g = response(&h, f, fs);
                let db = 20.0 * g.log10();
                assert!(db.abs() <= 0.5, "ripple {db} dB at {f} Hz for [{lo},{hi}]@{fs}");
                f += 0.25;
            }
            // Stopband: one transition width beyond each cutoff.
            let mut f = hi + tw;
            while f < fs / 2.0 {
                let db = 20.0 * response(&h, f, fs).log10();
                assert!(db <= -40.0, "stopband {db} dB at {f} Hz for [{lo},{hi}]@{fs}");
                f += 0.5;
            }
            if lo - tw >= 0.0 {
                let db = 20.0 * response(&h, lo - tw, fs).max(1e-300).log10();
                assert!(db <= -40.0, "low stopband {db} dB for [{lo},{hi}]@{fs}");
            }
        }
    }

    #[test]
    fn invalid_band_edges_are_rejected() {
        assert!(design_bandpass(30.0, 25.0, 128.0).is_err());
        assert!(design_bandpass(0.5, 64.0, 128.0).is_err());
        assert!(design_bandpass(-1.0, 10.0, 128.0).is_err());
    }

    #[test]
    fn constant_survives_any_ratio() {
        for &(a, b) in &[(256.0, 128.0), (128.0, 256.0), (250.0, 128.0), (200.0, 128.0)] {
            let r = Resampler::new(a, b).unwrap();
            let x = Array2::from_elem((2, 777), -3.25);
            let y = r.apply(&x);
            assert_eq!(y.ncols(), r.output_len(777));
            assert!(y.iter().all(|v| (v + 3.25).abs() < 1e-12));
        }
    }

    #[test]
    fn ratio_reduction() {
        assert_eq!(rational_ratio(256.0, 128.0).unwrap(), (1, 2));
        assert_eq!(rational_ratio(250.0, 128.0).unwrap(), (64, 125));
        assert!(rational_ratio(128.0, 127.0001).is_err());
    }
}
