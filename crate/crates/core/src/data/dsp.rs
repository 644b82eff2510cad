//! Resampling, zero-phase FIR band-pass filtering and log-spectrogram features.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{data_err, Result};

/// Samples per 30 s window at the working rate.
pub const WINDOW_SAMPLES: usize = 3000;
/// STFT frame length (2 s at 100 Hz).
pub const FRAME_LEN: usize = 200;
pub const HOP: usize = 100;
pub const FFT_LEN: usize = 256;
/// Frames per window: `(3000 − 200)/100 + 1`.
pub const FRAMES: usize = 29;
/// One-sided bins without DC.
pub const BINS: usize = FFT_LEN / 2;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn kaiser(n: usize, beta: f64) -> Vec<f64> {
    let denom = bessel_i0(beta);
    let m = (n - 1) as f64;
    (0..n)
        .map(|i| {
            let r = 2.0 * i as f64 / m - 1.0;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom
        })
        .collect()
}

fn hamming(n: usize, symmetric: bool) -> Vec<f64> {
    let m = if symmetric { (n - 1) as f64 } else { n as f64 };
    (0..n).map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / m).cos()).collect()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Reduced integer ratio `to/from`, rates taken to a millihertz.
fn rate_ratio(from_hz: f64, to_hz: f64) -> Result<(usize, usize)> {
    if !(from_hz > 0.0 && to_hz > 0.0 && from_hz.is_finite() && to_hz.is_finite()) {
        return Err(data_err(format!("sampling rates must be positive, got {from_hz} → {to_hz}")));
    }
    let f = (from_hz * 1000.0).round() as u64;
    let t = (to_hz * 1000.0).round() as u64;
    let g = gcd(f, t);
    Ok(((t / g) as usize, (f / g) as usize))
}

/// Polyphase rational resampler with a Kaiser-windowed sinc low-pass at the
/// lower of the two Nyquist rates. Output length is `round(len·to/from)`.
pub fn resample(signal: &[f64], from_hz: f64, to_hz: f64) -> Result<Vec<f64>> {
    let (up, down) = rate_ratio(from_hz, to_hz)?;
    let out_len = (signal.len() as f64 * up as f64 / down as f64).round() as usize;
    if up == down {
        return Ok(signal.to_vec());
    }
    let factor = up.max(down);
    let half = 10 * factor;
    let window = kaiser(2 * half + 1, 5.0);
    let cutoff = 1.0 / factor as f64;
    // h[j] on the upsampled grid, j ∈ [−half, half], scaled by `up` for gain.
    let taps: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let j = i as f64 - half as f64;
            cutoff * sinc(cutoff * j) * window[i] * up as f64
        })
        .collect();
    let n = signal.len() as i64;
    let (up_i, half_i) = (up as i64, half as i64);
    let mut out = Vec::with_capacity(out_len);
    for o in 0..out_len as i64 {
        let centre = o * down as i64;
        let k_lo = (centre - half_i).div_euclid(up_i) + i64::from((centre - half_i).rem_euclid(up_i) != 0);
        let k_hi = (centre + half_i).div_euclid(up_i);
        let mut acc = 0.0;
        for k in k_lo.max(0)..=k_hi.min(n - 1) {
            acc += signal[k as usize] * taps[(k * up_i - centre + half_i) as usize];
        }
        out.push(acc);
    }
    Ok(out)
}

/// Odd number of taps for a band-pass at `hz`: ten seconds of filter.
pub fn default_taps(hz: f64) -> usize {
    ((10.0 * hz).round() as usize) | 1
}

/// Hamming-windowed sinc band-pass `[low, high]` Hz, odd length, unit gain
/// at the band centre.
pub fn bandpass_taps(hz: f64, low: f64, high: f64, taps: usize) -> Result<Vec<f64>> {
    let nyquist = hz / 2.0;
    if !(low > 0.0 && low < high && high < nyquist) {
        return Err(data_err(format!("band [{low}, {high}] Hz is not inside (0, {nyquist}) Hz")));
    }
    if taps % 2 == 0 || taps < 3 {
        return Err(data_err("filter length must be odd and at least 3"));
    }
    let (f1, f2) = (low / hz, high / hz);
    let w = hamming(taps, true);
    let mid = (taps / 2) as f64;
    let mut h: Vec<f64> = (0..taps)
        .map(|i| {
            let m = i as f64 - mid;
            w[i] * (2.0 * f2 * sinc(2.0 * f2 * m) - 2.0 * f1 * sinc(2.0 * f1 * m))
        })
        .collect();
    let centre = (f1 + f2) / 2.0;
    let (re, im) = h.iter().enumerate().fold((0.0, 0.0), |(re, im), (i, &c)| {
        let phase = 2.0 * PI * centre * (i as f64 - mid);
        (re + c * phase.cos(), im + c * phase.sin())
    });
    let gain = (re * re + im * im).sqrt();
    h.iter_mut().for_each(|c| *c /= gain);
    Ok(h)
}

/// Linear convolution cropped to the input length, centred on the
/// filter's midpoint (zero phase for symmetric taps).
fn convolve_centred(x: &[f64], h: &[f64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let full = x.len() + h.len() - 1;
    let n = full.next_power_of_two();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    a.resize(n, Complex::new(0.0, 0.0));
    let mut b: Vec<Complex<f64>> = h.iter().map(|&v| Complex::new(v, 0.0)).collect();
    b.resize(n, Complex::new(0.0, 0.0));
    fft.process(&mut a);
    fft.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(p, q)| *p *= *q);
    ifft.process(&mut a);
    let offset = h.len() / 2;
    let scale = 1.0 / n as f64;
    a[offset..offset + x.len()].iter().map(|c| c.re * scale).collect()
}

/// Zero-phase band-pass: the symmetric FIR is applied forward and backward
/// (squared magnitude, no delay) over an odd-extended copy of the signal.
pub fn fir_bandpass(signal: &[f64], hz: f64, low: f64, high: f64) -> Result<Vec<f64>> {
    fir_bandpass_with(signal, hz, low, high, default_taps(hz))
}

pub fn fir_bandpass_with(signal: &[f64], hz: f64, low: f64, high: f64, taps: usize) -> Result<Vec<f64>> {
    let h = bandpass_taps(hz, low, high, taps)?;
    if signal.is_empty() {
        return Ok(Vec::new());
    }
    let pad = (3 * taps).min(signal.len() - 1);
    let first = signal[0];
    let last = signal[signal.len() - 1];
    let mut ext = Vec::with_capacity(signal.len() + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - signal[i]));
    ext.extend_from_slice(signal);
    ext.extend((1..=pad).map(|i| 2.0 * last - signal[signal.len() - 1 - i]));
    let mut planner = FftPlanner::new();
    let once = convolve_centred(&ext, &h, &mut planner);
    let twice = convolve_centred(&once, &h, &mut planner);
    Ok(twice[pad..pad + signal.len()].to_vec())
}

/// Log-magnitude spectrogram of one 30 s window at 100 Hz, `[29 × 128]`
/// row-major: Hamming frames of 200 samples, hop 100, zero-padded to 256
/// points, DC bin dropped, `ln(|X| + eps)`.
pub struct Spectrogram {
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    window: Vec<f64>,
    eps: f64,
}

impl Spectrogram {
    pub fn new(eps: f64) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            fft: planner.plan_fft_forward(FFT_LEN),
            window: hamming(FRAME_LEN, true),
            eps,
        }
    }

    pub fn features(&self, window: &[f64]) -> Result<Vec<f32>> {
        if window.len() != WINDOW_SAMPLES {
            return Err(data_err(format!("STFT needs {WINDOW_SAMPLES} samples, got {}", window.len())));
        }
        let mut out = Vec::with_capacity(FRAMES * BINS);
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_LEN];
        for f in 0..FRAMES {
            let frame = &window[f * HOP..f * HOP + FRAME_LEN];
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, (&x, &w)) in frame.iter().zip(&self.window).enumerate() {
                buf[i].re = x * w;
            }
            self.fft.process(&mut buf);
            out.extend(buf[1..=BINS].iter().map(|c| (c.norm() + self.eps).ln() as f32));
        }
        Ok(out)
    }
}

/// Convenience wrapper for one window; see [`Spectrogram`].
pub fn stft_features(window: &[f64], eps: f64) -> Result<Vec<f32>> {
    Spectrogram::new(eps).features(window)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, hz: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / hz).sin()).collect()
    }

    fn amplitude(x: &[f64]) -> f64 {
        (2.0 * x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn resampled_lengths() {
        assert_eq!(resample(&vec![0.0; 3750], 125.0, 100.0).unwrap().len(), 3000);
        assert_eq!(resample(&vec![0.0; 1500], 50.0, 100.0).unwrap().len(), 3000);
        assert_eq!(resample(&vec![0.0; 3000], 100.0, 100.0).unwrap().len(), 3000);
        assert!(resample(&[1.0], 0.0, 100.0).is_err());
        assert!(resample(&[1.0], 100.0, -1.0).is_err());
    }

    #[test]
    fn resampled_sine_matches_the_analytic_sine() {
        let out = resample(&sine(5.0, 125.0, 3750), 125.0, 100.0).unwrap();
        let reference = sine(5.0, 100.0, 3000);
        // ignore the filter's edge transient
        let (a, b) = (&out[100..2900], &reference[100..2900]);
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(dot / (na * nb) > 0.999, "correlation {}", dot / (na * nb));
        assert!((amplitude(a) - 1.0).abs() < 0.01);
    }

    #[test]
    fn upsampled_sine_keeps_its_amplitude() {
        let out = resample(&sine(5.0, 50.0, 1500), 50.0, 100.0).unwrap();
        let reference = sine(5.0, 100.0, 3000);
        let err = out[100..2900].iter().zip(&reference[100..2900]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 0.01, "max error {err}");
    }

    #[test]
    fn bandpass_removes_dc() {
        let out = fir_bandpass(&vec![3.0; 6000], 100.0, 0.3, 40.0).unwrap();
        let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak < 0.03, "peak {peak}");
    }

    #[test]
    fn bandpass_passes_10hz() {
        let out = fir_bandpass(&sine(10.0, 100.0, 6000), 100.0, 0.3, 40.0).unwrap();
        let amp = amplitude(&out[1000..5000]);
        assert!((amp - 1.0).abs() < 0.05, "amplitude {amp}");
    }

    #[test]
    fn bandpass_stops_60hz() {
        let out = fir_bandpass(&sine(60.0, 250.0, 15000), 250.0, 0.3, 23.0).unwrap();
        let amp = amplitude(&out[2500..12500]);
        assert!(amp < 0.01, "amplitude {amp}");
    }

    #[test]
    fn invalid_bands_are_rejected() {
        assert!(fir_bandpass(&[0.0; 10], 100.0, 0.3, 60.0).is_err());
        assert!(fir_bandpass(&[0.0; 10], 100.0, 5.0, 1.0).is_err());
        assert!(fir_bandpass(&[0.0; 10], 100.0, 0.0, 10.0).is_err());
    }

    #[test]
    fn spectrogram_shape_and_silence() {
        let f = stft_features(&[0.0; 3000], 1e-6).unwrap();
        assert_eq!(f.len(), 29 * 128);
        let floor = (1e-6f64).ln() as f32;
        assert!(f.iter().all(|&v| v == floor));
        assert!(stft_features(&[0.0; 2999], 1e-6).is_err());
    }

    #[test]
    fn spectrogram_matches_a_direct_dft() {
        let x: Vec<f64> = (0..3000).map(|i| ((i * 7919) % 97) as f64 / 50.0 - 1.0).collect();
        let f = stft_features(&x, 1e-6).unwrap();
        let w = hamming(FRAME_LEN, true);
        for frame in [0, 13, 28] {
            for bin in [1usize, 40, 128] {
                let (mut re, mut im) = (0.0, 0.0);
                for n in 0..FRAME_LEN {
                    let v = x[frame * HOP + n] * w[n];
                    let phase = -2.0 * PI * (bin * n) as f64 / FFT_LEN as f64;
                    re += v * phase.cos();
                    im += v * phase.sin();
                }
                let expected = ((re * re + im * im).sqrt() + 1e-6).ln();
                let got = f[frame * BINS + bin - 1] as f64;
                assert!((got - expected).abs() < 1e-4, "frame {frame} bin {bin}");
            }
        }
    }

    #[test]
    fn ten_hz_sine_peaks_at_its_bin() {
        let f = stft_features(&sine(10.0, 100.0, 3000), 1e-6).unwrap();
        // 10 Hz · 256 / 100 Hz = 25.6 → bin 26, stored at column 25
        for frame in f.chunks(BINS) {
            let argmax = frame.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(argmax + 1, 26);
        }
    }
}
