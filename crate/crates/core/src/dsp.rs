//! FFT helpers and spectrally shaped noise shared by the dataset synthesizer
//! and the attack operators.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Full complex DFT of a real signal (unnormalized).
pub fn fft_real(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let plan = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(buf.len()));
    plan.process(&mut buf);
    buf
}

/// Inverse DFT normalized by `1/n`, keeping the real part.
pub fn ifft_to_real(mut spec: Vec<Complex64>) -> Vec<f64> {
    let n = spec.len();
    let plan = PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n));
    plan.process(&mut spec);
    let scale = 1.0 / n as f64;
    spec.into_iter().map(|c| c.re * scale).collect()
}

/// Index distance of DFT bin `k` from DC, i.e. `min(k, n - k)`.
#[inline]
pub fn folded_bin(k: usize, n: usize) -> usize {
    k.min(n - k)
}

/// Absolute frequency in Hz of full-spectrum bin `k`.
#[inline]
pub fn bin_hz(k: usize, n: usize, sample_rate: u32) -> f64 {
    folded_bin(k, n) as f64 * sample_rate as f64 / n as f64
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn rms(x: &[f64]) -> f64 {
    power(x).sqrt()
}

pub fn power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Noise colour, identified by the exponent of its power spectral density
/// `S(f) ∝ f^alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseColor {
    White,
    Pink,
    Brown,
    Blue,
    Violet,
}

impl NoiseColor {
    pub const ATTACK_DEFAULT: [NoiseColor; 4] = [
        NoiseColor::Brown,
        NoiseColor::Pink,
        NoiseColor::Blue,
        NoiseColor::Violet,
    ];

    pub fn psd_exponent(self) -> f64 {
        match self {
            NoiseColor::White => 0.0,
            NoiseColor::Pink => -1.0,
            NoiseColor::Brown => -2.0,
            NoiseColor::Blue => 1.0,
            NoiseColor::Violet => 2.0,
        }
    }
}

impl fmt::Display for NoiseColor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NoiseColor::White => "white",
            NoiseColor::Pink => "pink",
            NoiseColor::Brown => "brown",
            NoiseColor::Blue => "blue",
            NoiseColor::Violet => "violet",
        };
        f.write_str(s)
    }
}

impl FromStr for NoiseColor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "white" => Ok(NoiseColor::White),
            "pink" => Ok(NoiseColor::Pink),
            "brown" | "brownian" | "red" => Ok(NoiseColor::Brown),
            "blue" => Ok(NoiseColor::Blue),
            "violet" | "purple" => Ok(NoiseColor::Violet),
            other => Err(format!("unknown noise colour `{other}`")),
        }
    }
}

/// Unit-RMS noise of length `n` whose spectrum is white Gaussian shaped by
/// `|f|^(alpha/2)`, with the DC bin removed.
///
/// Panics if `n < 2`.
pub fn colored_noise<R: Rng + ?Sized>(color: NoiseColor, n: usize, rng: &mut R) -> Vec<f64> {
    assert!(n >= 2, "colored noise needs at least two samples");
    let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut spec = fft_real(&white);
    let half_alpha = color.psd_exponent() / 2.0;
    for (k, c) in spec.iter_mut().enumerate() {
        let fb = folded_bin(k, n);
        if fb == 0 {
            *c = Complex64::new(0.0, 0.0);
        } else {
            // Normalized frequency; the overall scale is removed below.
            *c *= (fb as f64 / n as f64).powf(half_alpha);
        }
    }
    let mut out = ifft_to_real(spec);
    let r = rms(&out);
    if r > 0.0 {
        out.iter_mut().for_each(|v| *v /= r);
    }
    out
}
