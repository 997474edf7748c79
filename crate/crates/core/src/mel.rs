//! Log-mel spectrogram features.

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::dsp::{fft_real, hann};
use crate::error::{Error, Result};

pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelParams {
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
}

impl MelParams {
    pub fn new(sample_rate: u32) -> Self {
        Self {
            window: 256,
            hop: 128,
            n_mels: 40,
            sample_rate,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.window / 2 + 1
    }

    pub fn n_frames(&self, d_x: usize) -> usize {
        if d_x < self.window {
            0
        } else {
            (d_x - self.window) / self.hop + 1
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters over the one-sided spectrum, `n_mels x n_bins`.
/// Band edges are equally spaced on the mel scale from 0 Hz to Nyquist.
pub fn mel_filterbank(params: &MelParams) -> Vec<Vec<f64>> {
    let n_bins = params.n_bins();
    let nyquist = params.sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..params.n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (params.n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * params.sample_rate as f64 / params.window as f64;
    (0..params.n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = bin_hz(k);
                    if f >= lo && f <= mid && mid > lo {
                        (f - lo) / (mid - lo)
                    } else if f > mid && f <= hi && hi > mid {
                        (hi - f) / (hi - mid)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    /// `n_frames` rows of `n_mels` log energies.
    pub frames: Vec<Vec<f64>>,
    pub params: MelParams,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    /// Mean over frames, one value per mel band.
    pub fn time_mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.params.n_mels];
        for f in &self.frames {
            for (o, v) in out.iter_mut().zip(f) {
                *o += v;
            }
        }
        let n = self.frames.len().max(1) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

/// Reusable extractor holding the window and filterbank.
#[derive(Debug, Clone)]
pub struct MelExtractor {
    params: MelParams,
    window: Vec<f64>,
    bank: Vec<Vec<f64>>,
}

impl MelExtractor {
    pub fn new(params: MelParams) -> Self {
        Self {
            window: hann(params.window),
            bank: mel_filterbank(&params),
            params,
        }
    }

    pub fn params(&self) -> &MelParams {
        &self.params
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<MelSpectrogram> {
        let x = clip.samples();
        let p = &self.params;
        if x.len() < p.window {
            return Err(Error::Contract(format!(
                "clip of {} samples is shorter than the {}-sample window",
                x.len(),
                p.window
            )));
        }
        let frames = (0..p.n_frames(x.len()))
            .map(|f| {
                let start = f * p.hop;
                let seg: Vec<f64> = x[start..start + p.window]
                    .iter()
                    .zip(&self.window)
                    .map(|(s, w)| s * w)
                    .collect();
                let spec = fft_real(&seg);
                let pow: Vec<f64> = spec[..p.n_bins()].iter().map(|c| c.norm_sqr()).collect();
                self.bank
                    .iter()
                    .map(|filt| {
                        let e: f64 = filt.iter().zip(&pow).map(|(w, q)| w * q).sum();
                        (e + LOG_FLOOR).ln()
                    })
                    .collect()
            })
            .collect();
        Ok(MelSpectrogram {
            frames,
            params: *p,
        })
    }
}

/// Log-mel spectrogram with the default 256/128/40 configuration.
pub fn mel_spectrogram(clip: &AudioClip) -> Result<MelSpectrogram> {
    MelExtractor::new(MelParams::new(clip.sample_rate())).compute(clip)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_hits_log_floor() {
        let clip = AudioClip::new(vec![0.0; 1024], 16000).unwrap();
        let m = mel_spectrogram(&clip).unwrap();
        assert_eq!(m.n_frames(), 7);
        for f in &m.frames {
            assert_eq!(f.len(), 40);
            assert!(f.iter().all(|&v| v == LOG_FLOOR.ln()));
        }
    }

    #[test]
    fn frame_count() {
        let p = MelParams::new(16000);
        assert_eq!(p.n_frames(1024), 7);
        assert_eq!(p.n_frames(256), 1);
        assert_eq!(p.n_frames(255), 0);
        let short = AudioClip::new(vec![0.0; 100], 16000).unwrap();
        assert!(mel_spectrogram(&short).is_err());
    }

    #[test]
    fn mel_scale_inverts() {
        for f in [0.0, 100.0, 1000.0, 7999.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
    }

    #[test]
    fn gain_shifts_log_energies() {
        let x: Vec<f64> = (0..1024)
            .map(|t| 0.4 * (t as f64 * 0.3).sin() + 0.1 * (t as f64 * 1.7).cos())
            .collect();
        let a = mel_spectrogram(&AudioClip::new(x.clone(), 16000).unwrap()).unwrap();
        let g = 0.5;
        let y: Vec<f64> = x.iter().map(|v| v * g).collect();
        let b = mel_spectrogram(&AudioClip::new(y, 16000).unwrap()).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            for (va, vb) in fa.iter().zip(fb) {
                if *va > -5.0 {
                    assert!((vb - va - 2.0 * g.ln()).abs() < 1e-6);
                }
            }
        }
    }
}
