//! Waveform representation, WAV I/O and the synthetic dataset.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::{colored_noise, power, NoiseColor};
use crate::error::{Error, Result};
use crate::rng::substream_rng;

/// Fixed-length mono waveform with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("audio clip must not be empty".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Contract("sample rate must be positive".into()));
        }
        if let Some((i, v)) = samples
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || v.abs() > 1.0)
        {
            return Err(Error::Contract(format!(
                "sample {i} = {v} outside [-1, 1]"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Builds a clip, clamping every sample into `[-1, 1]`. Non-finite
    /// samples are still rejected.
    pub fn clamped(mut samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        clamp_unit(&mut samples);
        Self::new(samples, sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

pub(crate) fn clamp_unit(x: &mut [f64]) {
    for v in x.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceTag {
    Synthetic,
    WavDir,
    Custom,
}

/// Homogeneous collection of clips standing in for the authentic data.
#[derive(Debug, Clone)]
pub struct Dataset {
    clips: Vec<AudioClip>,
    source_tag: SourceTag,
    content_hash: String,
}

impl Dataset {
    pub fn new(clips: Vec<AudioClip>, source_tag: SourceTag) -> Result<Self> {
        let first = clips
            .first()
            .ok_or_else(|| Error::Contract("dataset must not be empty".into()))?;
        let (d_x, rate) = (first.len(), first.sample_rate());
        for (i, c) in clips.iter().enumerate() {
            if c.len() != d_x || c.sample_rate() != rate {
                return Err(Error::Contract(format!(
                    "clip {i} has length {} @ {} Hz, expected {d_x} @ {rate} Hz",
                    c.len(),
                    c.sample_rate()
                )));
            }
        }
        let content_hash = hash_clips(&clips);
        Ok(Self {
            clips,
            source_tag,
            content_hash,
        })
    }

    /// Wraps raw sample vectors (e.g. hand-built test geometries).
    pub fn from_vectors(vectors: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        let clips = vectors
            .into_iter()
            .map(|v| AudioClip::new(v, sample_rate))
            .collect::<Result<Vec<_>>>()?;
        Self::new(clips, SourceTag::Custom)
    }

    pub fn clips(&self) -> &[AudioClip] {
        &self.clips
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn d_x(&self) -> usize {
        self.clips[0].len()
    }

    pub fn sample_rate(&self) -> u32 {
        self.clips[0].sample_rate()
    }

    pub fn source_tag(&self) -> SourceTag {
        self.source_tag
    }

    pub fn content_hash(&self) -> &str {
        &self.content_hash
    }

    /// Builds a dataset from the clips at `indices`.
    pub fn subset(&self, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let clips = indices.into_iter().map(|i| self.clips[i].clone()).collect();
        Self::new(clips, self.source_tag)
    }
}

fn hash_clips(clips: &[AudioClip]) -> String {
    let mut h = Sha256::new();
    h.update((clips.len() as u64).to_le_bytes());
    h.update((clips[0].len() as u64).to_le_bytes());
    h.update(clips[0].sample_rate().to_le_bytes());
    for c in clips {
        for s in c.samples() {
            h.update(s.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Relative power of the pink noise floor (-30 dB).
const NOISE_FLOOR_REL_POWER: f64 = 1e-3;
const SYNTH_PEAK: f64 = 0.9;

/// Deterministic synthetic speech-like dataset: harmonic tones under an
/// attack-decay envelope over a pink noise floor, peak-normalized to 0.9.
pub fn synth_dataset(n: usize, d_x: usize, sample_rate: u32, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Contract("synth_dataset: n must be >= 1".into()));
    }
    if d_x < 64 {
        return Err(Error::Contract("synth_dataset: d_x must be >= 64".into()));
    }
    if sample_rate == 0 {
        return Err(Error::Contract("sample rate must be positive".into()));
    }
    let clips = (0..n)
        .map(|i| synth_clip(d_x, sample_rate, seed, i as u64))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(clips, SourceTag::Synthetic)
}

fn synth_clip(d_x: usize, sample_rate: u32, seed: u64, index: u64) -> Result<AudioClip> {
    use std::f64::consts::TAU;

    let mut rng = substream_rng(seed, index);
    let fs = sample_rate as f64;
    let duration = d_x as f64 / fs;
    let f0 = rng.random_range(80.0..400.0);
    let n_harm: u32 = rng.random_range(3..=8);
    let attack = rng.random_range(0.05..0.3) * duration;
    let tau = rng.random_range(0.2..1.0) * duration;

    let mut x = vec![0.0; d_x];
    for h in 1..=n_harm {
        let amp = rng.random_range(0.2..1.0) / h as f64;
        let phase = rng.random_range(0.0..TAU);
        let f = f0 * h as f64;
        if f >= fs / 2.0 {
            continue;
        }
        for (t, v) in x.iter_mut().enumerate() {
            *v += amp * (TAU * f * t as f64 / fs + phase).sin();
        }
    }
    for (t, v) in x.iter_mut().enumerate() {
        let time = t as f64 / fs;
        let env = if time < attack {
            time / attack
        } else {
            (-(time - attack) / tau).exp()
        };
        *v *= env;
    }

    let floor_scale = (power(&x) * NOISE_FLOOR_REL_POWER).sqrt();
    let floor = colored_noise(NoiseColor::Pink, d_x, &mut rng);
    for (v, n) in x.iter_mut().zip(&floor) {
        *v += n * floor_scale;
    }

    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = SYNTH_PEAK / peak;
        x.iter_mut().for_each(|v| *v *= g);
    }
    AudioClip::clamped(x, sample_rate)
}

// ---------------------------------------------------------------------------
// WAV

const PCM_FORMAT_TAG: u16 = 1;

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes a 16-bit PCM mono RIFF/WAVE byte stream.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "chunk `{}` runs past end of file",
                    String::from_utf8_lossy(id)
                ))
            })?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Format("fmt chunk too short".into()));
                }
                fmt = Some((
                    u16_at(bytes, body),
                    u16_at(bytes, body + 2),
                    u32_at(bytes, body + 4),
                    u16_at(bytes, body + 14),
                ));
            }
            b"data" => {
                let (tag, channels, rate, bits) =
                    fmt.ok_or_else(|| Error::Format("data chunk before fmt chunk".into()))?;
                if tag != PCM_FORMAT_TAG {
                    return Err(Error::UnsupportedFormat(format!(
                        "format tag {tag} (only PCM is supported)"
                    )));
                }
                if channels != 1 {
                    return Err(Error::UnsupportedFormat(format!(
                        "{channels} channels (only mono is supported)"
                    )));
                }
                if bits != 16 {
                    return Err(Error::UnsupportedFormat(format!(
                        "{bits}-bit samples (only 16-bit is supported)"
                    )));
                }
                if !size.is_multiple_of(2) {
                    return Err(Error::Format("odd-length 16-bit data chunk".into()));
                }
                if size == 0 {
                    return Err(Error::Format("empty data chunk".into()));
                }
                let samples = bytes[body..end]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                return AudioClip::new(samples, rate);
            }
            _ => {}
        }
        // Chunks are padded to even length.
        pos = end + (size & 1);
    }
    Err(Error::Format("no data chunk".into()))
}

/// Encodes a clip as 16-bit PCM mono, writing `round(s * 32767)`.
pub fn encode_wav(clip: &AudioClip) -> Vec<u8> {
    let data_len = clip.len() * 2;
    let rate = clip.sample_rate();
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM_FORMAT_TAG.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in clip.samples() {
        out.extend_from_slice(&quantize(s).to_le_bytes());
    }
    out
}

#[inline]
pub fn quantize(s: f64) -> i16 {
    (s * 32767.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav(clip)).map_err(|e| Error::io(path, e))
}

/// Loads every `.wav` file of a flat directory in lexicographic order.
pub fn ingest_dir(dir: impl AsRef<Path>, expected_rate: Option<u32>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Contract(format!(
            "no .wav files in {}",
            dir.display()
        )));
    }
    let mut clips = Vec::with_capacity(paths.len());
    for p in &paths {
        let clip = read_wav(p)?;
        if let Some(rate) = expected_rate {
            if clip.sample_rate() != rate {
                return Err(Error::UnsupportedFormat(format!(
                    "{} is {} Hz, expected {rate} Hz",
                    p.display(),
                    clip.sample_rate()
                )));
            }
        }
        clips.push(clip);
    }
    Dataset::new(clips, SourceTag::WavDir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wav_with(samples: &[i16]) -> Vec<u8> {
        let clip = AudioClip::new(vec![0.0; samples.len()], 16000).unwrap();
        let mut bytes = encode_wav(&clip);
        for (i, s) in samples.iter().enumerate() {
            bytes[44 + 2 * i..46 + 2 * i].copy_from_slice(&s.to_le_bytes());
        }
        bytes
    }

    #[test]
    fn reads_scaled_samples() {
        let c = decode_wav(&wav_with(&[16384])).unwrap();
        assert_eq!(c.samples(), &[0.5]);
        let c = decode_wav(&wav_with(&[0, -32768])).unwrap();
        assert_eq!(c.samples(), &[0.0, -1.0]);
        assert_eq!(c.sample_rate(), 16000);
    }

    #[test]
    fn writes_quantized_samples() {
        assert_eq!(quantize(1.0), 32767);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(-0.25), -8192);
        let clip = AudioClip::new(vec![1.0, 0.0, -0.25], 8000).unwrap();
        let bytes = encode_wav(&clip);
        assert_eq!(bytes.len(), 44 + 6);
        assert_eq!(i16::from_le_bytes([bytes[44], bytes[45]]), 32767);
        assert_eq!(i16::from_le_bytes([bytes[48], bytes[49]]), -8192);
    }

    #[test]
    fn rejects_bad_headers() {
        assert!(matches!(decode_wav(b"nope"), Err(Error::Format(_))));
        let mut b = wav_with(&[1, 2, 3]);
        // stereo
        b[22] = 2;
        assert!(matches!(decode_wav(&b), Err(Error::UnsupportedFormat(_))));
        let mut b = wav_with(&[1, 2, 3]);
        // 24-bit
        b[34] = 24;
        assert!(matches!(decode_wav(&b), Err(Error::UnsupportedFormat(_))));
        let mut b = wav_with(&[1, 2, 3]);
        b[20] = 3; // IEEE float
        assert!(matches!(decode_wav(&b), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn rejects_truncated_and_odd_data() {
        let b = wav_with(&[1, 2, 3, 4]);
        assert!(matches!(decode_wav(&b[..b.len() - 3]), Err(Error::Format(_))));
        let mut b = wav_with(&[1, 2]);
        b.push(0);
        b[40..44].copy_from_slice(&5u32.to_le_bytes());
        b[4..8].copy_from_slice(&(36u32 + 5).to_le_bytes());
        assert!(matches!(decode_wav(&b), Err(Error::Format(_))));
    }

    #[test]
    fn skips_unknown_chunks() {
        let base = wav_with(&[100, -100]);
        let mut b = base[..36].to_vec();
        b.extend_from_slice(b"LIST");
        b.extend_from_slice(&3u32.to_le_bytes());
        b.extend_from_slice(&[1, 2, 3, 0]);
        b.extend_from_slice(&base[36..]);
        let c = decode_wav(&b).unwrap();
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn synth_is_deterministic_and_normalized() {
        let a = synth_dataset(100, 1024, 16000, 5).unwrap();
        let b = synth_dataset(100, 1024, 16000, 5).unwrap();
        assert_eq!(a.len(), 100);
        for (x, y) in a.clips().iter().zip(b.clips()) {
            assert_eq!(x.samples(), y.samples());
            assert!((x.peak() - 0.9).abs() <= 1e-6);
        }
        assert_eq!(a.content_hash(), b.content_hash());
        let c = synth_dataset(100, 1024, 16000, 6).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn synth_rejects_bad_shape() {
        assert!(synth_dataset(0, 1024, 16000, 1).is_err());
        assert!(synth_dataset(3, 63, 16000, 1).is_err());
    }

    #[test]
    fn clip_invariants() {
        assert!(AudioClip::new(vec![], 16000).is_err());
        assert!(AudioClip::new(vec![1.5], 16000).is_err());
        assert!(AudioClip::new(vec![f64::NAN], 16000).is_err());
        assert_eq!(
            AudioClip::clamped(vec![1.5, -2.0], 16000).unwrap().samples(),
            &[1.0, -1.0]
        );
        let a = AudioClip::new(vec![0.0; 4], 16000).unwrap();
        let b = AudioClip::new(vec![0.0; 5], 16000).unwrap();
        assert!(Dataset::new(vec![a, b], SourceTag::Custom).is_err());
        assert!(Dataset::new(vec![], SourceTag::Custom).is_err());
    }
}
