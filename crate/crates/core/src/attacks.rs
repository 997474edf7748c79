//! Seedable post-processing attacks and the distribution they are drawn from.
//!
//! Sampling an [`AttackSpec`] with a seed fixes every random choice and yields
//! a [`RealizedAttack`]: a deterministic map that is affine (noise) or linear
//! (gain, speed, filter) before the final clamp to `[-1, 1]`. Realized
//! attacks also expose the vector-Jacobian product used by robust training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{clamp_unit, AudioClip};
use crate::dsp::{self, bin_hz, fft_real, ifft_to_real, power};
use crate::error::{Error, Result};
use crate::rng::{substream, substream_rng};

pub use crate::dsp::NoiseColor;

/// Unit-RMS coloured noise; see [`dsp::colored_noise`].
pub fn colored_noise(color: NoiseColor, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Contract("colored_noise needs n >= 2".into()));
    }
    Ok(dsp::colored_noise(color, n, &mut substream_rng(seed, 0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseParams {
    pub colors: Vec<NoiseColor>,
    pub snr_db_range: [f64; 2],
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            colors: NoiseColor::ATTACK_DEFAULT.to_vec(),
            snr_db_range: [3.0, 30.0],
        }
    }
}

impl NoiseParams {
    /// Default colours plus white noise.
    pub fn with_white() -> Self {
        let mut p = Self::default();
        p.colors.push(NoiseColor::White);
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GainParams {
    pub gain_db_range: [f64; 2],
}

impl Default for GainParams {
    fn default() -> Self {
        Self {
            gain_db_range: [-18.0, 6.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeedParams {
    pub percentages: Vec<f64>,
}

impl Default for SpeedParams {
    fn default() -> Self {
        Self {
            percentages: vec![80.0, 90.0, 110.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterParams {
    pub low_pass_cutoff_range: [f64; 2],
    pub high_pass_cutoff_range: [f64; 2],
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            low_pass_cutoff_range: [2200.0, 4000.0],
            high_pass_cutoff_range: [200.0, 1200.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CombinationParams {
    pub noise: NoiseParams,
    pub gain: GainParams,
    pub speed: SpeedParams,
    pub filter: FilterParams,
    /// Independent probability of applying each stage.
    pub stage_probability: f64,
}

impl Default for CombinationParams {
    fn default() -> Self {
        Self {
            noise: NoiseParams::default(),
            gain: GainParams::default(),
            speed: SpeedParams::default(),
            filter: FilterParams::default(),
            stage_probability: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Identity,
    Noise,
    Gain,
    Speed,
    PassFilter,
    Combination,
}

impl AttackKind {
    /// The five attack classes evaluated for robustness.
    pub const CLASSES: [AttackKind; 5] = [
        AttackKind::Noise,
        AttackKind::Gain,
        AttackKind::Speed,
        AttackKind::PassFilter,
        AttackKind::Combination,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Identity => "identity",
            AttackKind::Noise => "noise",
            AttackKind::Gain => "gain",
            AttackKind::Speed => "speed",
            AttackKind::PassFilter => "pass-filter",
            AttackKind::Combination => "combination",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            AttackKind::Identity,
            AttackKind::Noise,
            AttackKind::Gain,
            AttackKind::Speed,
            AttackKind::PassFilter,
            AttackKind::Combination,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }

    /// The attack of this kind with default parameters.
    pub fn default_spec(self) -> AttackSpec {
        match self {
            AttackKind::Identity => AttackSpec::Identity,
            AttackKind::Noise => AttackSpec::Noise(NoiseParams::default()),
            AttackKind::Gain => AttackSpec::Gain(GainParams::default()),
            AttackKind::Speed => AttackSpec::Speed(SpeedParams::default()),
            AttackKind::PassFilter => AttackSpec::PassFilter(FilterParams::default()),
            AttackKind::Combination => AttackSpec::Combination(CombinationParams::default()),
        }
    }
}

/// A parameterized attack family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AttackSpec {
    Identity,
    Noise(NoiseParams),
    Gain(GainParams),
    Speed(SpeedParams),
    PassFilter(FilterParams),
    Combination(CombinationParams),
}

// Substream tags inside a combination.
const COIN_TAG: u64 = 0;
const STAGE_TAGS: [u64; 4] = [1, 2, 3, 4];

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(Error::Contract(format!("{name}: invalid range {r:?}")));
    }
    Ok(())
}

fn draw<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        if self.colors.is_empty() {
            return Err(Error::Contract("noise: no colours configured".into()));
        }
        check_range("noise SNR", self.snr_db_range)
    }

    pub fn realize(&self, input: &[f64], seed: u64) -> Result<RealizedAttack> {
        self.validate()?;
        if input.len() < 2 {
            return Err(Error::Contract("noise attack needs at least two samples".into()));
        }
        let p_signal = power(input);
        if p_signal <= 0.0 {
            return Err(Error::DegenerateInput(
                "silent input: SNR is undefined".into(),
            ));
        }
        let mut rng = substream_rng(seed, 0);
        let color = self.colors[rng.random_range(0..self.colors.len())];
        let snr_db = draw(&mut rng, self.snr_db_range);
        let scale = (p_signal / 10f64.powf(snr_db / 10.0)).sqrt();
        let noise = dsp::colored_noise(color, input.len(), &mut rng)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        Ok(RealizedAttack::Noise {
            color,
            snr_db,
            noise,
        })
    }
}

impl GainParams {
    pub fn validate(&self) -> Result<()> {
        check_range("gain", self.gain_db_range)
    }

    pub fn realize(&self, seed: u64) -> Result<RealizedAttack> {
        self.validate()?;
        let db = draw(&mut substream_rng(seed, 0), self.gain_db_range);
        Ok(RealizedAttack::Gain { db })
    }
}

impl SpeedParams {
    pub fn validate(&self) -> Result<()> {
        if self.percentages.is_empty() || self.percentages.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::Contract(format!(
                "speed: percentages must be non-empty and positive, got {:?}",
                self.percentages
            )));
        }
        Ok(())
    }

    pub fn realize(&self, seed: u64) -> Result<RealizedAttack> {
        self.validate()?;
        let mut rng = substream_rng(seed, 0);
        let percent = self.percentages[rng.random_range(0..self.percentages.len())];
        Ok(RealizedAttack::Speed { percent })
    }
}

impl FilterParams {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        check_range("low-pass cutoff", self.low_pass_cutoff_range)?;
        check_range("high-pass cutoff", self.high_pass_cutoff_range)?;
        let nyquist = sample_rate as f64 / 2.0;
        for v in self
            .low_pass_cutoff_range
            .iter()
            .chain(&self.high_pass_cutoff_range)
        {
            if !(*v >= 0.0 && *v <= nyquist) {
                return Err(Error::Contract(format!(
                    "filter cutoff {v} Hz must lie in [0, {nyquist}]"
                )));
            }
        }
        Ok(())
    }

    pub fn realize(&self, sample_rate: u32, seed: u64) -> Result<RealizedAttack> {
        self.validate(sample_rate)?;
        let mut rng = substream_rng(seed, 0);
        let low_pass_hz = draw(&mut rng, self.low_pass_cutoff_range);
        let high_pass_hz = draw(&mut rng, self.high_pass_cutoff_range);
        Ok(RealizedAttack::PassFilter {
            low_pass_hz,
            high_pass_hz,
        })
    }
}

impl AttackSpec {
    pub fn kind(&self) -> AttackKind {
        match self {
            AttackSpec::Identity => AttackKind::Identity,
            AttackSpec::Noise(_) => AttackKind::Noise,
            AttackSpec::Gain(_) => AttackKind::Gain,
            AttackSpec::Speed(_) => AttackKind::Speed,
            AttackSpec::PassFilter(_) => AttackKind::PassFilter,
            AttackSpec::Combination(_) => AttackKind::Combination,
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        match self {
            AttackSpec::Identity => Ok(()),
            AttackSpec::Noise(p) => p.validate(),
            AttackSpec::Gain(p) => p.validate(),
            AttackSpec::Speed(p) => p.validate(),
            AttackSpec::PassFilter(p) => p.validate(sample_rate),
            AttackSpec::Combination(p) => {
                p.noise.validate()?;
                p.gain.validate()?;
                p.speed.validate()?;
                p.filter.validate(sample_rate)?;
                if !(0.0..=1.0).contains(&p.stage_probability) {
                    return Err(Error::Contract(format!(
                        "stage probability {} outside [0, 1]",
                        p.stage_probability
                    )));
                }
                Ok(())
            }
        }
    }

    /// Fixes every random choice of this attack for `input` and `seed`.
    pub fn realize(&self, input: &[f64], sample_rate: u32, seed: u64) -> Result<RealizedAttack> {
        match self {
            AttackSpec::Identity => Ok(RealizedAttack::Identity),
            AttackSpec::Noise(p) => p.realize(input, seed),
            AttackSpec::Gain(p) => p.realize(seed),
            AttackSpec::Speed(p) => p.realize(seed),
            AttackSpec::PassFilter(p) => p.realize(sample_rate, seed),
            AttackSpec::Combination(p) => {
                self.validate(sample_rate)?;
                let mut coins = substream_rng(seed, COIN_TAG);
                let fire: Vec<bool> = (0..4)
                    .map(|_| coins.random::<f64>() < p.stage_probability)
                    .collect();
                let mut stages = Vec::new();
                let mut cur = input.to_vec();
                for (stage, &on) in fire.iter().enumerate() {
                    if !on {
                        continue;
                    }
                    let s = substream(seed, STAGE_TAGS[stage]);
                    let r = match stage {
                        0 => p.noise.realize(&cur, s)?,
                        1 => p.gain.realize(s)?,
                        2 => p.speed.realize(s)?,
                        _ => p.filter.realize(sample_rate, s)?,
                    };
                    cur = r.apply(&cur, sample_rate);
                    stages.push(r);
                }
                Ok(RealizedAttack::Chain { stages })
            }
        }
    }

    /// Samples and applies the attack to `clip`.
    pub fn attack(&self, clip: &AudioClip, seed: u64) -> Result<AudioClip> {
        let r = self.realize(clip.samples(), clip.sample_rate(), seed)?;
        AudioClip::new(r.apply(clip.samples(), clip.sample_rate()), clip.sample_rate())
    }
}

/// Seed of stage `stage` (0 noise, 1 gain, 2 speed, 3 filter) inside a
/// combination attack drawn with `seed`.
pub fn combination_stage_seed(seed: u64, stage: usize) -> u64 {
    substream(seed, STAGE_TAGS[stage])
}

/// An attack with all random choices fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RealizedAttack {
    Identity,
    Noise {
        color: NoiseColor,
        snr_db: f64,
        #[serde(skip)]
        noise: Vec<f64>,
    },
    Gain {
        db: f64,
    },
    Speed {
        percent: f64,
    },
    PassFilter {
        low_pass_hz: f64,
        high_pass_hz: f64,
    },
    /// Stages applied in order (noise, gain, speed, filter), each clamped.
    Chain { stages: Vec<RealizedAttack> },
}

impl RealizedAttack {
    pub fn gain_factor(db: f64) -> f64 {
        10f64.powf(db / 20.0)
    }

    /// Names of the stages that fire, in application order.
    pub fn stage_names(&self) -> Vec<&'static str> {
        match self {
            RealizedAttack::Identity => vec![],
            RealizedAttack::Noise { .. } => vec!["noise"],
            RealizedAttack::Gain { .. } => vec!["gain"],
            RealizedAttack::Speed { .. } => vec!["speed"],
            RealizedAttack::PassFilter { .. } => vec!["pass-filter"],
            RealizedAttack::Chain { stages } => stages.iter().flat_map(|r| r.stage_names()).collect(),
        }
    }

    /// The map before the final clamp. Not defined for chains, which clamp
    /// between stages.
    pub fn pre_clamp(&self, x: &[f64], sample_rate: u32) -> Vec<f64> {
        match self {
            RealizedAttack::Identity => x.to_vec(),
            RealizedAttack::Noise { noise, .. } => {
                x.iter().zip(noise).map(|(a, b)| a + b).collect()
            }
            RealizedAttack::Gain { db } => {
                let g = Self::gain_factor(*db);
                x.iter().map(|v| v * g).collect()
            }
            RealizedAttack::Speed { percent } => resample(x, *percent),
            RealizedAttack::PassFilter {
                low_pass_hz,
                high_pass_hz,
            } => band_limit(x, sample_rate, *high_pass_hz, *low_pass_hz),
            RealizedAttack::Chain { .. } => {
                panic!("pre_clamp is undefined for chained attacks")
            }
        }
    }

    pub fn apply(&self, x: &[f64], sample_rate: u32) -> Vec<f64> {
        match self {
            RealizedAttack::Identity => x.to_vec(),
            RealizedAttack::Chain { stages } => stages
                .iter()
                .fold(x.to_vec(), |cur, s| s.apply(&cur, sample_rate)),
            _ => {
                let mut z = self.pre_clamp(x, sample_rate);
                clamp_unit(&mut z);
                z
            }
        }
    }

    /// Vector-Jacobian product `J(x)^T v` of [`apply`](Self::apply). The clamp
    /// contributes zero derivative at saturated outputs; realized noise is a
    /// constant offset.
    pub fn backward(&self, x: &[f64], sample_rate: u32, upstream: &[f64]) -> Vec<f64> {
        match self {
            RealizedAttack::Identity => upstream.to_vec(),
            RealizedAttack::Chain { stages } => {
                let mut inputs = Vec::with_capacity(stages.len());
                let mut cur = x.to_vec();
                for s in stages {
                    let next = s.apply(&cur, sample_rate);
                    inputs.push(cur);
                    cur = next;
                }
                let mut g = upstream.to_vec();
                for (s, inp) in stages.iter().zip(&inputs).rev() {
                    g = s.backward(inp, sample_rate, &g);
                }
                g
            }
            _ => {
                let z = self.pre_clamp(x, sample_rate);
                let masked: Vec<f64> = upstream
                    .iter()
                    .zip(&z)
                    .map(|(v, z)| if z.abs() < 1.0 { *v } else { 0.0 })
                    .collect();
                self.linear_adjoint(&masked, x.len(), sample_rate)
            }
        }
    }

    fn linear_adjoint(&self, v: &[f64], n: usize, sample_rate: u32) -> Vec<f64> {
        match self {
            RealizedAttack::Identity | RealizedAttack::Noise { .. } => v.to_vec(),
            RealizedAttack::Gain { db } => {
                let g = Self::gain_factor(*db);
                v.iter().map(|a| a * g).collect()
            }
            RealizedAttack::Speed { percent } => resample_adjoint(v, n, *percent),
            // The brick-wall filter is a symmetric operator.
            RealizedAttack::PassFilter {
                low_pass_hz,
                high_pass_hz,
            } => band_limit(v, sample_rate, *high_pass_hz, *low_pass_hz),
            RealizedAttack::Chain { .. } => unreachable!(),
        }
    }
}

/// Length of a `d_x`-sample signal after resampling at `percent` speed.
pub fn resampled_len(d_x: usize, percent: f64) -> usize {
    ((d_x as f64 * 100.0 / percent).round() as usize).max(1)
}

/// Interpolation source `(index, fraction)` of each resampled output sample.
/// Endpoints of input and output are aligned.
fn resample_taps(d_x: usize, percent: f64) -> impl Iterator<Item = (usize, f64)> {
    let len = resampled_len(d_x, percent);
    let step = if len > 1 {
        (d_x - 1) as f64 / (len - 1) as f64
    } else {
        0.0
    };
    (0..len.min(d_x)).map(move |m| {
        let pos = m as f64 * step;
        let i = (pos.floor() as usize).min(d_x.saturating_sub(2));
        (i, pos - i as f64)
    })
}

/// Linear-interpolation resampling to `resampled_len`, then zero-padded or
/// truncated back to the input length.
fn resample(x: &[f64], percent: f64) -> Vec<f64> {
    let d = x.len();
    if d < 2 {
        return x.to_vec();
    }
    let mut out = vec![0.0; d];
    for (o, (i, fr)) in out.iter_mut().zip(resample_taps(d, percent)) {
        *o = x[i] * (1.0 - fr) + x[i + 1] * fr;
    }
    out
}

fn resample_adjoint(v: &[f64], d: usize, percent: f64) -> Vec<f64> {
    if d < 2 {
        return v.to_vec();
    }
    let mut g = vec![0.0; d];
    for (m, (i, fr)) in resample_taps(d, percent).enumerate() {
        g[i] += v[m] * (1.0 - fr);
        g[i + 1] += v[m] * fr;
    }
    g
}

/// Zeroes every DFT bin below `high_pass_hz` or above `low_pass_hz`.
fn band_limit(x: &[f64], sample_rate: u32, high_pass_hz: f64, low_pass_hz: f64) -> Vec<f64> {
    let n = x.len();
    let mut spec = fft_real(x);
    for (k, c) in spec.iter_mut().enumerate() {
        let f = bin_hz(k, n, sample_rate);
        if f < high_pass_hz || f > low_pass_hz {
            *c = rustfft::num_complex::Complex64::new(0.0, 0.0);
        }
    }
    ifft_to_real(spec)
}

// Single-attack entry points -------------------------------------------------

pub fn add_noise(clip: &AudioClip, params: &NoiseParams, seed: u64) -> Result<AudioClip> {
    AttackSpec::Noise(params.clone()).attack(clip, seed)
}

pub fn gain(clip: &AudioClip, params: &GainParams, seed: u64) -> Result<AudioClip> {
    AttackSpec::Gain(params.clone()).attack(clip, seed)
}

pub fn speed_change(clip: &AudioClip, params: &SpeedParams, seed: u64) -> Result<AudioClip> {
    AttackSpec::Speed(params.clone()).attack(clip, seed)
}

pub fn pass_filter(clip: &AudioClip, params: &FilterParams, seed: u64) -> Result<AudioClip> {
    AttackSpec::PassFilter(params.clone()).attack(clip, seed)
}

pub fn combination(clip: &AudioClip, params: &CombinationParams, seed: u64) -> Result<AudioClip> {
    AttackSpec::Combination(params.clone()).attack(clip, seed)
}

// Suites ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    #[serde(flatten)]
    pub spec: AttackSpec,
    /// Relative sampling weight.
    #[serde(default = "one")]
    pub probability: f64,
}

fn one() -> f64 {
    1.0
}

/// The attack distribution: a weighted mixture of attack families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSuite {
    pub attacks: Vec<SuiteEntry>,
    #[serde(default)]
    pub master_seed: u64,
}

impl AttackSuite {
    pub fn single(spec: AttackSpec) -> Self {
        Self {
            attacks: vec![SuiteEntry {
                spec,
                probability: 1.0,
            }],
            master_seed: 0,
        }
    }

    pub fn of_kind(kind: AttackKind) -> Self {
        Self::single(kind.default_spec())
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.attacks.is_empty() {
            return Err(Error::Contract("attack suite is empty".into()));
        }
        for e in &self.attacks {
            if !(e.probability.is_finite() && e.probability > 0.0) {
                return Err(Error::Contract(format!(
                    "attack weight {} must be positive",
                    e.probability
                )));
            }
            e.spec.validate(sample_rate)?;
        }
        Ok(())
    }

    /// Picks one attack family according to the weights.
    pub fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> &AttackSpec {
        if self.attacks.len() == 1 {
            return &self.attacks[0].spec;
        }
        let total: f64 = self.attacks.iter().map(|e| e.probability).sum();
        let mut r = rng.random::<f64>() * total;
        for e in &self.attacks {
            if r < e.probability {
                return &e.spec;
            }
            r -= e.probability;
        }
        &self.attacks[self.attacks.len() - 1].spec
    }

    /// Draws an attack family and realizes it for `input`.
    pub fn sample(&self, input: &[f64], sample_rate: u32, seed: u64) -> Result<RealizedAttack> {
        let mut pick_rng = substream_rng(seed, u64::MAX);
        self.pick(&mut pick_rng).realize(input, sample_rate, seed)
    }

    pub fn label(&self) -> String {
        self.attacks
            .iter()
            .map(|e| e.spec.kind().name())
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::fft_real;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    const SR: u32 = 16_000;

    fn tone(n: usize, bin: usize, amp: f64) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (2.0 * PI * bin as f64 * i as f64 / n as f64).sin())
            .collect()
    }

    fn mixture(n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let t = i as f64 / SR as f64;
                0.3 * (2.0 * PI * 440.0 * t).sin() + 0.2 * (2.0 * PI * 3100.0 * t).cos()
            })
            .collect()
    }

    /// Least-squares slope of log PSD against log frequency, averaged over
    /// realizations.
    fn psd_slope(color: NoiseColor) -> f64 {
        let n = 4096;
        let mut psd = vec![0.0; n / 2];
        for seed in 0..32 {
            let x = colored_noise(color, n, seed).unwrap();
            for (k, c) in fft_real(&x).iter().take(n / 2).enumerate() {
                psd[k] += c.norm_sqr();
            }
        }
        let pts: Vec<(f64, f64)> = (1..n / 2)
            .map(|k| ((k as f64).ln(), psd[k].ln()))
            .collect();
        let m = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    }

    #[test]
    fn noise_slopes() {
        for (color, want) in [
            (NoiseColor::Brown, -2.0),
            (NoiseColor::Pink, -1.0),
            (NoiseColor::White, 0.0),
            (NoiseColor::Blue, 1.0),
            (NoiseColor::Violet, 2.0),
        ] {
            let s = psd_slope(color);
            assert!((s - want).abs() <= 0.3, "{color}: slope {s}");
        }
    }

    #[test]
    fn noise_hits_requested_snr_before_clamp() {
        let x = mixture(2048);
        let p = NoiseParams::with_white();
        for seed in 0..40 {
            let r = p.realize(&x, seed).unwrap();
            let RealizedAttack::Noise { snr_db, .. } = &r else {
                panic!("expected noise");
            };
            assert!((3.0..=30.0).contains(snr_db));
            let y = r.pre_clamp(&x, SR);
            let e: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
            let got = 10.0 * (power(&x) / power(&e)).log10();
            assert!((got - snr_db).abs() < 0.1, "{got} vs {snr_db}");
        }
    }

    #[test]
    fn noise_on_silence_is_degenerate() {
        let err = NoiseParams::default().realize(&[0.0; 64], 1).unwrap_err();
        assert!(matches!(err, Error::DegenerateInput(_)));
    }

    #[test]
    fn gain_range_and_clamp() {
        let x = mixture(512);
        for seed in 0..50 {
            let r = GainParams::default().realize(seed).unwrap();
            let RealizedAttack::Gain { db } = r else { panic!() };
            assert!((-18.0..=6.0).contains(&db));
            let y = r.apply(&x, SR);
            let g = RealizedAttack::gain_factor(db);
            for (a, b) in y.iter().zip(&x) {
                assert!((a - (b * g).clamp(-1.0, 1.0)).abs() < 1e-15);
            }
        }
        let loud = vec![0.9; 16];
        let y = RealizedAttack::Gain { db: 6.0 }.apply(&loud, SR);
        assert!(y.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn speed_length_bookkeeping() {
        assert_eq!(resampled_len(1000, 80.0), 1250);
        assert_eq!(resampled_len(1000, 90.0), 1111);
        assert_eq!(resampled_len(1000, 110.0), 909);
        assert_eq!(resampled_len(1024, 110.0), 931);

        let x: Vec<f64> = (0..1000).map(|i| 0.5 * (i as f64 / 999.0)).collect();
        let fast = RealizedAttack::Speed { percent: 110.0 }.apply(&x, SR);
        assert_eq!(fast.len(), 1000);
        assert!(fast[909..].iter().all(|v| *v == 0.0));
        // Endpoint alignment: the last resampled sample is the last input.
        assert!((fast[908] - 0.5).abs() < 1e-12);
        assert_eq!(fast[0], 0.0);

        let slow = RealizedAttack::Speed { percent: 80.0 }.apply(&x, SR);
        assert_eq!(slow.len(), 1000);
        // A ramp resamples to a ramp with slope 999/1249 per output sample.
        let want = 0.5 * 999.0 / 1249.0 / 999.0 * 999.0;
        assert!((slow[999] - want).abs() < 1e-12, "{} vs {want}", slow[999]);
    }

    #[test]
    fn brick_wall_stopband() {
        let n = 2048;
        let hz_per_bin = SR as f64 / n as f64;
        let r = RealizedAttack::PassFilter {
            low_pass_hz: 3000.0,
            high_pass_hz: 500.0,
        };
        for bin in [3usize, 20, 60, 300, 500, 900] {
            let f = bin as f64 * hz_per_bin;
            let x = tone(n, bin, 0.5);
            let y = r.apply(&x, SR);
            let atten = 20.0 * (dsp::rms(&x) / dsp::rms(&y).max(1e-300)).log10();
            if !(500.0..=3000.0).contains(&f) {
                assert!(atten >= 60.0, "bin {bin} ({f} Hz): {atten} dB");
            } else {
                assert!(atten.abs() < 1e-9, "bin {bin} ({f} Hz) passband: {atten} dB");
            }
        }
    }

    #[test]
    fn filter_cutoffs_validated() {
        let p = FilterParams {
            low_pass_cutoff_range: [2200.0, 9000.0],
            ..FilterParams::default()
        };
        assert!(p.validate(SR).is_err());
        assert!(FilterParams::default().validate(SR).is_ok());
        assert!(FilterParams::default().validate(4000).is_err());
    }

    #[test]
    fn adjoints_match_forward_maps() {
        let n = 300;
        let x: Vec<f64> = (0..n).map(|i| 0.2 * ((i * 7 % 13) as f64 / 13.0 - 0.5)).collect();
        let v: Vec<f64> = (0..n).map(|i| (i * 5 % 11) as f64 / 11.0 - 0.5).collect();
        let ops = [
            RealizedAttack::Gain { db: -4.0 },
            RealizedAttack::Speed { percent: 80.0 },
            RealizedAttack::Speed { percent: 110.0 },
            RealizedAttack::PassFilter {
                low_pass_hz: 4000.0,
                high_pass_hz: 300.0,
            },
        ];
        for op in &ops {
            let ax = op.pre_clamp(&x, SR);
            let atv = op.backward(&x, SR, &v);
            let lhs: f64 = ax.iter().zip(&v).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&atv).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12, "{op:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn backward_zero_where_saturated() {
        let x = vec![0.9, 0.1, -0.95];
        let r = RealizedAttack::Gain { db: 6.0 };
        let g = r.backward(&x, SR, &[1.0, 1.0, 1.0]);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[2], 0.0);
        assert!(g[1] > 1.9);
    }

    #[test]
    fn combination_follows_coins_and_stage_seeds() {
        let x = mixture(1024);
        let p = CombinationParams::default();
        let mut seen = [0usize; 5];
        for seed in 0..200u64 {
            let r = AttackSpec::Combination(p.clone()).realize(&x, SR, seed).unwrap();
            let names = r.stage_names();
            seen[names.len()] += 1;
            // Order is always noise, gain, speed, filter.
            let order = ["noise", "gain", "speed", "pass-filter"];
            let pos: Vec<usize> = names
                .iter()
                .map(|n| order.iter().position(|o| o == n).unwrap())
                .collect();
            assert!(pos.windows(2).all(|w| w[0] < w[1]));

            // Replaying the stages by hand reproduces the chain.
            let RealizedAttack::Chain { stages } = &r else { panic!() };
            let mut cur = x.clone();
            for (name, st) in names.iter().zip(stages) {
                let stage = order.iter().position(|o| o == name).unwrap();
                let s = combination_stage_seed(seed, stage);
                let again = match stage {
                    0 => p.noise.realize(&cur, s).unwrap(),
                    1 => p.gain.realize(s).unwrap(),
                    2 => p.speed.realize(s).unwrap(),
                    _ => p.filter.realize(SR, s).unwrap(),
                };
                assert_eq!(&again, st);
                cur = again.apply(&cur, SR);
            }
            assert_eq!(cur, r.apply(&x, SR));
            let json = serde_json::to_value(&r).unwrap();
            assert_eq!(json["kind"], "chain");
            assert_eq!(json["stages"].as_array().unwrap().len(), names.len());
        }
        // With p = 0.5 per stage every stage count appears.
        assert!(seen.iter().all(|c| *c > 0), "{seen:?}");
        assert!(seen[0] > 3 && seen[4] > 3);
    }

    #[test]
    fn all_off_and_all_on() {
        let x = mixture(256);
        let off = CombinationParams {
            stage_probability: 0.0,
            ..Default::default()
        };
        let r = AttackSpec::Combination(off).realize(&x, SR, 1).unwrap();
        assert_eq!(r.apply(&x, SR), x);
        let on = CombinationParams {
            stage_probability: 1.0,
            ..Default::default()
        };
        let r = AttackSpec::Combination(on).realize(&x, SR, 1).unwrap();
        assert_eq!(r.stage_names().len(), 4);
    }

    #[test]
    fn suite_identity_and_json() {
        let suite = AttackSuite::of_kind(AttackKind::Identity);
        let x = mixture(64);
        assert_eq!(suite.sample(&x, SR, 3).unwrap(), RealizedAttack::Identity);
        let mixed = AttackSuite {
            attacks: vec![
                SuiteEntry {
                    spec: AttackKind::Gain.default_spec(),
                    probability: 1.0,
                },
                SuiteEntry {
                    spec: AttackKind::PassFilter.default_spec(),
                    probability: 3.0,
                },
            ],
            master_seed: 9,
        };
        let back = AttackSuite::from_json(&mixed.to_json().unwrap()).unwrap();
        assert_eq!(back, mixed);
        assert_eq!(mixed.label(), "gain+pass-filter");
        let filters = (0..400)
            .filter(|s| {
                matches!(
                    mixed.sample(&x, SR, *s).unwrap(),
                    RealizedAttack::PassFilter { .. }
                )
            })
            .count();
        assert!((250..350).contains(&filters), "{filters}");
        assert!(AttackSuite { attacks: vec![], master_seed: 0 }.validate(SR).is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in AttackKind::CLASSES {
            assert_eq!(AttackKind::parse(k.name()), Some(k));
            assert_eq!(k.default_spec().kind(), k);
        }
        assert_eq!(AttackKind::parse("reverb"), None);
    }

    proptest! {
        #[test]
        fn attacks_are_deterministic_and_bounded(seed in any::<u64>(), k in 0usize..5) {
            let clip = AudioClip::new(mixture(512), SR).unwrap();
            let spec = AttackKind::CLASSES[k].default_spec();
            let a = spec.attack(&clip, seed).unwrap();
            let b = spec.attack(&clip, seed).unwrap();
            prop_assert_eq!(a.samples(), b.samples());
            prop_assert_eq!(a.len(), clip.len());
            prop_assert!(a.samples().iter().all(|v| v.abs() <= 1.0));
        }

        #[test]
        fn linear_attacks_superpose(seed in any::<u64>(), k in 1usize..4, a in -2.0f64..2.0) {
            // Gain, speed and filter are linear below the clamp.
            let spec = AttackKind::CLASSES[k].default_spec();
            let x = mixture(256);
            let y: Vec<f64> = tone(256, 9, 0.1);
            let r = spec.realize(&x, SR, seed).unwrap();
            let comb: Vec<f64> = x.iter().zip(&y).map(|(p, q)| 0.3 * p + a * 0.3 * q).collect();
            let lhs = r.pre_clamp(&comb, SR);
            let rx = r.pre_clamp(&x, SR);
            let ry = r.pre_clamp(&y, SR);
            for i in 0..256 {
                prop_assert!((lhs[i] - (0.3 * rx[i] + a * 0.3 * ry[i])).abs() < 1e-12);
            }
        }
    }
}
