//! User-end generator surrogate: the default sample source plus a learned
//! additive watermark, clipped to the valid amplitude range.
//!
//! The watermark `w` is trained against three terms: a hinge loss pushing the
//! key's margin on watermarked output above 1, the mean L1 distance between
//! watermarked and original samples, and an angle loss aligning the mean
//! realized perturbation with the key direction. The robust variant applies a
//! sampled attack to every sample before the hinge term only.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{AttackSpec, AttackSuite, RealizedAttack};
use crate::audio::{AudioClip, Dataset};
use crate::error::{ensure_dims, Error, Result};
use crate::keygen::{dot, norm, Key};
use crate::optim::{Adam, EarlyStop, OptimizerConfig};
use crate::rng::{substream, substream_rng};

pub const MODEL_FORMAT_VERSION: u32 = 1;
/// Watermark initialization `INIT_SCALE * direction`.
pub const INIT_SCALE: f64 = 0.01;
/// Largest useful watermark amplitude: a full swing from -1 to +1.
pub const MAX_AMPLITUDE: f64 = 2.0;

/// Weights of the hinge, quality and angle terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lambdas {
    pub hinge: f64,
    pub quality: f64,
    pub angle: f64,
}

impl Lambdas {
    /// Default weights, sized for fine-tuning a full generator. With an additive
    /// watermark the quality term dominates and training collapses to
    /// `w -> 0`; see [`Lambdas::SURROGATE`].
    pub const DEFAULT: Lambdas = Lambdas {
        hinge: 10.0,
        quality: 10_000.0,
        angle: 1_000.0,
    };

    /// Weights calibrated for the additive watermark: the quality term is
    /// rescaled to the per-clip L1 magnitude of a useful watermark.
    pub const SURROGATE: Lambdas = Lambdas {
        hinge: 10.0,
        quality: 0.01,
        angle: 100.0,
    };

    pub fn new(hinge: f64, quality: f64, angle: f64) -> Result<Self> {
        let l = Self {
            hinge,
            quality,
            angle,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.hinge, self.quality, self.angle];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || all.iter().all(|v| *v == 0.0) {
            return Err(Error::Contract(format!(
                "lambdas must be finite, non-negative and not all zero: {self:?}"
            )));
        }
        Ok(())
    }

    /// The hinge-only, `+quality` and `+angle` ablation rows derived from `self`.
    pub fn ablation(&self) -> [(&'static str, Lambdas); 3] {
        [
            (
                "hinge-only",
                Lambdas {
                    quality: 0.0,
                    angle: 0.0,
                    ..*self
                },
            ),
            (
                "+L_d",
                Lambdas {
                    angle: 0.0,
                    ..*self
                },
            ),
            ("+L_A", *self),
        ]
    }
}

impl Default for Lambdas {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Per-iteration loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub hinge: f64,
    pub quality: f64,
    pub angle: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkModel {
    pub key_id: u32,
    pub w: Vec<f64>,
    pub lambdas: Lambdas,
    pub robust: Option<AttackSuite>,
    pub training_log: Vec<LogRow>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    key_id: u32,
    lambdas: Lambdas,
    robust_suite: Option<AttackSuite>,
    w: Vec<f64>,
    training_log: Option<String>,
}

impl WatermarkModel {
    pub fn d_x(&self) -> usize {
        self.w.len()
    }

    /// Generator output for base sample `clip`: `clamp(clip + w, -1, 1)`.
    pub fn apply(&self, clip: &AudioClip) -> Result<AudioClip> {
        ensure_dims("WatermarkModel::apply", self.w.len(), clip.len())?;
        AudioClip::clamped(watermarked(clip.samples(), &self.w), clip.sample_rate())
    }

    pub fn apply_all(&self, clips: &[AudioClip]) -> Result<Vec<AudioClip>> {
        clips.iter().map(|c| self.apply(c)).collect()
    }

    /// JSON document; `log_path` is recorded as the location of the CSV log.
    pub fn to_json(&self, log_path: Option<&str>) -> Result<String> {
        let f = ModelFile {
            version: MODEL_FORMAT_VERSION,
            key_id: self.key_id,
            lambdas: self.lambdas,
            robust_suite: self.robust.clone(),
            w: self.w.clone(),
            training_log: log_path.map(str::to_string),
        };
        Ok(serde_json::to_string_pretty(&f)?)
    }

    /// Parses a model document. The training log is not embedded and comes
    /// back empty.
    pub fn from_json(s: &str) -> Result<Self> {
        let f: ModelFile = serde_json::from_str(s)?;
        if f.version != MODEL_FORMAT_VERSION {
            return Err(Error::Contract(format!(
                "unsupported model file version {}",
                f.version
            )));
        }
        f.lambdas.validate()?;
        if f.w.iter().any(|v| !v.is_finite() || v.abs() > MAX_AMPLITUDE) {
            return Err(Error::Contract("watermark has out-of-range entries".into()));
        }
        Ok(Self {
            key_id: f.key_id,
            w: f.w,
            lambdas: f.lambdas,
            robust: f.robust_suite,
            training_log: Vec::new(),
        })
    }

    pub fn log_csv(&self) -> String {
        let mut s = String::from("iter,L_h,L_d,L_A,total\n");
        for r in &self.training_log {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.iter, r.hinge, r.quality, r.angle, r.total
            );
        }
        s
    }

    pub fn save(&self, model_path: impl AsRef<Path>, log_path: Option<&Path>) -> Result<()> {
        let model_path = model_path.as_ref();
        if let Some(lp) = log_path {
            fs::write(lp, self.log_csv()).map_err(|e| Error::io(lp, e))?;
        }
        let log_name = log_path.map(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
        });
        let json = self.to_json(log_name.as_deref())?;
        fs::write(model_path, json + "\n").map_err(|e| Error::io(model_path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[inline]
fn watermarked(x: &[f64], w: &[f64]) -> Vec<f64> {
    x.iter().zip(w).map(|(a, b)| (a + b).clamp(-1.0, 1.0)).collect()
}

/// Stand-in for the default generator: latent draws are seeds that pick
/// clips from the authentic dataset.
#[derive(Debug, Clone, Copy)]
pub struct SampleSource<'a> {
    dataset: &'a Dataset,
}

impl<'a> SampleSource<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        Self { dataset }
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    pub fn d_x(&self) -> usize {
        self.dataset.d_x()
    }

    pub fn sample_rate(&self) -> u32 {
        self.dataset.sample_rate()
    }

    /// Indices of `k` clips drawn uniformly with replacement.
    pub fn draw_indices(&self, seed: u64, k: usize) -> Vec<usize> {
        let mut rng = substream_rng(seed, 0);
        (0..k)
            .map(|_| rng.random_range(0..self.dataset.len()))
            .collect()
    }

    pub fn draw(&self, seed: u64, k: usize) -> Vec<&'a AudioClip> {
        self.draw_indices(seed, k)
            .into_iter()
            .map(|i| &self.dataset.clips()[i])
            .collect()
    }
}

// Loss terms -------------------------------------------------------------------

/// Mean of `max{1 - score(x), 0}` over the batch.
pub fn hinge_loss(key: &Key, batch: &[AudioClip]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("hinge_loss: empty batch".into()));
    }
    let mut total = 0.0;
    for c in batch {
        ensure_dims("hinge_loss", key.d_x(), c.len())?;
        total += (1.0 - key.score_samples(c.samples())).max(0.0);
    }
    Ok(total / batch.len() as f64)
}

/// Mean over the batch of the per-clip L1 distance between aligned pre- and
/// post-watermark clips.
pub fn quality_loss(batch_pre: &[AudioClip], batch_post: &[AudioClip]) -> Result<f64> {
    ensure_dims("quality_loss batch", batch_pre.len(), batch_post.len())?;
    if batch_pre.is_empty() {
        return Err(Error::Contract("quality_loss: empty batch".into()));
    }
    let mut total = 0.0;
    for (a, b) in batch_pre.iter().zip(batch_post) {
        ensure_dims("quality_loss", a.len(), b.len())?;
        total += l1(a.samples(), b.samples());
    }
    Ok(total / batch_pre.len() as f64)
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleLoss {
    pub value: f64,
    pub cosine: f64,
    /// Set when the perturbation has zero norm; the loss is then 1.
    pub degenerate: bool,
}

/// `max{1 - cos(perturbation, direction), 0}`, with the perturbation taken
/// as generator output minus default output (aligned with `+direction`).
pub fn angle_loss(perturbation: &[f64], key: &Key) -> Result<AngleLoss> {
    ensure_dims("angle_loss", perturbation.len(), key.d_x())?;
    let np = norm(perturbation);
    let nd = norm(&key.direction);
    if np == 0.0 || nd == 0.0 {
        return Ok(AngleLoss {
            value: 1.0,
            cosine: 0.0,
            degenerate: true,
        });
    }
    let cosine = dot(perturbation, &key.direction) / (np * nd);
    Ok(AngleLoss {
        value: (1.0 - cosine).max(0.0),
        cosine,
        degenerate: false,
    })
}

/// Mean realized perturbation `E[G_w(z) - G_0(z)]` over `base` clips.
pub fn mean_perturbation(w: &[f64], base: &[&[f64]]) -> Vec<f64> {
    let mut acc = vec![0.0; w.len()];
    for x in base {
        for ((a, xi), wi) in acc.iter_mut().zip(x.iter()).zip(w) {
            *a += (xi + wi).clamp(-1.0, 1.0) - xi;
        }
    }
    let n = base.len().max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

// Objective --------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub hinge: f64,
    pub quality: f64,
    pub angle: f64,
    pub total: f64,
    pub angle_degenerate: bool,
}

/// Combined objective and its (sub)gradient with respect to `w` on one batch.
///
/// `attacks[i]`, when given, is applied to the watermarked sample `i` before
/// the hinge term. The clamp passes gradients only for coordinates strictly
/// inside `(-1, 1)`.
pub fn objective(
    key: &Key,
    w: &[f64],
    batch: &[&[f64]],
    attacks: Option<&[RealizedAttack]>,
    sample_rate: u32,
    lambdas: &Lambdas,
) -> (ObjectiveValue, Vec<f64>) {
    let d = w.len();
    let b = batch.len() as f64;
    let u = &key.direction;
    let mut g_hinge = vec![0.0; d];
    let mut g_quality = vec![0.0; d];
    let mut inside = vec![0.0; d];
    let mut delta = vec![0.0; d];
    let mut hinge = 0.0;
    let mut quality = 0.0;

    for (r, x) in batch.iter().enumerate() {
        let y = watermarked(x, w);
        let attacked;
        let z: &[f64] = match attacks {
            Some(a) => {
                attacked = a[r].apply(&y, sample_rate);
                &attacked
            }
            None => &y,
        };
        let margin = 1.0 - (dot(u, z) + key.bias);
        let upstream = if margin > 0.0 {
            hinge += margin;
            Some(match attacks {
                Some(a) => a[r].backward(&y, sample_rate, u),
                None => u.clone(),
            })
        } else {
            None
        };
        for k in 0..d {
            let diff = y[k] - x[k];
            quality += diff.abs();
            delta[k] += diff;
            let pre = x[k] + w[k];
            if pre.abs() < 1.0 {
                inside[k] += 1.0;
                g_quality[k] += w[k].signum() * (w[k] != 0.0) as u8 as f64;
                if let Some(up) = &upstream {
                    g_hinge[k] -= up[k];
                }
            }
        }
    }
    hinge /= b;
    quality /= b;
    delta.iter_mut().for_each(|v| *v /= b);

    let nd = norm(&delta);
    let nu = norm(u);
    let (angle, angle_degenerate, g_delta) = if nd == 0.0 {
        (1.0, true, vec![0.0; d])
    } else {
        let cos = dot(&delta, u) / (nd * nu);
        let g: Vec<f64> = delta
            .iter()
            .zip(u)
            .map(|(dv, uv)| -(uv / nu - cos * dv / nd) / nd)
            .collect();
        if 1.0 - cos > 0.0 {
            (1.0 - cos, false, g)
        } else {
            (0.0, false, vec![0.0; d])
        }
    };

    let grad = (0..d)
        .map(|k| {
            lambdas.hinge * g_hinge[k] / b
                + lambdas.quality * g_quality[k] / b
                + lambdas.angle * g_delta[k] * inside[k] / b
        })
        .collect();
    let total = lambdas.hinge * hinge + lambdas.quality * quality + lambdas.angle * angle;
    (
        ObjectiveValue {
            hinge,
            quality,
            angle,
            total,
            angle_degenerate,
        },
        grad,
    )
}

// Training ---------------------------------------------------------------------

const BATCH_TAG: u64 = 0xBA7C;
const ATTACK_TAG: u64 = 0xA77A;

/// Trains the watermark for `key` under the combined objective.
pub fn train(
    key: &Key,
    source: &SampleSource<'_>,
    lambdas: Lambdas,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<WatermarkModel> {
    fit(key, source, None, lambdas, opt, seed)
}

/// Trains the watermark with the hinge term evaluated on attacked samples.
pub fn train_robust(
    key: &Key,
    source: &SampleSource<'_>,
    suite: &AttackSuite,
    lambdas: Lambdas,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<WatermarkModel> {
    suite.validate(source.sample_rate())?;
    fit(key, source, Some(suite), lambdas, opt, seed)
}

fn fit(
    key: &Key,
    source: &SampleSource<'_>,
    suite: Option<&AttackSuite>,
    lambdas: Lambdas,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<WatermarkModel> {
    key.validate()?;
    lambdas.validate()?;
    ensure_dims("train", key.d_x(), source.d_x())?;
    let clips = source.dataset().clips();
    let n = clips.len();
    let d = key.d_x();
    let sr = source.sample_rate();
    let batch = opt.effective_batch(n);
    let full_batch = batch == n && opt.batch_size.is_none();
    let stochastic = !full_batch
        || suite.is_some_and(|s| s.attacks.iter().any(|e| e.spec != AttackSpec::Identity));

    let mut w: Vec<f64> = key.direction.iter().map(|v| INIT_SCALE * v).collect();
    let mut adam = Adam::new(*opt, d);
    let mut stop = EarlyStop::new(opt);
    let mut smoothed: Option<f64> = None;
    // Full-batch runs return the best iterate seen; with a fixed step size the
    // L1 term can leave the last iterate worse than an earlier one.
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut log = Vec::new();

    for it in 0..opt.max_iters {
        let idx: Vec<usize> = if full_batch {
            (0..n).collect()
        } else {
            source.draw_indices(substream(substream(seed, BATCH_TAG), it as u64), batch)
        };
        let xs: Vec<&[f64]> = idx.iter().map(|&i| clips[i].samples()).collect();
        let realized = match suite {
            Some(s) => {
                let stream = substream(substream(seed, ATTACK_TAG), it as u64);
                let mut out = Vec::with_capacity(xs.len());
                for (r, x) in xs.iter().enumerate() {
                    let y = watermarked(x, &w);
                    out.push(s.sample(&y, sr, substream(stream, r as u64))?);
                }
                Some(out)
            }
            None => None,
        };
        let (val, grad) = objective(key, &w, &xs, realized.as_deref(), sr, &lambdas);
        if !val.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "watermark for key {}: loss {} at iteration {it}",
                key.id, val.total
            )));
        }
        log.push(LogRow {
            iter: it,
            hinge: val.hinge,
            quality: val.quality,
            angle: val.angle,
            total: val.total,
        });
        // Minibatch and attacked losses are noisy; the stopping rule sees a
        // running mean.
        let tracked = if !stochastic {
            if best.as_ref().is_none_or(|(b, _)| val.total < *b) {
                best = Some((val.total, w.clone()));
            }
            val.total
        } else {
            let s = smoothed.map_or(val.total, |s| 0.9 * s + 0.1 * val.total);
            smoothed = Some(s);
            s
        };
        if stop.record(tracked) {
            break;
        }
        let step = adam.step(&grad);
        for (wi, s) in w.iter_mut().zip(&step) {
            *wi = (*wi - s).clamp(-MAX_AMPLITUDE, MAX_AMPLITUDE);
        }
    }

    if let Some((_, bw)) = best.filter(|(b, _)| {
        // The final step is not evaluated; score it before choosing.
        let xs: Vec<&[f64]> = clips.iter().map(|c| c.samples()).collect();
        objective(key, &w, &xs, None, sr, &lambdas).0.total > *b
    }) {
        w = bw;
    }

    Ok(WatermarkModel {
        key_id: key.id,
        w,
        lambdas,
        robust: suite.cloned(),
        training_log: log,
    })
}

/// Value of the combined objective for watermark `w` over the whole dataset
/// (no attacks).
pub fn dataset_objective(key: &Key, w: &[f64], dataset: &Dataset, lambdas: &Lambdas) -> ObjectiveValue {
    let xs: Vec<&[f64]> = dataset.clips().iter().map(|c| c.samples()).collect();
    objective(key, w, &xs, None, dataset.sample_rate(), lambdas).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackKind;
    use crate::audio::synth_dataset;
    use crate::keygen::{generate_keys, KeygenConfig};

    const SR: u32 = 8000;

    fn clip(v: Vec<f64>) -> AudioClip {
        AudioClip::new(v, SR).unwrap()
    }

    fn model(w: Vec<f64>) -> WatermarkModel {
        WatermarkModel {
            key_id: 1,
            w,
            lambdas: Lambdas::default(),
            robust: None,
            training_log: Vec::new(),
        }
    }

    fn e(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn apply_clamps() {
        let x = clip(vec![0.9, -0.2, 0.0, -0.95]);
        assert_eq!(model(vec![0.0; 4]).apply(&x).unwrap(), x);
        let y = model(vec![0.3, 0.1, -0.5, -0.3]).apply(&x).unwrap();
        assert_eq!(y.samples()[0], 1.0);
        assert!((y.samples()[1] + 0.1).abs() < 1e-15);
        assert_eq!(y.samples()[3], -1.0);
        assert_eq!(y.sample_rate(), SR);
        assert!(matches!(
            model(vec![0.0; 3]).apply(&x),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn hinge_examples() {
        let key = Key::new(1, e(0, 2), 0.0).unwrap();
        let b = |v: &[f64]| v.iter().map(|m| clip(vec![*m, 0.0])).collect::<Vec<_>>();
        assert_eq!(hinge_loss(&key, &b(&[1.0, 1.0])).unwrap(), 0.0);
        assert_eq!(hinge_loss(&key, &b(&[0.0])).unwrap(), 1.0);
        // Scores 2, 0.5, -1.
        let key = Key::new(1, vec![0.5; 4], 0.0).unwrap();
        let batch: Vec<AudioClip> = [1.0, 0.25, -0.5].iter().map(|v| clip(vec![*v; 4])).collect();
        let l = hinge_loss(&key, &batch).unwrap();
        assert!((l - 2.5 / 3.0).abs() < 1e-15);
        assert!(hinge_loss(&key, &[]).is_err());
    }

    #[test]
    fn quality_examples() {
        let x = vec![clip(vec![0.1, 0.2, -0.3, 0.0])];
        let m = model(vec![0.0; 4]);
        assert_eq!(quality_loss(&x, &m.apply_all(&x).unwrap()).unwrap(), 0.0);
        let m = model(vec![0.1, -0.1, 0.0, 0.0]);
        let q = quality_loss(&x, &m.apply_all(&x).unwrap()).unwrap();
        assert!((q - 0.2).abs() < 1e-15);
        let x = vec![clip(vec![0.95, 0.0])];
        let m = model(vec![0.1, 0.0]);
        let q = quality_loss(&x, &m.apply_all(&x).unwrap()).unwrap();
        assert!((q - 0.05).abs() < 1e-12);
    }

    #[test]
    fn angle_examples() {
        let key = Key::new(1, e(0, 3), 0.0).unwrap();
        assert_eq!(angle_loss(&[2.0, 0.0, 0.0], &key).unwrap().value, 0.0);
        assert_eq!(angle_loss(&[0.0, 1.0, 0.0], &key).unwrap().value, 1.0);
        assert_eq!(angle_loss(&[-1.0, 0.0, 0.0], &key).unwrap().value, 2.0);
        let z = angle_loss(&[0.0; 3], &key).unwrap();
        assert!(z.degenerate);
        assert_eq!(z.value, 1.0);
    }

    #[test]
    fn lambdas_validated() {
        assert!(Lambdas::new(0.0, 0.0, 0.0).is_err());
        assert!(Lambdas::new(1.0, -1.0, 0.0).is_err());
        assert!(Lambdas::new(0.0, 1.0, 0.0).is_ok());
        assert_eq!(Lambdas::default(), Lambdas::DEFAULT);
        let rows = Lambdas::SURROGATE.ablation();
        assert_eq!(rows[0].1.quality, 0.0);
        assert_eq!(rows[1].1.angle, 0.0);
        assert_eq!(rows[2].1, Lambdas::SURROGATE);
    }

    fn fixture() -> (Dataset, crate::KeySet) {
        let ds = synth_dataset(24, 128, SR, 3).unwrap();
        let (keys, _) = generate_keys(&ds, 2, &KeygenConfig::default(), 5).unwrap();
        (ds, keys)
    }

    #[test]
    fn sample_source_is_seeded() {
        let (ds, _) = fixture();
        let s = SampleSource::new(&ds);
        assert_eq!(s.draw_indices(4, 10), s.draw_indices(4, 10));
        assert_ne!(s.draw_indices(4, 10), s.draw_indices(5, 10));
        assert_eq!(s.draw(4, 3).len(), 3);
    }

    #[test]
    fn quality_only_keeps_watermark_at_zero() {
        let (ds, keys) = fixture();
        let src = SampleSource::new(&ds);
        let m = train(
            &keys.keys()[0],
            &src,
            Lambdas::new(0.0, 1.0, 0.0).unwrap(),
            &OptimizerConfig::default(),
            1,
        )
        .unwrap();
        let max = m.w.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(max <= 0.011, "{max}");
    }

    #[test]
    fn training_descends_and_is_deterministic() {
        let (ds, keys) = fixture();
        let src = SampleSource::new(&ds);
        let key = &keys.keys()[1];
        let opt = OptimizerConfig::default();
        let a = train(key, &src, Lambdas::SURROGATE, &opt, 9).unwrap();
        let b = train(key, &src, Lambdas::SURROGATE, &opt, 9).unwrap();
        assert_eq!(a, b);
        let init: Vec<f64> = key.direction.iter().map(|v| INIT_SCALE * v).collect();
        let l0 = dataset_objective(key, &init, &ds, &Lambdas::SURROGATE).total;
        let l1 = dataset_objective(key, &a.w, &ds, &Lambdas::SURROGATE).total;
        assert!(l1 <= l0, "{l1} > {l0}");
        assert!(a.w.iter().all(|v| v.abs() <= MAX_AMPLITUDE));
        let log = &a.training_log;
        assert!(log.last().unwrap().total <= log[0].total);
        // The watermark makes every sample fire the key.
        for c in ds.clips() {
            assert!(key.score_samples(a.apply(c).unwrap().samples()) > 0.0);
        }
    }

    #[test]
    fn full_batch_training_never_ends_above_its_best_iterate() {
        let (ds, keys) = fixture();
        let key = &keys.keys()[0];
        let opt = OptimizerConfig {
            max_iters: 60,
            ..OptimizerConfig::default()
        };
        let m = train(key, &SampleSource::new(&ds), Lambdas::DEFAULT, &opt, 1).unwrap();
        let best = m.training_log.iter().map(|r| r.total).fold(f64::INFINITY, f64::min);
        let fin = dataset_objective(key, &m.w, &ds, &Lambdas::DEFAULT).total;
        assert!(fin <= best + 1e-9, "{fin} > {best}");
    }

    #[test]
    fn identity_suite_matches_plain_training() {
        let (ds, keys) = fixture();
        let src = SampleSource::new(&ds);
        let opt = OptimizerConfig::default();
        let key = &keys.keys()[0];
        let a = train(key, &src, Lambdas::SURROGATE, &opt, 2).unwrap();
        let suite = AttackSuite::of_kind(AttackKind::Identity);
        let b = train_robust(key, &src, &suite, Lambdas::SURROGATE, &opt, 2).unwrap();
        assert_eq!(a.w, b.w);
        assert_eq!(b.robust, Some(suite));
    }

    #[test]
    fn minibatch_training_runs() {
        let (ds, keys) = fixture();
        let opt = OptimizerConfig {
            batch_size: Some(8),
            max_iters: 300,
            ..OptimizerConfig::default()
        };
        let m = train(&keys.keys()[0], &SampleSource::new(&ds), Lambdas::SURROGATE, &opt, 4)
            .unwrap();
        assert!(!m.training_log.is_empty());
    }

    #[test]
    fn model_json_round_trip() {
        let (ds, keys) = fixture();
        let m = train(
            &keys.keys()[0],
            &SampleSource::new(&ds),
            Lambdas::SURROGATE,
            &OptimizerConfig::default(),
            3,
        )
        .unwrap();
        let json = m.to_json(Some("log.csv")).unwrap();
        assert!(json.contains("\"training_log\": \"log.csv\""));
        let back = WatermarkModel::from_json(&json).unwrap();
        assert_eq!(back.w, m.w);
        assert_eq!(back.lambdas, m.lambdas);
        assert!(m.log_csv().starts_with("iter,L_h,L_d,L_A,total\n"));
        let bad = json.replace("\"version\": 1", "\"version\": 7");
        assert!(WatermarkModel::from_json(&bad).is_err());
    }
}
