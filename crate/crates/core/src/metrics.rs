//! Distinguishability, attributability, Fréchet spectrogram distance (FSD)
//! and the collusion check.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::attacks::AttackSpec;
use crate::audio::{AudioClip, Dataset};
use crate::error::{ensure_dims, Error, Result};
use crate::keygen::{Key, KeySet};
use crate::mel::{MelExtractor, MelParams};
use crate::rng::substream;
use crate::watermark::{quality_loss, SampleSource, WatermarkModel};

/// Covariance ridge used when there are too few clips for a full-rank fit.
pub const COV_RIDGE: f64 = 1e-6;

fn scores(key: &Key, clips: &[AudioClip]) -> Result<Vec<f64>> {
    clips
        .iter()
        .map(|c| {
            ensure_dims("score", key.d_x(), c.len())?;
            Ok(key.score_samples(c.samples()))
        })
        .collect()
}

/// Balanced accuracy of `key` separating `generated` (positive) from
/// `authentic` (negative). A score of exactly zero is an error on both sides.
pub fn distinguishability(
    key: &Key,
    generated: &[AudioClip],
    authentic: &[AudioClip],
) -> Result<f64> {
    if generated.is_empty() || authentic.is_empty() {
        return Err(Error::Contract(
            "distinguishability needs non-empty generated and authentic sets".into(),
        ));
    }
    let pos = scores(key, generated)?.iter().filter(|s| **s > 0.0).count();
    let neg = scores(key, authentic)?.iter().filter(|s| **s < 0.0).count();
    Ok(0.5 * (pos as f64 / generated.len() as f64 + neg as f64 / authentic.len() as f64))
}

/// Fraction of authentic clips that `key` scores strictly negative.
pub fn compliance(key: &Key, authentic: &[AudioClip]) -> Result<f64> {
    if authentic.is_empty() {
        return Err(Error::Contract("compliance of an empty set".into()));
    }
    let neg = scores(key, authentic)?.iter().filter(|s| **s < 0.0).count();
    Ok(neg as f64 / authentic.len() as f64)
}

/// True when exactly key `owner` (an index into `keys`) fires on `x`.
pub fn attributed_to(keys: &[Key], owner: usize, x: &[f64]) -> bool {
    keys.iter().enumerate().all(|(j, k)| {
        let s = k.score_samples(x);
        if j == owner {
            s > 0.0
        } else {
            s < 0.0
        }
    })
}

/// Mean over models of the fraction of that model's samples on which exactly
/// the owning key fires. `per_model[i]` holds samples of the model for
/// `keys.keys()[i]`.
pub fn attributability(keys: &KeySet, per_model: &[Vec<AudioClip>]) -> Result<f64> {
    if per_model.len() != keys.len() || keys.is_empty() {
        return Err(Error::Contract(format!(
            "attributability: {} sample sets for {} keys",
            per_model.len(),
            keys.len()
        )));
    }
    let mut total = 0.0;
    for (i, clips) in per_model.iter().enumerate() {
        if clips.is_empty() {
            return Err(Error::Contract(format!("no samples for model {i}")));
        }
        let mut hits = 0usize;
        for c in clips {
            ensure_dims("attributability", keys.d_x(), c.len())?;
            if attributed_to(keys.keys(), i, c.samples()) {
                hits += 1;
            }
        }
        total += hits as f64 / clips.len() as f64;
    }
    Ok(total / keys.len() as f64)
}

// FSD ----------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::Contract(format!(
                "covariance is {}x{}, mean has {d} entries",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sample mean and (n-1)-normalized covariance of the rows of
    /// `features`. With fewer than `dim + 1` rows the covariance gets a
    /// `COV_RIDGE` ridge.
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n == 0 {
            return Err(Error::Contract("cannot fit Gaussian to zero features".into()));
        }
        let d = features[0].len();
        let mut mean = DVector::zeros(d);
        for f in features {
            ensure_dims("GaussianStats::fit", d, f.len())?;
            mean += DVector::from_column_slice(f);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for f in features {
            let c = DVector::from_column_slice(f) - &mean;
            cov += &c * c.transpose();
        }
        if n > 1 {
            cov /= (n - 1) as f64;
        }
        cov = (&cov + cov.transpose()) * 0.5;
        if n < d + 1 {
            for i in 0..d {
                cov[(i, i)] += COV_RIDGE;
            }
        }
        Self::new(mean, cov)
    }

    fn is_finite(&self) -> bool {
        self.mean.iter().chain(self.covariance.iter()).all(|v| v.is_finite())
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
///
/// The trace of the square root is taken from the eigenvalues of the
/// symmetric matrix `S_a^{1/2} S_b S_a^{1/2}`, which shares its spectrum with
/// `S_a S_b`; negative eigenvalues are clipped at zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    ensure_dims("frechet_distance", a.dim(), b.dim())?;
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::Numeric("non-finite Gaussian statistics".into()));
    }
    let diff = &a.mean - &b.mean;
    let ra = psd_sqrt(&a.covariance);
    let inner = &ra * &b.covariance * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let d = diff.norm_squared() + a.covariance.trace() + b.covariance.trace() - 2.0 * tr_sqrt;
    if !d.is_finite() {
        return Err(Error::Numeric("Fréchet distance is not finite".into()));
    }
    Ok(d.max(0.0))
}

/// Time-mean log-mel feature of each clip.
pub fn clip_feature_vectors(clips: &[AudioClip]) -> Result<Vec<Vec<f64>>> {
    let Some(first) = clips.first() else {
        return Err(Error::Contract("no clips".into()));
    };
    let ex = MelExtractor::new(MelParams::new(first.sample_rate()));
    clips
        .iter()
        .map(|c| {
            if c.sample_rate() != first.sample_rate() {
                return Err(Error::Contract("mixed sample rates".into()));
            }
            Ok(ex.compute(c)?.time_mean())
        })
        .collect()
}

pub fn clip_features(clips: &[AudioClip]) -> Result<GaussianStats> {
    GaussianStats::fit(&clip_feature_vectors(clips)?)
}

/// FSD between two clip sets.
pub fn fsd(a: &[AudioClip], b: &[AudioClip]) -> Result<f64> {
    frechet_distance(&clip_features(a)?, &clip_features(b)?)
}

// Collusion ----------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollusionRow {
    pub lambda: f64,
    /// `(key_id, score)` for every key other than the two colluding ones.
    pub third_party_scores: Vec<(u32, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollusionReport {
    pub key_i: u32,
    pub key_j: u32,
    /// Both inputs were attributed to their own keys and every third-party
    /// key scored them negative.
    pub premise_met: bool,
    pub rows: Vec<CollusionRow>,
    pub violations: usize,
}

/// Scores every third-party key on `lambda x1 + (1 - lambda) x2` for each
/// `lambda` in `grid`.
pub fn collusion_check(
    keys: &KeySet,
    key_i: u32,
    key_j: u32,
    x1: &AudioClip,
    x2: &AudioClip,
    grid: &[f64],
) -> Result<CollusionReport> {
    ensure_dims("collusion_check", keys.d_x(), x1.len())?;
    ensure_dims("collusion_check", keys.d_x(), x2.len())?;
    let ki = keys
        .get(key_i)
        .ok_or_else(|| Error::Contract(format!("unknown key {key_i}")))?;
    let kj = keys
        .get(key_j)
        .ok_or_else(|| Error::Contract(format!("unknown key {key_j}")))?;
    let others: Vec<&Key> = keys
        .keys()
        .iter()
        .filter(|k| k.id != key_i && k.id != key_j)
        .collect();
    let premise_met = ki.score_samples(x1.samples()) > 0.0
        && kj.score_samples(x2.samples()) > 0.0
        && others.iter().all(|k| {
            k.score_samples(x1.samples()) < 0.0 && k.score_samples(x2.samples()) < 0.0
        });
    let mut rows = Vec::with_capacity(grid.len());
    let mut violations = 0;
    for &lambda in grid {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Contract(format!("interpolation weight {lambda} outside [0, 1]")));
        }
        let mix: Vec<f64> = x1
            .samples()
            .iter()
            .zip(x2.samples())
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect();
        let third_party_scores: Vec<(u32, f64)> =
            others.iter().map(|k| (k.id, k.score_samples(&mix))).collect();
        violations += third_party_scores.iter().filter(|(_, s)| *s > 0.0).count();
        rows.push(CollusionRow {
            lambda,
            third_party_scores,
        });
    }
    Ok(CollusionReport {
        key_i,
        key_j,
        premise_met,
        rows,
        violations,
    })
}

// Reports ------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackScore {
    pub attack: String,
    pub distinguishability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub key_id: u32,
    pub distinguishability: f64,
    pub compliance: f64,
    pub quality_loss: f64,
    pub post_attack: Vec<AttackScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub attack: String,
    pub mean_distinguishability: f64,
    pub attributability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub per_model: Vec<ModelEval>,
    pub mean_distinguishability: f64,
    pub attributability: f64,
    /// FSD between all generated samples and the authentic dataset.
    pub fsd: f64,
    pub post_attack: Vec<AttackSummary>,
    pub n_samples: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn csv_header() -> &'static str {
        "label,condition,key_id,distinguishability,attributability,fsd"
    }

    /// One row per model and condition plus an `all` row per condition.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for m in &self.per_model {
            let _ = writeln!(
                s,
                "{},clean,{},{},,",
                self.label, m.key_id, m.distinguishability
            );
            for a in &m.post_attack {
                let _ = writeln!(
                    s,
                    "{},{},{},{},,",
                    self.label, a.attack, m.key_id, a.distinguishability
                );
            }
        }
        let _ = writeln!(
            s,
            "{},clean,all,{},{},{}",
            self.label, self.mean_distinguishability, self.attributability, self.fsd
        );
        for a in &self.post_attack {
            let _ = writeln!(
                s,
                "{},{},all,{},{},",
                self.label, a.attack, a.mean_distinguishability, a.attributability
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}", Self::csv_header(), self.csv_rows())
    }
}

/// Post-processing applied to generated samples before re-scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedAttack {
    pub name: String,
    pub spec: AttackSpec,
}

/// Draws `n_samples` base clips per model, applies the model and scores
/// every key. Authentic statistics use the whole dataset. Attacks are
/// applied to generated samples only.
pub fn evaluate(
    label: &str,
    keys: &KeySet,
    models: &[WatermarkModel],
    dataset: &Dataset,
    attacks: &[NamedAttack],
    n_samples: usize,
    seed: u64,
) -> Result<EvalReport> {
    if models.is_empty() {
        return Err(Error::Contract("no models to evaluate".into()));
    }
    if n_samples == 0 {
        return Err(Error::Contract("n_samples must be positive".into()));
    }
    let source = SampleSource::new(dataset);
    let authentic = dataset.clips();
    let mut generated = Vec::with_capacity(models.len());
    let mut base = Vec::with_capacity(models.len());
    for m in models {
        if keys.get(m.key_id).is_none() {
            return Err(Error::Contract(format!("model for unknown key {}", m.key_id)));
        }
        let pre: Vec<AudioClip> = source
            .draw(substream(seed, m.key_id as u64), n_samples)
            .into_iter()
            .cloned()
            .collect();
        generated.push(m.apply_all(&pre)?);
        base.push(pre);
    }
    let mut per_model = Vec::with_capacity(models.len());
    for (idx, m) in models.iter().enumerate() {
        let key = keys.get(m.key_id).expect("checked above");
        per_model.push(ModelEval {
            key_id: m.key_id,
            distinguishability: distinguishability(key, &generated[idx], authentic)?,
            compliance: compliance(key, authentic)?,
            quality_loss: quality_loss(&base[idx], &generated[idx])?,
            post_attack: Vec::new(),
        });
    }
    let attributability = attribution_rate(keys, models, &generated)?;
    let all_generated: Vec<AudioClip> = generated.iter().flatten().cloned().collect();
    let fsd = fsd(&all_generated, authentic)?;

    let mut post_attack = Vec::with_capacity(attacks.len());
    for (a_idx, a) in attacks.iter().enumerate() {
        let a_seed = substream(seed, 0xA77A_0000 + a_idx as u64);
        let mut attacked = Vec::with_capacity(models.len());
        for (idx, gen) in generated.iter().enumerate() {
            let m_seed = substream(a_seed, models[idx].key_id as u64);
            let clips = gen
                .iter()
                .enumerate()
                .map(|(r, c)| a.spec.attack(c, substream(m_seed, r as u64)))
                .collect::<Result<Vec<_>>>()?;
            attacked.push(clips);
        }
        let mut dsum = 0.0;
        for (idx, m) in models.iter().enumerate() {
            let key = keys.get(m.key_id).expect("checked above");
            let d = distinguishability(key, &attacked[idx], authentic)?;
            dsum += d;
            per_model[idx].post_attack.push(AttackScore {
                attack: a.name.clone(),
                distinguishability: d,
            });
        }
        post_attack.push(AttackSummary {
            attack: a.name.clone(),
            mean_distinguishability: dsum / models.len() as f64,
            attributability: attribution_rate(keys, models, &attacked)?,
        });
    }

    let mean_distinguishability =
        per_model.iter().map(|m| m.distinguishability).sum::<f64>() / per_model.len() as f64;
    Ok(EvalReport {
        label: label.to_string(),
        per_model,
        mean_distinguishability,
        attributability,
        fsd,
        post_attack,
        n_samples,
        seed,
    })
}

/// Mean over `models` of the exactly-one-fires rate, judged against every
/// key in `keys` rather than only the evaluated subset.
fn attribution_rate(
    keys: &KeySet,
    models: &[WatermarkModel],
    samples: &[Vec<AudioClip>],
) -> Result<f64> {
    let mut total = 0.0;
    for (m, clips) in models.iter().zip(samples) {
        let owner = keys
            .keys()
            .iter()
            .position(|k| k.id == m.key_id)
            .ok_or_else(|| Error::Contract(format!("unknown key {}", m.key_id)))?;
        let hits = clips
            .iter()
            .filter(|c| attributed_to(keys.keys(), owner, c.samples()))
            .count();
        total += hits as f64 / clips.len() as f64;
    }
    Ok(total / models.len() as f64)
}
