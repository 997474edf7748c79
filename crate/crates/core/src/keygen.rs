//! Key generation and the sufficient-condition checker for attribution.
//!
//! A key is a unit direction plus a free bias; its classifier fires on
//! `direction · x + bias > 0`. Keys are fitted so that authentic data scores
//! at most `-1` (data compliance) while staying mutually orthogonal.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, Dataset};
use crate::error::{ensure_dims, Error, Result};
use crate::optim::{Adam, EarlyStop, OptimizerConfig};
use crate::rng::{substream, substream_rng};

pub const KEYS_FORMAT_VERSION: u32 = 1;
const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Key {
    pub id: u32,
    pub bias: f64,
    pub direction: Vec<f64>,
}

impl Key {
    /// Validates that `direction` has unit norm and `bias` is finite.
    pub fn new(id: u32, direction: Vec<f64>, bias: f64) -> Result<Self> {
        let key = Self {
            id,
            bias,
            direction,
        };
        key.validate()?;
        Ok(key)
    }

    /// Normalizes `direction` before building the key.
    pub fn normalized(id: u32, mut direction: Vec<f64>, bias: f64) -> Result<Self> {
        let n = norm(&direction);
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::Numeric("key direction has zero or non-finite norm".into()));
        }
        direction.iter_mut().for_each(|v| *v /= n);
        Self::new(id, direction, bias)
    }

    pub fn validate(&self) -> Result<()> {
        if self.direction.is_empty() {
            return Err(Error::Contract(format!("key {} has empty direction", self.id)));
        }
        let n = norm(&self.direction);
        if !((n - 1.0).abs() <= UNIT_NORM_TOL) {
            return Err(Error::Contract(format!(
                "key {} direction norm {n} is not 1",
                self.id
            )));
        }
        if !self.bias.is_finite() {
            return Err(Error::Contract(format!("key {} bias is not finite", self.id)));
        }
        Ok(())
    }

    pub fn d_x(&self) -> usize {
        self.direction.len()
    }

    /// Raw margin `direction · x + bias`; no dimension check.
    #[inline]
    pub fn score_samples(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.direction.len());
        dot(&self.direction, x) + self.bias
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Raw classifier margin of `key` on `clip`; its sign is the binary decision.
pub fn classifier_score(key: &Key, clip: &AudioClip) -> Result<f64> {
    ensure_dims("classifier_score", key.d_x(), clip.len())?;
    Ok(key.score_samples(clip.samples()))
}

/// Ordered keys bound to the dataset they were fitted on.
#[derive(Debug, Clone, PartialEq)]
pub struct KeySet {
    keys: Vec<Key>,
    d_x: usize,
    sample_rate: u32,
    dataset_hash: String,
    gram_max: Option<f64>,
}

impl KeySet {
    pub fn empty(d_x: usize, sample_rate: u32, dataset_hash: impl Into<String>) -> Self {
        Self {
            keys: Vec::new(),
            d_x,
            sample_rate,
            dataset_hash: dataset_hash.into(),
            gram_max: None,
        }
    }

    pub fn for_dataset(dataset: &Dataset) -> Self {
        Self::empty(dataset.d_x(), dataset.sample_rate(), dataset.content_hash())
    }

    /// Appends `key`, which must carry the next consecutive id.
    pub fn push(&mut self, key: Key) -> Result<()> {
        key.validate()?;
        ensure_dims("KeySet::push", self.d_x, key.d_x())?;
        let expected = self.keys.len() as u32 + 1;
        if key.id != expected {
            return Err(Error::Contract(format!(
                "key id {} breaks the consecutive sequence (expected {expected})",
                key.id
            )));
        }
        for k in &self.keys {
            let ip = dot(&k.direction, &key.direction);
            self.gram_max = Some(self.gram_max.map_or(ip, |g| g.max(ip)));
        }
        self.keys.push(key);
        Ok(())
    }

    pub fn keys(&self) -> &[Key] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn dataset_hash(&self) -> &str {
        &self.dataset_hash
    }

    /// Largest signed inner product between distinct directions (`None` for
    /// fewer than two keys).
    pub fn gram_max(&self) -> Option<f64> {
        self.gram_max
    }

    /// Largest absolute inner product between distinct directions.
    pub fn gram_max_abs(&self) -> Option<f64> {
        let mut out: Option<f64> = None;
        for (i, a) in self.keys.iter().enumerate() {
            for b in &self.keys[i + 1..] {
                let ip = dot(&a.direction, &b.direction).abs();
                out = Some(out.map_or(ip, |g| g.max(ip)));
            }
        }
        out
    }

    pub fn get(&self, id: u32) -> Option<&Key> {
        self.keys.iter().find(|k| k.id == id)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = KeySetFile {
            version: KEYS_FORMAT_VERSION,
            d_x: self.d_x,
            sample_rate: self.sample_rate,
            dataset_hash: self.dataset_hash.clone(),
            gram_max: self.gram_max,
            keys: self.keys.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: KeySetFile = serde_json::from_str(s)?;
        if file.version != KEYS_FORMAT_VERSION {
            return Err(Error::Contract(format!(
                "unsupported key file version {}",
                file.version
            )));
        }
        let mut set = KeySet::empty(file.d_x, file.sample_rate, file.dataset_hash);
        for k in file.keys {
            set.push(k)?;
        }
        match (set.gram_max, file.gram_max) {
            (None, None) => {}
            (Some(a), Some(b)) if (a - b).abs() <= 1e-9 => {}
            (a, b) => {
                return Err(Error::Contract(format!(
                    "stored gram_max {b:?} disagrees with recomputed {a:?}"
                )))
            }
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// On-disk layout of a key set. `serde_json` writes the shortest decimal
/// that parses back to the same `f64`, so round-trips are exact.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeySetFile {
    version: u32,
    d_x: usize,
    sample_rate: u32,
    dataset_hash: String,
    #[serde(default)]
    gram_max: Option<f64>,
    keys: Vec<Key>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeygenConfig {
    pub optimizer: OptimizerConfig,
    /// Learn the bias term. Without it no key can be compliant on data
    /// that is symmetric about the origin.
    pub use_bias: bool,
    pub orthogonality_weight: f64,
    /// Initialize in, and restrict updates to, the orthogonal complement of
    /// the existing directions.
    pub project_orthogonal: bool,
    pub compliance_threshold: f64,
}

impl Default for KeygenConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            use_bias: true,
            orthogonality_weight: 1.0,
            project_orthogonal: true,
            compliance_threshold: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedKey {
    pub key: Key,
    /// Fraction of the dataset with a strictly negative score.
    pub compliance_rate: f64,
    pub iterations: usize,
    pub final_loss: f64,
    pub warning: Option<String>,
}

/// Row-major copy of the dataset samples.
pub(crate) fn flatten(dataset: &Dataset) -> Vec<f64> {
    let mut out = Vec::with_capacity(dataset.len() * dataset.d_x());
    for c in dataset.clips() {
        out.extend_from_slice(c.samples());
    }
    out
}

/// Orthonormal basis of the span of `dirs` (modified Gram-Schmidt).
fn orthonormal_basis(dirs: &[&[f64]]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dirs.len());
    for d in dirs {
        let mut v = d.to_vec();
        project_out(&mut v, &basis);
        let n = norm(&v);
        if n > 1e-12 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for q in basis {
        let c = dot(q, v);
        v.iter_mut().zip(q).for_each(|(x, qi)| *x -= c * qi);
    }
}

/// Fits one new key against `dataset`, penalizing positive inner products
/// with every key in `existing`.
pub fn generate_key(
    dataset: &Dataset,
    existing: &KeySet,
    cfg: &KeygenConfig,
    seed: u64,
) -> Result<GeneratedKey> {
    ensure_dims("generate_key", existing.d_x(), dataset.d_x())?;
    let d = dataset.d_x();
    let n = dataset.len();
    let x = flatten(dataset);
    let id = existing.len() as u32 + 1;

    let prior: Vec<&[f64]> = existing.keys().iter().map(|k| k.direction.as_slice()).collect();
    let basis = if cfg.project_orthogonal {
        orthonormal_basis(&prior)
    } else {
        Vec::new()
    };

    let mut init_rng = substream_rng(seed, 0);
    let mut u: Vec<f64> = (0..d).map(|_| init_rng.sample(StandardNormal)).collect();
    project_out(&mut u, &basis);
    normalize(&mut u)?;
    let mut b = 0.0;

    let batch = cfg.optimizer.effective_batch(n);
    let mut batch_rng = substream_rng(seed, 1);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut adam = Adam::new(cfg.optimizer, d + 1);
    let mut stop = EarlyStop::new(&cfg.optimizer);
    let mut grad = vec![0.0; d + 1];
    let mut iterations = 0;
    let mut last_loss = f64::NAN;

    for it in 0..cfg.optimizer.max_iters {
        iterations = it + 1;
        if batch < n {
            for slot in idx.iter_mut().take(batch) {
                *slot = batch_rng.random_range(0..n);
            }
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut hinge = 0.0;
        for &i in &idx[..batch] {
            let row = &x[i * d..(i + 1) * d];
            let margin = 1.0 + dot(&u, row) + b;
            if margin > 0.0 {
                hinge += margin;
                grad[..d].iter_mut().zip(row).for_each(|(g, r)| *g += r);
                grad[d] += 1.0;
            }
        }
        let inv = 1.0 / batch as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        let mut loss = hinge * inv;
        // The penalty is omitted for the first key, where `prior` is empty.
        for p in &prior {
            let ip = dot(p, &u);
            if ip > 0.0 {
                loss += cfg.orthogonality_weight * ip;
                grad[..d]
                    .iter_mut()
                    .zip(p.iter())
                    .for_each(|(g, v)| *g += cfg.orthogonality_weight * v);
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "key {id}: loss became {loss} at iteration {it}"
            )));
        }
        last_loss = loss;
        if stop.record(loss) {
            break;
        }
        if !cfg.use_bias {
            grad[d] = 0.0;
        }
        let mut step = adam.step(&grad);
        let step_b = step.pop().unwrap_or(0.0);
        project_out(&mut step, &basis);
        u.iter_mut().zip(&step).for_each(|(p, s)| *p -= s);
        if cfg.use_bias {
            b -= step_b;
        }
        normalize(&mut u)?;
    }

    // Re-project once more so accumulated rounding does not leak into the span.
    project_out(&mut u, &basis);
    normalize(&mut u)?;
    let key = Key::new(id, u, b)?;
    let negatives = (0..n)
        .filter(|&i| key.score_samples(&x[i * d..(i + 1) * d]) < 0.0)
        .count();
    let compliance_rate = negatives as f64 / n as f64;
    let warning = (compliance_rate < cfg.compliance_threshold).then(|| {
        format!(
            "key {id} reached compliance {compliance_rate:.4} < {} after {iterations} iterations",
            cfg.compliance_threshold
        )
    });
    Ok(GeneratedKey {
        key,
        compliance_rate,
        iterations,
        final_loss: last_loss,
        warning,
    })
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let n = norm(v);
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::Numeric("direction collapsed to zero norm".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

/// Generates `n_keys` keys in sequence; key `i` uses substream `i` of `seed`.
pub fn generate_keys(
    dataset: &Dataset,
    n_keys: usize,
    cfg: &KeygenConfig,
    seed: u64,
) -> Result<(KeySet, Vec<GeneratedKey>)> {
    let mut set = KeySet::for_dataset(dataset);
    let mut meta = Vec::with_capacity(n_keys);
    for i in 0..n_keys {
        let g = generate_key(dataset, &set, cfg, substream(seed, i as u64))?;
        set.push(g.key.clone())?;
        meta.push(g);
    }
    Ok((set, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyCondition {
    pub key_id: u32,
    pub d_min: f64,
    pub d_max: f64,
    pub compliance_rate: f64,
}

impl KeyCondition {
    pub fn ratio(&self) -> f64 {
        if self.d_max > 0.0 {
            self.d_min / self.d_max
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCondition {
    pub i: u32,
    pub j: u32,
    pub inner_product: f64,
    /// `min{d_min/d_max}` over the two keys.
    pub threshold: f64,
    pub ok: bool,
    /// The relaxed condition `inner_product <= 0`.
    pub relaxed_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub per_key: Vec<KeyCondition>,
    /// One entry per unordered pair `i < j`.
    pub pairwise: Vec<PairCondition>,
    pub delta: f64,
    /// Lower bound `max{0, 1 - N delta}` on attributability.
    pub bound: f64,
}

impl ConditionReport {
    pub fn all_pairs_ok(&self) -> bool {
        self.pairwise.iter().all(|p| p.ok)
    }

    pub fn pairwise_ok(&self, i: u32, j: u32) -> Option<bool> {
        if i == j {
            return Some(true);
        }
        let (a, b) = (i.min(j), i.max(j));
        self.pairwise.iter().find(|p| p.i == a && p.j == b).map(|p| p.ok)
    }

    pub fn min_compliance(&self) -> f64 {
        self.per_key
            .iter()
            .map(|k| k.compliance_rate)
            .fold(1.0, f64::min)
    }
}

pub fn attributability_bound(n_keys: usize, delta: f64) -> f64 {
    (1.0 - n_keys as f64 * delta).clamp(0.0, 1.0)
}

/// Evaluates the pairwise angle condition and the attributability bound.
///
/// Fails with a stale-keys error when `keys` were generated on a different
/// dataset, unless `allow_hash_mismatch` is set.
pub fn check_conditions(
    keys: &KeySet,
    dataset: &Dataset,
    measured_delta: f64,
    allow_hash_mismatch: bool,
) -> Result<ConditionReport> {
    if !allow_hash_mismatch && keys.dataset_hash() != dataset.content_hash() {
        return Err(Error::StaleKeys {
            expected: keys.dataset_hash().to_string(),
            actual: dataset.content_hash().to_string(),
        });
    }
    ensure_dims("check_conditions", keys.d_x(), dataset.d_x())?;
    if !(0.0..=1.0).contains(&measured_delta) {
        return Err(Error::Contract(format!(
            "delta {measured_delta} outside [0, 1]"
        )));
    }
    let per_key: Vec<KeyCondition> = keys
        .keys()
        .iter()
        .map(|k| {
            let mut d_min = f64::INFINITY;
            let mut d_max = 0.0f64;
            let mut neg = 0usize;
            for c in dataset.clips() {
                let s = k.score_samples(c.samples());
                d_min = d_min.min(s.abs());
                d_max = d_max.max(s.abs());
                if s < 0.0 {
                    neg += 1;
                }
            }
            KeyCondition {
                key_id: k.id,
                d_min,
                d_max,
                compliance_rate: neg as f64 / dataset.len() as f64,
            }
        })
        .collect();
    let mut pairwise = Vec::new();
    for (a, ka) in keys.keys().iter().enumerate() {
        for (b, kb) in keys.keys().iter().enumerate().skip(a + 1) {
            let ip = dot(&ka.direction, &kb.direction);
            let threshold = per_key[a].ratio().min(per_key[b].ratio());
            pairwise.push(PairCondition {
                i: ka.id,
                j: kb.id,
                inner_product: ip,
                threshold,
                ok: ip <= threshold,
                relaxed_ok: ip <= 0.0,
            });
        }
    }
    Ok(ConditionReport {
        per_key,
        pairwise,
        delta: measured_delta,
        bound: attributability_bound(keys.len(), measured_delta),
    })
}
