//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wavekey_core::attacks::{AttackKind, AttackSuite};
use wavekey_core::audio::{ingest_dir, read_wav, synth_dataset, write_wav};
use wavekey_core::keygen::{check_conditions, generate_keys};
use wavekey_core::metrics::{evaluate, EvalReport, NamedAttack};
use wavekey_core::registry::{register as register_key, RegistryStore, Verdict};
use wavekey_core::rng::substream;
use wavekey_core::watermark::{train as train_model, train_robust, SampleSource};
use wavekey_core::{Dataset, Error, KeySet, Lambdas, WatermarkModel};

use crate::config::{DatasetSpec, ExperimentConfig};
use crate::{CliError, Common, EvalMode};

const LOCK_NAME: &str = ".wavekey.lock";

/// Exclusive ownership of an output directory for one process.
struct OutLock {
    path: PathBuf,
}

impl OutLock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let path = dir.join(LOCK_NAME);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(CliError::usage(format!(
                "output directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::Io { path, source: e }.into()),
        }
    }
}

impl Drop for OutLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, contents).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(Error::from)?;
    s.push('\n');
    write(path, s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let s = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&s)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// Config with command-line overrides applied, plus the output directory.
fn resolve(common: &Common) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(n) = common.n_keys {
        cfg.n_keys = n;
    }
    if let Some(l) = common.lambdas {
        cfg.lambdas = l;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = Some(o.clone());
    }
    cfg.validate()?;
    let out = cfg
        .out_dir
        .clone()
        .ok_or_else(|| CliError::usage("no output directory: pass --out or set out_dir"))?;
    Ok((cfg, out))
}

fn load_keys(path: &Path, dataset: &Dataset) -> Result<KeySet, CliError> {
    let keys = KeySet::load(path)?;
    if keys.dataset_hash() != dataset.content_hash() {
        return Err(Error::StaleKeys {
            expected: keys.dataset_hash().to_string(),
            actual: dataset.content_hash().to_string(),
        }
        .into());
    }
    Ok(keys)
}

fn model_stem(key_id: u32) -> String {
    format!("model_{key_id:03}")
}

fn parse_kind(s: &str) -> Result<AttackKind, CliError> {
    AttackKind::parse(s).ok_or_else(|| {
        CliError::usage(format!(
            "unknown attack `{s}` (expected identity, noise, gain, speed, pass-filter or combination)"
        ))
    })
}

fn load_suite(path: &Path) -> Result<AttackSuite, CliError> {
    let s = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    AttackSuite::from_json(&s).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    version: u32,
    source: String,
    n_clips: usize,
    d_x: usize,
    sample_rate: u32,
    content_hash: String,
}

impl DatasetManifest {
    fn of(ds: &Dataset, source: &str) -> Self {
        Self {
            version: 1,
            source: source.to_string(),
            n_clips: ds.len(),
            d_x: ds.d_x(),
            sample_rate: ds.sample_rate(),
            content_hash: ds.content_hash().to_string(),
        }
    }
}

pub fn synth_data(
    common: &Common,
    n_clips: Option<usize>,
    d_x: Option<usize>,
    sample_rate: Option<u32>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let (cfg, out) = resolve(common)?;
    let (mut n, mut d, mut sr, mut s) = match cfg.dataset {
        DatasetSpec::Synthetic {
            n_clips,
            d_x,
            sample_rate,
            seed,
        } => (n_clips, d_x, sample_rate, seed),
        DatasetSpec::WavDir { .. } => match DatasetSpec::default() {
            DatasetSpec::Synthetic {
                n_clips,
                d_x,
                sample_rate,
                seed,
            } => (n_clips, d_x, sample_rate, seed),
            DatasetSpec::WavDir { .. } => unreachable!(),
        },
    };
    n = n_clips.unwrap_or(n);
    d = d_x.unwrap_or(d);
    sr = sample_rate.unwrap_or(sr);
    s = seed.unwrap_or(s);
    let _lock = OutLock::acquire(&out)?;
    let ds = synth_dataset(n, d, sr, s)?;
    let wav_dir = out.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::Io {
        path: wav_dir.clone(),
        source: e,
    })?;
    for (i, clip) in ds.clips().iter().enumerate() {
        write_wav(clip, wav_dir.join(format!("clip_{i:05}.wav")))?;
    }
    // The manifest describes the quantized files, as `ingest` will see them.
    let written = ingest_dir(&wav_dir, Some(sr))?;
    write_json(&out.join("dataset.json"), &DatasetManifest::of(&written, "synthetic"))?;
    println!(
        "wrote {n} clips ({d} samples at {sr} Hz) to {}",
        wav_dir.display()
    );
    Ok(())
}

pub fn ingest(common: &Common, wav_dir: &Path, sample_rate: Option<u32>) -> Result<(), CliError> {
    let (_, out) = resolve(common)?;
    let _lock = OutLock::acquire(&out)?;
    let ds = ingest_dir(wav_dir, sample_rate)?;
    write_json(&out.join("dataset.json"), &DatasetManifest::of(&ds, "wav-dir"))?;
    println!(
        "ingested {} clips ({} samples at {} Hz), hash {}",
        ds.len(),
        ds.d_x(),
        ds.sample_rate(),
        ds.content_hash()
    );
    Ok(())
}

#[derive(Serialize)]
struct KeygenSummary<'a> {
    seed: u64,
    gram_max: Option<f64>,
    keys: Vec<KeyMeta<'a>>,
}

#[derive(Serialize)]
struct KeyMeta<'a> {
    key_id: u32,
    compliance_rate: f64,
    iterations: usize,
    final_loss: f64,
    warning: Option<&'a str>,
}

pub fn keygen(common: &Common, seed: u64) -> Result<(), CliError> {
    let (cfg, out) = resolve(common)?;
    let _lock = OutLock::acquire(&out)?;
    let ds = cfg.dataset.load()?;
    let (keys, meta) = generate_keys(&ds, cfg.n_keys, &cfg.keygen, seed)?;
    for m in &meta {
        if let Some(w) = &m.warning {
            eprintln!("warning: {w}");
        }
    }
    keys.save(out.join("keys.json"))?;
    let report = check_conditions(&keys, &ds, 0.0, false)?;
    write_json(&out.join("conditions.json"), &report)?;
    let summary = KeygenSummary {
        seed,
        gram_max: keys.gram_max(),
        keys: meta
            .iter()
            .map(|m| KeyMeta {
                key_id: m.key.id,
                compliance_rate: m.compliance_rate,
                iterations: m.iterations,
                final_loss: m.final_loss,
                warning: m.warning.as_deref(),
            })
            .collect(),
    };
    write_json(&out.join("keygen.json"), &summary)?;
    println!(
        "generated {} keys; max |inner product| {:.3e}; min compliance {:.4}",
        keys.len(),
        keys.gram_max_abs().unwrap_or(0.0),
        report.min_compliance()
    );
    Ok(())
}

fn train_all(
    keys: &KeySet,
    ds: &Dataset,
    suite: Option<&AttackSuite>,
    lambdas: Lambdas,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<WatermarkModel>, CliError> {
    let src = SampleSource::new(ds);
    keys.keys()
        .iter()
        .map(|k| {
            let s = substream(seed, k.id as u64);
            let m = match suite {
                Some(suite) => train_robust(k, &src, suite, lambdas, &cfg.optimizer, s)?,
                None => train_model(k, &src, lambdas, &cfg.optimizer, s)?,
            };
            Ok(m)
        })
        .collect()
}

pub fn train(
    common: &Common,
    seed: u64,
    keys: Option<PathBuf>,
    robust: Option<String>,
    robust_suite: Option<PathBuf>,
) -> Result<(), CliError> {
    let (cfg, out) = resolve(common)?;
    let suite = match (robust, robust_suite) {
        (Some(kind), _) => Some(AttackSuite::of_kind(parse_kind(&kind)?)),
        (None, Some(p)) => Some(load_suite(&p)?),
        (None, None) => cfg.robust.clone(),
    };
    let _lock = OutLock::acquire(&out)?;
    let ds = cfg.dataset.load()?;
    if let Some(s) = &suite {
        s.validate(ds.sample_rate())
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    let keys = load_keys(&keys.unwrap_or_else(|| out.join("keys.json")), &ds)?;
    let models = train_all(&keys, &ds, suite.as_ref(), cfg.lambdas, &cfg, seed)?;
    let dir = out.join("models");
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    for m in &models {
        let stem = model_stem(m.key_id);
        m.save(
            dir.join(format!("{stem}.json")),
            Some(&dir.join(format!("{stem}.csv"))),
        )?;
        let log = &m.training_log;
        println!(
            "key {:>3}: {} iterations, loss {:.6} -> {:.6}",
            m.key_id,
            log.len(),
            log.first().map_or(f64::NAN, |r| r.total),
            log.last().map_or(f64::NAN, |r| r.total)
        );
    }
    Ok(())
}

pub fn attack(
    input: &Path,
    output: &Path,
    kind: Option<String>,
    suite: Option<PathBuf>,
    seed: u64,
) -> Result<(), CliError> {
    let suite = match (kind, suite) {
        (Some(k), _) => AttackSuite::of_kind(parse_kind(&k)?),
        (None, Some(p)) => load_suite(&p)?,
        (None, None) => return Err(CliError::usage("pass --kind or --suite")),
    };
    let clip = read_wav(input)?;
    suite
        .validate(clip.sample_rate())
        .map_err(|e| CliError::usage(e.to_string()))?;
    let realized = suite.sample(clip.samples(), clip.sample_rate(), seed)?;
    let attacked = wavekey_core::AudioClip::new(
        realized.apply(clip.samples(), clip.sample_rate()),
        clip.sample_rate(),
    )?;
    write_wav(&attacked, output)?;
    println!(
        "{}",
        serde_json::to_string(&realized).map_err(Error::from)?
    );
    Ok(())
}

pub fn watermark(model: &Path, input: &Path, output: &Path) -> Result<(), CliError> {
    let m = WatermarkModel::load(model)?;
    let clip = read_wav(input)?;
    write_wav(&m.apply(&clip)?, output)?;
    println!("applied watermark for key {} to {}", m.key_id, input.display());
    Ok(())
}

fn load_models(dir: &Path) -> Result<Vec<WatermarkModel>, CliError> {
    let mut paths: Vec<PathBuf> = match fs::read_dir(dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(e) if e.kind() == ErrorKind::NotFound => Vec::new(),
        Err(e) => {
            return Err(Error::Io {
                path: dir.to_path_buf(),
                source: e,
            }
            .into())
        }
    };
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::usage(format!(
            "no model files in {}",
            dir.display()
        )));
    }
    paths
        .iter()
        .map(|p| WatermarkModel::load(p).map_err(CliError::from))
        .collect()
}

fn named_attacks(kinds: &[AttackKind]) -> Vec<NamedAttack> {
    kinds
        .iter()
        .map(|k| NamedAttack {
            name: k.name().to_string(),
            spec: k.default_spec(),
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct AblationRow {
    loss: String,
    lambdas: Lambdas,
    distinguishability: f64,
    attributability: f64,
    fsd: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AttackRow {
    attack: String,
    dist_before: f64,
    dist_after: f64,
    att_before: f64,
    att_after: f64,
    quality_before: f64,
    quality_after: f64,
    fsd_before: f64,
    fsd_after: f64,
}

fn mean_quality(r: &EvalReport) -> f64 {
    r.per_model.iter().map(|m| m.quality_loss).sum::<f64>() / r.per_model.len() as f64
}

pub fn eval(
    common: &Common,
    mode: EvalMode,
    seed: Option<u64>,
    keys: Option<PathBuf>,
    models: Option<PathBuf>,
) -> Result<(), CliError> {
    let (cfg, out) = resolve(common)?;
    let seed = seed.or(cfg.seed);
    let _lock = OutLock::acquire(&out)?;
    let ds = cfg.dataset.load()?;
    let keys = load_keys(&keys.unwrap_or_else(|| out.join("keys.json")), &ds)?;
    let n = cfg.eval.n_samples;
    match mode {
        EvalMode::Standard => {
            let models = load_models(&models.unwrap_or_else(|| out.join("models")))?;
            let seed = seed.unwrap_or(0);
            let report = evaluate(
                "standard",
                &keys,
                &models,
                &ds,
                &named_attacks(&cfg.eval.attacks),
                n,
                seed,
            )?;
            let delta = report
                .per_model
                .iter()
                .map(|m| 1.0 - m.distinguishability)
                .fold(0.0, f64::max);
            let conditions = check_conditions(&keys, &ds, delta, false)?;
            write_json(&out.join("eval.json"), &report)?;
            write(&out.join("eval.csv"), report.to_csv())?;
            write_json(&out.join("eval_conditions.json"), &conditions)?;
            let mut series =
                String::from("model_index,key_id,distinguishability,compliance,quality_loss\n");
            for (i, m) in report.per_model.iter().enumerate() {
                let _ = writeln!(
                    series,
                    "{},{},{},{},{}",
                    i + 1,
                    m.key_id,
                    m.distinguishability,
                    m.compliance,
                    m.quality_loss
                );
            }
            write(&out.join("figure_series.csv"), series)?;
            println!(
                "distinguishability {:.4}, attributability {:.4} (bound {:.4}), FSD {:.3}",
                report.mean_distinguishability,
                report.attributability,
                conditions.bound,
                report.fsd
            );
            for a in &report.post_attack {
                println!(
                    "  after {:<12} distinguishability {:.4}, attributability {:.4}",
                    a.attack, a.mean_distinguishability, a.attributability
                );
            }
        }
        EvalMode::Ablation => {
            let seed = seed.ok_or_else(|| CliError::usage("ablation mode needs --seed"))?;
            let mut rows = Vec::new();
            let mut csv = String::from("loss,distinguishability,attributability,fsd\n");
            for (name, lambdas) in cfg.lambdas.ablation() {
                let models = train_all(&keys, &ds, None, lambdas, &cfg, seed)?;
                let r = evaluate(name, &keys, &models, &ds, &[], n, seed)?;
                let _ = writeln!(
                    csv,
                    "{name},{},{},{}",
                    r.mean_distinguishability, r.attributability, r.fsd
                );
                println!(
                    "{name:<10} distinguishability {:.4}, attributability {:.4}, FSD {:.3}",
                    r.mean_distinguishability, r.attributability, r.fsd
                );
                rows.push(AblationRow {
                    loss: name.to_string(),
                    lambdas,
                    distinguishability: r.mean_distinguishability,
                    attributability: r.attributability,
                    fsd: r.fsd,
                });
            }
            write_json(&out.join("ablation.json"), &rows)?;
            write(&out.join("ablation.csv"), csv)?;
        }
        EvalMode::Attack => {
            let seed = seed.ok_or_else(|| CliError::usage("attack mode needs --seed"))?;
            if cfg.eval.attacks.is_empty() {
                return Err(CliError::usage("eval.attacks is empty"));
            }
            let base = train_all(&keys, &ds, None, cfg.lambdas, &cfg, seed)?;
            let mut rows = Vec::new();
            let mut csv = String::from(
                "attack,dist_before,dist_after,att_before,att_after,quality_before,quality_after,fsd_before,fsd_after\n",
            );
            for &kind in &cfg.eval.attacks {
                let suite = AttackSuite::of_kind(kind);
                let robust = train_all(&keys, &ds, Some(&suite), cfg.lambdas, &cfg, seed)?;
                let attacks = named_attacks(&[kind]);
                let b = evaluate("before", &keys, &base, &ds, &attacks, n, seed)?;
                let a = evaluate("after", &keys, &robust, &ds, &attacks, n, seed)?;
                let row = AttackRow {
                    attack: kind.name().to_string(),
                    dist_before: b.post_attack[0].mean_distinguishability,
                    dist_after: a.post_attack[0].mean_distinguishability,
                    att_before: b.post_attack[0].attributability,
                    att_after: a.post_attack[0].attributability,
                    quality_before: mean_quality(&b),
                    quality_after: mean_quality(&a),
                    fsd_before: b.fsd,
                    fsd_after: a.fsd,
                };
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{},{}",
                    row.attack,
                    row.dist_before,
                    row.dist_after,
                    row.att_before,
                    row.att_after,
                    row.quality_before,
                    row.quality_after,
                    row.fsd_before,
                    row.fsd_after
                );
                println!(
                    "{:<12} attributability {:.4} -> {:.4}, distinguishability {:.4} -> {:.4}",
                    row.attack, row.att_before, row.att_after, row.dist_before, row.dist_after
                );
                rows.push(row);
            }
            write_json(&out.join("attack.json"), &rows)?;
            write(&out.join("attack.csv"), csv)?;
        }
    }
    Ok(())
}

pub fn register(
    registry: &Path,
    keys: &Path,
    users: &[String],
    models: Option<PathBuf>,
) -> Result<(), CliError> {
    let keys = KeySet::load(keys)?;
    if !users.is_empty() && users.len() != keys.len() {
        return Err(CliError::usage(format!(
            "{} user ids for {} keys",
            users.len(),
            keys.len()
        )));
    }
    let mut store = None;
    for (i, k) in keys.keys().iter().enumerate() {
        let user = users
            .get(i)
            .cloned()
            .unwrap_or_else(|| format!("user-{}", k.id));
        let model_ref = models.as_ref().map(|d| {
            d.join(format!("{}.json", model_stem(k.id)))
                .to_string_lossy()
                .into_owned()
        });
        store = Some(register_key(
            registry,
            keys.dataset_hash(),
            &user,
            k.clone(),
            model_ref,
        )?);
        println!("registered {user} with key {}", k.id);
    }
    if let Some(s) = store {
        println!("registry now holds {} users (version {})", s.len(), s.version);
    }
    Ok(())
}

pub fn attribute(registry: &Path, wav: &Path, json: Option<PathBuf>) -> Result<(), CliError> {
    let store = RegistryStore::load(registry)?;
    let clip = read_wav(wav)?;
    let result = store.attribute(&clip)?;
    match &result.verdict {
        Verdict::Attributed(u) => println!("verdict: attributed to {u}"),
        Verdict::NoMatch => println!("verdict: no match"),
        Verdict::Ambiguous(us) => println!("verdict: ambiguous between {}", us.join(", ")),
    }
    println!(
        "{}",
        serde_json::to_string(&result).map_err(Error::from)?
    );
    if let Some(p) = json {
        write_json(&p, &result)?;
    }
    Ok(())
}

pub fn report(common: &Common) -> Result<(), CliError> {
    let (_, out) = resolve(common)?;
    let _lock = OutLock::acquire(&out)?;
    let mut md = String::from("# Evaluation report\n");
    let mut found = false;

    let eval_path = out.join("eval.json");
    if eval_path.exists() {
        found = true;
        let r: EvalReport = read_json(&eval_path)?;
        let _ = writeln!(
            md,
            "\n## Attribution\n\n| models | samples/model | Dist. | Att. | FSD |\n|---|---|---|---|---|\n| {} | {} | {:.4} | {:.4} | {:.3} |",
            r.per_model.len(),
            r.n_samples,
            r.mean_distinguishability,
            r.attributability,
            r.fsd
        );
        if !r.post_attack.is_empty() {
            md.push_str("\n| attack | Dist. | Att. |\n|---|---|---|\n");
            for a in &r.post_attack {
                let _ = writeln!(
                    md,
                    "| {} | {:.4} | {:.4} |",
                    a.attack, a.mean_distinguishability, a.attributability
                );
            }
        }
    }

    let ablation_path = out.join("ablation.json");
    if ablation_path.exists() {
        found = true;
        let rows: Vec<AblationRow> = read_json(&ablation_path)?;
        md.push_str("\n## Loss ablation\n\n| loss | Dist. | Att. | FSD |\n|---|---|---|---|\n");
        for r in rows {
            let _ = writeln!(
                md,
                "| {} | {:.4} | {:.4} | {:.3} |",
                r.loss, r.distinguishability, r.attributability, r.fsd
            );
        }
    }

    let attack_path = out.join("attack.json");
    if attack_path.exists() {
        found = true;
        let rows: Vec<AttackRow> = read_json(&attack_path)?;
        md.push_str(
            "\n## Robust training\n\n| attack | Dist. Bfr. | Dist. Afr. | Att. Bfr. | Att. Afr. | L1 Bfr. | L1 Afr. |\n|---|---|---|---|---|---|---|\n",
        );
        for r in rows {
            let _ = writeln!(
                md,
                "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.2} | {:.2} |",
                r.attack,
                r.dist_before,
                r.dist_after,
                r.att_before,
                r.att_after,
                r.quality_before,
                r.quality_after
            );
        }
    }

    if !found {
        return Err(CliError::data(format!(
            "nothing to report in {} (run `eval` first)",
            out.display()
        )));
    }
    write(&out.join("report.md"), &md)?;
    print!("{md}");
    Ok(())
}
