//! Library results against independent reference computations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use wavekey_core::attacks::{AttackKind, RealizedAttack};
use wavekey_core::audio::synth_dataset;
use wavekey_core::keygen::classifier_score;
use wavekey_core::metrics::{attributability, distinguishability};
use wavekey_core::watermark::{hinge_loss, objective};
use wavekey_core::{AudioClip, Key, KeySet, Lambdas, WatermarkModel};

const SR: u32 = 8000;

/// Orthonormal directions by modified Gram-Schmidt.
fn orthonormal(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    while out.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for u in &out {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        out.push(v.into_iter().map(|a| a / n).collect());
    }
    out
}

fn clip(v: Vec<f64>) -> AudioClip {
    AudioClip::new(v, SR).unwrap()
}

#[test]
fn classifier_score_matches_compensated_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for d in [1usize, 7, 1024, 4097] {
        let dir = &orthonormal(&mut rng, 1, d)[0];
        let key = Key::new(1, dir.clone(), rng.random_range(-1.0..1.0)).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Kahan summation of the products.
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for (a, b) in dir.iter().zip(&x) {
            let y = a * b - c;
            let t = s + y;
            c = (t - s) - y;
            s = t;
        }
        let want = s + key.bias;
        let got = classifier_score(&key, &clip(x)).unwrap();
        assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()), "d={d}: {got} vs {want}");
    }
}

#[test]
fn attributability_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let d = 8;
        let dirs = orthonormal(&mut rng, 3, d);
        let mut keys = KeySet::empty(d, SR, "t");
        for (i, u) in dirs.iter().enumerate() {
            keys.push(Key::new(i as u32 + 1, u.clone(), rng.random_range(-0.3..0.3)).unwrap())
                .unwrap();
        }
        let per_model: Vec<Vec<AudioClip>> = (0..3)
            .map(|_| {
                (0..10)
                    .map(|_| clip((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()))
                    .collect()
            })
            .collect();
        let mut want = 0.0;
        for (i, clips) in per_model.iter().enumerate() {
            let mut hits = 0;
            for c in clips {
                let s: Vec<f64> = keys
                    .keys()
                    .iter()
                    .map(|k| k.direction.iter().zip(c.samples()).map(|(a, b)| a * b).sum::<f64>() + k.bias)
                    .collect();
                if (0..3).all(|j| if j == i { s[j] > 0.0 } else { s[j] < 0.0 }) {
                    hits += 1;
                }
            }
            want += hits as f64 / 10.0 / 3.0;
        }
        let got = attributability(&keys, &per_model).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");

        let k = &keys.keys()[0];
        let pos = per_model[0].iter().filter(|c| k.score_samples(c.samples()) > 0.0).count();
        let neg = per_model[1].iter().filter(|c| k.score_samples(c.samples()) < 0.0).count();
        let d_want = 0.5 * (pos as f64 / 10.0 + neg as f64 / 10.0);
        let d_got = distinguishability(k, &per_model[0], &per_model[1]).unwrap();
        assert!((d_got - d_want).abs() < 1e-12);
    }
}

#[test]
fn apply_is_elementwise_clamped_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let d = 300;
    let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let m = WatermarkModel {
        key_id: 1,
        w: w.clone(),
        lambdas: Lambdas::default(),
        robust: None,
        training_log: Vec::new(),
    };
    let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = m.apply(&clip(x.clone())).unwrap();
    for i in 0..d {
        let s = x[i] + w[i];
        let want = if s > 1.0 { 1.0 } else if s < -1.0 { -1.0 } else { s };
        assert_eq!(y.samples()[i], want);
    }
}

fn near_clamp(r: &RealizedAttack, x: &[f64]) -> bool {
    match r {
        RealizedAttack::Chain { stages } => {
            let mut cur = x.to_vec();
            for st in stages {
                if near_clamp(st, &cur) {
                    return true;
                }
                cur = st.apply(&cur, SR);
            }
            false
        }
        _ => r.pre_clamp(x, SR).iter().any(|v| (v.abs() - 1.0).abs() < 1e-3),
    }
}

/// The attacked hinge gradient agrees with central differences through every
/// realized attack class.
#[test]
fn robust_hinge_gradient_matches_finite_differences() {
    let d = 128;
    let ds = synth_dataset(8, d, SR, 14).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let dir = orthonormal(&mut rng, 1, d).remove(0);
    let key = Key::new(1, dir, 0.5).unwrap();
    let batch: Vec<Vec<f64>> = ds.clips()[..4]
        .iter()
        .map(|c| c.samples().iter().map(|v| 0.3 * v).collect())
        .collect();
    let refs: Vec<&[f64]> = batch.iter().map(|v| v.as_slice()).collect();
    let lam = Lambdas::new(1.0, 0.0, 0.0).unwrap();
    let h = 1e-6;

    for kind in AttackKind::CLASSES {
        let mut checked = 0;
        for trial in 0..5u64 {
            let w: Vec<f64> = (0..d).map(|_| rng.random_range(-0.05..0.05)).collect();
            let realized: Vec<RealizedAttack> = refs
                .iter()
                .enumerate()
                .map(|(r, x)| {
                    let y: Vec<f64> = x.iter().zip(&w).map(|(a, b)| a + b).collect();
                    kind.default_spec().realize(&y, SR, 100 * trial + r as u64).unwrap()
                })
                .collect();
            let attacked_hinge = |w: &[f64]| -> f64 {
                let post: Vec<AudioClip> = refs
                    .iter()
                    .zip(&realized)
                    .map(|(x, r)| {
                        let y: Vec<f64> = x.iter().zip(w).map(|(a, b)| (a + b).clamp(-1.0, 1.0)).collect();
                        clip(r.apply(&y, SR))
                    })
                    .collect();
                hinge_loss(&key, &post).unwrap()
            };
            // Skip points sitting on a clamp or hinge kink.
            let near_kink = realized.iter().zip(&refs).any(|(r, x)| {
                let y: Vec<f64> = x.iter().zip(&w).map(|(a, b)| a + b).collect();
                near_clamp(r, &y)
            });
            if near_kink {
                continue;
            }
            let (_, g) = objective(&key, &w, &refs, Some(&realized), SR, &lam);
            let mut fd = vec![0.0; d];
            for i in 0..d {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[i] += h;
                wm[i] -= h;
                fd[i] = (attacked_hinge(&wp) - attacked_hinge(&wm)) / (2.0 * h);
            }
            let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-10);
            assert!(diff / scale < 1e-5, "{}: relative error {}", kind.name(), diff / scale);
            if scale > 1e-6 {
                checked += 1;
            }
        }
        assert!(checked >= 3, "{}: only {checked} informative trials", kind.name());
    }
}
