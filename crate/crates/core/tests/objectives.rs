use jferc_core::model::argmax;
use jferc_core::objectives::{classify, concat_fused, erc_loss, icl_loss, total_loss, EmotionHead, IclConfig};
use jferc_core::rng::SeededRng;
use jferc_core::{Error, ParamStore, Tape};

/// Straight double loop over anchors and positives.
fn oracle_icl(feats: &[Vec<f64>], labels: &[usize], tau: f64, normalize: bool) -> f64 {
    let f: Vec<Vec<f64>> = feats
        .iter()
        .map(|x| {
            if normalize {
                let n = x.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-12;
                x.iter().map(|v| v / n).collect()
            } else {
                x.clone()
            }
        })
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let k = f.len();
    let mut total = 0.0;
    for i in 0..k {
        let positives: Vec<usize> = (0..k).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let denom: f64 = (0..k).filter(|&j| j != i).map(|j| (dot(&f[i], &f[j]) / tau).exp()).sum();
        let mut inner = 0.0;
        for &p in &positives {
            inner += ((dot(&f[i], &f[p]) / tau).exp() / denom).ln();
        }
        total += -inner / positives.len() as f64;
    }
    total
}

fn eval_icl(feats: &[Vec<f64>], labels: &[usize], cfg: &IclConfig) -> f64 {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let w = feats[0].len();
    let x = tape.constant(feats.len(), w, feats.concat()).unwrap();
    let x = if cfg.normalizes() {
        tape.l2_normalize_rows(x, 1e-12).unwrap()
    } else {
        x
    };
    let l = icl_loss(&mut tape, x, labels, cfg).unwrap();
    tape.scalar(l)
}

fn random_batch(rng: &mut SeededRng, k: usize, w: usize, c: usize, scale: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let feats = (0..k).map(|_| (0..w).map(|_| scale * rng.normal()).collect()).collect();
    let labels = (0..k).map(|_| rng.below(c)).collect();
    (feats, labels)
}

#[test]
fn icl_matches_brute_force_oracle() {
    let mut rng = SeededRng::new(2024);
    for trial in 0..30 {
        let k = 2 + rng.below(15);
        let c = 1 + rng.below(5);
        let w = 2 + rng.below(10);
        let (feats, labels) = random_batch(&mut rng, k, w, c, 1.0);
        for normalize in [true, false] {
            let cfg = IclConfig {
                tau: if normalize { 0.07 } else { 2.0 },
                normalize,
                ..IclConfig::default()
            };
            let got = eval_icl(&feats, &labels, &cfg);
            let want = oracle_icl(&feats, &labels, cfg.tau, normalize);
            assert!((got - want).abs() < 1e-10, "trial {trial}: {got} vs {want}");
        }
    }
}

#[test]
fn icl_analytic_fixtures() {
    let cfg = IclConfig::default();
    let same = vec![vec![0.6, 0.8, 0.0]; 4];
    assert!((eval_icl(&same, &[1, 1, 1, 1], &cfg) - 4.0 * 3f64.ln()).abs() < 1e-9);

    let pair = vec![vec![0.3, -1.0], vec![2.0, 0.5]];
    assert!(eval_icl(&pair, &[2, 2], &cfg).abs() < 1e-12);

    let mut rng = SeededRng::new(1);
    let (feats, _) = random_batch(&mut rng, 5, 4, 1, 1.0);
    assert_eq!(eval_icl(&feats, &[0, 1, 2, 3, 4], &cfg), 0.0);
}

#[test]
fn icl_is_permutation_invariant() {
    let mut rng = SeededRng::new(77);
    for _ in 0..5 {
        let (feats, labels) = random_batch(&mut rng, 9, 6, 3, 1.0);
        let mut order: Vec<usize> = (0..9).collect();
        rng.shuffle(&mut order);
        let pf: Vec<Vec<f64>> = order.iter().map(|&i| feats[i].clone()).collect();
        let pl: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let cfg = IclConfig::default();
        assert!((eval_icl(&feats, &labels, &cfg) - eval_icl(&pf, &pl, &cfg)).abs() < 1e-10);
    }
}

#[test]
fn sharper_temperature_penalizes_misordered_pairs_more() {
    // Sample 0's positive (2) is less similar to it than its negative (1).
    let feats = vec![vec![1.0, 0.0], vec![0.9, 0.436], vec![0.0, 1.0], vec![0.1, 0.995]];
    let labels = [0, 1, 0, 1];
    let at = |tau| {
        eval_icl(
            &feats,
            &labels,
            &IclConfig {
                tau,
                ..IclConfig::default()
            },
        )
    };
    assert!(at(0.05) > at(0.5));
}

#[test]
fn icl_rejects_bad_inputs() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let one = tape.constant(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
    assert_eq!(icl_loss(&mut tape, one, &[0], &IclConfig::default()).unwrap_err(), Error::BatchTooSmall(1));
    let two = tape.constant(2, 3, vec![1.0; 6]).unwrap();
    let bad = IclConfig {
        tau: 0.0,
        ..IclConfig::default()
    };
    assert!(matches!(icl_loss(&mut tape, two, &[0, 0], &bad), Err(Error::Config(_))));
}

#[test]
fn raw_similarity_overrides_normalization() {
    let cfg = IclConfig {
        raw_similarity: true,
        ..IclConfig::default()
    };
    assert!(!cfg.normalizes());
    assert!(IclConfig::default().normalizes());
}

#[test]
fn concat_fused_shapes_and_norms() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let a = tape.constant(2, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
    let b = tape.constant(2, 3, vec![4.0, 5.0, 6.0, 0.0, 0.0, 0.0]).unwrap();
    let raw = concat_fused(&mut tape, a, b, false).unwrap();
    assert_eq!(tape.dims(raw), (2, 6));
    assert_eq!(&tape.value(raw)[..6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let n = concat_fused(&mut tape, a, b, true).unwrap();
    let row = &tape.value(n)[..6];
    assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
    assert!(tape.value(n)[6..].iter().all(|&v| v == 0.0));
}

fn head(seed: u64, d: usize, c: usize) -> (ParamStore, EmotionHead) {
    let mut store = ParamStore::new();
    let h = EmotionHead::new(&mut store, d, c, 0.5, &mut SeededRng::new(seed));
    for t in store.tensors_mut() {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += 0.01 * i as f64;
        }
    }
    (store, h)
}

#[test]
fn classifiers_are_distinct_and_averaged_before_softmax() {
    let (mut store, h) = head(1, 4, 3);
    assert_ne!(h.mt.w, h.tm.w);
    let x = vec![0.5, -1.0, 2.0, 0.1];
    let logits_of = |s: &ParamStore, a: &[f64], b: &[f64]| {
        let mut tape = Tape::new(s);
        let a = tape.constant(1, 4, a.to_vec()).unwrap();
        let b = tape.constant(1, 4, b.to_vec()).unwrap();
        let (p, l) = classify(&mut tape, a, b, &h).unwrap();
        assert!((tape.value(p).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        tape.value(l).to_vec()
    };
    let both = logits_of(&store, &x, &x);
    // Zero the audio-side branch: the text-side contribution is halved.
    let full_mt = {
        let w = store.get(h.mt.w).data();
        let b = store.get(h.mt.b.unwrap()).data();
        (0..3).map(|j| b[j] + (0..4).map(|k| x[k] * w[k * 3 + j]).sum::<f64>()).collect::<Vec<_>>()
    };
    for id in [h.tm.w, h.tm.b.unwrap()] {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let half = logits_of(&store, &x, &x);
    for j in 0..3 {
        assert_eq!(half[j], full_mt[j] * 0.5);
    }
    // Identical classifiers on identical inputs reproduce either branch.
    let (w, b) = (store.get(h.mt.w).clone(), store.get(h.mt.b.unwrap()).clone());
    *store.get_mut(h.tm.w) = w;
    *store.get_mut(h.tm.b.unwrap()) = b;
    let same = logits_of(&store, &x, &x);
    for j in 0..3 {
        assert!((same[j] - full_mt[j]).abs() < 1e-14);
    }
    assert_ne!(both, same);
}

#[test]
fn argmax_ignores_constant_shifts() {
    let mut rng = SeededRng::new(5);
    for _ in 0..20 {
        let x: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let shifted: Vec<f64> = x.iter().map(|v| v - 3.7).collect();
        assert_eq!(argmax(&x), argmax(&shifted));
    }
}

fn nll_of(probs: &[f64], c: usize, labels: &[usize]) -> (f64, usize) {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let p = tape.constant(labels.len(), c, probs.to_vec()).unwrap();
    let l = erc_loss(&mut tape, p, labels).unwrap();
    (tape.scalar(l), tape.clamp_events())
}

#[test]
fn cross_entropy_fixtures() {
    assert_eq!(nll_of(&[0.0, 1.0, 0.0, 1.0, 0.0, 0.0], 3, &[1, 0]).0, 0.0);
    let (l, _) = nll_of(&[0.25; 8], 4, &[0, 3]);
    assert!((l - 4f64.ln()).abs() < 1e-15);
    let (l, clamps) = nll_of(&[1.0, 0.0], 2, &[1]);
    assert_eq!(clamps, 1);
    assert!((l + 1e-12f64.ln()).abs() < 1e-9);
}

#[test]
fn cross_entropy_matches_loop_oracle() {
    let mut rng = SeededRng::new(12);
    for _ in 0..20 {
        let (k, c) = (1 + rng.below(8), 2 + rng.below(4));
        let mut probs = Vec::new();
        for _ in 0..k {
            let raw: Vec<f64> = (0..c).map(|_| rng.uniform() + 1e-3).collect();
            let z: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|v| v / z));
        }
        let labels: Vec<usize> = (0..k).map(|_| rng.below(c)).collect();
        let mut want = 0.0;
        for (i, &r) in labels.iter().enumerate() {
            want -= probs[i * c + r].ln();
        }
        want /= k as f64;
        let (got, _) = nll_of(&probs, c, &labels);
        assert!(got > 0.0);
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn total_loss_gradient_is_the_weighted_sum() {
    let mut rng = SeededRng::new(31);
    let mut store = ParamStore::new();
    let feats = store.normal("f", &[6, 4], 1.0, &mut rng);
    let w = store.normal("w", &[4, 3], 1.0, &mut rng);
    let labels = [0, 1, 2, 0, 1, 1];
    let cfg = IclConfig::default();
    let lambda = 0.7;
    let grads = |which: u8| -> Vec<Vec<f64>> {
        let mut tape = Tape::new(&store);
        let (f, wv) = (tape.param(feats), tape.param(w));
        let logits = tape.matmul(f, wv).unwrap();
        let p = tape.softmax_rows(logits).unwrap();
        let erc = erc_loss(&mut tape, p, &labels).unwrap();
        let n = tape.l2_normalize_rows(f, 1e-12).unwrap();
        let icl = icl_loss(&mut tape, n, &labels, &cfg).unwrap();
        let out = match which {
            0 => erc,
            1 => icl,
            _ => total_loss(&mut tape, erc, Some(icl), lambda).unwrap(),
        };
        let g = tape.backward(out).unwrap();
        [feats, w].iter().map(|&id| g.param(id).map(<[f64]>::to_vec).unwrap_or(vec![0.0; store.get(id).len()])).collect()
    };
    let (e, i, t) = (grads(0), grads(1), grads(2));
    for p in 0..2 {
        for k in 0..t[p].len() {
            assert!((t[p][k] - (e[p][k] + lambda * i[p][k])).abs() < 1e-12);
        }
    }
    let mut tape = Tape::new(&store);
    let erc = tape.constant(1, 1, vec![0.4]).unwrap();
    let icl = tape.constant(1, 1, vec![9.0]).unwrap();
    let t = total_loss(&mut tape, erc, Some(icl), 0.0).unwrap();
    assert_eq!(tape.scalar(t), 0.4);
}
