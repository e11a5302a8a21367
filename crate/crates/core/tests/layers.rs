use jferc_core::layers::{multi_head_self_attention, AttentionParams, EncoderLayerParams};
use jferc_core::rng::SeededRng;
use jferc_core::{ParamStore, Tape, Tensor};

fn values(store: &ParamStore, name: &str) -> Vec<f64> {
    store.get(store.find(name).unwrap_or_else(|| panic!("missing {name}"))).data().to_vec()
}

/// `x[r×n] · w[n×m] + b`.
fn affine(x: &[f64], r: usize, n: usize, w: &[f64], b: Option<&[f64]>, m: usize) -> Vec<f64> {
    let mut y = vec![0.0; r * m];
    for i in 0..r {
        for j in 0..m {
            let mut s = b.map_or(0.0, |b| b[j]);
            for k in 0..n {
                s += x[i * n + k] * w[k * m + j];
            }
            y[i * m + j] = s;
        }
    }
    y
}

fn oracle_attention(store: &ParamStore, name: &str, x: &[f64], s: usize, d: usize, heads: usize) -> Vec<f64> {
    let p = |t: &str| values(store, &format!("{name}.{t}"));
    let q = affine(x, s, d, &p("wq.w"), Some(&p("wq.b")), d);
    let k = affine(x, s, d, &p("wk.w"), None, d);
    let v = affine(x, s, d, &p("wv.w"), Some(&p("wv.b")), d);
    let dh = d / heads;
    let mut cat = vec![0.0; s * d];
    for h in 0..heads {
        for i in 0..s {
            let scores: Vec<f64> = (0..s)
                .map(|j| (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                cat[i * d + h * dh + c] = (0..s).map(|j| e[j] / z * v[j * d + h * dh + c]).sum();
            }
        }
    }
    affine(&cat, s, d, &p("wo.w"), Some(&p("wo.b")), d)
}

fn oracle_layer_norm(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|row| {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + 1e-9).sqrt();
            row.iter().enumerate().map(move |(j, v)| (v - mu) * inv * g[j] + b[j]).collect::<Vec<_>>()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn perturbed_layer(seed: u64, d: usize, heads: usize, ffn: usize) -> (ParamStore, EncoderLayerParams) {
    let mut rng = SeededRng::new(seed);
    let mut store = ParamStore::new();
    let layer = EncoderLayerParams::new(&mut store, "enc", d, heads, ffn, 0.4, &mut rng).unwrap();
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.2 * rng.normal();
        }
    }
    (store, layer)
}

#[test]
fn two_token_single_head_attention_matches_dense_oracle() {
    let mut store = ParamStore::new();
    let attn = AttentionParams::new(&mut store, "a", 2, 1, 0.7, &mut SeededRng::new(5)).unwrap();
    for t in store.tensors_mut() {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += 0.1 * i as f64;
        }
    }
    let x = vec![0.3, -1.2, 0.8, 0.5];
    let mut tape = Tape::new(&store);
    let xv = tape.constant(2, 2, x.clone()).unwrap();
    let y = multi_head_self_attention(&mut tape, xv, &attn).unwrap();
    let want = oracle_attention(&store, "a", &x, 2, 2, 1);
    for (a, b) in tape.value(y).iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn multi_head_attention_matches_oracle() {
    let mut rng = SeededRng::new(9);
    let mut store = ParamStore::new();
    let attn = AttentionParams::new(&mut store, "a", 8, 4, 0.5, &mut rng).unwrap();
    let x: Vec<f64> = (0..5 * 8).map(|_| rng.normal()).collect();
    let mut tape = Tape::new(&store);
    let xv = tape.constant(5, 8, x.clone()).unwrap();
    let y = multi_head_self_attention(&mut tape, xv, &attn).unwrap();
    let want = oracle_attention(&store, "a", &x, 5, 8, 4);
    for (a, b) in tape.value(y).iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn single_token_attention_is_value_then_output() {
    let mut rng = SeededRng::new(3);
    let mut store = ParamStore::new();
    let attn = AttentionParams::new(&mut store, "a", 4, 2, 0.5, &mut rng).unwrap();
    let x = vec![0.1, -0.4, 2.0, 0.7];
    let mut tape = Tape::new(&store);
    let xv = tape.constant(1, 4, x.clone()).unwrap();
    let y = multi_head_self_attention(&mut tape, xv, &attn).unwrap();
    let v = affine(&x, 1, 4, &values(&store, "a.wv.w"), Some(&values(&store, "a.wv.b")), 4);
    let want = affine(&v, 1, 4, &values(&store, "a.wo.w"), Some(&values(&store, "a.wo.b")), 4);
    for (a, b) in tape.value(y).iter().zip(&want) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn attention_is_permutation_equivariant() {
    for seed in 0..5 {
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        let attn = AttentionParams::new(&mut store, "a", 8, 2, 0.5, &mut rng).unwrap();
        let s = 6;
        let x: Vec<f64> = (0..s * 8).map(|_| rng.normal()).collect();
        let mut perm: Vec<usize> = (0..s).collect();
        rng.shuffle(&mut perm);
        let px: Vec<f64> = perm.iter().flat_map(|&r| x[r * 8..(r + 1) * 8].to_vec()).collect();
        let mut tape = Tape::new(&store);
        let xv = tape.constant(s, 8, x).unwrap();
        let pv = tape.constant(s, 8, px).unwrap();
        let y = multi_head_self_attention(&mut tape, xv, &attn).unwrap();
        let py = multi_head_self_attention(&mut tape, pv, &attn).unwrap();
        let (y, py) = (tape.value(y), tape.value(py));
        for (i, &r) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((py[i * 8 + c] - y[r * 8 + c]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn empty_sequence_is_rejected() {
    let mut store = ParamStore::new();
    let attn = AttentionParams::new(&mut store, "a", 4, 2, 0.5, &mut SeededRng::new(0)).unwrap();
    let mut tape = Tape::new(&store);
    let x = tape.constant(0, 4, Vec::new()).unwrap();
    assert!(multi_head_self_attention(&mut tape, x, &attn).is_err());
}

#[test]
fn indivisible_heads_are_rejected() {
    let mut store = ParamStore::new();
    assert!(AttentionParams::new(&mut store, "a", 6, 4, 0.5, &mut SeededRng::new(0)).is_err());
}

#[test]
fn encoder_layer_matches_straight_line_reimplementation() {
    let (store, layer) = perturbed_layer(11, 4, 2, 6);
    let x = vec![0.5, -1.0, 0.25, 2.0, -0.3, 0.9, 1.4, -0.6, 0.0, 0.7, -2.1, 0.4];
    let mut tape = Tape::new(&store);
    let xv = tape.constant(3, 4, x.clone()).unwrap();
    let y = layer.forward(&mut tape, xv, 1e-9).unwrap();

    let ln = |x: &[f64], n: &str| oracle_layer_norm(x, 4, &values(&store, &format!("enc.{n}.gain")), &values(&store, &format!("enc.{n}.bias")));
    let n1 = ln(&x, "ln1");
    let a = oracle_attention(&store, "enc.attn", &n1, 3, 4, 2);
    let h: Vec<f64> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
    let n2 = ln(&h, "ln2");
    let f = affine(&n2, 3, 4, &values(&store, "enc.ff1.w"), Some(&values(&store, "enc.ff1.b")), 6);
    let f: Vec<f64> = f.into_iter().map(gelu).collect();
    let f = affine(&f, 3, 6, &values(&store, "enc.ff2.w"), Some(&values(&store, "enc.ff2.b")), 4);
    let want: Vec<f64> = h.iter().zip(&f).map(|(p, q)| p + q).collect();
    for (a, b) in tape.value(y).iter().zip(&want) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn encoder_layer_preserves_shape() {
    for &d in &[8, 32] {
        let (store, layer) = perturbed_layer(d as u64, d, 4, 2 * d);
        for &s in &[1, 4, 16] {
            let mut tape = Tape::new(&store);
            let x = tape.constant(s, d, vec![0.1; s * d]).unwrap();
            let y = layer.forward(&mut tape, x, 1e-9).unwrap();
            assert_eq!(tape.dims(y), (s, d));
        }
    }
}

#[test]
fn encoder_layer_is_deterministic() {
    let (store, layer) = perturbed_layer(4, 8, 2, 16);
    let run = || {
        let mut tape = Tape::new(&store);
        let x = tape.constant(3, 8, (0..24).map(|i| (i as f64).sin()).collect()).unwrap();
        let y = layer.forward(&mut tape, x, 1e-9).unwrap();
        tape.value(y).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn layer_norm_rows_are_standardized() {
    let mut rng = SeededRng::new(2);
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let x = tape.constant(5, 16, (0..80).map(|_| 3.0 + 4.0 * rng.normal()).collect()).unwrap();
    let g = tape.constant(1, 16, vec![1.0; 16]).unwrap();
    let b = tape.constant(1, 16, vec![0.0; 16]).unwrap();
    let y = tape.layer_norm(x, g, b, 1e-9).unwrap();
    for row in tape.value(y).chunks(16) {
        let mu = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 16.0;
        assert!(mu.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn softmax_properties() {
    let t = Tensor::new(&[4], vec![2.5; 4]).unwrap().softmax(0).unwrap();
    assert!(t.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));

    let t = Tensor::new(&[2], vec![0.0, 2f64.ln()]).unwrap().softmax(0).unwrap();
    assert!((t.data()[0] - 1.0 / 3.0).abs() < 1e-15 && (t.data()[1] - 2.0 / 3.0).abs() < 1e-15);

    let mut rng = SeededRng::new(8);
    let x: Vec<f64> = (0..30).map(|_| 10.0 * rng.normal()).collect();
    let shifted: Vec<f64> = x.iter().map(|v| v + 123.0).collect();
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let a = tape.constant(5, 6, x).unwrap();
    let b = tape.constant(5, 6, shifted).unwrap();
    let (a, b) = (tape.softmax_rows(a).unwrap(), tape.softmax_rows(b).unwrap());
    for row in tape.value(a).chunks(6) {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    for (p, q) in tape.value(a).iter().zip(tape.value(b)) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn softmax_along_leading_axis() {
    let t = Tensor::new(&[2, 3], vec![0.0, 1.0, 2.0, 0.0, 1.0, 2.0]).unwrap();
    let s = t.softmax(0).unwrap();
    assert!(s.data().iter().all(|&p| (p - 0.5).abs() < 1e-15));
}
