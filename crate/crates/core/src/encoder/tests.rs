use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check;
use crate::text::vocab::PAD;

fn seq(ids: &[usize], max_len: usize) -> EncodedSeq {
    let mut padded = ids.to_vec();
    padded.resize(max_len, PAD);
    EncodedSeq {
        ids: padded,
        mask: (0..max_len).map(|i| i < ids.len()).collect(),
    }
}

fn tiny(vocab: usize, max_len: usize) -> EncoderParams {
    init_encoder(&EncoderConfig::preset("tiny", vocab, max_len).unwrap(), 11).unwrap()
}

#[test]
fn init_is_deterministic_with_unit_norms() {
    let cfg = EncoderConfig::preset("small", 50, 16).unwrap();
    let a = init_encoder(&cfg, 3).unwrap();
    assert_eq!(a, init_encoder(&cfg, 3).unwrap());
    assert_ne!(a, init_encoder(&cfg, 4).unwrap());
    for layer in &a.layers {
        assert!(layer.ln1_gain.data().iter().chain(layer.ln2_gain.data()).all(|&v| v == 1.0));
        assert!(layer.ln1_bias.data().iter().chain(layer.ln2_bias.data()).all(|&v| v == 0.0));
        assert!(layer.b1.data().iter().chain(layer.b2.data()).all(|&v| v == 0.0));
    }
}

#[test]
fn embedding_row_variance_matches_uniform() {
    let p = tiny(300, 16);
    let d = p.config.d_model as f64;
    let target = 1.0 / (3.0 * d);
    for r in 0..p.tok_emb.outer_rows() {
        let row = p.tok_emb.row(r);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        assert!(var > target / 3.0 && var < target * 3.0, "row {r}: {var} vs {target}");
    }
}

#[test]
fn rejects_bad_configs() {
    assert!(EncoderConfig::preset("huge", 10, 8).is_err());
    let mut cfg = EncoderConfig::preset("tiny", 10, 8).unwrap();
    cfg.n_heads = 3;
    assert!(cfg.validate().is_err());
    cfg.n_heads = 2;
    cfg.dropout_rate = 1.0;
    assert!(cfg.validate().is_err());
}

#[test]
fn single_token_attention_is_identity_weighting() {
    let p = tiny(20, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::matrix(1, 32, (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let mut g = Graph::new();
    let lv = p.layers[0].bind(&mut g, false);
    let xv = g.constant(&x);
    let s = EncodedSeq { ids: vec![6], mask: vec![true] };
    let (out, weights) = attention_block(&mut g, &lv, xv, &[s], 2, None).unwrap();
    for w in &weights[0] {
        assert_eq!(g.value(*w).data(), &[1.0]);
    }
    // layernorm(x + Wo(V(x)))
    let v = g.matmul(xv, lv.wv).unwrap();
    let o = g.matmul(v, lv.wo).unwrap();
    let r = g.add(xv, o).unwrap();
    let want = g.layer_norm(r, lv.ln1_gain, lv.ln1_bias, LAYER_NORM_EPS).unwrap();
    assert!(g.value(out).max_abs_diff(g.value(want)) < 1e-12);
}

#[test]
fn identical_tokens_attend_uniformly() {
    let p = tiny(20, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let row: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = Tensor::from_rows(&vec![row; 5]).unwrap();
    let mut g = Graph::new();
    let lv = p.layers[0].bind(&mut g, false);
    let xv = g.constant(&x);
    let s = EncodedSeq { ids: vec![0; 5], mask: vec![true; 5] };
    let (_, weights) = attention_block(&mut g, &lv, xv, &[s], 2, None).unwrap();
    for w in &weights[0] {
        for &a in g.value(*w).data() {
            assert!((a - 0.2).abs() < 1e-12);
        }
    }
}

#[test]
fn masked_keys_get_no_attention() {
    let p = tiny(20, 8);
    let batch = [seq(&[6, 7, 8], 6), seq(&[9, 10, 11, 12, 13], 6)];
    let mut g = Graph::new();
    let vars = p.bind(&mut g, false);
    let x = embed(&mut g, vars.tok_emb, vars.pos_emb, &batch).unwrap();
    let (_, weights) = attention_block(&mut g, &vars.layers[0], x, &batch, 2, None).unwrap();
    for (s, per_head) in batch.iter().zip(&weights) {
        for w in per_head {
            for row in g.value(*w).data().chunks(6) {
                for (j, &m) in s.mask.iter().enumerate() {
                    if !m {
                        assert_eq!(row[j], 0.0);
                    }
                }
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn all_masked_sequence_is_rejected() {
    let p = tiny(20, 8);
    let s = EncodedSeq { ids: vec![0; 4], mask: vec![false; 4] };
    assert!(p.encode(&s).is_err());
    let mut g = Graph::new();
    let lv = p.layers[0].bind(&mut g, false);
    let x = g.constant(&Tensor::zeros(&[4, 32]));
    assert!(self_attention(&mut g, &lv, x, &[false; 4], 2).is_err());
}

#[test]
fn output_has_model_width_for_every_preset() {
    for name in ["tiny", "small", "base", "check"] {
        let cfg = EncoderConfig::preset(name, 30, 12).unwrap();
        let p = init_encoder(&cfg, 0).unwrap();
        let h = p.encode(&seq(&[6, 7, 8, 9], 12)).unwrap();
        assert_eq!(h.shape(), &[cfg.d_model]);
    }
}

#[test]
fn padding_amount_does_not_change_h() {
    let p = init_encoder(&EncoderConfig::preset("small", 40, 32).unwrap(), 5).unwrap();
    let ids = [6, 17, 9, 30, 2, 11, 3];
    let a = p.encode(&seq(&ids, 16)).unwrap();
    let b = p.encode(&seq(&ids, 32)).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-10);
}

#[test]
fn padded_positions_do_not_leak() {
    let p = tiny(40, 12);
    let base = seq(&[6, 7, 8, 9], 12);
    let h = p.encode(&base).unwrap();
    let mut scrambled = base.clone();
    for (i, id) in scrambled.ids.iter_mut().enumerate().skip(4) {
        *id = 10 + i;
    }
    assert!(h.max_abs_diff(&p.encode(&scrambled).unwrap()) < 1e-12);
}

#[test]
fn out_of_range_ids_error() {
    let p = tiny(20, 8);
    assert!(p.encode(&seq(&[6, 25], 8)).is_err());
    assert!(p.encode(&seq(&[6, 7], 9)).is_err());
}

#[test]
fn batch_matches_single_encodes() {
    let p = init_encoder(&EncoderConfig::preset("small", 40, 10).unwrap(), 8).unwrap();
    let batch = [seq(&[6, 7, 8], 10), seq(&[20, 21, 22, 23, 24, 25], 10), seq(&[9], 10)];
    let all = p.encode_batch(&batch).unwrap();
    for (i, s) in batch.iter().enumerate() {
        let one = p.encode(s).unwrap();
        for (a, b) in all.row(i).iter().zip(one.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let p = init_encoder(&EncoderConfig::preset("check", 25, 8).unwrap(), 1).unwrap();
    let back = EncoderParams::from_json(&p.to_json().unwrap()).unwrap();
    assert_eq!(p, back);
    let names: Vec<String> = p.named_tensors().into_iter().map(|(k, _)| k).collect();
    assert_eq!(names.len(), 2 + 12 * 2);
    assert!(names.contains(&"layers.1.ln2_bias".to_string()));

    let mut bad: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
    bad["params"].as_object_mut().unwrap().remove("layers.0.wq");
    assert!(EncoderParams::from_json(&bad.to_string()).unwrap_err().to_string().contains("layers.0.wq"));
}

/// Every parameter tensor of a 2-layer, d=16 encoder against finite
/// differences of a weighted sum of the pooled outputs.
#[test]
fn encoder_gradients_match_finite_differences() {
    let p = init_encoder(&EncoderConfig::preset("check", 14, 8).unwrap(), 21).unwrap();
    let batch = [seq(&[6, 7, 8, 9, 10], 8), seq(&[11, 12, 13, 6, 2, 3, 4], 8)];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = Tensor::matrix(2, 16, (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let tensors: Vec<Tensor> = p.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    for (idx, (name, t)) in p.named_tensors().into_iter().enumerate() {
        let err = grad_check(
            |g, leaf| {
                let mut vars = p.bind(g, false);
                *vars.all_mut()[idx] = leaf;
                let h = forward(g, &vars, &batch, 2, None)?;
                let wv = g.constant(&w);
                let prod = g.mul(h, wv)?;
                let sq = g.mul(prod, prod)?;
                g.sum(sq)
            },
            t,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{name}: {err}");
        assert_eq!(&tensors[idx], t);
    }
}
