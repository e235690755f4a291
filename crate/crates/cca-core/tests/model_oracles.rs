//! Straight-line reference computations for the attention paths, plus
//! structural invariants that don't fit a single module's unit tests.

use rand::Rng;

use cca_core::config::{ConditionId, EmbedType, EncoderConfig};
use cca_core::model::{tile_query, CcaModel};
use cca_core::rng::{sub_rng, Domain};
use cca_core::tensor::{l2_norm, Precision, Tensor};
use cca_core::triplet::triplet_loss;
use cca_core::tape::Tape;

// ── tiny dense helpers, independent of the tape ──────────────────────

fn mat_vecmul(x: &[f64], w: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let mut s = 0.0;
            for k in 0..inner {
                s += x[i * inner + k] * w[k * cols + j];
            }
            out[i * cols + j] = s;
        }
    }
    out
}

fn add_bias(x: &mut [f64], b: &[f64]) {
    let cols = b.len();
    for row in x.chunks_exact_mut(cols) {
        for (v, &bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
}

fn softmax_rows(x: &mut [f64], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn layernorm_rows(x: &[f64], gamma: &[f64], beta: &[f64], cols: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..cols {
            orow[j] = (row[j] - mean) * inv * gamma[j] + beta[j];
        }
    }
    out
}

fn param(model: &CcaModel, name: &str) -> Vec<f64> {
    model
        .store
        .get(model.store.id_of(name).unwrap())
        .tensor
        .data()
        .to_vec()
}

fn one_head_config(embed_type: EmbedType) -> EncoderConfig {
    EncoderConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        depth: 2,
        dim: 4,
        heads: 1,
        ffn_hidden: 8,
        num_conditions: 2,
        out_dim: 4,
        embed_type,
        precision: Precision::F64,
    }
}

fn random_rows(seed: u64, rows: usize, cols: usize) -> Vec<f64> {
    let mut r = sub_rng(seed, Domain::Aux, 50);
    (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()
}

#[test]
fn single_head_attention_matches_straight_line_reference() {
    let model = CcaModel::init(
        one_head_config(EmbedType::Type2),
        &mut sub_rng(3, Domain::Init, 0),
    )
    .unwrap();
    let d = 4;
    let x = random_rows(1, 3, d);

    let mut f = model.begin();
    let x_id = f.tape.constant(vec![3, d], x.clone()).unwrap();
    let msa = model.msa_forward(&mut f, 0, x_id).unwrap();
    let got = f.tape.data(msa.out).to_vec();
    let got_attn = f.tape.data(msa.attn[0]).to_vec();

    // reference: q = xWq + bq, k, v likewise; softmax(q kᵀ / sqrt(d)) v, out proj
    let p = "backbone.layer0.attn";
    let mut q = mat_vecmul(&x, &param(&model, &format!("{p}.wq")), 3, d, d);
    add_bias(&mut q, &param(&model, &format!("{p}.bq")));
    let mut k = mat_vecmul(&x, &param(&model, &format!("{p}.wk")), 3, d, d);
    add_bias(&mut k, &param(&model, &format!("{p}.bk")));
    let mut v = mat_vecmul(&x, &param(&model, &format!("{p}.wv")), 3, d, d);
    add_bias(&mut v, &param(&model, &format!("{p}.bv")));

    let scale = 1.0 / (d as f64).sqrt();
    let mut logits = vec![0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            let mut s = 0.0;
            for c in 0..d {
                s += q[i * d + c] * k[j * d + c];
            }
            logits[i * 3 + j] = s * scale;
        }
    }
    softmax_rows(&mut logits, 3);
    let attended = mat_vecmul(&logits, &v, 3, 3, d);
    let mut expected = mat_vecmul(&attended, &param(&model, &format!("{p}.wo")), 3, d, d);
    add_bias(&mut expected, &param(&model, &format!("{p}.bo")));

    for (g, e) in got_attn.iter().zip(&logits) {
        assert!((g - e).abs() < 1e-12);
    }
    for (g, e) in got.iter().zip(&expected) {
        assert!((g - e).abs() < 1e-12, "{g} vs {e}");
    }
}

#[test]
fn cross_attention_matches_straight_line_reference() {
    let model = CcaModel::init(
        one_head_config(EmbedType::Type2),
        &mut sub_rng(4, Domain::Init, 0),
    )
    .unwrap();
    let d = 4;
    let tokens = random_rows(2, 3, d);

    let mut f = model.begin();
    let tok_id = f.tape.constant(vec![3, d], tokens.clone()).unwrap();
    let q_id = model.condition_query(&mut f, ConditionId(1)).unwrap();
    let q_c = f.tape.data(q_id).to_vec();
    let cca = model.cca_layer(&mut f, q_id, tok_id).unwrap();
    let got_out = f.tape.data(cca.out).to_vec();
    let got_attn = f.tape.data(cca.attn[0]).to_vec();

    // reference for the condition query: relu(mask[1,:]) through the fc
    let mask = param(&model, "cond.mask");
    let relu_row: Vec<f64> = mask[d..2 * d].iter().map(|&v| v.max(0.0)).collect();
    let mut q_ref = mat_vecmul(&relu_row, &param(&model, "cond.fc.weight"), 1, d, d);
    add_bias(&mut q_ref, &param(&model, "cond.fc.bias"));
    for (g, e) in q_c.iter().zip(&q_ref) {
        assert!((g - e).abs() < 1e-12);
    }

    // keys/values from the normalized tokens, query from q_c
    let kv = layernorm_rows(
        &tokens,
        &param(&model, "head.ln_kv.gamma"),
        &param(&model, "head.ln_kv.beta"),
        d,
        1e-5,
    );
    let mut q = mat_vecmul(&q_ref, &param(&model, "head.attn.wq"), 1, d, d);
    add_bias(&mut q, &param(&model, "head.attn.bq"));
    let mut k = mat_vecmul(&kv, &param(&model, "head.attn.wk"), 3, d, d);
    add_bias(&mut k, &param(&model, "head.attn.bk"));
    let mut v = mat_vecmul(&kv, &param(&model, "head.attn.wv"), 3, d, d);
    add_bias(&mut v, &param(&model, "head.attn.bv"));

    let scale = 1.0 / (d as f64).sqrt();
    let mut logits = vec![0.0; 3];
    for j in 0..3 {
        let mut s = 0.0;
        for c in 0..d {
            s += q[c] * k[j * d + c];
        }
        logits[j] = s * scale;
    }
    softmax_rows(&mut logits, 3);
    for (g, e) in got_attn.iter().zip(&logits) {
        assert!((g - e).abs() < 1e-12);
    }

    let attended = mat_vecmul(&logits, &v, 1, 3, d);
    let mut proj = mat_vecmul(&attended, &param(&model, "head.attn.wo"), 1, d, d);
    add_bias(&mut proj, &param(&model, "head.attn.bo"));
    // residual on the query side, then the ffn block
    let x1: Vec<f64> = q_ref.iter().zip(&proj).map(|(a, b)| a + b).collect();
    let normed = layernorm_rows(
        &x1,
        &param(&model, "head.ln2.gamma"),
        &param(&model, "head.ln2.beta"),
        d,
        1e-5,
    );
    let mut hidden = mat_vecmul(&normed, &param(&model, "head.ffn.w1"), 1, d, 8);
    add_bias(&mut hidden, &param(&model, "head.ffn.b1"));
    let act: Vec<f64> = hidden
        .iter()
        .map(|&x| 0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh()))
        .collect();
    let mut ffn = mat_vecmul(&act, &param(&model, "head.ffn.w2"), 1, 8, d);
    add_bias(&mut ffn, &param(&model, "head.ffn.b2"));
    let expected: Vec<f64> = x1.iter().zip(&ffn).map(|(a, b)| a + b).collect();

    for (g, e) in got_out.iter().zip(&expected) {
        assert!((g - e).abs() < 1e-12, "{g} vs {e}");
    }
}

#[test]
fn tiled_queries_produce_identical_rows_and_t_independent_embeddings() {
    let model = CcaModel::init(
        EncoderConfig::tiny(EmbedType::Type2),
        &mut sub_rng(5, Domain::Init, 0),
    )
    .unwrap();
    let image = {
        let data = random_rows(6, 3, 64);
        Tensor::new(vec![3, 8, 8], data[..192].to_vec()).unwrap()
    };
    let mut reference: Option<Vec<f64>> = None;
    for t in [1usize, 2, 4, 8] {
        let mut f = model.begin();
        let bb = model.backbone_forward(&mut f, &image).unwrap();
        let q = model.condition_query(&mut f, ConditionId(0)).unwrap();
        let tiled = tile_query(&mut f.tape, q, t).unwrap();
        let cca = model.cca_layer(&mut f, tiled, bb.tokens).unwrap();
        let out = f.tape.data(cca.out);
        let d = model.config.dim;
        for row in 1..t {
            for j in 0..d {
                assert!(
                    (out[row * d + j] - out[j]).abs() <= 1e-12,
                    "t={t} row {row} differs"
                );
            }
        }
        let emb = model.final_embedding(&mut f, cca.out).unwrap();
        let emb = f.tape.data(emb).to_vec();
        match &reference {
            None => reference = Some(emb),
            Some(r) => assert_eq!(r, &emb, "t={t} embedding differs bitwise"),
        }
    }
}

#[test]
fn msa_is_permutation_equivariant() {
    let model = CcaModel::init(
        EncoderConfig::tiny(EmbedType::Type2),
        &mut sub_rng(7, Domain::Init, 0),
    )
    .unwrap();
    let rows = 5;
    let d = 8;
    let x = random_rows(8, rows, d);
    let perm = [3usize, 0, 4, 1, 2];
    let permuted: Vec<f64> = perm
        .iter()
        .flat_map(|&src| x[src * d..(src + 1) * d].to_vec())
        .collect();

    let mut f1 = model.begin();
    let x1 = f1.tape.constant(vec![rows, d], x).unwrap();
    let out1 = model.msa_forward(&mut f1, 0, x1).unwrap();
    let base = f1.tape.data(out1.out);

    let mut f2 = model.begin();
    let x2 = f2.tape.constant(vec![rows, d], permuted).unwrap();
    let out2 = model.msa_forward(&mut f2, 0, x2).unwrap();
    let shuffled = f2.tape.data(out2.out);

    for (i, &src) in perm.iter().enumerate() {
        for j in 0..d {
            assert!(
                (shuffled[i * d + j] - base[src * d + j]).abs() < 1e-9,
                "row {i} col {j}"
            );
        }
    }
}

#[test]
fn type2_gradients_reach_only_the_used_mask_row() {
    let model = CcaModel::init(
        EncoderConfig::tiny(EmbedType::Type2),
        &mut sub_rng(9, Domain::Init, 0),
    )
    .unwrap();
    let image = Tensor::new(vec![3, 8, 8], random_rows(10, 3, 64)[..192].to_vec()).unwrap();
    let mut f = model.begin();
    let out = model.embed_with_condition(&mut f, &image, ConditionId(0), 1).unwrap();
    let loss = f.tape.sum_all(out.embedding).unwrap();
    f.tape.backward(loss).unwrap();
    let grads = f.collect_grads(&model);
    let mask_id = model.store.id_of("cond.mask").unwrap();
    let g = grads.get(mask_id).unwrap();
    let d = model.config.dim;
    assert!(g[..d].iter().any(|&x| x != 0.0), "used row must receive gradient");
    assert!(g[d..].iter().all(|&x| x == 0.0), "unused rows must stay exactly zero");
}

#[test]
fn type1_gradients_reach_only_the_selected_weight_row() {
    let model = CcaModel::init(
        EncoderConfig::tiny(EmbedType::Type1),
        &mut sub_rng(11, Domain::Init, 0),
    )
    .unwrap();
    let image = Tensor::new(vec![3, 8, 8], random_rows(12, 3, 64)[..192].to_vec()).unwrap();
    let mut f = model.begin();
    let out = model.embed_with_condition(&mut f, &image, ConditionId(1), 1).unwrap();
    let loss = f.tape.sum_all(out.embedding).unwrap();
    f.tape.backward(loss).unwrap();
    let grads = f.collect_grads(&model);
    let w_id = model.store.id_of("cond.fc.weight").unwrap();
    let g = grads.get(w_id).unwrap();
    let d = model.config.dim;
    assert!(g[..d].iter().all(|&x| x == 0.0), "row 0 unused, must be zero");
    assert!(g[d..].iter().any(|&x| x != 0.0), "row 1 must receive gradient");
}

#[test]
fn triplet_loss_is_rotation_invariant() {
    let mut r = sub_rng(13, Domain::Aux, 60);
    // random orthogonal matrix by Gram-Schmidt
    let d = 4;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let n = l2_norm(&v);
        if n > 1e-3 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let rotate = |v: &[f64]| -> Vec<f64> {
        basis.iter().map(|b| b.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
    };
    let unit = |v: Vec<f64>| -> Vec<f64> {
        let n = l2_norm(&v);
        v.into_iter().map(|x| x / n).collect()
    };

    for _ in 0..20 {
        let a = unit((0..d).map(|_| r.gen_range(-1.0..1.0)).collect());
        let p = unit((0..d).map(|_| r.gen_range(-1.0..1.0)).collect());
        let n = unit((0..d).map(|_| r.gen_range(-1.0..1.0)).collect());

        let eval = |a: &[f64], p: &[f64], n: &[f64]| -> f64 {
            let mut tape = Tape::new(Precision::F64);
            let ai = tape.constant(vec![1, d], a.to_vec()).unwrap();
            let pi = tape.constant(vec![1, d], p.to_vec()).unwrap();
            let ni = tape.constant(vec![1, d], n.to_vec()).unwrap();
            let l = triplet_loss(&mut tape, ai, pi, ni, 0.2).unwrap();
            tape.data(l)[0]
        };
        let plain = eval(&a, &p, &n);
        let rotated = eval(&rotate(&a), &rotate(&p), &rotate(&n));
        assert!((plain - rotated).abs() < 1e-9, "{plain} vs {rotated}");
    }
}
