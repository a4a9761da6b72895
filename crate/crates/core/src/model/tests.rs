use rand::{Rng as _, SeedableRng};

use super::*;
use crate::entity_pool::{EntityKind, EntityPool};
use crate::masking::{corrupt, MaskLevel, MaskSpan};
use crate::positions::{assign_positions, PositionedExample};
use crate::seed::Rng;
use crate::vocab::{TokenId, END, START};

fn config(v: usize, d: usize, layers: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: v,
        d_model: d,
        n_layers: layers,
        n_heads: heads,
        ffn_mult: 2,
        max_len: 24,
        ..ModelConfig::default()
    }
}

fn pool() -> EntityPool {
    let mut p = EntityPool::new();
    p.register(&[7, 8, 9], "e1", EntityKind::Item).unwrap();
    p.register(&[10, 8], "e2", EntityKind::Item).unwrap();
    p
}

fn example(id: &str, tokens: &[TokenId], spans: &[(usize, usize)]) -> PositionedExample {
    let spans: Vec<MaskSpan> = spans
        .iter()
        .map(|&(start, len)| MaskSpan { start, len, level: MaskLevel::Entity })
        .collect();
    let ex = corrupt(id, tokens, &spans, MaskLevel::Entity).unwrap();
    assign_positions(&ex, &pool(), 24).unwrap()
}

fn batch() -> Vec<PositionedExample> {
    vec![
        example("a", &[7, 8, 9, 1, 10, 8, 9], &[(0, 3), (4, 2)]),
        example("b", &[9, 10, 8, 7, 8, 9], &[(1, 2)]),
    ]
}

/// Random perturbation of every tensor so that no gradient is trivially zero.
fn jitter<T: Scalar>(p: &mut ModelParams<T>, seed: u64, amount: f64) {
    let mut rng = Rng::seed_from_u64(seed);
    for (_, _, t) in p.entries_mut() {
        for x in &mut t.data {
            *x = T::of(x.f64() + amount * (rng.random::<f64>() - 0.5));
        }
    }
}

fn lora() -> LoraConfig {
    LoraConfig { rank: 2, alpha: 4.0 }
}

#[test]
fn finite_differences_agree_on_every_parameter_class() {
    let mut p = init_model::<f64>(&config(11, 8, 1, 2)).unwrap();
    p.attach_lora(lora()).unwrap();
    jitter(&mut p, 3, 0.4);
    let batch = batch();
    let (_, grads) = batch_gradients(&p, &batch, &Trainable::full(), None).unwrap();

    let used_tokens: Vec<usize> = batch.iter().flat_map(|e| e.tokens.iter().map(|&t| t as usize)).collect();
    let used_inter: Vec<usize> = batch.iter().flat_map(|e| e.inter.iter().map(|&t| t as usize)).collect();
    let used_intra: Vec<usize> = batch.iter().flat_map(|e| e.intra.iter().map(|&t| t as usize)).collect();
    let mut rng = Rng::seed_from_u64(11);
    let names: Vec<(String, ParamClass)> = p.entries().into_iter().map(|(n, c, _)| (n, c)).collect();
    let mut checked = 0;
    let mut worst = 0.0f64;
    let h = 1e-5;
    for (ti, (name, class)) in names.iter().enumerate() {
        let t = &p.entries()[ti].2.clone();
        let d = p.config.d_model;
        let coords: Vec<usize> = (0..12)
            .map(|_| {
                let row_pick = |rows: &[usize], rng: &mut Rng| rows[rng.random_range(0..rows.len())] * d + rng.random_range(0..d);
                match class {
                    ParamClass::TokenEmbedding => row_pick(&used_tokens, &mut rng),
                    ParamClass::InterPosition => row_pick(&used_inter, &mut rng),
                    ParamClass::IntraPosition => row_pick(&used_intra, &mut rng),
                    _ => rng.random_range(0..t.len()),
                }
            })
            .collect();
        for c in coords {
            let mut plus = p.clone();
            plus.entries_mut()[ti].2.data[c] += h;
            let mut minus = p.clone();
            minus.entries_mut()[ti].2.data[c] -= h;
            let num = (batch_loss(&plus, &batch).unwrap() - batch_loss(&minus, &batch).unwrap()) / (2.0 * h);
            let ana = grads.entries()[ti].2.data[c];
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
            assert!(rel < 1e-4, "{name}[{c}]: analytic {ana:e} numeric {num:e}");
            worst = worst.max(rel);
            checked += 1;
        }
    }
    assert!(checked >= 200, "{checked}");
    assert!(names.iter().any(|(_, c)| matches!(c, ParamClass::LoraA(_))));
    assert!(worst < 1e-4);
}

#[test]
fn unused_embedding_rows_get_no_gradient() {
    let p = init_model::<f64>(&config(11, 8, 1, 2)).unwrap();
    let batch = batch();
    let (_, g) = batch_gradients(&p, &batch, &Trainable::full(), None).unwrap();
    // token rows all receive the softmax term of the tied head, so check position rows
    let used: Vec<u32> = batch.iter().flat_map(|e| e.inter.clone()).collect();
    let unused = (0..25u32).find(|i| !used.contains(i)).unwrap();
    assert!(g.inter_embeddings.row(unused as usize).iter().all(|&x| x == 0.0));
    let used_intra: Vec<u32> = batch.iter().flat_map(|e| e.intra.clone()).collect();
    let unused_intra = (0..66u32).find(|i| !used_intra.contains(i)).unwrap();
    assert!(g.intra_embeddings.row(unused_intra as usize).iter().all(|&x| x == 0.0));
}

#[test]
fn zero_weights_give_uniform_loss() {
    let cfg = config(11, 8, 2, 2);
    let mut p = init_model::<f64>(&cfg).unwrap();
    for (_, class, t) in p.entries_mut() {
        if !matches!(class, ParamClass::TokenEmbedding | ParamClass::LayerNorm) {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    // the final norm gain at zero makes every logit 0
    p.final_norm.gain.data.iter_mut().for_each(|x| *x = 0.0);
    let loss = batch_loss(&p, &batch()).unwrap();
    assert!((loss - 11f64.ln()).abs() < 1e-12);
}

#[test]
fn loss_matches_scalar_cross_entropy() {
    // V = 5, two spans: targets (2, 4, [E]=6 is out of range here so use 0..5)
    let logits: Vec<f64> = vec![
        0.3, -1.2, 2.0, 0.0, 0.5, //
        1.0, 1.0, 1.0, 1.0, 1.0, //
        -0.5, 0.25, 0.0, 3.0, -2.0,
    ];
    let targets = [2u32, 0, 3];
    let mut want = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * 5..(r + 1) * 5];
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        want += -(row[t as usize].exp() / z).ln();
    }
    want /= 3.0;
    assert!((infill_loss(&logits, &targets, 5).unwrap() - want).abs() < 1e-12);
    assert!((infill_loss(&[0.0f64; 4], &[1], 4).unwrap() - 4f64.ln()).abs() < 1e-12);
    assert!(matches!(infill_loss::<f64>(&[], &[], 4), Err(crate::Error::EmptySpansBatch)));
}

#[test]
fn part_a_never_sees_part_b() {
    let p = init_model::<f64>(&config(11, 8, 2, 2)).unwrap();
    let ex = example("v", &[7, 8, 9, 4, 10, 8], &[(0, 3), (4, 2)]);
    let base = logits_all(&p, &ex).unwrap();
    let v = 11;
    for j in 0..ex.len() {
        let mut edited = ex.clone();
        edited.tokens[j] = if edited.tokens[j] == 3 { 4 } else { 3 };
        let out = logits_all(&p, &edited).unwrap();
        for i in 0..ex.len() {
            let changed = (0..v).any(|c| base[i * v + c] != out[i * v + c]);
            if changed {
                assert!(ex.sees(i, j), "row {i} changed after editing column {j}");
            }
        }
    }
}

#[test]
fn batch_order_does_not_matter() {
    let mut p = init_model::<f32>(&config(11, 8, 1, 2)).unwrap();
    jitter(&mut p, 5, 0.1);
    let mut b = batch();
    let single: Vec<Vec<f32>> = b.iter().map(|e| logits_all(&p, e).unwrap()).collect();
    let l1 = batch_loss(&p, &b).unwrap();
    b.reverse();
    let l2 = batch_loss(&p, &b).unwrap();
    assert!((l1 - l2).abs() < 1e-12);
    assert_eq!(logits_all(&p, &b[1]).unwrap(), single[0]);
}

#[test]
fn attaching_lora_is_a_no_op() {
    let mut p = init_model::<f32>(&config(11, 8, 2, 2)).unwrap();
    jitter(&mut p, 1, 0.2);
    let ex = &batch()[0];
    let before = logits_all(&p, ex).unwrap();
    p.attach_lora(lora()).unwrap();
    let after = logits_all(&p, ex).unwrap();
    assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn lora_only_training_leaves_base_untouched_and_merges() {
    let mut p = init_model::<f32>(&config(11, 8, 2, 2)).unwrap();
    p.attach_lora(lora()).unwrap();
    let batch = batch();
    let trainable = Trainable::lora_only();
    let (_, g) = batch_gradients(&p, &batch, &trainable, None).unwrap();
    for (name, class, t) in g.entries() {
        if matches!(class, ParamClass::Projection(_) | ParamClass::LayerNorm | ParamClass::TokenEmbedding) {
            assert!(t.data.iter().all(|&x| x == 0.0), "{name}");
        }
    }
    let base_layers = p.layers.iter().map(|l| l.qkv.weight.clone()).collect::<Vec<_>>();
    let mut opt = AdamW::new(
        &p,
        &trainable,
        AdamWConfig { peak_lr: 1e-2, warmup_steps: 1, ..AdamWConfig::default() },
    );
    for _ in 0..10 {
        let (_, g) = batch_gradients(&p, &batch, &trainable, None).unwrap();
        opt.step(&mut p, &g).unwrap();
    }
    for (l, w) in p.layers.iter().zip(&base_layers) {
        assert_eq!(&l.qkv.weight, w);
        assert!(l.qkv.lora.as_ref().unwrap().b.data.iter().any(|&x| x != 0.0));
    }
    let adapted = logits_all(&p, &batch[0]).unwrap();
    let mut merged = p.clone();
    merged.merge_lora();
    assert!(merged.lora.is_none());
    assert!(merged.layers.iter().all(|l| l.qkv.lora.is_none()));
    let out = logits_all(&merged, &batch[0]).unwrap();
    let max_abs = adapted.iter().map(|x| x.abs()).fold(0.0f32, f32::max);
    let diff = adapted.iter().zip(&out).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(diff <= 1e-6 * max_abs.max(1.0), "{diff}");
}

#[test]
fn session_matches_full_forward() {
    let mut p = init_model::<f64>(&config(11, 8, 2, 2)).unwrap();
    p.attach_lora(lora()).unwrap();
    jitter(&mut p, 9, 0.3);
    let ex = &batch()[0];
    let full = logits_all(&p, ex).unwrap();
    let pa = ex.part_a_len;
    let mut s = Session::new(&p);
    let h = s.extend(&p, &ex.tokens[..pa], &ex.inter[..pa], &ex.intra[..pa], true).unwrap();
    let rows: Vec<usize> = (0..pa).collect();
    let part_a = project(&p, &h, &rows);
    let v = 11;
    for (a, b) in part_a.iter().zip(&full[..pa * v]) {
        assert!((a - b).abs() < 1e-12);
    }
    for i in pa..ex.len() {
        let row = s.push(&p, ex.tokens[i], ex.inter[i], ex.intra[i]).unwrap();
        for (a, b) in row.iter().zip(&full[i * v..(i + 1) * v]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn tiny_corpus_loss_falls() {
    let mut p = init_model::<f32>(&config(11, 16, 1, 2)).unwrap();
    let batch = batch();
    let trainable = Trainable::full();
    let mut opt = AdamW::new(
        &p,
        &trainable,
        AdamWConfig { peak_lr: 3e-3, warmup_steps: 10, ..AdamWConfig::default() },
    );
    let first = batch_loss(&p, &batch).unwrap();
    for _ in 0..200 {
        let (_, g) = batch_gradients(&p, &batch, &trainable, None).unwrap();
        opt.step(&mut p, &g).unwrap();
    }
    let last = batch_loss(&p, &batch).unwrap();
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn dropout_is_seeded() {
    let mut cfg = config(11, 8, 1, 2);
    cfg.dropout = 0.3;
    let p = init_model::<f32>(&cfg).unwrap();
    let b = batch();
    let run = |seed| batch_gradients(&p, &b, &Trainable::full(), Some(&mut Rng::seed_from_u64(seed))).unwrap().0;
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
    let clean = batch_gradients(&p, &b, &Trainable::full(), None).unwrap().0;
    assert_ne!(run(1), clean);
}

#[test]
fn targets_are_span_tokens_then_end() {
    let ex = &batch()[1];
    let t: Vec<TokenId> = ex.targets.iter().flatten().copied().collect();
    assert_eq!(t, vec![10, 8, END]);
    assert_eq!(ex.tokens[ex.part_a_len], START);
}
