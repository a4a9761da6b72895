//! Invariants of the data path, masking, positions, decoding and metrics.

mod common;

use common::*;
use entity_infill::decode::{feasible_tokens, infill, teacher_force, Constraint, DecodeConfig, DecodeState, next_intra};
use entity_infill::entity_pool::{EntityPool, Unit};
use entity_infill::masking::{
    check_mix, corrupt, sample_document_span, sample_entity_spans, sample_sentence_spans, MaskLevel, MaskSpan,
};
use entity_infill::metrics::{hr_at_k, mae, ndcg_at_k, rmse, RankingCase};
use entity_infill::model::{forward, Scalar};
use entity_infill::positions::{assign_positions, span_intra};
use entity_infill::vocab::{Vocabulary, END, MASK, NUM_SPECIAL, START};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn span_starts_ok(pool: &EntityPool, tokens: &[u32], spans: &[MaskSpan]) -> bool {
    let units = pool.segment(tokens);
    let starts: Vec<usize> = units.iter().map(Unit::start).chain(std::iter::once(tokens.len())).collect();
    spans.iter().all(|s| starts.contains(&s.start) && starts.contains(&s.end()))
}

fn draw_spans(level: MaskLevel, tokens: &[u32], pool: &EntityPool, r: &mut ChaCha8Rng) -> Vec<MaskSpan> {
    let terminators = [FILLER_TOKENS.start];
    match level {
        MaskLevel::Entity => sample_entity_spans(tokens, pool, 0.3, 2.0, r),
        MaskLevel::Sentence => sample_sentence_spans(tokens, pool, &terminators, 0.3, r),
        MaskLevel::Document => sample_document_span(tokens, pool, r),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn vocab_roundtrip(words in prop::collection::vec("[a-z]{1,6}", 1..20)) {
        let text = words.join(" ");
        let vocab = Vocabulary::build([text.clone()], 1).unwrap();
        let ids = vocab.encode(&text).unwrap();
        prop_assert!(ids.iter().all(|&i| i as usize >= NUM_SPECIAL));
        prop_assert_eq!(vocab.decode(&ids).unwrap(), text);
    }

    #[test]
    fn segmentation_is_lossless(seed in any::<u64>(), len in 1usize..40) {
        let mut r = rng(seed);
        let pool = random_pool(&mut r, 12, 4);
        let tokens = random_tokens(&mut r, len);
        let units = pool.segment(&tokens);
        let mut pos = 0;
        for u in &units {
            prop_assert_eq!(u.start(), pos);
            if let Unit::Entity { id, start, len } = *u {
                prop_assert_eq!(pool.lookup(&tokens[start..start + len]), Some(id));
            }
            pos = u.end();
        }
        prop_assert_eq!(pos, tokens.len());
    }

    #[test]
    fn step_replay_matches_segmentation_when_entities_are_separated(seed in any::<u64>(), units in 1usize..12) {
        let mut r = rng(seed);
        let pool = random_pool(&mut r, 10, 4);
        let doc = random_doc(&mut r, &pool, units, true);
        let replay = span_intra(&doc, &pool);
        // the first span token counts from the [S] row; later entities restart at 1
        let mut expected = vec![1u32];
        for u in pool.segment(&doc) {
            let base = u32::from(u.start() == 0);
            expected.extend((0..u.len() as u32).map(|k| k + 1 + base));
        }
        prop_assert_eq!(replay, expected);
    }

    #[test]
    fn masking_keeps_entities_whole_and_reconstructs(seed in any::<u64>(), units in 1usize..25, level in 0usize..3) {
        let mut r = rng(seed);
        let pool = random_pool(&mut r, 10, 4);
        let doc = random_doc(&mut r, &pool, units, false);
        let level = MaskLevel::ALL[level];
        let spans = draw_spans(level, &doc, &pool, &mut r);
        prop_assert!(span_starts_ok(&pool, &doc, &spans));
        prop_assert!(spans.windows(2).all(|w| w[0].end() <= w[1].start));
        let ex = corrupt("p", &doc, &spans, level).unwrap();
        prop_assert_eq!(ex.reconstruct(), doc.clone());
        prop_assert!(ex.spans.windows(2).all(|w| w[0].mask_pos < w[1].mask_pos));
        for s in &ex.spans {
            prop_assert_eq!(ex.part_a[s.mask_pos], level.mask_token());
        }
        let masked: usize = spans.iter().map(|s| s.len).sum();
        prop_assert_eq!(ex.part_a.len(), doc.len() - masked + spans.len());
    }

    #[test]
    fn positions_follow_part_structure(seed in any::<u64>(), units in 1usize..20) {
        let mut r = rng(seed);
        let pool = random_pool(&mut r, 10, 4);
        let doc = random_doc(&mut r, &pool, units, true);
        let spans = sample_entity_spans(&doc, &pool, 0.3, 2.0, &mut r);
        let ex = corrupt("p", &doc, &spans, MaskLevel::Entity).unwrap();
        let p = assign_positions(&ex, &pool, 4096).unwrap();
        let pa = p.part_a_len;
        prop_assert_eq!(&p.inter[..pa], &(1..=pa as u32).collect::<Vec<_>>()[..]);
        let part_a_units = pool.segment(&ex.part_a);
        for u in &part_a_units {
            match *u {
                Unit::Single(i) => prop_assert_eq!(p.intra[i], 0),
                Unit::Entity { start, len, .. } => {
                    for k in 0..len { prop_assert_eq!(p.intra[start + k], k as u32 + 1); }
                }
            }
        }
        for (s, range) in ex.spans.iter().zip(&p.spans) {
            prop_assert_eq!(p.tokens[range.start], START);
            prop_assert!(p.inter[range.clone()].iter().all(|&x| x == s.mask_pos as u32 + 1));
            prop_assert!(p.intra[range.clone()].iter().all(|&x| x >= 1));
            prop_assert_eq!(p.targets[range.end - 1], Some(END));
        }
        prop_assert!(p.targets[..pa].iter().all(Option::is_none));
        prop_assert!(p.targets[pa..].iter().all(Option::is_some));
        for i in 0..p.len() {
            for j in 0..p.len() {
                prop_assert_eq!(p.sees(i, j), j < pa || j <= i);
            }
        }
        // no Part A row sees Part B
        prop_assert!((0..pa).all(|i| (pa..p.len()).all(|j| !p.sees(i, j))));
    }

    #[test]
    fn teacher_forcing_replays_training_positions(seed in any::<u64>(), units in 1usize..10) {
        let mut r = rng(seed);
        let pool = random_pool(&mut r, 8, 3);
        let doc = random_doc(&mut r, &pool, units, true);
        let spans = sample_entity_spans(&doc, &pool, 0.3, 2.0, &mut r);
        let ex = corrupt("p", &doc, &spans, MaskLevel::Entity).unwrap();
        let pos = assign_positions(&ex, &pool, 128).unwrap();
        let model = tiny_model(seed);
        let forced: Vec<Vec<u32>> = ex.spans.iter().map(|s| s.tokens.clone()).collect();
        let out = teacher_force(&model, &ex.part_a, &forced, &pool).unwrap();
        let inter: Vec<u32> = out.slots.iter().flat_map(|s| s.inter.clone()).collect();
        let intra: Vec<u32> = out.slots.iter().flat_map(|s| s.intra.clone()).collect();
        prop_assert_eq!(&inter[..], &pos.inter[pos.part_a_len..]);
        prop_assert_eq!(&intra[..], &pos.intra[pos.part_a_len..]);
    }

    #[test]
    fn catalog_decoding_only_emits_catalog_entities(seed in any::<u64>()) {
        let mut r = rng(seed);
        let pool = random_pool(&mut r, 8, 3);
        let model = tiny_model(seed ^ 7);
        let prompt = vec![FILLER_TOKENS.start, MASK, FILLER_TOKENS.start + 1];
        for constraint in [Constraint::Catalog, Constraint::SingleEntity] {
            let cfg = DecodeConfig { max_steps: 12, constraint, top_k: None };
            let out = infill(&model, &prompt, &pool, &cfg, None).unwrap();
            let slot = &out.slots[0];
            if slot.truncated {
                continue;
            }
            let segs = pool.segment(slot.text_tokens());
            prop_assert!(!segs.is_empty());
            if constraint == Constraint::SingleEntity {
                prop_assert!(pool.lookup(slot.text_tokens()).is_some());
            }
            // the greedy walk must parse as whole entities when replayed through the Trie
            let mut state = DecodeState::new();
            for &t in slot.text_tokens() {
                prop_assert!(feasible_tokens(&state, &pool, constraint, VOCAB_SIZE).contains(&t));
                next_intra(&mut state, t, &pool);
            }
            prop_assert!(feasible_tokens(&state, &pool, constraint, VOCAB_SIZE).contains(&END));
        }
    }

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), units in 1usize..10) {
        let mut r = rng(seed);
        let pool = random_pool(&mut r, 8, 3);
        let doc = random_doc(&mut r, &pool, units, false);
        let spans = sample_document_span(&doc, &pool, &mut r);
        let ex = corrupt("p", &doc, &spans, MaskLevel::Document).unwrap();
        let pos = assign_positions(&ex, &pool, 128).unwrap();
        let model = tiny_model(seed);
        let fwd = forward(&model, &pos, None).unwrap();
        let n = pos.len();
        let probs = fwd.attention_probs(0);
        for h in 0..model.config.n_heads {
            for i in 0..n {
                let row = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                let sum: f64 = row.iter().map(|x| x.f64()).sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                for j in 0..n {
                    if !pos.sees(i, j) { prop_assert_eq!(row[j].f64(), 0.0); }
                }
            }
        }
    }

    #[test]
    fn ranking_metrics_are_bounded_and_monotone(ranks in prop::collection::vec(0usize..15, 1..30)) {
        let cases: Vec<RankingCase<usize>> = ranks.iter().map(|&r| {
            let mut ranked: Vec<usize> = (100..112).collect();
            if r < 12 { ranked[r] = 7; }
            RankingCase { ranked, truth: 7 }
        }).collect();
        let mut prev_hr = 0.0;
        let mut prev_ndcg = 0.0;
        for k in 1..=12 {
            let hr = hr_at_k(&cases, k).unwrap();
            let nd = ndcg_at_k(&cases, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&hr) && (0.0..=1.0).contains(&nd));
            prop_assert!(hr >= prev_hr && nd >= prev_ndcg - 1e-15);
            prop_assert!(nd <= hr + 1e-15);
            prev_hr = hr;
            prev_ndcg = nd;
        }
        let mut reversed = cases.clone();
        reversed.reverse();
        prop_assert_eq!(hr_at_k(&cases, 5).unwrap(), hr_at_k(&reversed, 5).unwrap());
        prop_assert!((ndcg_at_k(&cases, 5).unwrap() - ndcg_at_k(&reversed, 5).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rmse_dominates_mae(pairs in prop::collection::vec((1.0f64..5.0, 1.0f64..5.0), 1..40)) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (r, m) = (rmse(&p, &t).unwrap(), mae(&p, &t).unwrap());
        prop_assert!(r + 1e-12 >= m && m >= 0.0);
    }

    #[test]
    fn bad_mixes_are_rejected(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let c = 1.0 - a - b;
        let ok = check_mix(&[a, b, c], "m").is_ok();
        prop_assert_eq!(ok, c >= 0.0);
        prop_assert!(check_mix(&[a, b, c + 0.01], "m").is_err());
    }
}

#[test]
fn reserved_strings_never_encode() {
    let vocab = Vocabulary::build(["a b c"], 1).unwrap();
    assert!(vocab.encode("a [M] b").is_err());
    let mut r = rng(1);
    let text: Vec<&str> = (0..50).map(|_| ["a", "b", "c", "zzz"][r.random_range(0..4)]).collect();
    let ids = vocab.encode(&text.join(" ")).unwrap();
    assert!(ids.iter().all(|&i| i == 1 || i as usize >= NUM_SPECIAL));
}
