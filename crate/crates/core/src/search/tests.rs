use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::time::Duration;

use super::*;
use crate::hypothesis::Hypothesis;
use crate::attn::{DecoderModel, DecoderWeights, HParams, InterfaceConfig, PrefixAttention};
use crate::ctc::{forward_logprob, greedy_decode, topk_prune};
use crate::lm::{lm_logprob, retokenize, LanguageModel, TableLm};
use crate::logmath::log_normalize;
use crate::posteriorgram::Posteriorgram;
use crate::vocab::{TokenSpec, Vocabulary};

fn vocab(n: usize) -> Vocabulary {
    Vocabulary::with_specials(["a", "b", "c", "d"][..n].iter().map(|w| TokenSpec::word(*w)).collect()).unwrap()
}

fn random_pg(rng: &mut ChaCha8Rng, v: &Vocabulary, frames: usize) -> Posteriorgram {
    let rows: Vec<Vec<f64>> = (0..frames)
        .map(|_| {
            (0..v.len())
                .map(|i| if i == v.bos_id() || i == v.eos_id() { 0.0 } else { rng.random::<f64>() + 0.05 })
                .collect()
        })
        .collect();
    Posteriorgram::from_probs(&rows).unwrap()
}

fn random_dist(rng: &mut ChaCha8Rng, v: &Vocabulary) -> Vec<f64> {
    let mut d: Vec<f64> = (0..v.len()).map(|_| f64::NEG_INFINITY).collect();
    for o in v.outcome_ids() {
        d[o] = rng.random::<f64>() * 3.0;
    }
    log_normalize(&mut d);
    d
}

fn random_table(rng: &mut ChaCha8Rng, v: &Vocabulary) -> TableLm {
    let mut t = TableLm::new(v.clone(), random_dist(rng, v)).unwrap();
    for a in v.label_ids() {
        t.insert(vec![a], random_dist(rng, v)).unwrap();
        for b in v.label_ids() {
            if rng.random::<f64>() < 0.5 {
                t.insert(vec![a, b], random_dist(rng, v)).unwrap();
            }
        }
    }
    t
}

fn weights(pairs: &[(&str, f64)]) -> ScorerWeights {
    ScorerWeights::new(pairs.iter().map(|&(k, v)| (k, v))).unwrap()
}

fn best(d: &NBestList) -> (&[usize], f64) {
    let b = d.best().unwrap();
    (&b.labels, b.combined_score)
}

#[test]
fn beam_one_table_is_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = vocab(3);
    let table = random_table(&mut rng, &v);
    let handles = [ScorerHandle::lm("lm", ScorerKind::Table, &table, &v).unwrap()];
    let out = labelsync_beam(&handles, &weights(&[("lm", 1.0)]), &v, 1, 6).unwrap();
    let mut greedy = Vec::new();
    loop {
        let dist = table.next_log_probs(&greedy);
        let mut outcomes = v.outcome_ids();
        if greedy.len() == 6 {
            outcomes = vec![v.eos_id()];
        }
        let next = outcomes.into_iter().fold(None, |acc: Option<usize>, o| match acc {
            Some(a) if dist[a] >= dist[o] => Some(a),
            _ => Some(o),
        });
        greedy.push(next.unwrap());
        if next == Some(v.eos_id()) {
            break;
        }
    }
    assert_eq!(out.nbest.best().unwrap().labels, greedy);
    assert_eq!(out.stats.peak_live_hyps, 1);
}

#[test]
fn saturated_labelsync_matches_exhaustive() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..30 {
        let v = vocab(1 + case % 3);
        let frames = 1 + case % 4;
        let pg = random_pg(&mut rng, &v, frames);
        let table = random_table(&mut rng, &v);
        let w = weights(&[("ctc", 1.0), ("lm", 0.2 + rng.random::<f64>())]);
        let handles = [
            ScorerHandle::ctc("ctc", &pg, &v).unwrap(),
            ScorerHandle::lm("lm", ScorerKind::Table, &table, &v).unwrap(),
        ];
        let max_len = w.max_len(frames);
        let beam = labelsync_beam(&handles, &w, &v, 10_000, max_len).unwrap();
        let oracle = exhaustive_decode(&handles, &w, &v, max_len).unwrap();
        let (bl, bs) = best(&beam.nbest);
        let (ol, os) = best(&oracle);
        assert_eq!(bl, ol, "case {case}");
        assert!((bs - os).abs() < 1e-9);
        let h = beam.nbest.best().unwrap();
        assert!((h.score_components["ctc"] - forward_logprob(&pg, &bl[..bl.len() - 1], v.blank_id()).unwrap()).abs() < 1e-9);
    }
}

#[test]
fn saturated_timesync_matches_exhaustive() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..30 {
        let v = vocab(3);
        let pg = random_pg(&mut rng, &v, 3);
        let table = random_table(&mut rng, &v);
        let lam = if case % 3 == 0 { 0.0 } else { rng.random::<f64>() };
        let got = timesync_ctc_beam(&pg, &v, Some(&table), lam, 10_000).unwrap();
        let handles = [
            ScorerHandle::ctc("ctc", &pg, &v).unwrap(),
            ScorerHandle::lm("lm", ScorerKind::Table, &table, &v).unwrap(),
        ];
        let w = if lam == 0.0 { weights(&[("ctc", 1.0)]) } else { weights(&[("ctc", 1.0), ("lm", lam)]) };
        let oracle = exhaustive_decode(&handles, &w, &v, 3).unwrap();
        let (gl, gs) = best(&got.nbest);
        let (ol, os) = best(&oracle);
        assert_eq!(gl, ol, "case {case}");
        assert!((gs - os).abs() < 1e-9);
        // Every reached prefix carries its exact path sum.
        for h in got.nbest.iter() {
            let body = &h.labels[..h.labels.len() - 1];
            let exact = forward_logprob(&pg, body, v.blank_id()).unwrap();
            assert!((h.score_components["ctc"] - exact).abs() < 1e-9);
            assert!((h.score_components["lm"] - lm_logprob(&table, body)).abs() < 1e-9);
        }
    }
}

#[test]
fn zero_lm_weight_is_pure_ctc() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v = vocab(4);
    let pg = random_pg(&mut rng, &v, 6);
    let table = random_table(&mut rng, &v);
    let with = timesync_ctc_beam(&pg, &v, Some(&table), 0.0, 4).unwrap();
    let without = timesync_ctc_beam(&pg, &v, None, 0.0, 4).unwrap();
    let labels = |d: &Decoded| d.nbest.iter().map(|h| h.labels.clone()).collect::<Vec<_>>();
    assert_eq!(labels(&with), labels(&without));
    let delayed = delayed_fusion_beam(&pg, &v, &table, 0.0, 4).unwrap();
    assert_eq!(labels(&delayed), labels(&without));
}

#[test]
fn uniform_pg_ties_break_to_lowest_ids() {
    let v = vocab(3);
    let mut rows = vec![vec![1.0; v.len()]; 2];
    for r in rows.iter_mut() {
        r[v.bos_id()] = 0.0;
        r[v.eos_id()] = 0.0;
    }
    let pg = Posteriorgram::from_probs(&rows).unwrap();
    let a = timesync_ctc_beam(&pg, &v, None, 0.0, 3).unwrap();
    let b = timesync_ctc_beam(&pg, &v, None, 0.0, 3).unwrap();
    assert_eq!(a.nbest.hyps(), b.nbest.hyps());
    // Single-label prefixes all tie at 2 paths + ... ; the shortest, then lowest id, wins.
    let top = &a.nbest.hyps()[0].labels;
    assert_eq!(top.len(), 2);
    assert_eq!(top[0], v.id("a").unwrap());
}

fn piece_vocab() -> Vocabulary {
    Vocabulary::with_specials(vec![
        TokenSpec::word("ab"),
        TokenSpec::word("a"),
        TokenSpec::piece("b"),
        TokenSpec::piece("c"),
    ])
    .unwrap()
}

#[test]
fn delayed_fusion_matches_rescoring_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let am = piece_vocab();
    let lm_vocab = Vocabulary::from_words(&["a", "ab", "abc", "b", "c", "ac"]).unwrap();
    for _ in 0..20 {
        let pg = random_pg(&mut rng, &am, 5);
        let table = random_table(&mut rng, &lm_vocab);
        let lam = rng.random::<f64>() * 2.0;
        let out = delayed_fusion_beam(&pg, &am, &table, lam, 3).unwrap();
        for h in out.nbest.iter() {
            let body = h.transcript_labels(am.eos_id());
            let units = retokenize(&lm_vocab, &am.detokenize(body)).unwrap();
            let oracle = h.score_components["ctc"] + lam * lm_logprob(&table, &units);
            assert!((h.combined_score - oracle).abs() < 1e-9);
        }
    }
}

#[test]
fn single_word_is_scored_at_the_end() {
    let am = piece_vocab();
    let lm_vocab = Vocabulary::from_words(&["abc", "x"]).unwrap();
    let table = TableLm::uniform(lm_vocab.clone());
    // "a" "b" "c" spelled as one word: nothing is committed before the end.
    let (a, b, c) = (am.id("a").unwrap(), am.id("b").unwrap(), am.id("c").unwrap());
    let mut rows = Vec::new();
    for l in [a, b, c] {
        let mut r = vec![0.01; am.len()];
        r[am.bos_id()] = 0.0;
        r[am.eos_id()] = 0.0;
        r[l] = 1.0;
        rows.push(r);
    }
    let pg = Posteriorgram::from_probs(&rows).unwrap();
    let out = delayed_fusion_beam(&pg, &am, &table, 1.0, 4).unwrap();
    let h = out.nbest.best().unwrap();
    assert_eq!(h.transcript_labels(am.eos_id()), &[a, b, c]);
    // Uniform over 4 outcomes: one word plus EOS.
    assert!((h.score_components["lm"] - 2.0 * (0.25f64).ln()).abs() < 1e-12);
}

#[test]
fn rescoring() {
    let v = vocab(2);
    let (a, b, eos) = (v.id("a").unwrap(), v.id("b").unwrap(), v.eos_id());
    let mk = |labels: Vec<usize>, s: f64| Hypothesis {
        labels,
        score_components: Default::default(),
        combined_score: s,
        finished: true,
    };
    let nb = NBestList::from_unsorted(vec![mk(vec![a, eos], -1.0), mk(vec![b, b, eos], -1.5), mk(vec![b, eos], -1.5)]);
    let lm = TableLm::uniform(v.clone());
    let same = rescore_nbest(&nb, &lm, 0.0, 0.0).unwrap();
    let order = |l: &NBestList| l.iter().map(|h| h.labels.clone()).collect::<Vec<_>>();
    assert_eq!(order(&same), order(&nb));
    // A length reward of 1 lifts the two-label hypothesis over the others.
    let swapped = rescore_nbest(&nb, &lm, 0.0, 1.0).unwrap();
    assert_eq!(swapped.best().unwrap().labels, vec![b, b, eos]);
    assert!((swapped.best().unwrap().combined_score - 0.5).abs() < 1e-12);
    assert!(rescore_nbest(&NBestList::default(), &lm, 1.0, 0.0).is_err());
}

#[test]
fn exhaustive_rescoring_equals_single_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let v = vocab(3);
    let pg = random_pg(&mut rng, &v, 3);
    let table = random_table(&mut rng, &v);
    let ctc_only = [ScorerHandle::ctc("ctc", &pg, &v).unwrap()];
    let first = exhaustive_decode(&ctc_only, &weights(&[("ctc", 1.0)]), &v, 3).unwrap();
    let second = rescore_nbest(&first, &table, 0.7, 0.0).unwrap();
    let joint = [
        ScorerHandle::ctc("ctc", &pg, &v).unwrap(),
        ScorerHandle::lm("lm", ScorerKind::Table, &table, &v).unwrap(),
    ];
    let single = labelsync_beam(&joint, &weights(&[("ctc", 1.0), ("lm", 0.7)]), &v, 10_000, 3).unwrap();
    assert_eq!(second.best().unwrap().labels, single.nbest.best().unwrap().labels);
    assert!((second.best().unwrap().combined_score - single.nbest.best().unwrap().combined_score).abs() < 1e-9);
}

#[test]
fn exhaustive_edges() {
    let v = vocab(1);
    let table = TableLm::uniform(v.clone());
    let h = [ScorerHandle::lm("lm", ScorerKind::Table, &table, &v).unwrap()];
    let w = weights(&[("lm", 1.0)]);
    let only = exhaustive_decode(&h, &w, &v, 0).unwrap();
    assert_eq!(only.len(), 1);
    assert_eq!(only.best().unwrap().labels, vec![v.eos_id()]);
    assert_eq!(exhaustive_decode(&h, &w, &v, 3).unwrap().len(), 4);
    let big = vocab(4);
    let table = TableLm::uniform(big.clone());
    let h = [ScorerHandle::lm("lm", ScorerKind::Table, &table, &big).unwrap()];
    assert!(matches!(exhaustive_decode(&h, &w, &big, 10), Err(crate::Error::Budget(_))));
}

#[test]
fn argument_errors() {
    let v = vocab(2);
    let table = TableLm::uniform(v.clone());
    let h = [ScorerHandle::lm("lm", ScorerKind::Table, &table, &v).unwrap()];
    assert!(labelsync_beam(&[], &weights(&[("lm", 1.0)]), &v, 2, 3).is_err());
    assert!(labelsync_beam(&h, &weights(&[("lm", 1.0), ("nope", 1.0)]), &v, 2, 3).is_err());
    assert!(labelsync_beam(&h, &weights(&[("lm", 1.0)]), &v, 0, 3).is_err());
    let other = Vocabulary::from_words(&["zz"]).unwrap();
    let pg = random_pg(&mut ChaCha8Rng::seed_from_u64(0), &v, 2);
    let foreign = TableLm::uniform(other);
    assert!(matches!(timesync_ctc_beam(&pg, &v, Some(&foreign), 1.0, 2), Err(crate::Error::Vocabulary(_))));
}

#[test]
fn beam_one_ignores_length_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let v = vocab(4);
        let pg = random_pg(&mut rng, &v, 5);
        let table = random_table(&mut rng, &v);
        let handles = [
            ScorerHandle::ctc("ctc", &pg, &v).unwrap(),
            ScorerHandle::lm("lm", ScorerKind::Table, &table, &v).unwrap(),
        ];
        let w = weights(&[("ctc", rng.random::<f64>() + 0.1), ("lm", rng.random::<f64>())]);
        let plain = labelsync_beam(&handles, &w, &v, 1, 5).unwrap();
        let normed = labelsync_beam(&handles, &w.clone().with_length_norm(true), &v, 1, 5).unwrap();
        assert_eq!(plain.nbest.hyps(), normed.nbest.hyps());
    }
}

/// Pruned beam search is not monotone in the beam size in general (flat
/// random posteriors give counterexamples); on peaked posteriors it is.
#[test]
fn wider_beams_do_not_hurt_on_peaked_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let v = vocab(4);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|t| {
                let mut r: Vec<f64> = (0..v.len()).map(|_| rng.random::<f64>() * 0.1).collect();
                r[v.bos_id()] = 0.0;
                r[v.eos_id()] = 0.0;
                let peak = if t % 2 == 1 { v.blank_id() } else { 3 + rng.random_range(0..4) };
                r[peak] += 0.8;
                r
            })
            .collect();
        let pg = Posteriorgram::from_probs(&rows).unwrap();
        let table = random_table(&mut rng, &v);
        let handles = [
            ScorerHandle::ctc("ctc", &pg, &v).unwrap(),
            ScorerHandle::lm("lm", ScorerKind::Table, &table, &v).unwrap(),
        ];
        let w = weights(&[("ctc", 1.0), ("lm", 0.3)]);
        let mut prev = f64::NEG_INFINITY;
        let mut prev_ts = f64::NEG_INFINITY;
        for beam in [1, 2, 4, 8, 16] {
            let s = labelsync_beam(&handles, &w, &v, beam, 6).unwrap().nbest.best().unwrap().combined_score;
            assert!(s >= prev - 1e-12, "beam {beam}: {s} < {prev}");
            prev = s;
            let ts = timesync_ctc_beam(&pg, &v, Some(&table), 0.3, beam).unwrap().nbest.best().unwrap().combined_score;
            assert!(ts >= prev_ts - 1e-12, "beam {beam}: {ts} < {prev_ts}");
            prev_ts = ts;
        }
    }
}

#[test]
fn zero_decoder_weight_gives_ctc_argmax_and_zero_ctc_weight_gives_decoder_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let v = vocab(3);
    let pg = random_pg(&mut rng, &v, 3);
    let mut hp = HParams::toy(v.len());
    hp.d_model = 8;
    let model = DecoderModel::new(DecoderWeights::random(hp, None, 8).unwrap(), &v).unwrap();
    let cfg = InterfaceConfig::prefix(PrefixAttention::Causal);
    let handles = [
        ScorerHandle::ctc("ctc", &pg, &v).unwrap(),
        ScorerHandle::decoder("dec", &model, cfg.clone(), None, &v).unwrap(),
    ];
    let ctc_only = labelsync_beam(&handles, &weights(&[("ctc", 1.0), ("dec", 0.0)]), &v, 10_000, 3).unwrap();
    let oracle = exhaustive_decode(&handles[..1], &weights(&[("ctc", 1.0)]), &v, 3).unwrap();
    assert_eq!(best(&ctc_only.nbest).0, best(&oracle).0);
    assert!(!ctc_only.nbest.best().unwrap().score_components.contains_key("dec"));

    let dec_only = labelsync_beam(&handles, &weights(&[("ctc", 0.0), ("dec", 1.0)]), &v, 3, 3).unwrap();
    let alone = labelsync_beam(&handles[1..], &weights(&[("dec", 1.0)]), &v, 3, 3).unwrap();
    assert_eq!(dec_only.nbest.hyps(), alone.nbest.hyps());
}

#[test]
fn topk_shrinks_candidates_without_changing_easy_results() {
    let v = Vocabulary::from_words(&(0..30).map(|i| format!("w{i}")).collect::<Vec<_>>()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let target: Vec<usize> = (0..4).map(|_| 4 + rng.random_range(0..30)).collect();
    let mut rows = Vec::new();
    for &l in &target {
        for peak in [l, v.blank_id()] {
            let mut r = vec![0.01; v.len()];
            r[v.bos_id()] = 0.0;
            r[v.eos_id()] = 0.0;
            r[peak] = 3.0;
            rows.push(r);
        }
    }
    let pg = Posteriorgram::from_probs(&rows).unwrap();
    let pruned = topk_prune(&pg, 6, true, v.blank_id()).unwrap();
    let run = |pg: &Posteriorgram| {
        let h = [ScorerHandle::ctc("ctc", pg, &v).unwrap()];
        labelsync_beam(&h, &weights(&[("ctc", 1.0)]), &v, 4, pg.frames()).unwrap()
    };
    let (full, small) = (run(&pg), run(&pruned));
    assert!(small.stats.peak_candidates * 4 < full.stats.peak_candidates);
    assert_eq!(
        full.nbest.best().unwrap().transcript_labels(v.eos_id()),
        small.nbest.best().unwrap().transcript_labels(v.eos_id())
    );
    assert_eq!(greedy_decode(&pg, v.blank_id()), full.nbest.best().unwrap().transcript_labels(v.eos_id()));
}

#[test]
fn rtf_definition() {
    let s = DecodeStats { wall_time: Duration::from_millis(250), audio_secs: 1.0, ..Default::default() };
    assert!((s.rtf().unwrap() - 0.25).abs() < 1e-12);
    assert_eq!(DecodeStats::default().rtf(), None);
    let mut a = DecodeStats { peak_candidates: 3, scorer_evals: 2, ..Default::default() };
    a.merge(&DecodeStats { peak_candidates: 1, scorer_evals: 5, peak_live_hyps: 4, ..Default::default() });
    assert_eq!((a.peak_candidates, a.scorer_evals, a.peak_live_hyps), (3, 7, 4));
}
