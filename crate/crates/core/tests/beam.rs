mod common;

use common::*;
use seqforge::data::{Example, EOS};
use seqforge::decoder::{self, DecodeOptions};
use seqforge::model::Seq2Seq;
use seqforge::rng::seeded;

fn setup(seed: u64) -> (Seq2Seq, Example) {
    let cfg = tiny_config();
    let mut model = Seq2Seq::new(cfg.clone(), seed).unwrap();
    widen(&mut model, 1.0, seed);
    let mut rng = seeded(seed);
    (model, random_example(&mut rng, &cfg, 5))
}

#[test]
fn n_best_is_sorted_distinct_and_eos_terminated() {
    for seed in 0..10 {
        let (model, src) = setup(seed);
        for alpha in [0.0, 0.6, 1.0] {
            let opts = DecodeOptions {
                beam_size: 5,
                n_best: 4,
                max_len: 7,
                length_alpha: alpha,
                ..DecodeOptions::default()
            };
            let out = decoder::beam_search(&model, &src, &opts).unwrap();
            let ts = &out.translations;
            assert!(!ts.is_empty() && ts.len() <= 4);
            assert!(ts.windows(2).all(|w| w[0].score >= w[1].score));
            for (i, t) in ts.iter().enumerate() {
                assert_eq!(t.tokens.last(), Some(&EOS));
                assert_eq!(t.tokens.iter().filter(|&&x| x == EOS).count(), 1);
                assert!(t.tokens.len() <= opts.max_len + 1);
                assert_eq!(t.attn_argmax.len(), t.tokens.len());
                assert!((t.score - opts.adjusted(t.log_prob, t.tokens.len())).abs() < 1e-12);
                assert!(ts[..i].iter().all(|u| u.tokens != t.tokens));
            }
        }
    }
}

#[test]
fn expansions_are_bounded_by_beam_times_vocab_per_step() {
    for seed in 0..5 {
        let (model, src) = setup(seed);
        let v = model.config.tgt_vocab_size;
        for beam_size in [1, 3, 8] {
            let opts = DecodeOptions {
                beam_size,
                max_len: 6,
                ..DecodeOptions::default()
            };
            let out = decoder::beam_search(&model, &src, &opts).unwrap();
            assert!(out.expansions <= opts.max_len * beam_size * v);
            assert!(out.expansions >= v);
        }
    }
}

#[test]
fn beam_one_is_greedy() {
    for seed in 0..10 {
        let (model, src) = setup(seed);
        let greedy = decoder::greedy_decode(&model, &src, 9).unwrap();
        let opts = DecodeOptions {
            beam_size: 1,
            max_len: 9,
            ..DecodeOptions::default()
        };
        let beam = decoder::beam_search(&model, &src, &opts).unwrap();
        assert_eq!(beam.translations[0].tokens, greedy.tokens);
        assert_eq!(beam.translations[0].log_prob, greedy.log_prob);
    }
}
