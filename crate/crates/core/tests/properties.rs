use proptest::prelude::*;

use wordqe_core::corpus::{
    deinterleave, interleave, split_train_validation, Dataset, Domain, MtType, Tag,
};
use wordqe_core::encode::{build_vocab, encode_example, Label, Surface};
use wordqe_core::metrics::f1_multi;
use wordqe_core::synth::{
    generate_pair_corpus, make_language_profile, register_concepts, synthetic_meta,
    CorruptionConfig, SynthError,
};

fn tag() -> impl Strategy<Value = Tag> {
    prop_oneof![Just(Tag::Ok), Just(Tag::Bad)]
}

fn corpus(vocab: usize, seed: u64, n: usize, p_sub: f64, p_del: f64, p_ins: f64) -> Dataset {
    let a = make_language_profile("sA", vocab, seed).unwrap();
    let b = make_language_profile("sB", vocab, seed).unwrap();
    let corruption = CorruptionConfig {
        p_substitute: p_sub,
        p_delete: p_del,
        p_insert: p_ins,
        seed: seed ^ 0x55,
    };
    let meta = synthetic_meta(&a, &b, Domain::Wiki, MtType::Smt, n);
    generate_pair_corpus(&a, &b, n, &corruption, meta)
        .unwrap()
        .dataset
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interleave_round_trips(words in prop::collection::vec(tag(), 0..40), extra in prop::collection::vec(tag(), 41)) {
        let gaps = extra[..words.len() + 1].to_vec();
        let tags = interleave(&gaps, &words);
        prop_assert_eq!(tags.len(), 2 * words.len() + 1);
        prop_assert_eq!(deinterleave(&tags), (gaps, words));
    }

    #[test]
    fn f1_multi_is_product_and_label_symmetric(pairs in prop::collection::vec((tag(), tag()), 1..300)) {
        let (gold, pred): (Vec<Tag>, Vec<Tag>) = pairs.into_iter().unzip();
        let r = f1_multi(&gold, &pred).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.f1_ok) && (0.0..=1.0).contains(&r.f1_bad));
        prop_assert!((r.f1_multi - r.f1_ok * r.f1_bad).abs() <= 1e-12);
        prop_assert_eq!(r.support_ok + r.support_bad, gold.len());
        let flip = |v: &[Tag]| v.iter().map(|t| t.flipped()).collect::<Vec<_>>();
        let s = f1_multi(&flip(&gold), &flip(&pred)).unwrap();
        prop_assert_eq!((s.f1_ok, s.f1_bad), (r.f1_bad, r.f1_ok));
    }

    #[test]
    fn synthetic_corpora_round_trip_through_files(
        vocab in 10usize..40, seed in any::<u64>(), n in 1usize..30,
        p_sub in 0.0..0.4f64, p_del in 0.0..0.3f64, p_ins in 0.0..0.3f64,
    ) {
        let ds = corpus(vocab, seed, n, p_sub, p_del, p_ins);
        prop_assert_eq!(&ds, &corpus(vocab, seed, n, p_sub, p_del, p_ins));
        let [src, mt, stags, ttags] = ds.to_lines();
        let back = Dataset::parse_lines(&src, &mt, &stags, &ttags, ds.meta.clone()).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn encoding_respects_budget_and_labels_every_head(
        seed in any::<u64>(), max_len in 8usize..48, p_ins in 0.0..0.4f64,
    ) {
        let ds = corpus(20, seed, 8, 0.2, 0.1, p_ins);
        let vocab = build_vocab(&[&ds], 1000).unwrap();
        for e in &ds.examples {
            let enc = encode_example(e, &vocab, max_len).unwrap();
            prop_assert!(enc.length <= max_len);
            prop_assert_eq!(enc.ids.len(), enc.length);
            for p in 0..enc.length {
                let labeled = enc.labels[p] != Label::Ignore;
                prop_assert_eq!(labeled, enc.is_head(p), "position {}", p);
            }
            // Source words go before any target word is dropped.
            if !enc.truncation.target_words.is_empty() {
                prop_assert_eq!(enc.truncation.source_words.len(), e.source_tokens.len());
            }
            let kept_gaps = enc.surface_of.iter().filter(|s| **s == Surface::Gap).count();
            prop_assert_eq!(kept_gaps + enc.truncation.target_gaps.len(), e.target_gap_tags.len());
        }
    }

    #[test]
    fn split_partitions_the_dataset(n in 2usize..60, ratio in 0.05..0.95f64, seed in any::<u64>()) {
        let ds = corpus(12, 3, n, 0.1, 0.1, 0.0);
        match split_train_validation(&ds, ratio, seed) {
            Ok((train, valid)) => {
                prop_assert_eq!(train.len(), (n as f64 * ratio).floor() as usize);
                prop_assert_eq!(train.len() + valid.len(), n);
                let mut all: Vec<_> = train.examples.iter().chain(&valid.examples).map(|e| format!("{e:?}")).collect();
                let mut orig: Vec<_> = ds.examples.iter().map(|e| format!("{e:?}")).collect();
                all.sort();
                orig.sort();
                prop_assert_eq!(all, orig);
            }
            Err(_) => {
                let cut = (n as f64 * ratio).floor() as usize;
                prop_assert!(cut == 0 || cut == n);
            }
        }
    }

    #[test]
    fn registers_are_deterministic_sorted_subsets(vocab in 10usize..80, frac in 0.05..1.0f64, seed in any::<u64>()) {
        let size = ((vocab as f64 * frac).ceil() as usize).clamp(1, vocab);
        let r = register_concepts(vocab, size, seed).unwrap();
        prop_assert_eq!(&r, &register_concepts(vocab, size, seed).unwrap());
        prop_assert_eq!(r.len(), size);
        prop_assert!(r.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(r.iter().all(|&c| c < vocab));
    }
}

#[test]
fn source_text_stays_inside_the_register() {
    let register = register_concepts(30, 8, 4).unwrap();
    let a = make_language_profile("sA", 30, 1)
        .unwrap()
        .with_register(register.clone())
        .unwrap();
    let b = make_language_profile("sB", 30, 1).unwrap();
    let allowed: Vec<&str> = register.iter().map(|&c| a.word(c)).collect();
    let corruption = CorruptionConfig {
        p_substitute: 0.3,
        p_delete: 0.1,
        p_insert: 0.1,
        seed: 8,
    };
    let meta = synthetic_meta(&a, &b, Domain::It, MtType::Nmt, 200);
    let ds = generate_pair_corpus(&a, &b, 200, &corruption, meta)
        .unwrap()
        .dataset;
    let used: std::collections::BTreeSet<&str> = ds
        .examples
        .iter()
        .flat_map(|e| e.source_tokens.iter().map(String::as_str))
        .collect();
    assert!(used.iter().all(|w| allowed.contains(w)), "{used:?}");
    assert_eq!(
        used.len(),
        allowed.len(),
        "200 sentences should cover all 8 concepts"
    );
}

#[test]
fn invalid_registers_are_rejected() {
    assert!(matches!(
        register_concepts(20, 0, 1),
        Err(SynthError::InvalidRegister(_))
    ));
    assert!(matches!(
        register_concepts(20, 21, 1),
        Err(SynthError::InvalidRegister(_))
    ));
    let p = make_language_profile("sA", 20, 1).unwrap();
    assert!(matches!(
        p.clone().with_register(vec![]),
        Err(SynthError::InvalidRegister(_))
    ));
    assert!(matches!(
        p.clone().with_register(vec![3, 20]),
        Err(SynthError::InvalidRegister(_))
    ));
    assert_eq!(
        p.with_register(vec![5, 2, 5]).unwrap().register,
        Some(vec![2, 5])
    );
}

#[test]
fn a_full_register_samples_like_no_register() {
    let a = make_language_profile("sA", 25, 9).unwrap();
    assert_eq!(a.register, None);
    let full = a.clone().with_register((0..25).collect()).unwrap();
    let b = make_language_profile("sB", 25, 9).unwrap();
    let corruption = CorruptionConfig {
        p_substitute: 0.2,
        p_delete: 0.1,
        p_insert: 0.0,
        seed: 1,
    };
    let gen = |src: &wordqe_core::synth::LanguageProfile| {
        let meta = synthetic_meta(src, &b, Domain::It, MtType::Nmt, 40);
        generate_pair_corpus(src, &b, 40, &corruption, meta)
            .unwrap()
            .dataset
    };
    assert_eq!(gen(&a), gen(&full));
}
