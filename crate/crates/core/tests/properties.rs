use ced_core::ced::{rank, select, Cell, ScoreMatrix};
use ced_core::cluster::assign_equal;
use ced_core::corpus::{assemble_prompt, Provenance, PromptSpec};
use ced_core::lm::{adapt_fixed, adapt_texts, AdaptConfig, BaseModel, LanguageModel, LmSettings};
use ced_core::tokenize::{tokens, TokenId};
use ced_core::{cross_entropy, Example, Pool, Split, Task};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 10] = ["sun", "moon", "star", "sky", "red", "blue", "the", "of", "a", "."];

fn text_strategy(min: usize, max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(&WORDS[..]), min..=max).prop_map(|w| w.join(" "))
}

fn corpus_strategy() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(text_strategy(1, 12), 2..8)
}

fn train(texts: &[String]) -> BaseModel {
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    BaseModel::train(&refs, &[], LmSettings::default()).unwrap()
}

fn mass<M: LanguageModel>(m: &M, history: &[TokenId]) -> f64 {
    (0..m.vocab_size() as TokenId).map(|w| m.prob(history, w)).sum()
}

#[test]
fn thousand_random_contexts_are_normalized() {
    let texts: Vec<String> = WORDS.iter().map(|w| format!("{w} the sky {w} of blue {w}")).collect();
    let base = train(&texts);
    let target = adapt_fixed(&base, vec!["x".into()], &["the sun of the moon"], 0.3).unwrap();
    let adapted = target.bind(&base).unwrap();
    let v = base.vocab_size() as TokenId;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let len = rng.random_range(0..4);
        let history: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..v)).collect();
        assert!((mass(&base, &history) - 1.0).abs() <= 1e-9);
        assert!((mass(&adapted, &history) - 1.0).abs() <= 1e-9);
        for w in 0..v {
            assert!(base.prob(&history, w) > 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adaptation_never_hurts_own_example(corpus in corpus_strategy(), pick in 0usize..8) {
        let base = train(&corpus);
        let own = &corpus[pick % corpus.len()];
        let target = adapt_texts(&base, vec!["own".into()], &[own.as_str()], &AdaptConfig::default()).unwrap();
        let seq = base.encode(own);
        let adapted = target.bind(&base).unwrap();
        prop_assert!(cross_entropy(&adapted, &seq) <= cross_entropy(&base, &seq));
    }

    #[test]
    fn mixture_log_prob_dominates_log_mixture(corpus in corpus_strategy(), own in text_strategy(1, 10), lambda in 0.0f64..=1.0) {
        let base = train(&corpus);
        let target = adapt_fixed(&base, vec!["own".into()], &[own.as_str()], lambda).unwrap();
        let adapted = target.bind(&base).unwrap();
        for probe in corpus.iter().chain(std::iter::once(&own)) {
            let seq = base.encode(probe);
            let ids = seq.ids();
            for i in 1..ids.len() {
                let h = &ids[..i];
                let lhs = adapted.prob(h, ids[i]).ln();
                let rhs = (1.0 - lambda) * base.prob(h, ids[i]).ln() + lambda * adapted.empirical_prob(h, ids[i]).ln();
                prop_assert!(lhs >= rhs - 1e-12);
            }
        }
    }

    #[test]
    fn zero_lambda_matches_base(corpus in corpus_strategy(), probe in text_strategy(0, 10)) {
        let base = train(&corpus);
        let target = adapt_fixed(&base, vec!["z".into()], &[corpus[0].as_str()], 0.0).unwrap();
        let seq = base.encode(&probe);
        prop_assert_eq!(cross_entropy(&target.bind(&base).unwrap(), &seq), cross_entropy(&base, &seq));
    }
}

// ---------------------------------------------------------------- prompts

fn example(id: &str, background: String, question: &str, answer: &str, split: Split) -> Example {
    Example {
        id: id.into(),
        dataset: "d".into(),
        task: Task::AbstractiveQa,
        background,
        question: question.into(),
        choices: vec![],
        answer: answer.into(),
        split,
    }
}

fn is_subsequence(small: &[String], big: &[String]) -> bool {
    let mut it = big.iter();
    small.iter().all(|s| it.any(|b| b == s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prompts_grow_monotonically_and_keep_questions(
        demo_bg in text_strategy(0, 30),
        test_bg in text_strategy(0, 30),
        budget in 1usize..120,
    ) {
        let demo = example("d1", demo_bg, "which star is red ?", "the sun", Split::Candidate);
        let test = example("t1", test_bg, "what is blue ?", "sky", Split::Test);
        let spec = |b| PromptSpec { token_budget: b, ..PromptSpec::default() };
        let (Ok(small), Ok(big)) = (
            assemble_prompt(Some(&demo), &test, &spec(budget)),
            assemble_prompt(Some(&demo), &test, &spec(budget + 1)),
        ) else {
            return Ok(());
        };
        prop_assert!(tokens(&small).len() <= budget);
        let words = |s: &str| tokens(s).into_iter().map(|t| t.text).collect::<Vec<_>>();
        prop_assert!(is_subsequence(&words(&small), &words(&big)));
        for part in ["which star is red ?", "the sun", "what is blue ?"] {
            prop_assert!(small.contains(part));
        }
        prop_assert_eq!(&small, &assemble_prompt(Some(&demo), &test, &spec(budget)).unwrap());
    }
}

// ---------------------------------------------------------------- ranking

fn matrix_from(rows: Vec<Vec<(f64, f64)>>) -> ScoreMatrix {
    let n = rows.first().map_or(0, Vec::len);
    ScoreMatrix::new(
        (0..rows.len()).map(|t| format!("t{t:03}")).collect(),
        (0..n).map(|c| format!("c{c:03}")).collect(),
        rows.into_iter()
            .map(|r| r.into_iter().map(|(b, t)| Cell::new(b, t)).collect())
            .collect(),
    )
    .unwrap()
}

/// Coarse values so that ties are common.
fn ce() -> impl Strategy<Value = f64> {
    (0u32..8).prop_map(|x| 1.0 + x as f64 * 0.25)
}

fn rows_strategy() -> impl Strategy<Value = Vec<Vec<(f64, f64)>>> {
    (1usize..6, 1usize..12).prop_flat_map(|(t, c)| {
        prop::collection::vec((ce(), prop::collection::vec(ce(), c)), t)
            .prop_map(|rows| rows.into_iter().map(|(b, ts)| ts.into_iter().map(|x| (b, x)).collect()).collect())
    })
}

proptest! {
    #[test]
    fn ranking_properties(rows in rows_strategy(), shift in -3.0f64..3.0) {
        let m = matrix_from(rows.clone());
        let shifted = matrix_from(rows.iter().map(|r| r.iter().map(|&(b, t)| (b + shift, t)).collect()).collect());
        for (r, tid) in m.test_ids().iter().enumerate() {
            let ranking = rank(&m, tid).unwrap();
            prop_assert_eq!(select(&m, tid).unwrap(), ranking.candidates[0].as_str());
            prop_assert_eq!(m.argsort_by(r, |c| c.ced), m.argsort_by(r, |c| c.target_ce));
            prop_assert_eq!(&rank(&shifted, tid).unwrap(), &ranking);
            let mut sorted = ranking.candidates.clone();
            sorted.sort();
            prop_assert_eq!(&sorted, m.candidate_ids());
        }
    }

    #[test]
    fn lowering_a_score_never_demotes(rows in rows_strategy(), pick in 0usize..12, drop in 0.01f64..2.0) {
        let m = matrix_from(rows.clone());
        let c = pick % m.candidate_ids().len();
        let cid = &m.candidate_ids()[c];
        let mut lowered = rows.clone();
        lowered[0][c].1 -= drop;
        let l = matrix_from(lowered);
        let at = |mm: &ScoreMatrix| rank(mm, &mm.test_ids()[0]).unwrap().candidates.iter().position(|x| x == cid).unwrap();
        prop_assert!(at(&l) <= at(&m));
    }
}

// ---------------------------------------------------------------- clustering

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn equal_size_partition(n in 1usize..=512, k in 1usize..=32, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seeds = rand::seq::index::sample(&mut rng, n, k).into_vec();
        let test_ids: Vec<String> = (0..n).map(|i| format!("e{i:04}")).collect();
        let seed_ids: Vec<String> = seeds.iter().map(|&i| test_ids[i].clone()).collect();
        let rows: Vec<Vec<Cell>> = (0..n)
            .map(|_| (0..k).map(|_| Cell::new(5.0, rng.random_range(0..20) as f64 * 0.1)).collect())
            .collect();
        let m = ScoreMatrix::new(test_ids.clone(), seed_ids.clone(), rows).unwrap();
        let a = assign_equal(&m, k).unwrap();
        let sizes = a.sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut all: Vec<&String> = a.members.iter().flatten().collect();
        all.sort();
        prop_assert_eq!(all, test_ids.iter().collect::<Vec<_>>());
        for (i, s) in seed_ids.iter().enumerate() {
            prop_assert!(a.members[i].contains(s));
        }
        prop_assert_eq!(assign_equal(&m, k).unwrap(), a);
    }
}

// ---------------------------------------------------------------- pools

#[test]
fn pool_split_sets_are_disjoint() {
    let exs = vec![
        example("a", String::new(), "q", "x", Split::Candidate),
        example("b", String::new(), "q", "x", Split::Dev),
        example("c", String::new(), "q", "x", Split::Test),
    ];
    let pool = Pool::new(exs, Provenance { source: "mem".into(), seed: None }).unwrap();
    let ids = |s| pool.split(s).map(|e| e.id.clone()).collect::<Vec<_>>();
    assert_eq!((ids(Split::Candidate), ids(Split::Dev), ids(Split::Test)), (vec!["a".to_string()], vec!["b".to_string()], vec!["c".to_string()]));
}
