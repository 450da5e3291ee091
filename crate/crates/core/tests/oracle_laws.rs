mod common;

use common::*;
use ete_core::oracle::{enumerate_posteriors, BatchQuery, ExactModel, OracleModel, TabularJointOracle};
use ete_core::{MaskedSequence, Nats, TokenId, Vocabulary, MASK};
use proptest::prelude::*;
use rand::Rng;

const TOL: f64 = 1e-9;

fn masked_view(full: &[TokenId], keep: &[bool], vocab: Vocabulary) -> MaskedSequence {
    let gen: Vec<TokenId> = full
        .iter()
        .zip(keep)
        .map(|(&t, &k)| if k { t } else { MASK })
        .collect();
    MaskedSequence::from_generated(&[], &gen, full.len(), vocab).unwrap()
}

/// Compares oracle conditionals with brute-force enumeration on evidence
/// drawn from a positive-probability sequence.
fn check_consistency<M: ExactModel>(m: &M, seed: u64) {
    let full = sample_support(m, seed);
    let mut r = rng(seed ^ 0xabc);
    let keep: Vec<bool> = (0..full.len()).map(|_| r.gen_bool(0.4)).collect();
    let seq = masked_view(&full, &keep, ExactModel::vocab(m));
    let queries: Vec<usize> = seq.masked_positions().collect();
    if queries.is_empty() {
        return;
    }
    let report = m.conditional_marginals(&seq, &queries).unwrap();
    let evidence: Vec<Option<TokenId>> = full
        .iter()
        .zip(&keep)
        .map(|(&t, &k)| k.then_some(t))
        .collect();
    let brute = enumerate_posteriors(m, &evidence, &queries).unwrap();
    for (q, want) in queries.iter().zip(&brute) {
        let got = report.get(*q).unwrap();
        let s: f64 = got.iter().sum();
        assert!((s - 1.0).abs() <= TOL, "normalization {s}");
        assert!(got.iter().all(|&p| p >= 0.0));
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() <= TOL, "position {q}: {a} vs {b}");
        }
    }
}

fn check_chain_rule<M: ExactModel>(m: &M, seed: u64) {
    let full = sample_support(m, seed);
    let vocab = ExactModel::vocab(m);
    let n = full.len();
    let joint = m
        .joint_logprob(&MaskedSequence::from_generated(&[], &full, n, vocab).unwrap())
        .unwrap();
    let mut keep = vec![false; n];
    let mut acc = Nats::ZERO;
    for part in random_partition(seed ^ 0x77, n) {
        let seq = masked_view(&full, &keep, vocab);
        let assignment: Vec<(usize, TokenId)> = part.iter().map(|&p| (p, full[p])).collect();
        acc = acc + m.conditional_joint_logprob(&seq, &assignment).unwrap();
        part.iter().for_each(|&p| keep[p] = true);
    }
    assert!((acc.value() - joint.value()).abs() <= TOL, "{} vs {}", acc.value(), joint.value());
}

fn check_batch_purity<M: ExactModel>(m: &M, seed: u64) {
    let vocab = ExactModel::vocab(m);
    let n = m.gen_len();
    let seqs: Vec<MaskedSequence> = (0..3)
        .map(|i| {
            let full = sample_support(m, seed + i);
            let mut r = rng(seed + 100 + i);
            let keep: Vec<bool> = (0..n).map(|_| r.gen_bool(0.5)).collect();
            masked_view(&full, &keep, vocab)
        })
        .collect();
    let positions: Vec<Vec<usize>> = seqs.iter().map(|s| s.masked_positions().collect()).collect();
    let batch: Vec<BatchQuery> = seqs
        .iter()
        .zip(&positions)
        .map(|(seq, p)| BatchQuery { seq, positions: p })
        .collect();
    let batched = m.batch_conditional_marginals(&batch).unwrap();
    for (q, rep) in batch.iter().zip(&batched) {
        let single = m.conditional_marginals(q.seq, q.positions).unwrap();
        for (a, b) in rep.entries.iter().zip(&single.entries) {
            assert_eq!(a.position, b.position);
            for (x, y) in a.probs.iter().zip(&b.probs) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tabular_matches_enumeration(seed in any::<u64>(), v in 2u32..5, n in 1usize..6, sparse in any::<bool>()) {
        let m = random_tabular(seed, v, n, sparse);
        check_consistency(&m, seed);
        check_chain_rule(&m, seed);
        check_batch_purity(&m, seed);
    }

    #[test]
    fn markov_matches_enumeration(seed in any::<u64>(), v in 2usize..5, n in 1usize..7) {
        let m = random_markov(seed, v, n);
        check_consistency(&m, seed);
        check_chain_rule(&m, seed);
        check_batch_purity(&m, seed);
    }

    #[test]
    fn profile_matches_enumeration(seed in any::<u64>()) {
        let m = random_profile(seed);
        check_consistency(&m, seed);
        check_chain_rule(&m, seed);
        check_batch_purity(&m, seed);
    }

    #[test]
    fn template_matches_enumeration(seed in any::<u64>()) {
        let m = random_template(seed);
        check_consistency(&m, seed);
        check_chain_rule(&m, seed);
        check_batch_purity(&m, seed);
    }

    #[test]
    fn masks_carry_no_information(seed in any::<u64>()) {
        // Same unmasked content, different prompt: exact oracles answer identically.
        let m = random_markov(seed, 3, 5);
        let full = sample_support(&m, seed);
        let vocab = ExactModel::vocab(&m);
        let gen: Vec<TokenId> = full.iter().enumerate().map(|(i, &t)| if i % 2 == 0 { t } else { MASK }).collect();
        let a = MaskedSequence::from_generated(&[], &gen, 5, vocab).unwrap();
        let b = MaskedSequence::from_generated(&[1, 2], &gen, 5, vocab).unwrap();
        let ra = m.conditional_marginals(&a, &[1, 3]).unwrap();
        let rb = m.conditional_marginals(&b, &[3, 5]).unwrap();
        for (x, y) in ra.entries.iter().zip(&rb.entries) {
            prop_assert_eq!(&x.probs, &y.probs);
        }
    }
}

fn parity() -> TabularJointOracle {
    let v = Vocabulary::new(2).unwrap();
    TabularJointOracle::uniform(v, vec![vec![0, 0, 0], vec![0, 1, 1], vec![1, 0, 1], vec![1, 1, 0]]).unwrap()
}

#[test]
fn parity_completion_is_forced() {
    let m = parity();
    let v = ExactModel::vocab(&m);
    let seq = MaskedSequence::from_generated(&[], &[0, 1, MASK], 3, v).unwrap();
    let r = m.conditional_marginals(&seq, &[2]).unwrap();
    assert_eq!(r.get(2).unwrap(), &[0.0, 1.0]);
}

#[test]
fn parity_batch_matches_sequential_calls() {
    let m = parity();
    let v = ExactModel::vocab(&m);
    let seqs = [
        MaskedSequence::from_generated(&[], &[0, MASK, MASK], 3, v).unwrap(),
        MaskedSequence::from_generated(&[], &[MASK, 1, MASK], 3, v).unwrap(),
        MaskedSequence::from_generated(&[], &[MASK, MASK, 1], 3, v).unwrap(),
    ];
    let pos: Vec<Vec<usize>> = seqs.iter().map(|s| s.masked_positions().collect()).collect();
    let batch: Vec<BatchQuery> = seqs
        .iter()
        .zip(&pos)
        .map(|(seq, positions)| BatchQuery { seq, positions })
        .collect();
    let got = m.batch_conditional_marginals(&batch).unwrap();
    for (q, rep) in batch.iter().zip(got) {
        assert_eq!(rep, m.conditional_marginals(q.seq, q.positions).unwrap());
    }
}

#[test]
fn batch_of_identical_states_is_pure() {
    let m = random_markov(3, 4, 6);
    let v = ExactModel::vocab(&m);
    let seq = MaskedSequence::from_generated(&[], &[MASK, 2, MASK, MASK, 0, MASK], 6, v).unwrap();
    let pos = [0usize, 2, 3, 5];
    let batch = vec![BatchQuery { seq: &seq, positions: &pos }; 4];
    let got = m.batch_conditional_marginals(&batch).unwrap();
    assert!(got.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(got[0], m.conditional_marginals(&seq, &pos).unwrap());
}

#[test]
fn joint_logprob_examples() {
    let v = Vocabulary::new(2).unwrap();
    let point = TabularJointOracle::uniform(v, vec![vec![1, 0, 1]]).unwrap();
    let s = MaskedSequence::from_generated(&[], &[1, 0, 1], 3, v).unwrap();
    assert_eq!(point.joint_logprob(&s).unwrap().value(), 0.0);

    let all: Vec<Vec<TokenId>> = (0..8u32).map(|c| vec![c & 1, (c >> 1) & 1, (c >> 2) & 1]).collect();
    let uni = TabularJointOracle::uniform(v, all).unwrap();
    assert!((uni.joint_logprob(&s).unwrap().value() - 8f64.ln()).abs() < 1e-12);

    let chain = ete_core::MarkovOracle::new(vec![0.5, 0.5], vec![vec![0.5, 0.5], vec![0.5, 0.5]], 3).unwrap();
    assert!((chain.joint_logprob(&s).unwrap().value() - 3.0 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn parity_pair_costs_one_bit() {
    let m = parity();
    let v = ExactModel::vocab(&m);
    let seq = MaskedSequence::from_generated(&[], &[0, MASK, MASK], 3, v).unwrap();
    let j = m.conditional_joint_logprob(&seq, &[(1, 1), (2, 1)]).unwrap();
    assert!((j.value() - 2f64.ln()).abs() < 1e-12);
    let single = m.conditional_joint_logprob(&seq, &[(1, 0)]).unwrap();
    let marg = m.conditional_marginals(&seq, &[1]).unwrap();
    assert!((single.value() + marg.get(1).unwrap()[0].ln()).abs() < 1e-12);
}

#[test]
fn impossible_sequence_is_infinite_surprisal() {
    let m = parity();
    let v = ExactModel::vocab(&m);
    let s = MaskedSequence::from_generated(&[], &[1, 1, 1], 3, v).unwrap();
    assert!(m.joint_logprob(&s).unwrap().is_infinite());
}
