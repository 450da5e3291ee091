#![allow(dead_code)]

use ete_core::oracle::{
    build_template_oracle, ExactModel, MarkovOracle, ProfileOracle, TabularJointOracle, TemplateOracle,
};
use ete_core::{TokenId, Vocabulary};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn simplex(rng: &mut ChaCha8Rng, v: usize, sharp: i32) -> Vec<f64> {
    let w: Vec<f64> = (0..v).map(|_| rng.gen::<f64>().powi(sharp) + 1e-3).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Random joint table; roughly a third of the rows are zeroed when `sparse`.
pub fn random_tabular(seed: u64, v: u32, n: usize, sparse: bool) -> TabularJointOracle {
    let mut r = rng(seed);
    let vocab = Vocabulary::new(v).unwrap();
    let total = (v as usize).pow(n as u32);
    let mut weights: Vec<f64> = (0..total).map(|_| r.gen::<f64>().powi(4)).collect();
    if sparse {
        for w in weights.iter_mut() {
            if r.gen_bool(0.35) {
                *w = 0.0;
            }
        }
        weights[0] = weights[0].max(0.1);
    }
    let mut i = 0;
    TabularJointOracle::from_fn(vocab, n, |_| {
        let w = weights[i];
        i += 1;
        w
    })
    .unwrap()
}

pub fn random_markov(seed: u64, v: usize, n: usize) -> MarkovOracle {
    let mut r = rng(seed);
    let pi = simplex(&mut r, v, 3);
    let t = (0..v).map(|_| simplex(&mut r, v, 3)).collect();
    MarkovOracle::new(pi, t, n).unwrap()
}

/// Two rows of three fields with a shuffled layout.
pub fn random_profile(seed: u64) -> ProfileOracle {
    let mut r = rng(seed);
    let v = 6u32;
    let records: Vec<Vec<TokenId>> = (0..5)
        .map(|_| (0..3).map(|_| r.gen_range(0..v)).collect())
        .collect();
    let weights: Vec<f64> = (0..5).map(|_| r.gen::<f64>() + 0.05).collect();
    let mut positions: Vec<usize> = (0..6).collect();
    positions.shuffle(&mut r);
    let layout = vec![positions[..3].to_vec(), positions[3..].to_vec()];
    ProfileOracle::new(Vocabulary::new(v).unwrap(), records, Some(weights), layout).unwrap()
}

pub fn random_template(seed: u64) -> TemplateOracle {
    let mut r = rng(seed);
    let v = 4usize;
    let mut positions: Vec<usize> = (0..6).collect();
    positions.shuffle(&mut r);
    let prior = simplex(&mut r, v, 2);
    let fillers = positions[3..]
        .iter()
        .map(|&p| (p, simplex(&mut r, v, 2)))
        .collect();
    build_template_oracle(Vocabulary::new(v as u32).unwrap(), vec![positions[..3].to_vec()], prior, fillers).unwrap()
}

/// A complete window with positive probability, sampled from the model.
pub fn sample_support<M: ExactModel>(m: &M, seed: u64) -> Vec<TokenId> {
    let mut r = rng(seed);
    let n = m.gen_len();
    let v = m.vocab().len();
    let mut ev: Vec<Option<TokenId>> = vec![None; n];
    for i in 0..n {
        let post = &m.posteriors(&ev, &[i]).unwrap()[0];
        let u: f64 = r.gen();
        let mut acc = 0.0;
        let mut pick = (0..v).rev().find(|&t| post[t] > 0.0).unwrap();
        for (t, &p) in post.iter().enumerate() {
            acc += p;
            if u < acc && p > 0.0 {
                pick = t;
                break;
            }
        }
        ev[i] = Some(pick as TokenId);
    }
    ev.into_iter().map(Option::unwrap).collect()
}

/// Random ordered partition of `0..n` into nonempty chunks.
pub fn random_partition(seed: u64, n: usize) -> Vec<Vec<usize>> {
    let mut r = rng(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let k = r.gen_range(1..=(n - i).min(3));
        out.push(order[i..i + k].to_vec());
        i += k;
    }
    out
}
