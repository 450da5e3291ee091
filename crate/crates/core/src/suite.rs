//! Seeded families of oracle instances with designated target sequences.
//!
//! Instance `i` of a family depends only on the suite seed and `i`, so every
//! scheduler configuration sees the same instances.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::oracle::{
    MarkovOracle, OracleModel, ProfileOracle, TabularJointOracle, TemplateOracle, TiedGroup,
};
use crate::sequence::{TokenId, Vocabulary};

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable seed for `(master, a, b)`; used for (cell, sample) and
/// (suite, instance) pairs.
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    mix(mix(mix(master) ^ a) ^ b.rotate_left(32))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum SuiteSpec {
    /// Random joint tables with log-normal weights `exp(s z)`; `s` is drawn
    /// per instance from `sharpness`.
    Tabular {
        n: usize,
        vocab: u32,
        block_len: usize,
        sharpness: [f64; 2],
    },
    /// Permutation chains: each state moves to its successor with
    /// probability `s`, drawn per instance from `stickiness`.
    Markov {
        n: usize,
        vocab: u32,
        block_len: usize,
        stickiness: [f64; 2],
    },
    /// Student-style records (name, age, school, hobby), one record draw per
    /// block. The target record carries weight drawn from `target_weight`.
    Profile {
        rows: usize,
        records: usize,
        target_weight: [f64; 2],
    },
    /// Blocks of three tied slots interleaved with three confident fillers
    /// (or tied slots only when `fillers` is false).
    Template {
        blocks: usize,
        symbols: u32,
        fillers: bool,
    },
    /// Independent positions.
    Product { n: usize, vocab: u32, block_len: usize },
}

impl SuiteSpec {
    pub fn family(&self) -> &'static str {
        match self {
            SuiteSpec::Tabular { .. } => "tabular",
            SuiteSpec::Markov { .. } => "markov",
            SuiteSpec::Profile { .. } => "profile",
            SuiteSpec::Template { .. } => "template",
            SuiteSpec::Product { .. } => "product",
        }
    }

    pub fn markov_default() -> Self {
        SuiteSpec::Markov {
            n: 128,
            vocab: 16,
            block_len: 32,
            stickiness: [0.9, 0.9999],
        }
    }

    pub fn tabular_default() -> Self {
        SuiteSpec::Tabular {
            n: 6,
            vocab: 4,
            block_len: 3,
            sharpness: [1.0, 8.0],
        }
    }

    pub fn profile_default() -> Self {
        SuiteSpec::Profile {
            rows: 4,
            records: 20,
            target_weight: [0.55, 0.7],
        }
    }

    pub fn template_default() -> Self {
        SuiteSpec::Template {
            blocks: 4,
            symbols: 4,
            fillers: true,
        }
    }

    pub fn product_default() -> Self {
        SuiteSpec::Product {
            n: 16,
            vocab: 4,
            block_len: 4,
        }
    }
}

pub struct Instance {
    pub family: &'static str,
    pub index: usize,
    pub oracle: Box<dyn OracleModel>,
    pub prompt: Vec<TokenId>,
    pub gen_len: usize,
    pub block_len: usize,
    /// Designated target: the most probable sequence, lowest tokens on ties.
    pub target: Vec<TokenId>,
}

fn uniform_in(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.gen_range(range[0]..range[1])
    } else {
        range[0]
    }
}

fn check_blocks(n: usize, block_len: usize) -> Result<(), ConfigError> {
    crate::sequence::partition_blocks(n, block_len, 0).map(|_| ())
}

/// Most probable row of a table, lexicographically smallest on ties.
pub fn tabular_map(o: &TabularJointOracle) -> Vec<TokenId> {
    let mut best: Option<&(Vec<TokenId>, f64)> = None;
    for e in o.entries() {
        best = match best {
            Some(b) if b.1 > e.1 || (b.1 == e.1 && b.0 <= e.0) => Some(b),
            _ => Some(e),
        };
    }
    best.map(|b| b.0.clone()).unwrap_or_default()
}

fn tabular(rng: &mut ChaCha8Rng, n: usize, vocab: u32, sharpness: [f64; 2]) -> Result<TabularJointOracle, ConfigError> {
    let s = uniform_in(rng, sharpness);
    let v = Vocabulary::new(vocab)?;
    TabularJointOracle::from_fn(v, n, |_| (s * rng.sample::<f64, _>(StandardNormal)).exp())
}

fn markov(rng: &mut ChaCha8Rng, n: usize, vocab: u32, stickiness: [f64; 2]) -> Result<MarkovOracle, ConfigError> {
    let v = vocab as usize;
    let s = uniform_in(rng, stickiness);
    let mut succ: Vec<usize> = (0..v).collect();
    succ.shuffle(rng);
    let rest = (1.0 - s) / (v - 1) as f64;
    let t = (0..v)
        .map(|x| (0..v).map(|y| if y == succ[x] { s } else { rest }).collect())
        .collect();
    MarkovOracle::new(vec![1.0 / v as f64; v], t, n)
}

const NAMES: u32 = 20;
const AGES: u32 = 5;
const SCHOOLS: u32 = 3;
const HOBBIES: u32 = 4;

/// Token layout: names `0..20`, ages `20..25`, schools `25..28`, hobbies
/// `28..32`. Record 0 is the target; the others share its age with
/// probability 0.8 and its school with probability 0.5.
fn profile(rng: &mut ChaCha8Rng, rows: usize, records: usize, target_weight: [f64; 2]) -> Result<ProfileOracle, ConfigError> {
    let records = records.clamp(2, NAMES as usize);
    let vocab = Vocabulary::new(NAMES + AGES + SCHOOLS + HOBBIES)?;
    let mut names: Vec<u32> = (0..NAMES).collect();
    names.shuffle(rng);
    let age = rng.gen_range(0..AGES);
    let school = rng.gen_range(0..SCHOOLS);
    let mut table = Vec::with_capacity(records);
    for (r, &name) in names.iter().take(records).enumerate() {
        let a = if r == 0 || rng.gen_bool(0.8) { age } else { rng.gen_range(0..AGES) };
        let s = if r == 0 || rng.gen_bool(0.5) { school } else { rng.gen_range(0..SCHOOLS) };
        let h = rng.gen_range(0..HOBBIES);
        table.push(vec![name, NAMES + a, NAMES + AGES + s, NAMES + AGES + SCHOOLS + h]);
    }
    let w0 = uniform_in(rng, target_weight);
    let others: Vec<f64> = (1..records).map(|_| rng.gen::<f64>() + 0.05).collect();
    let z: f64 = others.iter().sum();
    let mut weights = vec![w0];
    weights.extend(others.iter().map(|w| (1.0 - w0) * w / z));
    let layout = (0..rows).map(|r| (4 * r..4 * r + 4).collect()).collect();
    ProfileOracle::new(vocab, table, Some(weights), layout)
}

fn profile_target(o: &ProfileOracle) -> Vec<TokenId> {
    let rec = &o.records()[o.modal_record()];
    let mut out = vec![0; o.layout().len() * rec.len()];
    for row in o.layout() {
        for (&p, &t) in row.iter().zip(rec) {
            out[p] = t;
        }
    }
    out
}

/// Vocabulary of `symbols + 4` tokens; priors put all mass on the first
/// `symbols` ids and stay below 0.45 everywhere, fillers put 0.92..0.99 on a
/// random token.
fn template(rng: &mut ChaCha8Rng, blocks: usize, symbols: u32, fillers: bool) -> Result<TemplateOracle, ConfigError> {
    let symbols = symbols.max(3);
    let vocab = Vocabulary::new(symbols + 4)?;
    let v = vocab.len();
    let nb = if fillers { 6 } else { 3 };
    let mut groups = Vec::new();
    let mut fill = Vec::new();
    for b in 0..blocks {
        let base = b * nb;
        let raw: Vec<f64> = (0..symbols).map(|_| 0.5 + 0.5 * rng.gen::<f64>()).collect();
        let z: f64 = raw.iter().sum();
        let mut prior = vec![0.0; v];
        for (s, r) in raw.iter().enumerate() {
            prior[s] = 0.5 * r / z + 0.5 / symbols as f64;
        }
        let positions = if fillers {
            vec![base, base + 2, base + 4]
        } else {
            vec![base, base + 1, base + 2]
        };
        groups.push(TiedGroup { positions, prior });
        if fillers {
            for off in [1, 3, 5] {
                let hi = rng.gen_range(0.92..0.99);
                let tok = rng.gen_range(0..v);
                let mut d = vec![(1.0 - hi) / (v - 1) as f64; v];
                d[tok] = hi;
                fill.push((base + off, d));
            }
        }
    }
    TemplateOracle::new(vocab, groups, fill)
}

fn product(rng: &mut ChaCha8Rng, n: usize, vocab: u32) -> Result<TemplateOracle, ConfigError> {
    let v = Vocabulary::new(vocab)?;
    let fillers = (0..n)
        .map(|p| {
            let w: Vec<f64> = (0..vocab).map(|_| rng.gen::<f64>().powi(4) + 1e-3).collect();
            let z: f64 = w.iter().sum();
            (p, w.into_iter().map(|x| x / z).collect())
        })
        .collect();
    TemplateOracle::new(v, Vec::new(), fillers)
}

/// Builds instance `index` of a suite.
pub fn instance(spec: &SuiteSpec, seed: u64, index: usize) -> Result<Instance, ConfigError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5017e, index as u64));
    let family = spec.family();
    let (oracle, gen_len, block_len, target): (Box<dyn OracleModel>, usize, usize, Vec<TokenId>) = match *spec {
        SuiteSpec::Tabular {
            n,
            vocab,
            block_len,
            sharpness,
        } => {
            check_blocks(n, block_len)?;
            let o = tabular(&mut rng, n, vocab, sharpness)?;
            let target = tabular_map(&o);
            (Box::new(o), n, block_len, target)
        }
        SuiteSpec::Markov {
            n,
            vocab,
            block_len,
            stickiness,
        } => {
            check_blocks(n, block_len)?;
            let o = markov(&mut rng, n, vocab, stickiness)?;
            let target = o.map_sequence();
            (Box::new(o), n, block_len, target)
        }
        SuiteSpec::Profile {
            rows,
            records,
            target_weight,
        } => {
            let o = profile(&mut rng, rows, records, target_weight)?;
            let target = profile_target(&o);
            (Box::new(o), rows * 4, 4, target)
        }
        SuiteSpec::Template {
            blocks,
            symbols,
            fillers,
        } => {
            let o = template(&mut rng, blocks, symbols, fillers)?;
            let target = o.map_sequence();
            let nb = if fillers { 6 } else { 3 };
            (Box::new(o), blocks * nb, nb, target)
        }
        SuiteSpec::Product { n, vocab, block_len } => {
            check_blocks(n, block_len)?;
            let o = product(&mut rng, n, vocab)?;
            let target = o.map_sequence();
            (Box::new(o), n, block_len, target)
        }
    };
    Ok(Instance {
        family,
        index,
        oracle,
        prompt: Vec::new(),
        gen_len,
        block_len,
        target,
    })
}

/// Instances `0..count`.
pub fn generate(spec: &SuiteSpec, seed: u64, count: usize) -> Result<Vec<Instance>, ConfigError> {
    (0..count).map(|i| instance(spec, seed, i)).collect()
}
