//! Experiment configuration: task suite, scheduler, sweep grid.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ete_core::oracle::{load_oracle, OracleModel, OracleSpec};
use ete_core::suite::{generate, Instance};
use ete_core::{DecodeMode, EteConfig, SelectionRule, SuiteSpec, TokenId};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OracleSource {
    Path(PathBuf),
    Inline(OracleSpec),
}

/// A single user-supplied oracle decoded repeatedly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedTask {
    pub oracle: OracleSource,
    #[serde(default)]
    pub prompt: Vec<TokenId>,
    pub gen_len: usize,
    pub block_len: usize,
    /// Sequence scored by exact match; absent means no metric.
    #[serde(default)]
    pub target: Option<Vec<TokenId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskSuite {
    Generated(SuiteSpec),
    Fixed(FixedTask),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchedulerSpec {
    Vanilla {
        #[serde(default)]
        decode: DecodeMode,
    },
    Alg1 {
        rule: SelectionRule,
        #[serde(default)]
        decode: DecodeMode,
    },
    Ete {
        #[serde(default)]
        ete: EteConfig,
    },
}

impl SchedulerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            SchedulerSpec::Vanilla { .. } => "vanilla",
            SchedulerSpec::Alg1 { .. } => "alg1",
            SchedulerSpec::Ete { .. } => "ete",
        }
    }

    /// `f` of a dynamic-threshold rule.
    pub fn factor(&self) -> Option<f64> {
        match self {
            SchedulerSpec::Alg1 {
                rule: SelectionRule::DynamicThreshold { f },
                ..
            } => Some(*f),
            _ => None,
        }
    }

    /// Exploit threshold: static rule `C` or the ETE `C`.
    pub fn threshold(&self) -> Option<f64> {
        match self {
            SchedulerSpec::Alg1 {
                rule: SelectionRule::StaticThreshold { c },
                ..
            } => Some(*c),
            SchedulerSpec::Ete { ete } => Some(ete.c),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SchedulerSpec::Vanilla { decode } | SchedulerSpec::Alg1 { decode, .. } => {
                if let DecodeMode::Sample { temperature } = decode {
                    if !(*temperature > 0.0) {
                        bail!("temperature must be positive");
                    }
                }
            }
            SchedulerSpec::Ete { ete } => ete.validate()?,
        }
        if let SchedulerSpec::Alg1 { rule, .. } = self {
            rule.validate()?;
        }
        Ok(())
    }
}

/// Values swept over; each non-empty list multiplies the cell count.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub f: Vec<f64>,
    #[serde(rename = "C")]
    pub c: Vec<f64>,
    #[serde(rename = "N")]
    pub n: Vec<usize>,
    pub k: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub suite: TaskSuite,
    pub scheduler: SchedulerSpec,
    #[serde(default)]
    pub sweep: SweepGrid,
    #[serde(default = "one")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub scheduler: SchedulerSpec,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        // Relative oracle paths resolve against the config file.
        if let TaskSuite::Fixed(FixedTask {
            oracle: OracleSource::Path(p),
            ..
        }) = &mut cfg.suite
        {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn family(&self) -> &'static str {
        match &self.suite {
            TaskSuite::Generated(s) => s.family(),
            TaskSuite::Fixed(_) => "custom",
        }
    }

    /// Cartesian product of the grid in `f, C, N, k` order, applied to the
    /// base scheduler.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        self.scheduler.validate()?;
        if self.samples == 0 {
            bail!("samples must be at least 1");
        }
        let g = &self.sweep;
        let opt = |v: Vec<Option<f64>>| if v.is_empty() { vec![None] } else { v };
        let fs = opt(g.f.iter().copied().map(Some).collect());
        let cs = opt(g.c.iter().copied().map(Some).collect());
        let ns: Vec<Option<usize>> = if g.n.is_empty() { vec![None] } else { g.n.iter().copied().map(Some).collect() };
        let ks: Vec<Option<usize>> = if g.k.is_empty() { vec![None] } else { g.k.iter().copied().map(Some).collect() };
        let mut out = Vec::new();
        for &f in &fs {
            for &c in &cs {
                for &n in &ns {
                    for &k in &ks {
                        let scheduler = apply(self.scheduler, f, c, n, k)?;
                        scheduler.validate()?;
                        out.push(Cell {
                            index: out.len(),
                            scheduler,
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    /// Task instances `0..samples`; a fixed task is repeated.
    pub fn instances(&self, endpoint: Option<&str>) -> Result<Vec<Instance>> {
        let mut list = match &self.suite {
            TaskSuite::Generated(spec) => generate(spec, self.seed, self.samples)?,
            TaskSuite::Fixed(task) => (0..self.samples)
                .map(|i| fixed_instance(task, i))
                .collect::<Result<_>>()?,
        };
        if let Some(url) = endpoint {
            for inst in &mut list {
                inst.oracle = remote(url)?;
            }
        }
        Ok(list)
    }
}

fn remote(url: &str) -> Result<Box<dyn OracleModel>> {
    let spec = OracleSpec::Remote {
        endpoint: url.to_string(),
        timeout_ms: 30_000,
        batch_limit: 16,
    };
    Ok(spec.build()?)
}

fn fixed_instance(task: &FixedTask, index: usize) -> Result<Instance> {
    let oracle = match &task.oracle {
        OracleSource::Path(p) => load_oracle(p)?,
        OracleSource::Inline(spec) => spec.build()?,
    };
    Ok(Instance {
        family: "custom",
        index,
        oracle,
        prompt: task.prompt.clone(),
        gen_len: task.gen_len,
        block_len: task.block_len,
        target: task.target.clone().unwrap_or_default(),
    })
}

fn apply(
    base: SchedulerSpec,
    f: Option<f64>,
    c: Option<f64>,
    n: Option<usize>,
    k: Option<usize>,
) -> Result<SchedulerSpec> {
    match base {
        SchedulerSpec::Vanilla { .. } => {
            if f.is_some() || c.is_some() || n.is_some() || k.is_some() {
                bail!("the vanilla sampler has no sweepable parameters");
            }
            Ok(base)
        }
        SchedulerSpec::Alg1 { mut rule, decode } => {
            if n.is_some() || k.is_some() {
                bail!("N and k sweeps apply to ete only");
            }
            match (f, c) {
                (Some(_), Some(_)) => bail!("sweep either f or C for alg1, not both"),
                (Some(f), None) => rule = SelectionRule::DynamicThreshold { f },
                (None, Some(c)) => rule = SelectionRule::StaticThreshold { c },
                (None, None) => {}
            }
            Ok(SchedulerSpec::Alg1 { rule, decode })
        }
        SchedulerSpec::Ete { mut ete } => {
            if f.is_some() {
                bail!("f sweeps apply to alg1 only");
            }
            if let Some(c) = c {
                ete.c = c;
            }
            if n.is_some() {
                ete.n_budget = n;
            }
            if let Some(k) = k {
                ete.k = k;
            }
            Ok(SchedulerSpec::Ete { ete })
        }
    }
}
