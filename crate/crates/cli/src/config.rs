//! Run configuration echoes and the two scale presets.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use sal_core::classify::{Stage1Config, Stage2Config};
use sal_core::pipeline::SalConfig;

/// Everything needed to reproduce one command invocation, written next to
/// that command's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub experiment: Option<String>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub smoke: bool,
    pub viz: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs: Option<Vec<[usize; 2]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolved_sets: Option<Vec<usize>>,
    pub sal: SalConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

impl RunConfig {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        );
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }
}

/// Model configurations for one run scale.
#[derive(Debug, Clone)]
pub struct Presets {
    pub sal: SalConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

/// Images taken per class at smoke scale.
pub const SMOKE_TRAIN_PER_CLASS: usize = 1000;
pub const SMOKE_TEST_PER_CLASS: usize = 200;

/// Full-scale configuration: library defaults with a per-hop channel cap so
/// flat late-hop spectra cannot blow up the feature width.
fn full_presets(seed: u64) -> Presets {
    let mut sal = SalConfig::default();
    sal.context.max_channels = Some(40);
    sal.context.seed = seed;
    sal.refine.max_channels = Some(40);
    sal.refine.seed = seed;
    sal.step1.seed = seed;
    sal.step2.seed = seed;

    let mut stage1 = Stage1Config::default();
    stage1.cascade.max_channels = Some(40);
    stage1.cascade.seed = seed;
    stage1.pixel.seed = seed;

    let mut branch = stage1.clone();
    branch.hard_mining = false;

    let stage2 = Stage2Config { sal: sal.clone(), branch, seed, ..Stage2Config::default() };
    Presets { sal, stage1, stage2 }
}

/// Smoke scale: tight channel caps, fewer boosting rounds, small batches.
/// Exercises every code path in minutes instead of hours.
fn smoke_presets(seed: u64) -> Presets {
    let mut p = full_presets(seed);
    for cascade in [&mut p.sal.context, &mut p.sal.refine, &mut p.stage1.cascade] {
        cascade.max_channels = Some(8);
        cascade.batch_size = 64;
        cascade.cache_budget_bytes = 256 << 20;
    }
    p.sal.step1.gbdt.rounds = 40;
    p.sal.step2.gbdt.rounds = 40;
    p.sal.batch_size = 64;
    p.sal.cache_budget_bytes = 256 << 20;

    p.stage1.pixel.gbdt.rounds = 60;
    p.stage1.batch_size = 64;
    p.stage1.cache_budget_bytes = 256 << 20;

    p.stage2.sal = p.sal.clone();
    p.stage2.branch = p.stage1.clone();
    p.stage2.branch.hard_mining = false;
    p.stage2.branch.pixel.gbdt.rounds = 40;
    p.stage2.batch_size = 64;
    Presets { sal: p.sal, stage1: p.stage1, stage2: p.stage2 }
}

pub fn presets(smoke: bool, seed: u64) -> Presets {
    if smoke {
        smoke_presets(seed)
    } else {
        full_presets(seed)
    }
}

/// Parses a pair list like `3:5,0:8`; each pair is normalized to
/// (lower, higher).
pub fn parse_pairs(s: &str) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let Some((a, b)) = part.split_once(':') else {
            bail!("pair {part:?} is not of the form a:b");
        };
        let a: usize = a.trim().parse().with_context(|| format!("pair {part:?}"))?;
        let b: usize = b.trim().parse().with_context(|| format!("pair {part:?}"))?;
        if a == b {
            bail!("pair {part:?} names the same class twice");
        }
        out.push((a.min(b), a.max(b)));
    }
    Ok(out)
}

pub fn parse_counts(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse().with_context(|| format!("set count {p:?}")))
        .collect()
}
