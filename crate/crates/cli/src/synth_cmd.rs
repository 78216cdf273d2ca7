//! Synthetic dataset generation in the binary batch format.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use sal_core::synth::{generate, write_cifar_batches, SynthConfig};
use sal_core::util::derive_seed;

#[derive(Serialize)]
struct SynthEcho {
    command: String,
    out: String,
    seed: u64,
    noise: f32,
    train: SynthConfig,
    test: SynthConfig,
}

pub fn run(out: &Path, per_class: usize, test_per_class: usize, seed: u64, noise: f32) -> Result<()> {
    let train_cfg =
        SynthConfig { per_class, seed: derive_seed(seed, "synth/train"), noise };
    let test_cfg =
        SynthConfig { per_class: test_per_class, seed: derive_seed(seed, "synth/test"), noise };

    let train = generate(&train_cfg)?;
    let test = generate(&test_cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_cifar_batches(&train.data, &test.data, out)?;

    let echo = SynthEcho {
        command: "synth".into(),
        out: out.display().to_string(),
        seed,
        noise,
        train: train_cfg,
        test: test_cfg,
    };
    let f = fs::File::create(out.join("synth_config.json"))?;
    serde_json::to_writer_pretty(f, &echo)?;

    println!(
        "wrote {} train / {} test synthetic images to {}",
        train.data.len(),
        test.data.len(),
        out.display()
    );
    Ok(())
}
