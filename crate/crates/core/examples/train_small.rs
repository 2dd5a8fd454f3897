//! Trains the compact denoiser on a handful of synthetic plates and writes
//! checkpoints plus a JSONL loss log.
//!
//! cargo run --example train_small -- 500 /tmp/run
//!
//! A few thousand steps on 16 plates already beat bicubic upsampling.

use std::path::PathBuf;

use platesr::data::{synth_corpus, Origin, PairedSample, PlateSpec};
use platesr::trainer::{train, TrainConfig};
use platesr::{DenoiserConfig, NoiseSchedule};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(Ok(500), |s| s.parse())?;
    let out = args.next().map_or_else(|| std::env::temp_dir().join("platesr-run"), PathBuf::from);

    let samples = synth_corpus(16, 7, &PlateSpec::default())
        .into_iter()
        .map(|(id, hr)| PairedSample::from_hr(id, hr, 4, Origin::Synthetic))
        .collect::<platesr::Result<Vec<_>>>()?;
    let config = TrainConfig {
        base_lr: 1e-3,
        warmup_steps: 100.min(steps / 2),
        ema_decay: 0.995,
        crop_size: Some(48),
        augment_angles: Vec::new(),
        checkpoint_every: 250,
        epochs: 100_000,
        max_steps: Some(steps),
        ..TrainConfig::default()
    };
    let outcome = train(config, samples, DenoiserConfig::compact(), NoiseSchedule::rescaled(200)?, Some(out.as_path()))?;

    for chunk in outcome.log.steps.chunks(100) {
        let mean = chunk.iter().map(|r| r.loss).sum::<f64>() / chunk.len() as f64;
        println!("steps {:>5}..{:<5} mean loss {mean:.4}", chunk[0].step, chunk[chunk.len() - 1].step);
    }
    if let Some(last) = outcome.checkpoints.last() {
        println!("latest checkpoint: {}", last.display());
    }
    Ok(())
}
