//! Super-resolves synthetic plates with a trained checkpoint, saving the
//! result, the bicubic baseline and a strided trace of the reverse chain.
//!
//! cargo run --example super_resolve -- /tmp/run/checkpoint_000500.ckpt /tmp/sr

use std::path::PathBuf;

use platesr::data::{synth_corpus, PlateSpec};
use platesr::denoiser::read_checkpoint;
use platesr::diffusion::super_resolve;
use platesr::metrics::{psnr, ssim, SsimParams};
use platesr::resample::{degrade, upsample_bicubic};
use platesr::trainer::{checkpoint_schedule, sampling_denoiser};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let ckpt_path = args.next().ok_or("usage: super_resolve <checkpoint> [out_dir]")?;
    let out = args.next().map_or_else(|| std::env::temp_dir().join("platesr-sr"), PathBuf::from);
    std::fs::create_dir_all(&out)?;

    let ckpt = read_checkpoint(&ckpt_path)?;
    let schedule = checkpoint_schedule(&ckpt)?;
    let net = sampling_denoiser(&ckpt)?;
    let params = SsimParams::default();

    for (i, (id, hr)) in synth_corpus(2, 7, &PlateSpec::default()).into_iter().enumerate() {
        let lr = degrade(&hr, 4)?;
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let (sr, trace) = super_resolve(&net, &lr, &schedule, &mut rng, Some(schedule.timesteps() / 8))?;
        let sr = sr.quantized();
        let bicubic = upsample_bicubic(&lr, 4)?.quantized();

        sr.save_png(out.join(format!("{id}_sr.png")))?;
        bicubic.save_png(out.join(format!("{id}_bicubic.png")))?;
        for (t, frame) in trace.into_iter().flat_map(|t| t.steps) {
            frame.save_png(out.join(format!("{id}_t{t:04}.png")))?;
        }
        println!(
            "{id}: diffusion {:.2} dB / SSIM {:.4}, bicubic {:.2} dB / SSIM {:.4}",
            psnr(&sr, &hr, 1.0)?,
            ssim(&sr, &hr, &params)?,
            psnr(&bicubic, &hr, 1.0)?,
            ssim(&bicubic, &hr, &params)?
        );
    }
    println!("images in {}", out.display());
    Ok(())
}
