//! Noises one synthetic plate at increasing steps and saves each frame.
//!
//! cargo run --example forward_process -- /tmp/forward

use std::path::PathBuf;

use platesr::data::{synth_corpus, PlateSpec};
use platesr::diffusion::{normal_image, q_sample};
use platesr::metrics::psnr;
use platesr::{NoiseSchedule, Range};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("platesr-forward"), PathBuf::from);
    std::fs::create_dir_all(&out)?;
    let schedule = NoiseSchedule::rescaled(200)?;
    let (_, plate) = synth_corpus(1, 3, &PlateSpec::default()).remove(0);
    let x0 = plate.convert(Range::Symmetric);
    let (h, w, c) = x0.dims();
    let eps = normal_image(&mut ChaCha8Rng::seed_from_u64(0), h, w, c);
    for t in [1, 10, 25, 50, 100, 200] {
        let frame = q_sample(&x0, t, &eps, &schedule)?.with_range(Range::Symmetric);
        let shown = frame.convert(Range::Unit);
        shown.save_png(out.join(format!("t{t:03}.png")))?;
        println!("t = {t:>3}: {:6.2} dB against the clean plate", psnr(&shown, &plate, 1.0)?);
    }
    println!("frames in {}", out.display());
    Ok(())
}
