//! Scores nearest-neighbour and bicubic upsampling against ground truth on
//! disk, the same way trained outputs are scored.
//!
//! cargo run --example evaluate_baselines -- /tmp/eval

use std::path::PathBuf;

use platesr::data::{synth_corpus, PlateSpec};
use platesr::metrics::{evaluate_directories, SsimParams};
use platesr::resample::{degrade, upsample_bicubic};
use platesr::ImageTensor;

fn nearest(lr: &ImageTensor, factor: usize) -> ImageTensor {
    let (h, w, c) = lr.dims();
    ImageTensor::from_fn(h * factor, w * factor, c, lr.range(), |y, x, ch| lr.get(y / factor, x / factor, ch))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("platesr-eval"), PathBuf::from);
    let dirs = ["gt", "bicubic", "nearest"].map(|d| root.join(d));
    for d in &dirs {
        std::fs::create_dir_all(d)?;
    }
    for (id, hr) in synth_corpus(8, 5, &PlateSpec::default()) {
        let lr = degrade(&hr, 4)?;
        hr.save_png(dirs[0].join(format!("{id}.png")))?;
        upsample_bicubic(&lr, 4)?.save_png(dirs[1].join(format!("{id}.png")))?;
        nearest(&lr, 4).save_png(dirs[2].join(format!("{id}.png")))?;
    }
    let candidates = [("bicubic".to_string(), dirs[1].clone()), ("nearest".to_string(), dirs[2].clone())];
    let report = evaluate_directories(&dirs[0], &candidates, Some("bicubic"), &SsimParams::default())?;
    println!("{}", report.render());
    report.write(root.join("metrics.csv"), root.join("metrics.json"))?;
    Ok(())
}
