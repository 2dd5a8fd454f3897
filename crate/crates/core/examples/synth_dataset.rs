//! Renders a synthetic plate corpus and writes it as a paired HR/LR dataset.
//!
//! cargo run --example synth_dataset -- 32 /tmp/plates

use std::path::PathBuf;

use platesr::data::{synth_corpus, Origin, PairedDataset, PlateSpec, SplitRule};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let count: usize = args.next().map_or(32, |s| s.parse().expect("count must be an integer"));
    let out = args.next().map_or_else(|| std::env::temp_dir().join("platesr-plates"), PathBuf::from);

    let images = synth_corpus(count, 11, &PlateSpec::default())
        .into_iter()
        .map(|(id, hr)| (id, hr, Origin::Synthetic))
        .collect();
    let dataset = PairedDataset::from_hr(images, SplitRule::Ratio(0.92), 0, 4)?;
    let manifest = dataset.write(&out)?;
    println!(
        "{} plates ({} train, {} test) written to {}",
        manifest.samples.len(),
        dataset.train().len(),
        dataset.test().len(),
        out.display()
    );
    Ok(())
}
