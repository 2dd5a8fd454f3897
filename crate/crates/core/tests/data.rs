mod common;

use std::collections::BTreeSet;

use platesr::data::{
    augment_rotate, load_dataset, split_ids, synth_corpus, synth_plate, LoadOptions, Origin, PairedDataset, PlateSpec,
    Split, SplitRule,
};
use platesr::metrics::psnr;
use platesr::resample::{degrade, upsample_bicubic};
use platesr::{ImageTensor, Range};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn gradient(side: usize) -> ImageTensor {
    let s = (side - 1) as f64;
    ImageTensor::from_fn(side, side, 3, Range::Unit, |y, x, c| {
        let (u, v) = (x as f64 / s, y as f64 / s);
        match c {
            0 => 0.2 + 0.6 * u,
            1 => 0.8 - 0.5 * v,
            _ => 0.3 + 0.3 * (u + v) / 2.0,
        }
    })
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("img_{i:04}")).collect()
}

#[test]
fn small_rotations_nearly_invert() {
    let img = gradient(192);
    let back = augment_rotate(&augment_rotate(&img, 5.0), -5.0);
    let db = psnr(&back, &img, 1.0).unwrap();
    assert!(db > 30.0, "{db}");
    assert_eq!(back.dims(), img.dims());
    assert_ne!(augment_rotate(&img, 10.0), img);
}

#[test]
fn distinct_seeds_give_distinct_plates() {
    let spec = PlateSpec::default();
    let mut worst = 1.0f64;
    for seed in 0..100u64 {
        let a = synth_plate(&mut ChaCha8Rng::seed_from_u64(2 * seed), &spec);
        let b = synth_plate(&mut ChaCha8Rng::seed_from_u64(2 * seed + 1), &spec);
        let (pa, pb) = (a.to_rgb8_bytes(), b.to_rgb8_bytes());
        let pixels = pa.len() / 3;
        let differing = pa.chunks(3).zip(pb.chunks(3)).filter(|(x, y)| x != y).count();
        worst = worst.min(differing as f64 / pixels as f64);
    }
    assert!(worst > 0.01, "{worst}");
}

#[test]
fn corpus_is_reproducible() {
    let spec = PlateSpec::default();
    let a = synth_corpus(3, 4, &spec);
    assert_eq!(a, synth_corpus(3, 4, &spec));
    assert_eq!(a[0].0, "plate_0000");
    assert_ne!(a[0].1, a[1].1);
    assert!(a.iter().all(|(_, img)| img.dims() == (192, 192, 3)));
}

#[test]
fn split_counts_follow_the_rule() {
    let count = |rule, n| {
        let s = split_ids(&ids(n), rule, 3).unwrap();
        let train = s.values().filter(|v| **v == Split::Train).count();
        (train, n - train)
    };
    assert_eq!(count(SplitRule::Ratio(0.92), 593), (545, 48));
    assert_eq!(count(SplitRule::TrainCount(543), 593), (543, 50));
    assert_eq!(count(SplitRule::Ratio(0.5), 10), (5, 5));
    assert!(split_ids(&["a".into(), "a".into()], SplitRule::Ratio(0.5), 0).is_err());
}

proptest! {
    #[test]
    fn split_is_a_deterministic_partition(n in 1usize..200, ratio in 0.0f64..=1.0, seed in 0u64..1000) {
        let names = ids(n);
        let a = split_ids(&names, SplitRule::Ratio(ratio), seed).unwrap();
        prop_assert_eq!(&a, &split_ids(&names, SplitRule::Ratio(ratio), seed).unwrap());
        let keys: BTreeSet<&String> = a.keys().collect();
        prop_assert_eq!(keys, names.iter().collect::<BTreeSet<_>>());
        let train = a.values().filter(|v| **v == Split::Train).count();
        prop_assert_eq!(train, (ratio * n as f64).floor() as usize);
    }
}

fn small_dataset() -> PairedDataset {
    let images = synth_corpus(6, 1, &PlateSpec::default())
        .into_iter()
        .map(|(id, img)| (id, img, Origin::Synthetic))
        .collect();
    PairedDataset::from_hr(images, SplitRule::Ratio(0.5), 2, 4).unwrap()
}

#[test]
fn augmentation_stays_on_the_training_side() {
    let ds = small_dataset().with_augmented_train(&[5.0, -5.0]).unwrap();
    assert_eq!(ds.train().len(), 3 * 3);
    assert_eq!(ds.test().len(), 3);
    for s in &ds.samples {
        assert_eq!(degrade(&s.hr, 4).unwrap(), s.lr, "{}", s.id);
        assert_eq!(s.lr.dims(), (48, 48, 3));
        if s.origin == Origin::Augmented {
            assert_eq!(ds.split_of(&s.id), Some(Split::Train));
            let base = s.id.split('@').next().unwrap();
            assert_eq!(ds.split_of(base), Some(Split::Train));
        }
    }
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset();
    let manifest = ds.write(dir.path()).unwrap();
    assert_eq!(manifest.samples.len(), 6);
    let back = PairedDataset::read(dir.path()).unwrap();
    assert_eq!(back.split, ds.split);
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.hr.quantized(), b.hr);
        assert_eq!(degrade(&b.hr, 4).unwrap(), b.lr);
    }
}

#[test]
fn loader_skips_bad_files_and_fits_odd_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (i, side) in [192usize, 192, 150].iter().enumerate() {
        gradient(*side).save_png(d.join(format!("p{i}.png"))).unwrap();
    }
    std::fs::write(d.join("broken.png"), b"not a png").unwrap();
    std::fs::write(d.join("notes.txt"), b"ignored").unwrap();
    let opts = LoadOptions { split: SplitRule::TrainCount(2), ..LoadOptions::default() };
    let (ds, report) = load_dataset(d, &opts).unwrap();
    assert_eq!(ds.samples.len(), 3);
    assert_eq!((ds.train().len(), ds.test().len()), (2, 1));
    assert_eq!(report.skipped.len(), 1);
    assert_eq!(report.resized.len(), 1);
    assert!(ds.samples.iter().all(|s| s.hr.dims() == (192, 192, 3)));

    let empty = tempfile::tempdir().unwrap();
    assert!(load_dataset(empty.path(), &opts).is_err());
}

#[test]
fn bicubic_resampling_contracts() {
    let hr = gradient(192);
    let lr = degrade(&hr, 4).unwrap();
    assert_eq!(lr.dims(), (48, 48, 3));
    assert_eq!(degrade(&hr, 1).unwrap(), hr);
    assert_eq!(upsample_bicubic(&lr, 4).unwrap().dims(), (192, 192, 3));
    let flat = ImageTensor::filled(48, 48, 3, Range::Unit, 0.42);
    for v in upsample_bicubic(&flat, 4).unwrap().values() {
        assert!((v - 0.42).abs() < 1e-12);
    }
    assert!(degrade(&hr, 0).is_err());
}
