//! Runs a small 3-AFC study end to end without a browser: builds a bundle,
//! opens a store, answers every question for a few simulated participants and
//! prints the aggregate.
//!
//! cargo run -p platesr-study --example scripted_study
//!
//! Serve the same data dir over HTTP with `platesr serve`.

use platesr_study::{build_bundle, StudyStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const METHODS: [&str; 3] = ["diffusion", "esrgan", "swinir"];
const QUESTIONS: usize = 11;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let work = tempfile_dir()?;
    let gt = work.join("gt");
    std::fs::create_dir_all(&gt)?;
    let mut methods = Vec::new();
    for m in METHODS {
        let dir = work.join(m);
        std::fs::create_dir_all(&dir)?;
        for i in 0..QUESTIONS {
            std::fs::write(dir.join(format!("plate_{i:04}.png")), format!("{m} output {i}"))?;
        }
        methods.push((m.to_string(), dir));
    }
    for i in 0..QUESTIONS {
        std::fs::write(gt.join(format!("plate_{i:04}.png")), format!("ground truth {i}"))?;
    }
    let methods: [(String, std::path::PathBuf); 3] = methods.try_into().expect("three methods");
    let bundle = build_bundle(&gt, &methods, QUESTIONS, 1, work.join("bundle"))?;
    let store = StudyStore::open(bundle, work.join("data"), Some(1))?;

    // Each participant prefers the first method with probability 0.8 and
    // otherwise picks a display position at random.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for p in 0..8 {
        let session = store.create_session(Some(format!("participant {p}")))?;
        for index in 1..=QUESTIONS {
            let preferred = store.bundle().questions[index - 1].method_labels.iter().position(|m| m == METHODS[0]).unwrap();
            let position = if rng.random_bool(0.8) {
                session.orders[index - 1].iter().position(|&slot| slot == preferred).unwrap() + 1
            } else {
                rng.random_range(1..=3)
            };
            store.submit(&session.session_id, index, position)?;
        }
    }

    let results = store.results();
    println!("{} of {} sessions completed", results.participants, results.sessions_started);
    for (method, pct) in &results.average_percent {
        println!("{method:>10}: {pct:5.1}%");
    }
    println!("logs in {}", store.data_dir().display());
    Ok(())
}

fn tempfile_dir() -> std::io::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join(format!("platesr-study-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
