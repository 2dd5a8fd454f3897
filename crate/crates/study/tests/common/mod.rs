#![allow(dead_code)]

use std::path::{Path, PathBuf};

use platesr_study::{build_bundle, StudyBundle};

pub const METHODS: [&str; 3] = ["ours", "esrgan", "swinir"];

/// Writes `n` tiny distinct PNG-named files per directory and bundles `questions` of them.
pub fn make_bundle(root: &Path, n: usize, questions: usize) -> StudyBundle {
    let gt = root.join("gt");
    std::fs::create_dir_all(&gt).unwrap();
    let dirs: Vec<PathBuf> = METHODS.iter().map(|m| root.join(m)).collect();
    for d in &dirs {
        std::fs::create_dir_all(d).unwrap();
    }
    for i in 0..n {
        std::fs::write(gt.join(format!("plate_{i:04}.png")), format!("gt{i}")).unwrap();
        for (m, d) in METHODS.iter().zip(&dirs) {
            std::fs::write(d.join(format!("plate_{i:04}.png")), format!("{m}{i}")).unwrap();
        }
    }
    let methods = [0, 1, 2].map(|k| (METHODS[k].to_string(), dirs[k].clone()));
    build_bundle(&gt, &methods, questions, 9, root.join("bundle")).unwrap()
}
