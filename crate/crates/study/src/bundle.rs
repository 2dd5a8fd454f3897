//! The read-only study bundle: opaque image files plus `questions.json`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, StudyError};

pub const QUESTIONS_FILE: &str = "questions.json";
pub const IMAGES_DIR: &str = "images";
/// Alternatives per question.
pub const CHOICES: usize = 3;

/// One triplet. `image_files[k]` was produced by `method_labels[k]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: String,
    pub image_files: [String; CHOICES],
    pub method_labels: [String; CHOICES],
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyBundle {
    pub root: PathBuf,
    pub questions: Vec<Question>,
}

impl StudyBundle {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(QUESTIONS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| StudyError::io(&path, e))?;
        let questions: Vec<Question> = serde_json::from_str(&text)?;
        let bundle = Self { root, questions };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Non-empty, unique question ids, the same label set on every question,
    /// and every image present on disk.
    pub fn validate(&self) -> Result<()> {
        let first = self
            .questions
            .first()
            .ok_or_else(|| StudyError::Bundle("no questions".into()))?;
        let labels: BTreeSet<&String> = first.method_labels.iter().collect();
        if labels.len() != CHOICES {
            return Err(StudyError::Bundle(format!(
                "question {} repeats a method label",
                first.question_id
            )));
        }
        let mut ids = BTreeSet::new();
        for q in &self.questions {
            if !ids.insert(&q.question_id) {
                return Err(StudyError::Bundle(format!("duplicate question id {}", q.question_id)));
            }
            if q.method_labels.iter().collect::<BTreeSet<_>>() != labels {
                return Err(StudyError::Bundle(format!(
                    "question {} uses a different method set",
                    q.question_id
                )));
            }
            for f in &q.image_files {
                if !is_plain_file_name(f) || !self.images_dir().join(f).is_file() {
                    return Err(StudyError::Bundle(format!("missing image {f}")));
                }
            }
        }
        Ok(())
    }

    pub fn images_dir(&self) -> PathBuf {
        self.root.join(IMAGES_DIR)
    }

    /// Method labels in the order of the first question.
    pub fn methods(&self) -> Vec<String> {
        let mut m = self.questions[0].method_labels.to_vec();
        m.sort();
        m
    }

    pub fn contains_image(&self, name: &str) -> bool {
        self.questions.iter().any(|q| q.image_files.iter().any(|f| f == name))
    }
}

pub(crate) fn is_plain_file_name(name: &str) -> bool {
    !name.is_empty()
        && name != "."
        && name != ".."
        && !name.contains(['/', '\\'])
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn png_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = fs::read_dir(dir).map_err(|e| StudyError::io(dir, e))?;
    Ok(entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect())
}

/// Copies `questions` seeded-random triplets into `out_dir`. Only ids present
/// in `gt_dir` and in all three method directories are eligible. Image files
/// are renamed to a salted content hash so names carry no method hint.
pub fn build_bundle(
    gt_dir: impl AsRef<Path>,
    methods: &[(String, PathBuf); CHOICES],
    questions: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<StudyBundle> {
    let labels: BTreeSet<&String> = methods.iter().map(|(l, _)| l).collect();
    if labels.len() != CHOICES {
        return Err(StudyError::Bundle("method labels must be distinct".into()));
    }
    let mut common = png_stems(gt_dir.as_ref())?;
    for (_, dir) in methods {
        let stems = png_stems(dir)?;
        common.retain(|s| stems.contains(s));
    }
    if common.len() < questions || questions == 0 {
        return Err(StudyError::Bundle(format!(
            "{} images common to all directories, {questions} questions requested",
            common.len()
        )));
    }
    let mut ids: Vec<String> = common.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    ids.truncate(questions);

    let out = out_dir.as_ref().to_path_buf();
    let images = out.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(|e| StudyError::io(&images, e))?;
    let salt = seed.to_le_bytes();
    let mut list = Vec::with_capacity(questions);
    for (qi, id) in ids.iter().enumerate() {
        let mut files: [String; CHOICES] = Default::default();
        for (k, (label, dir)) in methods.iter().enumerate() {
            let src = dir.join(format!("{id}.png"));
            let bytes = fs::read(&src).map_err(|e| StudyError::io(&src, e))?;
            let mut h = Sha256::new();
            h.update(salt);
            h.update(label.as_bytes());
            h.update(&bytes);
            let name = format!("{}.png", &hex(&h.finalize())[..24]);
            let dst = images.join(&name);
            fs::write(&dst, &bytes).map_err(|e| StudyError::io(&dst, e))?;
            files[k] = name;
        }
        list.push(Question {
            question_id: format!("q{:02}_{id}", qi + 1),
            image_files: files,
            method_labels: methods.clone().map(|(l, _)| l),
        });
    }
    let path = out.join(QUESTIONS_FILE);
    fs::write(&path, serde_json::to_string_pretty(&list)?).map_err(|e| StudyError::io(&path, e))?;
    StudyBundle::load(out)
}
