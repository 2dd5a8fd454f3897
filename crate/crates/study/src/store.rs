//! Session and choice state backed by two append-only JSONL files.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::Utc;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bundle::{StudyBundle, CHOICES};
use crate::error::{Result, StudyError};
use crate::results::{aggregate, StudyResults};
use crate::session::{ChoiceRecord, StudySession};

pub const SESSIONS_FILE: &str = "sessions.jsonl";
pub const CHOICES_FILE: &str = "choices.jsonl";

/// Client view of one question. Carries image URLs only, never method labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionView {
    pub session_id: String,
    pub question_index: usize,
    pub question_count: usize,
    pub images: Vec<ImageRef>,
    pub answered_position: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub position: usize,
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceAck {
    pub session_id: String,
    pub question_index: usize,
    pub position: usize,
    /// True when this exact choice was already on record.
    pub replayed: bool,
    pub answered: usize,
    pub completed: bool,
}

#[derive(Debug, Default)]
struct State {
    sessions: HashMap<String, StudySession>,
    session_count: u64,
    answers: HashMap<String, BTreeMap<usize, ChoiceRecord>>,
    log: Vec<ChoiceRecord>,
}

struct Appenders {
    sessions: File,
    choices: File,
}

pub struct StudyStore {
    bundle: StudyBundle,
    methods: Vec<String>,
    seed: Option<u64>,
    data_dir: PathBuf,
    state: RwLock<State>,
    writer: Mutex<Appenders>,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(StudyError::io(path, e)),
    };
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| StudyError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| StudyError::Log {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn append_line<T: Serialize>(file: &mut File, path: &Path, value: &T) -> Result<()> {
    let mut line = serde_json::to_string(value)?;
    line.push('\n');
    file.write_all(line.as_bytes())
        .and_then(|_| file.flush())
        .map_err(|e| StudyError::io(path, e))
}

fn open_append(path: &Path) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| StudyError::io(path, e))
}

impl StudyStore {
    /// Opens `data_dir`, replaying any existing logs. With `seed`, session ids
    /// and orders are a deterministic function of the seed and session number.
    pub fn open(bundle: StudyBundle, data_dir: impl AsRef<Path>, seed: Option<u64>) -> Result<Self> {
        let data_dir = data_dir.as_ref().to_path_buf();
        fs::create_dir_all(&data_dir).map_err(|e| StudyError::io(&data_dir, e))?;
        let (sp, cp) = (data_dir.join(SESSIONS_FILE), data_dir.join(CHOICES_FILE));
        let methods = bundle.methods();
        let store = Self {
            methods,
            seed,
            state: RwLock::new(State::default()),
            writer: Mutex::new(Appenders {
                sessions: open_append(&sp)?,
                choices: open_append(&cp)?,
            }),
            data_dir,
            bundle,
        };
        store.replay(&sp, &cp)?;
        Ok(store)
    }

    fn replay(&self, sessions_path: &Path, choices_path: &Path) -> Result<()> {
        let sessions: Vec<StudySession> = read_jsonl(sessions_path)?;
        let choices: Vec<ChoiceRecord> = read_jsonl(choices_path)?;
        let mut st = self.state.write().expect("state lock");
        for (n, s) in sessions.into_iter().enumerate() {
            if s.orders.len() != self.bundle.questions.len() {
                return Err(StudyError::Log {
                    path: sessions_path.to_path_buf(),
                    line: n + 1,
                    message: format!("{} orders for {} questions", s.orders.len(), self.bundle.questions.len()),
                });
            }
            st.session_count += 1;
            st.sessions.insert(s.session_id.clone(), s);
        }
        for (n, c) in choices.into_iter().enumerate() {
            let bad = |message: String| StudyError::Log {
                path: choices_path.to_path_buf(),
                line: n + 1,
                message,
            };
            let session = st
                .sessions
                .get(&c.session_id)
                .ok_or_else(|| bad(format!("unknown session {}", c.session_id)))?;
            let method = self
                .resolve(session, c.question_index, c.position)
                .map_err(|e| bad(e.to_string()))?;
            if method != c.chosen_method {
                return Err(bad(format!("position {} maps to {method}, log says {}", c.position, c.chosen_method)));
            }
            st.answers
                .entry(c.session_id.clone())
                .or_default()
                .entry(c.question_index)
                .or_insert_with(|| c.clone());
            st.log.push(c);
        }
        Ok(())
    }

    pub fn bundle(&self) -> &StudyBundle {
        &self.bundle
    }

    pub fn methods(&self) -> &[String] {
        &self.methods
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn question_count(&self) -> usize {
        self.bundle.questions.len()
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index == 0 || index > self.question_count() {
            return Err(StudyError::QuestionOutOfRange {
                index,
                count: self.question_count(),
            });
        }
        Ok(())
    }

    fn resolve(&self, session: &StudySession, index: usize, position: usize) -> Result<String> {
        self.check_index(index)?;
        if position == 0 || position > CHOICES {
            return Err(StudyError::InvalidPosition(position));
        }
        let slot = session.orders[index - 1][position - 1];
        Ok(self.bundle.questions[index - 1].method_labels[slot].clone())
    }

    pub fn create_session(&self, participant_label: Option<String>) -> Result<StudySession> {
        let mut w = self.writer.lock().expect("writer lock");
        let number = self.state.read().expect("state lock").session_count;
        let mut rng = match self.seed {
            Some(seed) => {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(number);
                r
            }
            None => ChaCha8Rng::from_os_rng(),
        };
        let session = StudySession::draw(&mut rng, self.question_count(), participant_label);
        append_line(&mut w.sessions, &self.data_dir.join(SESSIONS_FILE), &session)?;
        let mut st = self.state.write().expect("state lock");
        st.session_count += 1;
        st.sessions.insert(session.session_id.clone(), session.clone());
        Ok(session)
    }

    pub fn session(&self, session_id: &str) -> Result<StudySession> {
        self.state
            .read()
            .expect("state lock")
            .sessions
            .get(session_id)
            .cloned()
            .ok_or_else(|| StudyError::UnknownSession(session_id.to_string()))
    }

    pub fn question(&self, session_id: &str, index: usize) -> Result<QuestionView> {
        let st = self.state.read().expect("state lock");
        let session = st
            .sessions
            .get(session_id)
            .ok_or_else(|| StudyError::UnknownSession(session_id.to_string()))?;
        self.check_index(index)?;
        let q = &self.bundle.questions[index - 1];
        let images = session.orders[index - 1]
            .iter()
            .enumerate()
            .map(|(p, &slot)| ImageRef {
                position: p + 1,
                url: format!("/images/{}", q.image_files[slot]),
            })
            .collect();
        let answered_position = st
            .answers
            .get(session_id)
            .and_then(|a| a.get(&index))
            .map(|c| c.position);
        Ok(QuestionView {
            session_id: session_id.to_string(),
            question_index: index,
            question_count: self.question_count(),
            images,
            answered_position,
        })
    }

    /// Records a choice. The first valid answer is final: resubmitting the same
    /// position is acknowledged, a different one is rejected.
    pub fn submit(&self, session_id: &str, index: usize, position: usize) -> Result<ChoiceAck> {
        let mut w = self.writer.lock().expect("writer lock");
        let session = self.session(session_id)?;
        let method = self.resolve(&session, index, position)?;
        let ack = |st: &State, replayed: bool| {
            let answered = st.answers.get(session_id).map_or(0, |a| a.len());
            ChoiceAck {
                session_id: session_id.to_string(),
                question_index: index,
                position,
                replayed,
                answered,
                completed: answered == self.question_count(),
            }
        };
        {
            let st = self.state.read().expect("state lock");
            if let Some(prev) = st.answers.get(session_id).and_then(|a| a.get(&index)) {
                return if prev.position == position {
                    Ok(ack(&st, true))
                } else {
                    Err(StudyError::AlreadyAnswered {
                        index,
                        recorded: prev.position,
                    })
                };
            }
        }
        let record = ChoiceRecord {
            session_id: session_id.to_string(),
            question_index: index,
            question_id: self.bundle.questions[index - 1].question_id.clone(),
            position,
            chosen_method: method,
            recorded_at: Utc::now(),
        };
        append_line(&mut w.choices, &self.data_dir.join(CHOICES_FILE), &record)?;
        let mut st = self.state.write().expect("state lock");
        st.answers
            .entry(session_id.to_string())
            .or_default()
            .insert(index, record.clone());
        st.log.push(record);
        Ok(ack(&st, false))
    }

    pub fn results(&self) -> StudyResults {
        let st = self.state.read().expect("state lock");
        aggregate(&self.bundle.questions, &self.methods, st.sessions.len(), &st.log)
    }

    /// Reads an image from the bundle; only files referenced by a question are served.
    pub fn image(&self, name: &str) -> Result<Vec<u8>> {
        if !crate::bundle::is_plain_file_name(name) || !self.bundle.contains_image(name) {
            return Err(StudyError::UnknownImage(name.to_string()));
        }
        let path = self.bundle.images_dir().join(name);
        fs::read(&path).map_err(|e| StudyError::io(path, e))
    }
}
