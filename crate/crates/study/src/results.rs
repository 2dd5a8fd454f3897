use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::bundle::Question;
use crate::session::ChoiceRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionCounts {
    pub question_id: String,
    pub counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResults {
    /// Sessions that answered every question; only these are counted.
    pub participants: usize,
    pub sessions_started: usize,
    pub per_question: Vec<QuestionCounts>,
    /// Per-question selection percentage, averaged over questions.
    pub average_percent: BTreeMap<String, f64>,
}

/// Pure fold over the choice log.
pub fn aggregate<'a>(
    questions: &[Question],
    methods: &[String],
    sessions_started: usize,
    choices: impl IntoIterator<Item = &'a ChoiceRecord>,
) -> StudyResults {
    let mut by_session: HashMap<&str, BTreeMap<usize, &ChoiceRecord>> = HashMap::new();
    for c in choices {
        by_session
            .entry(c.session_id.as_str())
            .or_default()
            .entry(c.question_index)
            .or_insert(c);
    }
    let zero: BTreeMap<String, usize> = methods.iter().map(|m| (m.clone(), 0)).collect();
    let mut per_question: Vec<QuestionCounts> = questions
        .iter()
        .map(|q| QuestionCounts {
            question_id: q.question_id.clone(),
            counts: zero.clone(),
        })
        .collect();
    let complete = |answers: &BTreeMap<usize, &ChoiceRecord>| (1..=questions.len()).all(|i| answers.contains_key(&i));
    let mut participants = 0;
    for answers in by_session.values().filter(|a| complete(a)) {
        participants += 1;
        for (&i, rec) in answers.range(1..=questions.len()) {
            *per_question[i - 1].counts.entry(rec.chosen_method.clone()).or_insert(0) += 1;
        }
    }
    let average_percent = methods
        .iter()
        .map(|m| {
            let pct = if participants == 0 || questions.is_empty() {
                0.0
            } else {
                let sum: f64 = per_question
                    .iter()
                    .map(|q| q.counts[m] as f64 / participants as f64 * 100.0)
                    .sum();
                sum / questions.len() as f64
            };
            (m.clone(), pct)
        })
        .collect();
    StudyResults {
        participants,
        sessions_started,
        per_question,
        average_percent,
    }
}
