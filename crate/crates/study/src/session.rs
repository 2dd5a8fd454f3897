use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::CHOICES;

/// `order[p]` is the method slot shown at display position `p + 1`.
pub type Order = [usize; CHOICES];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySession {
    pub session_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub participant_label: Option<String>,
    /// One independent uniform permutation per question.
    pub orders: Vec<Order>,
    pub created_at: DateTime<Utc>,
}

impl StudySession {
    pub fn draw<R: Rng>(rng: &mut R, questions: usize, participant_label: Option<String>) -> Self {
        let id: u128 = rng.random();
        Self {
            session_id: format!("{id:032x}"),
            participant_label,
            orders: (0..questions).map(|_| draw_order(rng)).collect(),
            created_at: Utc::now(),
        }
    }
}

pub fn draw_order<R: Rng>(rng: &mut R) -> Order {
    let mut o = [0, 1, 2];
    o.shuffle(rng);
    o
}

/// One line of the append-only choice log. `question_index` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceRecord {
    pub session_id: String,
    pub question_index: usize,
    pub question_id: String,
    pub position: usize,
    pub chosen_method: String,
    pub recorded_at: DateTime<Utc>,
}
