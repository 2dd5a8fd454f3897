//! Three-alternative forced-choice (3-AFC) study service.
//!
//! A [`StudyBundle`] holds the triplets to show. A [`StudyStore`] hands out
//! sessions with an independent random order per question, records each
//! answer once in an append-only log, and folds the log into
//! [`StudyResults`]. [`server::router`] exposes it over HTTP.

pub mod bundle;
pub mod error;
pub mod results;
pub mod server;
pub mod session;
pub mod store;

pub use bundle::{build_bundle, Question, StudyBundle};
pub use error::{ErrorBody, Result, StudyError};
pub use results::{aggregate, StudyResults};
pub use session::{ChoiceRecord, StudySession};
pub use store::{ChoiceAck, QuestionView, StudyStore};
