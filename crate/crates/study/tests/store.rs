mod common;

use std::collections::HashMap;

use common::*;
use platesr_study::store::{CHOICES_FILE, SESSIONS_FILE};
use platesr_study::{aggregate, ChoiceRecord, StudyBundle, StudyError, StudySession, StudyStore};

#[test]
fn bundle_names_are_opaque_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = make_bundle(dir.path(), 14, 11);
    assert_eq!(bundle.questions.len(), 11);
    for q in &bundle.questions {
        assert_eq!(q.method_labels.to_vec(), METHODS.to_vec());
        for f in &q.image_files {
            assert!(METHODS.iter().all(|m| !f.contains(m)));
            assert!(!f.contains("plate"));
            assert!(bundle.images_dir().join(f).is_file());
        }
    }
    let again = StudyBundle::load(&bundle.root).unwrap();
    assert_eq!(again, bundle);
}

#[test]
fn too_few_images_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt");
    std::fs::create_dir_all(&gt).unwrap();
    let methods = [0, 1, 2].map(|k| (METHODS[k].to_string(), gt.clone()));
    std::fs::write(gt.join("a.png"), b"a").unwrap();
    let err = platesr_study::build_bundle(&gt, &methods, 2, 0, dir.path().join("b")).unwrap_err();
    assert!(matches!(err, StudyError::Bundle(_)));
}

#[test]
fn sessions_are_distinct_and_questions_stable() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = make_bundle(dir.path(), 11, 11);
    let store = StudyStore::open(bundle, dir.path().join("data"), None).unwrap();
    let a = store.create_session(Some("p1".into())).unwrap();
    let b = store.create_session(None).unwrap();
    assert_ne!(a.session_id, b.session_id);
    assert_eq!(a.orders.len(), 11);
    let q1 = store.question(&a.session_id, 3).unwrap();
    assert_eq!(q1.images.len(), 3);
    assert_eq!(q1, store.question(&a.session_id, 3).unwrap());
    let text = serde_json::to_string(&q1).unwrap();
    assert!(METHODS.iter().all(|m| !text.contains(m)));
    assert!(matches!(store.question(&a.session_id, 0), Err(StudyError::QuestionOutOfRange { .. })));
    assert!(matches!(store.question(&a.session_id, 12), Err(StudyError::QuestionOutOfRange { .. })));
    assert!(matches!(store.question("nope", 1), Err(StudyError::UnknownSession(_))));
}

#[test]
fn seeded_mode_reproduces_orders() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = make_bundle(dir.path(), 11, 11);
    let one = StudyStore::open(bundle.clone(), dir.path().join("d1"), Some(4)).unwrap();
    let two = StudyStore::open(bundle, dir.path().join("d2"), Some(4)).unwrap();
    for _ in 0..3 {
        let (a, b) = (one.create_session(None).unwrap(), two.create_session(None).unwrap());
        assert_eq!(a.session_id, b.session_id);
        assert_eq!(a.orders, b.orders);
    }
}

#[test]
fn submissions_resolve_through_the_stored_order() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = make_bundle(dir.path(), 11, 11);
    let data = dir.path().join("data");
    let store = StudyStore::open(bundle.clone(), &data, Some(1)).unwrap();
    let s = store.create_session(None).unwrap();
    let ack = store.submit(&s.session_id, 1, 2).unwrap();
    assert!(!ack.replayed && ack.answered == 1 && !ack.completed);
    let slot = s.orders[0][1];
    let results = store.results();
    assert_eq!(results.participants, 0);

    assert!(store.submit(&s.session_id, 1, 2).unwrap().replayed);
    assert!(matches!(store.submit(&s.session_id, 1, 3), Err(StudyError::AlreadyAnswered { recorded: 2, .. })));
    assert!(matches!(store.submit(&s.session_id, 2, 4), Err(StudyError::InvalidPosition(4))));
    assert!(matches!(store.submit(&s.session_id, 2, 0), Err(StudyError::InvalidPosition(0))));

    let log = std::fs::read_to_string(data.join(CHOICES_FILE)).unwrap();
    assert_eq!(log.lines().count(), 1);
    let rec: ChoiceRecord = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(rec.chosen_method, bundle.questions[0].method_labels[slot]);
    assert_eq!(rec.position, 2);
    assert_eq!(store.question(&s.session_id, 1).unwrap().answered_position, Some(2));

    for i in 2..=11 {
        let ack = store.submit(&s.session_id, i, 1).unwrap();
        assert_eq!(ack.completed, i == 11);
    }
    assert_eq!(store.results().participants, 1);
}

#[test]
fn replaying_the_logs_reproduces_results() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = make_bundle(dir.path(), 11, 11);
    let data = dir.path().join("data");
    let before = {
        let store = StudyStore::open(bundle.clone(), &data, Some(2)).unwrap();
        for k in 0..5 {
            let s = store.create_session(None).unwrap();
            let last = if k == 4 { 6 } else { 11 };
            for i in 1..=last {
                store.submit(&s.session_id, i, 1 + (i + k) % 3).unwrap();
            }
        }
        store.results()
    };
    assert_eq!(before.participants, 4);
    assert_eq!(before.sessions_started, 5);
    let store = StudyStore::open(bundle, &data, Some(2)).unwrap();
    assert_eq!(store.results(), before);
    let s = store.create_session(None).unwrap();
    let sessions = std::fs::read_to_string(data.join(SESSIONS_FILE)).unwrap();
    assert_eq!(sessions.lines().count(), 6);
    assert!(sessions.contains(&s.session_id));
}

#[test]
fn corrupted_log_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = make_bundle(dir.path(), 11, 11);
    let data = dir.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    std::fs::write(data.join(SESSIONS_FILE), "{not json}\n").unwrap();
    assert!(matches!(StudyStore::open(bundle, &data, None), Err(StudyError::Log { line: 1, .. })));
}

fn choice(sid: &str, q: usize, method: &str) -> ChoiceRecord {
    ChoiceRecord {
        session_id: sid.into(),
        question_index: q,
        question_id: format!("q{q}"),
        position: 1,
        chosen_method: method.into(),
        recorded_at: chrono::Utc::now(),
    }
}

#[test]
fn single_choice_gives_hundred_percent() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = make_bundle(dir.path(), 1, 1);
    let methods = bundle.methods();
    let r = aggregate(&bundle.questions, &methods, 1, &[choice("s", 1, "esrgan")]);
    assert_eq!(r.participants, 1);
    assert_eq!(r.average_percent["esrgan"], 100.0);
    assert_eq!(r.average_percent["ours"], 0.0);
    let empty = aggregate(&bundle.questions, &methods, 0, &[]);
    assert!(empty.average_percent.values().all(|&v| v == 0.0));
    assert_eq!(empty.per_question[0].counts.values().sum::<usize>(), 0);
}

#[test]
fn uniform_choices_split_evenly() {
    use rand::{Rng, SeedableRng};
    let dir = tempfile::tempdir().unwrap();
    let bundle = make_bundle(dir.path(), 11, 11);
    let methods = bundle.methods();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let mut log = Vec::new();
    for s in 0..1000 {
        for q in 1..=11 {
            log.push(choice(&format!("s{s}"), q, &methods[rng.random_range(0..3)]));
        }
    }
    let r = aggregate(&bundle.questions, &methods, 1000, &log);
    for m in &methods {
        assert!((r.average_percent[m] - 100.0 / 3.0).abs() < 5.0);
    }
    let total: f64 = r.average_percent.values().sum();
    assert!((total - 100.0).abs() < 1e-9);
    for q in &r.per_question {
        assert_eq!(q.counts.values().sum::<usize>(), 1000);
    }
}

#[test]
fn orders_are_uniform_over_permutations() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let n = 10_000;
    let mut counts: HashMap<[usize; 3], usize> = HashMap::new();
    for _ in 0..n {
        let s = StudySession::draw(&mut rng, 11, None);
        *counts.entry(s.orders[0]).or_default() += 1;
    }
    assert_eq!(counts.len(), 6);
    let p = 1.0 / 6.0;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    for (order, c) in counts {
        let f = c as f64 / n as f64;
        assert!((f - p).abs() < 3.0 * se, "{order:?}: {f}");
    }
}
