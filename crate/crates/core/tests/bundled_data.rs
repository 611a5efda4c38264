use lats_core::env::game24::game24_oracle;
use lats_core::env::{bundled_suite, load_tasks, make_env, EnvKind, TaskPayload, TaskSpec};
use lats_core::policy::{ActionKind, ActionSample};

fn suite(kind: EnvKind) -> Vec<TaskSpec> {
    load_tasks(&bundled_suite(kind)).unwrap()
}

#[test]
fn suite_sizes() {
    assert!(suite(EnvKind::Game24).len() >= 50);
    assert!(suite(EnvKind::Docqa).len() >= 20);
    assert!(suite(EnvKind::Shop).len() >= 20);
    assert!(suite(EnvKind::Solution).len() >= 20);
}

#[test]
fn game24_suite_is_solvable() {
    for t in suite(EnvKind::Game24) {
        let TaskPayload::Game24 { numbers } = t.payload else { panic!() };
        assert!(game24_oracle(&numbers).solvable, "{numbers:?}");
    }
}

#[test]
fn docqa_corpus_size_and_answers_present() {
    let tasks = suite(EnvKind::Docqa);
    let TaskPayload::Docqa(first) = &tasks[0].payload else { panic!() };
    let n = first.corpus.entities.len();
    assert!((90..=120).contains(&n), "{n}");
    for t in &tasks {
        let TaskPayload::Docqa(q) = &t.payload else { panic!() };
        let hit = q
            .corpus
            .entities
            .iter()
            .any(|e| e.title == q.answer || e.sentences.iter().any(|s| s.contains(&q.answer)));
        assert!(hit, "{}: answer {:?} not in corpus", t.task_id, q.answer);
    }
}

fn click(arg: &str) -> ActionSample {
    let kind = if arg == "Buy Now" {
        ActionKind::FinalAnswer
    } else {
        ActionKind::EnvAction
    };
    ActionSample::command(kind, "click", arg)
}

#[test]
fn every_shop_instruction_has_a_reachable_perfect_item() {
    let tasks = suite(EnvKind::Shop);
    let TaskPayload::Shop(first) = &tasks[0].payload else { panic!() };
    assert!((180..=220).contains(&first.catalog.len()));
    for t in &tasks {
        let TaskPayload::Shop(s) = &t.payload else { panic!() };
        let ins = &s.instruction;
        // independent re-count: all attributes, the option value offered, under the cap
        let target = s
            .catalog
            .iter()
            .find(|p| {
                ins.attributes.iter().all(|a| p.attributes.contains(a))
                    && ins.options.iter().all(|(g, v)| p.options.get(g).is_some_and(|vs| vs.contains(v)))
                    && p.price < ins.price_cap
            })
            .unwrap_or_else(|| panic!("{}: no perfect item", t.task_id));

        let mut env = make_env(t);
        let mut obs = env.step(&ActionSample::command(ActionKind::EnvAction, "search", ins.query.clone()));
        let tag = format!("[{}]", target.id);
        let mut pages = 0;
        while !obs.text.contains(&tag) {
            pages += 1;
            assert!(pages < 100, "{}: target never listed", t.task_id);
            obs = env.step(&click("Next >"));
            assert_ne!(obs.text, "Invalid action!", "{}: ran out of pages", t.task_id);
        }
        env.step(&click(&target.id));
        for v in ins.options.values() {
            env.step(&click(v));
        }
        let done = env.step(&click("Buy Now"));
        assert_eq!(done.reward, Some(1.0), "{}", t.task_id);
    }
}

/// Hand-written reference answers, in task order.
const REFERENCE: [&str; 22] = [
    "x+1",
    "2*x",
    "x*x",
    "abs(x)",
    "x-7",
    "3*x+2",
    "x^3",
    "max(x, 0)",
    "min(x, 10)",
    "x%3",
    "-x",
    "x*x-x",
    "abs(x-5)",
    "min(max(x, 0), 10)",
    "x*(x+1)/2",
    "x*(x+1)",
    "2^x",
    "x/2",
    "10-x",
    "(x+1)^2",
    "x^3-1",
    "100-x*x",
];

#[test]
fn solution_suite_matches_reference_answers() {
    let tasks = suite(EnvKind::Solution);
    assert_eq!(tasks.len(), REFERENCE.len());
    for (t, r) in tasks.iter().zip(REFERENCE) {
        let TaskPayload::Solution(s) = &t.payload else { panic!() };
        assert_eq!(s.score(r).0, 1.0, "{}: {r}", t.task_id);
        assert!(s.score("0").0 < 1.0, "{}: constant passes everything", t.task_id);
    }
}
