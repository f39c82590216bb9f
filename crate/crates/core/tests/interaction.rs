mod common;

use neil_core::fixtures::*;
use neil_core::interaction::*;
use neil_core::policy::{Policy, QuestionContext};
use neil_core::sql::{Action, Agg, Op, Stage, State, Value};

fn figure_outcome(policy: &Policy, mu: f64, user: &mut dyn UserOracle) -> ParseOutcome {
    let cfg = InteractionConfig { mu, k: DEFAULT_K };
    parse_and_collect(cfg, figure_tokens(), &figure_table(), policy, user, 1, "figure-1").unwrap()
}

fn check_consistency(out: &ParseOutcome) {
    for e in &out.examples {
        let expected = match e.provenance {
            Provenance::Confident | Provenance::DemonstratedValid => 1,
            Provenance::DemonstratedInvalid => 0,
        };
        assert_eq!(e.weight, expected);
    }
    let demonstrated = out.examples.iter().filter(|e| e.provenance != Provenance::Confident).count();
    assert_eq!(out.interaction_count, demonstrated);
    assert_eq!(out.log.len(), out.examples.len());
}

#[test]
fn threshold_examples() {
    assert!(!is_uncertain(0.96, 0.95));
    assert!(!is_uncertain(0.95, 0.95));
    assert!(is_uncertain(0.10, 0.95));
}

#[test]
fn figure_walkthrough() {
    let policy = figure_policy();
    let mut user = SimulatedUser::new(&figure_gold());
    let out = figure_outcome(&policy, 0.95, &mut user);
    check_consistency(&out);
    assert_eq!(out.interaction_count, 1);
    assert_eq!(out.query, figure_gold());
    let asked: Vec<&StepLog> = out.log.iter().filter(|l| l.triggered).collect();
    assert_eq!(asked.len(), 1);
    let step = asked[0];
    assert_eq!(step.stage, Stage::WhereCol);
    assert_eq!(step.predicted, Action::WhereCol("School/Club Team".into()));
    assert!(step.prob < 0.95);
    assert_eq!(step.options[0], step.predicted);
    let player = step.options.iter().position(|o| *o == Action::WhereCol("Player".into())).unwrap();
    assert_eq!(step.response, Some(UserResponse::Choice(player)));
    assert_eq!(step.executed, Action::WhereCol("Player".into()));
    assert_eq!(step.weight, 1);
}

#[test]
fn figure_question_shape() {
    let table = figure_table();
    let tokens = figure_tokens();
    let ctx = QuestionContext::new(&tokens, &table);
    let gold = figure_gold().to_trajectory(tokens.clone(), "figure-1".into());
    let state = &gold.states[2];
    let dist = figure_policy().action_distribution(&ctx, state).unwrap();
    let predicted = Action::WhereCol("School/Club Team".into());
    let q = make_question(state, &predicted, &dist, 3).unwrap();
    assert_eq!(q.options.len(), 3);
    assert!(q.includes_none);
    assert!(q.text.contains("School/Club Team"));
    assert!(q.options.contains(&Action::WhereCol("Player".into())));
    assert!(q.option_probs.windows(2).skip(1).all(|w| w[0] >= w[1]));
    assert!(q.option_probs[0] >= q.option_probs[1]);

    let q1 = make_question(state, &predicted, &dist, 1).unwrap();
    assert_eq!(q1.options, vec![predicted.clone()]);
    let big = make_question(state, &predicted, &dist, 50).unwrap();
    assert_eq!(big.options.len(), dist.len());
    assert_eq!(big.fallback, *big.options.last().unwrap());
    assert!(make_question(state, &predicted, &dist, 0).is_err());
    assert!(make_question(state, &predicted, &[], 3).is_err());
}

fn five_way() -> (State, Vec<(Action, f64)>) {
    let state = State::initial(figure_tokens(), "figure-1".into()).child(Action::SelectCol("No.".into()));
    let dist = vec![
        (Action::SetAgg(Agg::None), 0.1),
        (Action::SetAgg(Agg::Count), 0.3),
        (Action::SetAgg(Agg::Max), 0.25),
        (Action::SetAgg(Agg::Min), 0.2),
        (Action::SetAgg(Agg::Sum), 0.15),
    ];
    (state, dist)
}

#[test]
fn none_of_above_executes_next_ranked() {
    let (state, dist) = five_way();
    let q = make_question(&state, &Action::SetAgg(Agg::Count), &dist, 3).unwrap();
    assert_eq!(q.options, vec![Action::SetAgg(Agg::Count), Action::SetAgg(Agg::Max), Action::SetAgg(Agg::Min)]);
    let (executed, ex) = incorporate_feedback(&q, UserResponse::NoneOfAbove, 2, "x").unwrap();
    assert_eq!(executed, Action::SetAgg(Agg::Sum));
    assert_eq!((ex.weight, ex.provenance), (0, Provenance::DemonstratedInvalid));

    let (executed, ex) = incorporate_feedback(&q, UserResponse::Choice(0), 2, "x").unwrap();
    assert_eq!(executed, Action::SetAgg(Agg::Count));
    assert_eq!((ex.weight, ex.provenance), (1, Provenance::DemonstratedValid));
    let (executed, _) = incorporate_feedback(&q, UserResponse::Choice(2), 2, "x").unwrap();
    assert_eq!(executed, Action::SetAgg(Agg::Min));
    assert!(matches!(incorporate_feedback(&q, UserResponse::Choice(3), 2, "x"), Err(InteractionError::ChoiceOutOfRange { index: 3, len: 3 })));

    // Pool exhausted: the last option is executed.
    let all = make_question(&state, &Action::SetAgg(Agg::Count), &dist, 5).unwrap();
    let (executed, _) = incorporate_feedback(&all, UserResponse::NoneOfAbove, 2, "x").unwrap();
    assert_eq!(executed, Action::SetAgg(Agg::None));
}

#[test]
fn simulated_user_answers() {
    let gold = figure_gold();
    let tokens = figure_tokens();
    let traj = gold.to_trajectory(tokens.clone(), "figure-1".into());
    let table = figure_table();
    let ctx = QuestionContext::new(&tokens, &table);
    let policy = figure_policy();
    let state = &traj.states[2];
    let dist = policy.action_distribution(&ctx, state).unwrap();
    let q = make_question(state, &Action::WhereCol("School/Club Team".into()), &dist, 3).unwrap();
    let idx = q.options.iter().position(|o| *o == Action::WhereCol("Player".into())).unwrap();
    assert_eq!(simulate_user(&q, &gold), UserResponse::Choice(idx));
    let q1 = make_question(state, &Action::WhereCol("School/Club Team".into()), &dist, 1).unwrap();
    assert_eq!(simulate_user(&q1, &gold), UserResponse::NoneOfAbove);

    // A wrong condition column was kept; its value has no correct option.
    let wrong = state.child(Action::WhereCol("School/Club Team".into())).child(Action::WhereOp(Op::Eq));
    let dist = policy.action_distribution(&ctx, &wrong).unwrap();
    let predicted = dist[0].0.clone();
    let q = make_question(&wrong, &predicted, &dist, 100).unwrap();
    assert!(q.options.contains(&Action::WhereVal(Value::text("jalen rose"))));
    assert_eq!(simulate_user(&q, &gold), UserResponse::NoneOfAbove);
}

#[test]
fn confident_correct_policy_never_asks() {
    let table = figure_table();
    let strong = common::hand_set(&figure_gold(), &table, figure_tokens(), 100.0);
    let mut user = ScriptedOracle::default();
    let out = figure_outcome(&strong, 0.95, &mut user);
    check_consistency(&out);
    assert_eq!(out.interaction_count, 0);
    assert!(out.examples.iter().all(|e| e.provenance == Provenance::Confident));
    assert_eq!(out.query, figure_gold());
}

#[test]
fn mu_one_with_expert_reproduces_gold() {
    let corpus = common::small_corpus(3);
    let tables = corpus.table_index();
    for policy in [Policy::zeros(), common::weak_policy(&corpus, &corpus.items[..100], 20)] {
        for item in &corpus.items[100..160] {
            let table = tables[item.table_id.as_str()];
            let mut user = SimulatedUser::new(&item.gold);
            let cfg = InteractionConfig { mu: 1.0, k: 1000 };
            let out = parse_and_collect(cfg, item.tokens(), table, &policy, &mut user, 1, &item.id).unwrap();
            check_consistency(&out);
            let gold = item.gold.to_trajectory(item.tokens(), item.table_id.as_str().into());
            let collected: Vec<&Action> = out.examples.iter().map(|e| &e.action).collect();
            assert_eq!(collected, gold.actions.iter().collect::<Vec<_>>());
            assert_eq!(out.query, item.gold);
            // With every option shown, the rejection path never fires on gold prefixes.
            assert!(out.log.iter().all(|l| l.response != Some(UserResponse::NoneOfAbove)));
        }
    }
}

#[test]
fn interactions_grow_with_mu_and_stay_sound() {
    let corpus = common::small_corpus(4);
    let tables = corpus.table_index();
    let policy = common::weak_policy(&corpus, &corpus.items[..150], 30);
    let mus = [0.0, 0.3, 0.5, 0.7, 0.9, 0.95, 0.99, 1.0];
    let mut violations = 0;
    for item in &corpus.items[150..250] {
        let table = tables[item.table_id.as_str()];
        let mut last = 0;
        for &mu in &mus {
            let mut user = SimulatedUser::new(&item.gold);
            let out = parse_and_collect(InteractionConfig { mu, k: 3 }, item.tokens(), table, &policy, &mut user, 1, &item.id).unwrap();
            check_consistency(&out);
            if out.interaction_count < last {
                violations += 1;
            }
            last = out.interaction_count;
            // A valid demonstration on a gold prefix keeps the prefix gold.
            let gold_actions = item.gold.actions();
            let mut prefix = Vec::new();
            for l in &out.log {
                let on_gold = gold_continuation(&gold_actions, &prefix).is_some();
                if on_gold && matches!(l.response, Some(UserResponse::Choice(_))) {
                    assert_eq!(Some(&l.executed), gold_continuation(&gold_actions, &prefix));
                }
                prefix.push(l.executed.clone());
            }
        }
    }
    assert_eq!(violations, 0);
}

#[test]
fn session_resumes_after_serialization() {
    let table = figure_table();
    let tokens = figure_tokens();
    let ctx = QuestionContext::new(&tokens, &table);
    let policy = figure_policy();
    let mut s = ParseSession::new(tokens.clone(), "figure-1", InteractionConfig::default(), 0, "figure-1").unwrap();
    assert!(matches!(s.answer(UserResponse::Choice(0), &policy, &ctx), Err(InteractionError::NoPending)));
    let q = s.advance(&policy, &ctx).unwrap().cloned().unwrap();
    assert_eq!(q.slot, Stage::WhereCol);
    assert!(matches!(s.answer(UserResponse::Choice(7), &policy, &ctx), Err(InteractionError::ChoiceOutOfRange { .. })));
    let json = serde_json::to_string(&s).unwrap();
    let mut restored: ParseSession = serde_json::from_str(&json).unwrap();
    assert_eq!(restored, s);
    let idx = q.options.iter().position(|o| *o == Action::WhereCol("Player".into())).unwrap();
    assert!(restored.answer(UserResponse::Choice(idx), &policy, &ctx).unwrap().is_none());
    assert!(restored.is_complete());
    assert_eq!(restored.query(&table).unwrap(), figure_gold());
    assert!(matches!(restored.answer(UserResponse::Choice(0), &policy, &ctx), Err(InteractionError::Complete)));
    assert!(ParseSession::new(tokens, "figure-1", InteractionConfig { mu: 1.5, k: 3 }, 0, "x").is_err());
}

#[test]
fn scripted_oracle_rejects_when_exhausted() {
    let policy = figure_policy();
    let mut user = ScriptedOracle::new([]);
    let out = figure_outcome(&policy, 0.95, &mut user);
    check_consistency(&out);
    assert_eq!(out.interaction_count, 1);
    let step = out.log.iter().find(|l| l.triggered).unwrap();
    assert_eq!(step.response, Some(UserResponse::NoneOfAbove));
    assert_eq!(step.weight, 0);
    assert_ne!(out.query, figure_gold());
}

#[test]
fn transcript_lines_have_documented_fields() {
    let mut user = SimulatedUser::new(&figure_gold());
    let out = figure_outcome(&figure_policy(), 0.95, &mut user);
    for l in &out.log {
        let v = serde_json::to_value(l).unwrap();
        for key in ["t", "stage", "predicted", "prob", "triggered", "options", "response", "executed", "weight"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}
