use std::collections::BTreeMap;
use std::sync::OnceLock;

use proptest::prelude::*;
use proptest::sample::{select, subsequence};

use tod_core::action_control::{action_tokens_from_text, format_actions};
use tod_core::database::{bucket_of, parse_db_sentence, serialize_db_result, DomainMatches};
use tod_core::evaluation::corpus_bleu;
use tod_core::rl_training::shape_rewards;
use tod_core::state::{
    apply_gates, parse_belief_state, parse_domain_state, serialize_belief_state, serialize_domain_state,
};
use tod_core::tokenizer::{DONTCARE_VALUE, NONE_VALUE};
use tod_core::{
    parse_actions, post_process, render_actions, ActionTriple, BeliefState, ControlRules, Database, DbEntry, DbResult,
    DomainState, Ontology, RunningStats, SlotGate, Tokenizer,
};

fn ont() -> &'static Ontology {
    static O: OnceLock<Ontology> = OnceLock::new();
    O.get_or_init(Ontology::bundled)
}

fn catalog() -> Vec<ActionTriple> {
    ont().catalog().iter().cloned().collect()
}

const FOOD: [&str; 3] = ["indian", "italian", "chinese"];
const AREA: [&str; 3] = ["east", "centre", "north"];
const PRICE: [&str; 3] = ["cheap", "moderate", "expensive"];

fn toy_entry() -> impl Strategy<Value = DbEntry> {
    (select(&FOOD[..]), select(&AREA[..]), select(&PRICE[..]))
        .prop_map(|(f, a, p)| DbEntry::new("restaurant", [("food", f), ("area", a), ("pricerange", p)]))
}

fn constraint(values: &'static [&'static str]) -> impl Strategy<Value = &'static str> {
    prop_oneof![
        2 => Just(NONE_VALUE),
        1 => Just(DONTCARE_VALUE),
        2 => select(values),
    ]
}

fn toy_belief() -> impl Strategy<Value = BeliefState> {
    (constraint(&FOOD), constraint(&AREA), constraint(&PRICE)).prop_map(|(f, a, p)| {
        let mut b = BeliefState::initial(ont());
        b.set_by_name("restaurant", "food", f).unwrap();
        b.set_by_name("restaurant", "area", a).unwrap();
        b.set_by_name("restaurant", "pricerange", p).unwrap();
        b
    })
}

fn restaurant_on() -> DomainState {
    let mut d = DomainState::initial(ont());
    d.set(ont().goal_domain_index("restaurant").unwrap(), true);
    d
}

fn restaurant_matches(db: &Database, b: &BeliefState) -> Vec<DbEntry> {
    db.query(ont(), &restaurant_on(), b)
        .get("restaurant")
        .unwrap()
        .entries
        .clone()
}

fn closed_value_pool() -> Vec<String> {
    let mut pool: Vec<String> = ont().closed_values().values().flat_map(|v| v.iter().cloned()).collect();
    pool.push(DONTCARE_VALUE.into());
    pool.extend(["holy trinity church", "pipasha restaurant", "18:00"].map(String::from));
    pool
}

proptest! {
    #[test]
    fn domain_state_round_trips(flags in prop::collection::vec(any::<bool>(), ont().n_domains())) {
        let d = DomainState::from_flags(ont(), flags).unwrap();
        prop_assert_eq!(parse_domain_state(&serialize_domain_state(&d), ont()).unwrap(), d);
    }

    #[test]
    fn belief_state_round_trips(
        fills in prop::collection::vec(prop::option::weighted(0.3, select(closed_value_pool())), ont().n_slots())
    ) {
        let tok = Tokenizer::from_words(&["holy trinity church", "pipasha restaurant", "18:00"]);
        let mut b = BeliefState::initial(ont());
        for (i, v) in fills.iter().enumerate() {
            if let Some(v) = v {
                b.set(i, v);
            }
        }
        prop_assert_eq!(parse_belief_state(&serialize_belief_state(&b, &tok), ont()).unwrap(), b);
    }

    #[test]
    fn actions_round_trip(acts in subsequence(catalog(), 0..8).prop_shuffle()) {
        let seq = parse_actions(&render_actions(&acts), ont());
        prop_assert_eq!(&seq.parsed, &acts);
        prop_assert_eq!(seq.dropped_fragments, 0);
        let text = format_actions(&acts);
        prop_assert_eq!(parse_actions(&action_tokens_from_text(&text), ont()).parsed, acts);
    }

    #[test]
    fn parse_actions_never_yields_invalid_triples(words in prop::collection::vec(
        select(vec!["[hotel]", "[taxi]", "[general]", "[inform]", "[request]", "[book]", "[reqmore]", "name", "phone", "area", "junk"]),
        0..24,
    )) {
        let seq = parse_actions(&words, ont());
        prop_assert!(seq.parsed.iter().all(|t| ont().is_valid(t)));
        let mut dedup = seq.parsed.clone();
        dedup.sort();
        dedup.dedup();
        prop_assert_eq!(dedup.len(), seq.parsed.len());
    }

    #[test]
    fn db_sentence_round_trips(counts in prop::collection::vec(prop::option::of(0usize..40), ont().goal_domain_names().len())) {
        let mut r = DbResult::default();
        for (dn, c) in ont().goal_domain_names().into_iter().zip(counts) {
            if let Some(count) = c {
                r.domains.push(DomainMatches { domain: dn.to_string(), count, entries: Vec::new() });
            }
        }
        let want: Vec<(String, usize)> = r.domains.iter().map(|m| (m.domain.clone(), bucket_of(m.count))).collect();
        prop_assert_eq!(parse_db_sentence(&serialize_db_result(&r)).unwrap(), want);
    }

    #[test]
    fn db_query_equals_linear_scan(entries in prop::collection::vec(toy_entry(), 0..20), b in toy_belief()) {
        let db = Database::from_entries(entries.clone());
        let want: Vec<DbEntry> = entries
            .into_iter()
            .filter(|e| {
                ["food", "area", "pricerange"].iter().all(|s| {
                    let v = b.get_by_name("restaurant", s).unwrap();
                    v == NONE_VALUE || v == DONTCARE_VALUE || e.get(s) == Some(v)
                })
            })
            .collect();
        let got = db.query(ont(), &restaurant_on(), &b);
        let m = got.get("restaurant").unwrap();
        prop_assert_eq!(m.count, want.len());
        prop_assert_eq!(&m.entries, &want);
    }

    #[test]
    fn adding_a_constraint_narrows(
        entries in prop::collection::vec(toy_entry(), 0..20),
        b in toy_belief(),
        food in select(&FOOD[..]),
    ) {
        prop_assume!(b.get_by_name("restaurant", "food") == Some(NONE_VALUE));
        let db = Database::from_entries(entries);
        let wide = restaurant_matches(&db, &b);
        let mut tighter = b.clone();
        tighter.set_by_name("restaurant", "food", food).unwrap();
        let narrow = restaurant_matches(&db, &tighter);
        prop_assert!(narrow.len() <= wide.len());
        prop_assert!(narrow.iter().all(|e| wide.contains(e)));
    }

    #[test]
    fn inactive_domains_are_not_queried(entries in prop::collection::vec(toy_entry(), 0..10), b in toy_belief()) {
        let db = Database::from_entries(entries);
        let r = db.query(ont(), &DomainState::initial(ont()), &b);
        prop_assert!(r.get("restaurant").is_none());
    }

    #[test]
    fn copy_gates_are_identity(
        fills in prop::collection::vec(prop::option::weighted(0.3, select(closed_value_pool())), ont().n_slots())
    ) {
        let mut b = BeliefState::initial(ont());
        for (i, v) in fills.iter().enumerate() {
            if let Some(v) = v {
                b.set(i, v);
            }
        }
        let gates = vec![SlotGate::Copy; b.len()];
        prop_assert_eq!(apply_gates(&b, &gates, &BTreeMap::new()).unwrap(), b);
    }

    #[test]
    fn control_is_idempotent_and_preserves_input(acts in subsequence(catalog(), 0..8).prop_shuffle(), widen in any::<bool>()) {
        let rules = if widen { ControlRules::default().widened() } else { ControlRules::default() };
        let once = post_process(&acts, true, &rules);
        prop_assert_eq!(&once[..acts.len()], &acts[..]);
        prop_assert_eq!(post_process(&once, true, &rules), once.clone());
        prop_assert_eq!(post_process(&acts, false, &rules), acts.clone());
    }

    #[test]
    fn control_is_monotone(acts in subsequence(catalog(), 0..8), extra in select(catalog())) {
        let rules = ControlRules::default();
        let small = post_process(&acts, true, &rules);
        let mut more = acts.clone();
        if !more.contains(&extra) {
            more.push(extra);
        }
        let big = post_process(&more, true, &rules);
        prop_assert!(small.iter().all(|t| big.contains(t)));
    }

    #[test]
    fn returns_match_closed_form(
        turns in prop::collection::vec((1usize..16, -2.0f64..2.0), 1..6),
        success in -2.0f64..2.0,
        beta in 0.0f64..0.1,
        gamma in 0.5f64..1.0,
    ) {
        let lengths: Vec<usize> = turns.iter().map(|t| t.0).collect();
        let rates: Vec<f64> = turns.iter().map(|t| t.1).collect();
        let tr = shape_rewards(&lengths, success, &rates, beta, gamma).unwrap();
        for (turn, (n, rate)) in tr.turns.iter().zip(turns) {
            prop_assert_eq!(turn.returns.len(), n);
            for k in 1..=n {
                let want = gamma.powi((n - k) as i32) * (success + beta * rate);
                prop_assert!((turn.returns[k - 1] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn standardized_rewards_have_unit_scale(xs in prop::collection::vec(-10.0f64..10.0, 2..50)) {
        let mut s = RunningStats::new(0.0);
        for x in &xs {
            s.push(*x);
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        prop_assert!((s.mean() - mean).abs() < 1e-9);
        prop_assert!((s.std() - var.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn bleu_is_bounded_and_perfect_on_identity(
        sents in prop::collection::vec(prop::collection::vec(select(vec!["the", "hotel", "is", "in", "north", "a", "b"]), 4..12), 1..6)
    ) {
        let cands: Vec<Vec<String>> = sents.iter().map(|s| s.iter().map(|w| w.to_string()).collect()).collect();
        let refs: Vec<Vec<Vec<String>>> = cands.iter().map(|c| vec![c.clone()]).collect();
        let same = corpus_bleu(&cands, &refs).unwrap();
        prop_assert!((same - 100.0).abs() < 1e-9);
        let mut shuffled = cands.clone();
        for c in &mut shuffled {
            c.reverse();
        }
        let b = corpus_bleu(&shuffled, &refs).unwrap();
        prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
    }
}
