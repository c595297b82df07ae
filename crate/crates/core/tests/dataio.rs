mod common;

use std::fs;

use serde_json::Value;
use tod_core::dataio::{
    extract_labels, load_multiwoz, prepare_turns, CorpusCache, MultiWozVersion, PREPROCESS_VERSION,
};
use tod_core::state::apply_gates;
use tod_core::tokenizer::detokenize;
use tod_core::{ActionTriple, BeliefState, Error, Ontology};

use common::*;

fn copy_fixture(dir: &std::path::Path) {
    for entry in fs::read_dir(fixture_dir()).unwrap() {
        let entry = entry.unwrap();
        fs::copy(entry.path(), dir.join(entry.file_name())).unwrap();
    }
}

#[test]
fn fixture_splits_and_sizes() {
    let cache = corpus();
    let c = &cache.corpus;
    assert_eq!((c.train.len(), c.validation.len(), c.test.len()), (6, 4, 10));
    let pmul = c
        .test
        .iter()
        .find(|e| e.id == "PMUL2275")
        .expect("PMUL2275 in test split");
    assert_eq!(pmul.turns.len(), 9);
    assert!(c.all().filter(|e| e.turns.len() >= 10).count() >= 2);
    assert!(c.train.iter().any(|e| e.id == "MUL9001" && e.turns.len() == 9));
}

#[test]
fn sample_dialogue_annotations() {
    let cache = corpus();
    let ep = cache.corpus.test.iter().find(|e| e.id == "PMUL2275").unwrap();
    let first = &ep.turns[0];
    assert_eq!(first.user, "what is the address for holy trinity church ?");
    assert_eq!(
        first.belief.get_by_name("attraction", "name"),
        Some("holy trinity church")
    );
    assert_eq!(
        detokenize(&first.response_delex),
        "[attraction_name] is located on [attraction_address], postcode [attraction_postcode]. do you need any other information?"
    );
    assert!(first
        .actions
        .contains(&ActionTriple::new("attraction", "inform", Some("address"))));
    assert!(first.domains.is_on_by_name("attraction"));

    let booked = &ep.turns[4];
    assert!(booked.response_delex.contains(&"[restaurant_reference]".to_string()));
    assert_eq!(booked.belief.get_by_name("restaurant", "people"), Some("7"));
    assert_eq!(booked.belief.get_by_name("restaurant", "time"), Some("18:00"));
    assert!(booked
        .actions
        .contains(&ActionTriple::new("booking", "book", Some("reference"))));

    let taxi = &ep.turns[6];
    assert!(taxi.response_delex.contains(&"[taxi_car]".to_string()));
    assert!(taxi.response_delex.contains(&"[taxi_phone]".to_string()));

    let g = &ep.goal;
    assert_eq!(g.domains["restaurant"].info["food"], "indian");
    assert!(g.requested("restaurant").contains(&"reference".to_string()));
    assert!(g.requested("attraction").contains(&"postcode".to_string()));
}

#[test]
fn labels_replay_gold_beliefs() {
    let cache = corpus();
    for ep in cache.corpus.all() {
        let mut b = BeliefState::initial(&cache.ontology);
        for (turn, lab) in ep
            .turns
            .iter()
            .zip(extract_labels(ep, &cache.ontology, &cache.tokenizer, 12))
        {
            let lab = lab.expect("fixture turns are consistent");
            b = apply_gates(&b, &lab.gates, &lab.values).unwrap();
            assert_eq!(b, turn.belief, "{}", ep.id);
        }
    }
}

#[test]
fn dontcare_and_delete_gates_occur_in_fixture() {
    let cache = corpus();
    let gates: Vec<_> = cache
        .corpus
        .all()
        .flat_map(|ep| extract_labels(ep, &cache.ontology, &cache.tokenizer, 12))
        .flatten()
        .flat_map(|l| l.gates)
        .collect();
    for g in tod_core::SlotGate::ALL {
        assert!(gates.contains(&g), "{g:?} never appears");
    }
}

#[test]
fn prepared_turns_have_matching_shapes() {
    let cache = corpus();
    let turns = turns(&cache, true);
    let total: usize = cache.corpus.all().map(|e| e.turns.len()).sum();
    assert_eq!(turns.len(), total);
    for t in &turns {
        assert_eq!(t.labels.domain.len(), cache.ontology.n_domains());
        assert_eq!(t.labels.gates.len(), cache.ontology.n_slots());
        assert_eq!(t.init.slot_positions.len(), cache.ontology.n_slots());
        assert_eq!(*t.labels.actions.last().unwrap(), tod_core::tokenizer::EOS_ID);
        assert_eq!(*t.labels.response.last().unwrap(), tod_core::tokenizer::EOS_ID);
        for (s, v) in &t.labels.values {
            assert_eq!(t.labels.gates[*s], tod_core::SlotGate::Update);
            assert!(v.len() >= 2);
        }
    }
}

#[test]
fn multiword_values_are_single_tokens() {
    let cache = corpus();
    let words = cache
        .tokenizer
        .tokenize("a taxi from holy trinity church to pipasha restaurant");
    assert!(words.contains(&"holy trinity church".to_string()));
    assert!(words.contains(&"pipasha restaurant".to_string()));
}

#[test]
fn cache_round_trip_and_version_check() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.json");
    let cache = corpus();
    cache.save(&path).unwrap();
    let back = CorpusCache::load(&path).unwrap();
    assert_eq!(back, cache);
    assert_eq!(back.tokenizer.tokenize("holy trinity church"), ["holy trinity church"]);
    assert_eq!(
        back.ontology.slot_index("hotel", "area"),
        cache.ontology.slot_index("hotel", "area")
    );

    let mut json: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    json["preprocess_version"] = Value::from(PREPROCESS_VERSION + 1);
    fs::write(&path, json.to_string()).unwrap();
    assert!(matches!(CorpusCache::load(&path), Err(Error::Validation(_))));
}

#[test]
fn malformed_dialogues_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixture(dir.path());
    let data_path = dir.path().join("data.json");
    let mut data: Value = serde_json::from_str(&fs::read_to_string(&data_path).unwrap()).unwrap();
    data["BROKEN1.json"] = serde_json::json!({"goal": {}});
    data["BROKEN2.json"] = serde_json::json!({"goal": {}, "log": [{"text": "hello"}]});
    fs::write(&data_path, data.to_string()).unwrap();
    let (c, _) = load_multiwoz(dir.path(), MultiWozVersion::V21, &Ontology::bundled()).unwrap();
    assert_eq!(c.len(), 20);
}

#[test]
fn acts_can_come_from_a_separate_file() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixture(dir.path());
    let data_path = dir.path().join("data.json");
    let mut data: Value = serde_json::from_str(&fs::read_to_string(&data_path).unwrap()).unwrap();
    let mut acts = serde_json::Map::new();
    for (id, d) in data.as_object_mut().unwrap() {
        let mut per = serde_json::Map::new();
        for (i, entry) in d["log"].as_array_mut().unwrap().iter_mut().enumerate() {
            if let Some(a) = entry.as_object_mut().unwrap().remove("dialog_act") {
                if i % 2 == 1 {
                    per.insert(i.div_ceil(2).to_string(), a);
                }
            }
        }
        acts.insert(id.trim_end_matches(".json").to_string(), Value::Object(per));
    }
    fs::write(&data_path, data.to_string()).unwrap();
    fs::write(dir.path().join("dialogue_acts.json"), Value::Object(acts).to_string()).unwrap();
    let ont = Ontology::bundled();
    let (c, _) = load_multiwoz(dir.path(), MultiWozVersion::V20, &ont).unwrap();
    let (orig, _) = load_multiwoz(fixture_dir(), MultiWozVersion::V21, &ont).unwrap();
    assert_eq!(c, orig);
}

#[test]
fn missing_database_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixture(dir.path());
    fs::remove_file(dir.path().join("hotel_db.json")).unwrap();
    assert!(matches!(
        load_multiwoz(dir.path(), MultiWozVersion::V21, &Ontology::bundled()),
        Err(Error::Io { .. })
    ));
}

#[test]
fn version_names() {
    assert_eq!("2.1".parse::<MultiWozVersion>().unwrap(), MultiWozVersion::V21);
    assert_eq!(MultiWozVersion::V20.to_string(), "2.0");
    assert!("3.0".parse::<MultiWozVersion>().is_err());
}

#[test]
fn gold_contexts_fit_the_budget() {
    let cache = corpus();
    let episodes: Vec<_> = cache.corpus.all().cloned().collect();
    let turns = prepare_turns(&episodes, &cache.tokenizer, &cache.ontology, &cache.db, 512, 12).unwrap();
    assert!(turns.iter().all(|t| t.act.len() <= 512 && t.init.truncated == 0));
}
