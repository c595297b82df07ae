//! Shared setup for the benchmarks under `benches/`.

use std::path::PathBuf;

use tod_core::dataio::prepare_turns;
use tod_core::{
    CorpusCache, DialogueSystem, EncoderConfig, Model, ModelConfig, MultiWozVersion, Ontology, TrainingTurn,
};

pub fn fixture_corpus() -> CorpusCache {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/multiwoz");
    CorpusCache::build(dir, MultiWozVersion::V21, Ontology::bundled()).expect("fixture corpus loads")
}

pub fn training_turns(cache: &CorpusCache) -> Vec<TrainingTurn> {
    prepare_turns(
        &cache.corpus.train,
        &cache.tokenizer,
        &cache.ontology,
        &cache.db,
        512,
        12,
    )
    .expect("fixture turns")
}

/// Tiny-encoder system with decoders capped for steady timings.
pub fn tiny_system(cache: &CorpusCache) -> DialogueSystem {
    let mut cfg = ModelConfig::new(EncoderConfig::tiny(cache.tokenizer.vocab_size()), &cache.ontology);
    cfg.max_action_len = 16;
    cfg.max_response_len = 24;
    let m = Model::new(cfg, 1).expect("valid config");
    DialogueSystem::new(m, cache.tokenizer.clone(), cache.ontology.clone(), cache.db.clone())
}
