#![allow(dead_code)]

use std::cell::RefCell;
use std::path::PathBuf;

use rand_chacha::ChaCha8Rng;
use tod_core::autograd::Graph;
use tod_core::dataio::{prepare_turns, CorpusCache, MultiWozVersion};
use tod_core::network::DecodeMode;
use tod_core::rl_training::{RlEnvironment, Rollout, RolloutTurn};
use tod_core::state::Stage;
use tod_core::tokenizer::{CLS_ID, SEP_ID};
use tod_core::{DialogueSystem, EncoderConfig, Model, ModelConfig, Ontology, Tokenizer, TrainingTurn, TurnContext};

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/multiwoz")
}

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn corpus() -> CorpusCache {
    CorpusCache::build(fixture_dir(), MultiWozVersion::V21, Ontology::bundled()).expect("fixture corpus loads")
}

pub fn turns(cache: &CorpusCache, all: bool) -> Vec<TrainingTurn> {
    let episodes: Vec<_> = if all {
        cache.corpus.all().cloned().collect()
    } else {
        cache.corpus.train.clone()
    };
    prepare_turns(&episodes, &cache.tokenizer, &cache.ontology, &cache.db, 512, 12).expect("fixture turns")
}

/// Encoder small enough for finite differences and fast loops.
pub fn micro_encoder(vocab: usize) -> EncoderConfig {
    EncoderConfig {
        hidden_size: 8,
        num_heads: 2,
        num_layers: 1,
        intermediate_size: 16,
        dropout: 0.0,
        ..EncoderConfig::tiny(vocab)
    }
}

pub fn model(encoder: EncoderConfig, ontology: &Ontology, seed: u64) -> Model {
    Model::new(ModelConfig::new(encoder, ontology), seed).expect("valid model config")
}

pub fn system(cache: &CorpusCache, encoder: EncoderConfig, seed: u64) -> DialogueSystem {
    let mut cfg = ModelConfig::new(encoder, &cache.ontology);
    cfg.max_action_len = 12;
    cfg.max_response_len = 16;
    let m = Model::new(cfg, seed).unwrap();
    DialogueSystem::new(m, cache.tokenizer.clone(), cache.ontology.clone(), cache.db.clone())
}

/// Single-context environment with two actions: an episode succeeds
/// exactly when the first sampled action word is `a`.
pub struct TwoActionEnv {
    pub tokenizer: Tokenizer,
    pub context: TurnContext,
    pub episodes: usize,
    pub with_truth: bool,
    /// P(a) at the first step, recorded before every policy update.
    pub trace: RefCell<Vec<f64>>,
}

impl TwoActionEnv {
    pub fn new(episodes: usize) -> Self {
        let tokenizer = Tokenizer::from_words(&["a", "b"]);
        let a = tokenizer.id("a").unwrap();
        let context = TurnContext {
            stage: Stage::Belief,
            tokens: vec![CLS_ID, a, SEP_ID],
            words: vec!["[CLS]".into(), "a".into(), "[SEP]".into()],
            domain_positions: Vec::new(),
            slot_positions: Vec::new(),
            utterance_len: 1,
            truncated: 0,
        };
        TwoActionEnv {
            tokenizer,
            context,
            episodes,
            with_truth: false,
            trace: RefCell::new(Vec::new()),
        }
    }

    pub fn model(&self, ontology: &Ontology, seed: u64) -> Model {
        let mut cfg = ModelConfig::new(
            EncoderConfig {
                hidden_size: 16,
                num_heads: 2,
                num_layers: 1,
                intermediate_size: 32,
                dropout: 0.0,
                ..EncoderConfig::tiny(self.tokenizer.vocab_size())
            },
            ontology,
        );
        cfg.max_action_len = 3;
        Model::new(cfg, seed).unwrap()
    }

    pub fn prob_a(&self, model: &Model) -> f64 {
        let mut g = Graph::new(&model.params);
        let out = model.encode(&mut g, &self.context, None).unwrap();
        let d = model.decode_actions(&mut g, &out, DecodeMode::Greedy);
        d.distributions[0][self.tokenizer.id("a").unwrap() as usize]
    }
}

impl RlEnvironment for TwoActionEnv {
    fn num_episodes(&self) -> usize {
        self.episodes
    }

    fn rollout(&self, model: &Model, index: usize, rng: &mut ChaCha8Rng) -> tod_core::Result<Rollout> {
        if index == 0 {
            self.trace.borrow_mut().push(self.prob_a(model));
        }
        let mut g = Graph::new(&model.params);
        let out = model.encode(&mut g, &self.context, None)?;
        let d = model.decode_actions(&mut g, &out, DecodeMode::Sample(rng));
        let success = f64::from(u8::from(d.steps.first() == self.tokenizer.id("a").as_ref()));
        Ok(Rollout {
            episode_id: format!("toy-{index}"),
            turns: vec![RolloutTurn {
                context: self.context.clone(),
                steps: d.steps,
                generated: Vec::new(),
                truth: self.with_truth.then(Vec::new),
            }],
            success,
        })
    }
}

/// One-sided sign test: P(X ≥ k) for X ~ Binomial(n, 1/2).
pub fn sign_test_p(positive: usize, n: usize) -> f64 {
    let mut p = 0.0;
    let mut c = 1.0f64;
    for k in 0..=n {
        if k > 0 {
            c = c * (n - k + 1) as f64 / k as f64;
        }
        if k >= positive {
            p += c;
        }
    }
    p / 2f64.powi(n as i32)
}
