//! Task-oriented dialogue toolkit: compact state-based contexts for a
//! shared transformer encoder, a recurrent action policy, response
//! generation, supervised pre-training, offline REINFORCE with shaped
//! rewards, rule-based action control, evaluation and MultiWOZ loading.

pub mod action_control;
pub mod autograd;
pub mod database;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod network;
pub mod ontology;
pub mod optim;
pub mod pipeline;
pub mod rl_training;
pub mod sl_training;
pub mod state;
pub mod tokenizer;

pub use action_control::{parse_actions, post_process, render_actions, ActionSequence, ControlRules};
pub use database::{BookingRef, Database, DbEntry, DbResult, SyntheticValues};
pub use dataio::{CorpusCache, CorpusSplit, DialogueEpisode, EpisodeTurn, MultiWozVersion};
pub use error::{Error, Result};
pub use evaluation::{EvalReport, GoalAnnotation};
pub use network::{checkpoint, EncoderConfig, EncoderVariant, Model, ModelConfig};
pub use ontology::{ActionTriple, DomainSpec, ImportantActionSet, Ontology, SlotSpec};
pub use pipeline::{step_turn, DialogueSystem, Session, TurnResult};
pub use rl_training::{ActionRateVariant, RewardTrace, RlTrainConfig, RunningStats};
pub use sl_training::{SlTrainConfig, TrainingTurn, TurnLabels};
pub use state::{BeliefState, DomainState, SlotGate, Stage, TurnContext};
pub use tokenizer::Tokenizer;
