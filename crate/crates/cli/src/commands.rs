use std::fs::File;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use tod_core::action_control::format_actions;
use tod_core::dataio::prepare_turns;
use tod_core::network::checkpoint;
use tod_core::ontology::load_ontology;
use tod_core::rl_training::{train_rl, GoalSuccess, OfflineEnvironment};
use tod_core::sl_training::{train_sl, ValidationLoss};
use tod_core::{
    step_turn, ControlRules, CorpusCache, DialogueSystem, EncoderConfig, Model, ModelConfig, MultiWozVersion, Ontology,
    RlTrainConfig, Session, SlTrainConfig, TurnResult,
};

use crate::args::*;

/// A bad invocation the user can fix; exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

const CONTEXT_LIMIT: usize = 512;
const VALUE_LIMIT: usize = 12;

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData(a) => prepare_data(a),
        Command::TrainSl(a) => train_sl_cmd(a),
        Command::TrainRl(a) => train_rl_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Chat(a) => chat(a, std::io::stdin().lock(), std::io::stdout().lock()),
        Command::Serve(a) => crate::server::serve(a),
    }
}

fn existing(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(UsageError(format!("{what} not found: {}", path.display())).into());
    }
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<CorpusCache> {
    existing(path, "corpus cache")?;
    CorpusCache::load(path).with_context(|| format!("loading {}", path.display()))
}

pub fn load_rules(args: &ControlArgs, ontology: &Ontology) -> Result<ControlRules> {
    let rules = match &args.rules {
        Some(p) => ControlRules::load(p, ontology)?,
        None => ControlRules::default(),
    };
    Ok(if args.widen_control { rules.widened() } else { rules })
}

/// Checkpoint plus the corpus database, ready for inference.
pub fn load_system(model: &Path, corpus: &Path, control: &ControlArgs) -> Result<DialogueSystem> {
    existing(model, "checkpoint")?;
    let cache = load_corpus(corpus)?;
    let (m, tok, ont) = checkpoint::load(model).with_context(|| format!("loading {}", model.display()))?;
    let rules = load_rules(control, &ont)?;
    Ok(DialogueSystem::new(m, tok, ont, cache.db).with_rules(rules))
}

fn log_file(path: &Option<PathBuf>) -> Result<Option<File>> {
    path.as_ref()
        .map(|p| File::create(p).with_context(|| format!("creating {}", p.display())))
        .transpose()
}

fn prepare_data(a: PrepareArgs) -> Result<()> {
    let ontology = match &a.ontology {
        Some(p) => load_ontology(p)?,
        None => Ontology::bundled(),
    };
    let cache = CorpusCache::build(&a.data_dir, a.version, ontology)?;
    cache.save(&a.out)?;
    let c = &cache.corpus;
    println!(
        "wrote {}: {} train / {} validation / {} test dialogues, {} lexicon entries",
        a.out.display(),
        c.train.len(),
        c.validation.len(),
        c.test.len(),
        cache.tokenizer.vocab_size()
    );
    Ok(())
}

pub fn encoder_config(choice: EncoderChoice, vocab: usize, dropout: f64) -> Result<EncoderConfig> {
    let cfg = match choice {
        EncoderChoice::Tiny => EncoderConfig::tiny(vocab),
        EncoderChoice::Reference => {
            let r = EncoderConfig::reference();
            if vocab > r.vocab_size {
                bail!(
                    "lexicon has {vocab} entries, more than the reference encoder's {}",
                    r.vocab_size
                );
            }
            r
        }
    };
    Ok(EncoderConfig { dropout, ..cfg })
}

fn train_sl_cmd(a: TrainSlArgs) -> Result<()> {
    let cache = load_corpus(&a.corpus.corpus)?;
    let prep = |eps: &[_]| {
        prepare_turns(
            eps,
            &cache.tokenizer,
            &cache.ontology,
            &cache.db,
            CONTEXT_LIMIT,
            VALUE_LIMIT,
        )
    };
    let train = prep(&cache.corpus.train)?;
    let validation = prep(&cache.corpus.validation)?;
    info!("{} training turns, {} validation turns", train.len(), validation.len());
    let enc = encoder_config(a.encoder, cache.tokenizer.vocab_size(), a.dropout)?;
    let mut model = Model::new(ModelConfig::new(enc, &cache.ontology), a.seed)?;
    let cfg = SlTrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        dropout: a.dropout,
        clip_norm: a.clip_norm,
        max_epochs: a.max_epochs,
        min_epochs: a.min_epochs,
        patience: a.patience,
        seed: a.seed,
        max_steps: a.max_steps,
    };
    let mut log = log_file(&a.log)?;
    let val = if validation.is_empty() { &train } else { &validation };
    let out = train_sl(
        &mut model,
        &train,
        &mut ValidationLoss(val),
        &cfg,
        log.as_mut().map(|f| f as &mut dyn Write),
    )?;
    checkpoint::save(&a.out, &model, &cache.tokenizer, &cache.ontology)?;
    let best = if out.best_epoch == 0 {
        "no completed epoch".to_string()
    } else {
        format!("best validation loss {:.4} at epoch {}", out.best_score, out.best_epoch)
    };
    println!(
        "{} epochs, {} steps, {best}; wrote {}",
        out.epochs_run,
        out.steps,
        a.out.display()
    );
    Ok(())
}

pub fn default_beta(version: MultiWozVersion) -> f64 {
    match version {
        MultiWozVersion::V20 => 1e-3,
        MultiWozVersion::V21 => 1e-2,
    }
}

fn train_rl_cmd(a: TrainRlArgs) -> Result<()> {
    let control = ControlArgs {
        control: Switch::Off,
        widen_control: false,
        rules: None,
    };
    let system = load_system(&a.model, &a.corpus.corpus, &control)?;
    let cache = load_corpus(&a.corpus.corpus)?;
    let cfg = RlTrainConfig {
        beta: a.beta.unwrap_or_else(|| default_beta(cache.source_version)),
        gamma: a.gamma,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        clip_norm: a.clip_norm,
        variant: a.variant,
        epochs: a.epochs,
        seed: a.seed,
        max_steps: a.max_steps,
        ..Default::default()
    };
    let evaluator = GoalSuccess(&system.ontology);
    let env = OfflineEnvironment::new(&system, &cache.corpus.train, &evaluator, a.gold_states)?;
    let mut model = system.model.clone();
    let mut log = log_file(&a.log)?;
    let out = train_rl(
        &mut model,
        &env,
        system.ontology.important(),
        &cfg,
        log.as_mut().map(|f| f as &mut dyn Write),
    )?;
    checkpoint::save(&a.out, &model, &system.tokenizer, &system.ontology)?;
    println!(
        "{} updates over {} episodes (variant {}, beta {}), mean success {:.3}; wrote {}",
        out.steps,
        out.episodes,
        cfg.variant,
        cfg.beta,
        out.success_stats.mean(),
        a.out.display()
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let system = load_system(&a.model, &a.corpus.corpus, &a.control)?;
    let cache = load_corpus(&a.corpus.corpus)?;
    let split = match a.split {
        SplitChoice::Train => &cache.corpus.train,
        SplitChoice::Validation => &cache.corpus.validation,
        SplitChoice::Test => &cache.corpus.test,
    };
    let episodes = &split[..a.limit.unwrap_or(split.len()).min(split.len())];
    let report =
        tod_core::evaluation::evaluate_corpus(&system, episodes, a.control.control.enabled(), a.variant, a.seed)?;
    print!("{}", report.table());
    if let Some(p) = &a.report {
        let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
        serde_json::to_writer_pretty(f, &report)?;
    }
    Ok(())
}

pub fn describe_turn(r: &TurnResult) -> String {
    let domains: Vec<&str> = r.domain_state.active().map(|(_, d)| d).collect();
    let belief: Vec<String> = r
        .belief_state
        .filled()
        .map(|(_, d, s, v)| format!("{d}-{s}={v}"))
        .collect();
    let mut out = format!(
        "domains:  {}\nbelief:   {}\ndb:       {:?}\nactions:  {}\n",
        domains.join(" "),
        belief.join(", "),
        r.db_summary,
        format_actions(&r.actions_controlled)
    );
    if r.actions_controlled != r.actions_raw {
        out += &format!("raw:      {}\n", format_actions(&r.actions_raw));
    }
    out += &format!("delex:    {}\nsystem:   {}\n", r.response_delex, r.response);
    for w in &r.warnings {
        out += &format!("warning:  {w}\n");
    }
    out
}

/// Reads utterances line by line. `/reset` opens a new session,
/// `/control on|off` switches post-processing, `/quit` or EOF ends.
pub fn chat(a: ChatArgs, input: impl BufRead, mut output: impl Write) -> Result<()> {
    let system = load_system(&a.model, &a.corpus.corpus, &a.control)?;
    let new_session = |control| Session::new("chat", &system.ontology, control, a.seed);
    let mut session = new_session(a.control.control.enabled());
    writeln!(output, "type an utterance; /reset, /control on|off, /quit")?;
    for line in input.lines() {
        let line = line?;
        match line.trim() {
            "/quit" => break,
            "/reset" => {
                session = new_session(session.control);
                writeln!(output, "new session")?;
            }
            "/control on" => session.control = true,
            "/control off" => session.control = false,
            u => {
                let r = step_turn(&system, &mut session, u)?;
                write!(output, "turn {}\n{}", r.turn, describe_turn(&r))?;
            }
        }
        output.flush()?;
    }
    Ok(())
}
