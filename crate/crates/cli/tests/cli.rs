use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use clap::Parser;
use tod_cli::args::{Command as Sub, EncoderChoice, Switch};
use tod_cli::commands::{default_beta, encoder_config};
use tod_cli::Cli;
use tod_core::{ActionRateVariant, MultiWozVersion};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/multiwoz")
}

fn tod(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tod"))
        .args(args)
        .current_dir(dir)
        .env_remove("TOD_MODEL")
        .env_remove("TOD_CORPUS")
        .env_remove("TOD_CONTROL")
        .env_remove("TOD_PORT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn rl_flags_parse() {
    let cli = Cli::try_parse_from([
        "tod",
        "train-rl",
        "--model",
        "m.ckpt",
        "--variant",
        "weighted",
        "--beta",
        "1e-2",
        "--gamma",
        "0.9",
        "--gold-states",
    ])
    .unwrap();
    let Sub::TrainRl(a) = cli.command else {
        panic!("wrong subcommand")
    };
    assert_eq!(a.variant, ActionRateVariant::Weighted);
    assert_eq!(a.beta, Some(1e-2));
    assert_eq!(a.gamma, 0.9);
    assert!(a.gold_states);
    assert_eq!((a.lr, a.batch_size, a.clip_norm), (1e-2, 8, 1.0));
}

#[test]
fn sl_defaults() {
    let cli = Cli::try_parse_from(["tod", "train-sl"]).unwrap();
    let Sub::TrainSl(a) = cli.command else {
        panic!("wrong subcommand")
    };
    assert_eq!(a.encoder, EncoderChoice::Tiny);
    assert_eq!((a.lr, a.batch_size, a.dropout, a.clip_norm), (3e-5, 8, 0.2, 10.0));
    assert_eq!((a.max_epochs, a.min_epochs, a.patience), (40, 20, 5));
    let cli = Cli::try_parse_from(["tod", "train-sl", "--encoder", "reference", "--seed", "3"]).unwrap();
    let Sub::TrainSl(a) = cli.command else {
        panic!("wrong subcommand")
    };
    assert_eq!((a.encoder, a.seed), (EncoderChoice::Reference, 3));
}

#[test]
fn evaluate_control_flags() {
    let cli = Cli::try_parse_from(["tod", "evaluate", "--model", "m", "--control", "off", "--widen-control"]).unwrap();
    let Sub::Evaluate(a) = cli.command else {
        panic!("wrong subcommand")
    };
    assert_eq!(a.control.control, Switch::Off);
    assert!(a.control.widen_control);
}

#[test]
fn invalid_arguments_are_rejected() {
    for args in [
        &["tod", "train-rl", "--model", "m", "--variant", "greedy"][..],
        &["tod", "train-sl", "--encoder", "huge"],
        &["tod", "evaluate", "--model", "m", "--control", "maybe"],
        &["tod", "evaluate"],
        &["tod", "prepare-data", "--data-dir", "d", "--version", "2.4"],
        &["tod", "dance"],
    ] {
        assert!(Cli::try_parse_from(args).is_err(), "{args:?}");
    }
}

#[test]
fn beta_defaults_follow_the_corpus_version() {
    assert_eq!(default_beta(MultiWozVersion::V20), 1e-3);
    assert_eq!(default_beta(MultiWozVersion::V21), 1e-2);
}

#[test]
fn encoder_choices() {
    let t = encoder_config(EncoderChoice::Tiny, 300, 0.1).unwrap();
    assert_eq!((t.hidden_size, t.vocab_size, t.dropout), (64, 300, 0.1));
    let r = encoder_config(EncoderChoice::Reference, 300, 0.2).unwrap();
    assert_eq!((r.hidden_size, r.num_layers, r.vocab_size), (768, 12, 30522));
    assert!(encoder_config(EncoderChoice::Reference, 40_000, 0.2).is_err());
}

#[test]
fn usage_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = tod(dir.path(), &["evaluate", "--model", "missing.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint not found"));
    let out = tod(dir.path(), &["evaluate", "--unknown-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let out = tod(dir.path(), &["prepare-data", "--data-dir", "nowhere"]);
    assert!(!out.status.success());
}

#[test]
fn end_to_end_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let fx = fixtures();
    let out = ok(&tod(d, &["prepare-data", "--data-dir", fx.to_str().unwrap()]));
    assert!(out.contains("6 train / 4 validation / 10 test"), "{out}");

    ok(&tod(d, &["train-sl", "--max-steps", "2", "--log", "sl.jsonl"]));
    assert!(d.join("model.ckpt").is_file());

    let out = ok(&tod(
        d,
        &[
            "train-rl",
            "--model",
            "model.ckpt",
            "--max-steps",
            "1",
            "--variant",
            "none",
            "--log",
            "rl.jsonl",
        ],
    ));
    assert!(out.contains("variant none, beta 0.01"), "{out}");
    assert!(d.join("model-rl.ckpt").is_file());
    assert!(!std::fs::read_to_string(d.join("rl.jsonl")).unwrap().is_empty());

    let out = ok(&tod(
        d,
        &[
            "evaluate",
            "--model",
            "model-rl.ckpt",
            "--limit",
            "1",
            "--control",
            "off",
            "--report",
            "r.json",
        ],
    ));
    assert!(out.contains("inform") && out.contains("bleu"), "{out}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["metadata"]["dialogues"], 1);
    assert_eq!(report["metadata"]["control"], false);

    let mut child = Command::new(env!("CARGO_BIN_EXE_tod"))
        .args(["chat", "--model", "model.ckpt"])
        .current_dir(d)
        .env("RUST_LOG", "warn")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"i need a cheap hotel\n/reset\n/quit\n")
        .unwrap();
    let out = ok(&child.wait_with_output().unwrap());
    assert!(
        out.contains("turn 1") && out.contains("belief:") && out.contains("system:"),
        "{out}"
    );
    assert!(out.contains("new session"));

    serve_answers_health(d);
}

fn serve_answers_health(d: &Path) {
    let mut child = Command::new(env!("CARGO_BIN_EXE_tod"))
        .arg("serve")
        .current_dir(d)
        .env("TOD_MODEL", "model.ckpt")
        .env("TOD_CORPUS", "corpus.json")
        .env("TOD_PORT", "0")
        .env("TOD_CONTROL", "off")
        .env("RUST_LOG", "info")
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let addr = lines
        .by_ref()
        .map_while(Result::ok)
        .find_map(|l| l.split("listening on http://").nth(1).map(str::to_string))
        .expect("server announces its address");
    let mut stream = TcpStream::connect(addr.trim()).unwrap();
    stream
        .write_all(b"GET /health HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n")
        .unwrap();
    let mut resp = String::new();
    stream.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(
        resp.contains("\"status\":\"ok\"") && resp.contains("\"control_default\":false"),
        "{resp}"
    );
}
