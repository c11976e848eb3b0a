use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set", "speaker_seconds=3",
    "--set", "n_train=4",
    "--set", "n_test=3",
    "--set", "segment_frames=24",
    "--set", "hidden_channels=4",
    "--set", "dilations=1,2",
    "--set", "embedding_dim=5",
    "--set", "batch_size=2",
    "--set", "checkpoint_every=2",
    "--set", "validation_examples=0",
];

fn dasep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dasep"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn dasep")
}

fn ok(args: &[&str]) -> String {
    let out = dasep(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn end_to_end_small_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");

    let mut args = vec!["synth-data", "--out", s(&data)];
    args.extend_from_slice(SMALL);
    let text = ok(&args);
    assert!(text.contains("test mixtures   3"), "{text}");

    let mut args = vec!["train", "--data", s(&data), "--run", s(&run), "--set", "steps=3"];
    args.extend_from_slice(SMALL);
    ok(&args);
    assert!(run.join("checkpoints/step_00000003.ckpt").is_file());
    assert!(run.join("metrics/train_loss.csv").is_file());
    // A second plain train into the same run directory is refused.
    assert!(!dasep(&args).status.success());

    ok(&["train", "--data", s(&data), "--run", s(&run), "--resume", "--set", "steps=5"]);
    assert!(run.join("checkpoints/step_00000005.ckpt").is_file());
    let losses = std::fs::read_to_string(run.join("metrics/train_loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 6, "{losses}");

    let sep = tmp.path().join("sep");
    let mix = data.join("test/000000_mix.wav");
    let text = ok(&["separate", "--checkpoint", s(&run), "--input", s(&mix), "--out", s(&sep)]);
    assert_eq!(text.lines().filter(|l| l.ends_with(".wav")).count(), 2, "{text}");

    let eval = tmp.path().join("eval");
    let manifest = data.join("test.tsv");
    let text = ok(&[
        "evaluate", "--checkpoint", s(&run), "--manifest", s(&manifest), "--out", s(&eval),
        "--limit", "2", "--mode", "streaming",
    ]);
    assert!(text.contains("examples  2"), "{text}");
    assert!(eval.join("metrics/summary.csv").is_file());

    let text = ok(&["info", "--checkpoint", s(&run)]);
    assert!(text.contains("parameters"), "{text}");
}

#[test]
fn exit_codes() {
    assert_eq!(dasep(&["info", "--set", "alpha=2"]).status.code(), Some(1));
    assert_eq!(dasep(&["info", "--set", "nonsense=1"]).status.code(), Some(1));
    assert_eq!(dasep(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(dasep(&["--help"]).status.code(), Some(0));
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.ckpt");
    let out = tmp.path().join("out");
    let args = ["separate", "--checkpoint", s(&missing), "--input", "x.wav", "--out", s(&out)];
    assert_eq!(dasep(&args).status.code(), Some(2));
}

#[test]
fn grad_check_passes() {
    let text = ok(&["grad-check", "--coords", "20"]);
    assert!(text.contains("max relative error"), "{text}");
}
