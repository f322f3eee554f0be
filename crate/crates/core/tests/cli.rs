use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
# small enough to run in well under a second
layers = 2
hidden = 16
heads = 4
ffn_dim = 24
max_seq = 8
seq_len = 6
train_size = 64
eval_size = 32
batch_size = 16
total_steps = 20
estimation_steps = 2
rho_f = 1/3
";

fn lpeft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lpeft"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = lpeft(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn exit_codes_separate_usage_config_and_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lpeft(&["run-all"]).status.code(), Some(1));
    assert_eq!(lpeft(&["frobnicate"]).status.code(), Some(1));

    let bad = config(dir.path(), "bad.cfg", "rho_m = 1.5\n");
    let out = lpeft(&["run-all", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rho_m"));

    let unknown = config(dir.path(), "unknown.cfg", "seed = 1\nwat = 2\n");
    let out = lpeft(&["run-all", "--config", s(&unknown)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let cfg = config(dir.path(), "ok.cfg", TINY);
    let garbage = config(dir.path(), "garbage.lpft", "LPFT not really");
    let out = lpeft(&["eval", "--config", s(&cfg), "--checkpoint", s(&garbage)]);
    assert_eq!(out.status.code(), Some(3));
    let out = lpeft(&["eval", "--config", s(&cfg), "--checkpoint", s(&dir.path().join("nope"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn run_all_report_covers_every_section_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "run.cfg", TINY);
    let report = |out: &str| ok(&["run-all", "--config", s(&cfg), "--out", s(&dir.path().join(out))]);
    let a = report("a");
    for section in [
        "config.",
        "estimation.",
        "plan.",
        "params.",
        "finetune.",
        "eval.",
        "time.",
    ] {
        assert!(a.lines().any(|l| l.starts_with(section)), "no {section} lines in\n{a}");
    }
    assert_eq!(fs::read_to_string(dir.path().join("a/report.txt")).unwrap(), a);
    assert!(dir.path().join("a/finetuned.lpft").exists());
    assert!(dir.path().join("a/importance.tsv").exists());

    let untimed = |t: &str| {
        t.lines()
            .filter(|l| !l.starts_with("time."))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(untimed(&a), untimed(&report("b")));

    let reseeded = ok(&[
        "run-all",
        "--config",
        s(&cfg),
        "--seed",
        "99",
        "--out",
        s(&dir.path().join("c")),
    ]);
    assert_ne!(untimed(&a), untimed(&reseeded));
}

#[test]
fn tsv_format_is_tab_separated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "run.cfg", TINY);
    let out = ok(&[
        "run-all",
        "--config",
        s(&cfg),
        "--format",
        "tsv",
        "--out",
        s(dir.path()),
    ]);
    assert!(
        out.lines().all(|l| l.split('\t').count() == 2 && !l.contains(" = ")),
        "{out}"
    );
    assert!(dir.path().join("report.tsv").exists());
}

#[test]
fn skipping_estimation_warns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "run.cfg",
        &TINY.replace("estimation_steps = 2", "estimation_steps = 0"),
    );
    let out = lpeft(&["run-all", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("estimation skipped; tie-break selection"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("estimation.skipped = true"));
}

#[test]
fn staged_commands_chain_and_adapters_swap() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config(d, "run.cfg", TINY);
    let c = s(&cfg);

    let out = ok(&["estimate", "--config", c, "--out", s(d)]);
    assert!(out.contains("estimated.lpft"));
    assert!(fs::read_to_string(d.join("importance.tsv"))
        .unwrap()
        .starts_with("module\t"));
    let est = d.join("estimated.lpft");

    // stages must come in order
    assert_eq!(
        lpeft(&["finetune", "--config", c, "--checkpoint", s(&est), "--out", s(d)])
            .status
            .code(),
        Some(2)
    );

    assert!(ok(&["prune", "--config", c, "--checkpoint", s(&est), "--out", s(d)]).contains("plan "));
    let pruned = d.join("pruned.lpft");
    let out = ok(&["finetune", "--config", c, "--checkpoint", s(&pruned), "--out", s(d)]);
    let acc = |text: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with("eval accuracy")).unwrap();
        line.rsplit(' ').next().unwrap().parse().unwrap()
    };
    let trained = acc(&out);
    let tuned = d.join("finetuned.lpft");
    assert_eq!(
        lpeft(&["prune", "--config", c, "--checkpoint", s(&tuned), "--out", s(d)])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(acc(&ok(&["eval", "--config", c, "--checkpoint", s(&tuned)])), trained);

    let swapped = ok(&["swap", "--config", c, "--base", s(&pruned), "--adapter", s(&tuned)]);
    assert_eq!(acc(&swapped), trained);

    // a checkpoint for another foundation is refused up front
    let other = config(d, "other.cfg", &format!("{TINY}foundation_seed = 7\n"));
    let out = lpeft(&["eval", "--config", s(&other), "--checkpoint", s(&tuned)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_and_sweep_print_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "run.cfg", TINY);
    let out = ok(&["bench", "--config", s(&cfg), "--mode", "pruned-vs-dense", "--reps", "1"]);
    assert!(out.lines().count() >= 3, "{out}");
    let out = ok(&[
        "sweep",
        "--config",
        s(&cfg),
        "--axis",
        "rho",
        "--values",
        "0,0.5",
        "--format",
        "tsv",
    ]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3, "{out}");
    assert!(lines[1].starts_with('0') && lines[2].starts_with("0.5"), "{out}");

    let one = lpeft(&["sweep", "--config", s(&cfg), "--axis", "rho", "--values", "0.5"]);
    assert_eq!(one.status.code(), Some(2));
}
