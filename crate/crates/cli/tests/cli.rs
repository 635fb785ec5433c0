//! The `moonlite` binary at toy scale: exit codes, artifacts and resumption.

use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 14] = [
    "--set",
    "model.vision_width=8",
    "--set",
    "model.d_model=16",
    "--set",
    "model.ffn=32",
    "--set",
    "model.max_len=48",
    "--set",
    "fusion.dim=16",
    "--set",
    "sft.batch_size=2",
    "--set",
    "rl.queries=1",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moonlite"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_data(dir: &Path) {
    ok(&[
        "gen-data",
        "--out",
        s(dir),
        "--products",
        "200",
        "--triplets",
        "40",
        "--patches",
        "4",
        "--patch-dim",
        "6",
    ]);
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(run(&["gen-data"]).status.code(), Some(2));
    assert_eq!(
        run(&["gen-data", "--out", s(&data), "--products", "0"])
            .status
            .code(),
        Some(2)
    );
    gen_data(&data);
    let run_dir = dir.path().join("run");
    let bad_key = run(&[
        "train-sft",
        "--data",
        s(&data),
        "--run",
        s(&run_dir),
        "--set",
        "sft.nope=1",
    ]);
    assert_eq!(bad_key.status.code(), Some(2));
    let bad_init = run(&[
        "train-rl",
        "--data",
        s(&data),
        "--run",
        s(&run_dir),
        "--init",
        "/nonexistent.ckpt",
    ]);
    assert_eq!(bad_init.status.code(), Some(2));
}

#[test]
fn corrupt_data_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_data(&data);
    std::fs::write(data.join("universe.txt"), "garbage\n").unwrap();
    let out = run(&[
        "train-sft",
        "--data",
        s(&data),
        "--run",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(
        out.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn pipeline_artifacts_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_data(&data);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));

    let mut sft = vec![
        "train-sft",
        "--data",
        s(&data),
        "--run",
        s(&a),
        "--set",
        "sft.steps=4",
    ];
    sft.extend(TINY);
    ok(&sft);
    for f in [
        "config.echo",
        "logs/sft.log",
        "checkpoints/sft.ckpt",
        "checkpoints/sft.ckpt.opt",
    ] {
        assert!(a.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(a.join("logs/sft.log")).unwrap();
    assert_eq!(log.lines().count(), 5);

    // two steps, then resume to four: identical to the uninterrupted run
    let mut part = vec![
        "train-sft",
        "--data",
        s(&data),
        "--run",
        s(&b),
        "--set",
        "sft.steps=2",
    ];
    part.extend(TINY);
    ok(&part);
    let mut resume = vec![
        "train-sft",
        "--data",
        s(&data),
        "--run",
        s(&b),
        "--resume",
        "--set",
        "sft.steps=4",
    ];
    resume.extend(TINY);
    ok(&resume);
    for f in ["logs/sft.log", "checkpoints/sft.ckpt"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }

    let echo = a.join("config.echo");
    let ckpt = a.join("checkpoints/sft.ckpt");
    ok(&[
        "train-rl",
        "--data",
        s(&data),
        "--run",
        s(&a),
        "--init",
        s(&ckpt),
        "--config",
        s(&echo),
        "--set",
        "rl.steps=2",
    ]);
    assert_eq!(
        std::fs::read_to_string(a.join("logs/rl.log"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    let rl = a.join("checkpoints/rl.ckpt");
    let out = ok(&[
        "eval",
        "--data",
        s(&data),
        "--ckpt",
        s(&rl),
        "--config",
        s(&echo),
        "--pool",
        "16",
    ]);
    let report = String::from_utf8(out.stdout).unwrap();
    assert!(report.contains("retrieval.t->i.R@10="));
    assert!(report.contains("classify.acc="));

    let emb = dir.path().join("emb.bin");
    let rat = dir.path().join("rationales.tsv");
    ok(&[
        "embed",
        "--data",
        s(&data),
        "--ckpt",
        s(&rl),
        "--config",
        s(&echo),
        "--out",
        s(&emb),
        "--rationales",
        s(&rat),
    ]);
    assert!(emb.exists());
    assert_eq!(std::fs::read_to_string(&rat).unwrap().lines().count(), 200);
}
