use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};

const SUBCOMMANDS: &[&str] = &[
    "ingest",
    "pretrain-sasrec",
    "pretrain-bpr",
    "extract-embeddings",
    "pretrain-backbone",
    "train",
    "sweep",
    "evaluate",
    "export-bundle",
    "serve",
    "synth",
];

fn e4srec(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_e4srec"))
        .arg("--workdir")
        .arg(workdir)
        .arg("--quiet")
        .args(args)
        .output()
        .unwrap()
}

fn ok(workdir: &Path, args: &[&str]) -> String {
    let out = e4srec(workdir, args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "{args:?} failed: {stderr}");
    String::from_utf8(out.stdout).unwrap()
}

fn refused(workdir: &Path, args: &[&str], stage: &str) {
    let out = e4srec(workdir, args);
    assert!(!out.status.success(), "{args:?} should fail");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(&format!("run `{stage}")), "{args:?}: {stderr}");
}

#[test]
fn help_lists_every_subcommand() {
    let out = Command::new(env!("CARGO_BIN_EXE_e4srec")).arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for s in SUBCOMMANDS {
        assert!(text.contains(s), "--help is missing {s}");
    }
}

#[test]
fn unknown_subcommand_or_flag_prints_usage() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["train", "--bogus"]] {
        let out = e4srec(dir.path(), args);
        assert!(!out.status.success());
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    }
}

#[test]
fn stages_refuse_to_run_out_of_order() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    refused(wd, &["pretrain-sasrec"], "synth");
    refused(wd, &["train"], "synth");
    refused(wd, &["extract-embeddings"], "pretrain-sasrec");
    refused(wd, &["export-bundle"], "train");
    refused(wd, &["serve"], "pretrain-backbone");
    ok(wd, &["synth", "--users", "60", "--items", "30"]);
    refused(wd, &["train"], "extract-embeddings");
    refused(wd, &["train", "--embeddings", "bpr"], "extract-embeddings --from bpr");
    refused(wd, &["extract-embeddings", "--from", "bpr"], "pretrain-bpr");
    refused(wd, &["evaluate"], "train");
    refused(wd, &["evaluate", "--model", "sasrec"], "pretrain-sasrec");
}

fn write_small_configs(wd: &Path) {
    std::fs::create_dir_all(wd).unwrap();
    std::fs::write(
        wd.join("backbone.toml"),
        "[model]\nd_model = 32\nn_layers = 2\nn_heads = 2\nd_ff = 64\ncontext = 96\n\n[pretrain]\nepochs = 1\n\n[corpus]\nn_examples = 200\n",
    )
    .unwrap();
    std::fs::write(wd.join("train.json"), r#"{ "epochs": 1, "max_steps": 4, "max_len": 20 }"#).unwrap();
    std::fs::write(wd.join("sasrec.json"), r#"{ "epochs": 1, "dim": 16 }"#).unwrap();
}

fn http(addr: &str, method: &str, path: &str, body: &str) -> (u16, String) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: t\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut raw = String::new();
    s.read_to_string(&mut raw).unwrap();
    let status = raw.split(' ').nth(1).unwrap().parse().unwrap();
    (status, raw.split("\r\n\r\n").nth(1).unwrap_or("").to_string())
}

#[test]
fn small_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    write_small_configs(wd);
    let cfg = |name: &str| wd.join(name).display().to_string();
    ok(wd, &["synth", "--users", "80", "--items", "150", "--max-len", "20"]);
    ok(wd, &["pretrain-sasrec", "--config", &cfg("sasrec.json")]);
    ok(wd, &["extract-embeddings"]);
    ok(wd, &["pretrain-backbone", "--config", &cfg("backbone.toml")]);
    let out = ok(wd, &["train", "--config", &cfg("train.json")]);
    assert!(out.contains("val HR@10"), "{out}");
    ok(wd, &["train", "--config", &cfg("train.json"), "--no-llm"]);
    assert!(wd.join("e4srec-nollm.ckpt").exists());
    let table = ok(wd, &["evaluate", "--protocol", "sampled99"]);
    assert!(table.contains("MRR") && table.contains("sparse"), "{table}");
    ok(wd, &["evaluate", "--model", "pop", "--mask-history"]);
    let sweep = ok(wd, &["sweep", "--config", &cfg("train.json"), "--lrs", "1e-3,3e-3", "--epochs", "1", "--output", "swept.ckpt"]);
    assert!(sweep.contains("best lr"), "{sweep}");
    let export = ok(wd, &["export-bundle"]);
    assert!(export.contains("parameters"), "{export}");

    let mut child = Command::new(env!("CARGO_BIN_EXE_e4srec"))
        .args(["--quiet", "--workdir"])
        .arg(wd)
        .args(["serve", "--addr", "127.0.0.1:0", "--dataset-id", "synthetic"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.as_mut().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("listening line").to_string();
    let (status, body) = http(&addr, "GET", "/v1/health", "");
    assert_eq!(status, 200, "{body}");
    let (status, body) = http(&addr, "POST", "/v1/recommend", r#"{"dataset_id":"synthetic","item_ids":[1,2,3],"k":5}"#);
    assert_eq!(status, 200, "{body}");
    let v: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["items"].as_array().unwrap().len(), 5);
    child.kill().unwrap();
    child.wait().unwrap();
}
