use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flashback_core::experiment::ExperimentConfig;

const TINY: &str = r#"
method = "jfa"
suite_seed = 1
seeds = [0, 1]

[model]
d_model = 16
n_heads = 2
d_ff = 32
max_seq_len = 16
adapter_rank = 2

[warmup]
max_epochs = 1
threshold = 0.0
patience = 1

[run]
epochs = 1
flashbacks_per_task = 3

[run.bank]
groups = 2
keys_per_group = 3
rank = 2

[[tasks]]
name = "modadd"
kind = "mod_add"
role = "old"
train = 12
validation = 6
test = 6

[[tasks]]
name = "copy"
kind = "copy"
role = "old"
max_len = 4
train = 12
validation = 6
test = 6

[[tasks]]
name = "reverse"
kind = "reverse"
role = "new"
max_len = 4
train = 12
validation = 6
test = 6
"#;

fn flashback(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flashback")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn scratch(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    if d.exists() {
        std::fs::remove_dir_all(&d).unwrap();
    }
    std::fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{e}"));
            n += 1;
        }
    }
    assert!(n >= 5);
}

#[test]
fn missing_config_fails_and_names_the_path() {
    let o = flashback(&["warmup", "--config", "/no/such/config.toml"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/no/such/config.toml"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_are_fatal() {
    let dir = scratch("cli_unknown");
    let cfg = write_config(&dir, "bad.toml", &TINY.replace("epochs = 1\n", "epochs = 1\nepoch_count = 2\n"));
    let o = flashback(&["adapt", "--config", &cfg, "--out", dir.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("epoch_count"), "{}", stderr(&o));
}

#[test]
fn adapt_without_warmup_fails() {
    let dir = scratch("cli_nowarm");
    let cfg = write_config(&dir, "tiny.toml", TINY);
    let o = flashback(&["adapt", "--config", &cfg, "--out", dir.join("out").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("reference.safetensors"), "{}", stderr(&o));
}

#[test]
fn warmup_adapt_report_and_verify() {
    let dir = scratch("cli_flow");
    let cfg = write_config(&dir, "tiny.toml", TINY);
    let out = dir.join("out");
    let o = out.to_str().unwrap();

    let w = flashback(&["warmup", "--config", &cfg, "--out", o, "-q"]);
    assert!(w.status.success(), "{}", stderr(&w));
    assert!(out.join("warmup/seed_1/reference.safetensors").exists());
    let wv = flashback(&["warmup", "--config", &cfg, "--out", o, "--verify", "-q"]);
    assert!(wv.status.success(), "{}{}", stdout(&wv), stderr(&wv));
    assert!(stdout(&wv).starts_with("verified"));

    let a = flashback(&["adapt", "--config", &cfg, "--out", o, "-q"]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(stdout(&a).contains("jfa"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("runs/jfa/seed_0/report.json")).unwrap()).unwrap();
    assert_eq!(report["experiment"]["run"]["flashbacks_per_task"], 3);
    assert!(report["provenance"]["config_hash"].is_string());

    let sft_cfg = write_config(&dir, "sft.toml", &TINY.replace("method = \"jfa\"", "method = \"sft\""));
    let s = flashback(&["adapt", "--config", &sft_cfg, "--out", o, "-q"]);
    assert!(s.status.success(), "{}", stderr(&s));

    let av = flashback(&["adapt", "--config", &cfg, "--out", o, "--verify", "-q"]);
    assert!(av.status.success(), "{}{}", stdout(&av), stderr(&av));
    assert!(!out.join(".verify").exists());

    let table_dir = dir.join("table");
    let r = flashback(&[
        "report",
        out.join("runs/sft").to_str().unwrap(),
        out.join("runs/jfa").to_str().unwrap(),
        dir.join("missing").to_str().unwrap(),
        "--out",
        table_dir.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    let table = stdout(&r);
    assert_eq!(table.lines().count(), 4, "{table}");
    assert!(table.lines().nth(2).unwrap().starts_with("sft"));
    assert!(stderr(&r).contains("warning: skipping"));
    assert!(table_dir.join("forgetting.svg").exists());

    std::fs::write(out.join("runs/jfa/seed_1/report.json"), "{}").unwrap();
    let bad = flashback(&["adapt", "--config", &cfg, "--out", o, "--verify", "-q"]);
    assert!(!bad.status.success());
    assert!(stdout(&bad).contains("MISMATCH") && stdout(&bad).contains("seed_1/report.json"), "{}", stdout(&bad));
}
