use super::*;
use crate::tasks::{TaskKind, TaskRole};
use crate::trainer::WarmupConfig;

fn tiny(method: Method) -> ExperimentConfig {
    let spec = |name: &str, kind, role| TaskSpec {
        train: 12,
        validation: 6,
        test: 6,
        max_len: 4,
        ..TaskSpec::new(name, kind, role)
    };
    ExperimentConfig {
        method,
        name: None,
        out_dir: None,
        suite_seed: 3,
        seeds: vec![0, 1],
        alphas: vec![0.5, 2.0],
        model: ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 16,
            adapter_rank: 2,
            ..ModelConfig::default()
        },
        warmup: WarmupConfig {
            max_epochs: 1,
            patience: 1,
            threshold: 0.0,
            ..WarmupConfig::default()
        },
        run: RunConfig {
            epochs: 1,
            flashbacks_per_task: 3,
            bank: crate::latent_bank::BankConfig {
                groups: 2,
                keys_per_group: 3,
                rank: 2,
                ..Default::default()
            },
            ..RunConfig::default()
        },
        tasks: vec![
            spec("modadd", TaskKind::ModAdd, TaskRole::Old),
            spec("copy", TaskKind::Copy, TaskRole::Old),
            spec("reverse", TaskKind::Reverse, TaskRole::New),
            spec("modsub", TaskKind::ModSub, TaskRole::New),
        ],
    }
}

fn quiet() -> impl FnMut(&str) {
    |_: &str| {}
}

#[test]
fn strict_parsing_rejects_unknown_keys_and_names_the_path() {
    let p = Path::new("exp.toml");
    let ok = ExperimentConfig::from_toml("method = \"jfa\"\n[run]\nalpha = 0.5\n", p).unwrap();
    assert_eq!(ok.run.alpha, 0.5);
    assert_eq!(ok.seeds, vec![0, 1, 2]);
    assert_eq!(ok.tasks, make_suite());
    let err = ExperimentConfig::from_toml("method = \"jfa\"\n[run]\nalpha_typo = 0.5\n", p).unwrap_err();
    assert!(err.to_string().contains("exp.toml"), "{err}");
    assert!(ExperimentConfig::from_toml("method = \"jfa\"\nsurprise = 1\n", p).is_err());
    assert!(ExperimentConfig::from_toml("method = \"magic\"\n", p).is_err());
    let missing = ExperimentConfig::load(Path::new("/nonexistent/exp.toml")).unwrap_err();
    assert!(missing.to_string().contains("/nonexistent/exp.toml"));
}

#[test]
fn methods_fix_the_mechanism_flags() {
    let base = RunConfig::default();
    let v = Method::Sft.variants("sft", &base, &[]).unwrap();
    assert!(!v[0].1.use_jtl && !v[0].1.use_pcgrad && !v[0].1.use_flashbacks);
    let v = Method::Replay.variants("replay", &base, &[]).unwrap();
    assert!(v[0].1.replay_mode && v[0].1.use_flashbacks && !v[0].1.use_jtl);
    let v = Method::JfaNoJtl.variants("x", &base, &[]).unwrap();
    assert!(!v[0].1.use_jtl && v[0].1.use_pcgrad);
    let v = Method::JfaNoPcgrad.variants("x", &base, &[]).unwrap();
    assert!(v[0].1.use_jtl && !v[0].1.use_pcgrad);
    let v = Method::JfaAlphaSweep.variants("s", &base, &default_alphas()).unwrap();
    let names: Vec<&str> = v.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["s_alpha_0.1", "s_alpha_0.5", "s_alpha_1", "s_alpha_2", "s_alpha_10"]);
    assert_eq!(v[4].1.alpha, 10.0);
    assert!(Method::JfaAlphaSweep.variants("s", &base, &[]).is_err());
}

#[test]
fn adapt_requires_warmup_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_adapt(&tiny(Method::Sft), dir.path(), &mut quiet()).unwrap_err();
    assert!(err.to_string().contains("reference.safetensors"), "{err}");
}

#[test]
fn pipeline_writes_artifacts_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = tiny(Method::JfaAlphaSweep);
    let warm = run_warmup(&cfg, &out, &mut quiet()).unwrap();
    assert_eq!(warm.len(), 2);
    assert!(out.join("data/modadd.test.jsonl").exists());
    let summaries = run_adapt(&cfg, &out, &mut quiet()).unwrap();
    assert_eq!(summaries.len(), 2);
    for s in &summaries {
        let vdir = variant_dir(&out, &s.variant);
        for f in ["report.json", "metrics.csv", "flashbacks.jsonl", "model.safetensors", "bank.safetensors"] {
            assert!(vdir.join("seed_0").join(f).exists(), "{f}");
        }
        assert_eq!(s.curve.len(), 2);
        let report: SeedReport = read_json(&vdir.join("seed_1/report.json")).unwrap();
        assert_eq!(report.experiment, cfg);
        assert_eq!(report.run.config.seed, 1);
        assert_eq!(report.run.flashback_items, 6);
    }

    let scratch = dir.path().join("scratch");
    let v = verify_adapt(&cfg, &out, &scratch, &mut quiet()).unwrap();
    assert!(v.ok(), "{v:?}");
    assert_eq!(v.checked.len(), 2);

    let tampered = variant_dir(&out, &summaries[0].variant).join("seed_0/metrics.csv");
    std::fs::write(&tampered, "changed").unwrap();
    let scratch2 = dir.path().join("scratch2");
    let v = verify_adapt(&cfg, &out, &scratch2, &mut quiet()).unwrap();
    assert!(!v.ok());
    assert_eq!(v.checked[0].2, vec!["seed_0/metrics.csv".to_string()]);

    let wv = verify_warmup(&cfg, &out, &dir.path().join("scratch3"), &mut quiet()).unwrap();
    assert!(wv.ok(), "{wv:?}");

    let dirs: Vec<PathBuf> = summaries
        .iter()
        .map(|s| variant_dir(&out, &s.variant))
        .chain([dir.path().join("nothing_here")])
        .collect();
    let (loaded, warnings) = load_summaries(&dirs);
    assert_eq!(loaded.len(), 2);
    assert_eq!(warnings.len(), 1);
    let cmp = compare(&loaded);
    let table = render_table(&cmp);
    assert_eq!(table.lines().count(), 4);
    let files = write_comparison(&cmp, &dir.path().join("cmp")).unwrap();
    let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["comparison.txt", "comparison.csv", "forgetting.svg", "alpha_sweep.svg"]);
}

#[test]
fn manifest_diff_lists_changed_added_and_removed_files() {
    let a = BTreeMap::from([("x".to_string(), "1".to_string()), ("y".to_string(), "2".to_string())]);
    let b = BTreeMap::from([("x".to_string(), "1".to_string()), ("y".to_string(), "3".to_string()), ("z".to_string(), "4".to_string())]);
    assert_eq!(manifest_mismatches(&a, &b), vec!["y", "z"]);
    assert!(manifest_mismatches(&a, &a).is_empty());
}
