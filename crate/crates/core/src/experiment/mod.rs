//! Reproducible experiments: warm-up checkpoints per seed, adaptation runs per
//! method, and the files they leave behind.
//!
//! Layout under the output directory:
//!
//! ```text
//! data/{task}.{split}.jsonl
//! warmup/seed_{s}/reference.safetensors, warmup_report.json
//! warmup/manifest.json
//! runs/{variant}/seed_{s}/report.json, metrics.csv, flashbacks.jsonl,
//!                         model.safetensors, bank.safetensors
//! runs/{variant}/summary.json, manifest.json
//! ```

mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_model, save_bank, save_model};
use crate::error::{Error, Result};
use crate::flashback::{read_jsonl, write_jsonl, FlashbackItem};
use crate::model::ModelConfig;
use crate::rng;
use crate::tasks::{evaluate, generate_suite, make_suite, EvalResult, Split, TaskData, TaskSpec};
use crate::trainer::{adapt, prepare_flashbacks, warmup_with, EpochMetrics, RunConfig, RunReport, WarmupConfig, WarmupEpoch};

pub use report::{compare, load_summaries, render_table, write_comparison, Comparison};

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sft,
    Replay,
    Jfa,
    JfaNoJtl,
    JfaNoPcgrad,
    JfaAlphaSweep,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sft => "sft",
            Method::Replay => "replay",
            Method::Jfa => "jfa",
            Method::JfaNoJtl => "jfa_no_jtl",
            Method::JfaNoPcgrad => "jfa_no_pcgrad",
            Method::JfaAlphaSweep => "jfa_alpha_sweep",
        }
    }

    /// What the method is for, recorded in every report it writes.
    pub fn role(self) -> &'static str {
        match self {
            Method::Sft => "baseline: plain fine-tuning on the new tasks, forgetting expected",
            Method::Replay => "baseline: old-task training pairs mixed into the new-task data",
            Method::Jfa => "full method: flashbacks, latent-task mixing and gradient surgery",
            Method::JfaNoJtl => "ablation: latent-task mixing disabled",
            Method::JfaNoPcgrad => "ablation: gradient surgery disabled",
            Method::JfaAlphaSweep => "sweep: full method at each divergence weight",
        }
    }

    /// Run configurations this method expands to, named by variant. The
    /// method fixes the mechanism flags; every other field comes from `base`.
    pub fn variants(self, name: &str, base: &RunConfig, alphas: &[f64]) -> Result<Vec<(String, RunConfig)>> {
        let jfa = RunConfig {
            use_jtl: true,
            use_pcgrad: true,
            use_flashbacks: true,
            replay_mode: false,
            ..base.clone()
        };
        let one = |cfg: RunConfig| Ok(vec![(name.to_string(), cfg)]);
        match self {
            Method::Sft => one(RunConfig {
                use_jtl: false,
                use_pcgrad: false,
                use_flashbacks: false,
                replay_mode: false,
                ..base.clone()
            }),
            Method::Replay => one(RunConfig {
                use_jtl: false,
                use_pcgrad: false,
                use_flashbacks: true,
                replay_mode: true,
                ..base.clone()
            }),
            Method::Jfa => one(jfa),
            Method::JfaNoJtl => one(RunConfig { use_jtl: false, ..jfa }),
            Method::JfaNoPcgrad => one(RunConfig { use_pcgrad: false, ..jfa }),
            Method::JfaAlphaSweep => {
                if alphas.is_empty() {
                    return Err(Error::Config("jfa_alpha_sweep needs at least one alpha".into()));
                }
                Ok(alphas
                    .iter()
                    .map(|&a| (format!("{name}_alpha_{a}"), RunConfig { alpha: a, ..jfa.clone() }))
                    .collect())
            }
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_alphas() -> Vec<f64> {
    vec![0.1, 0.5, 1.0, 2.0, 10.0]
}

/// Parsed experiment file. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Variant directory name; defaults to the method name.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub suite_seed: u64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub warmup: WarmupConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default = "make_suite")]
    pub tasks: Vec<TaskSpec>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Toml {
            path: path.to_path_buf(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        if !self.seeds.iter().all(|s| seen.insert(*s)) {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if let Some(n) = &self.name {
            if n.is_empty() || n.contains(['/', '\\']) || n.starts_with('.') {
                return Err(Error::Config(format!("name {n:?} is not a plain directory name")));
            }
        }
        self.model.validate()?;
        self.run.validate()?;
        for t in &self.tasks {
            t.validate()?;
        }
        Ok(())
    }

    pub fn variant_name(&self) -> &str {
        self.name.as_deref().unwrap_or(self.method.as_str())
    }

    /// SHA-256 of the canonical JSON form of the config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        rng::sha256_hex(&json)
    }

    fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.hash(),
            code_version: CODE_VERSION.to_string(),
            suite_seed: self.suite_seed,
            seeds: self.seeds.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub code_version: String,
    pub suite_seed: u64,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupReport {
    pub provenance: Provenance,
    pub seed: u64,
    pub model: ModelConfig,
    pub warmup: WarmupConfig,
    pub curve: Vec<WarmupEpoch>,
    pub test: Vec<EvalResult>,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
}

/// Adaptation report for one seed, with the experiment echoed verbatim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub provenance: Provenance,
    pub experiment: ExperimentConfig,
    pub variant: String,
    pub role: String,
    pub seed: u64,
    pub reference_checkpoint_sha256: String,
    pub run: RunReport,
    pub checkpoints: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub old_before: f64,
    pub old_after: f64,
    pub new_before: f64,
    pub new_after: f64,
    pub invariants_hold: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub mean_old: f64,
    pub mean_new: f64,
}

/// Seed means for one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub method: Method,
    pub role: String,
    pub provenance: Provenance,
    pub alpha: f64,
    pub flashbacks_per_task: usize,
    pub per_seed: Vec<SeedResult>,
    pub mean_old_before: f64,
    pub mean_old_after: f64,
    pub mean_old_delta: f64,
    pub mean_new_before: f64,
    pub mean_new_after: f64,
    pub all_invariants_hold: bool,
    /// Seed-mean exact match per epoch, epoch 0 being the reference model.
    pub curve: Vec<CurvePoint>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(rng::sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// SHA-256 of every file below `root` (excluding `manifest.json` files),
/// keyed by path relative to `root` with `/` separators.
pub fn manifest(root: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, root, out)?;
            } else if p.file_name().is_some_and(|n| n != "manifest.json") {
                let rel = p.strip_prefix(root).expect("walk stays below root");
                let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                out.insert(key, file_sha256(&p)?);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

/// Files whose hash differs between two manifests, or that only one has.
pub fn manifest_mismatches(expected: &BTreeMap<String, String>, actual: &BTreeMap<String, String>) -> Vec<String> {
    let mut keys: Vec<&String> = expected.keys().chain(actual.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter(|k| expected.get(*k) != actual.get(*k))
        .cloned()
        .collect()
}

fn rel(path: &Path, root: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

pub fn warmup_checkpoint(out: &Path, seed: u64) -> PathBuf {
    out.join("warmup").join(format!("seed_{seed}")).join("reference.safetensors")
}

pub fn variant_dir(out: &Path, variant: &str) -> PathBuf {
    out.join("runs").join(variant)
}

fn suite(cfg: &ExperimentConfig) -> Result<Vec<TaskData>> {
    generate_suite(&cfg.tasks, cfg.suite_seed)
}

fn write_datasets(out: &Path, data: &[TaskData]) -> Result<()> {
    let dir = out.join("data");
    mkdir(&dir)?;
    for d in data {
        for (split, name) in [(Split::Train, "train"), (Split::Validation, "validation"), (Split::Test, "test")] {
            write_jsonl(&dir.join(format!("{}.{name}.jsonl", d.spec.name)), d.split(split))?;
        }
    }
    Ok(())
}

/// Progress messages for long commands.
pub trait Progress {
    fn message(&mut self, text: &str);
}

impl<F: FnMut(&str)> Progress for F {
    fn message(&mut self, text: &str) {
        self(text)
    }
}

/// Warms up one reference model per seed and writes checkpoints, reports and
/// the manifest under `out/warmup`.
pub fn run_warmup(cfg: &ExperimentConfig, out: &Path, progress: &mut dyn Progress) -> Result<Vec<WarmupReport>> {
    let data = suite(cfg)?;
    write_datasets(out, &data)?;
    let old: Vec<TaskData> = data.iter().filter(|d| d.spec.role == crate::tasks::TaskRole::Old).cloned().collect();
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let outcome = warmup_with(&cfg.model, &old, &cfg.warmup, seed, |e| {
            let em: Vec<String> = e.validation.iter().map(|r| format!("{}={:.3}", r.task, r.exact_match)).collect();
            progress.message(&format!("warmup seed {seed} attempt {} epoch {} loss {:.4} {}", e.attempt, e.epoch, e.mean_loss, em.join(" ")));
        })
        .map_err(|e| e.in_run(format!("warm-up seed {seed}")))?;
        let ck = warmup_checkpoint(out, seed);
        save_model(&outcome.model, &ck)?;
        let test = data
            .iter()
            .map(|d| evaluate(&outcome.model, d, Split::Test, None))
            .collect::<Result<Vec<_>>>()?;
        let report = WarmupReport {
            provenance: cfg.provenance(),
            seed,
            model: cfg.model.clone(),
            warmup: cfg.warmup.clone(),
            curve: outcome.curve,
            test,
            checkpoint: rel(&ck, out),
            checkpoint_sha256: file_sha256(&ck)?,
        };
        write_json(&ck.with_file_name("warmup_report.json"), &report)?;
        reports.push(report);
    }
    let dir = out.join("warmup");
    write_json(&dir.join("manifest.json"), &manifest(&dir)?)?;
    Ok(reports)
}

fn metrics_csv(report: &RunReport) -> String {
    let mut s = String::from("epoch,task,role,exact_match,n,mean_sft,mean_div\n");
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v}"));
    let mut rows = |epoch: usize, ev: &[EvalResult], m: Option<&EpochMetrics>| {
        for r in ev {
            let role = match r.role {
                crate::tasks::TaskRole::Old => "old",
                crate::tasks::TaskRole::New => "new",
            };
            s.push_str(&format!(
                "{epoch},{},{role},{},{},{},{}\n",
                r.task,
                r.exact_match,
                r.n,
                opt(m.and_then(|m| m.mean_sft)),
                opt(m.and_then(|m| m.mean_div))
            ));
        }
    };
    rows(0, &report.before, None);
    for m in &report.epochs {
        rows(m.epoch, &m.evaluation, Some(m));
    }
    s
}

/// Runs every variant of the configured method for every seed against the
/// warm-up checkpoints in `out/warmup`, writing reports, checkpoints and
/// summaries under `out/runs`.
pub fn run_adapt(cfg: &ExperimentConfig, out: &Path, progress: &mut dyn Progress) -> Result<Vec<VariantSummary>> {
    let data = suite(cfg)?;
    let variants = cfg.method.variants(cfg.variant_name(), &cfg.run, &cfg.alphas)?;
    let mut references = BTreeMap::new();
    for &seed in &cfg.seeds {
        let ck = warmup_checkpoint(out, seed);
        if !ck.exists() {
            return Err(Error::Checkpoint {
                path: ck,
                msg: "warm-up checkpoint missing; run the warmup command first".into(),
            });
        }
        let model = load_model(&ck)?;
        if model.config != cfg.model {
            return Err(Error::Checkpoint {
                path: ck,
                msg: "model config differs from the experiment's".into(),
            });
        }
        references.insert(seed, (file_sha256(&ck)?, model));
    }

    let mut summaries = Vec::new();
    for (variant, base) in variants {
        let vdir = variant_dir(out, &variant);
        if vdir.exists() {
            std::fs::remove_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
        }
        let mut per_seed = Vec::new();
        let mut reports = Vec::new();
        for &seed in &cfg.seeds {
            let (ref_sha, reference) = &references[&seed];
            let run_cfg = RunConfig { seed, ..base.clone() };
            let sdir = vdir.join(format!("seed_{seed}"));
            mkdir(&sdir)?;
            let fb_path = sdir.join("flashbacks.jsonl");
            let flashbacks = prepare_flashbacks(reference, &data, &run_cfg)?;
            write_jsonl(&fb_path, &flashbacks)?;
            let flashbacks: Vec<FlashbackItem> = read_jsonl(&fb_path)?;
            let outcome = adapt(reference, &data, &flashbacks, &run_cfg, |m| {
                progress.message(&format!(
                    "{variant} seed {seed} epoch {} old {:.3} new {:.3}",
                    m.epoch, m.mean_old, m.mean_new
                ));
            })?;
            let model_path = sdir.join("model.safetensors");
            let bank_path = sdir.join("bank.safetensors");
            save_model(&outcome.model, &model_path)?;
            save_bank(&outcome.bank, &outcome.model.config, &bank_path)?;
            write_json(&sdir.join("report.json"), &SeedReport {
                provenance: cfg.provenance(),
                experiment: cfg.clone(),
                variant: variant.clone(),
                role: cfg.method.role().to_string(),
                seed,
                reference_checkpoint_sha256: ref_sha.clone(),
                run: outcome.report.clone(),
                checkpoints: vec![rel(&model_path, out), rel(&bank_path, out)],
            })?;
            std::fs::write(sdir.join("metrics.csv"), metrics_csv(&outcome.report)).map_err(|e| Error::io(&sdir, e))?;
            let f = &outcome.report.forgetting;
            per_seed.push(SeedResult {
                seed,
                old_before: f.mean_old_before,
                old_after: f.mean_old_after,
                new_before: f.mean_new_before,
                new_after: f.mean_new_after,
                invariants_hold: outcome.report.invariants.all_hold(),
            });
            reports.push(outcome.report);
        }
        let epochs = reports[0].epochs.len();
        let mut curve = vec![CurvePoint {
            epoch: 0,
            mean_old: mean(per_seed.iter().map(|s| s.old_before)),
            mean_new: mean(per_seed.iter().map(|s| s.new_before)),
        }];
        for e in 0..epochs {
            curve.push(CurvePoint {
                epoch: e + 1,
                mean_old: mean(reports.iter().map(|r| r.epochs[e].mean_old)),
                mean_new: mean(reports.iter().map(|r| r.epochs[e].mean_new)),
            });
        }
        let summary = VariantSummary {
            variant: variant.clone(),
            method: cfg.method,
            role: cfg.method.role().to_string(),
            provenance: cfg.provenance(),
            alpha: base.alpha,
            flashbacks_per_task: base.flashbacks_per_task,
            mean_old_before: mean(per_seed.iter().map(|s| s.old_before)),
            mean_old_after: mean(per_seed.iter().map(|s| s.old_after)),
            mean_old_delta: mean(per_seed.iter().map(|s| s.old_after - s.old_before)),
            mean_new_before: mean(per_seed.iter().map(|s| s.new_before)),
            mean_new_after: mean(per_seed.iter().map(|s| s.new_after)),
            all_invariants_hold: per_seed.iter().all(|s| s.invariants_hold),
            per_seed,
            curve,
        };
        write_json(&vdir.join("summary.json"), &summary)?;
        write_json(&vdir.join("manifest.json"), &manifest(&vdir)?)?;
        summaries.push(summary);
    }
    Ok(summaries)
}

/// Outcome of re-running a command into a scratch directory and comparing
/// file hashes with the manifests already on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifyOutcome {
    /// (manifest path, files compared, mismatching files)
    pub checked: Vec<(PathBuf, usize, Vec<String>)>,
}

impl VerifyOutcome {
    pub fn ok(&self) -> bool {
        !self.checked.is_empty() && self.checked.iter().all(|(_, _, m)| m.is_empty())
    }
}

fn compare_dir(expected_root: &Path, actual_root: &Path) -> Result<(PathBuf, usize, Vec<String>)> {
    let mpath = expected_root.join("manifest.json");
    let expected: BTreeMap<String, String> = read_json(&mpath)?;
    let mut bad = manifest_mismatches(&expected, &manifest(actual_root)?);
    bad.extend(manifest_mismatches(&expected, &manifest(expected_root)?));
    bad.sort();
    bad.dedup();
    Ok((mpath, expected.len(), bad))
}

/// Re-runs warm-up into `scratch` and compares with `out/warmup`.
pub fn verify_warmup(cfg: &ExperimentConfig, out: &Path, scratch: &Path, progress: &mut dyn Progress) -> Result<VerifyOutcome> {
    run_warmup(cfg, scratch, progress)?;
    Ok(VerifyOutcome {
        checked: vec![compare_dir(&out.join("warmup"), &scratch.join("warmup"))?],
    })
}

/// Re-runs adaptation into `scratch`, reusing the warm-up checkpoints in
/// `out`, and compares every variant with its manifest in `out`.
pub fn verify_adapt(cfg: &ExperimentConfig, out: &Path, scratch: &Path, progress: &mut dyn Progress) -> Result<VerifyOutcome> {
    for &seed in &cfg.seeds {
        let src = warmup_checkpoint(out, seed);
        let dst = warmup_checkpoint(scratch, seed);
        mkdir(dst.parent().expect("checkpoint has a parent"))?;
        std::fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
    }
    let summaries = run_adapt(cfg, scratch, progress)?;
    let mut checked = Vec::new();
    for s in summaries {
        checked.push(compare_dir(&variant_dir(out, &s.variant), &variant_dir(scratch, &s.variant))?);
    }
    Ok(VerifyOutcome { checked })
}

#[cfg(test)]
mod tests;
