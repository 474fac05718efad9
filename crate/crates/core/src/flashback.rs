//! Flashback set: label-free old-task prompts with continuations pre-generated
//! by the frozen reference model.

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent_bank::PromptEncoder;
use crate::model::{Decoding, Generator, ModelState};
use crate::rng;
use crate::tasks::TaskData;
use crate::vocab::Token;

/// Tokens generated beyond a task's longest answer.
pub const EXTRA_REFERENCE_TOKENS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlashbackItem {
    /// Source task, kept for bookkeeping; never read by the trainer.
    pub old_task: String,
    pub prompt: Vec<Token>,
    pub reference: Vec<Token>,
    pub query: Vec<f64>,
    /// Assigned when the flashbacks are merged with the supervised set.
    pub group: Option<usize>,
    /// Seed the reference continuation was sampled with.
    pub seed: u64,
    /// Hash of (reference model, prompt, decoding, seed, reference).
    pub provenance: String,
}

fn decoding_tag(d: Decoding) -> String {
    match d {
        Decoding::Greedy => "greedy".into(),
        Decoding::TopP(p) => format!("top_p:{:016x}", p.to_bits()),
    }
}

fn provenance_hash(model_hash: &str, prompt: &[Token], decoding: Decoding, seed: u64, reference: &[Token]) -> String {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(model_hash.as_bytes());
    for t in prompt {
        bytes.extend_from_slice(&(*t as u32).to_le_bytes());
    }
    bytes.push(0xff);
    bytes.extend_from_slice(decoding_tag(decoding).as_bytes());
    bytes.extend_from_slice(&seed.to_le_bytes());
    for t in reference {
        bytes.extend_from_slice(&(*t as u32).to_le_bytes());
    }
    rng::sha256_hex(&bytes)
}

/// Samples `n` validation prompts per old task (without labels) and generates
/// each reference continuation from `reference`.
pub fn build_flashbacks(
    old_tasks: &[TaskData],
    n: usize,
    reference: &ModelState,
    decoding: Decoding,
    encoder: &PromptEncoder,
    seed: u64,
) -> Result<Vec<FlashbackItem>> {
    for d in old_tasks {
        if d.validation.len() < n {
            return Err(Error::PoolTooSmall {
                task: d.spec.name.clone(),
                need: n,
                have: d.validation.len(),
            });
        }
    }
    let model_hash = reference.content_hash();
    let mut generator = Generator::new(reference);
    let mut items = Vec::with_capacity(n * old_tasks.len());
    for d in old_tasks {
        let mut pick_rng = rng::stream(seed, &format!("flashback.pick.{}", d.spec.name));
        let mut picks = rand::seq::index::sample(&mut pick_rng, d.validation.len(), n).into_vec();
        picks.sort_unstable();
        for (j, idx) in picks.into_iter().enumerate() {
            let prompt = d.validation[idx].prompt.clone();
            let room = reference.config.max_seq_len.saturating_sub(prompt.len());
            let max_new = (d.spec.max_answer_len() + EXTRA_REFERENCE_TOKENS).min(room);
            let item_seed = rng::derive_seed(seed, &format!("flashback.gen.{}.{j}", d.spec.name));
            let mut gen_rng = rng::rng_from(item_seed);
            let reference_tokens = generator.generate(&prompt, max_new, decoding, &mut gen_rng)?;
            if reference_tokens.is_empty() {
                return Err(Error::Empty("reference continuation"));
            }
            items.push(FlashbackItem {
                old_task: d.spec.name.clone(),
                query: encoder.encode(&prompt)?,
                provenance: provenance_hash(&model_hash, &prompt, decoding, item_seed, &reference_tokens),
                prompt,
                reference: reference_tokens,
                group: None,
                seed: item_seed,
            });
        }
    }
    Ok(items)
}

/// Regenerates every reference and checks it against the stored tokens and
/// provenance hash. Returns the number of mismatching items.
pub fn verify_provenance(items: &[FlashbackItem], reference: &ModelState, decoding: Decoding) -> Result<usize> {
    let model_hash = reference.content_hash();
    let mut generator = Generator::new(reference);
    let mut bad = 0;
    for it in items {
        let room = reference.config.max_seq_len.saturating_sub(it.prompt.len());
        let max_new = it.reference.len().max(1).min(room);
        let mut r = rng::rng_from(it.seed);
        let mut again = generator.generate(&it.prompt, max_new, decoding, &mut r)?;
        // The stored continuation may have been cut by EOS or by the length cap;
        // regenerating with exactly that budget reproduces it either way.
        again.truncate(it.reference.len());
        let hash = provenance_hash(&model_hash, &it.prompt, decoding, it.seed, &again);
        if again != it.reference || hash != it.provenance {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Repeats each item `factor` times, sharing the payload.
pub fn replicate(items: &[FlashbackItem], factor: usize) -> Result<Vec<Arc<FlashbackItem>>> {
    if factor == 0 {
        return Err(Error::Config("replicate factor must be at least 1".into()));
    }
    let shared: Vec<Arc<FlashbackItem>> = items.iter().cloned().map(Arc::new).collect();
    Ok(shared
        .iter()
        .flat_map(|it| std::iter::repeat_n(it.clone(), factor))
        .collect())
}

/// Writes one JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::json(path.display().to_string(), e))?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))?;
        out.push(r);
    }
    Ok(out)
}
