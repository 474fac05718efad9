//! Synthetic old/new tasks, exact-match evaluation and forgetting metrics.
//!
//! Every instance is rendered as `[TASK, operands…, SEP]` followed by the
//! answer tokens and `EOS`.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Decoding, Generator, ModelState};
use crate::rng;
use crate::vocab::{self, Token, EOS, SEP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ModAdd,
    ModSub,
    Copy,
    Reverse,
}

impl TaskKind {
    pub fn token(self) -> Token {
        match self {
            TaskKind::ModAdd => vocab::TASK_MODADD,
            TaskKind::ModSub => vocab::TASK_MODSUB,
            TaskKind::Copy => vocab::TASK_COPY,
            TaskKind::Reverse => vocab::TASK_REVERSE,
        }
    }

    fn is_modular(self) -> bool {
        matches!(self, TaskKind::ModAdd | TaskKind::ModSub)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskRole {
    Old,
    New,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub role: TaskRole,
    #[serde(default = "default_modulus")]
    pub modulus: usize,
    /// Maximum sequence length for copy/reverse (lengths are uniform in 1..=max_len).
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

fn default_modulus() -> usize {
    17
}

fn default_max_len() -> usize {
    8
}

impl TaskSpec {
    pub fn new(name: &str, kind: TaskKind, role: TaskRole) -> Self {
        Self {
            name: name.to_string(),
            kind,
            role,
            modulus: default_modulus(),
            max_len: default_max_len(),
            train: 2000,
            validation: 200,
            test: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.is_modular() && !(2..=vocab::NUMBER_COUNT).contains(&self.modulus) {
            return Err(Error::Config(format!(
                "task {}: modulus must lie in 2..={}",
                self.name,
                vocab::NUMBER_COUNT
            )));
        }
        if !self.kind.is_modular() && self.max_len == 0 {
            return Err(Error::Config(format!("task {}: max_len must be positive", self.name)));
        }
        if self.train == 0 || self.validation == 0 || self.test == 0 {
            return Err(Error::Config(format!("task {}: every split needs at least one item", self.name)));
        }
        Ok(())
    }

    /// Longest full sequence (prompt + answer + EOS) this task can produce.
    pub fn max_sequence_len(&self) -> usize {
        if self.kind.is_modular() {
            5
        } else {
            2 * self.max_len + 3
        }
    }

    /// Longest answer, excluding EOS.
    pub fn max_answer_len(&self) -> usize {
        if self.kind.is_modular() {
            1
        } else {
            self.max_len
        }
    }
}

/// Default suite: old = modular addition and copy, new = reversal and
/// modular subtraction.
///
/// The mod-17 tasks have only 289 distinct instances, so they use 225/32/32
/// splits; 32 validation prompts leave room for 30 flashbacks per task.
pub fn make_suite() -> Vec<TaskSpec> {
    let modular = |name: &str, kind| TaskSpec {
        train: 225,
        validation: 32,
        test: 32,
        ..TaskSpec::new(name, kind, TaskRole::Old)
    };
    vec![
        modular("modadd", TaskKind::ModAdd),
        TaskSpec::new("copy", TaskKind::Copy, TaskRole::Old),
        TaskSpec::new("reverse", TaskKind::Reverse, TaskRole::New),
        TaskSpec {
            role: TaskRole::New,
            ..modular("modsub", TaskKind::ModSub)
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Example {
    pub prompt: Vec<Token>,
    pub answer: Vec<Token>,
}

impl Example {
    /// Prompt, answer and EOS.
    pub fn full_sequence(&self) -> Vec<Token> {
        let mut s = self.prompt.clone();
        s.extend_from_slice(&self.answer);
        s.push(EOS);
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskData {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

fn render(kind: TaskKind, operands: &[Token], answer: Vec<Token>) -> Example {
    let mut prompt = Vec::with_capacity(operands.len() + 2);
    prompt.push(kind.token());
    prompt.extend_from_slice(operands);
    prompt.push(SEP);
    Example { prompt, answer }
}

pub fn modular_example(kind: TaskKind, a: usize, b: usize, modulus: usize) -> Example {
    let r = match kind {
        TaskKind::ModAdd => (a + b) % modulus,
        TaskKind::ModSub => (a + modulus - b % modulus) % modulus,
        _ => panic!("modular_example called for {kind:?}"),
    };
    render(kind, &[vocab::number(a), vocab::number(b)], vec![vocab::number(r)])
}

pub fn sequence_example(kind: TaskKind, symbols: &[Token]) -> Example {
    let answer = match kind {
        TaskKind::Copy => symbols.to_vec(),
        TaskKind::Reverse => symbols.iter().rev().copied().collect(),
        _ => panic!("sequence_example called for {kind:?}"),
    };
    render(kind, symbols, answer)
}

/// Split sizes when the instance space is smaller than requested: allocate
/// proportionally, giving train whatever remains after test and validation.
fn fit_sizes(spec: &TaskSpec, space: usize) -> (usize, usize, usize) {
    let want = spec.train + spec.validation + spec.test;
    if space >= want {
        return (spec.train, spec.validation, spec.test);
    }
    let test = (space * spec.test / want).max(1);
    let val = (space * spec.validation / want).max(1);
    (space - test - val, val, test)
}

pub fn generate(spec: &TaskSpec, seed: u64) -> Result<TaskData> {
    spec.validate()?;
    let mut r = rng::stream(seed, &format!("task.{}", spec.name));
    let (train, validation, test) = if spec.kind.is_modular() {
        let m = spec.modulus;
        let mut all: Vec<Example> = (0..m)
            .flat_map(|a| (0..m).map(move |b| (a, b)))
            .map(|(a, b)| modular_example(spec.kind, a, b, m))
            .collect();
        all.shuffle(&mut r);
        let (n_train, n_val, n_test) = fit_sizes(spec, all.len());
        let test: Vec<Example> = all.drain(..n_test).collect();
        let val: Vec<Example> = all.drain(..n_val).collect();
        all.truncate(n_train);
        (all, val, test)
    } else {
        let space: usize = (1..=spec.max_len).map(|l| vocab::SEQ_COUNT.pow(l as u32)).sum();
        let (n_train, n_val, n_test) = fit_sizes(spec, space);
        let mut seen = BTreeSet::new();
        let mut draw = |n: usize, r: &mut rng::Rng| {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let len = r.random_range(1..=spec.max_len);
                let s: Vec<Token> = (0..len).map(|_| vocab::seq_symbol(r.random_range(0..vocab::SEQ_COUNT))).collect();
                if seen.insert(s.clone()) {
                    out.push(sequence_example(spec.kind, &s));
                }
            }
            out
        };
        let test = draw(n_test, &mut r);
        let val = draw(n_val, &mut r);
        let train = draw(n_train, &mut r);
        (train, val, test)
    };
    let data = TaskData {
        spec: spec.clone(),
        train,
        validation,
        test,
    };
    check_disjoint(&data)?;
    Ok(data)
}

fn check_disjoint(d: &TaskData) -> Result<()> {
    let train: BTreeSet<&Vec<Token>> = d.train.iter().map(|e| &e.prompt).collect();
    let val: BTreeSet<&Vec<Token>> = d.validation.iter().map(|e| &e.prompt).collect();
    for e in &d.test {
        if train.contains(&e.prompt) || val.contains(&e.prompt) {
            return Err(Error::Config(format!("task {}: test instance leaked into another split", d.spec.name)));
        }
    }
    if d.validation.iter().any(|e| train.contains(&e.prompt)) {
        return Err(Error::Config(format!("task {}: validation instance leaked into train", d.spec.name)));
    }
    Ok(())
}

/// Generates every task of a suite and checks cross-task leakage.
pub fn generate_suite(specs: &[TaskSpec], seed: u64) -> Result<Vec<TaskData>> {
    let mut names = BTreeSet::new();
    for s in specs {
        if !names.insert(&s.name) {
            return Err(Error::Config(format!("duplicate task name `{}`", s.name)));
        }
    }
    let data: Vec<TaskData> = specs.iter().map(|s| generate(s, seed)).collect::<Result<_>>()?;
    let train: BTreeSet<&Vec<Token>> = data.iter().flat_map(|d| d.train.iter().map(|e| &e.prompt)).collect();
    for d in &data {
        if d.test.iter().any(|e| train.contains(&e.prompt)) {
            return Err(Error::Config(format!("task {}: test instance found in a training split", d.spec.name)));
        }
    }
    Ok(data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: String,
    pub role: TaskRole,
    pub exact_match: f64,
    pub n: usize,
}

/// Greedy continuation cut at the first EOS.
pub fn predict(generator: &mut Generator<'_>, prompt: &[Token], max_answer: usize) -> Result<Vec<Token>> {
    let mut rng = rng::rng_from(0);
    let mut out = generator.generate(prompt, max_answer + 1, Decoding::Greedy, &mut rng)?;
    if let Some(p) = out.iter().position(|&t| t == EOS) {
        out.truncate(p);
    }
    Ok(out)
}

/// Exact match over the first `limit` examples of a split (all if `None`).
pub fn evaluate(model: &ModelState, data: &TaskData, split: Split, limit: Option<usize>) -> Result<EvalResult> {
    let examples = data.split(split);
    let n = limit.map_or(examples.len(), |l| l.min(examples.len()));
    if n == 0 {
        return Err(Error::Empty("evaluation split"));
    }
    let mut generator = Generator::new(model);
    let mut correct = 0;
    for e in &examples[..n] {
        if predict(&mut generator, &e.prompt, e.answer.len())? == e.answer {
            correct += 1;
        }
    }
    Ok(EvalResult {
        task: data.spec.name.clone(),
        role: data.spec.role,
        exact_match: correct as f64 / n as f64,
        n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDelta {
    pub task: String,
    pub role: TaskRole,
    pub before: f64,
    pub after: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub per_task: Vec<TaskDelta>,
    pub mean_old_before: f64,
    pub mean_old_after: f64,
    pub mean_old_delta: f64,
    pub mean_new_before: f64,
    pub mean_new_after: f64,
    pub mean_new_delta: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Per-task `after − before` plus role averages. Averages over an empty role are NaN.
pub fn forgetting_metrics(before: &[EvalResult], after: &[EvalResult]) -> Result<ForgettingReport> {
    let b: BTreeMap<&str, &EvalResult> = before.iter().map(|r| (r.task.as_str(), r)).collect();
    let a: BTreeMap<&str, &EvalResult> = after.iter().map(|r| (r.task.as_str(), r)).collect();
    if b.keys().ne(a.keys()) || b.len() != before.len() || a.len() != after.len() {
        return Err(Error::TaskSetMismatch(format!(
            "before {:?} vs after {:?}",
            b.keys().collect::<Vec<_>>(),
            a.keys().collect::<Vec<_>>()
        )));
    }
    let per_task: Vec<TaskDelta> = before
        .iter()
        .map(|rb| {
            let ra = a[rb.task.as_str()];
            TaskDelta {
                task: rb.task.clone(),
                role: rb.role,
                before: rb.exact_match,
                after: ra.exact_match,
                delta: ra.exact_match - rb.exact_match,
            }
        })
        .collect();
    let role = |r: TaskRole| per_task.iter().filter(move |d| d.role == r);
    Ok(ForgettingReport {
        mean_old_before: mean(role(TaskRole::Old).map(|d| d.before)),
        mean_old_after: mean(role(TaskRole::Old).map(|d| d.after)),
        mean_old_delta: mean(role(TaskRole::Old).map(|d| d.delta)),
        mean_new_before: mean(role(TaskRole::New).map(|d| d.before)),
        mean_new_after: mean(role(TaskRole::New).map(|d| d.after)),
        mean_new_delta: mean(role(TaskRole::New).map(|d| d.delta)),
        per_task,
    })
}
