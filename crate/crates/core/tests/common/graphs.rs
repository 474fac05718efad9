//! Seeded random graphs for finite-difference checks.

use flashback_core::autodiff::{Tape, Tensor, Var};
use flashback_core::losses::{div_loss, sft_loss};
use flashback_core::model::{BoundModel, Factor, Increment, IncrementSet, ModelConfig, ModelState, Trainable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;
pub const GRAPHS: u64 = 100;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::randn(shape, std, rng)
}

/// Softmax rows weighted by a fixed random matrix.
fn softmax_graph(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>) {
    let (r, c) = (rng.random_range(1..5), rng.random_range(2..7));
    let w = randn(rng, &[r, c], 1.0);
    let leaves = vec![randn(rng, &[r, c], 2.0)];
    (
        leaves,
        Box::new(move |t, v| {
            let p = t.softmax_rows(v[0]);
            let p = t.mul_const(p, w.clone()).unwrap();
            t.sum(p)
        }),
    )
}

/// Symmetric KL with both arguments as leaves.
fn kl_graph(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>) {
    let (r, c) = (rng.random_range(1..5), rng.random_range(2..9));
    let leaves = vec![randn(rng, &[r, c], 1.5), randn(rng, &[r, c], 1.5)];
    (leaves, Box::new(|t, v| div_loss(t, v[0], v[1]).unwrap()))
}

/// Two-layer perceptron with layer norm, GELU, ReLU, log and cross-entropy.
fn mlp_graph(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>) {
    let (n, d, h, k) = (rng.random_range(1..4), rng.random_range(2..6), rng.random_range(2..6), rng.random_range(2..6));
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let mask: Vec<bool> = (0..n).map(|i| i == 0 || rng.random_bool(0.5)).collect();
    let leaves = vec![
        randn(rng, &[n, d], 1.0),
        randn(rng, &[d, h], 0.7),
        randn(rng, &[1, h], 0.3),
        randn(rng, &[h, k], 0.7),
        randn(rng, &[1, k], 0.5),
        randn(rng, &[1, d], 1.0),
    ];
    (
        leaves,
        Box::new(move |t, v| {
            let x = t.layer_norm(v[0], 1e-5);
            let x = t.mul_row(x, v[5]).unwrap();
            let hdn = t.matmul(x, v[1]).unwrap();
            let hdn = t.add_row(hdn, v[2]).unwrap();
            let a = t.gelu(hdn);
            let b = t.relu(hdn);
            let hdn = t.add(a, b).unwrap();
            let logits = t.matmul(hdn, v[3]).unwrap();
            let logits = t.add_row(logits, v[4]).unwrap();
            let ce = sft_loss(t, logits, &targets, &mask).unwrap();
            let sq = t.mul(v[4], v[4]).unwrap();
            let pos = t.add_const(sq, &Tensor::filled(&[1, k], 0.5)).unwrap();
            let lg = t.ln(pos);
            let reg = t.mean(lg);
            t.add(ce, reg).unwrap()
        }),
    )
}

/// Single attention head over embedded tokens, with slicing and concatenation.
fn attention_graph(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>) {
    let (vocab, d, n) = (6, rng.random_range(2..5), rng.random_range(2..5));
    let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
    let leaves = vec![randn(rng, &[vocab, d], 1.0), randn(rng, &[d, d], 0.8), randn(rng, &[d, d], 0.8)];
    (
        leaves,
        Box::new(move |t, v| {
            let x = t.embedding(v[0], &ids).unwrap();
            let q = t.matmul(x, v[1]).unwrap();
            let k = t.matmul(x, v[2]).unwrap();
            let s = t.matmul_nt(q, k).unwrap();
            let p = t.softmax_rows(s);
            let o = t.matmul(p, x).unwrap();
            let head = t.slice(o, 0, 1, n - 1).unwrap();
            let tail = t.slice(o, 0, 0, 1).unwrap();
            let o = t.concat(&[head, tail], 0).unwrap();
            let lp = t.log_softmax_rows(o);
            let w = t.mul(lp, o).unwrap();
            t.sum(w)
        }),
    )
}

/// Tiny transformer whose targets receive a similarity-weighted mix of
/// low-rank increments; the leaves are the increment factors, the loss is the
/// divergence to fixed logits plus cross-entropy.
pub fn mixed_increment_graph(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>) {
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 12,
        max_seq_len: 8,
        adapter_rank: 2,
        ..ModelConfig::default()
    };
    let model = ModelState::init(cfg, rng.random()).unwrap();
    let targets = model.targets();
    let n_latents = rng.random_range(1..4);
    let raw: Vec<f64> = (0..n_latents).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let rank = 2;
    let mut leaves = Vec::new();
    for _ in 0..n_latents {
        for t in &targets {
            leaves.push(randn(rng, &[rank, t.inp], 0.3));
            leaves.push(randn(rng, &[t.out, rank], 0.3));
        }
    }
    let len = rng.random_range(2..6);
    let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(3..40)).collect();
    let reference = randn(rng, &[len, 40], 1.0);
    let next: Vec<usize> = (0..len).map(|_| rng.random_range(0..40)).collect();
    (
        leaves,
        Box::new(move |t, v| {
            let bound = BoundModel::bind(t, &model, Trainable::Nothing);
            let mut inc = IncrementSet::new();
            for (ti, target) in targets.iter().enumerate() {
                let factors = (0..weights.len())
                    .map(|l| {
                        let base = 2 * (l * targets.len() + ti);
                        Factor { weight: weights[l], a: v[base], b: v[base + 1] }
                    })
                    .collect();
                inc.insert(target.name.clone(), Increment::Factored(factors));
            }
            let logits = bound.forward(t, &tokens, Some(&inc)).unwrap();
            let r = t.constant(reference.clone());
            let d = div_loss(t, logits, r).unwrap();
            let ce = sft_loss(t, logits, &next, &vec![true; next.len()]).unwrap();
            t.add(d, ce).unwrap()
        }),
    )
}

pub type Family = fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>);

pub const FAMILIES: [(&str, Family); 5] = [
    ("softmax", softmax_graph),
    ("kl", kl_graph),
    ("mlp", mlp_graph),
    ("attention", attention_graph),
    ("increment_mix", mixed_increment_graph),
];

pub type Graph = (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>);

/// The graph for `seed`: families rotate, shapes and values come from the seed.
pub fn seeded_graph(seed: u64) -> (&'static str, Graph) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (name, family) = FAMILIES[seed as usize % FAMILIES.len()];
    (name, family(&mut rng))
}
