use std::collections::BTreeSet;

use flashback_core::autodiff::Tape;
use flashback_core::gradproj::{pcgrad_pair, pcgrad_per_tensor, plain_sum, project_pair, FlatGrad};
use flashback_core::latent_bank::{mix_increments, BankConfig, LatentBank, LatentId, MixWeights, PromptEncoder, Retrieved};
use flashback_core::losses::div_loss;
use flashback_core::model::{BoundModel, ModelConfig, ModelState, Trainable};
use proptest::prelude::*;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..12).prop_flat_map(|n| (prop::collection::vec(-10.0..10.0f64, n), prop::collection::vec(-10.0..10.0f64, n)))
}

fn small_model() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 12,
        max_seq_len: 8,
        adapter_rank: 2,
        ..ModelConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn projected_gradients_never_conflict_with_the_other_original((a, b) in pair()) {
        let d = dot(&a, &b);
        let (a2, b2, sum) = project_pair(&a, &b);
        if d < 0.0 {
            let tol = 1e-9 * (1.0 + norm(&a) * norm(&b));
            prop_assert!(dot(&a2, &b) >= -tol, "a'·b = {}", dot(&a2, &b));
            prop_assert!(dot(&b2, &a) >= -tol, "b'·a = {}", dot(&b2, &a));
            prop_assert!(dot(&a2, &b).abs() <= tol && dot(&b2, &a).abs() <= tol);
        } else {
            prop_assert_eq!(&a2, &a);
            prop_assert_eq!(&b2, &b);
        }
        for i in 0..a.len() {
            prop_assert_eq!(sum[i].to_bits(), (a2[i] + b2[i]).to_bits());
        }
    }

    #[test]
    fn non_conflicting_pairs_pass_through_bitwise((a, b) in pair()) {
        let fa = FlatGrad::flatten(&[("w", &a)]);
        let fb = FlatGrad::flatten(&[("w", &b)]);
        let projected = pcgrad_pair(&fa, &fb).unwrap();
        let plain = plain_sum(&fa, &fb).unwrap();
        if fa.dot(&fb) >= 0.0 {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&projected.values), bits(&plain.values));
        }
    }

    #[test]
    fn per_tensor_surgery_is_blockwise_pair_surgery((a, b) in pair(), cut in 0usize..12) {
        let cut = cut.min(a.len());
        let fa = FlatGrad::flatten(&[("x", &a[..cut]), ("y", &a[cut..])]);
        let fb = FlatGrad::flatten(&[("x", &b[..cut]), ("y", &b[cut..])]);
        let got = pcgrad_per_tensor(&fa, &fb).unwrap();
        let mut want = project_pair(&a[..cut], &b[..cut]).2;
        want.extend(project_pair(&a[cut..], &b[cut..]).2);
        prop_assert_eq!(got.values, want);
    }

    #[test]
    fn flatten_round_trips(parts in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 0..6), 1..5)) {
        let names: Vec<String> = (0..parts.len()).map(|i| format!("p{i}")).collect();
        let params: Vec<(&str, &[f64])> = names.iter().map(String::as_str).zip(parts.iter().map(Vec::as_slice)).collect();
        let flat = FlatGrad::flatten(&params);
        let back = flat.unflatten(&flat.layout.clone()).unwrap();
        prop_assert_eq!(back.len(), parts.len());
        for ((n, v), (en, ev)) in back.iter().zip(&params) {
            prop_assert_eq!(n.as_str(), *en);
            prop_assert_eq!(v.as_slice(), *ev);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn divergence_is_symmetric_non_negative_and_zero_on_equal_inputs(
        rows in 1usize..4,
        cols in 2usize..8,
        seed in any::<u64>(),
    ) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let x = flashback_core::autodiff::Tensor::randn(&[rows, cols], 3.0, &mut rng);
        let y = flashback_core::autodiff::Tensor::randn(&[rows, cols], 3.0, &mut rng);
        let div = |p: &flashback_core::autodiff::Tensor, q: &flashback_core::autodiff::Tensor| {
            let mut t = Tape::new();
            let (a, b) = (t.constant(p.clone()), t.constant(q.clone()));
            let l = div_loss(&mut t, a, b).unwrap();
            t.value(l).item()
        };
        let (xy, yx) = (div(&x, &y), div(&y, &x));
        prop_assert!(xy >= 0.0);
        prop_assert!((xy - yx).abs() <= 1e-12 * (1.0 + xy));
        prop_assert_eq!(div(&x, &x), 0.0);
    }

    #[test]
    fn retrieval_matches_brute_force(
        groups in 1usize..4,
        keys in 1usize..9,
        extra_dim in 0usize..6,
        k_pick in 0usize..9,
        global in any::<bool>(),
        seed in any::<u64>(),
        query in prop::collection::vec(-1.0..1.0f64, 14),
    ) {
        let dim = keys + extra_dim;
        let cfg = BankConfig { groups, keys_per_group: keys, key_dim: dim, top_k: 1, rank: 1, global_retrieval: global, ..BankConfig::default() };
        let bank = LatentBank::init(cfg, &small_model().targets(), seed).unwrap();
        let q = &query[..dim];
        let group = seed as usize % groups;
        let pool: Vec<LatentId> = if global {
            bank.ids().collect()
        } else {
            (0..keys).map(|slot| LatentId { group, slot }).collect()
        };
        let k = 1 + k_pick % pool.len();
        let mut brute: Vec<(f64, LatentId)> = pool
            .iter()
            .map(|id| {
                let key = &bank.task(*id).key;
                let c = if norm(q) == 0.0 { 0.0 } else { dot(q, key) / (norm(q) * norm(key)) };
                (c, *id)
            })
            .collect();
        brute.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let got = bank.retrieve(q, group, k).unwrap();
        prop_assert_eq!(got.len(), k);
        for (r, (c, id)) in got.iter().zip(&brute) {
            prop_assert_eq!(r.id, *id);
            prop_assert!((r.similarity - c).abs() < 1e-12);
        }
    }

    #[test]
    fn keys_are_orthonormal_within_each_group(groups in 1usize..4, keys in 1usize..13, seed in any::<u64>()) {
        let cfg = BankConfig { groups, keys_per_group: keys, key_dim: 16, top_k: 1, rank: 1, ..BankConfig::default() };
        let bank = LatentBank::init(cfg, &small_model().targets(), seed).unwrap();
        for g in &bank.groups {
            for (i, a) in g.iter().enumerate() {
                for (j, b) in g.iter().enumerate() {
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((dot(&a.key, &b.key) - want).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn mixing_weights_normalize_and_ignore_order(sims in prop::collection::vec(-1.0..1.0f64, 1..6), rot in 0usize..6) {
        let retrieved: Vec<Retrieved> = sims
            .iter()
            .enumerate()
            .map(|(slot, s)| Retrieved { id: LatentId { group: 0, slot }, similarity: *s })
            .collect();
        let w = MixWeights::from_retrieved(&retrieved).unwrap();
        let total: f64 = w.weights.iter().map(|(_, x)| x).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(w.weights.iter().all(|(_, x)| *x >= 0.0));
        prop_assert_eq!(w.fallback, sims.iter().all(|s| *s <= 0.0));
        let mut rotated = retrieved.clone();
        rotated.rotate_left(rot % retrieved.len());
        prop_assert_eq!(MixWeights::from_retrieved(&rotated).unwrap(), w);

        let equal: Vec<Retrieved> = retrieved.iter().map(|r| Retrieved { similarity: 0.4, ..*r }).collect();
        let eq = MixWeights::from_retrieved(&equal).unwrap();
        for (_, x) in &eq.weights {
            prop_assert!((x - 1.0 / sims.len() as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn prompt_queries_are_unit_vectors(tokens in prop::collection::vec(0usize..40, 1..12)) {
        let enc = PromptEncoder::new(40, 32, 5);
        let q = enc.encode(&tokens).unwrap();
        prop_assert!((norm(&q) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn fresh_latents_leave_the_forward_pass_bitwise_unchanged() {
    let model = ModelState::init(small_model(), 3).unwrap();
    let cfg = BankConfig { groups: 2, keys_per_group: 4, key_dim: 8, top_k: 3, rank: 2, ..BankConfig::default() };
    let bank = LatentBank::init(cfg, &model.targets(), 11).unwrap();
    let tokens = [3, 9, 12, 2, 15];
    let mut t = Tape::new();
    let bound = BoundModel::bind(&mut t, &model, Trainable::Adapter);
    let plain = bound.forward(&mut t, &tokens, None).unwrap();
    let retrieved = bank.retrieve(&[0.3, -0.2, 0.1, 0.5, 0.0, 0.2, -0.4, 0.1], 1, 3).unwrap();
    let mixed = mix_increments(&mut t, &bank, &retrieved, true).unwrap();
    let with = bound.forward(&mut t, &tokens, Some(&mixed.increments)).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(t.value(plain).data()), bits(t.value(with).data()));
}

#[test]
fn mixed_dense_matches_manual_weighted_sum() {
    let model = ModelState::init(small_model(), 3).unwrap();
    let cfg = BankConfig { groups: 1, keys_per_group: 3, key_dim: 8, top_k: 3, rank: 2, init_std: 0.5, ..BankConfig::default() };
    let mut bank = LatentBank::init(cfg, &model.targets(), 2).unwrap();
    let ids: Vec<LatentId> = bank.ids().collect();
    for (n, id) in ids.iter().enumerate() {
        for (m, p) in bank.params_of_mut(*id).into_iter().enumerate() {
            p.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = ((n * 31 + m * 7 + i) % 11) as f64 / 11.0 - 0.5);
        }
    }
    let sims = [0.2, 0.6, -0.3];
    let retrieved: Vec<Retrieved> = ids.iter().zip(sims).map(|(id, similarity)| Retrieved { id: *id, similarity }).collect();
    let dense = bank.mixed_dense(&retrieved).unwrap();
    let used: BTreeSet<LatentId> = ids[..2].iter().copied().collect();
    for t in &bank.targets {
        let mut want = vec![0.0; t.out * t.inp];
        for (id, s) in ids.iter().zip(sims) {
            if !used.contains(id) {
                continue;
            }
            let w = s / 0.8;
            let lr = &bank.task(*id).increments[&t.name];
            let p = lr.b.matmul(&lr.a).unwrap();
            want.iter_mut().zip(p.data()).for_each(|(a, b)| *a += w * b);
        }
        for (a, b) in dense[&t.name].data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
