mod common;

use glider::expert::{ExpertModel, ToyBaseModel};
use glider::harness::{held_in_tasks, ScenarioConfig};
use glider::linalg::{softmax, Mat};
use glider::pool::ExpertPool;
use glider::router::{
    batch_mse, combine_with_alpha, glider_forward, lorahub_fit, lorahub_forward, moe_module_forward, oracle_select,
    per_expert_losses, select, Routers, RoutingConfig, Selection,
};
use glider::training::{eval_batch, train_lora, TrainConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{random_expert, random_pool, random_tokens};

fn scores(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, n)
}

proptest! {
    #[test]
    fn top_k_weights_are_the_full_softmax(s in (1usize..9).prop_flat_map(scores), k in 1usize..9) {
        let probs = softmax(&s).unwrap();
        let route = select(s.clone(), Selection::TopK(k), false).unwrap();
        prop_assert_eq!(route.experts.len(), k.min(s.len()));
        for (&e, &w) in route.experts.iter().zip(&route.weights) {
            prop_assert_eq!(w, probs[e]);
        }
        // Every selected expert scores at least as high as every other.
        let floor = route.experts.iter().map(|&e| s[e]).fold(f64::INFINITY, f64::min);
        for (i, &v) in s.iter().enumerate() {
            if !route.experts.contains(&i) {
                prop_assert!(v <= floor);
            }
        }
    }

    #[test]
    fn selection_ignores_a_shared_offset(s in (2usize..8).prop_flat_map(scores), c in -20.0f64..20.0, k in 1usize..8) {
        let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
        let a = select(s, Selection::TopK(k), false).unwrap();
        let b = select(shifted, Selection::TopK(k), false).unwrap();
        prop_assert_eq!(a.experts, b.experts);
        for (x, y) in a.weights.iter().zip(&b.weights) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn top_p_takes_the_shortest_prefix_exceeding_p(s in (1usize..8).prop_flat_map(scores), p in 0.01f64..0.99) {
        let probs = softmax(&s).unwrap();
        let route = select(s, Selection::TopP(p), false).unwrap();
        let mass: f64 = route.weights.iter().sum();
        let without_last: f64 = route.weights[..route.weights.len() - 1].iter().sum();
        prop_assert!(mass > p || route.experts.len() == probs.len());
        prop_assert!(without_last <= p);
    }

    #[test]
    fn truncated_softmax_sums_to_one(s in (1usize..8).prop_flat_map(scores), k in 1usize..8) {
        let route = select(s, Selection::TopK(k), true).unwrap();
        let total: f64 = route.weights.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dominance_bound_holds(
        n in 2usize..10,
        s_loc in prop::collection::vec(-1.0f64..=1.0, 10),
        g in prop::collection::vec(-1.0f64..1.0, 10),
        best in 0usize..10,
        alpha in 0.5f64..200.0,
        slack in 1.0001f64..3.0,
    ) {
        let best = best % n;
        let mut s_glob = g[..n].to_vec();
        let rival = s_glob.iter().enumerate().filter(|&(i, _)| i != best).map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
        // Smallest gap the bound allows, times a slack factor.
        s_glob[best] = rival + slack * 2.0 / ((n as f64).sqrt() * alpha);
        prop_assume!(alpha * (s_glob[best] - rival) > 2.0 / (n as f64).sqrt());
        let s = combine_with_alpha(&s_glob, &s_loc[..n], alpha, n).unwrap();
        let route = select(s, Selection::TopK(1), false).unwrap();
        prop_assert_eq!(route.experts, vec![best]);
    }

    #[test]
    fn moe_forward_ignores_selection_order(seed in 0u64..500, perm_seed in 0u64..100) {
        let pool = random_pool(seed, 4, 5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        let u = random_tokens(&mut rng, 1, 5).remove(0);
        let layer = pool.base().layer(0);
        let a = moe_module_forward(layer, pool.experts(), 0, &[0, 2, 3], &[0.5, 0.3, 0.2], &u).unwrap();
        let b = moe_module_forward(layer, pool.experts(), 0, &[3, 0, 2], &[0.2, 0.5, 0.3], &u).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn trace_weights_reproduce_the_outputs(seed in 0u64..200) {
        let pool = random_pool(seed, 3, 5, 2);
        let routers = Routers::build(&pool).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = random_tokens(&mut rng, 3, 5);
        let q = pool.expert(0).global_vector.clone().unwrap();
        let run = glider_forward(&pool, &routers, &tokens, &q, &RoutingConfig::default()).unwrap();
        prop_assert!(run.trace.max_weight_error().unwrap() < 1e-12);
        prop_assert_eq!(run.trace.decisions.len(), 3 * 2);
        prop_assert_eq!(routers.global_score_calls(), 1);
    }
}

#[test]
fn lorahub_concentrates_on_the_useful_expert() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base = ToyBaseModel::from_seed(4, 2, 9).unwrap();
    let good = random_expert(&mut rng, "good", 4, 2, 2, 8);
    let mut zero = good.clone();
    zero.name = "zero".into();
    for m in &mut zero.modules {
        m.b = Mat::zeros(m.b.rows(), m.b.cols());
    }
    let mut pool = ExpertPool::new(base.clone(), 8);
    pool.add_expert(good.clone()).unwrap();
    pool.add_expert(zero).unwrap();
    let batch: Vec<_> = random_tokens(&mut rng, 8, 4)
        .into_iter()
        .map(|x| {
            let y = good.forward(&base, &x).unwrap();
            (x, y)
        })
        .collect();

    // Reference: grid search over both coefficients.
    let loss = |w: &[f64]| {
        let xs: Vec<_> = batch.iter().map(|(x, _)| x.clone()).collect();
        let out = lorahub_forward(&pool, w, &xs).unwrap();
        let mut it = out.into_iter();
        batch_mse(&batch, |_| Ok(it.next().unwrap())).unwrap()
    };
    let grid: Vec<f64> = (0..=60).map(|i| -1.5 + 0.05 * i as f64).collect();
    let (mut best_w, mut best_loss) = ([0.0, 0.0], f64::INFINITY);
    for &a in &grid {
        for &b in &grid {
            let l = loss(&[a, b]);
            if l < best_loss {
                best_w = [a, b];
                best_loss = l;
            }
        }
    }
    assert!((best_w[0] - 1.0).abs() < 1e-9, "grid optimum {best_w:?}");

    let fit = lorahub_fit(&pool, &batch, 200, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(fit.loss < fit.initial_loss);
    assert!((fit.weights[0] - best_w[0]).abs() < 0.05, "{:?}", fit.weights);
    assert!(fit.loss <= best_loss + 1e-3, "{} vs grid {best_loss}", fit.loss);
    assert_eq!(fit.evaluations, 200);
}

#[test]
fn lorahub_single_expert_matches_grid_minimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let base = ToyBaseModel::from_seed(5, 3, 2).unwrap();
    let mut pool = ExpertPool::new(base, 8);
    pool.add_expert(random_expert(&mut rng, "only", 5, 3, 2, 8)).unwrap();
    let xs = random_tokens(&mut rng, 10, 5);
    let targets = lorahub_forward(&pool, &[0.7], &xs).unwrap();
    let batch: Vec<_> = xs.iter().cloned().zip(targets).collect();

    let loss = |w: f64| {
        let out = lorahub_forward(&pool, &[w], &xs).unwrap();
        let mut it = out.into_iter();
        batch_mse(&batch, |_| Ok(it.next().unwrap())).unwrap()
    };
    let grid_min = (0..=300)
        .map(|i| -1.5 + 0.01 * i as f64)
        .min_by(|a, b| loss(*a).total_cmp(&loss(*b)))
        .unwrap();
    let fit = lorahub_fit(&pool, &batch, 60, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert!((fit.weights[0] - grid_min).abs() < 0.05, "{} vs {grid_min}", fit.weights[0]);
}

#[test]
fn oracle_finds_each_experts_own_task() {
    let cfg = ScenarioConfig {
        n_experts: 3,
        d: 8,
        m: 2,
        train: TrainConfig {
            lora_steps: 400,
            gate_steps: 0,
            ..TrainConfig::default()
        },
        seed: 4,
        ..ScenarioConfig::default()
    };
    let base = ToyBaseModel::from_seed(cfg.d, cfg.m, cfg.seed).unwrap();
    let tasks = held_in_tasks(&cfg);
    let mut pool = ExpertPool::new(base.clone(), 8);
    for t in &tasks {
        let (e, _) = train_lora(&base, t, &cfg.train).unwrap();
        pool.add_expert(e).unwrap();
    }
    for (j, t) in tasks.iter().enumerate() {
        let batch = eval_batch(t, 128, 0);
        // Exhaustive reference: each expert's loss by direct evaluation.
        let direct: Vec<f64> = pool
            .experts()
            .iter()
            .map(|e| {
                let total: f64 = batch
                    .iter()
                    .map(|(x, y)| {
                        let out = e.forward(&base, x).unwrap();
                        out.iter().zip(y).map(|(o, t)| (o - t).powi(2)).sum::<f64>()
                    })
                    .sum();
                total / (batch.len() * cfg.d) as f64
            })
            .collect();
        let losses = per_expert_losses(&pool, &batch).unwrap();
        for (a, b) in losses.iter().zip(&direct) {
            assert!((a - b).abs() <= 1e-12 * b.max(1.0));
        }
        let argmin = (0..direct.len()).min_by(|&a, &b| direct[a].total_cmp(&direct[b])).unwrap();
        assert_eq!(argmin, j);
        assert_eq!(oracle_select(&pool, &batch).unwrap(), j);
    }
}

#[test]
fn adding_an_expert_appends_one_router_row() {
    let mut pool = random_pool(12, 3, 6, 2);
    let before = Routers::build(&pool).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let extra: ExpertModel = random_expert(&mut rng, "extra", 6, 2, 2, 8);
    pool.add_expert(extra.clone()).unwrap();
    assert!(before.ensure_fresh(&pool).is_err());
    let after = Routers::build(&pool).unwrap();
    for (m, (l0, l1)) in before.local.l.iter().zip(&after.local.l).enumerate() {
        assert_eq!(l1.rows(), l0.rows() + 1);
        for i in 0..l0.rows() {
            assert_eq!(l0.row(i), l1.row(i));
        }
        let gate = extra.modules[m].gate.as_ref().unwrap();
        assert_eq!(l1.row(l0.rows()), glider::linalg::standardize(gate).unwrap().as_slice());
    }
}
