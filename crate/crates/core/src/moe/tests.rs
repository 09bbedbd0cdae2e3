use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::grad_check;

fn randomize(store: &mut ParamStore, ids: &[ParamId], rng: &mut impl Rng) {
    for &id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
}

fn rand_matrix(rng: &mut impl Rng, r: usize, c: usize, scale: f64, shift: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| shift + scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn column_stats(t: &Tensor, rows: &[usize], j: usize) -> (f64, f64) {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|&i| t.get2(i, j)).sum::<f64>() / n;
    let var = rows.iter().map(|&i| (t.get2(i, j) - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn cfg(experts: usize) -> MoeConfig {
    MoeConfig {
        d_in: 6,
        d_hidden: 5,
        d_out: 4,
        experts,
        rank: 2,
        d_emb: 3,
        n_scenarios: 3,
        use_sap: true,
        use_dsbn: true,
    }
}

fn all_ids(store: &ParamStore) -> Vec<ParamId> {
    store.trainable().collect()
}

// ------------------------------------------------------------------ DSBN

#[test]
fn train_mode_standardizes_single_scenario() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let bn = Dsbn::new(&mut store, "bn", 4, 2, false);
    let x = rand_matrix(&mut rng, 32, 4, 300.0, 17.0);
    let mut g = Graph::new(&store);
    let xv = g.constant(x);
    let mut pass = Pass::train();
    let y = bn.forward(&mut g, &mut pass, xv, &[1; 32]).unwrap();
    let rows: Vec<usize> = (0..32).collect();
    for j in 0..4 {
        let (m, v) = column_stats(g.value(y), &rows, j);
        assert!(m.abs() < 1e-8, "{m}");
        assert!((v - 1.0).abs() < 1e-8, "{v}");
    }
    assert_eq!(pass.updates.len(), 1);
    assert_eq!(pass.updates[0].row, 1);
}

#[test]
fn two_scenario_batch_equals_independent_partitions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let bn = Dsbn::new(&mut store, "bn", 3, 2, false);
    randomize(&mut store, &[bn.gamma, bn.beta], &mut rng);
    let x = rand_matrix(&mut rng, 9, 3, 2.0, 0.5);
    let scen = [0, 1, 1, 0, 0, 1, 0, 1, 0];
    let mut g = Graph::new(&store);
    let xv = g.constant(x.clone());
    let y = bn.forward(&mut g, &mut Pass::train(), xv, &scen).unwrap();
    for s in 0..2 {
        let rows: Vec<usize> = (0..9).filter(|&i| scen[i] == s).collect();
        for j in 0..3 {
            let (m, v) = column_stats(&x, &rows, j);
            for &i in &rows {
                let gamma = store.value(bn.gamma).get2(s, j);
                let beta = store.value(bn.beta).get2(s, j);
                let want = gamma * (x.get2(i, j) - m) / (v + BN_EPS).sqrt() + beta;
                assert!((g.value(y).get2(i, j) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn infer_mode_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let bn = Dsbn::new(&mut store, "bn", 3, 2, false);
    randomize(&mut store, &[bn.gamma, bn.beta, bn.running_mean], &mut rng);
    for v in store.value_mut(bn.running_var).data_mut() {
        *v = rng.random_range(0.5..2.0);
    }
    let x = rand_matrix(&mut rng, 4, 3, 1.0, 0.0);
    let scen = [1, 0, 1, 1];
    let mut g = Graph::new(&store);
    let xv = g.constant(x.clone());
    let mut pass = Pass::infer();
    let y = bn.forward(&mut g, &mut pass, xv, &scen).unwrap();
    assert!(pass.updates.is_empty());
    for (i, &s) in scen.iter().enumerate() {
        for j in 0..3 {
            let m = store.value(bn.running_mean).get2(s, j);
            let v = store.value(bn.running_var).get2(s, j);
            let want = store.value(bn.gamma).get2(s, j) * (x.get2(i, j) - m) * (1.0 / (v + BN_EPS).sqrt())
                + store.value(bn.beta).get2(s, j);
            assert!((g.value(y).get2(i, j) - want).abs() < 1e-14);
        }
    }
}

#[test]
fn singleton_partition_falls_back_to_running_stats() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let bn = Dsbn::new(&mut store, "bn", 3, 3, false);
    let x = rand_matrix(&mut rng, 5, 3, 1.0, 0.0);
    let scen = [0, 0, 2, 0, 1];
    let mut g = Graph::new(&store);
    let xv = g.constant(x.clone());
    let mut pass = Pass::train();
    let y = bn.forward(&mut g, &mut pass, xv, &scen).unwrap();
    assert!(g.value(y).all_finite());
    assert_eq!(pass.singleton_fallbacks, 2);
    // running stats are (0, 1): the singleton rows pass through ≈ unchanged
    for i in [2, 4] {
        for j in 0..3 {
            let want = x.get2(i, j) / (1.0 + BN_EPS).sqrt();
            assert!((g.value(y).get2(i, j) - want).abs() < 1e-15);
        }
    }
    assert_eq!(pass.updates.len(), 1);
}

#[test]
fn running_stats_touch_only_present_scenarios() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let bn = Dsbn::new(&mut store, "bn", 2, 3, false);
    let x = rand_matrix(&mut rng, 6, 2, 3.0, 1.0);
    let mut pass = Pass::train();
    {
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        bn.forward(&mut g, &mut pass, xv, &[2, 2, 0, 0, 2, 0]).unwrap();
    }
    pass.commit(&mut store);
    assert_eq!(store.value(bn.running_mean).row(1), &[0.0, 0.0]);
    assert_eq!(store.value(bn.running_var).row(1), &[1.0, 1.0]);
    let rows = [2, 3, 5];
    for j in 0..2 {
        let (m, v) = column_stats(&x, &rows, j);
        let got_m = store.value(bn.running_mean).get2(0, j);
        let got_v = store.value(bn.running_var).get2(0, j);
        assert!((got_m - 0.1 * m).abs() < 1e-15);
        assert!((got_v - (0.9 + 0.1 * v * 3.0 / 2.0)).abs() < 1e-14);
    }
}

#[test]
fn isolation_across_scenarios_is_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let bn = Dsbn::new(&mut store, "bn", 3, 3, false);
    randomize(&mut store, &[bn.gamma, bn.beta, bn.running_mean], &mut rng);
    let x = rand_matrix(&mut rng, 6, 3, 1.0, 0.0);
    let scen = [0, 1, 2, 0, 1, 2];
    let run = |store: &ParamStore| {
        let mut g = Graph::new(store);
        let xv = g.constant(x.clone());
        let y = bn.forward(&mut g, &mut Pass::infer(), xv, &scen).unwrap();
        g.value(y).clone()
    };
    let before = run(&store);
    for v in &mut store.value_mut(bn.running_mean).data_mut()[3..6] {
        *v += 10.0;
    }
    for v in &mut store.value_mut(bn.running_var).data_mut()[3..6] {
        *v *= 7.0;
    }
    let after = run(&store);
    for i in [0, 2, 3, 5] {
        assert_eq!(before.row(i), after.row(i));
    }
    assert_ne!(before.row(1), after.row(1));
}

#[test]
fn unknown_scenario_is_lookup_error() {
    let mut store = ParamStore::new();
    let bn = Dsbn::new(&mut store, "bn", 2, 2, false);
    let mut g = Graph::new(&store);
    let xv = g.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(
        bn.forward(&mut g, &mut Pass::infer(), xv, &[0, 5]),
        Err(Error::Lookup(_))
    ));
}

#[test]
fn shared_normalization_pools_scenarios() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let bn = Dsbn::new(&mut store, "bn", 2, 3, true);
    assert_eq!(store.value(bn.gamma).shape(), &[1, 2]);
    let x = rand_matrix(&mut rng, 6, 2, 50.0, 0.0);
    let mut g = Graph::new(&store);
    let xv = g.constant(x);
    let y = bn.forward(&mut g, &mut Pass::train(), xv, &[0, 1, 2, 0, 1, 2]).unwrap();
    let rows: Vec<usize> = (0..6).collect();
    for j in 0..2 {
        let (m, v) = column_stats(g.value(y), &rows, j);
        assert!(m.abs() < 1e-10 && (v - 1.0).abs() < 1e-6);
    }
}

// ---------------------------------------------------------------- experts

fn expert_fixture(seed: u64) -> (ParamStore, MoeBlock, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = MoeBlock::new(&mut store, "blk", cfg(3), &mut rng).unwrap();
    let ids = all_ids(&store);
    randomize(&mut store, &ids, &mut rng);
    for e in &block.experts {
        for v in store.value_mut(e.norm.running_var).data_mut() {
            *v = rng.random_range(0.5..2.0);
        }
        for v in store.value_mut(e.norm.running_mean).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    (store, block, rng)
}

#[test]
fn expert_collapses_to_prelu_of_shared_map() {
    let (mut store, block, mut rng) = expert_fixture(7);
    let e = &block.experts[0];
    store.value_mut(e.sap.gen_w).data_mut().fill(0.0);
    store.value_mut(e.sap.gen_b).data_mut().fill(0.0);
    store.value_mut(e.norm.running_mean).data_mut().fill(0.0);
    store.value_mut(e.norm.running_var).data_mut().fill(1.0 - BN_EPS);
    store.value_mut(e.norm.gamma).data_mut().fill(1.0);
    store.value_mut(e.norm.beta).data_mut().fill(0.0);
    let x = rand_matrix(&mut rng, 3, 6, 1.0, 0.0);
    let es = rand_matrix(&mut rng, 3, 3, 1.0, 0.0);
    let mut g = Graph::new(&store);
    let (xv, ev) = (g.constant(x.clone()), g.constant(es));
    let y = e.forward(&mut g, &mut Pass::infer(), xv, ev, &[0, 1, 2]).unwrap();
    let w = store.value(e.sap.w_shared);
    let slope = store.value(e.slope).item();
    for i in 0..3 {
        for j in 0..5 {
            let pre: f64 = w.row(j).iter().zip(x.row(i)).map(|(p, q)| p * q).sum::<f64>()
                + store.value(e.sap.bias).data()[j];
            let want = if pre > 0.0 { pre } else { slope * pre };
            assert!((g.value(y).get2(i, j) - want).abs() < 1e-15);
        }
    }
}

#[test]
fn expert_rows_are_isolated_in_infer_mode() {
    let (store, block, mut rng) = expert_fixture(8);
    let e = &block.experts[1];
    let x = rand_matrix(&mut rng, 4, 6, 1.0, 0.0);
    let scen = [0, 2, 1, 2];
    let table = rand_matrix(&mut rng, 3, 3, 1.0, 0.0);
    let es_for = |s: &[usize]| Tensor::matrix(s.len(), 3, s.iter().flat_map(|&d| table.row(d).to_vec()).collect()).unwrap();
    let run = |x: &Tensor, s: &[usize]| {
        let mut g = Graph::new(&store);
        let (xv, ev) = (g.constant(x.clone()), g.constant(es_for(s)));
        let y = e.forward(&mut g, &mut Pass::infer(), xv, ev, s).unwrap();
        g.value(y).clone()
    };
    let base = run(&x, &scen);
    let mut x2 = x.clone();
    for v in &mut x2.data_mut()[..6] {
        *v += 1.0;
    }
    let mut scen2 = scen;
    scen2[0] = 1;
    let changed = run(&x2, &scen2);
    for i in 1..4 {
        assert_eq!(base.row(i), changed.row(i));
    }
    // a row computed alone matches its batched counterpart
    let alone = run(&Tensor::matrix(1, 6, x.row(2).to_vec()).unwrap(), &[1]);
    assert_eq!(alone.row(0), base.row(2));
}

#[test]
fn expert_gradients_infer_and_train() {
    for seed in 0..10 {
        let (mut store, block, mut rng) = expert_fixture(20 + seed);
        let e = block.experts[0].clone();
        let x = rand_matrix(&mut rng, 6, 6, 1.0, 0.0);
        let es = rand_matrix(&mut rng, 1, 3, 1.0, 0.0);
        let es6 = Tensor::matrix(6, 3, (0..6).flat_map(|_| es.row(0).to_vec()).collect()).unwrap();
        let ids = all_ids(&store);
        for mode in [Mode::Infer, Mode::Train] {
            let report = grad_check(&mut store, &ids, 1e-5, |g| {
                let (xv, ev) = (g.constant(x.clone()), g.constant(es6.clone()));
                let y = e.forward(g, &mut Pass::new(mode), xv, ev, &[2; 6])?;
                let s = g.sigmoid(y);
                Ok(g.mean(s))
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{mode:?} seed {seed}: {:?}", report.worst.first());
        }
    }
}

// ------------------------------------------------------------------- gate

#[test]
fn gate_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let gate = GateNetwork::new(&mut store, "g", 3, 4, &mut rng);
    store.value_mut(gate.w).data_mut().fill(0.0);
    let a = gate.weights_value(&store, &[0.3, -1.0, 2.0, 0.0]).unwrap();
    assert!(a.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

    store.value_mut(gate.b).data_mut().copy_from_slice(&[10.0, 0.0, 0.0]);
    let a = gate.weights_value(&store, &[1.0, 1.0, 1.0, 1.0]).unwrap();
    let z = 10f64.exp() + 2.0;
    for (got, want) in a.iter().zip([10f64.exp() / z, 1.0 / z, 1.0 / z]) {
        assert!((got - want).abs() < 1e-15);
    }

    let single = GateNetwork::new(&mut store, "one", 1, 4, &mut rng);
    assert_eq!(single.weights_value(&store, &[5.0, -3.0, 1.0, 9.0]).unwrap(), vec![1.0]);
}

#[test]
fn gate_weights_lie_on_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let gate = GateNetwork::new(&mut store, "g", 5, 4, &mut rng);
    randomize(&mut store, &[gate.w, gate.b], &mut rng);
    for _ in 0..1000 {
        let e: Vec<f64> = (0..4).map(|_| rng.random_range(-20.0..20.0)).collect();
        let a = gate.weights_value(&store, &e).unwrap();
        assert!(a.iter().all(|&v| v >= 0.0));
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------- mixture

fn block_outputs(store: &ParamStore, block: &MoeBlock, x: &Tensor, es: &Tensor, scen: &[usize]) -> (Tensor, Vec<Tensor>, Tensor) {
    let mut g = Graph::new(store);
    let (xv, ev) = (g.constant(x.clone()), g.constant(es.clone()));
    let (mix, alpha) = block.mixture(&mut g, &mut Pass::infer(), xv, ev, scen).unwrap();
    let experts = block
        .experts
        .iter()
        .map(|e| {
            let y = e.forward(&mut g, &mut Pass::infer(), xv, ev, scen).unwrap();
            g.value(y).clone()
        })
        .collect();
    (g.value(mix).clone(), experts, g.value(alpha).clone())
}

#[test]
fn single_expert_mixture_is_that_expert() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let block = MoeBlock::new(&mut store, "b", cfg(1), &mut rng).unwrap();
    let ids = all_ids(&store);
    randomize(&mut store, &ids, &mut rng);
    let x = rand_matrix(&mut rng, 3, 6, 1.0, 0.0);
    let es = rand_matrix(&mut rng, 3, 3, 1.0, 0.0);
    let (mix, experts, alpha) = block_outputs(&store, &block, &x, &es, &[0, 1, 2]);
    assert!(alpha.data().iter().all(|&a| a == 1.0));
    assert_eq!(mix, experts[0]);
}

#[test]
fn saturated_gate_selects_one_expert() {
    let (mut store, block, mut rng) = expert_fixture(12);
    store.value_mut(block.gate.w).data_mut().fill(0.0);
    store.value_mut(block.gate.b).data_mut().copy_from_slice(&[-400.0, 400.0, -400.0]);
    let x = rand_matrix(&mut rng, 4, 6, 1.0, 0.0);
    let es = rand_matrix(&mut rng, 4, 3, 1.0, 0.0);
    let (mix, experts, _) = block_outputs(&store, &block, &x, &es, &[0, 1, 2, 0]);
    assert!(mix.max_abs_diff(&experts[1]) < 1e-9);
}

#[test]
fn identical_experts_make_gate_irrelevant() {
    let (mut store, block, mut rng) = expert_fixture(13);
    let src: Vec<Tensor> = {
        let e0 = &block.experts[0];
        [e0.sap.w_shared, e0.sap.bias, e0.sap.a, e0.sap.b, e0.sap.gen_w, e0.sap.gen_b, e0.slope, e0.norm.gamma, e0.norm.beta, e0.norm.running_mean, e0.norm.running_var]
            .iter()
            .map(|&id| store.value(id).clone())
            .collect()
    };
    for e in &block.experts[1..] {
        let dst = [e.sap.w_shared, e.sap.bias, e.sap.a, e.sap.b, e.sap.gen_w, e.sap.gen_b, e.slope, e.norm.gamma, e.norm.beta, e.norm.running_mean, e.norm.running_var];
        for (id, t) in dst.iter().zip(&src) {
            *store.value_mut(*id) = t.clone();
        }
    }
    let x = rand_matrix(&mut rng, 3, 6, 1.0, 0.0);
    let es = rand_matrix(&mut rng, 3, 3, 1.0, 0.0);
    let (mix_a, experts, _) = block_outputs(&store, &block, &x, &es, &[0, 1, 2]);
    randomize(&mut store, &[block.gate.w, block.gate.b], &mut rng);
    let (mix_b, _, _) = block_outputs(&store, &block, &x, &es, &[0, 1, 2]);
    assert!(mix_a.max_abs_diff(&mix_b) < 1e-12);
    assert!(mix_a.max_abs_diff(&experts[0]) < 1e-12);
}

#[test]
fn mixture_is_coordinatewise_convex() {
    for seed in 0..20 {
        let (store, block, mut rng) = expert_fixture(100 + seed);
        let x = rand_matrix(&mut rng, 5, 6, 1.0, 0.0);
        let es = rand_matrix(&mut rng, 5, 3, 2.0, 0.0);
        let (mix, experts, _) = block_outputs(&store, &block, &x, &es, &[0, 1, 2, 1, 0]);
        for (k, m) in mix.data().iter().enumerate() {
            let lo = experts.iter().map(|e| e.data()[k]).fold(f64::INFINITY, f64::min);
            let hi = experts.iter().map(|e| e.data()[k]).fold(f64::NEG_INFINITY, f64::max);
            assert!(*m >= lo - 1e-12 && *m <= hi + 1e-12);
        }
    }
}

#[test]
fn block_gradients_pass_grad_check() {
    for seed in 0..10 {
        let (mut store, block, mut rng) = expert_fixture(200 + seed);
        let x = rand_matrix(&mut rng, 8, 6, 1.0, 0.0);
        let table = rand_matrix(&mut rng, 3, 3, 1.0, 0.0);
        let infer_scen = [0, 1, 2, 0, 1, 2, 0, 1];
        let train_scen = [2; 8];
        let ids = all_ids(&store);
        for (mode, scen) in [(Mode::Infer, &infer_scen), (Mode::Train, &train_scen)] {
            let es = Tensor::matrix(8, 3, scen.iter().flat_map(|&d| table.row(d).to_vec()).collect()).unwrap();
            let report = grad_check(&mut store, &ids, 1e-5, |g| {
                let (xv, ev) = (g.constant(x.clone()), g.constant(es.clone()));
                let y = block.forward(g, &mut Pass::new(mode), xv, ev, scen)?;
                let s = g.sigmoid(y);
                Ok(g.mean(s))
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{mode:?} seed {seed}: {:?}", report.worst.first());
        }
    }
}

#[test]
fn trainable_count_matches_store() {
    for (use_sap, use_dsbn) in [(true, true), (false, true), (true, false), (false, false)] {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let c = MoeConfig { use_sap, use_dsbn, ..cfg(3) };
        let block = MoeBlock::new(&mut store, "b", c, &mut rng).unwrap();
        assert_eq!(block.trainable_count(), store.trainable_count());
    }
}
