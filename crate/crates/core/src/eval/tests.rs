use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{read_table, synth_generate, ExperimentConfig, SynthSpec};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

fn random_index(rng: &mut impl Rng, n: usize, d: usize, ties: bool) -> RetrievalIndex {
    let data: Vec<f64> = (0..n * d)
        .map(|_| {
            if ties {
                f64::from(rng.random_range(-2i32..=2))
            } else {
                rng.random_range(-1.0..1.0)
            }
        })
        .collect();
    let mut ids: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
    ids.reverse();
    RetrievalIndex::new(0, ids, Tensor::matrix(n, d, data).unwrap()).unwrap()
}

/// Full sort by score descending, ties by ascending id.
fn oracle(index: &RetrievalIndex, u: &[f64], k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = (0..index.len())
        .map(|i| (index.item_matrix.row(i).iter().zip(u).map(|(a, b)| a * b).sum(), index.item_ids[i]))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|x| x.1).collect()
}

fn small_setup() -> (crate::data::SynthData, DsmoeModel) {
    let spec = SynthSpec {
        n_users: 40,
        n_items: 150,
        n_scenarios: 3,
        scenario_proportions: vec![0.7, 0.2, 0.1],
        interactions_total: 1500,
        n_categories: 6,
        embedding_dim: 4,
        seed: 11,
        ..SynthSpec::default()
    };
    let data = synth_generate(&spec).unwrap();
    let cfg = ModelConfig {
        experts: 3,
        rank: 2,
        d_hidden: 6,
        d_match: 4,
        teacher_hidden: vec![8],
        ..ModelConfig::default()
    };
    let model = DsmoeModel::new(&data.schema, &cfg, 2).unwrap();
    (data, model)
}

// ------------------------------------------------------------ retrieval

#[test]
fn top_k_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for trial in 0..50 {
        let n = rng.random_range(1..=500);
        let index = random_index(&mut rng, n, 3, trial % 2 == 0);
        let u: Vec<f64> = if trial % 2 == 0 {
            vec![1.0, 0.0, 1.0]
        } else {
            (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        for k in [1, n.min(7), n.min(50), n] {
            assert_eq!(top_k_retrieve(&index, &u, k).unwrap(), oracle(&index, &u, k), "n {n} k {k}");
        }
    }
}

#[test]
fn full_k_is_a_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let index = random_index(&mut rng, 40, 2, true);
    let mut all = top_k_retrieve(&index, &[0.5, -1.0], 40).unwrap();
    all.sort_unstable();
    let mut ids = index.item_ids.clone();
    ids.sort_unstable();
    assert_eq!(all, ids);
    assert!(matches!(top_k_retrieve(&index, &[0.5, -1.0], 0), Err(Error::Argument(_))));
    assert!(matches!(top_k_retrieve(&index, &[0.5, -1.0], 41), Err(Error::Argument(_))));
    assert!(matches!(top_k_retrieve(&index, &[0.5], 3), Err(Error::Dimension(_))));
}

#[test]
fn dominant_item_ranks_first() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut index = random_index(&mut rng, 30, 3, false);
    for v in index.item_matrix.data_mut()[9..12].iter_mut() {
        *v = 100.0;
    }
    let u = [1.0, 1.0, 1.0];
    assert_eq!(top_k_retrieve(&index, &u, 1).unwrap(), vec![index.item_ids[3]]);
    let without = top_k_retrieve_excluding(&index, &u, 1, &[index.item_ids[3]]).unwrap();
    assert_ne!(without, vec![index.item_ids[3]]);
}

#[test]
fn recall_examples() {
    assert_eq!(recall_at_k(&[1, 2, 3], &[2, 9]), Some(0.5));
    assert_eq!(recall_at_k(&[1, 2, 3], &[4]), Some(0.0));
    assert_eq!(recall_at_k(&[4, 1], &[1, 4, 4]), Some(1.0));
    assert_eq!(recall_at_k(&[1], &[]), None);
}

#[test]
fn recall_is_monotone_in_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let index = random_index(&mut rng, 60, 3, false);
        let u: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rel: Vec<usize> = (0..5).map(|_| index.item_ids[rng.random_range(0..60)]).collect();
        let top = top_k_retrieve(&index, &u, 60).unwrap();
        let mut prev = 0.0;
        for k in 1..=60 {
            let r = recall_at_k(&top[..k], &rel).unwrap();
            assert!(r >= prev);
            prev = r;
        }
        assert_eq!(prev, 1.0);
    }
}

#[test]
fn unrelated_vectors_give_chance_recall() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, k, users) = (200, 20, 2000);
    let index = random_index(&mut rng, n, 4, false);
    let mut recalls = Vec::with_capacity(users);
    for _ in 0..users {
        let u: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rel = vec![index.item_ids[rng.random_range(0..n)]];
        recalls.push(recall_at_k(&top_k_retrieve(&index, &u, k).unwrap(), &rel).unwrap());
    }
    let mean = recalls.iter().sum::<f64>() / users as f64;
    let p = k as f64 / n as f64;
    let se = (p * (1.0 - p) / users as f64).sqrt();
    assert!((mean - p).abs() < 3.0 * se, "{mean} vs {p}");
}

// ------------------------------------------------------------- analyses

#[test]
fn cosine_grid_properties() {
    let grid = cosine_grid(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 0.0], vec![-1.0, 1.0]]);
    assert_eq!(grid[0][0], Some(1.0));
    assert_eq!(grid[0][1], Some(1.0));
    assert_eq!(grid[2], vec![None; 4]);
    assert_eq!(grid[1][2], None);
    assert!((grid[0][3].unwrap() + 0.5f64.sqrt()).abs() < 1e-15);
    for i in 0..4 {
        for j in 0..4 {
            assert_eq!(grid[i][j], grid[j][i]);
        }
    }
}

#[test]
fn model_analyses_are_well_formed() {
    let (data, model) = small_setup();
    let sim = bs_similarity(&model).unwrap();
    for i in 0..3 {
        assert_eq!(sim[i][i], Some(1.0));
        for j in 0..3 {
            assert_eq!(sim[i][j], sim[j][i]);
        }
    }
    let act = expert_activation_profile(&model, &data.test).unwrap();
    for row in &act {
        let sum: f64 = row.iter().map(|v| v.unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
    let mut empty = data.test.clone();
    empty.records.retain(|r| r.scenario != 1);
    let act = expert_activation_profile(&model, &empty).unwrap();
    assert_eq!(act[1], vec![None; 3]);
}

#[test]
fn single_expert_activation_is_one() {
    let (data, _) = small_setup();
    let cfg = ModelConfig {
        experts: 1,
        ..ModelConfig::default()
    };
    let model = DsmoeModel::new(&data.schema, &cfg, 0).unwrap();
    for row in expert_activation_profile(&model, &data.train).unwrap() {
        assert_eq!(row, vec![Some(1.0)]);
    }
}

#[test]
fn uniform_gate_with_zero_weights() {
    let (data, mut model) = small_setup();
    let ids: Vec<_> = model
        .store
        .ids()
        .filter(|&id| model.store.get(id).name.contains("gate"))
        .collect();
    assert!(!ids.is_empty());
    for id in ids {
        model.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    for row in expert_activation_profile(&model, &data.train).unwrap() {
        for v in row {
            assert!((v.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}

// ----------------------------------------------------------- evaluation

#[test]
fn evaluation_report_is_consistent() {
    let (data, model) = small_setup();
    let cfg = EvalConfig {
        ks: vec![1, 10, 50],
        exclude_train: true,
    };
    let report = evaluate(&model, &data.train, &data.test, &cfg).unwrap();
    assert_eq!(report.n_items, 150);
    for s in &report.scenarios {
        let r: Vec<f64> = s.recall.iter().map(|v| v.unwrap()).collect();
        assert!(r.windows(2).all(|w| w[0] <= w[1]), "{r:?}");
        assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.pairs > 0);
    }
    assert_eq!(report, evaluate(&model, &data.train, &data.test, &cfg).unwrap());

    let dir = tempfile::tempdir().unwrap();
    report.write(dir.path()).unwrap();
    let recall = read_table(&dir.path().join("recall.csv")).unwrap();
    assert_eq!(recall.rows.len(), 3);
    assert_eq!(recall.header[3], "recall@1");
    let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);

    let too_big = EvalConfig {
        ks: vec![151],
        exclude_train: true,
    };
    assert!(matches!(
        evaluate(&model, &data.train, &data.test, &too_big),
        Err(Error::Argument(_))
    ));
}

// ---------------------------------------------------------------- sweep

#[test]
fn sweep_spec_parsing() {
    let s = SweepSpec::parse("experts=1..3", vec![0]).unwrap();
    assert_eq!(s.axis, SweepAxis::Experts);
    assert_eq!(s.values, vec![1, 2, 3]);
    assert_eq!(SweepSpec::parse("rank=1,4", vec![0]).unwrap().values, vec![1, 4]);
    assert!(SweepSpec::parse("depth=1..2", vec![0]).is_err());
    assert!(SweepSpec::parse("rank=0..2", vec![0]).is_err());
    assert!(SweepSpec::parse("rank", vec![0]).is_err());
    assert!(SweepSpec::parse("rank=1", vec![]).is_err());
}

#[test]
fn sweep_produces_every_cell() {
    let (data, _) = small_setup();
    let base = ExperimentConfig {
        train: TrainConfig {
            epochs: 1,
            batch_size: 512,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        },
        model: ModelConfig {
            d_hidden: 6,
            d_match: 4,
            teacher_hidden: vec![8],
            ..ModelConfig::default()
        },
        eval: EvalConfig {
            ks: vec![5, 10],
            exclude_train: true,
        },
        ..ExperimentConfig::default()
    };
    let spec = SweepSpec::parse("rank=1,2", vec![0, 1]).unwrap();
    let mut seen = 0;
    let (table, cells) = sweep(&base, &data, &spec, &mut |_| seen += 1).unwrap();
    assert_eq!(seen, 4);
    assert_eq!(cells.len(), 4);
    assert!(cells.iter().all(|c| c.outcome.is_ok()));
    assert_eq!(cells[3].config.model.rank, 2);
    assert_eq!(cells[3].config.train.seed, 1);
    // values × seeds × scenarios × ks
    assert_eq!(table.rows.len(), 2 * 2 * 3 * 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    table.write(&path).unwrap();
    let back = read_table(&path).unwrap();
    assert_eq!(back.header, SWEEP_HEADER.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    assert_eq!(back.rows, table.rows);
}

#[test]
fn failed_sweep_cells_are_recorded() {
    let (data, _) = small_setup();
    let mut base = ExperimentConfig::default();
    base.train.epochs = 1;
    base.eval.ks = vec![1000];
    let spec = SweepSpec::parse("experts=1", vec![0]).unwrap();
    let (table, cells) = sweep(&base, &data, &spec, &mut |_| {}).unwrap();
    assert!(cells[0].outcome.is_err());
    assert_eq!(table.rows.len(), 1);
    assert!(table.rows[0][3].starts_with("failed"));
}
