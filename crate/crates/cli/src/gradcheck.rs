//! Finite-difference check of student and teacher gradients on a tiny
//! configuration.

use dsmoe::features::{FeatureKind, FeatureSchema, FieldSpec, FieldValue, InteractionRecord, Side};
use dsmoe::model::{DsmoeModel, ModelConfig, TeacherModel};
use dsmoe::moe::Pass;
use dsmoe::numerics::{grad_check, BackwardFault, ParamId, ParamStore, ProbeResult};
use dsmoe::training::{bce_with_logits, student_loss};
use dsmoe::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;
const N_SCENARIOS: usize = 3;
const BATCH: usize = 12;

pub fn tiny_schema() -> FeatureSchema {
    let f = |name: &str, side, kind, cardinality| FieldSpec {
        name: name.into(),
        side,
        kind,
        cardinality,
    };
    FeatureSchema::new(
        vec![
            f("user", Side::User, FeatureKind::Sparse, Some(5)),
            f("activity", Side::User, FeatureKind::Dense, None),
            f("recent", Side::User, FeatureKind::Sequential, Some(7)),
            f("item", Side::Item, FeatureKind::Sparse, Some(7)),
            f("category", Side::Item, FeatureKind::Sparse, Some(3)),
        ],
        N_SCENARIOS,
        4,
    )
    .expect("tiny schema is valid")
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        experts: 2,
        rank: 2,
        d_hidden: 8,
        d_match: 4,
        use_sap: true,
        use_dsbn: true,
        teacher_hidden: vec![8, 6],
    }
}

fn random_record(rng: &mut impl Rng, scenario: usize) -> InteractionRecord {
    let item = rng.random_range(0..7);
    let len = rng.random_range(0..4);
    InteractionRecord {
        user_id: rng.random_range(0..5),
        item_id: item,
        scenario,
        label: rng.random_range(0..2),
        values: vec![
            FieldValue::Sparse(rng.random_range(0..5)),
            FieldValue::Dense(rng.random_range(-2.0..2.0)),
            FieldValue::Sequential((0..len).map(|_| rng.random_range(0..7)).collect()),
            FieldValue::Sparse(item),
            FieldValue::Sparse(item % 3),
        ],
    }
}

/// Every tensor gets random values so that zero-initialized factors do
/// not hide gradients; running variances stay positive.
fn randomize(store: &mut ParamStore, rng: &mut impl Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let positive = store.get(id).name.ends_with("running_var");
        for v in store.value_mut(id).data_mut() {
            *v = if positive {
                rng.random_range(0.5..2.0)
            } else {
                rng.random_range(-1.0..1.0)
            };
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct WorstProbe {
    pub model: String,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub student_max_rel_error: f64,
    pub teacher_max_rel_error: f64,
    pub probes: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckSummary {
    pub eps: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub seeds: Vec<SeedResult>,
    pub worst: Vec<WorstProbe>,
}

fn worst(model: &str, probes: &[ProbeResult]) -> Vec<WorstProbe> {
    probes
        .iter()
        .map(|p| WorstProbe {
            model: model.into(),
            param: p.param.clone(),
            index: p.index,
            analytic: p.analytic,
            numeric: p.numeric,
            rel_error: p.rel_error,
        })
        .collect()
}

/// Student loss is `bce + kd` against a random teacher; teacher loss is
/// its BCE. Every trainable parameter of both models is probed.
pub fn run_gradcheck(seeds: &[u64], fault: Option<BackwardFault>) -> Result<GradcheckSummary> {
    let schema = tiny_schema();
    let cfg = tiny_config();
    let mut seed_results = Vec::new();
    let mut all_worst = Vec::new();
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records: Vec<InteractionRecord> = (0..BATCH).map(|i| random_record(&mut rng, i % N_SCENARIOS)).collect();
        let refs: Vec<&InteractionRecord> = records.iter().collect();
        let labels: Vec<u8> = records.iter().map(|r| r.label).collect();

        let mut teacher = TeacherModel::new(&schema, &cfg, seed ^ 1)?;
        randomize(&mut teacher.store, &mut rng);
        let mut student = DsmoeModel::new(&schema, &cfg, seed)?;
        randomize(&mut student.store, &mut rng);
        let p_t: Vec<f64> = (0..BATCH).map(|_| rng.random_range(0.05..0.95)).collect();

        let s_ids: Vec<ParamId> = student.store.trainable().collect();
        let frozen = student.clone();
        let s_report = grad_check(&mut student.store, &s_ids, GRADCHECK_EPS, |g| {
            if let Some(f) = fault {
                g.inject_fault(f);
            }
            let z = frozen.logits(g, &mut Pass::train(), &refs)?;
            Ok(student_loss(g, z, &labels, Some(&p_t), 1.0)?.total)
        })?;

        let t_ids: Vec<ParamId> = teacher.store.trainable().collect();
        let frozen_t = teacher.clone();
        let t_report = grad_check(&mut teacher.store, &t_ids, GRADCHECK_EPS, |g| {
            if let Some(f) = fault {
                g.inject_fault(f);
            }
            let z = frozen_t.logits(g, &refs)?;
            bce_with_logits(g, z, &labels)
        })?;

        all_worst.extend(worst("student", &s_report.worst));
        all_worst.extend(worst("teacher", &t_report.worst));
        seed_results.push(SeedResult {
            seed,
            student_max_rel_error: s_report.max_rel_error,
            teacher_max_rel_error: t_report.max_rel_error,
            probes: s_report.probes + t_report.probes,
        });
    }
    all_worst.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    all_worst.truncate(5);
    let max_rel_error = seed_results
        .iter()
        .map(|s| s.student_max_rel_error.max(s.teacher_max_rel_error))
        .fold(0.0, f64::max);
    Ok(GradcheckSummary {
        eps: GRADCHECK_EPS,
        tolerance: GRADCHECK_TOL,
        max_rel_error,
        passed: max_rel_error < GRADCHECK_TOL,
        seeds: seed_results,
        worst: all_worst,
    })
}
