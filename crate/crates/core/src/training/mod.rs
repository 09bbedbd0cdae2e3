//! Losses, negative sampling, Adam, and the two-phase training loop.
//!
//! Phase one fits the teacher on the task loss. Phase two freezes it and
//! fits the student on `bce + λ·KL(p_t ‖ p_s)`. The phases draw from
//! separate random streams of the same seed, so the student trajectory
//! does not depend on whether a teacher was trained first.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Catalog, Dataset};
use crate::error::{Error, Result};
use crate::features::{FeatureSchema, InteractionRecord};
use crate::model::{DsmoeModel, ModelConfig, TeacherModel};
use crate::moe::{Mode, Pass};
use crate::numerics::{softplus, Gradients, Graph, ParamStore, Tensor, Var};

/// Probabilities are clamped to `[KD_EPS, 1 − KD_EPS]` inside the KD term.
pub const KD_EPS: f64 = 1e-7;

const TEACHER_STREAM: u64 = 1;
const STUDENT_STREAM: u64 = 2;
/// Mixed into the seed so teacher and student initializations differ.
pub const TEACHER_INIT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Interactions per batch, before negatives are appended.
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub negatives_per_positive: usize,
    pub seed: u64,
    /// Teacher budget; the student budget when absent.
    pub teacher_epochs: Option<usize>,
    /// When false no teacher is trained and the KD term is dropped.
    pub distill: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-6,
            batch_size: 4096,
            epochs: 50,
            lambda: 1.0,
            negatives_per_positive: 4,
            seed: 0,
            teacher_epochs: None,
            distill: true,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config("train.lambda", "must be non-negative"));
        }
        for (k, v) in [
            ("train.batch_size", self.batch_size),
            ("train.epochs", self.epochs),
            ("train.negatives_per_positive", self.negatives_per_positive),
        ] {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if self.teacher_epochs == Some(0) {
            return Err(Error::config("train.teacher_epochs", "must be positive"));
        }
        Ok(())
    }

    pub fn teacher_epochs(&self) -> usize {
        self.teacher_epochs.unwrap_or(self.epochs)
    }

    /// Whether phase two carries a KD term.
    pub fn uses_kd(&self) -> bool {
        self.distill && self.lambda > 0.0
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

// ---------------------------------------------------------------- losses

fn check_probability(p: f64, what: &str) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} {p} is outside (0, 1)")))
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("loss inputs have lengths {a} and {b}")));
    }
    if a == 0 {
        return Err(Error::Dimension("loss over an empty batch".into()));
    }
    Ok(())
}

/// Mean binary cross-entropy, evaluated through the logit of each `ŷ`.
pub fn bce_loss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(probs.len(), labels.len())?;
    let mut acc = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        check_probability(p, "prediction")?;
        if y > 1 {
            return Err(Error::Domain(format!("label {y} is not binary")));
        }
        let z = (p / (1.0 - p)).ln();
        acc += softplus(z) - f64::from(y) * z;
    }
    Ok(acc / probs.len() as f64)
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(KD_EPS, 1.0 - KD_EPS)
}

/// Mean binary `KL(p_t ‖ p_s)` after clamping both sides.
pub fn kd_loss(p_t: &[f64], p_s: &[f64]) -> Result<f64> {
    check_lengths(p_t.len(), p_s.len())?;
    let mut acc = 0.0;
    for (&t, &s) in p_t.iter().zip(p_s) {
        if t.is_nan() || s.is_nan() {
            return Err(Error::Domain("NaN probability in distillation loss".into()));
        }
        let (t, s) = (clamp_p(t), clamp_p(s));
        acc += t * (t.ln() - s.ln()) + (1.0 - t) * ((1.0 - t).ln() - (1.0 - s).ln());
    }
    Ok(acc / p_t.len() as f64)
}

/// `bce_loss + λ·kd_loss`; with `λ = 0` the KD term is not evaluated.
pub fn total_loss(probs: &[f64], labels: &[u8], p_t: &[f64], lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("distillation weight {lambda} is negative")));
    }
    let bce = bce_loss(probs, labels)?;
    if lambda == 0.0 {
        return Ok(bce);
    }
    Ok(bce + lambda * kd_loss(p_t, probs)?)
}

fn column(values: impl Iterator<Item = f64>) -> Tensor {
    let data: Vec<f64> = values.collect();
    Tensor::matrix(data.len(), 1, data).expect("non-empty column")
}

/// Mean of `softplus(z) − y·z` over an `n × 1` logit column.
pub fn bce_with_logits(g: &mut Graph, z: Var, labels: &[u8]) -> Result<Var> {
    let n = g.value(z).len();
    check_lengths(n, labels.len())?;
    let y = g.constant(column(labels.iter().map(|&l| f64::from(l))));
    let sp = g.softplus(z);
    let yz = g.mul(y, z)?;
    let per = g.sub(sp, yz)?;
    Ok(g.mean(per))
}

/// Mean `KL(p_t ‖ σ(z))` with the teacher held constant.
pub fn kd_with_logits(g: &mut Graph, z: Var, p_t: &[f64]) -> Result<Var> {
    let n = g.value(z).len();
    check_lengths(n, p_t.len())?;
    if p_t.iter().any(|p| p.is_nan()) {
        return Err(Error::Domain("NaN teacher probability".into()));
    }
    let t: Vec<f64> = p_t.iter().map(|&p| clamp_p(p)).collect();
    let entropy = t.iter().map(|&t| t * t.ln() + (1.0 - t) * (1.0 - t).ln()).sum::<f64>() / n as f64;
    let p = g.sigmoid(z);
    let p = g.clamp(p, KD_EPS, 1.0 - KD_EPS);
    let ones = g.constant(Tensor::full(&[n, 1], 1.0));
    let q = g.sub(ones, p)?;
    let lp = g.log(p)?;
    let lq = g.log(q)?;
    let tv = g.constant(column(t.iter().copied()));
    let uv = g.constant(column(t.iter().map(|t| 1.0 - t)));
    let a = g.mul(tv, lp)?;
    let b = g.mul(uv, lq)?;
    let cross = g.add(a, b)?;
    let cross = g.mean(cross);
    let h = g.scalar(entropy);
    g.sub(h, cross)
}

/// Loss terms of one student batch.
pub struct StudentLoss {
    pub total: Var,
    pub bce: Var,
    pub kd: Option<Var>,
}

pub fn student_loss(g: &mut Graph, z: Var, labels: &[u8], p_t: Option<&[f64]>, lambda: f64) -> Result<StudentLoss> {
    let bce = bce_with_logits(g, z, labels)?;
    match p_t {
        Some(p_t) if lambda > 0.0 => {
            let kd = kd_with_logits(g, z, p_t)?;
            let weighted = g.scale(kd, lambda)?;
            let total = g.add(bce, weighted)?;
            Ok(StudentLoss {
                total,
                bce,
                kd: Some(kd),
            })
        }
        _ => Ok(StudentLoss {
            total: bce,
            bce,
            kd: None,
        }),
    }
}

// ------------------------------------------------------------- sampling

/// Each positive followed by `ratio` negatives that keep its user and
/// scenario and take an item drawn uniformly from the rest of the catalog.
pub fn sample_negatives(
    positives: &[&InteractionRecord],
    schema: &FeatureSchema,
    catalog: &Catalog,
    ratio: usize,
    rng: &mut impl Rng,
) -> Result<Vec<InteractionRecord>> {
    if ratio == 0 {
        return Err(Error::Argument("negative ratio must be at least 1".into()));
    }
    if catalog.len() < 2 {
        return Err(Error::Sampling(format!(
            "cannot draw negatives from a catalog of {} item(s)",
            catalog.len()
        )));
    }
    let mut out = Vec::with_capacity(positives.len() * (ratio + 1));
    for &p in positives {
        let own = catalog
            .position(p.item_id)
            .ok_or_else(|| Error::Lookup(format!("item {} is not in the catalog", p.item_id)))?;
        out.push(p.clone());
        for _ in 0..ratio {
            let mut k = rng.random_range(0..catalog.len() - 1);
            if k >= own {
                k += 1;
            }
            let mut neg = catalog.substitute(schema, p, k);
            neg.label = 0;
            out.push(neg);
        }
    }
    Ok(out)
}

// ----------------------------------------------------------------- Adam

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators indexed like the parameter store; frozen entries
/// stay empty.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| if p.requires_grad { vec![0.0; p.value.len()] } else { Vec::new() })
            .collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update with L2 decay added to the gradient.
/// Trainable parameters absent from `grads` are treated as having zero
/// gradient. Nothing is modified when any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Dimension(format!(
            "optimizer tracks {} tensors, store holds {}",
            state.m.len(),
            store.len()
        )));
    }
    let mut by_index: Vec<Option<&Tensor>> = vec![None; store.len()];
    for (id, gt) in grads.params() {
        let p = store.get(id);
        if !p.requires_grad {
            continue;
        }
        if gt.len() != p.value.len() {
            return Err(Error::Dimension(format!(
                "gradient of {} has {} entries, parameter has {}",
                p.name,
                gt.len(),
                p.value.len()
            )));
        }
        if !gt.all_finite() {
            return Err(Error::Training(format!("non-finite gradient for parameter {}", p.name)));
        }
        by_index[id.index()] = Some(gt);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.trainable().collect();
    for id in ids {
        let i = id.index();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let theta = store.value_mut(id).data_mut();
        if m.len() != theta.len() {
            return Err(Error::Dimension(format!("optimizer moments for tensor {i} have the wrong size")));
        }
        let grad = by_index[i].map(Tensor::data);
        for k in 0..theta.len() {
            let gk = grad.map_or(0.0, |g| g[k]) + cfg.weight_decay * theta[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            theta[k] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

// ------------------------------------------------------------------ loop

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Teacher,
    Student,
}

/// One line of the loss trace. `kd` is 0 when the term is absent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub batch: usize,
    pub bce: f64,
    pub kd: f64,
    pub total: f64,
}

pub fn write_trace(w: &mut impl Write, trace: &[LossRecord]) -> Result<()> {
    for r in trace {
        let line = serde_json::to_string(r)?;
        writeln!(w, "{line}").map_err(|e| Error::io("loss trace", e))?;
    }
    Ok(())
}

pub fn read_trace(text: &str) -> Result<Vec<LossRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub trace: Vec<LossRecord>,
    pub teacher_trained: bool,
}

impl TrainReport {
    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &LossRecord> {
        self.trace.iter().filter(move |r| r.phase == phase)
    }

    /// Mean total loss of the last epoch of `phase`.
    pub fn final_loss(&self, phase: Phase) -> Option<f64> {
        let last = self.phase(phase).map(|r| r.epoch).max()?;
        let xs: Vec<f64> = self.phase(phase).filter(|r| r.epoch == last).map(|r| r.total).collect();
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Shuffled batches of labeled records: every positive expanded with its
/// sampled negatives, explicit negatives passed through.
fn epoch_batches(data: &Dataset, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<InteractionRecord>>> {
    let mut order: Vec<usize> = (0..data.records.len()).collect();
    order.shuffle(rng);
    let mut out = Vec::with_capacity(order.len().div_ceil(cfg.batch_size));
    for chunk in order.chunks(cfg.batch_size) {
        let mut batch = Vec::with_capacity(chunk.len() * (cfg.negatives_per_positive + 1));
        for &i in chunk {
            let r = &data.records[i];
            if r.label == 1 {
                batch.extend(sample_negatives(
                    &[r],
                    &data.schema,
                    &data.catalog,
                    cfg.negatives_per_positive,
                    rng,
                )?);
            } else {
                batch.push(r.clone());
            }
        }
        out.push(batch);
    }
    Ok(out)
}

fn finite_or_abort(phase: Phase, epoch: usize, batch: usize, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Training(format!(
            "non-finite loss in {phase:?} phase at epoch {epoch}, batch {batch}"
        )))
    }
}

fn check_data(data: &Dataset) -> Result<()> {
    if data.records.is_empty() {
        return Err(Error::Training("training set is empty".into()));
    }
    Ok(())
}

/// Phase one: the teacher alone on the task loss.
pub fn train_teacher(
    teacher: &mut TeacherModel,
    data: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    cfg.check()?;
    check_data(data)?;
    let mut rng = stream(cfg.seed, TEACHER_STREAM);
    let mut adam = AdamState::new(&teacher.store);
    let adam_cfg = cfg.adam();
    let mut trace = Vec::new();
    for epoch in 0..cfg.teacher_epochs() {
        for (b, batch) in epoch_batches(data, cfg, &mut rng)?.iter().enumerate() {
            let refs: Vec<&InteractionRecord> = batch.iter().collect();
            let labels: Vec<u8> = batch.iter().map(|r| r.label).collect();
            let (bce, grads) = {
                let mut g = Graph::new(&teacher.store);
                let z = teacher.logits(&mut g, &refs)?;
                let loss = bce_with_logits(&mut g, z, &labels)?;
                let bce = g.value(loss).item();
                finite_or_abort(Phase::Teacher, epoch, b, &[bce])?;
                (bce, g.backward(loss)?)
            };
            adam_step(&mut teacher.store, &grads, &mut adam, &adam_cfg)?;
            let rec = LossRecord {
                phase: Phase::Teacher,
                epoch,
                batch: b,
                bce,
                kd: 0.0,
                total: bce,
            };
            observer(&rec);
            trace.push(rec);
        }
    }
    Ok(trace)
}

/// Phase two: the student on `bce + λ·kd` against a frozen teacher. The
/// teacher is consulted only when the KD term is active.
pub fn train_student(
    model: &mut DsmoeModel,
    teacher: Option<&TeacherModel>,
    data: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    cfg.check()?;
    check_data(data)?;
    let teacher = if cfg.uses_kd() {
        Some(teacher.ok_or_else(|| Error::Contract("distillation is enabled but no teacher was supplied".into()))?)
    } else {
        None
    };
    let mut rng = stream(cfg.seed, STUDENT_STREAM);
    let mut adam = AdamState::new(&model.store);
    let adam_cfg = cfg.adam();
    let mut trace = Vec::new();
    for epoch in 0..cfg.epochs {
        for (b, batch) in epoch_batches(data, cfg, &mut rng)?.iter().enumerate() {
            let refs: Vec<&InteractionRecord> = batch.iter().collect();
            let labels: Vec<u8> = batch.iter().map(|r| r.label).collect();
            let p_t = teacher.map(|t| t.predict(&refs, Mode::Infer)).transpose()?;
            let mut pass = Pass::train();
            let (rec, grads) = {
                let mut g = Graph::new(&model.store);
                let z = model.logits(&mut g, &mut pass, &refs)?;
                let loss = student_loss(&mut g, z, &labels, p_t.as_deref(), cfg.lambda)?;
                let bce = g.value(loss.bce).item();
                let kd = loss.kd.map_or(0.0, |k| g.value(k).item());
                let total = g.value(loss.total).item();
                finite_or_abort(Phase::Student, epoch, b, &[bce, kd, total])?;
                let rec = LossRecord {
                    phase: Phase::Student,
                    epoch,
                    batch: b,
                    bce,
                    kd,
                    total,
                };
                (rec, g.backward(loss.total)?)
            };
            pass.commit(&mut model.store);
            adam_step(&mut model.store, &grads, &mut adam, &adam_cfg)?;
            observer(&rec);
            trace.push(rec);
        }
    }
    Ok(trace)
}

/// Both phases. The teacher is trained only when `cfg.distill` is set and
/// a teacher is supplied.
pub fn train(
    model: &mut DsmoeModel,
    teacher: Option<&mut TeacherModel>,
    data: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&LossRecord),
) -> Result<TrainReport> {
    cfg.check()?;
    data.validate()?;
    let mut report = TrainReport::default();
    let teacher: Option<&TeacherModel> = match teacher {
        Some(t) if cfg.distill => {
            report.trace = train_teacher(t, data, cfg, observer)?;
            report.teacher_trained = true;
            Some(t)
        }
        _ => None,
    };
    report.trace.extend(train_student(model, teacher, data, cfg, observer)?);
    Ok(report)
}

/// Freshly initialized models trained on `data`.
#[derive(Clone, Debug)]
pub struct Fitted {
    pub student: DsmoeModel,
    pub teacher: Option<TeacherModel>,
    pub report: TrainReport,
}

/// Initializes the student (and, when distilling, the teacher) from
/// `cfg.seed` and trains both phases.
pub fn fit(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    observer: &mut dyn FnMut(&LossRecord),
) -> Result<Fitted> {
    let mut student = DsmoeModel::new(&data.schema, model_cfg, cfg.seed)?;
    let mut teacher = if cfg.distill {
        Some(TeacherModel::new(&data.schema, model_cfg, cfg.seed ^ TEACHER_INIT_SALT)?)
    } else {
        None
    };
    let report = train(&mut student, teacher.as_mut(), data, cfg, observer)?;
    Ok(Fitted {
        student,
        teacher,
        report,
    })
}
