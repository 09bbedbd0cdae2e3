//! The two-tower student, the joint-feature teacher, and model accounting.
//!
//! The student encodes users and items independently with one SAP-MMOE
//! block per tower and scores a pair as `σ(⟨ê_u, ê_v⟩)`. The teacher sees
//! the concatenation of user, item and scenario embeddings and is only used
//! to produce soft targets during training.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    assemble_input, embed_scenario, EmbeddingTables, FeatureKind, FeatureSchema, InteractionRecord, Side,
};
use crate::moe::{Mode, MoeBlock, MoeConfig, Pass, PRELU_INIT};
use crate::numerics::{sigmoid, Graph, ParamId, ParamStore, Tensor, Var};
use crate::sap::SapLayer;

pub use checkpoint::{
    check_fingerprint, read_checkpoint, write_checkpoint, CheckpointContents, CheckpointKind, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub experts: usize,
    pub rank: usize,
    pub d_hidden: usize,
    pub d_match: usize,
    pub use_sap: bool,
    pub use_dsbn: bool,
    pub teacher_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            experts: 3,
            rank: 4,
            d_hidden: 64,
            d_match: 32,
            use_sap: true,
            use_dsbn: true,
            teacher_hidden: vec![128, 128],
        }
    }
}

impl ModelConfig {
    pub fn check(&self) -> Result<()> {
        let positive = [
            ("model.experts", self.experts),
            ("model.rank", self.rank),
            ("model.d_hidden", self.d_hidden),
            ("model.d_match", self.d_match),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if self.teacher_hidden.is_empty() || self.teacher_hidden.contains(&0) {
            return Err(Error::config("model.teacher_hidden", "needs at least one positive width"));
        }
        Ok(())
    }

    fn tower(&self, schema: &FeatureSchema, side: Side) -> MoeConfig {
        MoeConfig {
            d_in: schema.side_dim(side),
            d_hidden: self.d_hidden,
            d_out: self.d_match,
            experts: self.experts,
            rank: self.rank,
            d_emb: schema.embedding_dim,
            n_scenarios: schema.scenario_cardinality,
            use_sap: self.use_sap,
            use_dsbn: self.use_dsbn,
        }
    }
}

/// Two-tower scenario-adaptive mixture-of-experts retriever.
#[derive(Clone, Debug)]
pub struct DsmoeModel {
    pub schema: FeatureSchema,
    pub config: ModelConfig,
    pub store: ParamStore,
    pub tables: EmbeddingTables,
    pub user_tower: MoeBlock,
    pub item_tower: MoeBlock,
}

impl DsmoeModel {
    pub fn new(schema: &FeatureSchema, config: &ModelConfig, seed: u64) -> Result<Self> {
        schema.check()?;
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tables = EmbeddingTables::new(schema, &mut store, "student", &mut rng);
        let user_tower = MoeBlock::new(&mut store, "student.user", config.tower(schema, Side::User), &mut rng)?;
        let item_tower = MoeBlock::new(&mut store, "student.item", config.tower(schema, Side::Item), &mut rng)?;
        Ok(Self {
            schema: schema.clone(),
            config: config.clone(),
            store,
            tables,
            user_tower,
            item_tower,
        })
    }

    fn tower(&self, side: Side) -> &MoeBlock {
        match side {
            Side::User => &self.user_tower,
            Side::Item => &self.item_tower,
        }
    }

    /// Encodes one side of every record: `n × d_match`.
    pub fn encode(&self, g: &mut Graph, pass: &mut Pass, records: &[&InteractionRecord], side: Side) -> Result<Var> {
        let scen: Vec<usize> = records.iter().map(|r| r.scenario).collect();
        let x = assemble_input(g, &self.schema, &self.tables, records, side)?;
        let e_s = embed_scenario(g, &self.tables, &scen)?;
        self.tower(side).forward(g, pass, x, e_s, &scen)
    }

    /// Pre-sigmoid scores `⟨ê_u, ê_v⟩` per record: `n × 1`.
    pub fn logits(&self, g: &mut Graph, pass: &mut Pass, records: &[&InteractionRecord]) -> Result<Var> {
        let u = self.encode(g, pass, records, Side::User)?;
        let v = self.encode(g, pass, records, Side::Item)?;
        g.row_dot(u, v)
    }

    /// Value-level batch encoding. Train mode uses batch statistics but
    /// does not commit running-statistic updates.
    pub fn encode_values(&self, records: &[&InteractionRecord], side: Side, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let out = self.encode(&mut g, &mut Pass::new(mode), records, side)?;
        Ok(g.value(out).clone())
    }

    pub fn user_encode(&self, record: &InteractionRecord, mode: Mode) -> Result<Vec<f64>> {
        self.schema.validate(record)?;
        Ok(self.encode_values(&[record], Side::User, mode)?.into_data())
    }

    pub fn item_encode(&self, record: &InteractionRecord, mode: Mode) -> Result<Vec<f64>> {
        self.schema.validate(record)?;
        Ok(self.encode_values(&[record], Side::Item, mode)?.into_data())
    }

    /// Infer-mode encodings of many records, in chunks.
    pub fn encode_batch(&self, records: &[&InteractionRecord], side: Side) -> Result<Tensor> {
        const CHUNK: usize = 2048;
        let mut data = Vec::with_capacity(records.len() * self.config.d_match);
        for chunk in records.chunks(CHUNK) {
            data.extend_from_slice(self.encode_values(chunk, side, Mode::Infer)?.data());
        }
        Tensor::matrix(records.len(), self.config.d_match, data)
    }

    /// Scenario embedding row `d`.
    pub fn scenario_embedding(&self, d: usize) -> Result<Vec<f64>> {
        let t = self.store.value(self.tables.scenario);
        if d >= t.rows() {
            return Err(Error::Lookup(format!("scenario {d} out of range")));
        }
        Ok(t.row(d).to_vec())
    }

    pub fn stats(&self) -> ModelStats {
        model_stats(self)
    }

    /// Ids of the low-rank correction parameters of every SAP layer.
    pub fn adapter_params(&self) -> Vec<ParamId> {
        self.user_tower
            .sap_layers()
            .into_iter()
            .chain(self.item_tower.sap_layers())
            .flat_map(|l| l.adapter_params())
            .collect()
    }
}

/// `σ(⟨ê_u, ê_v⟩)`.
pub fn score(user: &[f64], item: &[f64]) -> Result<f64> {
    if user.len() != item.len() {
        return Err(Error::Dimension(format!(
            "cannot score vectors of length {} and {}",
            user.len(),
            item.len()
        )));
    }
    Ok(sigmoid(user.iter().zip(item).map(|(a, b)| a * b).sum()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelStats {
    pub param_count: usize,
    pub flops_per_score: usize,
}

fn embedding_count(schema: &FeatureSchema) -> usize {
    let d = schema.embedding_dim;
    let fields: usize = schema
        .fields
        .iter()
        .map(|f| match f.kind {
            FeatureKind::Dense => d,
            _ => f.cardinality.unwrap_or(1) * d,
        })
        .sum();
    fields + schema.scenario_cardinality * d
}

/// FLOPs to build the input embeddings of one side of one record. Lookups
/// are free; dense fields scale a row; sequential fields are counted as one
/// pooled row.
fn embedding_flops(schema: &FeatureSchema, side: Side) -> usize {
    schema
        .side_fields(side)
        .map(|f| match schema.fields[f].kind {
            FeatureKind::Sparse => 0,
            FeatureKind::Dense | FeatureKind::Sequential => schema.embedding_dim,
        })
        .sum()
}

/// Trainable scalar count and forward FLOPs for scoring one user-item pair.
/// Matrix products count `2·m·k·n`; elementwise maps count one per output.
pub fn model_stats(model: &DsmoeModel) -> ModelStats {
    let param_count =
        embedding_count(&model.schema) + model.user_tower.trainable_count() + model.item_tower.trainable_count();
    let flops = embedding_flops(&model.schema, Side::User)
        + embedding_flops(&model.schema, Side::Item)
        + model.user_tower.flops()
        + model.item_tower.flops()
        + 2 * model.config.d_match
        + 4;
    ModelStats {
        param_count,
        flops_per_score: flops,
    }
}

/// Joint-feature scorer used as the distillation source.
#[derive(Clone, Debug)]
pub struct TeacherModel {
    pub schema: FeatureSchema,
    pub config: ModelConfig,
    pub store: ParamStore,
    pub tables: EmbeddingTables,
    pub trunk: Vec<(SapLayer, ParamId)>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl TeacherModel {
    pub fn new(schema: &FeatureSchema, config: &ModelConfig, seed: u64) -> Result<Self> {
        schema.check()?;
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tables = EmbeddingTables::new(schema, &mut store, "teacher", &mut rng);
        let mut d_in = schema.side_dim(Side::User) + schema.side_dim(Side::Item) + schema.embedding_dim;
        let mut trunk = Vec::new();
        for (i, &width) in config.teacher_hidden.iter().enumerate() {
            let rank = config.rank.min(d_in).min(width);
            let sap = SapLayer::new(
                &mut store,
                &format!("teacher.trunk{i}"),
                d_in,
                width,
                rank,
                schema.embedding_dim,
                true,
                &mut rng,
            )?;
            let slope = store.insert(format!("teacher.trunk{i}.prelu"), Tensor::scalar(PRELU_INIT), true);
            trunk.push((sap, slope));
            d_in = width;
        }
        let head_w = store.uniform("teacher.head.w", &[1, d_in], 1.0 / (d_in as f64).sqrt(), &mut rng);
        let head_b = store.zeros("teacher.head.b", &[1]);
        Ok(Self {
            schema: schema.clone(),
            config: config.clone(),
            store,
            tables,
            trunk,
            head_w,
            head_b,
        })
    }

    /// Teacher logits per record: `n × 1`.
    pub fn logits(&self, g: &mut Graph, records: &[&InteractionRecord]) -> Result<Var> {
        let scen: Vec<usize> = records.iter().map(|r| r.scenario).collect();
        let u = assemble_input(g, &self.schema, &self.tables, records, Side::User)?;
        let v = assemble_input(g, &self.schema, &self.tables, records, Side::Item)?;
        let e_s = embed_scenario(g, &self.tables, &scen)?;
        let mut h = g.concat_cols(&[u, v, e_s])?;
        for (sap, slope) in &self.trunk {
            let z = sap.forward(g, h, e_s)?;
            let a = g.param(*slope);
            h = g.prelu(z, a)?;
        }
        let w = g.param(self.head_w);
        let b = g.param(self.head_b);
        let z = g.matmul_nt(h, w)?;
        g.add_bias(z, b)
    }

    /// `p_t` for each record. The teacher has no normalization state, so
    /// the result is the same in either mode.
    pub fn predict(&self, records: &[&InteractionRecord], _mode: Mode) -> Result<Vec<f64>> {
        const CHUNK: usize = 4096;
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(CHUNK) {
            let mut g = Graph::new(&self.store);
            let z = self.logits(&mut g, chunk)?;
            out.extend(g.value(z).data().iter().map(|&v| sigmoid(v)));
        }
        Ok(out)
    }

    /// Probability for `record`'s user and scenario paired with the item
    /// features of `candidate`.
    pub fn teacher_forward(&self, record: &InteractionRecord, candidate: &InteractionRecord, mode: Mode) -> Result<f64> {
        self.schema.validate(record)?;
        self.schema.validate(candidate)?;
        let mut joint = record.clone();
        joint.item_id = candidate.item_id;
        for f in self.schema.side_fields(Side::Item) {
            joint.values[f] = candidate.values[f].clone();
        }
        Ok(self.predict(&[&joint], mode)?[0])
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }
}
