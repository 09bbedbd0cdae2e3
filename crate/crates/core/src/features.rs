//! Feature schemas, embedding tables and tower input assembly.
//!
//! Sparse fields embed by row lookup, dense fields scale a learned
//! projection row, sequential fields mean-pool the rows of their elements.
//! An empty sequence embeds to zero.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Column names owned by the interaction format itself.
pub const RESERVED_COLUMNS: [&str; 4] = ["user_id", "item_id", "scenario_id", "label"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Sparse,
    Dense,
    Sequential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    User,
    Item,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub side: Side,
    pub kind: FeatureKind,
    /// Vocabulary size; required for sparse and sequential fields.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cardinality: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub fields: Vec<FieldSpec>,
    pub scenario_cardinality: usize,
    pub embedding_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FieldValue {
    Sparse(usize),
    Dense(f64),
    Sequential(Vec<usize>),
}

/// One labeled `(user, item, scenario, label)` event with raw feature
/// values in schema field order.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionRecord {
    pub user_id: usize,
    pub item_id: usize,
    pub scenario: usize,
    pub label: u8,
    pub values: Vec<FieldValue>,
}

impl FeatureSchema {
    pub fn new(fields: Vec<FieldSpec>, scenario_cardinality: usize, embedding_dim: usize) -> Result<Self> {
        let s = Self {
            fields,
            scenario_cardinality,
            embedding_dim,
        };
        s.check()?;
        Ok(s)
    }

    pub fn check(&self) -> Result<()> {
        if self.scenario_cardinality == 0 {
            return Err(Error::Validation("schema needs at least one scenario".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Validation("embedding dimension must be positive".into()));
        }
        for (i, f) in self.fields.iter().enumerate() {
            if RESERVED_COLUMNS.contains(&f.name.as_str()) {
                return Err(Error::Validation(format!("field name `{}` is reserved", f.name)));
            }
            if f.name.is_empty() || f.name.contains(',') {
                return Err(Error::Validation(format!("invalid field name `{}`", f.name)));
            }
            if self.fields[..i].iter().any(|g| g.name == f.name) {
                return Err(Error::Validation(format!("duplicate field `{}`", f.name)));
            }
            match (f.kind, f.cardinality) {
                (FeatureKind::Dense, _) => {}
                (_, Some(c)) if c >= 1 => {}
                _ => {
                    return Err(Error::Validation(format!(
                        "field `{}` needs a cardinality of at least 1",
                        f.name
                    )))
                }
            }
        }
        for side in [Side::User, Side::Item] {
            if self.side_fields(side).next().is_none() {
                return Err(Error::Validation(format!("schema declares no {side:?} fields")));
            }
        }
        Ok(())
    }

    pub fn side_fields(&self, side: Side) -> impl Iterator<Item = usize> + '_ {
        self.fields
            .iter()
            .enumerate()
            .filter(move |(_, f)| f.side == side)
            .map(|(i, _)| i)
    }

    /// Width of the concatenated input for one tower.
    pub fn side_dim(&self, side: Side) -> usize {
        self.side_fields(side).count() * self.embedding_dim
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    /// Hex SHA-256 over the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self, r: &InteractionRecord) -> Result<()> {
        if r.label > 1 {
            return Err(Error::Validation(format!("label {} is not binary", r.label)));
        }
        if r.scenario >= self.scenario_cardinality {
            return Err(Error::Validation(format!(
                "scenario {} out of range (|S| = {})",
                r.scenario, self.scenario_cardinality
            )));
        }
        if r.values.len() != self.fields.len() {
            return Err(Error::Validation(format!(
                "record has {} feature values, schema declares {}",
                r.values.len(),
                self.fields.len()
            )));
        }
        for (f, v) in self.fields.iter().zip(&r.values) {
            check_value(f, v)?;
        }
        Ok(())
    }
}

fn check_value(f: &FieldSpec, v: &FieldValue) -> Result<()> {
    let card = f.cardinality.unwrap_or(0);
    match (f.kind, v) {
        (FeatureKind::Sparse, FieldValue::Sparse(i)) if *i < card => Ok(()),
        (FeatureKind::Sparse, FieldValue::Sparse(i)) => Err(Error::Lookup(format!(
            "field `{}`: index {i} out of range for cardinality {card}",
            f.name
        ))),
        (FeatureKind::Dense, FieldValue::Dense(x)) if x.is_finite() => Ok(()),
        (FeatureKind::Dense, FieldValue::Dense(x)) => Err(Error::Validation(format!(
            "field `{}`: non-finite dense value {x}",
            f.name
        ))),
        (FeatureKind::Sequential, FieldValue::Sequential(items)) => match items.iter().find(|&&i| i >= card) {
            None => Ok(()),
            Some(i) => Err(Error::Lookup(format!(
                "field `{}`: element {i} out of range for cardinality {card}",
                f.name
            ))),
        },
        _ => Err(Error::Validation(format!(
            "field `{}` expects a {:?} value, got {v:?}",
            f.name, f.kind
        ))),
    }
}

/// Trainable embedding matrices for every schema field plus the scenario
/// table.
#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    pub fields: Vec<ParamId>,
    pub scenario: ParamId,
    pub dim: usize,
}

impl EmbeddingTables {
    /// Registers tables in `store` under `prefix`, initialized uniformly in
    /// `±1/√d`.
    pub fn new(schema: &FeatureSchema, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Self {
        let d = schema.embedding_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let fields = schema
            .fields
            .iter()
            .map(|f| {
                let rows = match f.kind {
                    FeatureKind::Dense => 1,
                    _ => f.cardinality.unwrap_or(1),
                };
                store.uniform(format!("{prefix}.emb.{}", f.name), &[rows, d], bound, rng)
            })
            .collect();
        let scenario = store.uniform(
            format!("{prefix}.emb.scenario"),
            &[schema.scenario_cardinality, d],
            bound,
            rng,
        );
        Self { fields, scenario, dim: d }
    }

    /// Scenario table owned elsewhere (the two towers share one).
    pub fn with_scenario(mut self, scenario: ParamId) -> Self {
        self.scenario = scenario;
        self
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.fields.clone();
        v.push(self.scenario);
        v
    }
}

/// Embeds field `field` of every record: `n × d`.
pub fn embed_field(
    g: &mut Graph,
    schema: &FeatureSchema,
    tables: &EmbeddingTables,
    field: usize,
    records: &[&InteractionRecord],
) -> Result<Var> {
    let spec = &schema.fields[field];
    let table = g.param(tables.fields[field]);
    for r in records {
        check_value(spec, &r.values[field])?;
    }
    match spec.kind {
        FeatureKind::Sparse => {
            let idx: Vec<usize> = records
                .iter()
                .map(|r| match r.values[field] {
                    FieldValue::Sparse(i) => i,
                    _ => unreachable!("checked above"),
                })
                .collect();
            g.gather_rows(table, Rc::from(idx))
        }
        FeatureKind::Dense => {
            let vals: Vec<f64> = records
                .iter()
                .map(|r| match r.values[field] {
                    FieldValue::Dense(x) => x,
                    _ => unreachable!("checked above"),
                })
                .collect();
            let n = vals.len();
            let col = g.constant(Tensor::matrix(n, 1, vals)?);
            g.matmul(col, table)
        }
        FeatureKind::Sequential => {
            let segs: Vec<Vec<usize>> = records
                .iter()
                .map(|r| match &r.values[field] {
                    FieldValue::Sequential(v) => v.clone(),
                    _ => unreachable!("checked above"),
                })
                .collect();
            g.segment_mean(table, Rc::from(segs))
        }
    }
}

/// Rows of the scenario table for each scenario id: `n × d`.
pub fn embed_scenario(g: &mut Graph, tables: &EmbeddingTables, scenarios: &[usize]) -> Result<Var> {
    let table = g.param(tables.scenario);
    g.gather_rows(table, Rc::from(scenarios.to_vec()))
}

/// Concatenates the embeddings of one side's fields in schema order.
pub fn assemble_input(
    g: &mut Graph,
    schema: &FeatureSchema,
    tables: &EmbeddingTables,
    records: &[&InteractionRecord],
    side: Side,
) -> Result<Var> {
    let parts = schema
        .side_fields(side)
        .map(|f| embed_field(g, schema, tables, f, records))
        .collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    g.concat_cols(&parts)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn schema() -> FeatureSchema {
        FeatureSchema::new(
            vec![
                FieldSpec {
                    name: "user".into(),
                    side: Side::User,
                    kind: FeatureKind::Sparse,
                    cardinality: Some(5),
                },
                FieldSpec {
                    name: "activity".into(),
                    side: Side::User,
                    kind: FeatureKind::Dense,
                    cardinality: None,
                },
                FieldSpec {
                    name: "history".into(),
                    side: Side::User,
                    kind: FeatureKind::Sequential,
                    cardinality: Some(7),
                },
                FieldSpec {
                    name: "item".into(),
                    side: Side::Item,
                    kind: FeatureKind::Sparse,
                    cardinality: Some(7),
                },
            ],
            3,
            16,
        )
        .unwrap()
    }

    fn record(user: usize, activity: f64, history: Vec<usize>, scenario: usize) -> InteractionRecord {
        InteractionRecord {
            user_id: user,
            item_id: 2,
            scenario,
            label: 1,
            values: vec![
                FieldValue::Sparse(user),
                FieldValue::Dense(activity),
                FieldValue::Sequential(history),
                FieldValue::Sparse(2),
            ],
        }
    }

    fn setup() -> (FeatureSchema, ParamStore, EmbeddingTables) {
        let s = schema();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = EmbeddingTables::new(&s, &mut store, "t", &mut rng);
        (s, store, t)
    }

    #[test]
    fn embed_field_cases() {
        let (s, store, t) = setup();
        let mut g = Graph::new(&store);
        let r0 = record(0, 0.0, vec![3, 3], 0);
        let r1 = record(1, 2.0, vec![3], 0);
        let sparse = embed_field(&mut g, &s, &t, 0, &[&r0]).unwrap();
        assert_eq!(g.value(sparse).data(), store.value(t.fields[0]).row(0));
        let dense = embed_field(&mut g, &s, &t, 1, &[&r0]).unwrap();
        assert!(g.value(dense).data().iter().all(|&v| v == 0.0));
        let seq = embed_field(&mut g, &s, &t, 2, &[&r0, &r1]).unwrap();
        assert_eq!(g.value(seq).row(0), g.value(seq).row(1));
    }

    #[test]
    fn invalid_values_rejected() {
        let (s, store, t) = setup();
        let mut g = Graph::new(&store);
        let bad = record(9, 0.0, vec![], 0);
        assert!(matches!(embed_field(&mut g, &s, &t, 0, &[&bad]), Err(Error::Lookup(_))));
        let nan = record(0, f64::NAN, vec![], 0);
        assert!(matches!(embed_field(&mut g, &s, &t, 1, &[&nan]), Err(Error::Validation(_))));
        assert!(s.validate(&record(0, 1.0, vec![1], 3)).is_err());
    }

    #[test]
    fn scenario_rows_and_sparse_gradient() {
        let (_s, store, t) = setup();
        let mut g = Graph::new(&store);
        let e = embed_scenario(&mut g, &t, &[0]).unwrap();
        assert_eq!(g.value(e).data(), store.value(t.scenario).row(0));
        let e2 = embed_scenario(&mut g, &t, &[0, 2]).unwrap();
        assert_ne!(g.value(e2).row(0), g.value(e2).row(1));
        assert!(embed_scenario(&mut g, &t, &[3]).is_err());

        let l = g.sum(e2);
        let grads = g.backward(l).unwrap();
        let gs = grads.param(t.scenario).unwrap();
        assert!(gs.row(1).iter().all(|&v| v == 0.0));
        assert!(gs.row(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn assemble_concatenates_in_schema_order() {
        let (s, store, t) = setup();
        let mut g = Graph::new(&store);
        let r = record(3, 0.5, vec![], 1);
        let x = assemble_input(&mut g, &s, &t, &[&r], Side::User).unwrap();
        assert_eq!(g.shape(x), &[1, 48]);
        let row = g.value(x).row(0);
        assert_eq!(&row[..16], store.value(t.fields[0]).row(3));
        let proj = store.value(t.fields[1]).row(0);
        for (a, b) in row[16..32].iter().zip(proj) {
            assert_eq!(*a, 0.5 * b);
        }
        // empty history contributes zeros
        assert!(row[32..].iter().all(|&v| v == 0.0));
        let item = assemble_input(&mut g, &s, &t, &[&r], Side::Item).unwrap();
        assert_eq!(g.value(item).data(), store.value(t.fields[3]).row(2));
        assert_eq!(s.side_dim(Side::User), 48);
    }

    #[test]
    fn pooling_is_permutation_invariant() {
        let (s, store, t) = setup();
        let mut g = Graph::new(&store);
        let a = record(0, 0.0, vec![1, 4, 6, 2], 0);
        let b = record(0, 0.0, vec![6, 2, 4, 1], 0);
        let e = embed_field(&mut g, &s, &t, 2, &[&a, &b]).unwrap();
        for (x, y) in g.value(e).row(0).iter().zip(g.value(e).row(1)) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn schema_rules() {
        let mut s = schema();
        s.fields[0].name = "label".into();
        assert!(s.check().is_err());
        let mut s = schema();
        s.fields[1].name = "user".into();
        assert!(s.check().is_err());
        let mut s = schema();
        s.fields[0].cardinality = Some(0);
        assert!(s.check().is_err());
        assert_eq!(schema().fingerprint(), schema().fingerprint());
        assert_eq!(schema().fingerprint().len(), 64);
    }
}
