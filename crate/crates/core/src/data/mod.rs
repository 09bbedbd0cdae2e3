//! Datasets, the item catalog, synthetic generation, CSV interchange and
//! experiment configuration.

mod config;
mod csvio;
mod synth;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureSchema, FieldValue, InteractionRecord, Side};

pub use config::{load_config, parse_config, EvalConfig, ExperimentConfig};
pub use csvio::{
    load_catalog, load_csv, load_dir, load_schema, read_table, write_catalog, write_csv, write_dir, write_schema, Table,
    CATALOG_FILE, SCHEMA_FILE, TEST_FILE, TRAIN_FILE,
};
pub use synth::{synth_generate, SynthData, SynthSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Item-side feature values of one catalog entry, in schema order of the
/// item fields.
#[derive(Clone, Debug, PartialEq)]
pub struct CatalogItem {
    pub id: usize,
    pub values: Vec<FieldValue>,
}

/// The candidate pool, sorted by ascending item id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Catalog {
    items: Vec<CatalogItem>,
    index: BTreeMap<usize, usize>,
}

impl Catalog {
    pub fn new(mut items: Vec<CatalogItem>) -> Result<Self> {
        items.sort_by_key(|i| i.id);
        let mut index = BTreeMap::new();
        for (pos, item) in items.iter().enumerate() {
            if index.insert(item.id, pos).is_some() {
                return Err(Error::Validation(format!("item {} listed twice in the catalog", item.id)));
            }
        }
        Ok(Self { items, index })
    }

    /// Collects the first-seen item features of every item in `records`.
    pub fn from_records(schema: &FeatureSchema, records: &[InteractionRecord]) -> Result<Self> {
        let fields: Vec<usize> = schema.side_fields(Side::Item).collect();
        let mut seen: BTreeMap<usize, CatalogItem> = BTreeMap::new();
        for r in records {
            seen.entry(r.item_id).or_insert_with(|| CatalogItem {
                id: r.item_id,
                values: fields.iter().map(|&f| r.values[f].clone()).collect(),
            });
        }
        Self::new(seen.into_values().collect())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[CatalogItem] {
        &self.items
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.items.iter().map(|i| i.id)
    }

    pub fn position(&self, id: usize) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// `record` with its item replaced by catalog entry `pos`.
    pub fn substitute(&self, schema: &FeatureSchema, record: &InteractionRecord, pos: usize) -> InteractionRecord {
        let item = &self.items[pos];
        let mut out = record.clone();
        out.item_id = item.id;
        for (f, v) in schema.side_fields(Side::Item).zip(&item.values) {
            out.values[f] = v.clone();
        }
        out
    }

    /// One record per item with placeholder user fields, for item-tower
    /// encoding under `scenario`.
    pub fn item_records(&self, schema: &FeatureSchema, scenario: usize) -> Vec<InteractionRecord> {
        let blank = placeholder_record(schema, scenario);
        (0..self.items.len()).map(|p| self.substitute(schema, &blank, p)).collect()
    }

    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        let n = schema.side_fields(Side::Item).count();
        for item in &self.items {
            if item.values.len() != n {
                return Err(Error::Validation(format!(
                    "catalog item {} has {} values, schema declares {n} item fields",
                    item.id,
                    item.values.len()
                )));
            }
            schema.validate(&self.substitute(schema, &placeholder_record(schema, 0), self.index[&item.id]))?;
        }
        Ok(())
    }
}

/// A record whose fields all hold the smallest valid value.
pub fn placeholder_record(schema: &FeatureSchema, scenario: usize) -> InteractionRecord {
    InteractionRecord {
        user_id: 0,
        item_id: 0,
        scenario,
        label: 0,
        values: schema
            .fields
            .iter()
            .map(|f| match f.kind {
                FeatureKind::Sparse => FieldValue::Sparse(0),
                FeatureKind::Dense => FieldValue::Dense(0.0),
                FeatureKind::Sequential => FieldValue::Sequential(Vec::new()),
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub split: Split,
    pub records: Vec<InteractionRecord>,
    pub catalog: Catalog,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            self.schema
                .validate(r)
                .map_err(|e| Error::Validation(format!("record {i}: {e}")))?;
        }
        self.catalog.validate(&self.schema)
    }

    pub fn positives(&self) -> impl Iterator<Item = &InteractionRecord> {
        self.records.iter().filter(|r| r.label == 1)
    }

    /// Positive item ids per `(user, scenario)` pair.
    pub fn positives_by_pair(&self) -> BTreeMap<(usize, usize), Vec<usize>> {
        let mut out: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for r in self.positives() {
            out.entry((r.user_id, r.scenario)).or_default().push(r.item_id);
        }
        for v in out.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        out
    }

    pub fn scenario_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.schema.scenario_cardinality];
        for r in &self.records {
            c[r.scenario] += 1;
        }
        c
    }
}
