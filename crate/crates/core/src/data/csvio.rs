//! CSV interchange: interaction files, the item catalog, schema files and
//! generic result tables.
//!
//! Interaction files carry `user_id,item_id,scenario_id,label` followed by
//! one column per schema field. Sequential values are `|`-separated
//! integer lists; an empty cell is an empty list.

use std::fs;
use std::path::Path;

use super::{Catalog, CatalogItem, Dataset, Split, SynthData};
use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureSchema, FieldSpec, FieldValue, InteractionRecord, Side, RESERVED_COLUMNS};

pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const CATALOG_FILE: &str = "items.csv";
pub const SCHEMA_FILE: &str = "schema.json";

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::Row {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

fn format_value(v: &FieldValue) -> String {
    match v {
        FieldValue::Sparse(i) => i.to_string(),
        FieldValue::Dense(x) => x.to_string(),
        FieldValue::Sequential(items) => items.iter().map(usize::to_string).collect::<Vec<_>>().join("|"),
    }
}

fn parse_value(f: &FieldSpec, cell: &str) -> std::result::Result<FieldValue, String> {
    let cell = cell.trim();
    match f.kind {
        FeatureKind::Sparse => cell
            .parse()
            .map(FieldValue::Sparse)
            .map_err(|_| format!("field `{}`: `{cell}` is not a category index", f.name)),
        FeatureKind::Dense => cell
            .parse()
            .map(FieldValue::Dense)
            .map_err(|_| format!("field `{}`: `{cell}` is not a number", f.name)),
        FeatureKind::Sequential if cell.is_empty() => Ok(FieldValue::Sequential(Vec::new())),
        FeatureKind::Sequential => cell
            .split('|')
            .map(|t| t.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(FieldValue::Sequential)
            .map_err(|_| format!("field `{}`: `{cell}` is not a |-separated index list", f.name)),
    }
}

/// Maps each expected column to its position in `header`, rejecting
/// missing and unexpected columns.
fn column_positions(path: &Path, header: &csv::StringRecord, expected: &[&str]) -> Result<Vec<usize>> {
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if let Some(extra) = names.iter().find(|n| !expected.contains(n)) {
        return Err(Error::Row {
            path: path.to_path_buf(),
            line: 1,
            message: format!("unexpected column `{extra}`"),
        });
    }
    expected
        .iter()
        .map(|want| {
            let hits: Vec<usize> = names.iter().enumerate().filter(|(_, n)| *n == want).map(|(i, _)| i).collect();
            match hits.as_slice() {
                [i] => Ok(*i),
                [] => Err(Error::Row {
                    path: path.to_path_buf(),
                    line: 1,
                    message: format!("missing column `{want}`"),
                }),
                _ => Err(Error::Row {
                    path: path.to_path_buf(),
                    line: 1,
                    message: format!("column `{want}` appears more than once"),
                }),
            }
        })
        .collect()
}

fn write_rows(path: &Path, header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_csv(path: &Path, dataset: &Dataset) -> Result<()> {
    let header = RESERVED_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain(dataset.schema.fields.iter().map(|f| f.name.clone()))
        .collect();
    let rows = dataset.records.iter().map(|r| {
        [r.user_id.to_string(), r.item_id.to_string(), r.scenario.to_string(), r.label.to_string()]
            .into_iter()
            .chain(r.values.iter().map(format_value))
            .collect()
    });
    write_rows(path, header, rows)
}

fn open(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

/// Reads an interaction file. The catalog is collected from the records;
/// attach the full candidate pool with [`load_catalog`] when available.
pub fn load_csv(path: &Path, schema: &FeatureSchema, split: Split) -> Result<Dataset> {
    schema.check()?;
    let mut reader = open(path)?;
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let expected: Vec<&str> = RESERVED_COLUMNS
        .iter()
        .copied()
        .chain(schema.fields.iter().map(|f| f.name.as_str()))
        .collect();
    let cols = column_positions(path, &header, &expected)?;
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let row_err = |message: String| Error::Row {
            path: path.to_path_buf(),
            line,
            message,
        };
        let id = |k: usize| -> Result<usize> {
            let cell = row[cols[k]].trim();
            cell.parse()
                .map_err(|_| row_err(format!("column `{}`: `{cell}` is not a non-negative integer", expected[k])))
        };
        let (user_id, item_id, scenario) = (id(0)?, id(1)?, id(2)?);
        let label = match row[cols[3]].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(row_err(format!("column `label`: `{other}` is not 0 or 1"))),
        };
        let values = schema
            .fields
            .iter()
            .enumerate()
            .map(|(f, spec)| parse_value(spec, &row[cols[4 + f]]).map_err(&row_err))
            .collect::<Result<Vec<_>>>()?;
        let record = InteractionRecord {
            user_id,
            item_id,
            scenario,
            label,
            values,
        };
        schema
            .validate(&record)
            .map_err(|e| Error::Validation(format!("{}:{line}: {e}", path.display())))?;
        records.push(record);
    }
    let catalog = Catalog::from_records(schema, &records)?;
    Ok(Dataset {
        schema: schema.clone(),
        split,
        records,
        catalog,
    })
}

pub fn write_catalog(path: &Path, schema: &FeatureSchema, catalog: &Catalog) -> Result<()> {
    let header = std::iter::once("item_id".to_string())
        .chain(schema.side_fields(Side::Item).map(|f| schema.fields[f].name.clone()))
        .collect();
    let rows = catalog
        .items()
        .iter()
        .map(|it| std::iter::once(it.id.to_string()).chain(it.values.iter().map(format_value)).collect());
    write_rows(path, header, rows)
}

pub fn load_catalog(path: &Path, schema: &FeatureSchema) -> Result<Catalog> {
    let mut reader = open(path)?;
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let fields: Vec<&FieldSpec> = schema.side_fields(Side::Item).map(|f| &schema.fields[f]).collect();
    let expected: Vec<&str> = std::iter::once("item_id")
        .chain(fields.iter().map(|f| f.name.as_str()))
        .collect();
    let cols = column_positions(path, &header, &expected)?;
    let mut items = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let row_err = |message: String| Error::Row {
            path: path.to_path_buf(),
            line,
            message,
        };
        let cell = row[cols[0]].trim();
        let id = cell
            .parse()
            .map_err(|_| row_err(format!("column `item_id`: `{cell}` is not a non-negative integer")))?;
        let values = fields
            .iter()
            .enumerate()
            .map(|(k, f)| parse_value(f, &row[cols[1 + k]]).map_err(&row_err))
            .collect::<Result<Vec<_>>>()?;
        items.push(CatalogItem { id, values });
    }
    let catalog = Catalog::new(items)?;
    catalog.validate(schema)?;
    Ok(catalog)
}

pub fn write_schema(path: &Path, schema: &FeatureSchema) -> Result<()> {
    let text = serde_json::to_string_pretty(schema)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_schema(path: &Path) -> Result<FeatureSchema> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let schema: FeatureSchema = serde_json::from_str(&text)?;
    schema.check()?;
    Ok(schema)
}

/// Writes `schema.json`, `train.csv`, `test.csv` and `items.csv` under `dir`.
pub fn write_dir(dir: &Path, data: &SynthData) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_schema(&dir.join(SCHEMA_FILE), &data.schema)?;
    write_csv(&dir.join(TRAIN_FILE), &data.train)?;
    write_csv(&dir.join(TEST_FILE), &data.test)?;
    write_catalog(&dir.join(CATALOG_FILE), &data.schema, &data.train.catalog)
}

/// Reads a directory laid out by [`write_dir`]. Without `items.csv` the
/// catalog is the set of items seen in either split.
pub fn load_dir(dir: &Path) -> Result<SynthData> {
    let schema = load_schema(&dir.join(SCHEMA_FILE))?;
    let mut train = load_csv(&dir.join(TRAIN_FILE), &schema, Split::Train)?;
    let mut test = load_csv(&dir.join(TEST_FILE), &schema, Split::Test)?;
    let items = dir.join(CATALOG_FILE);
    let catalog = if items.exists() {
        load_catalog(&items, &schema)?
    } else {
        let all: Vec<InteractionRecord> = train.records.iter().chain(&test.records).cloned().collect();
        Catalog::from_records(&schema, &all)?
    };
    for r in train.records.iter().chain(&test.records) {
        if catalog.position(r.item_id).is_none() {
            return Err(Error::Validation(format!("item {} is missing from the catalog", r.item_id)));
        }
    }
    train.catalog = catalog.clone();
    test.catalog = catalog;
    Ok(SynthData { schema, train, test })
}

/// A header plus string rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_rows(path, self.header.clone(), self.rows.iter().cloned())
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("UTF-8 cells")
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut reader = open(path)?;
    let header = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(String::from)
        .collect();
    let rows = reader
        .records()
        .map(|r| r.map(|r| r.iter().map(String::from).collect()).map_err(|e| csv_err(path, e)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Table { header, rows })
}
