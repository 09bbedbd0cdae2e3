//! Exact top-K retrieval, per-scenario Recall@K, case-study analyses and
//! hyperparameter sweeps.

mod sweep;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Catalog, Dataset, EvalConfig, Table};
use crate::error::{Error, Result};
use crate::features::{InteractionRecord, Side};
use crate::model::{DsmoeModel, ModelStats};
use crate::numerics::{matmul_values, Tensor};

pub use sweep::{sweep, SweepAxis, SweepCell, SweepSpec, SWEEP_HEADER};

/// Frozen item encodings of one scenario.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    pub scenario: usize,
    pub item_ids: Vec<usize>,
    pub item_matrix: Tensor,
}

impl RetrievalIndex {
    pub fn new(scenario: usize, item_ids: Vec<usize>, item_matrix: Tensor) -> Result<Self> {
        if item_matrix.shape().len() != 2 || item_matrix.rows() != item_ids.len() {
            return Err(Error::Dimension(format!(
                "{} item ids for an item matrix of shape {:?}",
                item_ids.len(),
                item_matrix.shape()
            )));
        }
        Ok(Self {
            scenario,
            item_ids,
            item_matrix,
        })
    }

    /// Encodes every catalog item under `scenario` in infer mode.
    pub fn build(model: &DsmoeModel, catalog: &Catalog, scenario: usize) -> Result<Self> {
        if catalog.is_empty() {
            return Err(Error::Argument("cannot index an empty catalog".into()));
        }
        let records = catalog.item_records(&model.schema, scenario);
        let refs: Vec<&InteractionRecord> = records.iter().collect();
        let matrix = model.encode_batch(&refs, Side::Item)?;
        Self::new(scenario, catalog.ids().collect(), matrix)
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn scores(&self, user_vec: &[f64]) -> Result<Vec<f64>> {
        if user_vec.len() != self.item_matrix.cols() {
            return Err(Error::Dimension(format!(
                "user vector of length {} for items of width {}",
                user_vec.len(),
                self.item_matrix.cols()
            )));
        }
        let u = Tensor::matrix(user_vec.len(), 1, user_vec.to_vec())?;
        Ok(matmul_values(&self.item_matrix, &u)?.into_data())
    }
}

/// Highest-scoring first; equal scores by ascending item id.
fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// The `k` best `(score, id)` pairs in rank order.
fn top_k_of(mut scored: Vec<(f64, usize)>, k: usize) -> Vec<usize> {
    let k = k.min(scored.len());
    if k == 0 {
        return Vec::new();
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank_order);
    scored.into_iter().map(|(_, id)| id).collect()
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::Argument(format!("K = {k} is outside 1..={n}")));
    }
    Ok(())
}

/// The `k` items maximizing `⟨user_vec, item⟩`.
pub fn top_k_retrieve(index: &RetrievalIndex, user_vec: &[f64], k: usize) -> Result<Vec<usize>> {
    top_k_retrieve_excluding(index, user_vec, k, &[])
}

/// As [`top_k_retrieve`] with `exclude` (sorted ascending) removed from
/// the candidates. Returns fewer than `k` ids when too few remain.
pub fn top_k_retrieve_excluding(
    index: &RetrievalIndex,
    user_vec: &[f64],
    k: usize,
    exclude: &[usize],
) -> Result<Vec<usize>> {
    check_k(k, index.len())?;
    let scores = index.scores(user_vec)?;
    let scored = scores
        .into_iter()
        .zip(index.item_ids.iter().copied())
        .filter(|(_, id)| exclude.binary_search(id).is_err())
        .collect();
    Ok(top_k_of(scored, k))
}

/// `|retrieved ∩ relevant| / |relevant|`, or `None` for an empty relevant
/// set.
pub fn recall_at_k(retrieved: &[usize], relevant: &[usize]) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let mut rel: Vec<usize> = relevant.to_vec();
    rel.sort_unstable();
    rel.dedup();
    let mut seen: Vec<usize> = retrieved.iter().copied().filter(|id| rel.binary_search(id).is_ok()).collect();
    seen.sort_unstable();
    seen.dedup();
    Some(seen.len() as f64 / rel.len() as f64)
}

/// Matrix with `None` marking undefined entries.
pub type Grid = Vec<Vec<Option<f64>>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecall {
    pub scenario: usize,
    /// `(user, scenario)` pairs averaged over.
    pub pairs: usize,
    /// Pairs with no held-out positive.
    pub skipped: usize,
    /// Aligned with [`EvalReport::ks`]; `None` when `pairs` is 0.
    pub recall: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub averaging: String,
    pub ks: Vec<usize>,
    pub n_items: usize,
    pub exclude_train: bool,
    pub scenarios: Vec<ScenarioRecall>,
    pub activation_profile: Grid,
    pub bs_similarity: Grid,
    pub stats: ModelStats,
}

impl EvalReport {
    pub fn recall(&self, scenario: usize, k: usize) -> Option<f64> {
        let j = self.ks.iter().position(|&x| x == k)?;
        self.scenarios.get(scenario)?.recall[j]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn recall_table(&self) -> Table {
        let mut header = vec!["scenario".to_string(), "pairs".into(), "skipped".into()];
        header.extend(self.ks.iter().map(|k| format!("recall@{k}")));
        let rows = self
            .scenarios
            .iter()
            .map(|s| {
                let mut row = vec![s.scenario.to_string(), s.pairs.to_string(), s.skipped.to_string()];
                row.extend(s.recall.iter().map(|r| cell(*r)));
                row
            })
            .collect();
        Table { header, rows }
    }

    /// Writes `report.json`, `recall.csv`, `activation.csv` and
    /// `similarity.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        self.recall_table().write(&dir.join("recall.csv"))?;
        grid_table(&self.activation_profile, "expert").write(&dir.join("activation.csv"))?;
        grid_table(&self.bs_similarity, "scenario").write(&dir.join("similarity.csv"))
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// `scenario` rows against `{col_prefix}_{j}` columns; undefined entries
/// are written as `NA`.
pub fn grid_table(grid: &Grid, col_prefix: &str) -> Table {
    let width = grid.first().map_or(0, Vec::len);
    let mut header = vec!["scenario".to_string()];
    header.extend((0..width).map(|j| format!("{col_prefix}_{j}")));
    let rows = grid
        .iter()
        .enumerate()
        .map(|(i, row)| std::iter::once(i.to_string()).chain(row.iter().map(|v| cell(*v))).collect())
        .collect();
    Table { header, rows }
}

/// One representative record per `(user, scenario)` pair of `data`.
fn pair_records(data: &Dataset) -> BTreeMap<(usize, usize), &InteractionRecord> {
    let mut out = BTreeMap::new();
    for r in &data.records {
        out.entry((r.user_id, r.scenario)).or_insert(r);
    }
    out
}

/// Per-scenario Recall@K over the test pairs, plus the analyses.
pub fn evaluate(model: &DsmoeModel, train: &Dataset, test: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.check()?;
    let catalog = &test.catalog;
    for &k in &cfg.ks {
        check_k(k, catalog.len())?;
    }
    let k_max = *cfg.ks.iter().max().expect("checked non-empty");
    let relevant = test.positives_by_pair();
    let seen = if cfg.exclude_train {
        train.positives_by_pair()
    } else {
        BTreeMap::new()
    };
    let reps = pair_records(test);
    let n_s = model.schema.scenario_cardinality;

    let mut scenarios = Vec::with_capacity(n_s);
    for s in 0..n_s {
        let pairs: Vec<(&(usize, usize), &&InteractionRecord)> = reps.iter().filter(|((_, d), _)| *d == s).collect();
        let mut sums = vec![0.0; cfg.ks.len()];
        let mut counted = 0;
        let mut skipped = 0;
        if !pairs.is_empty() {
            let index = RetrievalIndex::build(model, catalog, s)?;
            let users: Vec<&InteractionRecord> = pairs.iter().map(|(_, r)| **r).collect();
            let user_mat = model.encode_batch(&users, Side::User)?;
            for (row, (key, _)) in pairs.iter().enumerate() {
                let Some(rel) = relevant.get(key) else {
                    skipped += 1;
                    continue;
                };
                let exclude: &[usize] = seen.get(key).map_or(&[], Vec::as_slice);
                let top = top_k_retrieve_excluding(&index, user_mat.row(row), k_max, exclude)?;
                for (j, &k) in cfg.ks.iter().enumerate() {
                    sums[j] += recall_at_k(&top[..k.min(top.len())], rel).expect("non-empty relevant set");
                }
                counted += 1;
            }
        }
        if skipped > 0 {
            log::info!("scenario {s}: {skipped} pair(s) without held-out positives skipped");
        }
        scenarios.push(ScenarioRecall {
            scenario: s,
            pairs: counted,
            skipped,
            recall: sums
                .iter()
                .map(|&x| (counted > 0).then(|| x / counted as f64))
                .collect(),
        });
    }

    Ok(EvalReport {
        averaging: "mean over (user, scenario) pairs with at least one held-out positive".into(),
        ks: cfg.ks.clone(),
        n_items: catalog.len(),
        exclude_train: cfg.exclude_train,
        scenarios,
        activation_profile: expert_activation_profile(model, test)?,
        bs_similarity: bs_similarity(model)?,
        stats: model.stats(),
    })
}

/// Concatenated `b_s` of every user-tower SAP layer, one row per scenario.
pub fn bs_profiles(model: &DsmoeModel) -> Result<Vec<Vec<f64>>> {
    (0..model.schema.scenario_cardinality)
        .map(|d| {
            let e = model.scenario_embedding(d)?;
            let mut profile = Vec::new();
            for layer in model.user_tower.sap_layers() {
                profile.extend(layer.scenario_bias_value(&model.store, &e)?);
            }
            Ok(profile)
        })
        .collect()
}

/// Cosine similarity of scenario `b_s` profiles. Rows and columns of
/// zero-norm profiles are `None`.
pub fn bs_similarity(model: &DsmoeModel) -> Result<Grid> {
    Ok(cosine_grid(&bs_profiles(model)?))
}

pub fn cosine_grid(profiles: &[Vec<f64>]) -> Grid {
    let n = profiles.len();
    let norms: Vec<f64> = profiles.iter().map(|p| p.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut out = vec![vec![None; n]; n];
    for i in 0..n {
        if norms[i] == 0.0 || !norms[i].is_finite() {
            continue;
        }
        out[i][i] = Some(1.0);
        for j in i + 1..n {
            if norms[j] == 0.0 || !norms[j].is_finite() {
                continue;
            }
            let dot: f64 = profiles[i].iter().zip(&profiles[j]).map(|(a, b)| a * b).sum();
            let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            out[i][j] = Some(c);
            out[j][i] = Some(c);
        }
    }
    out
}

/// Mean user-tower gate weights per scenario over the records of `data`;
/// scenarios without records get a row of `None`.
pub fn expert_activation_profile(model: &DsmoeModel, data: &Dataset) -> Result<Grid> {
    let n_s = model.schema.scenario_cardinality;
    let k = model.user_tower.gate.experts;
    let counts = data.scenario_counts();
    let mut out = Vec::with_capacity(n_s);
    for d in 0..n_s {
        if counts.get(d).copied().unwrap_or(0) == 0 {
            out.push(vec![None; k]);
            continue;
        }
        // the gate reads only e_s, so every record of scenario d shares α
        // and the mean over its records is α itself
        let alpha = model
            .user_tower
            .gate
            .weights_value(&model.store, &model.scenario_embedding(d)?)?;
        out.push(alpha.into_iter().map(Some).collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
