//! Latent-factor generator for multi-scenario interaction logs.
//!
//! Users and items get latent vectors; items cluster around category
//! centroids. Each scenario owns a fixed low-rank linear shift applied to
//! user latents. A `(user, scenario)` pair with `c` interactions draws `c`
//! distinct items from the softmax over shifted inner products perturbed by
//! logistic noise, then its positives are split between train and test.

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel, Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Catalog, CatalogItem, Dataset, Split};
use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureSchema, FieldSpec, FieldValue, InteractionRecord, Side};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_scenarios: usize,
    pub scenario_proportions: Vec<f64>,
    pub latent_dim: usize,
    pub scenario_shift_strength: f64,
    /// Rank of each scenario's latent shift.
    pub shift_rank: usize,
    pub interactions_total: usize,
    /// Scale of the logistic noise added to every affinity.
    pub noise: f64,
    /// Multiplier on normalized inner products before the softmax.
    pub sharpness: f64,
    pub n_categories: usize,
    pub n_segments: usize,
    /// Spread of item latents around their category centroid.
    pub item_spread: f64,
    pub test_fraction: f64,
    /// Embedding width recorded in the emitted schema.
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_users: 400,
            n_items: 5000,
            n_scenarios: 4,
            scenario_proportions: vec![0.84, 0.09, 0.04, 0.03],
            latent_dim: 8,
            scenario_shift_strength: 1.0,
            shift_rank: 2,
            interactions_total: 50_000,
            noise: 0.5,
            sharpness: 4.0,
            n_categories: 50,
            n_segments: 8,
            item_spread: 0.5,
            test_fraction: 0.2,
            embedding_dim: 16,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn check(&self) -> Result<()> {
        let positive = [
            ("data.n_users", self.n_users),
            ("data.n_items", self.n_items),
            ("data.n_scenarios", self.n_scenarios),
            ("data.latent_dim", self.latent_dim),
            ("data.shift_rank", self.shift_rank),
            ("data.n_categories", self.n_categories),
            ("data.n_segments", self.n_segments),
            ("data.embedding_dim", self.embedding_dim),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        let p = &self.scenario_proportions;
        if p.len() != self.n_scenarios {
            return Err(Error::config(
                "data.scenario_proportions",
                format!("{} proportions for {} scenarios", p.len(), self.n_scenarios),
            ));
        }
        if p.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::config("data.scenario_proportions", "proportions must be positive"));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("data.scenario_proportions", format!("proportions sum to {sum}, not 1")));
        }
        for (k, v) in [
            ("data.scenario_shift_strength", self.scenario_shift_strength),
            ("data.noise", self.noise),
            ("data.sharpness", self.sharpness),
            ("data.item_spread", self.item_spread),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(k, "must be finite and non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config("data.test_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn schema(&self) -> FeatureSchema {
        let f = |name: &str, side, kind, cardinality| FieldSpec {
            name: name.into(),
            side,
            kind,
            cardinality,
        };
        FeatureSchema {
            fields: vec![
                f("user", Side::User, FeatureKind::Sparse, Some(self.n_users)),
                f("segment", Side::User, FeatureKind::Sparse, Some(self.n_segments)),
                f("activity", Side::User, FeatureKind::Dense, None),
                f("item", Side::Item, FeatureKind::Sparse, Some(self.n_items)),
                f("category", Side::Item, FeatureKind::Sparse, Some(self.n_categories)),
            ],
            scenario_cardinality: self.n_scenarios,
            embedding_dim: self.embedding_dim,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub schema: FeatureSchema,
    pub train: Dataset,
    pub test: Dataset,
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.check()?;
    let (n_u, n_i, n_s, l) = (spec.n_users, spec.n_items, spec.n_scenarios, spec.latent_dim);
    let capacity = n_u as u128 * n_s as u128 * n_i as u128;
    if spec.interactions_total as u128 > capacity {
        return Err(Error::Generation(format!(
            "{} distinct positives requested but only {capacity} (user, item, scenario) triples exist",
            spec.interactions_total
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let centroids = normal_matrix(&mut rng, spec.n_categories, l);
    let category: Vec<usize> = (0..n_i).map(|_| rng.random_range(0..spec.n_categories)).collect();
    let items: Vec<Vec<f64>> = (0..n_i)
        .map(|j| {
            centroids[category[j]]
                .iter()
                .map(|c| c + spec.item_spread * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let users = normal_matrix(&mut rng, n_u, l);
    let prototypes = normal_matrix(&mut rng, spec.n_segments, l);
    let segment: Vec<usize> = users
        .iter()
        .map(|u| {
            (0..spec.n_segments)
                .max_by(|&a, &b| dot(u, &prototypes[a]).total_cmp(&dot(u, &prototypes[b])))
                .unwrap()
        })
        .collect();

    // shift_s = U_s V_sᵀ / l, applied as u + strength · shift_s u
    let shifts: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = (0..n_s)
        .map(|_| {
            (
                normal_matrix(&mut rng, spec.shift_rank, l),
                normal_matrix(&mut rng, spec.shift_rank, l),
            )
        })
        .collect();
    let shifted = |u: &[f64], s: usize| -> Vec<f64> {
        let (us, vs) = &shifts[s];
        let mut out = u.to_vec();
        for (a, b) in us.iter().zip(vs) {
            let coef = spec.scenario_shift_strength * dot(b, u) / l as f64;
            for (o, ai) in out.iter_mut().zip(a) {
                *o += coef * ai;
            }
        }
        out
    };

    let scen_dist = WeightedIndex::new(&spec.scenario_proportions)
        .map_err(|e| Error::Generation(format!("scenario proportions: {e}")))?;
    let mut counts = vec![vec![0usize; n_u]; n_s];
    for _ in 0..spec.interactions_total {
        let s = scen_dist.sample(&mut rng);
        let u = rng.random_range(0..n_u);
        counts[s][u] += 1;
    }
    if let Some((s, u)) = (0..n_s)
        .flat_map(|s| (0..n_u).map(move |u| (s, u)))
        .find(|&(s, u)| counts[s][u] > n_i)
    {
        return Err(Error::Generation(format!(
            "user {u} needs {} distinct items in scenario {s} but the catalog has {n_i}",
            counts[s][u]
        )));
    }
    let per_user: Vec<usize> = (0..n_u).map(|u| (0..n_s).map(|s| counts[s][u]).sum()).collect();
    let log_act: Vec<f64> = per_user.iter().map(|&c| (1.0 + c as f64).ln()).collect();
    let mean = log_act.iter().sum::<f64>() / n_u as f64;
    let sd = (log_act.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n_u as f64).sqrt();
    let activity: Vec<f64> = log_act.iter().map(|a| if sd > 0.0 { (a - mean) / sd } else { 0.0 }).collect();

    let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    let scale = spec.sharpness / (l as f64).sqrt();
    let record = |u: usize, j: usize, s: usize| InteractionRecord {
        user_id: u,
        item_id: j,
        scenario: s,
        label: 1,
        values: vec![
            FieldValue::Sparse(u),
            FieldValue::Sparse(segment[u]),
            FieldValue::Dense(activity[u]),
            FieldValue::Sparse(j),
            FieldValue::Sparse(category[j]),
        ],
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut keys: Vec<(f64, usize)> = Vec::with_capacity(n_i);
    for s in 0..n_s {
        for u in 0..n_u {
            let c = counts[s][u];
            if c == 0 {
                continue;
            }
            let us = shifted(&users[u], s);
            keys.clear();
            for (j, v) in items.iter().enumerate() {
                let p: f64 = rng.sample(Open01);
                let logistic = (p / (1.0 - p)).ln();
                let logit = scale * dot(&us, v) + spec.noise * logistic;
                keys.push((logit + gumbel.sample(&mut rng), j));
            }
            // Gumbel top-c = softmax sampling without replacement
            keys.select_nth_unstable_by(c - 1, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut chosen: Vec<usize> = keys[..c].iter().map(|k| k.1).collect();
            chosen.sort_unstable();
            chosen.shuffle(&mut rng);
            let n_test = if c >= 2 {
                ((spec.test_fraction * c as f64).round() as usize).max(1).min(c - 1)
            } else {
                0
            };
            let n_test = if spec.test_fraction == 0.0 { 0 } else { n_test };
            for (k, &j) in chosen.iter().enumerate() {
                if k < n_test {
                    test.push(record(u, j, s));
                } else {
                    train.push(record(u, j, s));
                }
            }
        }
    }

    let schema = spec.schema();
    schema.check()?;
    let catalog = Catalog::new(
        (0..n_i)
            .map(|j| CatalogItem {
                id: j,
                values: vec![FieldValue::Sparse(j), FieldValue::Sparse(category[j])],
            })
            .collect(),
    )?;
    Ok(SynthData {
        train: Dataset {
            schema: schema.clone(),
            split: Split::Train,
            records: train,
            catalog: catalog.clone(),
        },
        test: Dataset {
            schema: schema.clone(),
            split: Split::Test,
            records: test,
            catalog,
        },
        schema,
    })
}
