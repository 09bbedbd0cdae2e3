//! SAP experts with per-scenario batch normalization, scenario-gated
//! mixture, and the forward SAP head.
//!
//! ```text
//! Expert_k(x | e_s, d) = DSBN_k(PReLU(SAP_k(x | e_s)), d)
//! α       = softmax(W_gate · e_s + b_gate)
//! z_mix   = Σ_k α_k · Expert_k(x | e_s, d)
//! z_out   = SAP_forward(z_mix | e_s)
//! ```
//!
//! Every row carries its own scenario, so a batch may span scenarios.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, GroupStats, ParamId, ParamStore, Tensor, Var};
use crate::sap::SapLayer;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Pending running-statistic write for one normalization group.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub row: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-forward bookkeeping: normalization mode and the side effects a
/// train-mode pass wants to commit once the step is taken.
#[derive(Clone, Debug)]
pub struct Pass {
    pub mode: Mode,
    pub updates: Vec<StatUpdate>,
    /// Train-mode groups of one row that fell back to running statistics.
    pub singleton_fallbacks: usize,
}

impl Pass {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            updates: Vec::new(),
            singleton_fallbacks: 0,
        }
    }

    pub fn train() -> Self {
        Self::new(Mode::Train)
    }

    pub fn infer() -> Self {
        Self::new(Mode::Infer)
    }

    /// Writes the blended running statistics into `store`.
    pub fn commit(&self, store: &mut ParamStore) {
        for u in &self.updates {
            let c = u.mean.len();
            store.value_mut(u.running_mean).data_mut()[u.row * c..(u.row + 1) * c].copy_from_slice(&u.mean);
            store.value_mut(u.running_var).data_mut()[u.row * c..(u.row + 1) * c].copy_from_slice(&u.var);
        }
    }
}

/// Batch normalization with one statistic/affine set per scenario, or a
/// single shared set when `shared` is true.
#[derive(Clone, Debug)]
pub struct Dsbn {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub groups: usize,
    pub dim: usize,
    pub shared: bool,
    pub momentum: f64,
    pub eps: f64,
}

impl Dsbn {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, n_scenarios: usize, shared: bool) -> Self {
        let groups = if shared { 1 } else { n_scenarios };
        let gamma = store.constant(format!("{prefix}.gamma"), &[groups, dim], 1.0);
        let beta = store.zeros(format!("{prefix}.beta"), &[groups, dim]);
        let running_mean = store.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[groups, dim]), false);
        let running_var = store.insert(format!("{prefix}.running_var"), Tensor::full(&[groups, dim], 1.0), false);
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
            groups,
            dim,
            shared,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    fn group_of(&self, scenario: usize) -> usize {
        if self.shared {
            0
        } else {
            scenario
        }
    }

    pub fn trainable_count(&self) -> usize {
        2 * self.groups * self.dim
    }

    pub fn flops(&self) -> usize {
        4 * self.dim
    }

    pub fn forward(&self, g: &mut Graph, pass: &mut Pass, x: Var, scenarios: &[usize]) -> Result<Var> {
        let (n, d) = g.value(x).rows_cols();
        if d != self.dim || scenarios.len() != n {
            return Err(Error::Dimension(format!(
                "normalization of {:?} with {} scenario ids (width {})",
                g.shape(x),
                scenarios.len(),
                self.dim
            )));
        }
        let mut partition: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &s) in scenarios.iter().enumerate() {
            let grp = self.group_of(s);
            if grp >= self.groups {
                return Err(Error::Lookup(format!("scenario {s} has no normalization statistics")));
            }
            partition.entry(grp).or_default().push(i);
        }

        let store = g.store();
        let rm = store.value(self.running_mean);
        let rv = store.value(self.running_var);
        let xv = g.value(x);
        let mut plan = Vec::with_capacity(partition.len());
        for (grp, rows) in partition {
            let run_mean = rm.row(grp).to_vec();
            let run_var = rv.row(grp);
            if pass.mode == Mode::Train && rows.len() >= 2 {
                let m = rows.len() as f64;
                let mut mean = vec![0.0; d];
                for &i in &rows {
                    for (acc, v) in mean.iter_mut().zip(xv.row(i)) {
                        *acc += v;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                let mut var = vec![0.0; d];
                for &i in &rows {
                    for ((acc, v), mu) in var.iter_mut().zip(xv.row(i)).zip(&mean) {
                        *acc += (v - mu) * (v - mu);
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                let k = self.momentum;
                pass.updates.push(StatUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    row: grp,
                    mean: run_mean.iter().zip(&mean).map(|(r, b)| (1.0 - k) * r + k * b).collect(),
                    var: run_var
                        .iter()
                        .zip(&var)
                        .map(|(r, b)| (1.0 - k) * r + k * b * m / (m - 1.0))
                        .collect(),
                });
                plan.push(GroupStats {
                    rows,
                    inv_std: var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect(),
                    mean,
                    from_batch: true,
                });
            } else {
                if pass.mode == Mode::Train {
                    pass.singleton_fallbacks += 1;
                    log::debug!("normalization group {grp} has a single row; using running statistics");
                }
                plan.push(GroupStats {
                    rows,
                    mean: run_mean,
                    inv_std: run_var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect(),
                    from_batch: false,
                });
            }
        }

        let xhat = g.normalize_groups(x, plan)?;
        let idx: Rc<[usize]> = scenarios.iter().map(|&s| self.group_of(s)).collect();
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let gr = g.gather_rows(gamma, idx.clone())?;
        let br = g.gather_rows(beta, idx)?;
        let scaled = g.mul(xhat, gr)?;
        g.add(scaled, br)
    }
}

#[derive(Clone, Debug)]
pub struct Expert {
    pub sap: SapLayer,
    pub slope: ParamId,
    pub norm: Dsbn,
}

impl Expert {
    pub fn forward(&self, g: &mut Graph, pass: &mut Pass, x: Var, e_s: Var, scenarios: &[usize]) -> Result<Var> {
        let h = self.sap.forward(g, x, e_s)?;
        let a = g.param(self.slope);
        let h = g.prelu(h, a)?;
        self.norm.forward(g, pass, h, scenarios)
    }

    pub fn trainable_count(&self) -> usize {
        self.sap.trainable_count() + 1 + self.norm.trainable_count()
    }

    pub fn flops(&self) -> usize {
        self.sap.flops() + self.sap.d_out + self.norm.flops()
    }
}

#[derive(Clone, Debug)]
pub struct GateNetwork {
    pub w: ParamId,
    pub b: ParamId,
    pub experts: usize,
    pub d_emb: usize,
}

impl GateNetwork {
    pub fn new(store: &mut ParamStore, prefix: &str, experts: usize, d_emb: usize, rng: &mut impl Rng) -> Self {
        let w = store.uniform(format!("{prefix}.w"), &[experts, d_emb], 1.0 / (d_emb as f64).sqrt(), rng);
        let b = store.zeros(format!("{prefix}.b"), &[experts]);
        Self { w, b, experts, d_emb }
    }

    /// Softmax gate weights per row of `e_s`: `n × K`.
    pub fn weights(&self, g: &mut Graph, e_s: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let logits = g.matmul_nt(e_s, w)?;
        let logits = g.add_bias(logits, b)?;
        g.softmax_rows(logits)
    }

    /// Gate weights for one scenario embedding, outside any graph.
    pub fn weights_value(&self, store: &ParamStore, e_s: &[f64]) -> Result<Vec<f64>> {
        if e_s.len() != self.d_emb {
            return Err(Error::Dimension(format!(
                "gate expects d_emb = {}, got {}",
                self.d_emb,
                e_s.len()
            )));
        }
        let mut g = Graph::new(store);
        let ev = g.constant(Tensor::matrix(1, e_s.len(), e_s.to_vec())?);
        let a = self.weights(&mut g, ev)?;
        Ok(g.value(a).data().to_vec())
    }

    pub fn trainable_count(&self) -> usize {
        self.experts * self.d_emb + self.experts
    }

    pub fn flops(&self) -> usize {
        2 * self.experts * self.d_emb + self.experts + 3 * self.experts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub experts: usize,
    pub rank: usize,
    pub d_emb: usize,
    pub n_scenarios: usize,
    pub use_sap: bool,
    pub use_dsbn: bool,
}

#[derive(Clone, Debug)]
pub struct MoeBlock {
    pub experts: Vec<Expert>,
    pub gate: GateNetwork,
    pub head: SapLayer,
    pub config: MoeConfig,
}

impl MoeBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: MoeConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.experts == 0 {
            return Err(Error::Dimension("a mixture needs at least one expert".into()));
        }
        let mut experts = Vec::with_capacity(cfg.experts);
        for k in 0..cfg.experts {
            let p = format!("{prefix}.expert{k}");
            let sap = SapLayer::new(
                store,
                &format!("{p}.sap"),
                cfg.d_in,
                cfg.d_hidden,
                cfg.rank,
                cfg.d_emb,
                cfg.use_sap,
                rng,
            )?;
            let slope = store.insert(format!("{p}.prelu"), Tensor::scalar(PRELU_INIT), true);
            let norm = Dsbn::new(store, &format!("{p}.dsbn"), cfg.d_hidden, cfg.n_scenarios, !cfg.use_dsbn);
            experts.push(Expert { sap, slope, norm });
        }
        let gate = GateNetwork::new(store, &format!("{prefix}.gate"), cfg.experts, cfg.d_emb, rng);
        let head = SapLayer::new(
            store,
            &format!("{prefix}.head"),
            cfg.d_hidden,
            cfg.d_out,
            cfg.rank,
            cfg.d_emb,
            cfg.use_sap,
            rng,
        )?;
        Ok(Self {
            experts,
            gate,
            head,
            config: cfg,
        })
    }

    /// `z_mix` together with the gate weights that produced it.
    pub fn mixture(&self, g: &mut Graph, pass: &mut Pass, x: Var, e_s: Var, scenarios: &[usize]) -> Result<(Var, Var)> {
        let alpha = self.gate.weights(g, e_s)?;
        let mut acc: Option<Var> = None;
        for (k, expert) in self.experts.iter().enumerate() {
            let out = expert.forward(g, pass, x, e_s, scenarios)?;
            let ak = g.column(alpha, k)?;
            let weighted = g.scale_rows(out, ak)?;
            acc = Some(match acc {
                None => weighted,
                Some(prev) => g.add(prev, weighted)?,
            });
        }
        Ok((acc.expect("at least one expert"), alpha))
    }

    pub fn forward(&self, g: &mut Graph, pass: &mut Pass, x: Var, e_s: Var, scenarios: &[usize]) -> Result<Var> {
        let (z_mix, _) = self.mixture(g, pass, x, e_s, scenarios)?;
        self.head.forward(g, z_mix, e_s)
    }

    /// All SAP layers of the block, experts first, head last.
    pub fn sap_layers(&self) -> Vec<&SapLayer> {
        self.experts.iter().map(|e| &e.sap).chain(std::iter::once(&self.head)).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.experts.iter().map(Expert::trainable_count).sum::<usize>()
            + self.gate.trainable_count()
            + self.head.trainable_count()
    }

    /// Forward FLOPs for one row.
    pub fn flops(&self) -> usize {
        let experts: usize = self.experts.iter().map(Expert::flops).sum();
        let mix = 2 * self.config.experts * self.config.d_hidden;
        experts + self.gate.flops() + mix + self.head.flops()
    }
}

#[cfg(test)]
mod tests;
