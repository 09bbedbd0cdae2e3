//! Scenario-adaptive projection.
//!
//! A shared affine map plus a rank-`R` correction whose per-rank
//! coefficients `b_s` are generated from the scenario embedding:
//!
//! ```text
//! b_s = gen_W · e_s + gen_b                       (R)
//! ΔW  = Σ_r b_s[r] · A[:, r] ⊗ B[r, :]            (d_in × d_out)
//! y   = W_shared · x + bias + ΔWᵀ · x
//!     = W_shared · x + bias + Bᵀ · (b_s ⊙ (Aᵀ · x))
//! ```
//!
//! The forward pass uses the factored right-hand form and never builds ΔW.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct SapLayer {
    pub w_shared: ParamId,
    pub bias: ParamId,
    pub a: ParamId,
    pub b: ParamId,
    pub gen_w: ParamId,
    pub gen_b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub d_emb: usize,
    /// When false the correction is switched off and its factors are frozen.
    pub adaptive: bool,
}

/// Closed-form trainable parameter count of one adaptive layer.
pub fn parameter_count(d_in: usize, d_out: usize, rank: usize, d_emb: usize) -> usize {
    d_out * d_in + d_out + rank * (d_in + d_out) + rank * d_emb + rank
}

/// Scalars owned by the low-rank correction alone.
pub fn adapter_parameter_count(d_in: usize, d_out: usize, rank: usize, d_emb: usize) -> usize {
    rank * (d_in + d_out) + rank * d_emb + rank
}

impl SapLayer {
    /// Registers a layer in `store`. `B` starts at zero so the correction
    /// vanishes until training moves it.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        d_emb: usize,
        adaptive: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if d_in == 0 || d_out == 0 || d_emb == 0 || rank == 0 {
            return Err(Error::Dimension(format!(
                "SAP extents must be positive: d_in={d_in} d_out={d_out} R={rank} d_emb={d_emb}"
            )));
        }
        if rank > d_in.min(d_out) {
            return Err(Error::Dimension(format!(
                "SAP rank {rank} exceeds min(d_in, d_out) = {}",
                d_in.min(d_out)
            )));
        }
        let fan_in = 1.0 / (d_in as f64).sqrt();
        let w_shared = store.uniform(format!("{prefix}.w_shared"), &[d_out, d_in], fan_in, rng);
        let bias = store.zeros(format!("{prefix}.bias"), &[d_out]);
        let a = store.uniform(format!("{prefix}.a"), &[d_in, rank], fan_in, rng);
        let b = store.zeros(format!("{prefix}.b"), &[rank, d_out]);
        let gen_w = store.uniform(
            format!("{prefix}.gen_w"),
            &[rank, d_emb],
            1.0 / (d_emb as f64).sqrt(),
            rng,
        );
        let gen_b = store.zeros(format!("{prefix}.gen_b"), &[rank]);
        if !adaptive {
            for id in [a, b, gen_w, gen_b] {
                store.set_requires_grad(id, false);
            }
        }
        Ok(Self {
            w_shared,
            bias,
            a,
            b,
            gen_w,
            gen_b,
            d_in,
            d_out,
            rank,
            d_emb,
            adaptive,
        })
    }

    pub fn adapter_params(&self) -> [ParamId; 4] {
        [self.a, self.b, self.gen_w, self.gen_b]
    }

    pub fn params(&self) -> [ParamId; 6] {
        [self.w_shared, self.bias, self.a, self.b, self.gen_w, self.gen_b]
    }

    pub fn trainable_count(&self) -> usize {
        if self.adaptive {
            parameter_count(self.d_in, self.d_out, self.rank, self.d_emb)
        } else {
            self.d_out * self.d_in + self.d_out
        }
    }

    /// Forward FLOPs for one input row.
    pub fn flops(&self) -> usize {
        let shared = 2 * self.d_in * self.d_out + self.d_out;
        if !self.adaptive {
            return shared;
        }
        let generator = 2 * self.d_emb * self.rank + self.rank;
        let down = 2 * self.d_in * self.rank + self.rank;
        let up = 2 * self.rank * self.d_out + self.d_out;
        shared + generator + down + up
    }

    /// `b_s` for every row of `e_s` (`n × d_emb` → `n × R`).
    pub fn scenario_bias(&self, g: &mut Graph, e_s: Var) -> Result<Var> {
        if g.value(e_s).cols() != self.d_emb {
            return Err(Error::Dimension(format!(
                "scenario embedding {:?} does not match d_emb = {}",
                g.shape(e_s),
                self.d_emb
            )));
        }
        let w = g.param(self.gen_w);
        let b = g.param(self.gen_b);
        let z = g.matmul_nt(e_s, w)?;
        g.add_bias(z, b)
    }

    /// `x`: `n × d_in`, `e_s`: `n × d_emb` (row `i` is the scenario
    /// embedding of sample `i`). Returns `n × d_out`.
    pub fn forward(&self, g: &mut Graph, x: Var, e_s: Var) -> Result<Var> {
        let (n, c) = g.value(x).rows_cols();
        if c != self.d_in {
            return Err(Error::Dimension(format!(
                "SAP input {:?} does not match d_in = {}",
                g.shape(x),
                self.d_in
            )));
        }
        if g.value(e_s).rows() != n {
            return Err(Error::Dimension(format!(
                "SAP got {n} inputs but {} scenario rows",
                g.value(e_s).rows()
            )));
        }
        let w = g.param(self.w_shared);
        let bias = g.param(self.bias);
        let y = g.matmul_nt(x, w)?;
        let y = g.add_bias(y, bias)?;
        if !self.adaptive {
            return Ok(y);
        }
        let bs = self.scenario_bias(g, e_s)?;
        let a = g.param(self.a);
        let b = g.param(self.b);
        let down = g.matmul(x, a)?;
        let gated = g.mul(down, bs)?;
        let up = g.matmul(gated, b)?;
        g.add(y, up)
    }

    /// `b_s` for a single scenario embedding, outside any graph. Zero when
    /// the layer is not adaptive.
    pub fn scenario_bias_value(&self, store: &ParamStore, e_s: &[f64]) -> Result<Vec<f64>> {
        if e_s.len() != self.d_emb {
            return Err(Error::Dimension(format!(
                "scenario embedding of length {} for d_emb = {}",
                e_s.len(),
                self.d_emb
            )));
        }
        if !self.adaptive {
            return Ok(vec![0.0; self.rank]);
        }
        let w = store.value(self.gen_w);
        let b = store.value(self.gen_b);
        Ok((0..self.rank)
            .map(|r| w.row(r).iter().zip(e_s).map(|(p, q)| p * q).sum::<f64>() + b.data()[r])
            .collect())
    }

    /// Explicit `ΔW(e_s)` as a `d_in × d_out` matrix: the sum of `R` scaled
    /// outer products. Analysis and test use only.
    pub fn materialize_delta(&self, store: &ParamStore, e_s: &[f64]) -> Result<Tensor> {
        let bs = self.scenario_bias_value(store, e_s)?;
        let a = store.value(self.a);
        let b = store.value(self.b);
        let mut out = vec![0.0; self.d_in * self.d_out];
        for (r, coef) in bs.iter().enumerate() {
            for i in 0..self.d_in {
                let ai = a.get2(i, r) * coef;
                for j in 0..self.d_out {
                    out[i * self.d_out + j] += ai * b.get2(r, j);
                }
            }
        }
        Tensor::matrix(self.d_in, self.d_out, out)
    }

    /// Single-sample forward outside a caller-managed graph.
    pub fn forward_values(&self, store: &ParamStore, x: &[f64], e_s: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let xv = g.constant(Tensor::matrix(1, x.len(), x.to_vec())?);
        let ev = g.constant(Tensor::matrix(1, e_s.len(), e_s.to_vec())?);
        let y = self.forward(&mut g, xv, ev)?;
        Ok(g.value(y).clone())
    }
}
