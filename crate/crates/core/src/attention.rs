//! Alignment mechanisms: additive, location-sensitive, and forward
//! attention, plus the dual-source combination used by the self-attention
//! variant.
//!
//! Each mechanism exists in two forms: a tape form used inside the decoder
//! (gradients flow through it) and a plain form returning concrete arrays
//! for diagnostics and property tests. The plain form evaluates the same
//! tape graph, so the two cannot drift apart.

use ndarray::{Array1, Array2};

use crate::graph::{Graph, Scalar, Var};
use crate::layers::{Conv1d, HasParams, Linear, Param};
use crate::rng::RngStream;

/// Context vector and the attention weights that produced it.
#[derive(Debug, Clone)]
pub struct AttentionContext<S: Scalar> {
    pub context: Array1<S>,
    pub weights: Array1<S>,
}

/// Recurrent attention bookkeeping carried across decoder steps.
#[derive(Debug, Clone)]
pub struct AttentionState {
    pub prev_weights: Array1<f64>,
    pub cumulative_weights: Array1<f64>,
    pub prev_alpha: Array1<f64>,
}

impl AttentionState {
    /// Initial state: forward-attention alpha one-hot at position 0.
    pub fn initial(memory_len: usize) -> Self {
        let mut alpha = Array1::zeros(memory_len);
        alpha[0] = 1.0;
        AttentionState {
            prev_weights: Array1::zeros(memory_len),
            cumulative_weights: Array1::zeros(memory_len),
            prev_alpha: alpha,
        }
    }
}

// ---------------------------------------------------------------------------
// Additive attention
// ---------------------------------------------------------------------------

/// Additive (Bahdanau) attention: `e_i = v^T tanh(W q + V m_i + b)`.
#[derive(Debug, Clone)]
pub struct AdditiveAttention<S: Scalar> {
    pub wq: Param<S>, // [query_dim x att_dim]
    pub vm: Param<S>, // [mem_dim x att_dim]
    pub b: Param<S>,  // [1 x att_dim]
    pub v: Param<S>,  // [att_dim x 1]
}

impl<S: Scalar> AdditiveAttention<S> {
    pub fn new(rng: &mut RngStream, query_dim: usize, mem_dim: usize, att_dim: usize) -> Self {
        let init = |rng: &mut RngStream, r: usize, c: usize| {
            let std = 1.0 / (r as f64).sqrt();
            Array2::from_shape_fn((r, c), |_| S::of(rng.normal() * std))
        };
        // the energy readout starts small so initial weights are near
        // uniform; with strong early energies the forward recursion tends to
        // park all mass on one position before alignment can be learned
        AdditiveAttention {
            wq: Param::new(init(rng, query_dim, att_dim), true),
            vm: Param::new(init(rng, mem_dim, att_dim), true),
            b: Param::new(Array2::zeros((1, att_dim)), false),
            v: Param::new(init(rng, att_dim, 1).mapv_into(|x| x * S::of(0.1)), true),
        }
    }

    /// Raw energies `[1 x L]` before softmax.
    pub fn energies(&self, g: &Graph<S>, query: Var, memory: Var) -> Var {
        let wq = g.leaf_rc(self.wq.value.clone());
        let vm = g.leaf_rc(self.vm.value.clone());
        let b = g.leaf_rc(self.b.value.clone());
        let v = g.leaf_rc(self.v.value.clone());
        let qproj = g.add_bias(g.matmul(query, wq), b); // [1 x att]
        let mproj = g.matmul(memory, vm); // [L x att]
        let act = g.tanh(g.add_bias(mproj, qproj));
        g.transpose(g.matmul(act, v)) // [1 x L]
    }

    /// Tape form: returns `(weights [1 x L], context [1 x mem_dim])`.
    pub fn forward(&self, g: &Graph<S>, query: Var, memory: Var) -> (Var, Var) {
        let weights = g.softmax_rows(self.energies(g, query, memory));
        let context = g.matmul(weights, memory);
        (weights, context)
    }

    /// Plain form for diagnostics and tests.
    pub fn attend(&self, query: &Array1<S>, memory: &Array2<S>) -> AttentionContext<S> {
        let g: Graph<S> = Graph::new();
        let q = g.constant(query.clone().insert_axis(ndarray::Axis(0)));
        let m = g.constant(memory.clone());
        let (w, c) = self.forward(&g, q, m);
        AttentionContext {
            context: g.value(c).row(0).to_owned(),
            weights: g.value(w).row(0).to_owned(),
        }
    }
}

impl<S: Scalar> HasParams<S> for AdditiveAttention<S> {
    fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<S>)>) {
        out.push((format!("{prefix}.wq"), &mut self.wq));
        out.push((format!("{prefix}.vm"), &mut self.vm));
        out.push((format!("{prefix}.b"), &mut self.b));
        out.push((format!("{prefix}.v"), &mut self.v));
    }
}

// ---------------------------------------------------------------------------
// Location-sensitive attention
// ---------------------------------------------------------------------------

/// Additive attention augmented with features convolved from the cumulative
/// attention weights (32 filters, kernel width 31).
#[derive(Debug, Clone)]
pub struct LocationSensitiveAttention<S: Scalar> {
    pub base: AdditiveAttention<S>,
    pub loc_conv: Conv1d<S>,  // kernel 31, 1 -> n_filters
    pub loc_proj: Linear<S>,  // [n_filters x att_dim]
}

pub const LOCATION_FILTERS: usize = 32;
pub const LOCATION_KERNEL: usize = 31;

impl<S: Scalar> LocationSensitiveAttention<S> {
    pub fn new(rng: &mut RngStream, query_dim: usize, mem_dim: usize, att_dim: usize) -> Self {
        LocationSensitiveAttention {
            base: AdditiveAttention::new(rng, query_dim, mem_dim, att_dim),
            loc_conv: Conv1d::new(rng, LOCATION_KERNEL, 1, LOCATION_FILTERS),
            loc_proj: Linear::new(rng, LOCATION_FILTERS, att_dim),
        }
    }

    /// Tape form. `cumulative` is a `[1 x L]` row of summed past weights.
    pub fn forward(
        &self,
        g: &Graph<S>,
        query: Var,
        memory: Var,
        cumulative: Var,
    ) -> (Var, Var) {
        let wq = g.leaf_rc(self.base.wq.value.clone());
        let vm = g.leaf_rc(self.base.vm.value.clone());
        let b = g.leaf_rc(self.base.b.value.clone());
        let v = g.leaf_rc(self.base.v.value.clone());
        let qproj = g.add_bias(g.matmul(query, wq), b);
        let mproj = g.matmul(memory, vm);
        let feats = self.loc_conv.forward(g, g.transpose(cumulative)); // [L x filters]
        let fproj = self.loc_proj.forward(g, feats); // [L x att]
        let act = g.tanh(g.add_bias(g.add(mproj, fproj), qproj));
        let weights = g.softmax_rows(g.transpose(g.matmul(act, v)));
        let context = g.matmul(weights, memory);
        (weights, context)
    }

    pub fn attend(
        &self,
        query: &Array1<S>,
        memory: &Array2<S>,
        cumulative: &Array1<S>,
    ) -> AttentionContext<S> {
        let g: Graph<S> = Graph::new();
        let q = g.constant(query.clone().insert_axis(ndarray::Axis(0)));
        let m = g.constant(memory.clone());
        let cum = g.constant(cumulative.clone().insert_axis(ndarray::Axis(0)));
        let (w, c) = self.forward(&g, q, m, cum);
        AttentionContext {
            context: g.value(c).row(0).to_owned(),
            weights: g.value(w).row(0).to_owned(),
        }
    }
}

impl<S: Scalar> HasParams<S> for LocationSensitiveAttention<S> {
    fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<S>)>) {
        self.base.visit(&format!("{prefix}.base"), out);
        self.loc_conv.visit(&format!("{prefix}.loc_conv"), out);
        self.loc_proj.visit(&format!("{prefix}.loc_proj"), out);
    }
}

// ---------------------------------------------------------------------------
// Forward attention (no transition agent)
// ---------------------------------------------------------------------------

/// Mass below which the recursion is considered degenerate and reset to the
/// candidate distribution.
pub const FORWARD_MASS_FLOOR: f64 = 1e-30;

/// One forward-attention recursion step:
/// `alpha'(n) = (prev(n) + prev(n-1)) * y(n)`, then normalize.
///
/// If the unnormalized mass underflows, falls back to `alpha = y` with a
/// logged warning; synthesis continues and the diagnostics pass judges the
/// result afterwards.
pub fn forward_attention_step(y: &[f64], prev_alpha: &[f64]) -> Vec<f64> {
    assert_eq!(y.len(), prev_alpha.len());
    let l = y.len();
    let mut alpha = vec![0.0; l];
    let mut total = 0.0;
    for n in 0..l {
        let prev = prev_alpha[n] + if n > 0 { prev_alpha[n - 1] } else { 0.0 };
        alpha[n] = prev * y[n];
        total += alpha[n];
    }
    if total <= FORWARD_MASS_FLOOR {
        log::warn!("forward attention mass underflow; resetting to candidate weights");
        return y.to_vec();
    }
    for a in &mut alpha {
        *a /= total;
    }
    alpha
}

/// Tape form of the recursion. The degenerate-mass fallback inspects the
/// concrete mass value while the graph is being built.
pub fn forward_attention_step_tape<S: Scalar>(g: &Graph<S>, y: Var, prev_alpha: Var) -> Var {
    let shifted = g.shift_right(prev_alpha);
    let total = g.add(prev_alpha, shifted);
    let prod = g.mul(total, y);
    let mass = g.sum_all(prod);
    if g.scalar_value(mass).to_f64() <= FORWARD_MASS_FLOOR {
        log::warn!("forward attention mass underflow; resetting to candidate weights");
        return y;
    }
    g.div_by_scalar(prod, mass)
}
