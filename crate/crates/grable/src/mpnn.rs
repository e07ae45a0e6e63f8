//! Heterogeneous message passing over grables: forward evaluation, exact
//! reverse-mode gradients, full-batch training, and a compiler from graded
//! modal logic into fixed network weights.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constructors::{stable_hash, Grable, NodeRecord};
use crate::gml::{Formula, GmlError, PredicateSet};
use crate::metrics::{self, MetricsError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum MpnnError {
    #[error("grable has no row nodes")]
    NoRows,
    #[error("labels ({labels}) do not match row count ({rows})")]
    LabelMismatch { labels: usize, rows: usize },
    #[error("parameter vector has length {got}, model has {want}")]
    ParamMismatch { got: usize, want: usize },
    #[error("formula is not in the compilable fragment: {0}")]
    NotCompilable(String),
    #[error(transparent)]
    Gml(#[from] GmlError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    pub fn matvec(&self, x: &[S]) -> Vec<S> {
        debug_assert_eq!(self.cols, x.len());
        (0..self.rows)
            .map(|r| {
                let row = &self.data[r * self.cols..(r + 1) * self.cols];
                row.iter().zip(x).map(|(&w, &v)| w * v).sum()
            })
            .collect()
    }

    /// y ∈ R^rows pulled back through the matrix: returns Aᵀy.
    pub fn tmatvec(&self, y: &[S]) -> Vec<S> {
        let mut out = vec![S::zero(); self.cols];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (c, &w) in row.iter().enumerate() {
                out[c] = out[c] + w * y[r];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// max(x, 0)
    Relu,
    /// min(max(x, 0), 1); keeps Boolean values exact in compiled networks
    UnitClamp,
}

impl Activation {
    fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Relu => x.max(S::zero()),
            Activation::UnitClamp => x.max(S::zero()).min(S::one()),
        }
    }

    /// Derivative away from kinks.
    fn slope<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Relu => {
                if x > S::zero() { S::one() } else { S::zero() }
            }
            Activation::UnitClamp => {
                if x > S::zero() && x < S::one() { S::one() } else { S::zero() }
            }
        }
    }

    /// Distance of a pre-activation to the nearest kink.
    fn kink_margin<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Relu => x.abs(),
            Activation::UnitClamp => x.abs().min((x - S::one()).abs()),
        }
    }
}

/// Per-relation message function of a layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Msg<S> {
    /// msg(h) = W h
    Linear(Matrix<S>),
    /// msg(h) = clamp01(W h + b), elementwise; used by the compiler to fold
    /// a conjunction of literals into the diamond whose grade counts it
    ClampAffine { w: Matrix<S>, b: Vec<S> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer<S> {
    pub w_self: Matrix<S>,
    pub msgs: BTreeMap<String, Msg<S>>,
    pub bias: Vec<S>,
    pub activation: Activation,
}

/// How raw nodes become initial feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Encoder {
    /// One-hot over node types followed by a fixed ±1/√d signed hash of the
    /// node's local features. Row nodes get a zero hash block so models
    /// cannot memorize identifiers; `type_only` zeroes every hash block.
    Hashed {
        node_types: Vec<String>,
        hash_dim: usize,
        hash_seed: u64,
        type_only: bool,
    },
    /// Indicator vector of named predicates; what compiled networks use.
    Predicate {
        predicates: PredicateSet,
        atoms: Vec<String>,
    },
}

impl Encoder {
    pub fn dim(&self) -> usize {
        match self {
            Encoder::Hashed { node_types, hash_dim, .. } => node_types.len() + hash_dim,
            Encoder::Predicate { atoms, .. } => atoms.len(),
        }
    }

    fn encode_node<S: Scalar>(&self, node: &NodeRecord) -> Result<Vec<S>, MpnnError> {
        match self {
            Encoder::Hashed { node_types, hash_dim, hash_seed, type_only } => {
                let mut h = vec![S::zero(); node_types.len() + hash_dim];
                if let Some(i) = node_types.iter().position(|t| *t == node.node_type) {
                    h[i] = S::one();
                }
                let hash_content = !type_only && node.node_type != crate::constructors::ROW_TYPE;
                if hash_content && *hash_dim > 0 {
                    let payload = serde_json::to_vec(&(&node.node_type, &node.features))
                        .expect("features serialize");
                    let seed = stable_hash(*hash_seed, &payload);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let scale = S::of_f64(1.0 / (*hash_dim as f64).sqrt());
                    for slot in h[node_types.len()..].iter_mut() {
                        *slot = if rng.gen::<bool>() { scale } else { -scale };
                    }
                }
                Ok(h)
            }
            Encoder::Predicate { predicates, atoms } => atoms
                .iter()
                .map(|name| {
                    Ok(if predicates.holds(name, node)? { S::one() } else { S::zero() })
                })
                .collect(),
        }
    }
}

/// A heterogeneous MPNN with a linear readout over row-node embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpnnModel<S> {
    pub encoder: Encoder,
    pub layers: Vec<Layer<S>>,
    pub readout_w: Vec<S>,
    pub readout_b: S,
}

/// Architecture of a randomly initialized model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MpnnConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub hash_dim: usize,
    pub hash_seed: u64,
    /// Feed only node types to the encoder (no content hashes).
    pub type_only: bool,
    pub seed: u64,
}

impl Default for MpnnConfig {
    fn default() -> Self {
        MpnnConfig {
            n_layers: 2,
            hidden: 64,
            hash_dim: 16,
            hash_seed: 0,
            type_only: false,
            seed: 0,
        }
    }
}

/// Optimizer and schedule for full-batch training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-3, weight_decay: 1e-4, epochs: 75 }
    }
}

/// What training produces besides the fitted model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport<S> {
    pub val_auc_history: Vec<S>,
    pub threshold: S,
    pub final_val_auc: S,
    pub final_val_f1: S,
}

/// Outcome of the finite-difference gradient check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradReport<S> {
    /// Worst relative error over parameters checked away from kinks.
    pub max_rel_err: S,
    pub checked: usize,
    /// Parameters skipped because a perturbation crossed an activation kink.
    pub excluded_near_kink: usize,
}

struct Trace<S> {
    /// activations per layer; index 0 is the encoding
    h: Vec<Vec<Vec<S>>>,
    /// pre-activations per layer (1-based layers, so z[l] feeds h[l+1])
    z: Vec<Vec<Vec<S>>>,
    /// minimum distance of any nonlinearity input to a kink
    kink_margin: S,
}

impl<S: Scalar> MpnnModel<S> {
    pub fn new_random(cfg: &MpnnConfig, node_types: &[String], relations: &[String]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let encoder = Encoder::Hashed {
            node_types: node_types.to_vec(),
            hash_dim: cfg.hash_dim,
            hash_seed: cfg.hash_seed,
            type_only: cfg.type_only,
        };
        let mut dims = vec![encoder.dim()];
        dims.extend(std::iter::repeat(cfg.hidden).take(cfg.n_layers));
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let a = 1.0 / (fan_in.max(1) as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| S::of_f64(rng.gen_range(-a..a)))
                .collect();
            Matrix { rows, cols, data }
        };
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let (d_in, d_out) = (dims[l], dims[l + 1]);
                let mut msgs = BTreeMap::new();
                for rel in relations {
                    msgs.insert(rel.clone(), Msg::Linear(uniform(d_out, d_in, d_in)));
                }
                Layer {
                    w_self: uniform(d_out, d_in, d_in),
                    msgs,
                    bias: vec![S::zero(); d_out],
                    activation: Activation::Relu,
                }
            })
            .collect();
        let d_last = *dims.last().expect("at least the encoder dim");
        let a = 1.0 / (d_last as f64).sqrt();
        let readout_w = (0..d_last).map(|_| S::of_f64(rng.gen_range(-a..a))).collect();
        MpnnModel { encoder, layers, readout_w, readout_b: S::zero() }
    }

    fn run(&self, grable: &Grable) -> Result<Trace<S>, MpnnError> {
        let adjacency = grable.adjacency();
        let encoded: Vec<Vec<S>> = grable
            .nodes
            .iter()
            .map(|n| self.encoder.encode_node(n))
            .collect::<Result<_, _>>()?;
        let mut h = vec![encoded];
        let mut z = Vec::new();
        let mut kink_margin = S::infinity();
        for layer in &self.layers {
            let prev = h.last().expect("non-empty");
            let mut z_layer: Vec<Vec<S>> = prev.iter().map(|hv| layer.w_self.matvec(hv)).collect();
            for (rel, msg) in &layer.msgs {
                let Some(lists) = adjacency.get(rel) else { continue };
                match msg {
                    Msg::Linear(w) => {
                        // linear in the source embedding: sum neighbors
                        // first (ascending ids, so the order is fixed) and
                        // apply the matrix once per node
                        let d_in = w.cols;
                        for (v, neighbors) in lists.iter().enumerate() {
                            if neighbors.is_empty() {
                                continue;
                            }
                            let mut agg = vec![S::zero(); d_in];
                            for &u in neighbors {
                                for (a, x) in agg.iter_mut().zip(&prev[u]) {
                                    *a = *a + *x;
                                }
                            }
                            let m = w.matvec(&agg);
                            for (zi, mi) in z_layer[v].iter_mut().zip(m) {
                                *zi = *zi + mi;
                            }
                        }
                    }
                    Msg::ClampAffine { w, b } => {
                        for (v, neighbors) in lists.iter().enumerate() {
                            // per-edge nonlinearity: ascending neighbor ids
                            for &u in neighbors {
                                let p = w.matvec(&prev[u]);
                                for ((zi, pi), bi) in z_layer[v].iter_mut().zip(p).zip(b) {
                                    let pre = pi + *bi;
                                    kink_margin =
                                        kink_margin.min(Activation::UnitClamp.kink_margin(pre));
                                    *zi = *zi + Activation::UnitClamp.apply(pre);
                                }
                            }
                        }
                    }
                }
            }
            for zv in z_layer.iter_mut() {
                for (zi, bi) in zv.iter_mut().zip(&layer.bias) {
                    *zi = *zi + *bi;
                    kink_margin = kink_margin.min(layer.activation.kink_margin(*zi));
                }
            }
            let h_layer: Vec<Vec<S>> = z_layer
                .iter()
                .map(|zv| zv.iter().map(|&x| layer.activation.apply(x)).collect())
                .collect();
            z.push(z_layer);
            h.push(h_layer);
        }
        Ok(Trace { h, z, kink_margin })
    }

    /// Logits for every row node, in row order.
    pub fn forward(&self, grable: &Grable) -> Result<Vec<S>, MpnnError> {
        let trace = self.run(grable)?;
        Ok(self.readout_rows(grable, &trace))
    }

    fn readout_rows(&self, grable: &Grable, trace: &Trace<S>) -> Vec<S> {
        let last = trace.h.last().expect("non-empty");
        grable
            .row_map
            .iter()
            .map(|&v| {
                self.readout_w
                    .iter()
                    .zip(&last[v])
                    .map(|(&w, &x)| w * x)
                    .sum::<S>()
                    + self.readout_b
            })
            .collect()
    }

    /// Hard 0/1 predictions at a logit threshold.
    pub fn predict(&self, grable: &Grable, threshold: S) -> Result<Vec<u8>, MpnnError> {
        Ok(metrics::predictions_at(&self.forward(grable)?, threshold))
    }

    // ---- parameter flattening ----------------------------------------

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        for layer in &self.layers {
            n += layer.w_self.data.len();
            for msg in layer.msgs.values() {
                n += match msg {
                    Msg::Linear(w) => w.data.len(),
                    Msg::ClampAffine { w, b } => w.data.len() + b.len(),
                };
            }
            n += layer.bias.len();
        }
        n + self.readout_w.len() + 1
    }

    pub fn params(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in &self.layers {
            out.extend(&layer.w_self.data);
            for msg in layer.msgs.values() {
                match msg {
                    Msg::Linear(w) => out.extend(&w.data),
                    Msg::ClampAffine { w, b } => {
                        out.extend(&w.data);
                        out.extend(b);
                    }
                }
            }
            out.extend(&layer.bias);
        }
        out.extend(&self.readout_w);
        out.push(self.readout_b);
        out
    }

    pub fn set_params(&mut self, params: &[S]) -> Result<(), MpnnError> {
        if params.len() != self.n_params() {
            return Err(MpnnError::ParamMismatch { got: params.len(), want: self.n_params() });
        }
        let mut it = params.iter();
        let mut take = |slice: &mut [S]| {
            for slot in slice {
                *slot = *it.next().expect("length checked");
            }
        };
        for layer in &mut self.layers {
            take(&mut layer.w_self.data);
            for msg in layer.msgs.values_mut() {
                match msg {
                    Msg::Linear(w) => take(&mut w.data),
                    Msg::ClampAffine { w, b } => {
                        take(&mut w.data);
                        take(b);
                    }
                }
            }
            take(&mut layer.bias);
        }
        take(&mut self.readout_w);
        self.readout_b = *it.next().expect("length checked");
        Ok(())
    }

    // ---- loss and exact gradient -------------------------------------

    /// Weighted binary cross entropy with logits on the row nodes, with the
    /// per-parameter gradient in `params()` order. `pos_weight` scales the
    /// positive-class terms; the loss is the mean over rows.
    pub fn loss_and_grad(
        &self,
        grable: &Grable,
        labels: &[u8],
        pos_weight: S,
    ) -> Result<(S, Vec<S>), MpnnError> {
        if grable.row_map.is_empty() {
            return Err(MpnnError::NoRows);
        }
        if labels.len() != grable.row_map.len() {
            return Err(MpnnError::LabelMismatch {
                labels: labels.len(),
                rows: grable.row_map.len(),
            });
        }
        let trace = self.run(grable)?;
        let logits = self.readout_rows(grable, &trace);
        let n = S::of_usize(labels.len());

        // stable softplus(z) - y z, with dL/dz = w (sigmoid(z) - y) / n
        let mut loss = S::zero();
        let last = trace.h.last().expect("non-empty");
        let width = self.readout_w.len();
        let mut delta_last: Vec<Vec<S>> = vec![vec![S::zero(); width]; grable.nodes.len()];
        let mut grad_readout_w = vec![S::zero(); width];
        let mut grad_readout_b = S::zero();
        for ((&v, &label), &logit) in grable.row_map.iter().zip(labels).zip(&logits) {
            let y = S::of_usize(label as usize);
            let w = if label == 1 { pos_weight } else { S::one() };
            let softplus = logit.max(S::zero()) + (S::one() + (-logit.abs()).exp()).ln();
            loss = loss + w * (softplus - y * logit);
            let sigmoid = S::one() / (S::one() + (-logit).exp());
            let dz = w * (sigmoid - y) / n;
            for c in 0..width {
                grad_readout_w[c] = grad_readout_w[c] + dz * last[v][c];
                delta_last[v][c] = delta_last[v][c] + dz * self.readout_w[c];
            }
            grad_readout_b = grad_readout_b + dz;
        }
        loss = loss / n;

        // backprop through layers, accumulating into flattened gradient
        let adjacency = grable.adjacency();
        let mut layer_grads: Vec<Vec<S>> = Vec::with_capacity(self.layers.len());
        let mut delta = delta_last; // d loss / d h^{L}
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let h_in = &trace.h[l];
            let z = &trace.z[l];
            // through the activation
            let delta_z: Vec<Vec<S>> = delta
                .iter()
                .zip(z)
                .map(|(dv, zv)| {
                    dv.iter()
                        .zip(zv)
                        .map(|(&d, &x)| d * layer.activation.slope(x))
                        .collect()
                })
                .collect();
            let d_in = layer.w_self.cols;
            let d_out = layer.w_self.rows;
            let mut grad_w_self = Matrix::zeros(d_out, d_in);
            let mut grad_bias = vec![S::zero(); d_out];
            let mut delta_prev: Vec<Vec<S>> = vec![vec![S::zero(); d_in]; h_in.len()];
            for v in 0..h_in.len() {
                for r in 0..d_out {
                    let d = delta_z[v][r];
                    if d == S::zero() {
                        continue;
                    }
                    grad_bias[r] = grad_bias[r] + d;
                    for c in 0..d_in {
                        grad_w_self.data[r * d_in + c] =
                            grad_w_self.data[r * d_in + c] + d * h_in[v][c];
                        delta_prev[v][c] = delta_prev[v][c] + d * layer.w_self.get(r, c);
                    }
                }
            }
            let mut grad_msgs: BTreeMap<&String, (Matrix<S>, Vec<S>)> = layer
                .msgs
                .keys()
                .map(|rel| (rel, (Matrix::zeros(d_out, d_in), vec![S::zero(); d_out])))
                .collect();
            for (rel, msg) in &layer.msgs {
                let Some(lists) = adjacency.get(rel) else { continue };
                let (gw, gb) = grad_msgs.get_mut(rel).expect("present");
                if let Msg::Linear(w) = msg {
                    // same factoring as the forward pass: the gradient of a
                    // linear message depends only on neighbor sums
                    for (v, neighbors) in lists.iter().enumerate() {
                        if neighbors.is_empty() {
                            continue;
                        }
                        let dv = &delta_z[v];
                        if dv.iter().all(|&d| d == S::zero()) {
                            continue;
                        }
                        let mut agg = vec![S::zero(); d_in];
                        for &u in neighbors {
                            for (a, x) in agg.iter_mut().zip(&h_in[u]) {
                                *a = *a + *x;
                            }
                        }
                        for r in 0..d_out {
                            let d = dv[r];
                            if d == S::zero() {
                                continue;
                            }
                            for c in 0..d_in {
                                gw.data[r * d_in + c] = gw.data[r * d_in + c] + d * agg[c];
                            }
                        }
                        let back = w.tmatvec(dv);
                        for &u in neighbors {
                            for (dp, bi) in delta_prev[u].iter_mut().zip(&back) {
                                *dp = *dp + *bi;
                            }
                        }
                    }
                    continue;
                }
                for (v, neighbors) in lists.iter().enumerate() {
                    for &u in neighbors {
                        for r in 0..d_out {
                            let d = delta_z[v][r];
                            if d == S::zero() {
                                continue;
                            }
                            match msg {
                                Msg::Linear(_) => unreachable!("handled above"),
                                Msg::ClampAffine { w, b } => {
                                    let pre = w
                                        .data[r * d_in..(r + 1) * d_in]
                                        .iter()
                                        .zip(&h_in[u])
                                        .map(|(&x, &y)| x * y)
                                        .sum::<S>()
                                        + b[r];
                                    let s = Activation::UnitClamp.slope(pre);
                                    if s == S::zero() {
                                        continue;
                                    }
                                    let d = d * s;
                                    gb[r] = gb[r] + d;
                                    for c in 0..d_in {
                                        gw.data[r * d_in + c] =
                                            gw.data[r * d_in + c] + d * h_in[u][c];
                                        delta_prev[u][c] =
                                            delta_prev[u][c] + d * w.get(r, c);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            // flatten this layer's gradient in params() order
            let mut flat = grad_w_self.data;
            for (rel, msg) in &layer.msgs {
                let (gw, gb) = grad_msgs.remove(rel).expect("present");
                flat.extend(gw.data);
                if matches!(msg, Msg::ClampAffine { .. }) {
                    flat.extend(gb);
                }
            }
            flat.extend(grad_bias);
            layer_grads.push(flat);
            delta = delta_prev;
        }
        layer_grads.reverse();
        let mut grad: Vec<S> = layer_grads.into_iter().flatten().collect();
        grad.extend(grad_readout_w);
        grad.push(grad_readout_b);
        Ok((loss, grad))
    }

    /// Loss only (used by the finite-difference check).
    pub fn loss(&self, grable: &Grable, labels: &[u8], pos_weight: S) -> Result<(S, S), MpnnError> {
        let trace = self.run(grable)?;
        let logits = self.readout_rows(grable, &trace);
        let n = S::of_usize(labels.len());
        let mut loss = S::zero();
        for (&label, &logit) in labels.iter().zip(&logits) {
            let y = S::of_usize(label as usize);
            let w = if label == 1 { pos_weight } else { S::one() };
            let softplus = logit.max(S::zero()) + (S::one() + (-logit.abs()).exp()).ln();
            loss = loss + w * (softplus - y * logit);
        }
        Ok((loss / n, trace.kink_margin))
    }
}

/// Class weight for the positive class: `n_neg / n_pos`.
pub fn class_pos_weight<S: Scalar>(labels: &[u8]) -> S {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        S::one()
    } else {
        S::of_usize(neg.max(1)) / S::of_usize(pos)
    }
}

/// Full-batch Adam with L2 regularization added to the gradient. Validation
/// AUC is recorded every epoch and the decision threshold maximizes F1 on
/// validation scores at the end.
pub fn train<S: Scalar>(
    model: &mut MpnnModel<S>,
    cfg: &TrainConfig,
    train_grable: &Grable,
    train_labels: &[u8],
    val_grable: &Grable,
    val_labels: &[u8],
) -> Result<TrainReport<S>, MpnnError> {
    let pos_weight = class_pos_weight::<S>(train_labels);
    let n = model.n_params();
    let mut m = vec![S::zero(); n];
    let mut v = vec![S::zero(); n];
    let (beta1, beta2, eps) = (S::of_f64(0.9), S::of_f64(0.999), S::of_f64(1e-8));
    let lr = S::of_f64(cfg.lr);
    let wd = S::of_f64(cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    for t in 1..=cfg.epochs {
        let mut params = model.params();
        let (_, mut grad) = model.loss_and_grad(train_grable, train_labels, pos_weight)?;
        for (g, p) in grad.iter_mut().zip(&params) {
            *g = *g + wd * *p;
        }
        let t_s = S::of_usize(t);
        let bc1 = S::one() - beta1.powf(t_s);
        let bc2 = S::one() - beta2.powf(t_s);
        for i in 0..n {
            m[i] = beta1 * m[i] + (S::one() - beta1) * grad[i];
            v[i] = beta2 * v[i] + (S::one() - beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        model.set_params(&params)?;
        let val_scores = model.forward(val_grable)?;
        history.push(metrics::roc_auc(&val_scores, val_labels)?);
    }
    let val_scores = model.forward(val_grable)?;
    let final_val_auc = metrics::roc_auc(&val_scores, val_labels)?;
    let (threshold, final_val_f1) = metrics::select_threshold(&val_scores, val_labels)?;
    Ok(TrainReport { val_auc_history: history, threshold, final_val_auc, final_val_f1 })
}

/// Central-difference gradient check. Parameters whose perturbed forward
/// passes come within `kink_tol` of an activation kink are excluded (the
/// loss is non-differentiable there) and counted separately.
pub fn finite_diff_check<S: Scalar>(
    model: &MpnnModel<S>,
    grable: &Grable,
    labels: &[u8],
    eps: S,
    kink_tol: S,
) -> Result<GradReport<S>, MpnnError> {
    let pos_weight = class_pos_weight::<S>(labels);
    let (_, grad) = model.loss_and_grad(grable, labels, pos_weight)?;
    let base = model.params();
    let mut probe = model.clone();
    let mut max_rel_err = S::zero();
    let mut checked = 0;
    let mut excluded = 0;
    for i in 0..base.len() {
        let mut params = base.clone();
        params[i] = base[i] + eps;
        probe.set_params(&params)?;
        let (up, margin_up) = probe.loss(grable, labels, pos_weight)?;
        params[i] = base[i] - eps;
        probe.set_params(&params)?;
        let (down, margin_down) = probe.loss(grable, labels, pos_weight)?;
        if margin_up < kink_tol || margin_down < kink_tol {
            excluded += 1;
            continue;
        }
        let numeric = (up - down) / (S::of_f64(2.0) * eps);
        let denom = grad[i].abs().max(numeric.abs()).max(S::of_f64(1e-8));
        let rel = (grad[i] - numeric).abs() / denom;
        max_rel_err = max_rel_err.max(rel);
        checked += 1;
    }
    Ok(GradReport { max_rel_err, checked, excluded_near_kink: excluded })
}

// ---- GML -> MPNN compiler --------------------------------------------

/// A literal over an already-computed coordinate.
#[derive(Clone, Copy)]
struct Literal {
    coord: usize,
    positive: bool,
    stage: usize,
}

struct Gate {
    stage: usize,
    coord: usize,
    kind: GateKind,
}

enum GateKind {
    /// conjunction (true) or disjunction (false) of literals, edge-free
    Boolean { literals: Vec<Literal>, conj: bool },
    /// graded diamond whose message tests a conjunction of literals
    Diamond { relation: String, grade: usize, literals: Vec<Literal> },
}

struct CompileState {
    atoms: Vec<String>,
    gates: Vec<Gate>,
    next_coord: usize,
}

impl CompileState {
    fn coord_for_atom(&mut self, name: &str) -> usize {
        if let Some(i) = self.atoms.iter().position(|a| a == name) {
            i
        } else {
            // atoms occupy the first coordinates; gates come after, so atom
            // discovery must finish before any gate is allocated
            let i = self.atoms.len();
            self.atoms.push(name.to_string());
            i
        }
    }

    fn add_gate(&mut self, stage: usize, kind: GateKind) -> usize {
        let coord = self.next_coord;
        self.next_coord += 1;
        self.gates.push(Gate { stage, coord, kind });
        coord
    }

    /// Compile a formula into a conjunction of literals, adding gates as
    /// needed. Every subformula becomes either a literal or a gate output.
    fn conjunction(&mut self, f: &Formula) -> Vec<Literal> {
        match f {
            Formula::And(a, b) => {
                let mut lits = self.conjunction(a);
                lits.extend(self.conjunction(b));
                lits
            }
            _ => vec![self.literal(f)],
        }
    }

    fn literal(&mut self, f: &Formula) -> Literal {
        match f {
            Formula::Atom(name) => {
                let coord = self.coord_for_atom(name);
                Literal { coord, positive: true, stage: 0 }
            }
            Formula::Not(inner) => {
                let lit = self.literal(inner);
                Literal { positive: !lit.positive, ..lit }
            }
            Formula::And(_, _) => {
                let literals = self.conjunction(f);
                if let [single] = literals[..] {
                    return single;
                }
                let stage = literals.iter().map(|l| l.stage).max().unwrap_or(0) + 1;
                let coord = self.add_gate(stage, GateKind::Boolean { literals, conj: true });
                Literal { coord, positive: true, stage }
            }
            Formula::Or(a, b) => {
                let literals = vec![self.literal(a), self.literal(b)];
                let stage = literals.iter().map(|l| l.stage).max().unwrap_or(0) + 1;
                let coord = self.add_gate(stage, GateKind::Boolean { literals, conj: false });
                Literal { coord, positive: true, stage }
            }
            Formula::Diamond { relation, grade, inner } => {
                let literals = self.conjunction(inner);
                let stage = literals.iter().map(|l| l.stage).max().unwrap_or(0) + 1;
                let coord = self.add_gate(
                    stage,
                    GateKind::Diamond { relation: relation.clone(), grade: *grade, literals },
                );
                Literal { coord, positive: true, stage }
            }
        }
    }
}

/// Compile a formula into a network whose row logits are `+1` exactly on
/// rows satisfying it and `-1` elsewhere. The construction is exact: all
/// intermediate values are Boolean 0/1 under unit-clamp activations, so
/// compiled networks agree with the evaluator bit for bit.
///
/// The number of layers is the formula's gate depth: one layer per graded
/// diamond on the deepest path, plus one edge-free layer for each Boolean
/// connective that cannot be folded into a diamond's message (disjunctions
/// and conjunctions that feed anything but a diamond or the root).
pub fn compile<S: Scalar>(
    formula: &Formula,
    predicates: &PredicateSet,
) -> Result<MpnnModel<S>, MpnnError> {
    let mut state = CompileState { atoms: Vec::new(), gates: Vec::new(), next_coord: 0 };
    // discover all atoms first so their coordinates precede gate outputs
    for sub in formula.subformulas() {
        if let Formula::Atom(name) = sub {
            state.coord_for_atom(name);
        }
    }
    for name in &state.atoms {
        if predicates.get(name).is_none() {
            return Err(MpnnError::Gml(GmlError::UnknownPredicate(name.clone())));
        }
    }
    state.next_coord = state.atoms.len();
    let root = state.literal(formula);

    let n_atoms = state.atoms.len();
    let width = state.next_coord;
    let n_layers = state.gates.iter().map(|g| g.stage).max().unwrap_or(0);

    let mut layers: Vec<Layer<S>> = (0..n_layers)
        .map(|l| {
            let d_in = if l == 0 { n_atoms } else { width };
            let mut w_self = Matrix::zeros(width, d_in);
            // identity rows carry every already-computed coordinate forward
            for c in 0..d_in.min(width) {
                w_self.set(c, c, S::one());
            }
            Layer {
                w_self,
                msgs: BTreeMap::new(),
                bias: vec![S::zero(); width],
                activation: Activation::UnitClamp,
            }
        })
        .collect();

    for gate in &state.gates {
        let layer = &mut layers[gate.stage - 1];
        let d_in = layer.w_self.cols;
        // the gate's own identity row must not leak stale values
        for c in 0..d_in {
            layer.w_self.set(gate.coord, c, S::zero());
        }
        match &gate.kind {
            GateKind::Boolean { literals, conj } => {
                let mut positives = 0usize;
                let mut negatives = 0usize;
                for lit in literals {
                    let sign = if lit.positive {
                        positives += 1;
                        S::one()
                    } else {
                        negatives += 1;
                        -S::one()
                    };
                    let prev = layer.w_self.get(gate.coord, lit.coord);
                    layer.w_self.set(gate.coord, lit.coord, prev + sign);
                }
                layer.bias[gate.coord] = if *conj {
                    // all positives on, all negatives off
                    S::one() - S::of_usize(positives)
                } else {
                    // any positive on, or any negative off
                    S::of_usize(negatives)
                };
            }
            GateKind::Diamond { relation, grade, literals } => {
                // gates over the same relation in one layer share the
                // message matrix, each writing its own coordinate row
                let entry = layer.msgs.entry(relation.clone()).or_insert_with(|| {
                    Msg::ClampAffine {
                        w: Matrix::zeros(width, d_in),
                        b: vec![S::zero(); width],
                    }
                });
                let Msg::ClampAffine { w, b } = entry else { unreachable!() };
                let mut positives = 0usize;
                for lit in literals {
                    let sign = if lit.positive {
                        positives += 1;
                        S::one()
                    } else {
                        -S::one()
                    };
                    let prev = w.get(gate.coord, lit.coord);
                    w.set(gate.coord, lit.coord, prev + sign);
                }
                // message = 1 iff the neighbor satisfies the conjunction
                b[gate.coord] = S::one() - S::of_usize(positives);
                // gate output = clamp01(count - (grade - 1))
                layer.bias[gate.coord] = S::one() - S::of_usize(*grade);
            }
        }
    }

    // logit = ±(2 h_root - 1)
    let last_dim = if n_layers == 0 { n_atoms } else { width };
    let mut readout_w = vec![S::zero(); last_dim];
    let two = S::of_f64(2.0);
    readout_w[root.coord] = if root.positive { two } else { -two };
    let readout_b = if root.positive { -S::one() } else { S::one() };

    Ok(MpnnModel {
        encoder: Encoder::Predicate {
            predicates: predicates.clone(),
            atoms: state.atoms,
        },
        layers,
        readout_w,
        readout_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constructors::{build_extended_incidence, build_incidence, build_trivial};
    use crate::gml;
    use crate::table::{Row, Schema, Table, Value};
    use crate::tasks::{CountMode, TaskKind};
    use std::collections::BTreeSet;

    fn text(s: &str) -> Value {
        Value::Text(s.to_string())
    }

    fn random_table(seed: u64, n_rows: usize, n_cols: usize, alphabet: usize) -> Table {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let schema = Schema::new((0..n_cols).map(|i| format!("c{i}"))).unwrap();
        let rows = (0..n_rows)
            .map(|_| {
                Row::new(
                    (0..n_cols)
                        .map(|_| text(&format!("v{}", rng.gen_range(0..alphabet))))
                        .collect(),
                )
            })
            .collect();
        Table::new(schema, rows).unwrap()
    }

    fn types_and_relations(g: &Grable) -> (Vec<String>, Vec<String>) {
        let mut types: Vec<String> = g.nodes.iter().map(|n| n.node_type.clone()).collect();
        types.sort();
        types.dedup();
        (types, g.relation_names())
    }

    #[test]
    fn forward_is_deterministic() {
        let t = random_table(1, 15, 2, 4);
        let g = build_incidence(&t, &BTreeSet::new()).unwrap();
        let (types, rels) = types_and_relations(&g);
        let model = MpnnModel::<f64>::new_random(&MpnnConfig::default(), &types, &rels);
        assert_eq!(model.forward(&g).unwrap(), model.forward(&g).unwrap());
        let again = MpnnModel::<f64>::new_random(&MpnnConfig::default(), &types, &rels);
        assert_eq!(model.forward(&g).unwrap(), again.forward(&g).unwrap());
    }

    #[test]
    fn trivial_grable_outputs_are_row_local() {
        // no edges: a row's logit cannot depend on other rows
        let t = random_table(2, 10, 2, 3);
        let g = build_trivial(&t);
        let (types, rels) = types_and_relations(&g);
        let model = MpnnModel::<f64>::new_random(&MpnnConfig::default(), &types, &rels);
        let full = model.forward(&g).unwrap();
        for keep in 0..t.n_rows() {
            let solo = Table::new(t.schema().clone(), vec![t.rows()[keep].clone()]).unwrap();
            let gs = build_trivial(&solo);
            let out = model.forward(&gs).unwrap();
            assert_eq!(out[0], full[keep]);
        }
    }

    #[test]
    fn outputs_are_isomorphism_invariant() {
        let t = random_table(3, 12, 2, 3);
        let mut perm: Vec<usize> = (0..t.n_rows()).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
        let permuted = Table::new(
            t.schema().clone(),
            perm.iter().map(|&i| t.rows()[i].clone()).collect(),
        )
        .unwrap();
        let g = build_incidence(&t, &BTreeSet::new()).unwrap();
        let h = build_incidence(&permuted, &BTreeSet::new()).unwrap();
        let (types, rels) = types_and_relations(&g);
        let model = MpnnModel::<f64>::new_random(&MpnnConfig::default(), &types, &rels);
        let out_g = model.forward(&g).unwrap();
        let out_h = model.forward(&h).unwrap();
        for (new_i, &old_i) in perm.iter().enumerate() {
            assert!((out_h[new_i] - out_g[old_i]).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_neighborhoods_are_handled() {
        let schema = Schema::new(["a"]).unwrap();
        let t = Table::new(
            schema,
            vec![Row::new(vec![text("x")]), Row::new(vec![Value::Missing])],
        )
        .unwrap();
        let g = build_incidence(&t, &BTreeSet::new()).unwrap();
        let (types, rels) = types_and_relations(&g);
        let model = MpnnModel::<f64>::new_random(&MpnnConfig::default(), &types, &rels);
        let out = model.forward(&g).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn params_round_trip() {
        let t = random_table(4, 8, 2, 3);
        let g = build_incidence(&t, &BTreeSet::new()).unwrap();
        let (types, rels) = types_and_relations(&g);
        let mut model = MpnnModel::<f64>::new_random(&MpnnConfig::default(), &types, &rels);
        let p = model.params();
        assert_eq!(p.len(), model.n_params());
        let mut doubled = p.clone();
        for x in &mut doubled {
            *x *= 2.0;
        }
        model.set_params(&doubled).unwrap();
        assert_eq!(model.params(), doubled);
        assert!(model.set_params(&p[1..]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..6u64 {
            let t = random_table(seed, 10, 2, 3);
            let g = build_incidence(&t, &BTreeSet::new()).unwrap();
            let labels: Vec<u8> = (0..t.n_rows()).map(|i| (i % 2) as u8).collect();
            let (types, rels) = types_and_relations(&g);
            let cfg = MpnnConfig { n_layers: 2, hidden: 6, hash_dim: 4, seed, ..MpnnConfig::default() };
            let model = MpnnModel::<f64>::new_random(&cfg, &types, &rels);
            let report = finite_diff_check(&model, &g, &labels, 1e-5, 1e-4).unwrap();
            assert!(report.checked > 0);
            assert!(
                report.max_rel_err < 1e-4,
                "seed {seed}: rel err {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn gradient_check_exercises_clamp_messages() {
        let t = random_table(11, 8, 2, 3);
        let g = build_incidence(&t, &BTreeSet::new()).unwrap();
        let (types, rels) = types_and_relations(&g);
        let cfg = MpnnConfig { n_layers: 2, hidden: 5, hash_dim: 4, seed: 3, ..MpnnConfig::default() };
        let mut model = MpnnModel::<f64>::new_random(&cfg, &types, &rels);
        // swap one relation's message per layer to a random clamp-affine
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for layer in &mut model.layers {
            let rel = rels[0].clone();
            let (rows, cols) = (layer.w_self.rows, layer.w_self.cols);
            let data = (0..rows * cols).map(|_| rng.gen_range(-0.6..0.6)).collect();
            let b = (0..rows).map(|_| rng.gen_range(0.1..0.7)).collect();
            layer
                .msgs
                .insert(rel, Msg::ClampAffine { w: Matrix { rows, cols, data }, b });
        }
        let labels: Vec<u8> = (0..t.n_rows()).map(|i| (i % 2) as u8).collect();
        let report = finite_diff_check(&model, &g, &labels, 1e-5, 1e-4).unwrap();
        assert!(report.checked > 0);
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    fn check_compiled_equivalence(seeds: std::ops::Range<u64>, task: &TaskKind, extended: bool) {
        let (f, p) = gml::builtin(task);
        let model: MpnnModel<f64> = compile(&f, &p).unwrap();
        for seed in seeds {
            let t = random_table(seed, 30, 3, 4);
            let g = if extended {
                build_extended_incidence(&t, &BTreeSet::new(), "c0", "c1").unwrap()
            } else {
                build_incidence(&t, &BTreeSet::new()).unwrap()
            };
            let bits = gml::eval(&f, &g, &p).unwrap();
            let want: Vec<u8> = gml::row_restriction(&g, &bits).iter().map(|&b| b as u8).collect();
            let logits = model.forward(&g).unwrap();
            let got: Vec<u8> = logits.iter().map(|&z| (z > 0.0) as u8).collect();
            assert_eq!(got, want, "{task:?} seed {seed}");
            // logits are exactly ±1
            for z in logits {
                assert!((z.abs() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn compiled_unique_matches_evaluator() {
        check_compiled_equivalence(0..15, &TaskKind::Unique { column: "c0".into() }, false);
    }

    #[test]
    fn compiled_count_matches_evaluator() {
        check_compiled_equivalence(
            0..10,
            &TaskKind::Count { column: "c1".into(), k: 2, mode: CountMode::Gt },
            false,
        );
        check_compiled_equivalence(
            0..10,
            &TaskKind::Count { column: "c1".into(), k: 2, mode: CountMode::Eq },
            false,
        );
    }

    #[test]
    fn compiled_double_matches_evaluator() {
        check_compiled_equivalence(
            0..10,
            &TaskKind::Double { c1: "c0".into(), c2: "c2".into(), anchor: text("v0") },
            false,
        );
    }

    #[test]
    fn compiled_diamond_matches_evaluator() {
        check_compiled_equivalence(
            0..10,
            &TaskKind::Diamond { c1: "c0".into(), c2: "c1".into() },
            true,
        );
    }

    #[test]
    fn compiled_depth_matches_modal_depth_where_foldable() {
        let uniq = gml::builtin(&TaskKind::Unique { column: "c".into() });
        let m: MpnnModel<f64> = compile(&uniq.0, &uniq.1).unwrap();
        assert_eq!(m.layers.len(), uniq.0.modal_depth());
        let cnt = gml::builtin(&TaskKind::Count { column: "c".into(), k: 3, mode: CountMode::Gt });
        let m: MpnnModel<f64> = compile(&cnt.0, &cnt.1).unwrap();
        assert_eq!(m.layers.len(), cnt.0.modal_depth());
        let dia = gml::builtin(&TaskKind::Diamond { c1: "a".into(), c2: "b".into() });
        let m: MpnnModel<f64> = compile(&dia.0, &dia.1).unwrap();
        assert_eq!(m.layers.len(), dia.0.modal_depth());
    }

    #[test]
    fn compile_rejects_unknown_predicates() {
        let f = gml::parse("<E_c>=1 Mystery").unwrap();
        assert!(matches!(
            compile::<f64>(&f, &PredicateSet::standard()),
            Err(MpnnError::Gml(GmlError::UnknownPredicate(_)))
        ));
    }

    #[test]
    fn training_learns_uniqueness_on_a_small_table() {
        let t = random_table(5, 120, 2, 30);
        let labels = crate::tasks::label_unique(&t, "c0").unwrap();
        let g = build_incidence(&t, &BTreeSet::new()).unwrap();
        let val_t = random_table(6, 60, 2, 18);
        let val_labels = crate::tasks::label_unique(&val_t, "c0").unwrap();
        let val_g = build_incidence(&val_t, &BTreeSet::new()).unwrap();
        let (types, rels) = types_and_relations(&g);
        let cfg = MpnnConfig { n_layers: 2, hidden: 16, hash_dim: 8, seed: 1, ..MpnnConfig::default() };
        let mut model = MpnnModel::<f64>::new_random(&cfg, &types, &rels);
        let train_cfg = TrainConfig { lr: 1e-2, weight_decay: 1e-4, epochs: 120 };
        let report = train(&mut model, &train_cfg, &g, &labels, &val_g, &val_labels).unwrap();
        assert_eq!(report.val_auc_history.len(), 120);
        assert!(
            report.final_val_auc > 0.95,
            "val auc {}",
            report.final_val_auc
        );
    }

    #[test]
    fn model_serializes() {
        let task = TaskKind::Unique { column: "c0".into() };
        let (f, p) = gml::builtin(&task);
        let model: MpnnModel<f64> = compile(&f, &p).unwrap();
        let json = serde_json::to_string(&model).unwrap();
        let back: MpnnModel<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn single_precision_forward_agrees_roughly() {
        let t = random_table(8, 10, 2, 4);
        let g = build_incidence(&t, &BTreeSet::new()).unwrap();
        let (types, rels) = types_and_relations(&g);
        let cfg = MpnnConfig { n_layers: 2, hidden: 8, hash_dim: 4, seed: 2, ..MpnnConfig::default() };
        let m64 = MpnnModel::<f64>::new_random(&cfg, &types, &rels);
        let m32 = MpnnModel::<f32>::new_random(&cfg, &types, &rels);
        let o64 = m64.forward(&g).unwrap();
        let o32 = m32.forward(&g).unwrap();
        for (a, b) in o64.iter().zip(&o32) {
            assert!((a - *b as f64).abs() < 1e-3);
        }
    }
}
