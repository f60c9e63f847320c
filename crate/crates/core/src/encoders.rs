//! Learnable building blocks: linear layers, batch norm, the two-layer GCN
//! graph encoder, the word-embedding table, projection heads and softmax
//! classifiers.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graphs::{propagation_matrix, Graph};
use crate::numgrad::{Csr, ParamId, ParamStore, Tape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::new(&[fan_in, fan_out], data).expect("shape matches")
}

fn dim_check(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Config(format!(
            "{what}: expected input dimension {expected}, got {got}"
        )));
    }
    Ok(())
}

/// Affine map `x·W + b` applied to every row.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.register(format!("{name}.weight"), glorot(rng, in_dim, out_dim));
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let cols = *tape.shape(x).last().unwrap_or(&0);
        dim_check("linear", self.in_dim, cols)?;
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        Ok(tape.add_row(tape.matmul(x, w)?, b)?)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Batch statistics observed by one batch-norm layer in a training pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.register(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.register(format!("{name}.beta"), Tensor::zeros(&[dim])),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }

    /// Normalizes columns of `x`. Training mode uses batch statistics unless
    /// the batch has a single row, in which case running statistics apply.
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BnStats>)> {
        let rows = tape.shape(x)[0];
        let (normalized, stats) = if mode == Mode::Train && rows > 1 {
            let (xhat, mean, var) = tape.standardize_cols(x, BN_EPS)?;
            (
                xhat,
                Some(BnStats {
                    mean,
                    var,
                    count: rows,
                }),
            )
        } else {
            let scale: Vec<f64> = self
                .running_var
                .iter()
                .map(|v| 1.0 / (v + BN_EPS).sqrt())
                .collect();
            let shift: Vec<f64> = self
                .running_mean
                .iter()
                .zip(&scale)
                .map(|(m, s)| -m * s)
                .collect();
            let scaled = tape.mul_row(x, tape.constant(Tensor::vector(scale)))?;
            (
                tape.add_row(scaled, tape.constant(Tensor::vector(shift)))?,
                None,
            )
        };
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        Ok((tape.add_row(tape.mul_row(normalized, g)?, b)?, stats))
    }

    /// Exponential moving average update; the running variance stores the
    /// unbiased estimate.
    pub fn update_running(&mut self, stats: &BnStats) {
        let unbias = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for j in 0..self.running_mean.len() {
            self.running_mean[j] =
                (1.0 - BN_MOMENTUM) * self.running_mean[j] + BN_MOMENTUM * stats.mean[j];
            self.running_var[j] =
                (1.0 - BN_MOMENTUM) * self.running_var[j] + BN_MOMENTUM * stats.var[j] * unbias;
        }
    }
}

/// One graph-convolution block: `relu(BN(Linear(Â·H·W)))`.
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub propagate_weight: ParamId,
    pub linear: Linear,
    pub norm: BatchNorm,
}

/// Output of a batched encoder pass.
#[derive(Clone, Debug)]
pub struct GcnOutput {
    /// `[B × d_g]`, one mean-readout row per graph.
    pub graph_repr: Var,
    /// `[Σn × d_g]`, node features after the last block, graphs stacked.
    pub node_repr: Var,
    /// Row offset of each graph inside `node_repr`; has `B + 1` entries.
    pub offsets: Vec<usize>,
    /// Batch statistics per layer (training mode only).
    pub bn_stats: Vec<Option<BnStats>>,
}

impl GcnOutput {
    pub fn nodes_of(&self, tape: &Tape, b: usize) -> Result<Var> {
        Ok(tape.slice_rows(self.node_repr, self.offsets[b], self.offsets[b + 1])?)
    }

    pub fn graph_of(&self, tape: &Tape, b: usize) -> Result<Var> {
        let row = tape.slice_rows(self.graph_repr, b, b + 1)?;
        let d = tape.shape(row)[1];
        Ok(tape.reshape(row, &[d])?)
    }
}

/// Two GCN blocks, dropout (training only) and mean readout.
#[derive(Clone, Debug)]
pub struct GcnEncoder {
    pub layers: Vec<GcnLayer>,
    pub dropout: f64,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl GcnEncoder {
    /// Hidden width equals `out_dim`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..2)
            .map(|l| {
                let fan_in = if l == 0 { in_dim } else { out_dim };
                let prefix = format!("{name}.gcn{l}");
                GcnLayer {
                    propagate_weight: store
                        .register(format!("{prefix}.weight"), glorot(rng, fan_in, out_dim)),
                    linear: Linear::new(store, &format!("{prefix}.linear"), out_dim, out_dim, rng),
                    norm: BatchNorm::new(store, &format!("{prefix}.bn"), out_dim),
                }
            })
            .collect();
        Self {
            layers,
            dropout,
            in_dim,
            out_dim,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.propagate_weight,
                    l.linear.weight,
                    l.linear.bias,
                    l.norm.gamma,
                    l.norm.beta,
                ]
            })
            .collect()
    }

    /// Encodes a batch of graphs whose node features are `features[b]`.
    /// Batch norm pools statistics over all nodes of the batch.
    pub fn forward_batch(
        &self,
        tape: &Tape,
        store: &ParamStore,
        graphs: &[&Graph],
        features: &[Var],
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<GcnOutput> {
        if graphs.is_empty() || graphs.len() != features.len() {
            return Err(Error::Config(
                "gcn: need one feature matrix per graph".into(),
            ));
        }
        let mut offsets = vec![0];
        for (g, &f) in graphs.iter().zip(features) {
            let shape = tape.shape(f);
            dim_check("gcn", self.in_dim, shape[1])?;
            if shape[0] != g.n() {
                return Err(Error::Config(format!(
                    "gcn: graph has {} nodes but features have {} rows",
                    g.n(),
                    shape[0]
                )));
            }
            offsets.push(offsets.last().unwrap() + g.n());
        }
        let blocks: Vec<Csr> = graphs.iter().map(|g| propagation_matrix(g)).collect();
        let propagation = Rc::new(Csr::block_diag(&blocks));

        let mut h = if features.len() == 1 {
            features[0]
        } else {
            tape.concat_rows(features)?
        };
        let mut bn_stats = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w = tape.param(store, layer.propagate_weight);
            let spread = tape.propagate(h, Rc::clone(&propagation))?;
            let mixed = layer.linear.forward(tape, store, tape.matmul(spread, w)?)?;
            let (normed, stats) = layer.norm.forward(tape, store, mixed, mode)?;
            bn_stats.push(stats);
            h = tape.relu(normed);
        }
        let node_repr = h;

        let dropped = if mode == Mode::Train && self.dropout > 0.0 {
            let total = *offsets.last().unwrap();
            let keep = 1.0 - self.dropout;
            let mask: Vec<f64> = (0..total * self.out_dim)
                .map(|_| {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect();
            tape.mul(
                node_repr,
                tape.constant(Tensor::new(&[total, self.out_dim], mask)?),
            )?
        } else {
            node_repr
        };

        let mut readouts = Vec::with_capacity(graphs.len());
        for b in 0..graphs.len() {
            let rows = tape.slice_rows(dropped, offsets[b], offsets[b + 1])?;
            let mean = tape.mean_rows(rows)?;
            readouts.push(tape.reshape(mean, &[1, self.out_dim])?);
        }
        let graph_repr = if readouts.len() == 1 {
            readouts[0]
        } else {
            tape.concat_rows(&readouts)?
        };
        Ok(GcnOutput {
            graph_repr,
            node_repr,
            offsets,
            bn_stats,
        })
    }

    /// Single-graph encoding: `(graph_repr [d_g], node_repr [n × d_g])`.
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        graph: &Graph,
        features: Var,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<(Var, Var)> {
        let out = self.forward_batch(tape, store, &[graph], &[features], mode, rng)?;
        Ok((out.graph_of(tape, 0)?, out.node_repr))
    }

    pub fn update_running(&mut self, stats: &[Option<BnStats>]) {
        for (layer, s) in self.layers.iter_mut().zip(stats) {
            if let Some(s) = s {
                layer.norm.update_running(s);
            }
        }
    }
}

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Learnable word embeddings; row 0 is the padding token.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab_size: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(0.0, 0.1).expect("valid std");
        let data = (0..vocab_size * dim).map(|_| normal.sample(rng)).collect();
        let table = store.register(
            format!("{name}.table"),
            Tensor::new(&[vocab_size, dim], data).expect("shape"),
        );
        Self {
            table,
            vocab_size,
            dim,
        }
    }

    /// Looks up the non-padding ids (first `max_len` tokens) as `[L' × d_t]`.
    pub fn embed(
        &self,
        tape: &Tape,
        store: &ParamStore,
        ids: &[u32],
        max_len: usize,
    ) -> Result<Var> {
        let rows: Vec<usize> = ids
            .iter()
            .take(max_len)
            .filter(|&&id| id != PAD_ID)
            .map(|&id| id as usize)
            .collect();
        if rows.is_empty() {
            return Err(Error::Data(
                "caption has no tokens after removing padding".into(),
            ));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let table = tape.param(store, self.table);
        Ok(tape.gather_rows(table, &rows)?)
    }
}

/// Linear projection into the shared alignment space.
#[derive(Clone, Debug)]
pub struct ProjectionHead(pub Linear);

impl ProjectionHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self(Linear::new(store, name, in_dim, out_dim, rng))
    }

    /// Projects the rows of `[n × in]`, or a single `[in]` vector to `[out]`.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() == 1 {
            let row = tape.reshape(x, &[1, shape[0]])?;
            let out = self.0.forward(tape, store, row)?;
            Ok(tape.reshape(out, &[self.0.out_dim])?)
        } else {
            self.0.forward(tape, store, x)
        }
    }

    pub fn out_dim(&self) -> usize {
        self.0.out_dim
    }
}

/// Linear layer followed by a row softmax.
#[derive(Clone, Debug)]
pub struct Classifier(pub Linear);

impl Classifier {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self(Linear::new(store, name, in_dim, classes, rng))
    }

    /// `[B × d] → [B × |C|]` probabilities.
    pub fn forward_rows(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(tape.softmax_rows(self.0.forward(tape, store, x)?)?)
    }

    /// `[d] → [|C|]` probabilities.
    pub fn classify(&self, tape: &Tape, store: &ParamStore, feat: Var) -> Result<Var> {
        let d = tape.shape(feat).iter().product();
        let row = tape.reshape(feat, &[1, d])?;
        let probs = self.forward_rows(tape, store, row)?;
        Ok(tape.reshape(probs, &[self.0.out_dim])?)
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
