//! The multi-channel hypergraph convolutional model.
//!
//! Forward structure: base user embeddings are pre-filtered by per-channel
//! self-gating units, propagated through each channel's normalized motif
//! matrix for L layers, layer-averaged, and fused by a softmax attention
//! over channels. A parallel simple graph convolution on the user-item
//! matrix carries purchase information into the item embeddings. The final
//! score for (user, item) is the dot product of their final embeddings.
//!
//! [`forward`] records the whole computation on an autodiff [`Tape`] so the
//! trainer can backpropagate through it; evaluation runs the same graph with
//! frozen leaves. The small standalone functions ([`self_gate`],
//! [`hypergraph_conv`], [`channel_average`], [`attention_fuse`]) are the
//! reference forms of each stage, used by tests to cross-check the graph.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{SparseOperator, Tape, TensorId};
use crate::linalg::{DenseMatrix, SparseMatrix};
use crate::motifs::ChannelMatrices;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("checkpoint i/o failed")]
    Io(#[from] std::io::Error),
    #[error("not a model checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
}

/// The three propagation channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Social,
    Joint,
    Purchase,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Social, Channel::Joint, Channel::Purchase];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Social => "social",
            Channel::Joint => "joint",
            Channel::Purchase => "purchase",
        }
    }
}

/// Which channels participate in fusion and the auxiliary task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ChannelMask {
    pub social: bool,
    pub joint: bool,
    pub purchase: bool,
}

impl Default for ChannelMask {
    fn default() -> Self {
        Self { social: true, joint: true, purchase: true }
    }
}

impl ChannelMask {
    pub fn enabled(&self) -> Vec<Channel> {
        Channel::ALL
            .into_iter()
            .filter(|c| self.contains(*c))
            .collect()
    }

    pub fn contains(&self, c: Channel) -> bool {
        match c {
            Channel::Social => self.social,
            Channel::Joint => self.joint,
            Channel::Purchase => self.purchase,
        }
    }
}

/// The seven self-gating units: one per convolution channel, one for the
/// simple graph convolution, and three for the self-supervised views.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateKind {
    Social,
    Joint,
    Purchase,
    Rating,
    SslSocial,
    SslJoint,
    SslPurchase,
}

impl GateKind {
    pub const ALL: [GateKind; 7] = [
        GateKind::Social,
        GateKind::Joint,
        GateKind::Purchase,
        GateKind::Rating,
        GateKind::SslSocial,
        GateKind::SslJoint,
        GateKind::SslPurchase,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&g| g == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            GateKind::Social => "gate_social",
            GateKind::Joint => "gate_joint",
            GateKind::Purchase => "gate_purchase",
            GateKind::Rating => "gate_rating",
            GateKind::SslSocial => "gate_ssl_social",
            GateKind::SslJoint => "gate_ssl_joint",
            GateKind::SslPurchase => "gate_ssl_purchase",
        }
    }

    pub fn for_channel(c: Channel) -> GateKind {
        match c {
            Channel::Social => GateKind::Social,
            Channel::Joint => GateKind::Joint,
            Channel::Purchase => GateKind::Purchase,
        }
    }

    pub fn for_ssl_channel(c: Channel) -> GateKind {
        match c {
            Channel::Social => GateKind::SslSocial,
            Channel::Joint => GateKind::SslJoint,
            Channel::Purchase => GateKind::SslPurchase,
        }
    }
}

/// One self-gating unit: weight d.d and bias 1.d.
#[derive(Clone, Debug, PartialEq)]
pub struct Gate {
    pub weight: DenseMatrix,
    pub bias: DenseMatrix,
}

/// All trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub user_embeddings: DenseMatrix,
    pub item_embeddings: DenseMatrix,
    pub gates: Vec<Gate>,
    pub attention_query: DenseMatrix,
    pub attention_weight: DenseMatrix,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MHCN";
const CHECKPOINT_VERSION: u32 = 1;

impl ModelParams {
    /// Initialize every tensor uniformly on [-scale, scale].
    pub fn init(m: usize, n: usize, d: usize, scale: f64, rng: &mut impl Rng) -> Self {
        assert!(m > 0 && n > 0 && d > 0, "degenerate model shape {m}x{n}x{d}");
        let mut uniform = |rows: usize, cols: usize| {
            DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..=scale))
        };
        let gates = (0..GateKind::ALL.len())
            .map(|_| Gate { weight: uniform(d, d), bias: uniform(1, d) })
            .collect();
        ModelParams {
            user_embeddings: uniform(m, d),
            item_embeddings: uniform(n, d),
            gates,
            attention_query: uniform(d, 1),
            attention_weight: uniform(d, d),
        }
    }

    pub fn num_users(&self) -> usize {
        self.user_embeddings.rows()
    }

    pub fn num_items(&self) -> usize {
        self.item_embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.user_embeddings.cols()
    }

    pub fn gate(&self, kind: GateKind) -> &Gate {
        &self.gates[kind.index()]
    }

    /// Tensor names in canonical order.
    pub fn tensor_names() -> Vec<String> {
        let mut names = vec!["user_embeddings".to_string(), "item_embeddings".to_string()];
        for kind in GateKind::ALL {
            names.push(format!("{}.weight", kind.name()));
            names.push(format!("{}.bias", kind.name()));
        }
        names.push("attention_query".to_string());
        names.push("attention_weight".to_string());
        names
    }

    /// Named tensors in canonical order. Gradient sets, optimizer state, and
    /// checkpoints all use this order.
    pub fn tensors(&self) -> Vec<(String, &DenseMatrix)> {
        let mut refs: Vec<&DenseMatrix> =
            vec![&self.user_embeddings, &self.item_embeddings];
        for gate in &self.gates {
            refs.push(&gate.weight);
            refs.push(&gate.bias);
        }
        refs.push(&self.attention_query);
        refs.push(&self.attention_weight);
        Self::tensor_names().into_iter().zip(refs).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out: Vec<&mut DenseMatrix> =
            vec![&mut self.user_embeddings, &mut self.item_embeddings];
        for gate in &mut self.gates {
            out.push(&mut gate.weight);
            out.push(&mut gate.bias);
        }
        out.push(&mut self.attention_query);
        out.push(&mut self.attention_weight);
        out
    }

    /// Exact trainable scalar count: (m+n)d for the embedding tables plus
    /// d^2+d for each of the seven gates and for the attention pair.
    pub fn param_count(&self) -> usize {
        let (m, n, d) = (self.num_users(), self.num_items(), self.dim());
        (m + n) * d + 8 * (d * d + d)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Write a versioned checkpoint: magic, version, shapes (m, n, d, L),
    /// then every tensor in canonical order as little-endian f64.
    pub fn save(&self, path: &Path, layers: usize) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for dim in [self.num_users(), self.num_items(), self.dim(), layers] {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for (_, tensor) in self.tensors() {
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Load a checkpoint written by [`ModelParams::save`], returning the
    /// parameters and the layer count stored alongside them.
    pub fn load(path: &Path) -> Result<(ModelParams, usize), ModelError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::BadMagic);
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::BadVersion(version));
        }
        let mut u64buf = [0u8; 8];
        let mut read_dim = |r: &mut BufReader<File>| -> Result<usize, ModelError> {
            r.read_exact(&mut u64buf)?;
            Ok(u64::from_le_bytes(u64buf) as usize)
        };
        let m = read_dim(&mut r)?;
        let n = read_dim(&mut r)?;
        let d = read_dim(&mut r)?;
        let layers = read_dim(&mut r)?;
        if m == 0 || n == 0 || d == 0 {
            return Err(ModelError::ShapeMismatch {
                expected: "positive m, n, d".into(),
                found: format!("m={m}, n={n}, d={d}"),
            });
        }

        let mut read_tensor = |rows: usize, cols: usize| -> Result<DenseMatrix, ModelError> {
            let mut data = vec![0.0f64; rows * cols];
            let mut buf = [0u8; 8];
            for v in &mut data {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            Ok(DenseMatrix::from_vec(rows, cols, data))
        };
        let user_embeddings = read_tensor(m, d)?;
        let item_embeddings = read_tensor(n, d)?;
        let mut gates = Vec::with_capacity(GateKind::ALL.len());
        for _ in GateKind::ALL {
            gates.push(Gate { weight: read_tensor(d, d)?, bias: read_tensor(1, d)? });
        }
        let attention_query = read_tensor(d, 1)?;
        let attention_weight = read_tensor(d, d)?;
        Ok((
            ModelParams {
                user_embeddings,
                item_embeddings,
                gates,
                attention_query,
                attention_weight,
            },
            layers,
        ))
    }
}

/// Per-fold constant propagation operators, shareable across steps.
pub struct ChannelOperators {
    pub social: Arc<SparseOperator>,
    pub joint: Arc<SparseOperator>,
    pub purchase: Arc<SparseOperator>,
    /// D_u^-1 R: items to their users.
    pub item_to_user: Arc<SparseOperator>,
    /// D_i^-1 R^T: users to their items.
    pub user_to_item: Arc<SparseOperator>,
}

impl ChannelOperators {
    /// Normalize the channel matrices and the training interaction matrix
    /// into propagation operators.
    pub fn new(channels: &ChannelMatrices, train: &SparseMatrix) -> Self {
        Self {
            social: Arc::new(SparseOperator::new(channels.social_norm.clone())),
            joint: Arc::new(SparseOperator::new(channels.joint_norm.clone())),
            purchase: Arc::new(SparseOperator::new(channels.purchase_norm.clone())),
            item_to_user: Arc::new(SparseOperator::new(train.row_normalize())),
            user_to_item: Arc::new(SparseOperator::new(train.transpose().row_normalize())),
        }
    }

    pub fn channel(&self, c: Channel) -> &Arc<SparseOperator> {
        match c {
            Channel::Social => &self.social,
            Channel::Joint => &self.joint,
            Channel::Purchase => &self.purchase,
        }
    }
}

/// Forward-pass shape knobs.
#[derive(Clone, Debug)]
pub struct ForwardConfig {
    pub layers: usize,
    pub channel_mask: ChannelMask,
    /// Recompute attention from each layer's embeddings instead of sharing
    /// the average-based weights across layers. Off by default.
    pub per_layer_attention: bool,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            channel_mask: ChannelMask::default(),
            per_layer_attention: false,
        }
    }
}

/// Tape locations of every trainable leaf, in [`ModelParams::tensors`] order.
pub struct ParamIds {
    pub user_embeddings: TensorId,
    pub item_embeddings: TensorId,
    pub gates: Vec<(TensorId, TensorId)>,
    pub attention_query: TensorId,
    pub attention_weight: TensorId,
    pub ordered: Vec<TensorId>,
}

impl ParamIds {
    /// Reassemble from leaves registered in [`ModelParams::tensors`] order.
    pub fn from_ordered(ids: &[TensorId]) -> ParamIds {
        assert_eq!(ids.len(), 4 + 2 * GateKind::ALL.len(), "wrong leaf count");
        let gates = (0..GateKind::ALL.len())
            .map(|g| (ids[2 + 2 * g], ids[3 + 2 * g]))
            .collect();
        ParamIds {
            user_embeddings: ids[0],
            item_embeddings: ids[1],
            gates,
            attention_query: ids[ids.len() - 2],
            attention_weight: ids[ids.len() - 1],
            ordered: ids.to_vec(),
        }
    }

    pub fn gate(&self, kind: GateKind) -> (TensorId, TensorId) {
        self.gates[kind.index()]
    }
}

/// A recorded forward pass.
pub struct Forward {
    pub tape: Tape,
    pub params: ParamIds,
    /// Final user embeddings P (m.d).
    pub user_final: TensorId,
    /// Final item embeddings Q (n.d).
    pub item_final: TensorId,
    /// Softmax attention over enabled channels (m.k), rows sum to 1.
    pub attention: TensorId,
    pub enabled: Vec<Channel>,
}

/// The tensor ids a forward pass produces on an external tape.
pub struct ForwardOutputs {
    pub user_final: TensorId,
    pub item_final: TensorId,
    pub attention: TensorId,
    pub enabled: Vec<Channel>,
}

/// Register every parameter tensor as a tape leaf in canonical order.
pub fn register_params(tape: &mut Tape, params: &ModelParams, trainable: bool) -> ParamIds {
    let ordered: Vec<TensorId> = params
        .tensors()
        .into_iter()
        .map(|(_, t)| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    ParamIds::from_ordered(&ordered)
}

/// X . sigma(X W + b) on the tape.
pub fn apply_gate(tape: &mut Tape, x: TensorId, gate: (TensorId, TensorId)) -> TensorId {
    let xw = tape.matmul(x, gate.0);
    let pre = tape.add_row_broadcast(xw, gate.1);
    let sig = tape.sigmoid(pre);
    tape.hadamard(x, sig)
}

/// Record the full forward pass. `trainable` controls whether parameter
/// leaves accumulate gradients (training) or are frozen (evaluation).
pub fn forward(
    params: &ModelParams,
    ops: &ChannelOperators,
    config: &ForwardConfig,
    trainable: bool,
) -> Forward {
    let mut tape = Tape::new();
    let ids = register_params(&mut tape, params, trainable);
    let out = forward_on_tape(&mut tape, &ids, ops, config);
    Forward {
        tape,
        params: ids,
        user_final: out.user_final,
        item_final: out.item_final,
        attention: out.attention,
        enabled: out.enabled,
    }
}

/// Record the forward pass against leaves already on `tape`. Split out so
/// callers composing extra loss terms (or finite-difference checks) can
/// rebuild the graph on a tape they control.
pub fn forward_on_tape(
    tape: &mut Tape,
    ids: &ParamIds,
    ops: &ChannelOperators,
    config: &ForwardConfig,
) -> ForwardOutputs {
    let enabled = config.channel_mask.enabled();
    assert!(!enabled.is_empty(), "at least one channel must be enabled");
    let layers = config.layers;

    // Per-channel gated inputs and propagation stacks.
    let mut stacks: Vec<Vec<TensorId>> = Vec::with_capacity(enabled.len());
    for &c in &enabled {
        let gated = apply_gate(&mut *tape, ids.user_embeddings, ids.gate(GateKind::for_channel(c)));
        let mut stack = vec![gated];
        for l in 0..layers {
            let next = tape.sp_matmul(ops.channel(c), stack[l]);
            stack.push(next);
        }
        stacks.push(stack);
    }
    let averages: Vec<TensorId> = stacks.iter().map(|s| tape.mean(s)).collect();

    // Attention over channel averages: logit_c = (a^T W_att) p*_c per user.
    let attention_of = |tape: &mut Tape, inputs: &[TensorId]| -> TensorId {
        let q_t = tape.transpose(ids.attention_query);
        let aw = tape.matmul(q_t, ids.attention_weight);
        let aw_t = tape.transpose(aw);
        let logits: Vec<TensorId> = inputs
            .iter()
            .map(|&p| tape.matmul(p, aw_t))
            .collect();
        let stacked = tape.concat_cols(&logits);
        tape.softmax_rows(stacked)
    };
    let attention = attention_of(&mut *tape, &averages);

    let fuse = |tape: &mut Tape, alpha: TensorId, inputs: &[TensorId]| -> TensorId {
        let mut acc: Option<TensorId> = None;
        for (idx, &p) in inputs.iter().enumerate() {
            let col = tape.extract_col(alpha, idx);
            let weighted = tape.mul_col_broadcast(p, col);
            acc = Some(match acc {
                Some(a) => tape.add(a, weighted),
                None => weighted,
            });
        }
        acc.unwrap()
    };
    let comprehensive = fuse(&mut *tape, attention, &averages);

    // Simple graph convolution over the interaction matrix. The combined
    // user signal mixes attention-fused layer embeddings with half of the
    // rating-gated stack.
    let rating0 = apply_gate(&mut *tape, ids.user_embeddings, ids.gate(GateKind::Rating));
    let mut rating_stack = vec![rating0];
    let mut item_stack = vec![ids.item_embeddings];
    for l in 0..layers {
        let layer_inputs: Vec<TensorId> = stacks.iter().map(|s| s[l]).collect();
        let alpha_l = if config.per_layer_attention {
            attention_of(&mut *tape, &layer_inputs)
        } else {
            attention
        };
        let fused_l = fuse(&mut *tape, alpha_l, &layer_inputs);
        let half_rating = tape.scale(rating_stack[l], 0.5);
        let mixed = tape.add(fused_l, half_rating);

        let next_item = tape.sp_matmul(&ops.user_to_item, mixed);
        let next_rating = tape.sp_matmul(&ops.item_to_user, item_stack[l]);
        item_stack.push(next_item);
        rating_stack.push(next_rating);
    }

    let rating_mean = tape.mean(&rating_stack);
    let user_final = tape.add(comprehensive, rating_mean);
    let item_final = tape.mean(&item_stack);

    ForwardOutputs { user_final, item_final, attention, enabled }
}

/// Reference self-gating: X . sigma(X W + b).
pub fn self_gate(x: &DenseMatrix, weight: &DenseMatrix, bias: &DenseMatrix) -> DenseMatrix {
    assert_eq!(bias.rows(), 1, "bias must be a single row");
    x.hadamard(&x.matmul(weight).add_row_broadcast(bias.row(0)).sigmoid())
}

/// Reference hypergraph convolution: one propagation step through a
/// row-normalized channel matrix. No transforms, no nonlinearity.
pub fn hypergraph_conv(a_norm: &SparseMatrix, p: &DenseMatrix) -> DenseMatrix {
    a_norm.dense_matmul(p)
}

/// Reference layer averaging across a propagation stack.
pub fn channel_average(layers: &[DenseMatrix]) -> DenseMatrix {
    assert!(!layers.is_empty(), "average of nothing");
    let mut acc = layers[0].clone();
    for layer in &layers[1..] {
        acc = acc.add(layer);
    }
    acc.scale(1.0 / layers.len() as f64)
}

/// Reference per-user attention fusion: softmax weights over channel
/// vectors and the weighted combination.
pub fn attention_fuse(
    query: &DenseMatrix,
    weight: &DenseMatrix,
    channel_vectors: &[&[f64]],
) -> (Vec<f64>, Vec<f64>) {
    let d = query.rows();
    // a^T W_att as a single d-vector
    let mut aw = vec![0.0; d];
    for (j, slot) in aw.iter_mut().enumerate() {
        for i in 0..d {
            *slot += query.get(i, 0) * weight.get(i, j);
        }
    }
    let logits: Vec<f64> = channel_vectors
        .iter()
        .map(|v| v.iter().zip(&aw).map(|(x, w)| x * w).sum())
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let alpha: Vec<f64> = exps.iter().map(|e| e / total).collect();

    let mut fused = vec![0.0; d];
    for (a, v) in alpha.iter().zip(channel_vectors) {
        for (f, x) in fused.iter_mut().zip(*v) {
            *f += a * x;
        }
    }
    (alpha, fused)
}

/// Predicted preference score: dot product of the final embedding rows.
pub fn predict(p: &DenseMatrix, q: &DenseMatrix, user: usize, item: usize) -> f64 {
    p.row(user).iter().zip(q.row(item)).map(|(a, b)| a * b).sum()
}

/// Run an evaluation forward pass and return the final embedding tables.
pub fn final_embeddings(
    params: &ModelParams,
    ops: &ChannelOperators,
    config: &ForwardConfig,
) -> (DenseMatrix, DenseMatrix) {
    let fwd = forward(params, ops, config, false);
    (
        fwd.tape.value(fwd.user_final).clone(),
        fwd.tape.value(fwd.item_final).clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motifs::{build_channels, build_motifs, ChannelConfig};
    use crate::rng::{substream, Stream};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn toy_instance(
        seed: u64,
        m: usize,
        n: usize,
        d: usize,
    ) -> (ModelParams, ChannelOperators, SparseMatrix) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut social_edges = Vec::new();
        for a in 0..m {
            for b in 0..m {
                if a != b && rng.gen_range(0..100) < 30 {
                    social_edges.push((a, b, 1.0));
                }
            }
        }
        let social = SparseMatrix::from_triplets(m, m, social_edges);
        let mut pairs = Vec::new();
        for u in 0..m {
            for i in 0..n {
                if rng.gen_range(0..100) < 40 {
                    pairs.push((u, i, 1.0));
                }
            }
        }
        let train = SparseMatrix::from_triplets(m, n, pairs);
        let motifs = build_motifs(&social, &train);
        let channels = build_channels(
            &motifs,
            &train,
            &ChannelConfig { popular_item_fraction: 0.0, entry_threshold: 1.0 },
        );
        let ops = ChannelOperators::new(&channels, &train);
        let params = ModelParams::init(m, n, d, 0.05, &mut substream(seed, Stream::Init, 0));
        (params, ops, train)
    }

    #[test]
    fn gate_with_zero_parameters_halves_input() {
        let x = DenseMatrix::from_rows(&[vec![2.0, -4.0], vec![1.0, 3.0]]);
        let w = DenseMatrix::zeros(2, 2);
        let b = DenseMatrix::zeros(1, 2);
        let gated = self_gate(&x, &w, &b);
        assert!(gated.max_abs_diff(&x.scale(0.5)) < 1e-15);
        let zero = DenseMatrix::zeros(2, 2);
        assert_eq!(self_gate(&zero, &w, &b).sum(), 0.0);
    }

    #[test]
    fn gate_matches_elementwise_oracle() {
        let mut rng = StdRng::seed_from_u64(31);
        let x = DenseMatrix::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
        let w = DenseMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let b = DenseMatrix::from_fn(1, 3, |_, _| rng.gen_range(-1.0..1.0));
        let got = self_gate(&x, &w, &b);
        for i in 0..4 {
            for j in 0..3 {
                let mut pre = b.get(0, j);
                for k in 0..3 {
                    pre += x.get(i, k) * w.get(k, j);
                }
                let want = x.get(i, j) / (1.0 + (-pre).exp());
                assert!((got.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_identity_and_swap() {
        let p = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let id = SparseMatrix::identity(2);
        assert_eq!(hypergraph_conv(&id, &p), p);
        // two users connected only to each other exchange embeddings
        let swap = SparseMatrix::from_triplets(2, 2, vec![(0, 1, 1.0), (1, 0, 1.0)]);
        let out = hypergraph_conv(&swap.row_normalize(), &p);
        assert_eq!(out.row(0), p.row(1));
        assert_eq!(out.row(1), p.row(0));
    }

    #[test]
    fn conv_preserves_constant_embeddings() {
        let mut rng = StdRng::seed_from_u64(32);
        let mut triplets = Vec::new();
        for r in 0..10 {
            // at least one neighbor per row so no zero rows exist
            triplets.push((r, (r + 1) % 10, 1.0));
            for c in 0..10 {
                if rng.gen_range(0..100) < 30 {
                    triplets.push((r, c, rng.gen_range(0.5..2.0)));
                }
            }
        }
        let a = SparseMatrix::from_triplets(10, 10, triplets).row_normalize();
        let constant = DenseMatrix::from_fn(10, 3, |_, c| c as f64 + 1.0);
        let out = hypergraph_conv(&a, &constant);
        assert!(out.max_abs_diff(&constant) < 1e-12);
    }

    #[test]
    fn channel_average_basics() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0]]);
        assert_eq!(channel_average(std::slice::from_ref(&a)), a);
        let b = DenseMatrix::from_rows(&[vec![3.0, 6.0]]);
        let mean = channel_average(&[a.clone(), b]);
        assert_eq!(mean.row(0), &[2.0, 4.0]);
        assert_eq!(channel_average(&[a.clone(), a.clone(), a.clone()]), a);
    }

    #[test]
    fn attention_symmetry_and_normalization() {
        let mut rng = StdRng::seed_from_u64(33);
        let q = DenseMatrix::from_fn(4, 1, |_, _| rng.gen_range(-1.0..1.0));
        let w = DenseMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let v = [0.3, -0.2, 0.9, 0.1];
        let (alpha, fused) = attention_fuse(&q, &w, &[&v, &v, &v]);
        for a in &alpha {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
        for (f, x) in fused.iter().zip(&v) {
            assert!((f - x).abs() < 1e-12);
        }
        let (alpha, _) = attention_fuse(&q, &w, &[&[1.0, 0.0, 0.0, 0.0], &v, &[0.5; 4]]);
        let total: f64 = alpha.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(alpha.iter().all(|&a| a > 0.0));
    }

    #[test]
    fn forward_matches_reference_pipeline() {
        let (params, ops, _train) = toy_instance(41, 6, 8, 3);
        let config = ForwardConfig { layers: 2, ..ForwardConfig::default() };
        let fwd = forward(&params, &ops, &config, false);

        // rebuild everything with the standalone reference functions
        let mut stacks = Vec::new();
        for c in Channel::ALL {
            let gate = params.gate(GateKind::for_channel(c));
            let mut stack = vec![self_gate(&params.user_embeddings, &gate.weight, &gate.bias)];
            for l in 0..2 {
                stack.push(hypergraph_conv(ops.channel(c).matrix(), &stack[l]));
            }
            stacks.push(stack);
        }
        let averages: Vec<DenseMatrix> =
            stacks.iter().map(|s| channel_average(s)).collect();

        let m = params.num_users();
        let mut comprehensive = DenseMatrix::zeros(m, 3);
        let mut alpha_all = DenseMatrix::zeros(m, 3);
        for u in 0..m {
            let rows: Vec<&[f64]> = averages.iter().map(|a| a.row(u)).collect();
            let (alpha, fused) =
                attention_fuse(&params.attention_query, &params.attention_weight, &rows);
            for (c, a) in alpha.iter().enumerate() {
                alpha_all.set(u, c, *a);
            }
            for (c, f) in fused.iter().enumerate() {
                comprehensive.set(u, c, *f);
            }
        }
        assert!(fwd.tape.value(fwd.attention).max_abs_diff(&alpha_all) < 1e-12);

        let rate_gate = params.gate(GateKind::Rating);
        let mut rating_stack =
            vec![self_gate(&params.user_embeddings, &rate_gate.weight, &rate_gate.bias)];
        let mut item_stack = vec![params.item_embeddings.clone()];
        for l in 0..2 {
            let mut mixed = rating_stack[l].scale(0.5);
            for (c, stack) in stacks.iter().enumerate() {
                for u in 0..m {
                    for j in 0..3 {
                        let v = mixed.get(u, j) + alpha_all.get(u, c) * stack[l].get(u, j);
                        mixed.set(u, j, v);
                    }
                }
            }
            item_stack.push(ops.user_to_item.matrix().dense_matmul(&mixed));
            rating_stack.push(ops.item_to_user.matrix().dense_matmul(&item_stack[l]));
        }
        let p_final = comprehensive.add(&channel_average(&rating_stack));
        let q_final = channel_average(&item_stack);

        assert!(fwd.tape.value(fwd.user_final).max_abs_diff(&p_final) < 1e-12);
        assert!(fwd.tape.value(fwd.item_final).max_abs_diff(&q_final) < 1e-12);
    }

    #[test]
    fn forward_is_deterministic() {
        let (params, ops, _) = toy_instance(42, 7, 9, 4);
        let config = ForwardConfig::default();
        let a = forward(&params, &ops, &config, true);
        let b = forward(&params, &ops, &config, true);
        assert_eq!(
            a.tape.value(a.user_final).data(),
            b.tape.value(b.user_final).data()
        );
        assert_eq!(
            a.tape.value(a.item_final).data(),
            b.tape.value(b.item_final).data()
        );
    }

    #[test]
    fn channel_mask_limits_attention_columns() {
        let (params, ops, _) = toy_instance(43, 6, 8, 3);
        let config = ForwardConfig {
            layers: 1,
            channel_mask: ChannelMask { social: true, joint: false, purchase: true },
            per_layer_attention: false,
        };
        let fwd = forward(&params, &ops, &config, false);
        assert_eq!(fwd.enabled, vec![Channel::Social, Channel::Purchase]);
        let alpha = fwd.tape.value(fwd.attention);
        assert_eq!(alpha.cols(), 2);
        for u in 0..6 {
            let s: f64 = alpha.row(u).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn param_count_closed_form() {
        let mut rng = StdRng::seed_from_u64(44);
        let p = ModelParams::init(100, 200, 10, 0.05, &mut rng);
        assert_eq!(p.param_count(), 3880);
        let p = ModelParams::init(5, 7, 1, 0.05, &mut rng);
        assert_eq!(p.param_count(), 12 + 16);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = StdRng::seed_from_u64(45);
        let params = ModelParams::init(5, 9, 4, 0.05, &mut rng);
        params.save(&path, 2).unwrap();
        let (loaded, layers) = ModelParams::load(&path).unwrap();
        assert_eq!(layers, 2);
        assert_eq!(loaded, params);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(ModelParams::load(&path), Err(ModelError::BadMagic)));
    }

    #[test]
    fn empty_interactions_leave_zero_rating_propagation() {
        let (params, channels_ops, _) = toy_instance(46, 5, 6, 3);
        let empty = SparseMatrix::zeros(5, 6);
        let ops = ChannelOperators {
            social: Arc::clone(&channels_ops.social),
            joint: Arc::clone(&channels_ops.joint),
            purchase: Arc::clone(&channels_ops.purchase),
            item_to_user: Arc::new(SparseOperator::new(empty.row_normalize())),
            user_to_item: Arc::new(SparseOperator::new(empty.transpose().row_normalize())),
        };
        let fwd = forward(&params, &ops, &ForwardConfig::default(), false);
        // item embeddings never receive user signal: Q averages Q0 with zeros
        let q = fwd.tape.value(fwd.item_final);
        assert!(q.max_abs_diff(&params.item_embeddings.scale(1.0 / 3.0)) < 1e-12);
    }

    #[test]
    fn predict_is_a_dot_product() {
        let p = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.3, 0.4]]);
        let q = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.5]]);
        assert_eq!(predict(&p, &q, 0, 0), 1.0);
        assert_eq!(predict(&p, &q, 0, 1), 0.0);
        assert!((predict(&p, &q, 1, 2) - 0.8).abs() < 1e-15);
    }
}
