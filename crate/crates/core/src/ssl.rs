//! Hierarchical mutual-information self-supervision.
//!
//! Each enabled channel contributes an auxiliary signal built from three
//! granularities of the final user embeddings: the per-user gated view, the
//! sub-hypergraph readout (a connection-weighted mean of the user's channel
//! neighborhood), and the whole-channel readout (a plain mean over users the
//! channel actually touches). Informativeness is scored with dot products
//! and trained with a pairwise objective against a corrupted view obtained
//! by shuffling rows and columns of the gated embeddings.
//!
//! Users with no connections in a channel have an empty neighborhood and a
//! zero readout, so they are masked out of that channel's loss.

use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{SparseOperator, Tape, TensorId};
use crate::linalg::{DenseMatrix, SparseMatrix};
use crate::model::{apply_gate, Channel, ChannelMask, ChannelOperators, GateKind, ParamIds};

/// Which mutual-information terms make up the auxiliary loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslVariant {
    /// Node-to-neighborhood and neighborhood-to-graph ranking terms.
    Hierarchical,
    /// Node-to-neighborhood term only.
    LocalOnly,
    /// Neighborhood-to-graph term only.
    GlobalOnly,
    /// Both levels scored with the binary discriminator objective
    /// (softplus(-positive) + softplus(negative)) instead of ranking.
    DgiStyle,
}

impl SslVariant {
    pub const ALL: [SslVariant; 4] = [
        SslVariant::Hierarchical,
        SslVariant::LocalOnly,
        SslVariant::GlobalOnly,
        SslVariant::DgiStyle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SslVariant::Hierarchical => "hierarchical",
            SslVariant::LocalOnly => "local_only",
            SslVariant::GlobalOnly => "global_only",
            SslVariant::DgiStyle => "dgi_style",
        }
    }

    fn local_term(self) -> bool {
        !matches!(self, SslVariant::GlobalOnly)
    }

    fn global_term(self) -> bool {
        !matches!(self, SslVariant::LocalOnly)
    }
}

impl FromStr for SslVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown ssl variant {s:?}"))
    }
}

/// Readout machinery for one channel: the normalized adjacency used as a
/// neighborhood-mean operator, a graph-mean operator over the channel's
/// active users, and the matching user mask.
pub struct ChannelReadout {
    pub channel: Channel,
    pub neighborhood: Arc<SparseOperator>,
    pub graph_mean: Arc<SparseOperator>,
    pub active_mask: DenseMatrix,
    pub active_count: usize,
}

impl ChannelReadout {
    pub fn new(channel: Channel, neighborhood: Arc<SparseOperator>) -> Self {
        let m = neighborhood.matrix().rows();
        let active: Vec<usize> = (0..m)
            .filter(|&u| !neighborhood.matrix().row(u).0.is_empty())
            .collect();
        let active_count = active.len();
        let weight = if active_count > 0 { 1.0 / active_count as f64 } else { 0.0 };
        let graph_mean = SparseMatrix::from_triplets(
            1,
            m,
            active.iter().map(|&u| (0, u, weight)),
        );
        let mut active_mask = DenseMatrix::zeros(m, 1);
        for &u in &active {
            active_mask.set(u, 0, 1.0);
        }
        ChannelReadout {
            channel,
            neighborhood,
            graph_mean: Arc::new(SparseOperator::new(graph_mean)),
            active_mask,
            active_count,
        }
    }
}

/// Build readouts for every channel the mask enables, sharing the forward
/// pass's normalized adjacency operators.
pub fn channel_readouts(ops: &ChannelOperators, mask: ChannelMask) -> Vec<ChannelReadout> {
    mask.enabled()
        .into_iter()
        .map(|c| ChannelReadout::new(c, Arc::clone(ops.channel(c))))
        .collect()
}

/// A row and column shuffle shared by every channel within one step.
#[derive(Clone)]
pub struct Permutations {
    pub rows: Arc<Vec<usize>>,
    pub cols: Arc<Vec<usize>>,
}

impl Permutations {
    pub fn identity(rows: usize, cols: usize) -> Self {
        Permutations {
            rows: Arc::new((0..rows).collect()),
            cols: Arc::new((0..cols).collect()),
        }
    }
}

/// Draw uniform row and column permutations for embedding corruption.
pub fn draw_permutations(rows: usize, cols: usize, rng: &mut impl Rng) -> Permutations {
    let mut r: Vec<usize> = (0..rows).collect();
    let mut c: Vec<usize> = (0..cols).collect();
    r.shuffle(rng);
    c.shuffle(rng);
    Permutations { rows: Arc::new(r), cols: Arc::new(c) }
}

/// Reference corruption: y[i][j] = x[rows[i]][cols[j]].
pub fn corrupt(x: &DenseMatrix, rows: &[usize], cols: &[usize]) -> DenseMatrix {
    DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| x.get(rows[i], cols[j]))
}

/// Append the auxiliary loss to a recorded forward pass and return its
/// scalar id. `user_final` is the forward pass's final user embedding
/// tensor; `readouts` must cover exactly the channels that pass enabled.
/// Channels with no active users are skipped.
pub fn append_ssl_loss(
    tape: &mut Tape,
    params: &ParamIds,
    user_final: TensorId,
    readouts: &[ChannelReadout],
    perms: &Permutations,
    variant: SslVariant,
) -> TensorId {
    assert!(!readouts.is_empty(), "self-supervision needs at least one channel");
    let m = tape.value(user_final).rows();
    assert_eq!(perms.rows.len(), m, "row permutation length mismatch");
    assert_eq!(
        perms.cols.len(),
        tape.value(user_final).cols(),
        "column permutation length mismatch"
    );

    let mut total: Option<TensorId> = None;
    for readout in readouts {
        if readout.active_count == 0 {
            continue;
        }
        let gate = params.gate(GateKind::for_ssl_channel(readout.channel));
        let view = apply_gate(tape, user_final, gate);
        let corrupted = tape.permute(view, Arc::clone(&perms.rows), Arc::clone(&perms.cols));
        let neighborhood = tape.sp_matmul(&readout.neighborhood, view);
        let corrupted_neighborhood = tape.sp_matmul(&readout.neighborhood, corrupted);
        let graph = tape.sp_matmul(&readout.graph_mean, neighborhood);
        let graph_t = tape.transpose(graph);
        let mask = tape.constant(readout.active_mask.clone());

        let mut channel_loss: Option<TensorId> = None;
        let mut add_term = |tape: &mut Tape, pos: TensorId, neg: TensorId| {
            let per_user = match variant {
                SslVariant::DgiStyle => {
                    let neg_pos = tape.scale(pos, -1.0);
                    let a = tape.softplus(neg_pos);
                    let b = tape.softplus(neg);
                    tape.add(a, b)
                }
                _ => {
                    let margin = tape.sub(neg, pos);
                    tape.softplus(margin)
                }
            };
            let masked = tape.hadamard(per_user, mask);
            let summed = tape.sum(masked);
            channel_loss = Some(match channel_loss {
                Some(acc) => tape.add(acc, summed),
                None => summed,
            });
        };

        if variant.local_term() {
            let pos = tape.rows_dot(view, neighborhood);
            let neg = tape.rows_dot(corrupted, neighborhood);
            add_term(tape, pos, neg);
        }
        if variant.global_term() {
            let pos = tape.matmul(neighborhood, graph_t);
            let neg = tape.matmul(corrupted_neighborhood, graph_t);
            add_term(tape, pos, neg);
        }

        let channel_loss = channel_loss.unwrap();
        total = Some(match total {
            Some(acc) => tape.add(acc, channel_loss),
            None => channel_loss,
        });
    }
    total.unwrap_or_else(|| tape.constant(DenseMatrix::zeros(1, 1)))
}
