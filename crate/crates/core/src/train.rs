//! Joint optimization of the ranking and self-supervised objectives.
//!
//! Each step samples a batch of (user, positive, negative) triples, records
//! one forward pass, appends the pairwise ranking loss, an L2 penalty, and
//! (when beta is nonzero) the hierarchical mutual-information loss, then
//! backpropagates and applies an Adam update. Epoch quality is tracked on a
//! small validation slice carved from the training interactions, and the
//! parameters from the best validation epoch are returned.
//!
//! All stochastic choices (validation split, batch order, negative draws,
//! corruption shuffles) come from labeled substreams of the run seed, so a
//! run is reproducible bit for bit from its config.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, TensorId};
use crate::eval::{evaluate, EvalConfig};
use crate::linalg::{DenseMatrix, SparseMatrix};
use crate::model::{
    final_embeddings, forward, ChannelMask, ChannelOperators, ForwardConfig, ModelParams,
    ParamIds,
};
use crate::motifs::ChannelMatrices;
use crate::rng::{substream, Stream};
use crate::ssl::{
    append_ssl_loss, channel_readouts, draw_permutations, ChannelReadout, Permutations,
    SslVariant,
};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// How many uniform draws to spend looking for an unseen item before
/// giving up on a training pair.
const NEGATIVE_SAMPLING_ATTEMPTS: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTraining,
    #[error("training diverged at epoch {epoch}, step {step}: non-finite {what}")]
    Diverged { epoch: usize, step: usize, what: String },
}

/// Everything that defines a training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub embedding_dim: usize,
    pub layers: usize,
    /// L2 penalty weight.
    pub reg_lambda: f64,
    /// Weight of the self-supervised loss; zero disables it entirely.
    pub ssl_beta: f64,
    pub ssl_variant: SslVariant,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Half-width of the uniform parameter init.
    pub init_scale: f64,
    pub seed: u64,
    /// Fraction of training interactions held out for epoch selection.
    /// Zero trains on everything and returns the final epoch.
    pub val_fraction: f64,
    pub channel_mask: ChannelMask,
    pub per_layer_attention: bool,
    /// Penalize every parameter tensor instead of just the base embedding
    /// rows touched by the batch.
    pub full_table_l2: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 50,
            layers: 2,
            reg_lambda: 0.001,
            ssl_beta: 0.01,
            ssl_variant: SslVariant::Hierarchical,
            batch_size: 2000,
            learning_rate: 0.001,
            epochs: 100,
            init_scale: 0.05,
            seed: 1,
            val_fraction: 0.05,
            channel_mask: ChannelMask::default(),
            per_layer_attention: false,
            full_table_l2: false,
        }
    }
}

impl TrainConfig {
    pub fn forward_config(&self) -> ForwardConfig {
        ForwardConfig {
            layers: self.layers,
            channel_mask: self.channel_mask,
            per_layer_attention: self.per_layer_attention,
        }
    }
}

/// A sampled batch as index columns shared with the tape.
#[derive(Clone)]
pub struct Batch {
    pub users: Arc<Vec<usize>>,
    pub pos: Arc<Vec<usize>>,
    pub neg: Arc<Vec<usize>>,
}

impl Batch {
    pub fn from_triples(triples: &[(usize, usize, usize)]) -> Batch {
        Batch {
            users: Arc::new(triples.iter().map(|t| t.0).collect()),
            pos: Arc::new(triples.iter().map(|t| t.1).collect()),
            neg: Arc::new(triples.iter().map(|t| t.2).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Pair each (user, item) with a uniformly drawn item the user has not
/// interacted with. Pairs whose user has seen the whole catalog (or where
/// the attempt budget runs out) are dropped.
pub fn sample_negatives(
    pairs: &[(usize, usize)],
    train: &SparseMatrix,
    rng: &mut impl Rng,
) -> Vec<(usize, usize, usize)> {
    let n = train.cols();
    let mut out = Vec::with_capacity(pairs.len());
    for &(u, i) in pairs {
        if train.row(u).0.len() >= n {
            continue;
        }
        for _ in 0..NEGATIVE_SAMPLING_ATTEMPTS {
            let j = rng.gen_range(0..n);
            if train.get(u, j) == 0.0 {
                out.push((u, i, j));
                break;
            }
        }
    }
    out
}

/// Loss node ids appended by [`append_total_loss`].
pub struct LossIds {
    pub total: TensorId,
    pub bpr: TensorId,
    pub ssl: Option<TensorId>,
}

/// Append ranking loss + L2 penalty + beta-weighted self-supervision to a
/// recorded forward pass. The ranking term is a sum over the batch of
/// softplus(negative score - positive score); the penalty covers either the
/// batch's base embedding rows or every tensor, per the config.
#[allow(clippy::too_many_arguments)]
pub fn append_total_loss(
    tape: &mut Tape,
    ids: &ParamIds,
    user_final: TensorId,
    item_final: TensorId,
    batch: &Batch,
    readouts: &[ChannelReadout],
    perms: &Permutations,
    config: &TrainConfig,
) -> LossIds {
    assert!(!batch.is_empty(), "cannot build a loss over an empty batch");
    let pu = tape.gather_rows(user_final, Arc::clone(&batch.users));
    let qi = tape.gather_rows(item_final, Arc::clone(&batch.pos));
    let qj = tape.gather_rows(item_final, Arc::clone(&batch.neg));
    let pos_scores = tape.rows_dot(pu, qi);
    let neg_scores = tape.rows_dot(pu, qj);
    let margins = tape.sub(neg_scores, pos_scores);
    let ranked = tape.softplus(margins);
    let bpr = tape.sum(ranked);

    let penalty = if config.full_table_l2 {
        let mut acc: Option<TensorId> = None;
        for &id in &ids.ordered {
            let ss = tape.sum_squares(id);
            acc = Some(match acc {
                Some(a) => tape.add(a, ss),
                None => ss,
            });
        }
        acc.unwrap()
    } else {
        let bu = tape.gather_rows(ids.user_embeddings, Arc::clone(&batch.users));
        let bi = tape.gather_rows(ids.item_embeddings, Arc::clone(&batch.pos));
        let bj = tape.gather_rows(ids.item_embeddings, Arc::clone(&batch.neg));
        let su = tape.sum_squares(bu);
        let si = tape.sum_squares(bi);
        let sj = tape.sum_squares(bj);
        let partial = tape.add(su, si);
        tape.add(partial, sj)
    };
    let reg = tape.scale(penalty, config.reg_lambda);
    let mut total = tape.add(bpr, reg);

    let ssl = if config.ssl_beta != 0.0 {
        let raw = append_ssl_loss(tape, ids, user_final, readouts, perms, config.ssl_variant);
        let weighted = tape.scale(raw, config.ssl_beta);
        total = tape.add(total, weighted);
        Some(raw)
    } else {
        None
    };

    LossIds { total, bpr, ssl }
}

/// Reference ranking loss: sum of softplus(score(u,j) - score(u,i)).
pub fn bpr_loss_dense(
    p: &DenseMatrix,
    q: &DenseMatrix,
    triples: &[(usize, usize, usize)],
) -> f64 {
    let dot = |u: usize, i: usize| -> f64 {
        p.row(u).iter().zip(q.row(i)).map(|(a, b)| a * b).sum()
    };
    triples
        .iter()
        .map(|&(u, i, j)| {
            let x: f64 = dot(u, j) - dot(u, i);
            if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() }
        })
        .sum()
}

/// Gradients for every parameter tensor, in canonical order. Tensors the
/// loss never touched hold zeros.
pub struct GradientSet {
    pub tensors: Vec<DenseMatrix>,
}

/// Backpropagate and collect per-tensor gradients, rejecting non-finite
/// values with the offending tensor's name.
pub fn compute_gradients(
    tape: &Tape,
    ids: &ParamIds,
    loss: TensorId,
) -> Result<GradientSet, String> {
    let grads = tape.backward(loss);
    let names = ModelParams::tensor_names();
    let tensors = ids
        .ordered
        .iter()
        .enumerate()
        .map(|(idx, &id)| {
            let value = tape.value(id);
            let grad = match grads.get(id) {
                Some(g) => g.clone(),
                None => DenseMatrix::zeros(value.rows(), value.cols()),
            };
            if grad.is_finite() {
                Ok(grad)
            } else {
                Err(format!("gradient of {}", names[idx]))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GradientSet { tensors })
}

/// Adam moment buffers.
pub struct AdamState {
    step: u64,
    first: Vec<DenseMatrix>,
    second: Vec<DenseMatrix>,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        AdamState {
            step: 0,
            first: shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect(),
            second: shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect(),
        }
    }

    pub fn for_params(params: &ModelParams) -> Self {
        let shapes: Vec<(usize, usize)> = params
            .tensors()
            .iter()
            .map(|(_, t)| (t.rows(), t.cols()))
            .collect();
        Self::new(&shapes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over aligned tensor lists.
pub fn adam_step(
    tensors: &mut [&mut DenseMatrix],
    grads: &GradientSet,
    state: &mut AdamState,
    lr: f64,
) {
    assert_eq!(tensors.len(), grads.tensors.len(), "tensor/gradient mismatch");
    assert_eq!(tensors.len(), state.first.len(), "tensor/state mismatch");
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for ((tensor, grad), (m, v)) in tensors
        .iter_mut()
        .zip(&grads.tensors)
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        let data = tensor.data_mut();
        let g = grad.data();
        let md = m.data_mut();
        let vd = v.data_mut();
        for idx in 0..data.len() {
            md[idx] = ADAM_BETA1 * md[idx] + (1.0 - ADAM_BETA1) * g[idx];
            vd[idx] = ADAM_BETA2 * vd[idx] + (1.0 - ADAM_BETA2) * g[idx] * g[idx];
            let m_hat = md[idx] / bc1;
            let v_hat = vd[idx] / bc2;
            data[idx] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Loss values observed at one epoch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Per-step means of the batch-summed losses.
    pub mean_total: f64,
    pub mean_bpr: f64,
    pub mean_ssl: f64,
    pub val_ndcg: Option<f64>,
    /// Wall-clock seconds spent on the epoch, validation included.
    #[serde(default)]
    pub wall_secs: f64,
}

/// A finished training run.
pub struct TrainOutcome {
    /// Parameters from the best validation epoch (or the last epoch when no
    /// validation slice was requested).
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_ndcg: Option<f64>,
}

/// Hold out a fraction of interactions for epoch selection without ever
/// taking a user's last training item.
#[allow(clippy::type_complexity)]
fn split_validation(
    pairs: &[(usize, usize)],
    num_users: usize,
    fraction: f64,
    seed: u64,
) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    if fraction <= 0.0 {
        return (pairs.to_vec(), Vec::new());
    }
    let target = (pairs.len() as f64 * fraction).floor() as usize;
    let mut remaining = vec![0usize; num_users];
    for &(u, _) in pairs {
        remaining[u] += 1;
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    // index well clear of the per-user streams used by the k-fold splitter
    order.shuffle(&mut substream(seed, Stream::Split, u64::MAX));
    let mut in_val = vec![false; pairs.len()];
    let mut taken = 0;
    for &idx in &order {
        if taken == target {
            break;
        }
        let (u, _) = pairs[idx];
        if remaining[u] > 1 {
            in_val[idx] = true;
            remaining[u] -= 1;
            taken += 1;
        }
    }
    let mut train = Vec::with_capacity(pairs.len() - taken);
    let mut val = Vec::with_capacity(taken);
    for (idx, &pair) in pairs.iter().enumerate() {
        if in_val[idx] {
            val.push(pair);
        } else {
            train.push(pair);
        }
    }
    (train, val)
}

/// Run the full optimization loop.
///
/// `train_matrix` is the fold's training interactions; the motif channels
/// must have been built from the same fold. The interaction graph keeps all
/// training pairs (including the validation slice) so the propagation
/// structure is identical during training, validation scoring, and final
/// evaluation; only the ranking loss and negative sampling see the slice
/// as held out.
pub fn train(
    channels: &ChannelMatrices,
    train_matrix: &SparseMatrix,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    assert!(config.layers >= 1, "at least one propagation layer");
    assert!(config.batch_size >= 1, "batch size must be positive");
    assert!(config.epochs >= 1, "need at least one epoch");
    assert!(config.embedding_dim >= 1, "embedding dimension must be positive");

    let m = train_matrix.rows();
    let n = train_matrix.cols();
    let all_pairs: Vec<(usize, usize)> =
        train_matrix.iter().map(|(u, i, _)| (u, i)).collect();
    if all_pairs.is_empty() {
        return Err(TrainError::EmptyTraining);
    }

    let (train_pairs, val_pairs) =
        split_validation(&all_pairs, m, config.val_fraction, config.seed);
    // exclusion matrix for validation ranking: training pairs only, so the
    // held-out items stay rankable
    let val_exclusions = if val_pairs.is_empty() {
        None
    } else {
        Some(SparseMatrix::from_triplets(
            m,
            n,
            train_pairs.iter().map(|&(u, i)| (u, i, 1.0)),
        ))
    };
    let val_eval = EvalConfig { k_list: vec![10], ..EvalConfig::default() };

    let ops = ChannelOperators::new(channels, train_matrix);
    let fwd_config = config.forward_config();
    let readouts = if config.ssl_beta != 0.0 {
        channel_readouts(&ops, config.channel_mask)
    } else {
        Vec::new()
    };

    let mut params = ModelParams::init(
        m,
        n,
        config.embedding_dim,
        config.init_scale,
        &mut substream(config.seed, Stream::Init, 0),
    );
    let mut adam = AdamState::for_params(&params);
    let steps_per_epoch = train_pairs.len().div_ceil(config.batch_size);

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 0..config.epochs {
        let epoch_started = Instant::now();
        let mut sampler = substream(config.seed, Stream::Sampling, epoch as u64);
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        order.shuffle(&mut sampler);

        let mut total_sum = 0.0;
        let mut bpr_sum = 0.0;
        let mut ssl_sum = 0.0;
        let mut steps_run = 0usize;

        for step in 0..steps_per_epoch {
            let lo = step * config.batch_size;
            let hi = (lo + config.batch_size).min(order.len());
            let slice: Vec<(usize, usize)> =
                order[lo..hi].iter().map(|&idx| train_pairs[idx]).collect();
            let triples = sample_negatives(&slice, train_matrix, &mut sampler);
            if triples.is_empty() {
                continue;
            }
            let batch = Batch::from_triples(&triples);
            let perms = if config.ssl_beta != 0.0 {
                draw_permutations(
                    m,
                    config.embedding_dim,
                    &mut substream(
                        config.seed,
                        Stream::Corruption,
                        (epoch * steps_per_epoch + step) as u64,
                    ),
                )
            } else {
                Permutations::identity(m, config.embedding_dim)
            };

            let mut fwd = forward(&params, &ops, &fwd_config, true);
            let losses = append_total_loss(
                &mut fwd.tape,
                &fwd.params,
                fwd.user_final,
                fwd.item_final,
                &batch,
                &readouts,
                &perms,
                config,
            );
            let total_value = fwd.tape.scalar(losses.total);
            if !total_value.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    what: "total loss".into(),
                });
            }
            let grads = compute_gradients(&fwd.tape, &fwd.params, losses.total)
                .map_err(|what| TrainError::Diverged { epoch, step, what })?;
            adam_step(
                &mut params.tensors_mut(),
                &grads,
                &mut adam,
                config.learning_rate,
            );
            if !params.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    what: "parameters".into(),
                });
            }

            total_sum += total_value;
            bpr_sum += fwd.tape.scalar(losses.bpr);
            if let Some(ssl) = losses.ssl {
                ssl_sum += fwd.tape.scalar(ssl);
            }
            steps_run += 1;
        }

        let denom = steps_run.max(1) as f64;
        let val_ndcg = match &val_exclusions {
            Some(exclusions) => {
                let (p, q) = final_embeddings(&params, &ops, &fwd_config);
                let report = evaluate(&p, &q, exclusions, &val_pairs, &val_eval)
                    .expect("validation slice is nonempty by construction");
                Some(report.metrics[0].ndcg)
            }
            None => None,
        };
        history.push(EpochRecord {
            epoch,
            mean_total: total_sum / denom,
            mean_bpr: bpr_sum / denom,
            mean_ssl: ssl_sum / denom,
            val_ndcg,
            wall_secs: epoch_started.elapsed().as_secs_f64(),
        });
        if let Some(v) = val_ndcg {
            let improved = best.as_ref().map(|(b, _, _)| v > *b).unwrap_or(true);
            if improved {
                best = Some((v, epoch, params.clone()));
            }
        }
    }

    let outcome = match best {
        Some((v, epoch, snapshot)) => TrainOutcome {
            params: snapshot,
            history,
            best_epoch: epoch,
            best_val_ndcg: Some(v),
        },
        None => TrainOutcome {
            params,
            history,
            best_epoch: config.epochs - 1,
            best_val_ndcg: None,
        },
    };
    Ok(outcome)
}
