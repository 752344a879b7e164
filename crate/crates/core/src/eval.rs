//! Top-K ranking evaluation.
//!
//! Scores every candidate item for each test user as the dot product of
//! final embeddings, ranks the catalog with training positives excluded,
//! and reports Precision@K, Recall@K, and NDCG@K averaged over the users
//! that have test interactions. Ties rank by ascending item index so runs
//! are reproducible bit for bit. Per-user metrics are accumulated with
//! compensated summation so the reported means do not depend on user
//! iteration order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::linalg::{DenseMatrix, SparseMatrix};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("test set is empty; nothing to evaluate")]
    EmptyTest,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Evaluation knobs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Cutoffs to report, e.g. [5, 10, 20].
    pub k_list: Vec<usize>,
    /// Users with fewer training interactions than this are also reported
    /// separately as the cold-start segment.
    pub cold_start_threshold: usize,
    /// Rank training positives alongside unseen items instead of masking
    /// them out. Off for standard protocol.
    pub include_train_items: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_list: vec![10],
            cold_start_threshold: 20,
            include_train_items: false,
        }
    }
}

/// Metrics at one cutoff.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
}

/// Evaluation of a single train/test split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldReport {
    pub users_evaluated: usize,
    pub metrics: Vec<MetricRow>,
    pub cold_start_users: usize,
    pub cold_start: Vec<MetricRow>,
}

/// Cross-fold aggregate: per-fold reports plus their unweighted mean.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub folds: Vec<FoldReport>,
    pub mean: Vec<MetricRow>,
    pub cold_start_mean: Vec<MetricRow>,
}

// Neumaier's compensated summation: like Kahan's but the correction term
// also tracks error when the addend exceeds the running sum.
struct KahanSum {
    sum: f64,
    compensation: f64,
}

impl KahanSum {
    fn new() -> Self {
        KahanSum { sum: 0.0, compensation: 0.0 }
    }

    fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

#[derive(PartialEq)]
struct Candidate {
    score: f64,
    item: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // higher score wins; equal scores prefer the lower item index
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.item.cmp(&self.item))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Rank the whole catalog: descending score, ties by ascending item index,
/// excluded items dropped. The reference ordering for [`top_k`].
pub fn rank_items_full(scores: &[f64], excluded: &[bool]) -> Vec<usize> {
    assert_eq!(scores.len(), excluded.len());
    let mut items: Vec<usize> = (0..scores.len()).filter(|&i| !excluded[i]).collect();
    items.sort_by(|&a, &b| {
        scores[b].total_cmp(&scores[a]).then_with(|| a.cmp(&b))
    });
    items
}

/// The first k entries of [`rank_items_full`] without sorting the catalog.
pub fn top_k(scores: &[f64], excluded: &[bool], k: usize) -> Vec<usize> {
    assert_eq!(scores.len(), excluded.len());
    if k == 0 {
        return Vec::new();
    }
    let mut heap: BinaryHeap<Reverse<Candidate>> = BinaryHeap::with_capacity(k + 1);
    for (item, &score) in scores.iter().enumerate() {
        if excluded[item] {
            continue;
        }
        let cand = Candidate { score, item };
        if heap.len() < k {
            heap.push(Reverse(cand));
        } else if cand > heap.peek().unwrap().0 {
            heap.pop();
            heap.push(Reverse(cand));
        }
    }
    let mut out: Vec<Candidate> = heap.into_iter().map(|r| r.0).collect();
    out.sort_by(|a, b| b.cmp(a));
    out.into_iter().map(|c| c.item).collect()
}

/// Discounted cumulative gain of a binary-relevance ranked prefix.
fn dcg(ranked: &[usize], relevant: &[usize]) -> f64 {
    ranked
        .iter()
        .enumerate()
        .filter(|(_, item)| relevant.binary_search(item).is_ok())
        .map(|(pos, _)| 1.0 / ((pos + 2) as f64).log2())
        .sum()
}

/// Ideal DCG for `hits` relevant items at cutoff `k`.
fn ideal_dcg(hits: usize, k: usize) -> f64 {
    (0..hits.min(k)).map(|p| 1.0 / ((p + 2) as f64).log2()).sum()
}

struct UserMetrics {
    precision: f64,
    recall: f64,
    ndcg: f64,
}

fn user_metrics(ranked: &[usize], relevant: &[usize], k: usize) -> UserMetrics {
    let prefix = &ranked[..ranked.len().min(k)];
    let hits = prefix
        .iter()
        .filter(|item| relevant.binary_search(item).is_ok())
        .count();
    UserMetrics {
        precision: hits as f64 / k as f64,
        recall: hits as f64 / relevant.len() as f64,
        ndcg: if relevant.is_empty() {
            0.0
        } else {
            dcg(prefix, relevant) / ideal_dcg(relevant.len(), k)
        },
    }
}

/// Evaluate final embeddings against held-out interactions.
///
/// `train` supplies both the per-user exclusion set and the interaction
/// counts that define the cold-start segment. Only users with at least one
/// test interaction enter the averages.
pub fn evaluate(
    user_final: &DenseMatrix,
    item_final: &DenseMatrix,
    train: &SparseMatrix,
    test_pairs: &[(usize, usize)],
    config: &EvalConfig,
) -> Result<FoldReport, EvalError> {
    if test_pairs.is_empty() {
        return Err(EvalError::EmptyTest);
    }
    let m = user_final.rows();
    let n = item_final.rows();
    if user_final.cols() != item_final.cols() {
        return Err(EvalError::ShapeMismatch(format!(
            "embedding dims differ: {} vs {}",
            user_final.cols(),
            item_final.cols()
        )));
    }
    if train.rows() != m || train.cols() != n {
        return Err(EvalError::ShapeMismatch(format!(
            "interactions are {}x{} but embeddings imply {}x{}",
            train.rows(),
            train.cols(),
            m,
            n
        )));
    }
    assert!(!config.k_list.is_empty(), "no cutoffs requested");
    assert!(config.k_list.iter().all(|&k| k > 0), "cutoffs must be positive");

    let mut test_items: Vec<Vec<usize>> = vec![Vec::new(); m];
    for &(u, i) in test_pairs {
        if u >= m || i >= n {
            return Err(EvalError::ShapeMismatch(format!(
                "test pair ({u}, {i}) outside {m}x{n}"
            )));
        }
        test_items[u].push(i);
    }
    for items in &mut test_items {
        items.sort_unstable();
        items.dedup();
    }

    let max_k = *config.k_list.iter().max().unwrap();
    let users: Vec<usize> = (0..m).filter(|&u| !test_items[u].is_empty()).collect();

    // per-user metric rows, computed in parallel, reduced in index order
    let per_user: Vec<(usize, Vec<UserMetrics>)> = users
        .par_iter()
        .map(|&u| {
            let mut scores = vec![0.0f64; n];
            let pu = user_final.row(u);
            for (i, slot) in scores.iter_mut().enumerate() {
                *slot = pu.iter().zip(item_final.row(i)).map(|(a, b)| a * b).sum();
            }
            let mut excluded = vec![false; n];
            if !config.include_train_items {
                let (cols, _) = train.row(u);
                for &i in cols {
                    excluded[i] = true;
                }
            }
            let ranked = top_k(&scores, &excluded, max_k);
            let rows = config
                .k_list
                .iter()
                .map(|&k| user_metrics(&ranked, &test_items[u], k))
                .collect();
            (u, rows)
        })
        .collect();

    let cold: Vec<bool> = (0..m)
        .map(|u| train.row(u).0.len() < config.cold_start_threshold)
        .collect();

    let reduce = |keep: &dyn Fn(usize) -> bool| -> (usize, Vec<MetricRow>) {
        let mut count = 0usize;
        let mut sums: Vec<[KahanSum; 3]> = config
            .k_list
            .iter()
            .map(|_| [KahanSum::new(), KahanSum::new(), KahanSum::new()])
            .collect();
        for (u, rows) in &per_user {
            if !keep(*u) {
                continue;
            }
            count += 1;
            for (slot, row) in sums.iter_mut().zip(rows) {
                slot[0].add(row.precision);
                slot[1].add(row.recall);
                slot[2].add(row.ndcg);
            }
        }
        let denom = count.max(1) as f64;
        let rows = config
            .k_list
            .iter()
            .zip(&sums)
            .map(|(&k, slot)| MetricRow {
                k,
                precision: slot[0].value() / denom,
                recall: slot[1].value() / denom,
                ndcg: slot[2].value() / denom,
            })
            .collect();
        (count, rows)
    };

    let (users_evaluated, metrics) = reduce(&|_| true);
    let (cold_start_users, cold_start) = reduce(&|u| cold[u]);

    Ok(FoldReport { users_evaluated, metrics, cold_start_users, cold_start })
}

/// Average fold reports metric-by-metric (unweighted across folds).
pub fn mean_report(folds: &[FoldReport]) -> EvalReport {
    assert!(!folds.is_empty(), "no folds to aggregate");
    let average = |extract: &dyn Fn(&FoldReport) -> &Vec<MetricRow>| -> Vec<MetricRow> {
        let first = extract(&folds[0]);
        (0..first.len())
            .map(|idx| {
                let k = first[idx].k;
                let mut p = KahanSum::new();
                let mut r = KahanSum::new();
                let mut n = KahanSum::new();
                for fold in folds {
                    let row = &extract(fold)[idx];
                    assert_eq!(row.k, k, "cutoff lists differ across folds");
                    p.add(row.precision);
                    r.add(row.recall);
                    n.add(row.ndcg);
                }
                let denom = folds.len() as f64;
                MetricRow {
                    k,
                    precision: p.value() / denom,
                    recall: r.value() / denom,
                    ndcg: n.value() / denom,
                }
            })
            .collect()
    };
    EvalReport {
        folds: folds.to_vec(),
        mean: average(&|f| &f.metrics),
        cold_start_mean: average(&|f| &f.cold_start),
    }
}
