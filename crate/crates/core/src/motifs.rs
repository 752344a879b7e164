//! Triadic motif machinery.
//!
//! The social graph S splits into bidirectional edges B = S⊙Sᵀ and one-way
//! edges U = S − B. Ten motif-induced adjacency matrices are built from B, U,
//! and the interaction matrix R by sparse products; entry (i, j) of the k-th
//! matrix counts the instances of motif k containing both i and j.
//!
//! Motifs 1..7 classify the closed social triangles (every directed triangle
//! falls under exactly one of them), 8 and 9 are friend pairs sharing an
//! item, and 10 is any co-purchase pair. Three channel matrices are derived
//! from the ten: social (1..7), joint (8..9), and purchase (10 with popular
//! items filtered, small entries dropped, and joint overlaps removed).
//!
//! Two independent oracles live here for testing: a cubic-time enumerator
//! that classifies raw node triples, and hyperedge incidence products.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::SparseMatrix;

/// Bidirectional/unidirectional split plus the ten motif adjacencies
/// (index k-1 holds motif k).
#[derive(Clone, Debug)]
pub struct MotifMatrices {
    pub bidirectional: SparseMatrix,
    pub unidirectional: SparseMatrix,
    adjacency: Vec<SparseMatrix>,
}

impl MotifMatrices {
    /// Adjacency matrix of motif `k` (1-based, 1..=10).
    pub fn adjacency(&self, k: usize) -> &SparseMatrix {
        assert!((1..=10).contains(&k), "motif index must be 1..=10, got {k}");
        &self.adjacency[k - 1]
    }
}

/// Split a binary directed social matrix into mutual and one-way parts.
///
/// B = S⊙Sᵀ keeps both directions of every reciprocated edge; U = S − B
/// keeps the rest. B + U == S exactly.
pub fn split_social(s: &SparseMatrix) -> (SparseMatrix, SparseMatrix) {
    let b = s.hadamard(&s.transpose());
    let u = s.sub(&b);
    (b, u)
}

/// Motif-induced adjacency matrix for motif `k`.
///
/// Symmetric motifs (4, 6, 7, 8, 10) use A = C directly; the rest use
/// A = C + Cᵀ. Motif 10 is the co-purchase count R·Rᵀ with the diagonal
/// removed; no popularity filtering happens here (see [`build_channels`]).
pub fn motif_adjacency(
    k: usize,
    b: &SparseMatrix,
    u: &SparseMatrix,
    r: &SparseMatrix,
) -> SparseMatrix {
    let ut = u.transpose();
    let c = match k {
        1 => u.matmul(u).hadamard(&ut),
        2 => b
            .matmul(u)
            .hadamard(&ut)
            .add(&u.matmul(b).hadamard(&ut))
            .add(&u.matmul(u).hadamard(b)),
        3 => b
            .matmul(b)
            .hadamard(u)
            .add(&b.matmul(u).hadamard(b))
            .add(&u.matmul(b).hadamard(b)),
        4 => b.matmul(b).hadamard(b),
        5 => u
            .matmul(u)
            .hadamard(u)
            .add(&u.matmul(&ut).hadamard(u))
            .add(&ut.matmul(u).hadamard(u)),
        6 => u
            .matmul(b)
            .hadamard(u)
            .add(&b.matmul(&ut).hadamard(&ut))
            .add(&ut.matmul(u).hadamard(b)),
        7 => ut
            .matmul(b)
            .hadamard(&ut)
            .add(&b.matmul(u).hadamard(u))
            .add(&u.matmul(&ut).hadamard(b)),
        8 => r.matmul(&r.transpose()).hadamard(b),
        9 => r.matmul(&r.transpose()).hadamard(u),
        10 => r.matmul(&r.transpose()).zero_diagonal(),
        _ => panic!("motif index must be 1..=10, got {k}"),
    };
    match k {
        4 | 6 | 7 | 8 | 10 => c,
        _ => c.add(&c.transpose()),
    }
}

/// Build all ten motif adjacencies from the social and interaction matrices.
pub fn build_motifs(s: &SparseMatrix, r: &SparseMatrix) -> MotifMatrices {
    assert_eq!(s.rows(), s.cols(), "social matrix must be square");
    assert_eq!(s.rows(), r.rows(), "social and interaction row counts differ");
    let (b, u) = split_social(s);
    let adjacency: Vec<SparseMatrix> = (1..=10)
        .into_par_iter()
        .map(|k| motif_adjacency(k, &b, &u, r))
        .collect();
    MotifMatrices {
        bidirectional: b,
        unidirectional: u,
        adjacency,
    }
}

/// Which of motifs 1..7 a closed social triangle {a, b, c} instantiates,
/// or None if any pair is unconnected. Edge patterns are read off the raw
/// directed matrix, making this independent of the product formulas.
fn classify_social_triangle(s: &SparseMatrix, a: usize, b: usize, c: usize) -> Option<usize> {
    let edge = |i: usize, j: usize| s.get(i, j) != 0.0;
    let pairs = [(a, b), (b, c), (a, c)];
    if !pairs.iter().all(|&(i, j)| edge(i, j) || edge(j, i)) {
        return None;
    }
    let bi: Vec<bool> = pairs.iter().map(|&(i, j)| edge(i, j) && edge(j, i)).collect();
    match bi.iter().filter(|&&x| x).count() {
        3 => Some(4),
        2 => Some(3),
        1 => {
            // One mutual pair; the third node carries two one-way edges.
            let (x, y, z) = match bi.iter().position(|&x| x).unwrap() {
                0 => (a, b, c),
                1 => (b, c, a),
                _ => (a, c, b),
            };
            if edge(z, x) && edge(z, y) {
                Some(6)
            } else if edge(x, z) && edge(y, z) {
                Some(7)
            } else {
                Some(2)
            }
        }
        _ => {
            // All one-way: a cycle has per-node out-degree 1, otherwise one
            // node dominates the other two.
            let out = |i: usize, j: usize, k: usize| {
                usize::from(edge(i, j)) + usize::from(edge(i, k))
            };
            if out(a, b, c) == 1 && out(b, a, c) == 1 && out(c, a, b) == 1 {
                Some(1)
            } else {
                Some(5)
            }
        }
    }
}

/// Definitional motif count: the number of instances of motif `k` that
/// contain both `i` and `j`, found by exhaustive enumeration.
///
/// Intended for small graphs in tests; quadratic in users for motifs 8..10
/// and cubic for 1..7.
pub fn brute_force_motif_count(
    k: usize,
    s: &SparseMatrix,
    r: &SparseMatrix,
    i: usize,
    j: usize,
) -> f64 {
    brute_force_adjacency(k, s, r).get(i, j)
}

/// Full brute-force adjacency matrix for motif `k`; see
/// [`brute_force_motif_count`].
pub fn brute_force_adjacency(k: usize, s: &SparseMatrix, r: &SparseMatrix) -> SparseMatrix {
    assert!((1..=10).contains(&k), "motif index must be 1..=10, got {k}");
    let m = s.rows();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut record_pair = |i: usize, j: usize, count: f64| {
        triplets.push((i, j, count));
        triplets.push((j, i, count));
    };

    if k <= 7 {
        for a in 0..m {
            for b in a + 1..m {
                for c in b + 1..m {
                    if classify_social_triangle(s, a, b, c) == Some(k) {
                        record_pair(a, b, 1.0);
                        record_pair(a, c, 1.0);
                        record_pair(b, c, 1.0);
                    }
                }
            }
        }
    } else {
        for a in 0..m {
            for b in a + 1..m {
                let shared = shared_item_count(r, a, b);
                if shared == 0 {
                    continue;
                }
                let forward = s.get(a, b) != 0.0;
                let backward = s.get(b, a) != 0.0;
                let wanted = match k {
                    8 => forward && backward,
                    9 => forward != backward,
                    _ => true,
                };
                if wanted {
                    record_pair(a, b, shared as f64);
                }
            }
        }
    }
    SparseMatrix::from_triplets(m, m, triplets)
}

fn shared_item_count(r: &SparseMatrix, a: usize, b: usize) -> usize {
    let (ia, _) = r.row(a);
    let (ib, _) = r.row(b);
    let (mut x, mut y, mut n) = (0, 0, 0);
    while x < ia.len() && y < ib.len() {
        match ia[x].cmp(&ib[y]) {
            std::cmp::Ordering::Less => x += 1,
            std::cmp::Ordering::Greater => y += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                x += 1;
                y += 1;
            }
        }
    }
    n
}

/// All closed social triangles as sorted user triples, enumerated from
/// undirected neighbor lists.
///
/// Each triple is one hyperedge of the social hypergraph regardless of edge
/// directions, so the returned length is the graph's social-triangle census.
pub fn enumerate_social_triangles(s: &SparseMatrix) -> Vec<[usize; 3]> {
    let m = s.rows();
    let undirected = s.add(&s.transpose());
    let neighbors: Vec<&[usize]> = (0..m).map(|v| undirected.row(v).0).collect();
    let mut triangles = Vec::new();
    for a in 0..m {
        let na = neighbors[a];
        let higher: Vec<usize> = na.iter().copied().filter(|&v| v > a).collect();
        for (x, &b) in higher.iter().enumerate() {
            for &c in &higher[x + 1..] {
                if neighbors[b].binary_search(&c).is_ok() {
                    triangles.push([a, b, c]);
                }
            }
        }
    }
    triangles
}

/// Joint-motif hyperedges: one {u, v} pair per (friend pair, shared item)
/// instance, with multiplicity.
pub fn enumerate_joint_hyperedges(s: &SparseMatrix, r: &SparseMatrix) -> Vec<[usize; 2]> {
    enumerate_pair_hyperedges(s, r, true)
}

/// Co-purchase hyperedges: one {u, v} pair per shared item, for every user
/// pair regardless of social connection.
pub fn enumerate_copurchase_hyperedges(s: &SparseMatrix, r: &SparseMatrix) -> Vec<[usize; 2]> {
    enumerate_pair_hyperedges(s, r, false)
}

fn enumerate_pair_hyperedges(
    s: &SparseMatrix,
    r: &SparseMatrix,
    friends_only: bool,
) -> Vec<[usize; 2]> {
    let m = r.rows();
    let mut edges = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            if friends_only && s.get(a, b) == 0.0 && s.get(b, a) == 0.0 {
                continue;
            }
            for _ in 0..shared_item_count(r, a, b) {
                edges.push([a, b]);
            }
        }
    }
    edges
}

/// H·Hᵀ for an explicit hyperedge list over `m` vertices: entry (i, j) is
/// the number of hyperedges containing both.
pub fn incidence_product(hyperedges: &[Vec<usize>], m: usize) -> SparseMatrix {
    let mut triplets = Vec::new();
    for edge in hyperedges {
        for &i in edge {
            for &j in edge {
                triplets.push((i, j, 1.0));
            }
        }
    }
    SparseMatrix::from_triplets(m, m, triplets)
}

/// Distinct motif instances per motif index, recovered from the adjacency
/// sums.
///
/// A closed triangle (motifs 1..=7) lands on exactly one motif and
/// contributes 6 to that matrix's total: three unordered node pairs, each
/// counted in both directions. A pair instance (motifs 8..=10, two users
/// sharing one item) contributes 2. The sums are exact small integers, so
/// the division is checked rather than rounded.
pub fn motif_instance_counts(motifs: &MotifMatrices) -> [u64; 10] {
    let mut counts = [0u64; 10];
    for k in 1..=10 {
        let total = motifs.adjacency(k).sum();
        let per_instance = if k <= 7 { 6.0 } else { 2.0 };
        let instances = total / per_instance;
        assert!(
            instances.fract() == 0.0,
            "motif {k} adjacency sum {total} is not a multiple of {per_instance}"
        );
        counts[k - 1] = instances as u64;
    }
    counts
}

/// Knobs for channel assembly.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// Fraction of items (by interaction count, descending) excluded from
    /// the co-purchase channel as "too popular to be personal".
    pub popular_item_fraction: f64,
    /// Minimum surviving co-purchase count; entries below are dropped.
    pub entry_threshold: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            popular_item_fraction: 0.01,
            entry_threshold: 5.0,
        }
    }
}

/// The three channel matrices with cached row-normalized forms.
#[derive(Clone, Debug)]
pub struct ChannelMatrices {
    pub social: SparseMatrix,
    pub joint: SparseMatrix,
    pub purchase: SparseMatrix,
    pub social_norm: SparseMatrix,
    pub joint_norm: SparseMatrix,
    pub purchase_norm: SparseMatrix,
}

impl ChannelMatrices {
    /// Names of channels that ended up with no edges at all. Callers surface
    /// these as warnings; an empty channel still propagates (zero) signal.
    pub fn empty_channels(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.social.nnz() == 0 {
            out.push("social");
        }
        if self.joint.nnz() == 0 {
            out.push("joint");
        }
        if self.purchase.nnz() == 0 {
            out.push("purchase");
        }
        out
    }
}

/// Assemble the three channel matrices.
///
/// Social sums motifs 1..7 and joint sums 8..9, diagonals zeroed. The
/// purchase channel recomputes the co-purchase matrix from R with the most
/// popular items removed, drops entries below the threshold, subtracts the
/// joint channel, and clamps at zero: pairs already tied by a joint motif
/// should not be double-counted as strangers.
pub fn build_channels(
    motifs: &MotifMatrices,
    r: &SparseMatrix,
    config: &ChannelConfig,
) -> ChannelMatrices {
    let mut social = motifs.adjacency(1).clone();
    for k in 2..=7 {
        social = social.add(motifs.adjacency(k));
    }
    let social = social.zero_diagonal();
    let joint = motifs.adjacency(8).add(motifs.adjacency(9)).zero_diagonal();

    let filtered = drop_popular_items(r, config.popular_item_fraction);
    let copurchase = filtered
        .matmul(&filtered.transpose())
        .zero_diagonal()
        .threshold_min(config.entry_threshold);
    let purchase = copurchase.sub(&joint).clamp_nonnegative().zero_diagonal();

    ChannelMatrices {
        social_norm: social.row_normalize(),
        joint_norm: joint.row_normalize(),
        purchase_norm: purchase.row_normalize(),
        social,
        joint,
        purchase,
    }
}

/// Remove the columns of the `fraction` most-interacted items (ties broken
/// by lower index first).
fn drop_popular_items(r: &SparseMatrix, fraction: f64) -> SparseMatrix {
    assert!((0.0..=1.0).contains(&fraction), "fraction must be in [0, 1]");
    let n = r.cols();
    let drop_count = (n as f64 * fraction).floor() as usize;
    if drop_count == 0 {
        return r.clone();
    }
    let mut counts = vec![0usize; n];
    for (_, c, _) in r.iter() {
        counts[c] += 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&c| (std::cmp::Reverse(counts[c]), c));
    let mut popular = vec![false; n];
    for &c in order.iter().take(drop_count) {
        popular[c] = true;
    }
    SparseMatrix::from_triplets(
        r.rows(),
        n,
        r.iter().filter(|&(_, c, _)| !popular[c]),
    )
}
