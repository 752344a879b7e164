//! Dataset ingestion and splitting.
//!
//! Input files are UTF-8 TSV, one record per line, with `#`-prefixed comment
//! lines skipped. Interactions are `user<TAB>item[<TAB>rating]`, relations
//! are `trustor<TAB>trustee[<TAB>weight]` (the weight is ignored). External
//! ids are mapped to dense indices in first-appearance order so the resulting
//! matrices do not depend on hash ordering.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::linalg::SparseMatrix;
use crate::rng::{self, Stream};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("failed to read {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: no interactions survived loading")]
    Empty { path: PathBuf },
}

/// Dense first-appearance index over external string ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IdIndex {
    to_id: Vec<String>,
    to_index: HashMap<String, usize>,
}

impl IdIndex {
    pub fn len(&self) -> usize {
        self.to_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_id.is_empty()
    }

    /// Index for an external id, inserting it if unseen.
    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&ix) = self.to_index.get(id) {
            return ix;
        }
        let ix = self.to_id.len();
        self.to_id.push(id.to_owned());
        self.to_index.insert(id.to_owned(), ix);
        ix
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.to_index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.to_id[index]
    }
}

/// A loaded dataset: binary interactions R (users x items) and binary
/// directed social relations S (users x users, zero diagonal).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub user_index: IdIndex,
    pub item_index: IdIndex,
    pub interactions: SparseMatrix,
    pub social: SparseMatrix,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetSummary {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub relations: usize,
    pub density: f64,
}

/// One fold of a k-fold split: the training matrix and the held-out
/// positives it excludes.
#[derive(Clone, Debug)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub train: SparseMatrix,
    pub test: Vec<(usize, usize)>,
}

/// Load the interaction file into a dataset with an empty social graph.
///
/// With `rating_threshold` set, records whose rating is below the threshold
/// are dropped before any id is indexed, so filtered-out users and items do
/// not occupy matrix rows. Duplicate (user, item) records collapse to one
/// entry.
pub fn load_interactions(
    path: &Path,
    rating_threshold: Option<f64>,
) -> Result<Dataset, DataError> {
    let mut user_index = IdIndex::default();
    let mut item_index = IdIndex::default();
    let mut pairs: BTreeSet<(usize, usize)> = BTreeSet::new();

    for (lineno, line) in read_lines(path)? {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(malformed(path, lineno, "expected `user<TAB>item[<TAB>rating]`"));
        }
        let rating = match fields.get(2) {
            Some(f) => f.parse::<f64>().map_err(|_| {
                malformed(path, lineno, &format!("unparseable rating {:?}", f))
            })?,
            None => 1.0,
        };
        if let Some(min) = rating_threshold {
            if rating < min {
                continue;
            }
        }
        let u = user_index.intern(fields[0]);
        let i = item_index.intern(fields[1]);
        pairs.insert((u, i));
    }
    if pairs.is_empty() {
        return Err(DataError::Empty { path: path.to_owned() });
    }

    let (m, n) = (user_index.len(), item_index.len());
    let interactions =
        SparseMatrix::from_triplets(m, n, pairs.into_iter().map(|(u, i)| (u, i, 1.0)));
    Ok(Dataset {
        user_index,
        item_index,
        interactions,
        social: SparseMatrix::zeros(m, m),
    })
}

/// Load the relation file into the dataset's social graph.
///
/// Users appearing only in relations are appended to the user index; the
/// interaction matrix gains empty rows for them. Self-loops are dropped.
pub fn load_social(dataset: &mut Dataset, path: &Path) -> Result<(), DataError> {
    let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
    for (lineno, line) in read_lines(path)? {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(malformed(path, lineno, "expected `trustor<TAB>trustee[<TAB>weight]`"));
        }
        let a = dataset.user_index.intern(fields[0]);
        let b = dataset.user_index.intern(fields[1]);
        if a != b {
            edges.insert((a, b));
        }
    }
    let m = dataset.user_index.len();
    if m > dataset.interactions.rows() {
        dataset.interactions = SparseMatrix::from_triplets(
            m,
            dataset.interactions.cols(),
            dataset.interactions.iter(),
        );
    }
    dataset.social =
        SparseMatrix::from_triplets(m, m, edges.into_iter().map(|(a, b)| (a, b, 1.0)));
    Ok(())
}

impl Dataset {
    pub fn num_users(&self) -> usize {
        self.user_index.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_index.len()
    }

    pub fn summary(&self) -> DatasetSummary {
        let (m, n) = (self.num_users(), self.num_items());
        DatasetSummary {
            users: m,
            items: n,
            interactions: self.interactions.nnz(),
            relations: self.social.nnz(),
            density: self.interactions.nnz() as f64 / (m as f64 * n as f64),
        }
    }

    /// Write the dataset back out as interaction and relation TSV files.
    /// Reloading the written files reproduces R and S exactly.
    pub fn write_files(&self, interactions: &Path, social: &Path) -> Result<(), DataError> {
        let io_err = |path: &Path, source| DataError::Io { path: path.to_owned(), source };
        let mut f = File::create(interactions).map_err(|e| io_err(interactions, e))?;
        for (u, i, _) in self.interactions.iter() {
            writeln!(f, "{}\t{}\t1", self.user_index.id(u), self.item_index.id(i))
                .map_err(|e| io_err(interactions, e))?;
        }
        let mut f = File::create(social).map_err(|e| io_err(social, e))?;
        for (a, b, _) in self.social.iter() {
            writeln!(f, "{}\t{}", self.user_index.id(a), self.user_index.id(b))
                .map_err(|e| io_err(social, e))?;
        }
        Ok(())
    }
}

/// Split each user's interactions into `k` near-equal parts and hold out one
/// part per fold.
///
/// A user whose held-out part would leave no training interactions (a single
/// recorded interaction) keeps everything in train for that fold instead, so
/// every trained user has at least one observed item.
pub fn kfold_split(dataset: &Dataset, k: usize, seed: u64) -> Vec<FoldSplit> {
    assert!(k >= 2, "k-fold split needs k >= 2, got {k}");
    let (m, n) = (dataset.interactions.rows(), dataset.interactions.cols());
    let mut test_sets: Vec<Vec<(usize, usize)>> = vec![Vec::new(); k];

    for u in 0..m {
        let mut items: Vec<usize> = dataset.interactions.row(u).0.to_vec();
        if items.is_empty() {
            continue;
        }
        items.shuffle(&mut rng::substream(seed, Stream::Split, u as u64));
        let c = items.len();
        let (q, r) = (c / k, c % k);
        // Rotate which folds get the larger parts so fold sizes balance
        // across users.
        let mut start = 0;
        for (f, test_set) in test_sets.iter_mut().enumerate() {
            let part = q + usize::from((f + u) % k < r);
            let chunk = &items[start..start + part];
            start += part;
            if part == c {
                // Holding out everything would leave this user untrained.
                continue;
            }
            test_set.extend(chunk.iter().map(|&i| (u, i)));
        }
    }

    test_sets
        .into_iter()
        .enumerate()
        .map(|(fold_id, mut test)| {
            test.sort_unstable();
            let held: BTreeSet<(usize, usize)> = test.iter().copied().collect();
            let train = SparseMatrix::from_triplets(
                m,
                n,
                dataset
                    .interactions
                    .iter()
                    .filter(|&(u, i, _)| !held.contains(&(u, i))),
            );
            FoldSplit { fold_id, train, test }
        })
        .collect()
}

/// Users with fewer than `threshold` interactions in the given matrix.
pub fn cold_start_users(interactions: &SparseMatrix, threshold: usize) -> Vec<usize> {
    (0..interactions.rows())
        .filter(|&u| interactions.row(u).0.len() < threshold)
        .collect()
}

fn read_lines(path: &Path) -> Result<impl Iterator<Item = (usize, String)>, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })?;
    let path = path.to_owned();
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(move |(i, line)| {
            let line = line.unwrap_or_else(|e| panic!("read error in {}: {e}", path.display()));
            (i + 1, line)
        })
        .filter(|(_, line)| {
            let t = line.trim_end_matches(['\r', '\n']);
            !t.is_empty() && !t.starts_with('#')
        })
        .map(|(i, line)| (i, line.trim_end_matches(['\r', '\n']).to_owned())))
}

fn malformed(path: &Path, line: usize, reason: &str) -> DataError {
    DataError::Malformed {
        path: path.to_owned(),
        line,
        reason: reason.to_owned(),
    }
}
