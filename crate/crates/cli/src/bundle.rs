//! Prepared dataset bundles.
//!
//! A bundle is a directory holding the canonicalized interaction and social
//! TSV files, a dataset summary, and the fold assignment, plus a SHA-256
//! fingerprint over the content files. Preparing the same inputs with the
//! same seed reproduces the fingerprint byte for byte, so run manifests can
//! pin the exact data they were trained on.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mhcn_core::data::{
    kfold_split, load_interactions, load_social, Dataset, DatasetSummary, FoldSplit,
};
use mhcn_core::linalg::SparseMatrix;

use crate::Failure;

pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const SOCIAL_FILE: &str = "social.tsv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FOLDS_FILE: &str = "folds.json";
pub const FINGERPRINT_FILE: &str = "fingerprint.txt";

/// Serialized fold assignment. Pairs are (user, item) indices into the
/// row/column order of the bundled TSV files; each interaction appears in
/// exactly one fold's test list.
#[derive(Serialize, Deserialize)]
pub struct FoldsFile {
    pub folds: usize,
    pub seed: u64,
    pub test_pairs: Vec<Vec<(usize, usize)>>,
}

pub struct Bundle {
    pub dir: PathBuf,
    pub dataset: Dataset,
    pub folds: Vec<FoldSplit>,
    pub fingerprint: String,
}

/// SHA-256 over the bundle's content files, hex encoded. File names are
/// mixed into the stream so the hash pins both names and bytes.
pub fn fingerprint(dir: &Path) -> Result<String, Failure> {
    let mut hasher = Sha256::new();
    for name in [INTERACTIONS_FILE, SOCIAL_FILE, FOLDS_FILE] {
        let path = dir.join(name);
        let bytes = fs::read(&path)
            .with_context(|| format!("reading bundle file {}", path.display()))?;
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update(&bytes);
    }
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Build a bundle directory from raw TSV files.
///
/// Everything is written into a staging directory first and renamed into
/// place at the end, so a failed run leaves no partial bundle behind.
pub fn prepare(
    out_root: &Path,
    name: &str,
    ratings: &Path,
    trust: &Path,
    rating_threshold: Option<f64>,
    folds: usize,
    seed: u64,
) -> Result<(PathBuf, DatasetSummary, String), Failure> {
    if folds < 2 {
        return Err(Failure::usage(anyhow!("--folds must be at least 2, got {folds}")));
    }
    if name.is_empty() || name.contains('/') {
        return Err(Failure::usage(anyhow!("bundle name must be a plain directory name")));
    }

    let mut dataset = load_interactions(ratings, rating_threshold)?;
    load_social(&mut dataset, trust)?;
    let splits = kfold_split(&dataset, folds, seed);
    let summary = dataset.summary();

    fs::create_dir_all(out_root)
        .with_context(|| format!("creating output root {}", out_root.display()))?;
    let final_dir = out_root.join(name);
    let staging = out_root.join(format!("{name}.partial"));
    if staging.exists() {
        fs::remove_dir_all(&staging).context("clearing stale staging directory")?;
    }
    fs::create_dir(&staging).context("creating staging directory")?;

    let write_all = || -> Result<String, Failure> {
        dataset.write_files(&staging.join(INTERACTIONS_FILE), &staging.join(SOCIAL_FILE))?;
        let folds_file = FoldsFile {
            folds,
            seed,
            test_pairs: splits.iter().map(|f| f.test.clone()).collect(),
        };
        write_json(&staging.join(FOLDS_FILE), &folds_file)?;
        write_json(&staging.join(SUMMARY_FILE), &summary)?;
        let print = fingerprint(&staging)?;
        fs::write(staging.join(FINGERPRINT_FILE), format!("{print}\n"))
            .context("writing fingerprint")?;
        Ok(print)
    };

    match write_all() {
        Ok(print) => {
            if final_dir.exists() {
                fs::remove_dir_all(&final_dir)
                    .with_context(|| format!("replacing existing bundle {}", final_dir.display()))?;
            }
            fs::rename(&staging, &final_dir).context("moving bundle into place")?;
            Ok((final_dir, summary, print))
        }
        Err(err) => {
            let _ = fs::remove_dir_all(&staging);
            Err(err)
        }
    }
}

/// Load a bundle and rebuild the fold splits.
///
/// The stored fingerprint is recomputed and checked, so a hand-edited
/// bundle is rejected instead of silently feeding a run.
pub fn load(dir: &Path) -> Result<Bundle, Failure> {
    let mut dataset = load_interactions(&dir.join(INTERACTIONS_FILE), None)?;
    load_social(&mut dataset, &dir.join(SOCIAL_FILE))?;

    let folds_path = dir.join(FOLDS_FILE);
    let folds_text = fs::read_to_string(&folds_path)
        .with_context(|| format!("reading {}", folds_path.display()))?;
    let folds_file: FoldsFile = serde_json::from_str(&folds_text)
        .with_context(|| format!("parsing {}", folds_path.display()))?;

    let stored = fs::read_to_string(dir.join(FINGERPRINT_FILE))
        .with_context(|| format!("reading fingerprint in {}", dir.display()))?;
    let actual = fingerprint(dir)?;
    if stored.trim() != actual {
        return Err(Failure::data(anyhow!(
            "bundle {} is corrupted: fingerprint {} does not match stored {}",
            dir.display(),
            actual,
            stored.trim()
        )));
    }

    let folds = rebuild_folds(&dataset, &folds_file, dir)?;
    Ok(Bundle { dir: dir.to_owned(), dataset, folds, fingerprint: actual })
}

/// Reconstruct each fold's training matrix as the complement of its stored
/// test pairs.
fn rebuild_folds(
    dataset: &Dataset,
    folds_file: &FoldsFile,
    dir: &Path,
) -> Result<Vec<FoldSplit>, Failure> {
    if folds_file.test_pairs.len() != folds_file.folds {
        return Err(Failure::data(anyhow!(
            "bundle {}: fold file claims {} folds but stores {} test lists",
            dir.display(),
            folds_file.folds,
            folds_file.test_pairs.len()
        )));
    }
    let (m, n) = (dataset.num_users(), dataset.num_items());
    let mut folds = Vec::with_capacity(folds_file.folds);
    for (fold_id, test) in folds_file.test_pairs.iter().enumerate() {
        let held: HashSet<(usize, usize)> = test.iter().copied().collect();
        for &(u, i) in test {
            if u >= m || i >= n || dataset.interactions.get(u, i) == 0.0 {
                return Err(Failure::data(anyhow!(
                    "bundle {}: fold {fold_id} holds out ({u}, {i}), which is not an interaction",
                    dir.display()
                )));
            }
        }
        let train = SparseMatrix::from_triplets(
            m,
            n,
            dataset.interactions.iter().filter(|&(u, i, _)| !held.contains(&(u, i))),
        );
        folds.push(FoldSplit { fold_id, train, test: test.clone() });
    }
    Ok(folds)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).context("serializing JSON")?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
