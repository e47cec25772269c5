//! Train/validation/test partitioning and split manifests.
//!
//! Manifest format: three sections introduced by `[train]`, `[val]` and
//! `[test]`, each followed by one molecule id per line. Blank lines and lines
//! starting with `#` are ignored.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{load_molecules, ChargeSource, DatasetFormat, MoleculeGraph};
use crate::error::{Error, Result};

/// Reference QM9 partition sizes (train, val, test) for its 130,831 molecules.
pub const QM9_SPLIT: (usize, usize, usize) = (100_000, 17_748, 13_083);

/// Validated molecules partitioned three ways.
#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<MoleculeGraph>,
    pub val: Vec<MoleculeGraph>,
    pub test: Vec<MoleculeGraph>,
}

impl DatasetSplit {
    pub fn manifest(&self) -> SplitManifest {
        let ids = |mols: &[MoleculeGraph]| mols.iter().map(|m| m.id().to_string()).collect();
        SplitManifest {
            train: ids(&self.train),
            val: ids(&self.val),
            test: ids(&self.test),
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Molecule ids per partition.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            let _ = writeln!(out, "[{name}]");
            for id in ids {
                let _ = writeln!(out, "{id}");
            }
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut manifest = SplitManifest::default();
        let mut section: Option<&mut Vec<String>> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                message,
            };
            match line {
                "[train]" => section = Some(&mut manifest.train),
                "[val]" => section = Some(&mut manifest.val),
                "[test]" => section = Some(&mut manifest.test),
                _ if line.starts_with('[') => return Err(err(format!("unknown section {line}"))),
                id => match section.as_deref_mut() {
                    Some(ids) => ids.push(id.to_string()),
                    None => return Err(err("molecule id before any section header".into())),
                },
            }
        }
        Ok(manifest)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Partition sizes for a seeded random split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    /// Scales the reference QM9 proportions to `n` molecules. For the full
    /// 130,831-molecule set this returns exactly 100,000 / 17,748 / 13,083.
    pub fn qm9_proportional(n: usize) -> Self {
        let total = (QM9_SPLIT.0 + QM9_SPLIT.1 + QM9_SPLIT.2) as u128;
        let train = ((n as u128 * QM9_SPLIT.0 as u128 * 2 + total) / (2 * total)) as usize;
        let test = n / 10;
        let train = train.min(n - test);
        SplitSizes {
            train,
            val: n - train - test,
            test,
        }
    }
}

/// How to partition a loaded dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitStrategy {
    /// Use the partition recorded in a manifest file.
    Manifest(PathBuf),
    /// Shuffle with a seed; `sizes` defaults to QM9 proportions.
    Seeded { seed: u64, sizes: Option<SplitSizes> },
}

/// Applies a manifest to loaded molecules. Every listed id must exist.
pub fn split_by_manifest(molecules: Vec<MoleculeGraph>, manifest: &SplitManifest) -> Result<DatasetSplit> {
    let mut by_id: HashMap<String, MoleculeGraph> = HashMap::with_capacity(molecules.len());
    for mol in molecules {
        let id = mol.id().to_string();
        if by_id.insert(id.clone(), mol).is_some() {
            return Err(Error::Split(format!("duplicate molecule id `{id}`")));
        }
    }
    let mut seen = HashSet::new();
    let mut take = |ids: &[String]| -> Result<Vec<MoleculeGraph>> {
        ids.iter()
            .map(|id| {
                if !seen.insert(id.clone()) {
                    return Err(Error::Split(format!("molecule `{id}` appears in more than one split")));
                }
                by_id
                    .remove(id)
                    .ok_or_else(|| Error::Split(format!("manifest lists unknown molecule `{id}`")))
            })
            .collect()
    };
    Ok(DatasetSplit {
        train: take(&manifest.train)?,
        val: take(&manifest.val)?,
        test: take(&manifest.test)?,
    })
}

/// Shuffles with ChaCha8 seeded by `seed` and cuts into `sizes`.
pub fn split_seeded(molecules: Vec<MoleculeGraph>, seed: u64, sizes: Option<SplitSizes>) -> Result<DatasetSplit> {
    let n = molecules.len();
    let sizes = sizes.unwrap_or_else(|| SplitSizes::qm9_proportional(n));
    if sizes.train + sizes.val + sizes.test > n {
        return Err(Error::Split(format!(
            "requested {} + {} + {} molecules but only {n} are available",
            sizes.train, sizes.val, sizes.test
        )));
    }
    let mut ids = HashSet::with_capacity(n);
    for mol in &molecules {
        if !ids.insert(mol.id()) {
            return Err(Error::Split(format!("duplicate molecule id `{}`", mol.id())));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<MoleculeGraph>> = molecules.into_iter().map(Some).collect();
    let mut pick = |range: std::ops::Range<usize>| -> Vec<MoleculeGraph> {
        order[range]
            .iter()
            .map(|&i| slots[i].take().expect("each index drawn once"))
            .collect()
    };
    let train = pick(0..sizes.train);
    let val = pick(sizes.train..sizes.train + sizes.val);
    let test = pick(sizes.train + sizes.val..sizes.train + sizes.val + sizes.test);
    Ok(DatasetSplit { train, val, test })
}

/// Loads molecules from `path` and partitions them.
pub fn load_dataset(
    path: &Path,
    format: DatasetFormat,
    charges: ChargeSource,
    strategy: &SplitStrategy,
) -> Result<DatasetSplit> {
    let molecules = load_molecules(path, format, charges)?;
    match strategy {
        SplitStrategy::Manifest(manifest) => split_by_manifest(molecules, &SplitManifest::read(manifest)?),
        SplitStrategy::Seeded { seed, sizes } => split_seeded(molecules, *seed, *sizes),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moldata::Element;
    use ndarray::Array2;

    fn mols(n: usize) -> Vec<MoleculeGraph> {
        (0..n)
            .map(|i| {
                MoleculeGraph::with_atomic_charges(format!("m{i}"), Array2::zeros((1, 3)), vec![Element::C])
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn full_qm9_sizes_match_reference() {
        let sizes = SplitSizes::qm9_proportional(130_831);
        assert_eq!((sizes.train, sizes.val, sizes.test), QM9_SPLIT);
    }

    #[test]
    fn proportional_sizes_cover_everything() {
        for n in [1usize, 2, 10, 999, 5_000, 60_000] {
            let s = SplitSizes::qm9_proportional(n);
            assert_eq!(s.train + s.val + s.test, n);
        }
    }

    #[test]
    fn seeded_split_is_deterministic_and_disjoint() {
        let a = split_seeded(mols(50), 7, None).unwrap().manifest();
        let b = split_seeded(mols(50), 7, None).unwrap().manifest();
        assert_eq!(a.to_text(), b.to_text());
        let c = split_seeded(mols(50), 8, None).unwrap().manifest();
        assert_ne!(a.to_text(), c.to_text());
        let mut all: Vec<&String> = a.train.iter().chain(&a.val).chain(&a.test).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 50);
    }

    #[test]
    fn manifest_passthrough() {
        let manifest = SplitManifest {
            train: (0..8).map(|i| format!("m{i}")).collect(),
            val: vec!["m8".into()],
            test: vec!["m9".into()],
        };
        let text = manifest.to_text();
        let parsed = SplitManifest::parse(&text, Path::new("split.txt")).unwrap();
        assert_eq!(parsed, manifest);
        let split = split_by_manifest(mols(10), &parsed).unwrap();
        assert_eq!((split.train.len(), split.val.len(), split.test.len()), (8, 1, 1));
    }

    #[test]
    fn manifest_errors() {
        let unknown = SplitManifest {
            train: vec!["nope".into()],
            ..Default::default()
        };
        assert!(split_by_manifest(mols(2), &unknown).is_err());
        let twice = SplitManifest {
            train: vec!["m0".into()],
            test: vec!["m0".into()],
            ..Default::default()
        };
        assert!(split_by_manifest(mols(2), &twice).is_err());
        assert!(SplitManifest::parse("m0\n", Path::new("s")).is_err());
        assert!(SplitManifest::parse("[bogus]\n", Path::new("s")).is_err());
    }

    #[test]
    fn oversized_request_fails() {
        let sizes = SplitSizes { train: 5, val: 5, test: 5 };
        assert!(split_seeded(mols(10), 0, Some(sizes)).is_err());
    }
}
