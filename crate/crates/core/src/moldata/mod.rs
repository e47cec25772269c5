//! Molecular data model, dataset ingestion, splitting and feature scaling.
//!
//! A [`MoleculeGraph`] carries Cartesian coordinates in Ångström, one atom
//! type per atom (H, C, N, O or F) and an integer charge per atom. Bonds are
//! not part of the data model; they are inferred from geometry in
//! [`crate::evaluate`].

mod formats;
mod split;

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;

use crate::error::{Error, Result};

pub use formats::{
    load_molecules, parse_internal, parse_sdf, parse_xyz, write_internal, write_xyz, ChargeSource,
    DatasetFormat,
};
pub use split::{
    load_dataset, split_by_manifest, split_seeded, DatasetSplit, SplitManifest, SplitSizes, SplitStrategy, QM9_SPLIT,
};

/// Number of atom categories (H, C, N, O, F).
pub const NUM_ATOM_TYPES: usize = 5;

/// Width of the per-atom feature row: one-hot atom type plus one integer charge.
pub const FEATURE_DIM: usize = NUM_ATOM_TYPES + 1;

/// Atom categories supported by the model, in one-hot column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Element {
    H,
    C,
    N,
    O,
    F,
}

impl Element {
    pub const ALL: [Element; NUM_ATOM_TYPES] =
        [Element::H, Element::C, Element::N, Element::O, Element::F];

    pub fn symbol(self) -> &'static str {
        match self {
            Element::H => "H",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::F => "F",
        }
    }

    pub fn atomic_number(self) -> i64 {
        match self {
            Element::H => 1,
            Element::C => 6,
            Element::N => 7,
            Element::O => 8,
            Element::F => 9,
        }
    }

    /// Column of this element in the one-hot block.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Element> {
        Element::ALL.get(index).copied()
    }

    /// Parses an element symbol, accepting any capitalisation.
    pub fn from_symbol(symbol: &str) -> Option<Element> {
        match symbol.to_ascii_uppercase().as_str() {
            "H" => Some(Element::H),
            "C" => Some(Element::C),
            "N" => Some(Element::N),
            "O" => Some(Element::O),
            "F" => Some(Element::F),
            _ => None,
        }
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// A molecule: coordinates (N×3, Å), atom types and integer charges.
#[derive(Debug, Clone, PartialEq)]
pub struct MoleculeGraph {
    id: String,
    coords: Array2<f64>,
    elements: Vec<Element>,
    charges: Vec<i64>,
}

impl MoleculeGraph {
    /// Builds a molecule, checking that shapes agree and coordinates are finite.
    pub fn new(
        id: impl Into<String>,
        coords: Array2<f64>,
        elements: Vec<Element>,
        charges: Vec<i64>,
    ) -> Result<Self> {
        let id = id.into();
        let invalid = |reason: String| Error::InvalidMolecule {
            id: id.clone(),
            reason,
        };
        if elements.is_empty() {
            return Err(invalid("molecule has no atoms".into()));
        }
        if coords.ncols() != 3 {
            return Err(invalid(format!("coords have {} columns, expected 3", coords.ncols())));
        }
        if coords.nrows() != elements.len() || charges.len() != elements.len() {
            return Err(invalid(format!(
                "row counts disagree: coords {}, atom types {}, charges {}",
                coords.nrows(),
                elements.len(),
                charges.len()
            )));
        }
        if let Some(bad) = coords.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite coordinate for atom {}", bad / 3)));
        }
        Ok(MoleculeGraph {
            id,
            coords,
            elements,
            charges,
        })
    }

    /// Molecule with charges set to atomic numbers.
    pub fn with_atomic_charges(
        id: impl Into<String>,
        coords: Array2<f64>,
        elements: Vec<Element>,
    ) -> Result<Self> {
        let charges = elements.iter().map(|e| e.atomic_number()).collect();
        Self::new(id, coords, elements, charges)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn num_atoms(&self) -> usize {
        self.elements.len()
    }

    pub fn coords(&self) -> &Array2<f64> {
        &self.coords
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn charges(&self) -> &[i64] {
        &self.charges
    }

    /// N×K one-hot atom-type matrix.
    pub fn atom_types(&self) -> Array2<f64> {
        let mut one_hot = Array2::zeros((self.num_atoms(), NUM_ATOM_TYPES));
        for (row, element) in self.elements.iter().enumerate() {
            one_hot[[row, element.index()]] = 1.0;
        }
        one_hot
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Same atoms, new coordinates.
    pub fn with_coords(&self, coords: Array2<f64>) -> Result<Self> {
        Self::new(
            self.id.clone(),
            coords,
            self.elements.clone(),
            self.charges.clone(),
        )
    }

    /// Reorders atoms so that new atom `k` is old atom `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let n = self.num_atoms();
        let mut seen = vec![false; n];
        if order.len() != n || order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::InvalidArgument(format!(
                "permutation of length {} is not a permutation of 0..{n}",
                order.len()
            )));
        }
        let coords = Array2::from_shape_fn((n, 3), |(r, c)| self.coords[[order[r], c]]);
        let elements = order.iter().map(|&i| self.elements[i]).collect();
        let charges = order.iter().map(|&i| self.charges[i]).collect();
        Self::new(self.id.clone(), coords, elements, charges)
    }
}

/// Empirical distribution of molecule sizes, p(N).
#[derive(Debug, Clone, PartialEq)]
pub struct SizeDistribution {
    counts: BTreeMap<usize, u64>,
    probs: BTreeMap<usize, f64>,
}

impl SizeDistribution {
    /// Builds a distribution from raw counts; zero counts are dropped.
    pub fn from_counts(counts: BTreeMap<usize, u64>) -> Result<Self> {
        let counts: BTreeMap<usize, u64> = counts.into_iter().filter(|&(_, c)| c > 0).collect();
        let total: u64 = counts.values().sum();
        if total == 0 {
            return Err(Error::EmptyDataset("size distribution has no molecules".into()));
        }
        if counts.contains_key(&0) {
            return Err(Error::InvalidArgument("molecule size 0 in size distribution".into()));
        }
        let probs = counts
            .iter()
            .map(|(&n, &c)| (n, c as f64 / total as f64))
            .collect();
        Ok(SizeDistribution { counts, probs })
    }

    pub fn probs(&self) -> &BTreeMap<usize, f64> {
        &self.probs
    }

    pub fn counts(&self) -> &BTreeMap<usize, u64> {
        &self.counts
    }

    pub fn prob(&self, n: usize) -> f64 {
        self.probs.get(&n).copied().unwrap_or(0.0)
    }

    pub fn max_size(&self) -> usize {
        *self.probs.keys().next_back().expect("non-empty by construction")
    }

    pub fn min_size(&self) -> usize {
        *self.probs.keys().next().expect("non-empty by construction")
    }
}

/// Counts molecule sizes: `probs[N] = count(num_atoms = N) / total`.
pub fn compute_size_distribution(molecules: &[MoleculeGraph]) -> Result<SizeDistribution> {
    if molecules.is_empty() {
        return Err(Error::EmptyDataset(
            "cannot compute a size distribution of zero molecules".into(),
        ));
    }
    let mut counts = BTreeMap::new();
    for mol in molecules {
        *counts.entry(mol.num_atoms()).or_insert(0u64) += 1;
    }
    SizeDistribution::from_counts(counts)
}

/// Scales node features before diffusion: one-hot × `categorical_scale`,
/// charge × `integer_scale`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureScaler {
    pub categorical_scale: f64,
    pub integer_scale: f64,
}

impl Default for FeatureScaler {
    fn default() -> Self {
        FeatureScaler {
            categorical_scale: 0.25,
            integer_scale: 0.1,
        }
    }
}

/// Atom types and charges read back from a feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedFeatures {
    pub elements: Vec<Element>,
    pub charges: Vec<i64>,
    /// Rows whose categorical argmax was an exact tie (resolved to the lowest index).
    pub ties: Vec<bool>,
}

impl FeatureScaler {
    pub fn new(categorical_scale: f64, integer_scale: f64) -> Result<Self> {
        let scaler = FeatureScaler {
            categorical_scale,
            integer_scale,
        };
        scaler.validate()?;
        Ok(scaler)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.categorical_scale) || !ok(self.integer_scale) {
            return Err(Error::InvalidArgument(format!(
                "feature scales must be finite and positive, got {} and {}",
                self.categorical_scale, self.integer_scale
            )));
        }
        Ok(())
    }

    /// N×(K+1) matrix `[atom_types × categorical_scale, charges × integer_scale]`.
    pub fn encode(&self, mol: &MoleculeGraph) -> Array2<f64> {
        let mut features = Array2::zeros((mol.num_atoms(), FEATURE_DIM));
        for (row, (element, &charge)) in mol.elements().iter().zip(mol.charges()).enumerate() {
            features[[row, element.index()]] = self.categorical_scale;
            features[[row, NUM_ATOM_TYPES]] = charge as f64 * self.integer_scale;
        }
        features
    }

    /// Argmax over the unscaled categorical block, nearest integer for the charge.
    pub fn decode(&self, features: &Array2<f64>) -> Result<DecodedFeatures> {
        if features.ncols() != FEATURE_DIM {
            return Err(Error::InvalidArgument(format!(
                "feature matrix has {} columns, expected {FEATURE_DIM}",
                features.ncols()
            )));
        }
        let n = features.nrows();
        let mut elements = Vec::with_capacity(n);
        let mut charges = Vec::with_capacity(n);
        let mut ties = Vec::with_capacity(n);
        for row in features.rows() {
            let mut best = 0;
            let mut tie = false;
            for k in 1..NUM_ATOM_TYPES {
                let (a, b) = (row[k] / self.categorical_scale, row[best] / self.categorical_scale);
                if a > b {
                    best = k;
                    tie = false;
                } else if a == b {
                    tie = true;
                }
            }
            elements.push(Element::from_index(best).expect("index below K"));
            ties.push(tie);
            charges.push((row[NUM_ATOM_TYPES] / self.integer_scale).round() as i64);
        }
        Ok(DecodedFeatures {
            elements,
            charges,
            ties,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn methane() -> MoleculeGraph {
        let coords = array![
            [0.0, 0.0, 0.0],
            [0.629, 0.629, 0.629],
            [-0.629, -0.629, 0.629],
            [-0.629, 0.629, -0.629],
            [0.629, -0.629, -0.629]
        ];
        let elements = vec![Element::C, Element::H, Element::H, Element::H, Element::H];
        MoleculeGraph::with_atomic_charges("methane", coords, elements).unwrap()
    }

    #[test]
    fn rejects_shape_mismatch_and_nan() {
        let err = MoleculeGraph::new("x", Array2::zeros((2, 3)), vec![Element::H], vec![1]);
        assert!(err.is_err());
        let mut coords = Array2::zeros((1, 3));
        coords[[0, 1]] = f64::NAN;
        assert!(MoleculeGraph::new("x", coords, vec![Element::H], vec![1]).is_err());
        assert!(MoleculeGraph::new("x", Array2::zeros((0, 3)), vec![], vec![]).is_err());
    }

    #[test]
    fn size_distribution_counts() {
        let mk = |n: usize| {
            MoleculeGraph::with_atomic_charges("m", Array2::zeros((n, 3)), vec![Element::C; n])
                .unwrap()
        };
        let dist = compute_size_distribution(&[mk(3), mk(3), mk(5)]).unwrap();
        assert_eq!(dist.probs().len(), 2);
        assert!((dist.prob(3) - 2.0 / 3.0).abs() < 1e-15);
        assert!((dist.prob(5) - 1.0 / 3.0).abs() < 1e-15);
        let single = compute_size_distribution(&[mk(29)]).unwrap();
        assert_eq!(single.prob(29), 1.0);
        assert!(compute_size_distribution(&[]).is_err());
    }

    #[test]
    fn encode_carbon_and_hydrogen() {
        let scaler = FeatureScaler::default();
        let features = scaler.encode(&methane());
        let carbon = features.row(0).to_vec();
        let expected = [0.0, 0.25, 0.0, 0.0, 0.0, 0.6];
        for (a, b) in carbon.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let hydrogen = features.row(1).to_vec();
        let expected = [0.25, 0.0, 0.0, 0.0, 0.0, 0.1];
        for (a, b) in hydrogen.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn decode_noisy_row_and_tie() {
        let scaler = FeatureScaler::default();
        let features = array![
            [0.24, 0.01, 0.0, 0.0, 0.0, 0.11],
            [0.0, 0.0, 0.0, 0.0, 0.0, 0.6]
        ];
        let decoded = scaler.decode(&features).unwrap();
        assert_eq!(decoded.elements, vec![Element::H, Element::H]);
        assert_eq!(decoded.charges, vec![1, 6]);
        assert_eq!(decoded.ties, vec![false, true]);
        assert!(scaler.decode(&Array2::zeros((1, 4))).is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let scaler = FeatureScaler::default();
        let mol = methane();
        let decoded = scaler.decode(&scaler.encode(&mol)).unwrap();
        assert_eq!(decoded.elements, mol.elements());
        assert_eq!(decoded.charges, mol.charges());
        assert!(decoded.ties.iter().all(|t| !t));
    }

    #[test]
    fn scaler_rejects_nonpositive() {
        assert!(FeatureScaler::new(0.0, 0.1).is_err());
        assert!(FeatureScaler::new(0.25, -1.0).is_err());
    }

    #[test]
    fn permutation_validation() {
        let mol = methane();
        assert!(mol.permuted(&[0, 1, 2, 3]).is_err());
        assert!(mol.permuted(&[0, 0, 1, 2, 3]).is_err());
        let p = mol.permuted(&[4, 3, 2, 1, 0]).unwrap();
        assert_eq!(p.elements()[4], Element::C);
    }
}
