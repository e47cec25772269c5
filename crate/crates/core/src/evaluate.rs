//! Bond inference and sample-quality metrics.
//!
//! Bonds are inferred from pairwise distances and element types using the
//! tables in `data/bond_lengths.toml` and `data/valences.toml`. Atom
//! stability asks whether every atom's summed bond order matches an allowed
//! valence. Validity is an internal connectivity-plus-valence check (a single
//! connected component, no atom above its maximum valence). Uniqueness counts
//! distinct canonical forms among valid molecules.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::moldata::{Element, MoleculeGraph};

const DEFAULT_BONDS: &str = include_str!("../data/bond_lengths.toml");
const DEFAULT_VALENCES: &str = include_str!("../data/valences.toml");

/// Width of a distance-histogram bin in Ångström.
pub const HISTOGRAM_BIN: f64 = 0.05;
/// Number of histogram bins, covering 0 to 10 Å.
pub const HISTOGRAM_BINS: usize = 200;

fn pair_key(a: Element, b: Element) -> (Element, Element) {
    if a.index() <= b.index() {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BondFile {
    margins: Margins,
    single: BTreeMap<String, f64>,
    #[serde(default)]
    double: BTreeMap<String, f64>,
    #[serde(default)]
    triple: BTreeMap<String, f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Margins {
    single: f64,
    double: f64,
    triple: f64,
}

/// Typical bond lengths (picometres) per element pair for orders 1 to 3 with
/// per-order tolerance margins.
#[derive(Debug, Clone, PartialEq)]
pub struct BondTable {
    lengths: HashMap<(Element, Element), [Option<f64>; 3]>,
    margins: [f64; 3],
}

impl BondTable {
    /// The table shipped with the crate.
    pub fn standard() -> Self {
        Self::from_toml(DEFAULT_BONDS).expect("bundled bond table is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: BondFile =
            toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("bond table: {e}")))?;
        let mut lengths: HashMap<(Element, Element), [Option<f64>; 3]> = HashMap::new();
        for (order, block) in [&file.single, &file.double, &file.triple].into_iter().enumerate() {
            for (pair, &len) in block {
                let (a, b) = pair.split_once('-').ok_or_else(|| {
                    Error::InvalidArgument(format!("bond table: pair `{pair}` is not of the form A-B"))
                })?;
                let parse = |s: &str| {
                    Element::from_symbol(s.trim())
                        .ok_or_else(|| Error::InvalidArgument(format!("bond table: unknown element `{s}`")))
                };
                let key = pair_key(parse(a)?, parse(b)?);
                let slot = &mut lengths.entry(key).or_default()[order];
                if slot.is_some() {
                    return Err(Error::InvalidArgument(format!("bond table: `{pair}` listed twice")));
                }
                *slot = Some(len);
            }
        }
        let table = BondTable {
            lengths,
            margins: [file.margins.single, file.margins.double, file.margins.triple],
        };
        table.validate()?;
        Ok(table)
    }

    fn validate(&self) -> Result<()> {
        if self.margins.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::InvalidArgument("bond table: margins must be finite and non-negative".into()));
        }
        for ((a, b), orders) in &self.lengths {
            let Some(single) = orders[0] else {
                return Err(Error::InvalidArgument(format!("bond table: {a}-{b} has no single-bond length")));
            };
            let mut prev = single;
            if !(prev > 0.0 && prev.is_finite()) {
                return Err(Error::InvalidArgument(format!("bond table: {a}-{b} length must be positive")));
            }
            let mut gap = false;
            for len in &orders[1..] {
                match len {
                    Some(len) if gap => {
                        return Err(Error::InvalidArgument(format!(
                            "bond table: {a}-{b} has a higher order {len} without the lower one"
                        )))
                    }
                    Some(len) if *len > 0.0 && *len < prev => prev = *len,
                    Some(_) => {
                        return Err(Error::InvalidArgument(format!(
                            "bond table: {a}-{b} lengths must decrease with bond order"
                        )))
                    }
                    None => gap = true,
                }
            }
        }
        Ok(())
    }

    /// Reference lengths in picometres for orders 1, 2 and 3.
    pub fn lengths(&self, a: Element, b: Element) -> Option<[Option<f64>; 3]> {
        self.lengths.get(&pair_key(a, b)).copied()
    }

    pub fn margins(&self) -> [f64; 3] {
        self.margins
    }

    /// Bond order (0 to 3) for a pair at `distance` Ångström.
    pub fn order(&self, a: Element, b: Element, distance: f64) -> Result<u8> {
        let orders = self
            .lengths(a, b)
            .ok_or_else(|| Error::MissingBondPair(a.symbol().into(), b.symbol().into()))?;
        let pm = distance * 100.0;
        let mut best = 0;
        for (k, len) in orders.iter().enumerate() {
            match len {
                Some(len) if pm < len + self.margins[k] => best = k as u8 + 1,
                _ => break,
            }
        }
        Ok(best)
    }
}

/// Allowed valences per element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValenceTable {
    allowed: HashMap<Element, Vec<u32>>,
}

impl ValenceTable {
    pub fn standard() -> Self {
        Self::from_toml(DEFAULT_VALENCES).expect("bundled valence table is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, Vec<u32>> =
            toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("valence table: {e}")))?;
        let mut allowed = HashMap::new();
        for (symbol, values) in raw {
            let el = Element::from_symbol(&symbol)
                .ok_or_else(|| Error::InvalidArgument(format!("valence table: unknown element `{symbol}`")))?;
            if values.is_empty() || values.contains(&0) {
                return Err(Error::InvalidArgument(format!(
                    "valence table: {symbol} needs positive valences"
                )));
            }
            allowed.insert(el, values);
        }
        Ok(ValenceTable { allowed })
    }

    pub fn allowed(&self, el: Element) -> &[u32] {
        self.allowed.get(&el).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_allowed(&self, el: Element, valence: u32) -> bool {
        self.allowed(el).contains(&valence)
    }

    pub fn max(&self, el: Element) -> u32 {
        self.allowed(el).iter().copied().max().unwrap_or(0)
    }
}

/// Symmetric N×N bond-order matrix with zero diagonal.
pub fn infer_bonds(mol: &MoleculeGraph, table: &BondTable) -> Result<Array2<u8>> {
    let n = mol.num_atoms();
    let coords = mol.coords();
    let elements = mol.elements();
    let mut bonds = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let d = (0..3).map(|k| (coords[[i, k]] - coords[[j, k]]).powi(2)).sum::<f64>().sqrt();
            let order = table.order(elements[i], elements[j], d)?;
            bonds[[i, j]] = order;
            bonds[[j, i]] = order;
        }
    }
    Ok(bonds)
}

fn valences(bonds: &Array2<u8>) -> Vec<u32> {
    bonds.rows().into_iter().map(|r| r.iter().map(|&b| b as u32).sum()).collect()
}

/// Number of atoms whose summed bond order is an allowed valence.
pub fn stable_atom_count(mol: &MoleculeGraph, bonds: &Array2<u8>, table: &ValenceTable) -> usize {
    valences(bonds)
        .iter()
        .zip(mol.elements())
        .filter(|(v, el)| table.is_allowed(**el, **v))
        .count()
}

pub fn atom_stability(mol: &MoleculeGraph, bonds: &Array2<u8>, table: &ValenceTable) -> f64 {
    stable_atom_count(mol, bonds, table) as f64 / mol.num_atoms() as f64
}

pub fn molecule_stability(mol: &MoleculeGraph, bonds: &Array2<u8>, table: &ValenceTable) -> bool {
    stable_atom_count(mol, bonds, table) == mol.num_atoms()
}

/// Single connected component under inferred bonds and no atom above its
/// maximum valence.
pub fn is_valid(mol: &MoleculeGraph, bonds: &Array2<u8>, table: &ValenceTable) -> bool {
    let n = mol.num_atoms();
    let within = valences(bonds)
        .iter()
        .zip(mol.elements())
        .all(|(v, el)| *v <= table.max(*el));
    if !within {
        return false;
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    let mut reached = 1;
    while let Some(k) = stack.pop() {
        for j in 0..n {
            if bonds[[k, j]] > 0 && !seen[j] {
                seen[j] = true;
                reached += 1;
                stack.push(j);
            }
        }
    }
    reached == n
}

/// Rigid-motion and permutation invariant fingerprint of a molecule.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CanonicalForm {
    pub composition: [usize; crate::moldata::NUM_ATOM_TYPES],
    pub bonds: Vec<(u8, u8, u8)>,
    pub histogram: Vec<u32>,
}

pub fn canonical_form(mol: &MoleculeGraph, bonds: &Array2<u8>) -> CanonicalForm {
    let elements = mol.elements();
    let coords = mol.coords();
    let mut composition = [0; crate::moldata::NUM_ATOM_TYPES];
    for el in elements {
        composition[el.index()] += 1;
    }
    let n = mol.num_atoms();
    let mut bond_list = Vec::new();
    let mut histogram = vec![0u32; HISTOGRAM_BINS];
    for i in 0..n {
        for j in i + 1..n {
            if bonds[[i, j]] > 0 {
                let (a, b) = pair_key(elements[i], elements[j]);
                bond_list.push((a.index() as u8, b.index() as u8, bonds[[i, j]]));
            }
            let d = (0..3).map(|k| (coords[[i, k]] - coords[[j, k]]).powi(2)).sum::<f64>().sqrt();
            let bin = (d / HISTOGRAM_BIN).floor() as usize;
            if bin < HISTOGRAM_BINS {
                histogram[bin] += 1;
            }
        }
    }
    bond_list.sort_unstable();
    CanonicalForm {
        composition,
        bonds: bond_list,
        histogram,
    }
}

/// Per-molecule metric record.
#[derive(Debug, Clone, PartialEq)]
pub struct MoleculeMetrics {
    pub num_atoms: usize,
    pub stable_atoms: usize,
    pub stable: bool,
    pub valid: bool,
    pub canonical: Option<CanonicalForm>,
}

pub fn molecule_metrics(mol: &MoleculeGraph, bonds: &BondTable, valences: &ValenceTable) -> Result<MoleculeMetrics> {
    let matrix = infer_bonds(mol, bonds)?;
    let stable_atoms = stable_atom_count(mol, &matrix, valences);
    let valid = is_valid(mol, &matrix, valences);
    Ok(MoleculeMetrics {
        num_atoms: mol.num_atoms(),
        stable_atoms,
        stable: stable_atoms == mol.num_atoms(),
        valid,
        canonical: valid.then(|| canonical_form(mol, &matrix)),
    })
}

/// Fraction of valid samples and fraction of samples that are valid and
/// carry a canonical form not seen before.
pub fn validity_and_uniqueness(
    samples: &[MoleculeGraph],
    bonds: &BondTable,
    valences: &ValenceTable,
) -> Result<(f64, f64)> {
    let metrics = samples
        .par_iter()
        .map(|m| molecule_metrics(m, bonds, valences))
        .collect::<Result<Vec<_>>>()?;
    let agg = Aggregate::from_metrics(&metrics);
    Ok((agg.validity(), agg.valid_and_unique()))
}

#[derive(Debug, Clone, Copy, Default)]
struct Aggregate {
    molecules: usize,
    atoms: usize,
    stable_atoms: usize,
    stable_molecules: usize,
    valid: usize,
    unique: usize,
}

impl Aggregate {
    fn from_metrics(metrics: &[MoleculeMetrics]) -> Self {
        let mut seen = HashSet::new();
        let mut agg = Aggregate {
            molecules: metrics.len(),
            ..Default::default()
        };
        for m in metrics {
            agg.atoms += m.num_atoms;
            agg.stable_atoms += m.stable_atoms;
            agg.stable_molecules += m.stable as usize;
            agg.valid += m.valid as usize;
            if let Some(form) = &m.canonical {
                if seen.insert(form) {
                    agg.unique += 1;
                }
            }
        }
        agg
    }

    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    fn atom_stability(&self) -> f64 {
        Self::ratio(self.stable_atoms, self.atoms)
    }

    fn mol_stability(&self) -> f64 {
        Self::ratio(self.stable_molecules, self.molecules)
    }

    fn validity(&self) -> f64 {
        Self::ratio(self.valid, self.molecules)
    }

    fn valid_and_unique(&self) -> f64 {
        Self::ratio(self.unique, self.molecules)
    }
}

/// A pooled metric with its spread across evaluation batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricStat {
    pub value: f64,
    pub batch_std: f64,
    pub std_error: f64,
}

impl MetricStat {
    fn new(value: f64, per_batch: &[f64]) -> Self {
        let k = per_batch.len();
        if k < 2 {
            return MetricStat {
                value,
                batch_std: 0.0,
                std_error: 0.0,
            };
        }
        let mean = per_batch.iter().sum::<f64>() / k as f64;
        let var = per_batch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
        MetricStat {
            value,
            batch_std: var.sqrt(),
            std_error: (var / k as f64).sqrt(),
        }
    }
}

/// Summary of per-molecule NLL-bound estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllSummary {
    pub mean: f64,
    pub std_error: f64,
    pub count: usize,
}

impl NllSummary {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ((n - 1) * n) as f64).sqrt()
        } else {
            0.0
        };
        Some(NllSummary {
            mean,
            std_error,
            count: n,
        })
    }
}

/// Tables and batching used by [`evaluate_samples`].
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub bonds: BondTable,
    pub valences: ValenceTable,
    pub batches: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bonds: BondTable::standard(),
            valences: ValenceTable::standard(),
            batches: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationReport {
    pub sample_count: usize,
    pub atom_count: usize,
    pub stable_atom_count: usize,
    pub stable_molecule_count: usize,
    pub valid_count: usize,
    pub unique_count: usize,
    pub atom_stability: MetricStat,
    pub mol_stability: MetricStat,
    pub validity: MetricStat,
    pub valid_and_unique: MetricStat,
    pub batches: usize,
    pub nll: Option<NllSummary>,
    pub provenance: BTreeMap<String, String>,
}

impl GenerationReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "samples            {}", self.sample_count);
        let _ = writeln!(out, "batches            {}", self.batches);
        for (name, stat) in self.metrics() {
            let _ = writeln!(
                out,
                "{name:<18} {:>7.3}% ± {:.3} (std across batches {:.3})",
                100.0 * stat.value,
                100.0 * stat.std_error,
                100.0 * stat.batch_std
            );
        }
        if let Some(nll) = &self.nll {
            let _ = writeln!(out, "nll_bound          {:.3} ± {:.3} over {}", nll.mean, nll.std_error, nll.count);
        }
        for (k, v) in &self.provenance {
            let _ = writeln!(out, "{k:<18} {v}");
        }
        out
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "sample_count={}", self.sample_count);
        let _ = writeln!(out, "atom_count={}", self.atom_count);
        let _ = writeln!(out, "stable_atom_count={}", self.stable_atom_count);
        let _ = writeln!(out, "stable_molecule_count={}", self.stable_molecule_count);
        let _ = writeln!(out, "valid_count={}", self.valid_count);
        let _ = writeln!(out, "unique_count={}", self.unique_count);
        let _ = writeln!(out, "batches={}", self.batches);
        for (name, stat) in self.metrics() {
            let _ = writeln!(out, "{name}={:.10}", stat.value);
            let _ = writeln!(out, "{name}_std_error={:.10}", stat.std_error);
            let _ = writeln!(out, "{name}_batch_std={:.10}", stat.batch_std);
        }
        if let Some(nll) = &self.nll {
            let _ = writeln!(out, "nll_bound={:.10}", nll.mean);
            let _ = writeln!(out, "nll_bound_std_error={:.10}", nll.std_error);
            let _ = writeln!(out, "nll_bound_count={}", nll.count);
        }
        for (k, v) in &self.provenance {
            let _ = writeln!(out, "provenance.{k}={v}");
        }
        out
    }

    fn metrics(&self) -> [(&'static str, MetricStat); 4] {
        [
            ("atom_stability", self.atom_stability),
            ("mol_stability", self.mol_stability),
            ("validity", self.validity),
            ("valid_and_unique", self.valid_and_unique),
        ]
    }
}

/// Computes all metrics. Samples are split into `config.batches` contiguous
/// batches of near-equal size to estimate spread; pooled values use every
/// sample. Uniqueness is judged within each batch for the spread and over
/// all samples for the pooled value.
pub fn evaluate_samples(samples: &[MoleculeGraph], config: &EvalConfig) -> Result<GenerationReport> {
    let metrics = samples
        .par_iter()
        .map(|m| molecule_metrics(m, &config.bonds, &config.valences))
        .collect::<Result<Vec<_>>>()?;
    let pooled = Aggregate::from_metrics(&metrics);
    let batches = config.batches.max(1).min(metrics.len().max(1));
    let mut per_batch: Vec<Aggregate> = Vec::with_capacity(batches);
    for b in 0..batches {
        let lo = b * metrics.len() / batches;
        let hi = (b + 1) * metrics.len() / batches;
        per_batch.push(Aggregate::from_metrics(&metrics[lo..hi]));
    }
    let stat = |f: fn(&Aggregate) -> f64| {
        let values: Vec<f64> = per_batch.iter().map(f).collect();
        MetricStat::new(f(&pooled), &values)
    };
    Ok(GenerationReport {
        sample_count: pooled.molecules,
        atom_count: pooled.atoms,
        stable_atom_count: pooled.stable_atoms,
        stable_molecule_count: pooled.stable_molecules,
        valid_count: pooled.valid,
        unique_count: pooled.unique,
        atom_stability: stat(Aggregate::atom_stability),
        mol_stability: stat(Aggregate::mol_stability),
        validity: stat(Aggregate::validity),
        valid_and_unique: stat(Aggregate::valid_and_unique),
        batches,
        nll: None,
        provenance: BTreeMap::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn methane() -> MoleculeGraph {
        let d = 1.09 / 3f64.sqrt();
        let coords = array![[0.0, 0.0, 0.0], [d, d, d], [d, -d, -d], [-d, d, -d], [-d, -d, d]];
        let els = vec![Element::C, Element::H, Element::H, Element::H, Element::H];
        MoleculeGraph::with_atomic_charges("methane", coords, els).unwrap()
    }

    #[test]
    fn bundled_tables_load() {
        let t = BondTable::standard();
        assert_eq!(t.lengths(Element::C, Element::H), Some([Some(109.0), None, None]));
        assert_eq!(t.lengths(Element::N, Element::C), t.lengths(Element::C, Element::N));
        let v = ValenceTable::standard();
        assert_eq!(v.max(Element::C), 4);
        assert!(v.is_allowed(Element::O, 2));
    }

    #[test]
    fn single_carbon_bond() {
        let t = BondTable::standard();
        assert_eq!(t.order(Element::C, Element::C, 1.54).unwrap(), 1);
        assert_eq!(t.order(Element::C, Element::C, 1.34).unwrap(), 2);
        assert_eq!(t.order(Element::C, Element::C, 1.20).unwrap(), 3);
        assert_eq!(t.order(Element::O, Element::H, 5.0).unwrap(), 0);
    }

    #[test]
    fn methane_is_stable_and_valid() {
        let m = methane();
        let (bonds, valences) = (BondTable::standard(), ValenceTable::standard());
        let b = infer_bonds(&m, &bonds).unwrap();
        assert_eq!(atom_stability(&m, &b, &valences), 1.0);
        assert!(molecule_stability(&m, &b, &valences));
        assert!(is_valid(&m, &b, &valences));
    }

    #[test]
    fn broken_methane_is_unstable() {
        let m = methane();
        let coords = m.coords().slice(ndarray::s![..4, ..]).to_owned();
        let broken = MoleculeGraph::with_atomic_charges("ch3", coords, m.elements()[..4].to_vec()).unwrap();
        let valences = ValenceTable::standard();
        let b = infer_bonds(&broken, &BondTable::standard()).unwrap();
        assert!(!molecule_stability(&broken, &b, &valences));
        assert_eq!(atom_stability(&broken, &b, &valences), 0.75);
    }

    #[test]
    fn isolated_carbon() {
        let m = MoleculeGraph::with_atomic_charges("c", Array2::zeros((1, 3)), vec![Element::C]).unwrap();
        let b = infer_bonds(&m, &BondTable::standard()).unwrap();
        assert_eq!(atom_stability(&m, &b, &ValenceTable::standard()), 0.0);
    }

    #[test]
    fn duplicates_collapse() {
        let samples = vec![methane(); 10];
        let (v, u) = validity_and_uniqueness(&samples, &BondTable::standard(), &ValenceTable::standard()).unwrap();
        assert_eq!(v, 1.0);
        assert_eq!(u, 0.1);
    }

    #[test]
    fn empty_valid_subset() {
        let m = MoleculeGraph::with_atomic_charges(
            "far",
            array![[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]],
            vec![Element::C, Element::C],
        )
        .unwrap();
        let report = evaluate_samples(&[m], &EvalConfig::default()).unwrap();
        assert_eq!(report.validity.value, 0.0);
        assert_eq!(report.valid_and_unique.value, 0.0);
        let empty = evaluate_samples(&[], &EvalConfig::default()).unwrap();
        assert_eq!(empty.sample_count, 0);
        assert_eq!(empty.atom_stability.value, 0.0);
    }

    #[test]
    fn missing_pair_is_named() {
        let t = BondTable::from_toml("[margins]\nsingle=10.0\ndouble=5.0\ntriple=3.0\n[single]\n\"C-C\"=154.0\n").unwrap();
        let err = t.order(Element::C, Element::F, 1.0).unwrap_err().to_string();
        assert!(err.contains('C') && err.contains('F'), "{err}");
    }

    #[test]
    fn malformed_tables_rejected() {
        let increasing = "[margins]\nsingle=10.0\ndouble=5.0\ntriple=3.0\n[single]\n\"C-C\"=120.0\n[double]\n\"C-C\"=134.0\n";
        assert!(BondTable::from_toml(increasing).is_err());
        assert!(ValenceTable::from_toml("C = []\n").is_err());
        assert!(ValenceTable::from_toml("Si = [4]\n").is_err());
    }

    #[test]
    fn report_kv_lists_every_metric() {
        let report = evaluate_samples(&vec![methane(); 4], &EvalConfig { batches: 2, ..Default::default() }).unwrap();
        let kv = report.to_kv();
        for key in ["atom_stability=", "mol_stability=", "validity=", "valid_and_unique="] {
            assert!(kv.contains(key));
        }
        assert!(report.valid_and_unique.value <= report.validity.value);
    }
}
