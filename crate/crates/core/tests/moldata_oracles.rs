use std::path::{Path, PathBuf};

use gcdm::moldata::{
    compute_size_distribution, parse_internal, split_seeded, write_internal, FeatureScaler, MoleculeGraph, SplitSizes,
};
use proptest::prelude::*;

fn excerpt() -> Vec<MoleculeGraph> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/qm9_excerpt_1k.mol");
    parse_internal(&std::fs::read_to_string(&path).unwrap(), &path).unwrap()
}

#[test]
fn features_round_trip_on_the_excerpt() {
    let scaler = FeatureScaler::default();
    let mols = excerpt();
    assert_eq!(mols.len(), 1000);
    for mol in &mols {
        let decoded = scaler.decode(&scaler.encode(mol)).unwrap();
        assert_eq!(decoded.elements, mol.elements());
        assert_eq!(decoded.charges, mol.charges());
        assert!(decoded.ties.iter().all(|t| !t));
    }
}

#[test]
fn internal_format_round_trips_the_excerpt() {
    let mols = excerpt();
    let mut bytes = Vec::new();
    write_internal(&mut bytes, &mols).unwrap();
    let back = parse_internal(std::str::from_utf8(&bytes).unwrap(), Path::new("x.mol")).unwrap();
    assert_eq!(back, mols);
}

#[test]
fn seeded_split_manifest_is_byte_identical() {
    let sizes = Some(SplitSizes { train: 800, val: 100, test: 100 });
    let a = split_seeded(excerpt(), 11, sizes).unwrap().manifest().to_text();
    let b = split_seeded(excerpt(), 11, sizes).unwrap().manifest().to_text();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn size_distribution_is_normalized(picks in prop::collection::vec(0usize..1000, 1..200)) {
        let all = excerpt();
        let mols: Vec<MoleculeGraph> = picks.iter().map(|&i| all[i].clone()).collect();
        let dist = compute_size_distribution(&mols).unwrap();
        let total: f64 = dist.probs().values().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(dist.counts().values().all(|&c| c > 0));
        prop_assert_eq!(dist.counts().values().sum::<u64>(), mols.len() as u64);
    }
}
