//! Fixed atom (70) and bond (9) feature layouts.
//!
//! Atom row: element (10) | degree (6) | formal charge (5) | hybridization (5)
//! | aromatic (1) | ring (1) | H count (5) | extended block (37).
//!
//! The extended block is chirality flag (1) | mass/100 (1) | Pauling
//! electronegativity/4 (1) | period (5) | main group (8) | smallest-ring size
//! 3..=8 flags (6) | radical electrons {0, 1, 2+} (3) | zero padding (12).
//!
//! Bond row: type {single, double, triple, aromatic} (4) | conjugated (1) |
//! ring (1) | stereo {none, E, Z} (3).

use std::ops::Range;

use super::{Atom, Bond, BondOrder, BondStereo, Element, Hybridization, MolGraph};

pub const ATOM_FEATURES: usize = 70;
pub const BOND_FEATURES: usize = 9;

/// Column ranges of the atom feature row.
pub struct AtomFeatureLayout;

impl AtomFeatureLayout {
    pub const ELEMENT: Range<usize> = 0..10;
    pub const DEGREE: Range<usize> = 10..16;
    pub const CHARGE: Range<usize> = 16..21;
    pub const HYBRIDIZATION: Range<usize> = 21..26;
    pub const AROMATIC: usize = 26;
    pub const RING: usize = 27;
    pub const HYDROGENS: Range<usize> = 28..33;
    pub const CHIRAL: usize = 33;
    pub const MASS: usize = 34;
    pub const ELECTRONEGATIVITY: usize = 35;
    pub const PERIOD: Range<usize> = 36..41;
    pub const GROUP: Range<usize> = 41..49;
    pub const RING_SIZE: Range<usize> = 49..55;
    pub const RADICAL: Range<usize> = 55..58;
    pub const PADDING: Range<usize> = 58..70;

    /// Blocks that must hold exactly one set entry in every row.
    pub const ONE_HOT_BLOCKS: [Range<usize>; 8] = [
        Self::ELEMENT,
        Self::DEGREE,
        Self::CHARGE,
        Self::HYBRIDIZATION,
        Self::HYDROGENS,
        Self::PERIOD,
        Self::GROUP,
        Self::RADICAL,
    ];
}

/// Bond column ranges, mirroring [`AtomFeatureLayout`].
pub mod bond_layout {
    use std::ops::Range;
    pub const TYPE: Range<usize> = 0..4;
    pub const CONJUGATED: usize = 4;
    pub const RING: usize = 5;
    pub const STEREO: Range<usize> = 6..9;
}

/// Returns copies of the |V| x 70 atom and |E| x 9 bond feature matrices.
pub fn featurize(m: &MolGraph) -> (Vec<f64>, Vec<f64>) {
    (m.atom_features().to_vec(), m.bond_features().to_vec())
}

fn element_slot(e: Element) -> usize {
    match e {
        Element::C => 0,
        Element::N => 1,
        Element::O => 2,
        Element::S => 3,
        Element::F => 4,
        Element::CL => 5,
        Element::BR => 6,
        Element::I => 7,
        Element::P => 8,
        _ => 9,
    }
}

fn atom_row(a: &Atom, row: &mut [f64]) {
    use AtomFeatureLayout as L;
    row[L::ELEMENT.start + element_slot(a.element)] = 1.0;
    row[L::DEGREE.start + (a.degree as usize).min(5)] = 1.0;
    row[L::CHARGE.start + (a.formal_charge.clamp(-2, 2) + 2) as usize] = 1.0;
    let hyb = match a.hybridization {
        Hybridization::Sp => 0,
        Hybridization::Sp2 => 1,
        Hybridization::Sp3 => 2,
        Hybridization::Sp3d => 3,
        Hybridization::Sp3d2 => 4,
    };
    row[L::HYBRIDIZATION.start + hyb] = 1.0;
    row[L::AROMATIC] = a.aromatic as u8 as f64;
    row[L::RING] = a.in_ring as u8 as f64;
    row[L::HYDROGENS.start + (a.hydrogens as usize).min(4)] = 1.0;

    let info = a.element.info();
    row[L::CHIRAL] = a.chiral as u8 as f64;
    row[L::MASS] = info.mass / 100.0;
    row[L::ELECTRONEGATIVITY] = info.electronegativity / 4.0;
    row[L::PERIOD.start + info.period as usize - 1] = 1.0;
    row[L::GROUP.start + info.main_group as usize - 1] = 1.0;
    for k in 0..6 {
        if a.ring_sizes & (1 << k) != 0 {
            row[L::RING_SIZE.start + k] = 1.0;
        }
    }
    row[L::RADICAL.start + (a.radical_electrons as usize).min(2)] = 1.0;
}

fn bond_row(b: &Bond, row: &mut [f64]) {
    let t = match b.order {
        BondOrder::Single => 0,
        BondOrder::Double => 1,
        BondOrder::Triple => 2,
        BondOrder::Aromatic => 3,
    };
    row[bond_layout::TYPE.start + t] = 1.0;
    row[bond_layout::CONJUGATED] = b.conjugated as u8 as f64;
    row[bond_layout::RING] = b.in_ring as u8 as f64;
    let s = match b.stereo {
        BondStereo::None => 0,
        BondStereo::E => 1,
        BondStereo::Z => 2,
    };
    row[bond_layout::STEREO.start + s] = 1.0;
}

pub(crate) fn compute(atoms: &[Atom], bonds: &[Bond]) -> (Vec<f64>, Vec<f64>) {
    let mut af = vec![0.0; atoms.len() * ATOM_FEATURES];
    for (a, row) in atoms.iter().zip(af.chunks_mut(ATOM_FEATURES)) {
        atom_row(a, row);
    }
    let mut bf = vec![0.0; bonds.len() * BOND_FEATURES];
    for (b, row) in bonds.iter().zip(bf.chunks_mut(BOND_FEATURES)) {
        bond_row(b, row);
    }
    (af, bf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::parse_smiles;

    #[test]
    fn methane_carbon_row() {
        let m = parse_smiles("C").unwrap();
        let row = m.atom_feature_row(0);
        assert_eq!(row[AtomFeatureLayout::ELEMENT.start], 1.0);
        assert_eq!(row[AtomFeatureLayout::DEGREE.start], 1.0);
        assert_eq!(row[AtomFeatureLayout::HYDROGENS.start + 4], 1.0);
        assert_eq!(row[AtomFeatureLayout::AROMATIC], 0.0);
        assert_eq!(row.len(), ATOM_FEATURES);
    }

    #[test]
    fn benzene_bond_row() {
        let m = parse_smiles("c1ccccc1").unwrap();
        for b in 0..m.num_bonds() {
            let row = m.bond_feature_row(b);
            assert_eq!(&row[bond_layout::TYPE], &[0.0, 0.0, 0.0, 1.0]);
            assert_eq!(row[bond_layout::CONJUGATED], 1.0);
            assert_eq!(row[bond_layout::RING], 1.0);
            assert_eq!(&row[bond_layout::STEREO], &[1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn one_hot_blocks_sum_to_one() {
        for smi in ["C", "CC(=O)O", "c1ccccc1", "[NH4+]", "C#N", "F/C=C/F", "[O-]C(=O)c1ccncc1", "[Na+]"] {
            let m = parse_smiles(smi).unwrap();
            for i in 0..m.num_atoms() {
                let row = m.atom_feature_row(i);
                for block in AtomFeatureLayout::ONE_HOT_BLOCKS {
                    let s: f64 = row[block.clone()].iter().sum();
                    assert_eq!(s, 1.0, "{smi} atom {i} block {block:?}");
                }
                assert!(row[AtomFeatureLayout::PADDING].iter().all(|&v| v == 0.0));
            }
            for b in 0..m.num_bonds() {
                let row = m.bond_feature_row(b);
                assert_eq!(row[bond_layout::TYPE].iter().sum::<f64>(), 1.0);
                assert_eq!(row[bond_layout::STEREO].iter().sum::<f64>(), 1.0);
            }
        }
    }

    #[test]
    fn high_degree_uses_last_bucket() {
        let m = parse_smiles("[S](F)(F)(F)(F)(F)F").unwrap();
        let row = m.atom_feature_row(0);
        assert_eq!(row[AtomFeatureLayout::DEGREE.end - 1], 1.0);
        assert_eq!(row[AtomFeatureLayout::HYBRIDIZATION.start + 4], 1.0);
    }

    #[test]
    fn stereo_and_ring_size_flags() {
        let m = parse_smiles("F/C=C/F").unwrap();
        let db = m.bonds().iter().position(|b| b.order == BondOrder::Double).unwrap();
        assert_eq!(m.bond_feature_row(db)[bond_layout::STEREO.start + 1], 1.0);
        let m = parse_smiles("C1CC1").unwrap();
        assert_eq!(m.atom_feature_row(0)[AtomFeatureLayout::RING_SIZE.start], 1.0);
    }
}
