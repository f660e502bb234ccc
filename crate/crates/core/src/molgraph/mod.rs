//! Molecular graphs: SMILES parsing, canonical identity and the fixed
//! atom/bond featurization consumed by the encoder.

mod canon;
mod element;
mod features;
mod rings;
mod smiles;

pub use canon::{canonical_form, canonical_form_with, molecule_equal, CanonOptions, CanonicalForm};
pub use element::{Element, ElementInfo, ELEMENTS};
pub use features::{featurize, AtomFeatureLayout, ATOM_FEATURES, BOND_FEATURES};
pub use smiles::parse_smiles;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SmilesError {
    #[error("syntax error at position {position}: {reason}")]
    Syntax { position: usize, reason: String },
    #[error("unsupported feature at position {position}: {feature}")]
    UnsupportedFeature { position: usize, feature: String },
    #[error("valence error on atom {atom} ({symbol}): bond order sum {bond_sum} exceeds allowed valence")]
    Valence {
        atom: usize,
        symbol: String,
        bond_sum: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Small integer code used by hashing and canonical ranking.
    pub fn code(self) -> u8 {
        match self {
            BondOrder::Single => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
            BondOrder::Aromatic => 4,
        }
    }

    /// Valence contribution in half-units (aromatic = 1.5 -> 3).
    fn half_valence(self) -> u32 {
        match self {
            BondOrder::Single => 2,
            BondOrder::Double => 4,
            BondOrder::Triple => 6,
            BondOrder::Aromatic => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum BondStereo {
    #[default]
    None,
    /// Reference substituents on opposite sides.
    E,
    /// Reference substituents on the same side.
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Hybridization {
    Sp,
    Sp2,
    #[default]
    Sp3,
    Sp3d,
    Sp3d2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub element: Element,
    pub formal_charge: i8,
    /// Heavy-atom degree (hydrogens are implicit).
    pub degree: u8,
    pub hydrogens: u8,
    pub aromatic: bool,
    pub in_ring: bool,
    pub hybridization: Hybridization,
    /// A tetrahedral tag (`@`/`@@`) was written for this atom.
    pub chiral: bool,
    /// Bitmask of smallest-ring sizes 3..=8 the atom takes part in (bit k-3).
    pub ring_sizes: u8,
    pub radical_electrons: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bond {
    pub begin: usize,
    pub end: usize,
    pub order: BondOrder,
    pub conjugated: bool,
    pub in_ring: bool,
    pub stereo: BondStereo,
    /// Substituents (neighbor of `begin`, neighbor of `end`) that `stereo` refers to.
    pub stereo_atoms: Option<(usize, usize)>,
}

impl Bond {
    pub fn other(&self, atom: usize) -> usize {
        if self.begin == atom {
            self.end
        } else {
            self.begin
        }
    }
}

/// An immutable molecular graph with its feature matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct MolGraph {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    /// Per atom: (neighbor, bond index).
    adjacency: Vec<Vec<(usize, usize)>>,
    atom_features: Vec<f64>,
    bond_features: Vec<f64>,
}

/// Attribute-level description of an atom, before derived properties are
/// computed. Used by the parser and by tests that build graphs directly.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomSpec {
    pub element: Element,
    pub formal_charge: i8,
    pub hydrogens: u8,
    pub aromatic: bool,
    pub chiral: bool,
    pub radical_electrons: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BondSpec {
    pub begin: usize,
    pub end: usize,
    pub order: BondOrder,
    pub stereo: BondStereo,
    pub stereo_atoms: Option<(usize, usize)>,
}

impl MolGraph {
    /// Builds a graph from atom and bond descriptions, deriving degrees, ring
    /// membership, conjugation, hybridization and the feature matrices.
    ///
    /// Panics if a bond references a missing atom or connects an atom to itself.
    pub fn from_specs(atoms: Vec<AtomSpec>, bonds: Vec<BondSpec>) -> MolGraph {
        let n = atoms.len();
        let mut adjacency = vec![Vec::new(); n];
        for (i, b) in bonds.iter().enumerate() {
            assert!(b.begin < n && b.end < n, "bond endpoint out of range");
            assert_ne!(b.begin, b.end, "self loop");
            adjacency[b.begin].push((b.end, i));
            adjacency[b.end].push((b.begin, i));
        }
        let ring_info = rings::RingInfo::compute(n, &bonds, &adjacency);

        let has_multiple = |atom: usize, except: usize| {
            adjacency[atom]
                .iter()
                .any(|&(_, bi)| bi != except && bonds[bi].order != BondOrder::Single)
        };
        let out_bonds: Vec<Bond> = bonds
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let conjugated = match b.order {
                    BondOrder::Aromatic => true,
                    BondOrder::Single => has_multiple(b.begin, i) && has_multiple(b.end, i),
                    _ => has_multiple(b.begin, i) || has_multiple(b.end, i),
                };
                Bond {
                    begin: b.begin,
                    end: b.end,
                    order: b.order,
                    conjugated,
                    in_ring: ring_info.bond_in_ring[i],
                    stereo: b.stereo,
                    stereo_atoms: b.stereo_atoms,
                }
            })
            .collect();

        let out_atoms: Vec<Atom> = atoms
            .into_iter()
            .enumerate()
            .map(|(i, spec)| {
                let degree = adjacency[i].len();
                let mut doubles = 0;
                let mut triples = 0;
                for &(_, bi) in &adjacency[i] {
                    match bonds[bi].order {
                        BondOrder::Double => doubles += 1,
                        BondOrder::Triple => triples += 1,
                        _ => {}
                    }
                }
                let total = degree + spec.hydrogens as usize;
                let hybridization = if spec.aromatic {
                    Hybridization::Sp2
                } else if triples > 0 || doubles >= 2 {
                    Hybridization::Sp
                } else if doubles == 1 {
                    Hybridization::Sp2
                } else if total >= 6 {
                    Hybridization::Sp3d2
                } else if total == 5 {
                    Hybridization::Sp3d
                } else {
                    Hybridization::Sp3
                };
                Atom {
                    element: spec.element,
                    formal_charge: spec.formal_charge,
                    degree: degree.min(u8::MAX as usize) as u8,
                    hydrogens: spec.hydrogens,
                    aromatic: spec.aromatic,
                    in_ring: ring_info.atom_in_ring[i],
                    hybridization,
                    chiral: spec.chiral,
                    ring_sizes: ring_info.atom_ring_sizes[i],
                    radical_electrons: spec.radical_electrons,
                }
            })
            .collect();

        let (atom_features, bond_features) = features::compute(&out_atoms, &out_bonds);
        MolGraph {
            atoms: out_atoms,
            bonds: out_bonds,
            adjacency,
            atom_features,
            bond_features,
        }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn num_bonds(&self) -> usize {
        self.bonds.len()
    }

    /// (neighbor, bond index) pairs for `atom`.
    pub fn neighbors(&self, atom: usize) -> &[(usize, usize)] {
        &self.adjacency[atom]
    }

    /// Row-major |V| x 70 atom feature matrix.
    pub fn atom_features(&self) -> &[f64] {
        &self.atom_features
    }

    /// Row-major |E| x 9 bond feature matrix.
    pub fn bond_features(&self) -> &[f64] {
        &self.bond_features
    }

    pub fn atom_feature_row(&self, atom: usize) -> &[f64] {
        &self.atom_features[atom * ATOM_FEATURES..(atom + 1) * ATOM_FEATURES]
    }

    pub fn bond_feature_row(&self, bond: usize) -> &[f64] {
        &self.bond_features[bond * BOND_FEATURES..(bond + 1) * BOND_FEATURES]
    }

    /// Attribute specs that reproduce this graph through [`MolGraph::from_specs`].
    pub fn specs(&self) -> (Vec<AtomSpec>, Vec<BondSpec>) {
        let atoms = self
            .atoms
            .iter()
            .map(|a| AtomSpec {
                element: a.element,
                formal_charge: a.formal_charge,
                hydrogens: a.hydrogens,
                aromatic: a.aromatic,
                chiral: a.chiral,
                radical_electrons: a.radical_electrons,
            })
            .collect();
        let bonds = self
            .bonds
            .iter()
            .map(|b| BondSpec {
                begin: b.begin,
                end: b.end,
                order: b.order,
                stereo: b.stereo,
                stereo_atoms: b.stereo_atoms,
            })
            .collect();
        (atoms, bonds)
    }

    /// Returns the same molecule with atoms renumbered so that old atom `i`
    /// becomes `perm[i]`. Bond order in storage follows the original order.
    pub fn permuted(&self, perm: &[usize]) -> MolGraph {
        assert_eq!(perm.len(), self.num_atoms());
        let (atoms, bonds) = self.specs();
        let mut new_atoms: Vec<Option<AtomSpec>> = vec![None; atoms.len()];
        for (i, a) in atoms.into_iter().enumerate() {
            new_atoms[perm[i]] = Some(a);
        }
        let new_bonds = bonds
            .into_iter()
            .map(|b| BondSpec {
                begin: perm[b.begin],
                end: perm[b.end],
                stereo_atoms: b.stereo_atoms.map(|(x, y)| (perm[x], perm[y])),
                ..b
            })
            .collect();
        MolGraph::from_specs(
            new_atoms.into_iter().map(|a| a.expect("perm is a permutation")).collect(),
            new_bonds,
        )
    }

    /// Copy with every double-bond stereo flag removed.
    pub fn without_stereo(&self) -> MolGraph {
        let (mut atoms, mut bonds) = self.specs();
        for a in &mut atoms {
            a.chiral = false;
        }
        for b in &mut bonds {
            b.stereo = BondStereo::None;
            b.stereo_atoms = None;
        }
        MolGraph::from_specs(atoms, bonds)
    }
}
