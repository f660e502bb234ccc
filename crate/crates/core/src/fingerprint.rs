//! Circular (Morgan-style) fingerprints and Tanimoto similarity.
//!
//! Environment identifiers are 64-bit values produced by [`mix64`], a
//! SplitMix64-style finalizer folded over a sequence of words. Radius-0
//! identifiers hash the atom invariant (atomic number, heavy degree, H
//! count, formal charge, aromatic, ring). Each later radius hashes the
//! previous identifier with the sorted (bond code, neighbor identifier)
//! pairs. Every (atom, radius) identifier sets bit `id % nbits`.

use std::fmt::Write as _;

use thiserror::Error;

use crate::molgraph::{CanonicalForm, MolGraph};

pub const DEFAULT_RADIUS: u32 = 2;
pub const DEFAULT_NBITS: usize = 2048;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FingerprintError {
    #[error("radius {radius} or nbits {nbits} out of range (radius 0..=4, nbits in 512/1024/2048/4096)")]
    Parameter { radius: u32, nbits: usize },
    #[error("fingerprints have different shapes: ({0}, r={1}) vs ({2}, r={3})")]
    Shape(usize, u32, usize, u32),
    #[error("nearest-neighbor pool is empty")]
    EmptyPool,
    #[error("malformed fingerprint line {line}: {reason}")]
    Format { line: usize, reason: String },
}

/// A fixed-length binary fingerprint.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Fingerprint {
    words: Vec<u64>,
    nbits: usize,
    radius: u32,
    set_count: u32,
}

impl Fingerprint {
    pub fn empty(nbits: usize, radius: u32) -> Fingerprint {
        assert!(nbits.is_power_of_two() && nbits >= 64);
        Fingerprint {
            words: vec![0; nbits / 64],
            nbits,
            radius,
            set_count: 0,
        }
    }

    /// Builds a fingerprint with the given bit positions set.
    pub fn from_bits(nbits: usize, radius: u32, bits: impl IntoIterator<Item = usize>) -> Fingerprint {
        let mut fp = Fingerprint::empty(nbits, radius);
        for b in bits {
            fp.set(b % nbits);
        }
        fp
    }

    fn set(&mut self, bit: usize) {
        let (w, mask) = (bit / 64, 1u64 << (bit % 64));
        if self.words[w] & mask == 0 {
            self.words[w] |= mask;
            self.set_count += 1;
        }
    }

    pub fn get(&self, bit: usize) -> bool {
        self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn nbits(&self) -> usize {
        self.nbits
    }

    pub fn radius(&self) -> u32 {
        self.radius
    }

    pub fn set_count(&self) -> u32 {
        self.set_count
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nbits).filter(move |&b| self.get(b))
    }

    /// Dense 0/1 vector, used as random-forest input.
    pub fn to_dense(&self) -> Vec<u8> {
        (0..self.nbits).map(|b| self.get(b) as u8).collect()
    }

    /// Lowercase hex of the little-endian byte layout (bit i lives in byte i/8).
    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(self.nbits / 4);
        for w in &self.words {
            for byte in w.to_le_bytes() {
                write!(s, "{byte:02x}").unwrap();
            }
        }
        s
    }

    pub fn from_hex(hex: &str, radius: u32) -> Option<Fingerprint> {
        if hex.len() % 16 != 0 || hex.is_empty() {
            return None;
        }
        let nbits = hex.len() * 4;
        if !nbits.is_power_of_two() {
            return None;
        }
        let mut fp = Fingerprint::empty(nbits, radius);
        for (wi, chunk) in hex.as_bytes().chunks(16).enumerate() {
            let mut bytes = [0u8; 8];
            for (i, pair) in chunk.chunks(2).enumerate() {
                let s = std::str::from_utf8(pair).ok()?;
                bytes[i] = u8::from_str_radix(s, 16).ok()?;
            }
            fp.words[wi] = u64::from_le_bytes(bytes);
        }
        fp.set_count = fp.words.iter().map(|w| w.count_ones()).sum();
        Some(fp)
    }
}

/// SplitMix64 finalizer.
fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive 64-bit hash of a word sequence.
pub fn mix64(words: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &w in words {
        h = finalize(h ^ w.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2));
    }
    finalize(h)
}

/// Per-atom environment identifiers for radii 0..=radius, indexed [r][atom].
pub fn environment_ids(m: &MolGraph, radius: u32) -> Vec<Vec<u64>> {
    let mut layers = Vec::with_capacity(radius as usize + 1);
    let base: Vec<u64> = m
        .atoms()
        .iter()
        .map(|a| {
            mix64(&[
                a.element.atomic_number() as u64,
                a.degree as u64,
                a.hydrogens as u64,
                (a.formal_charge as i64) as u64,
                a.aromatic as u64,
                a.in_ring as u64,
            ])
        })
        .collect();
    layers.push(base);
    for r in 1..=radius {
        let prev = layers.last().unwrap();
        let next: Vec<u64> = (0..m.num_atoms())
            .map(|v| {
                let mut nb: Vec<(u64, u64)> = m
                    .neighbors(v)
                    .iter()
                    .map(|&(u, bi)| (m.bonds()[bi].order.code() as u64, prev[u]))
                    .collect();
                nb.sort_unstable();
                let mut words = Vec::with_capacity(2 + 2 * nb.len());
                words.push(r as u64);
                words.push(prev[v]);
                for (code, id) in nb {
                    words.push(code);
                    words.push(id);
                }
                mix64(&words)
            })
            .collect();
        layers.push(next);
    }
    layers
}

pub fn morgan_fingerprint(m: &MolGraph, radius: u32, nbits: usize) -> Result<Fingerprint, FingerprintError> {
    if radius > 4 || ![512, 1024, 2048, 4096].contains(&nbits) {
        return Err(FingerprintError::Parameter { radius, nbits });
    }
    let mut fp = Fingerprint::empty(nbits, radius);
    for layer in environment_ids(m, radius) {
        for id in layer {
            fp.set((id % nbits as u64) as usize);
        }
    }
    Ok(fp)
}

fn check_shape(a: &Fingerprint, b: &Fingerprint) -> Result<(), FingerprintError> {
    if a.nbits != b.nbits || a.radius != b.radius {
        return Err(FingerprintError::Shape(a.nbits, a.radius, b.nbits, b.radius));
    }
    Ok(())
}

fn tanimoto_unchecked(a: &Fingerprint, b: &Fingerprint) -> f64 {
    let inter: u32 = a.words.iter().zip(&b.words).map(|(x, y)| (x & y).count_ones()).sum();
    let union = a.set_count + b.set_count - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// |a ∩ b| / |a ∪ b|, and 1.0 for two empty fingerprints.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64, FingerprintError> {
    check_shape(a, b)?;
    Ok(tanimoto_unchecked(a, b))
}

/// Highest similarity in `pool`, ties resolved to the lowest index.
pub fn nn_similarity(query: &Fingerprint, pool: &[Fingerprint]) -> Result<(f64, usize), FingerprintError> {
    if pool.is_empty() {
        return Err(FingerprintError::EmptyPool);
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, p) in pool.iter().enumerate() {
        check_shape(query, p)?;
        let s = tanimoto_unchecked(query, p);
        if s > best.0 {
            best = (s, i);
        }
    }
    Ok(best)
}

/// Max Tanimoto of each test fingerprint to any training active.
pub fn one_nn_scores(train_actives: &[Fingerprint], test: &[Fingerprint]) -> Result<Vec<f64>, FingerprintError> {
    if train_actives.is_empty() {
        return Err(FingerprintError::EmptyPool);
    }
    test.iter()
        .map(|q| nn_similarity(q, train_actives).map(|(s, _)| s))
        .collect()
}

/// Writes the cache format: one `<canonical form>\t<hex bits>` line per molecule.
pub fn write_fingerprint_file<W: std::io::Write>(
    mut out: W,
    rows: &[(CanonicalForm, Fingerprint)],
) -> std::io::Result<()> {
    for (cf, fp) in rows {
        writeln!(out, "{}\t{}", cf.text, fp.to_hex())?;
    }
    Ok(())
}

pub fn read_fingerprint_file(text: &str, radius: u32) -> Result<Vec<(CanonicalForm, Fingerprint)>, FingerprintError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let (cf, hex) = line.split_once('\t').ok_or_else(|| FingerprintError::Format {
                line: i + 1,
                reason: "missing tab separator".into(),
            })?;
            let fp = Fingerprint::from_hex(hex, radius).ok_or_else(|| FingerprintError::Format {
                line: i + 1,
                reason: "invalid hex bitset".into(),
            })?;
            Ok((CanonicalForm { text: cf.to_string() }, fp))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{canonical_form, parse_smiles};
    use proptest::prelude::*;

    fn fp(s: &str, r: u32) -> Fingerprint {
        morgan_fingerprint(&parse_smiles(s).unwrap(), r, 2048).unwrap()
    }

    #[test]
    fn methane_radius_zero_sets_one_bit() {
        assert_eq!(fp("C", 0).set_count(), 1);
    }

    #[test]
    fn ethane_environments_are_symmetric() {
        // Both carbons share the radius-0 and radius-1 identifiers.
        let m = parse_smiles("CC").unwrap();
        let ids = environment_ids(&m, 1);
        assert_eq!(ids[0][0], ids[0][1]);
        assert_eq!(ids[1][0], ids[1][1]);
        assert!(fp("CC", 1).set_count() <= 2);
    }

    #[test]
    fn deterministic_and_parameter_checked() {
        assert_eq!(fp("c1ccccc1O", 2), fp("Oc1ccccc1", 2));
        let m = parse_smiles("CCO").unwrap();
        assert!(matches!(morgan_fingerprint(&m, 5, 2048), Err(FingerprintError::Parameter { .. })));
        assert!(matches!(morgan_fingerprint(&m, 2, 1000), Err(FingerprintError::Parameter { .. })));
    }

    #[test]
    fn tanimoto_cases() {
        let a = Fingerprint::from_bits(512, 2, [1, 2, 3]);
        let b = Fingerprint::from_bits(512, 2, [2, 3, 4]);
        assert_eq!(tanimoto(&a, &a).unwrap(), 1.0);
        assert_eq!(tanimoto(&a, &b).unwrap(), 0.5);
        let c = Fingerprint::from_bits(512, 2, [10, 11]);
        assert_eq!(tanimoto(&a, &c).unwrap(), 0.0);
        let e = Fingerprint::empty(512, 2);
        assert_eq!(tanimoto(&e, &e).unwrap(), 1.0);
        let other = Fingerprint::from_bits(1024, 2, [1]);
        assert!(matches!(tanimoto(&a, &other), Err(FingerprintError::Shape(..))));
    }

    #[test]
    fn nearest_neighbor_ties_and_errors() {
        let q = Fingerprint::from_bits(512, 2, [1, 2]);
        let disjoint = Fingerprint::from_bits(512, 2, [7]);
        let pool = vec![disjoint.clone(), q.clone(), q.clone()];
        assert_eq!(nn_similarity(&q, &pool).unwrap(), (1.0, 1));
        assert_eq!(nn_similarity(&q, &[disjoint.clone()]).unwrap(), (0.0, 0));
        assert!(matches!(nn_similarity(&q, &[]), Err(FingerprintError::EmptyPool)));
        let scores = one_nn_scores(&[q.clone()], &[q.clone(), disjoint]).unwrap();
        assert_eq!(scores, vec![1.0, 0.0]);
        assert!(one_nn_scores(&[], &[q]).is_err());
    }

    #[test]
    fn folding_never_loses_distinct_bits() {
        for s in ["CC(=O)Nc1ccc(O)cc1", "CN1C=NC2=C1C(=O)N(C(=O)N2C)C", "c1ccc2ccccc2c1"] {
            let m = parse_smiles(s).unwrap();
            let counts: Vec<u32> = [512, 1024, 2048, 4096]
                .iter()
                .map(|&n| morgan_fingerprint(&m, 2, n).unwrap().set_count())
                .collect();
            assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{s}: {counts:?}");
        }
    }

    #[test]
    fn file_round_trip() {
        let m = parse_smiles("CCO").unwrap();
        let rows = vec![(canonical_form(&m), morgan_fingerprint(&m, 2, 512).unwrap())];
        let mut buf = Vec::new();
        write_fingerprint_file(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(read_fingerprint_file(&text, 2).unwrap(), rows);
        assert!(read_fingerprint_file("abc", 2).is_err());
    }

    proptest! {
        #[test]
        fn tanimoto_is_symmetric_and_bounded(
            a in proptest::collection::vec(0usize..512, 0..40),
            b in proptest::collection::vec(0usize..512, 0..40),
        ) {
            let fa = Fingerprint::from_bits(512, 2, a);
            let fb = Fingerprint::from_bits(512, 2, b);
            let ab = tanimoto(&fa, &fb).unwrap();
            prop_assert_eq!(ab, tanimoto(&fb, &fa).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
