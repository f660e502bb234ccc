//! Canonical serialization used for molecule identity.
//!
//! Atoms are ranked by iterative neighborhood refinement starting from
//! (element, charge, degree, H count, aromatic, chirality flag). Remaining
//! ties are broken by trying each member of the lowest tied class and
//! keeping the lexicographically smallest output, which makes the result
//! independent of input atom order. A DFS from the lowest-ranked atom then
//! writes a bracket-atom SMILES that the parser reads back.

use std::collections::BTreeMap;
use std::fmt;

use super::{BondOrder, BondStereo, MolGraph};

pub(crate) const FORM_TAG: &str = "CF1:";

/// Upper bound on complete tie-break explorations per molecule. Highly
/// symmetric graphs beyond this fall back to the first candidate.
const LEAF_BUDGET: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct CanonicalForm {
    pub text: String,
}

impl CanonicalForm {
    /// The SMILES body without the version tag.
    pub fn smiles(&self) -> &str {
        self.text.strip_prefix(FORM_TAG).unwrap_or(&self.text)
    }
}

impl fmt::Display for CanonicalForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct CanonOptions {
    /// Drop E/Z and tetrahedral flags before canonicalizing.
    pub strip_stereo: bool,
}

pub fn canonical_form(m: &MolGraph) -> CanonicalForm {
    canonical_form_with(m, CanonOptions::default())
}

pub fn canonical_form_with(m: &MolGraph, opts: CanonOptions) -> CanonicalForm {
    let stripped;
    let m = if opts.strip_stereo {
        stripped = m.without_stereo();
        &stripped
    } else {
        m
    };
    let text = if m.num_atoms() == 0 {
        String::new()
    } else {
        let mut best: Option<String> = None;
        let mut leaves = 0usize;
        search(m, initial_ranks(m), &mut best, &mut leaves);
        best.expect("search always produces a leaf")
    };
    CanonicalForm {
        text: format!("{FORM_TAG}{text}"),
    }
}

pub fn molecule_equal(a: &MolGraph, b: &MolGraph) -> bool {
    canonical_form(a) == canonical_form(b)
}

fn initial_ranks(m: &MolGraph) -> Vec<u32> {
    let keys: Vec<_> = m
        .atoms()
        .iter()
        .map(|a| {
            (
                a.element.atomic_number(),
                a.formal_charge,
                a.degree,
                a.hydrogens,
                a.aromatic,
                a.chiral,
            )
        })
        .collect();
    dense_ranks(&keys)
}

fn dense_ranks<K: Ord + Clone>(keys: &[K]) -> Vec<u32> {
    let mut sorted: Vec<K> = keys.to_vec();
    sorted.sort();
    sorted.dedup();
    keys.iter()
        .map(|k| sorted.binary_search(k).unwrap() as u32)
        .collect()
}

fn distinct(ranks: &[u32]) -> usize {
    let mut r = ranks.to_vec();
    r.sort_unstable();
    r.dedup();
    r.len()
}

fn refine(m: &MolGraph, mut ranks: Vec<u32>) -> Vec<u32> {
    let mut classes = distinct(&ranks);
    loop {
        let keys: Vec<(u32, Vec<(u8, u32)>)> = (0..m.num_atoms())
            .map(|v| {
                let mut nb: Vec<(u8, u32)> = m
                    .neighbors(v)
                    .iter()
                    .map(|&(u, bi)| (m.bonds()[bi].order.code(), ranks[u]))
                    .collect();
                nb.sort_unstable();
                (ranks[v], nb)
            })
            .collect();
        let next = dense_ranks(&keys);
        let next_classes = distinct(&next);
        ranks = next;
        if next_classes == classes {
            return ranks;
        }
        classes = next_classes;
    }
}

fn search(m: &MolGraph, ranks: Vec<u32>, best: &mut Option<String>, leaves: &mut usize) {
    let ranks = refine(m, ranks);
    let n = ranks.len();
    if distinct(&ranks) == n {
        *leaves += 1;
        let s = serialize(m, &ranks);
        if best.as_ref().map_or(true, |b| s < *b) {
            *best = Some(s);
        }
        return;
    }
    let mut by_rank: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (v, &r) in ranks.iter().enumerate() {
        by_rank.entry(r).or_default().push(v);
    }
    let (&tied_rank, members) = by_rank
        .iter()
        .find(|(_, members)| members.len() > 1)
        .expect("ties exist when ranks are not distinct");
    for &v in members {
        if *leaves >= LEAF_BUDGET && best.is_some() {
            return;
        }
        let broken: Vec<u32> = ranks
            .iter()
            .enumerate()
            .map(|(u, &r)| if u == v && r == tied_rank { 2 * r } else { 2 * r + 1 })
            .collect();
        search(m, broken, best, leaves);
    }
}

fn atom_token(m: &MolGraph, v: usize, out: &mut String) {
    let a = &m.atoms()[v];
    out.push('[');
    let sym = a.element.symbol();
    if a.aromatic {
        out.push_str(&sym.to_ascii_lowercase());
    } else {
        out.push_str(sym);
    }
    if a.chiral {
        out.push('@');
    }
    match a.hydrogens {
        0 => {}
        1 => out.push('H'),
        h => {
            out.push('H');
            out.push_str(&h.to_string());
        }
    }
    match a.formal_charge {
        0 => {}
        1 => out.push('+'),
        -1 => out.push('-'),
        c if c > 0 => out.push_str(&format!("+{c}")),
        c => out.push_str(&format!("-{}", -c)),
    }
    out.push(']');
}

struct Walk {
    order: Vec<usize>,
    position: Vec<usize>,
    parent_bond: Vec<Option<usize>>,
    /// (children in write order) per atom
    children: Vec<Vec<(usize, usize)>>,
    /// ring bonds: (opening atom, closing atom, bond)
    ring_bonds: Vec<(usize, usize, usize)>,
}

fn walk(m: &MolGraph, ranks: &[u32]) -> Walk {
    let n = m.num_atoms();
    let mut w = Walk {
        order: Vec::with_capacity(n),
        position: vec![usize::MAX; n],
        parent_bond: vec![None; n],
        children: vec![Vec::new(); n],
        ring_bonds: Vec::new(),
    };
    let mut seen_bond = vec![false; m.num_bonds()];
    let mut roots: Vec<usize> = (0..n).collect();
    roots.sort_by_key(|&v| ranks[v]);
    for root in roots {
        if w.position[root] != usize::MAX {
            continue;
        }
        visit(m, ranks, root, &mut w, &mut seen_bond);
    }
    w
}

fn visit(m: &MolGraph, ranks: &[u32], v: usize, w: &mut Walk, seen_bond: &mut [bool]) {
    w.position[v] = w.order.len();
    w.order.push(v);
    let mut nbrs: Vec<(usize, usize)> = m.neighbors(v).to_vec();
    nbrs.sort_by_key(|&(u, _)| ranks[u]);
    for (u, bi) in nbrs {
        if seen_bond[bi] {
            continue;
        }
        seen_bond[bi] = true;
        if w.position[u] == usize::MAX {
            w.parent_bond[u] = Some(bi);
            w.children[v].push((u, bi));
            visit(m, ranks, u, w, seen_bond);
        } else {
            // back edge: ring opened at the earlier atom `u`, closed here
            w.ring_bonds.push((u, v, bi));
        }
    }
}

/// Direction marks for single bonds around stereo double bonds; the value
/// is the `/` (true) or `\` (false) symbol as written from the first
/// written atom of the bond to the second.
fn stereo_marks(m: &MolGraph, ranks: &[u32], w: &Walk) -> BTreeMap<usize, bool> {
    let written_first = |bi: usize| -> usize {
        let b = &m.bonds()[bi];
        if w.position[b.begin] < w.position[b.end] {
            b.begin
        } else {
            b.end
        }
    };
    let mut marks: BTreeMap<usize, bool> = BTreeMap::new();
    let mut stereo_bonds: Vec<usize> = (0..m.num_bonds())
        .filter(|&bi| m.bonds()[bi].stereo != BondStereo::None && m.bonds()[bi].order == BondOrder::Double)
        .collect();
    stereo_bonds.sort_by_key(|&bi| {
        let b = &m.bonds()[bi];
        ranks[b.begin].min(ranks[b.end])
    });
    for bi in stereo_bonds {
        let b = &m.bonds()[bi];
        let Some((sa, sb)) = b.stereo_atoms else { continue };
        // orient by rank so the output does not depend on storage order
        let (x, y, sx, sy) = if ranks[b.begin] <= ranks[b.end] {
            (b.begin, b.end, sa, sb)
        } else {
            (b.end, b.begin, sb, sa)
        };
        // the ref of each side is its lowest-ranked other neighbor
        let ref_of = |atom: usize, other: usize| -> Option<(usize, usize)> {
            m.neighbors(atom)
                .iter()
                .filter(|&&(u, _)| u != other)
                .min_by_key(|&&(u, _)| ranks[u])
                .copied()
        };
        let (Some((rx, bx)), Some((ry, by))) = (ref_of(x, y), ref_of(y, x)) else {
            continue;
        };
        let mut trans = b.stereo == BondStereo::E;
        if rx != sx {
            trans = !trans;
        }
        if ry != sy {
            trans = !trans;
        }
        // dir(n rel atom) <-> symbol on bond (first, second)
        let to_dir = |bond: usize, atom: usize, up: bool| if written_first(bond) == atom { up } else { !up };
        let to_up = |bond: usize, atom: usize, dir: bool| if written_first(bond) == atom { dir } else { !dir };
        let dx = match marks.get(&bx) {
            Some(&up) => to_dir(bx, x, up),
            None => {
                marks.insert(bx, to_up(bx, x, true));
                true
            }
        };
        let dy = if trans { !dx } else { dx };
        marks.entry(by).or_insert_with(|| to_up(by, y, dy));
    }
    marks
}

fn bond_symbol(m: &MolGraph, bi: usize, marks: &BTreeMap<usize, bool>, out: &mut String) {
    let b = &m.bonds()[bi];
    let both_aromatic = m.atoms()[b.begin].aromatic && m.atoms()[b.end].aromatic;
    match b.order {
        BondOrder::Single => match marks.get(&bi) {
            Some(true) => out.push('/'),
            Some(false) => out.push('\\'),
            None if both_aromatic => out.push('-'),
            None => {}
        },
        BondOrder::Double => out.push('='),
        BondOrder::Triple => out.push('#'),
        BondOrder::Aromatic if both_aromatic => {}
        BondOrder::Aromatic => out.push(':'),
    }
}

fn serialize(m: &MolGraph, ranks: &[u32]) -> String {
    let w = walk(m, ranks);
    let marks = stereo_marks(m, ranks, &w);

    let mut opens: Vec<Vec<(usize, usize)>> = vec![Vec::new(); m.num_atoms()];
    let mut closes: Vec<Vec<usize>> = vec![Vec::new(); m.num_atoms()];
    for &(open, close, bi) in &w.ring_bonds {
        opens[open].push((close, bi));
        closes[close].push(bi);
    }
    for o in &mut opens {
        o.sort_by_key(|&(close, _)| (w.position[close], ranks[close]));
    }

    let mut out = String::new();
    let mut digit_of: BTreeMap<usize, u32> = BTreeMap::new();
    let mut in_use: Vec<bool> = Vec::new();
    let mut first = true;
    for &v in &w.order {
        if w.parent_bond[v].is_some() {
            continue;
        }
        if !first {
            out.push('.');
        }
        first = false;
        write_atom(m, v, &w, &marks, &opens, &closes, &mut digit_of, &mut in_use, &mut out);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn write_atom(
    m: &MolGraph,
    v: usize,
    w: &Walk,
    marks: &BTreeMap<usize, bool>,
    opens: &[Vec<(usize, usize)>],
    closes: &[Vec<usize>],
    digit_of: &mut BTreeMap<usize, u32>,
    in_use: &mut Vec<bool>,
    out: &mut String,
) {
    atom_token(m, v, out);
    let push_digit = |d: u32, out: &mut String| {
        if d < 10 {
            out.push(char::from(b'0' + d as u8));
        } else {
            out.push_str(&format!("%{d:02}"));
        }
    };
    let mut closing: Vec<(u32, usize)> = closes[v].iter().map(|bi| (digit_of[bi], *bi)).collect();
    closing.sort_unstable();
    for (d, bi) in closing {
        push_digit(d, out);
        in_use[d as usize] = false;
        digit_of.remove(&bi);
    }
    for &(_, bi) in &opens[v] {
        let d = match in_use.iter().skip(1).position(|u| !u) {
            Some(i) => i + 1,
            None => {
                if in_use.is_empty() {
                    in_use.push(true); // digit 0 is never used
                }
                in_use.push(false);
                in_use.len() - 1
            }
        };
        in_use[d] = true;
        digit_of.insert(bi, d as u32);
        bond_symbol(m, bi, marks, out);
        push_digit(d as u32, out);
    }
    let kids = &w.children[v];
    for (i, &(c, bi)) in kids.iter().enumerate() {
        let last = i + 1 == kids.len();
        if !last {
            out.push('(');
        }
        bond_symbol(m, bi, marks, out);
        write_atom(m, c, w, marks, opens, closes, digit_of, in_use, out);
        if !last {
            out.push(')');
        }
    }
}
