//! Recursive SMILES reader for single-fragment organic molecules.

use std::collections::BTreeMap;

use super::rings::RingInfo;
use super::{AtomSpec, BondOrder, BondSpec, BondStereo, Element, MolGraph, SmilesError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BondSym {
    Single,
    Double,
    Triple,
    Aromatic,
    /// `/`: the atom written second lies above the first.
    Up,
    /// `\`
    Down,
}

impl BondSym {
    fn order(self) -> BondOrder {
        match self {
            BondSym::Single | BondSym::Up | BondSym::Down => BondOrder::Single,
            BondSym::Double => BondOrder::Double,
            BondSym::Triple => BondOrder::Triple,
            BondSym::Aromatic => BondOrder::Aromatic,
        }
    }

    fn direction(self) -> Option<bool> {
        match self {
            BondSym::Up => Some(true),
            BondSym::Down => Some(false),
            _ => None,
        }
    }
}

struct RawAtom {
    spec: AtomSpec,
    bracket: bool,
    position: usize,
}

struct RawBond {
    begin: usize,
    end: usize,
    /// None when no symbol was written.
    sym: Option<BondSym>,
}

struct OpenRing {
    atom: usize,
    sym: Option<BondSym>,
    position: usize,
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
    atoms: Vec<RawAtom>,
    bonds: Vec<RawBond>,
    rings: BTreeMap<u32, OpenRing>,
}

fn syntax(position: usize, reason: impl Into<String>) -> SmilesError {
    SmilesError::Syntax {
        position,
        reason: reason.into(),
    }
}

fn unsupported(position: usize, feature: impl Into<String>) -> SmilesError {
    SmilesError::UnsupportedFeature {
        position,
        feature: feature.into(),
    }
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<u8> {
        self.s.get(self.pos).copied()
    }

    fn peek_at(&self, offset: usize) -> Option<u8> {
        self.s.get(self.pos + offset).copied()
    }

    fn run(&mut self) -> Result<(), SmilesError> {
        let mut prev: Option<usize> = None;
        let mut pending: Option<(BondSym, usize)> = None;
        let mut branches: Vec<usize> = Vec::new();

        while let Some(c) = self.peek() {
            let start = self.pos;
            match c {
                b'(' => {
                    let p = prev.ok_or_else(|| syntax(start, "branch without preceding atom"))?;
                    if pending.is_some() {
                        return Err(syntax(start, "bond symbol before branch"));
                    }
                    branches.push(p);
                    self.pos += 1;
                    if self.peek() == Some(b')') {
                        return Err(syntax(self.pos, "empty branch"));
                    }
                }
                b')' => {
                    if pending.is_some() {
                        return Err(syntax(start, "dangling bond symbol"));
                    }
                    prev = Some(branches.pop().ok_or_else(|| syntax(start, "unmatched ')'"))?);
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' | b':' | b'/' | b'\\' => {
                    if pending.is_some() {
                        return Err(syntax(start, "consecutive bond symbols"));
                    }
                    if prev.is_none() {
                        return Err(syntax(start, "bond symbol without preceding atom"));
                    }
                    let sym = match c {
                        b'-' => BondSym::Single,
                        b'=' => BondSym::Double,
                        b'#' => BondSym::Triple,
                        b':' => BondSym::Aromatic,
                        b'/' => BondSym::Up,
                        _ => BondSym::Down,
                    };
                    pending = Some((sym, start));
                    self.pos += 1;
                }
                b'$' => return Err(unsupported(start, "quadruple bond '$'")),
                b'.' => return Err(unsupported(start, "multi-fragment '.' notation")),
                b'>' => return Err(unsupported(start, "reaction arrow '>'")),
                b'*' => return Err(unsupported(start, "wildcard atom '*'")),
                b'0'..=b'9' | b'%' => {
                    let p = prev.ok_or_else(|| syntax(start, "ring closure without preceding atom"))?;
                    let label = self.ring_label()?;
                    let sym = pending.take().map(|(s, _)| s);
                    self.ring_bond(p, label, sym, start)?;
                }
                _ => {
                    let atom = self.atom()?;
                    if let Some(p) = prev {
                        let sym = pending.take().map(|(s, _)| s);
                        self.bonds.push(RawBond {
                            begin: p,
                            end: atom,
                            sym,
                        });
                    } else if let Some((_, at)) = pending {
                        return Err(syntax(at, "bond symbol without preceding atom"));
                    }
                    prev = Some(atom);
                }
            }
        }
        if let Some((_, at)) = pending {
            return Err(syntax(at, "dangling bond symbol at end of input"));
        }
        if !branches.is_empty() {
            return Err(syntax(self.s.len(), "unclosed branch"));
        }
        if let Some((label, open)) = self.rings.iter().next() {
            return Err(syntax(open.position, format!("unclosed ring bond {label}")));
        }
        if self.atoms.is_empty() {
            return Err(syntax(0, "no atoms"));
        }
        Ok(())
    }

    fn ring_label(&mut self) -> Result<u32, SmilesError> {
        let start = self.pos;
        if self.peek() == Some(b'%') {
            let d1 = self.peek_at(1).filter(u8::is_ascii_digit);
            let d2 = self.peek_at(2).filter(u8::is_ascii_digit);
            match (d1, d2) {
                (Some(a), Some(b)) => {
                    self.pos += 3;
                    Ok(((a - b'0') * 10 + (b - b'0')) as u32)
                }
                _ => Err(syntax(start, "'%' must be followed by two digits")),
            }
        } else {
            let d = self.peek().unwrap() - b'0';
            self.pos += 1;
            Ok(d as u32)
        }
    }

    fn ring_bond(
        &mut self,
        atom: usize,
        label: u32,
        sym: Option<BondSym>,
        position: usize,
    ) -> Result<(), SmilesError> {
        match self.rings.remove(&label) {
            None => {
                self.rings.insert(label, OpenRing { atom, sym, position });
                Ok(())
            }
            Some(open) => {
                if open.atom == atom {
                    return Err(syntax(position, "ring closure onto the same atom"));
                }
                if self
                    .bonds
                    .iter()
                    .any(|b| (b.begin == open.atom && b.end == atom) || (b.begin == atom && b.end == open.atom))
                {
                    return Err(syntax(position, "ring closure duplicates an existing bond"));
                }
                let sym = match (open.sym, sym) {
                    (Some(a), Some(b)) if a.order() != b.order() => {
                        return Err(syntax(position, "conflicting ring-closure bond symbols"));
                    }
                    (Some(a), _) => Some(a),
                    (None, b) => b,
                };
                // Ring-closure bonds read as written from the opening atom.
                self.bonds.push(RawBond {
                    begin: open.atom,
                    end: atom,
                    sym,
                });
                Ok(())
            }
        }
    }

    fn atom(&mut self) -> Result<usize, SmilesError> {
        let start = self.pos;
        let c = self.peek().unwrap();
        let spec_bracket = if c == b'[' {
            Some(self.bracket_atom()?)
        } else {
            None
        };
        let (spec, bracket) = match spec_bracket {
            Some(spec) => (spec, true),
            None => {
                let (element, aromatic, len) = match (c, self.peek_at(1)) {
                    (b'C', Some(b'l')) => (Element::CL, false, 2),
                    (b'B', Some(b'r')) => (Element::BR, false, 2),
                    (b'B', _) => (Element::B, false, 1),
                    (b'C', _) => (Element::C, false, 1),
                    (b'N', _) => (Element::N, false, 1),
                    (b'O', _) => (Element::O, false, 1),
                    (b'P', _) => (Element::P, false, 1),
                    (b'S', _) => (Element::S, false, 1),
                    (b'F', _) => (Element::F, false, 1),
                    (b'I', _) => (Element::I, false, 1),
                    (b'b', _) => (Element::B, true, 1),
                    (b'c', _) => (Element::C, true, 1),
                    (b'n', _) => (Element::N, true, 1),
                    (b'o', _) => (Element::O, true, 1),
                    (b'p', _) => (Element::P, true, 1),
                    (b's', _) => (Element::S, true, 1),
                    _ if c.is_ascii_alphabetic() => {
                        return Err(unsupported(
                            start,
                            format!("atom '{}' outside the organic subset must be bracketed", c as char),
                        ))
                    }
                    _ => return Err(syntax(start, format!("unexpected character '{}'", c as char))),
                };
                self.pos += len;
                (
                    AtomSpec {
                        element,
                        formal_charge: 0,
                        hydrogens: 0,
                        aromatic,
                        chiral: false,
                        radical_electrons: 0,
                    },
                    false,
                )
            }
        };
        self.atoms.push(RawAtom {
            spec,
            bracket,
            position: start,
        });
        Ok(self.atoms.len() - 1)
    }

    fn bracket_atom(&mut self) -> Result<AtomSpec, SmilesError> {
        let open = self.pos;
        self.pos += 1;
        if self.peek().is_some_and(|c| c.is_ascii_digit()) {
            return Err(unsupported(self.pos, "isotope label"));
        }
        let sym_start = self.pos;
        let c = self.peek().ok_or_else(|| syntax(open, "unterminated bracket atom"))?;
        if c == b'*' {
            return Err(unsupported(sym_start, "wildcard atom '*'"));
        }
        let (element, aromatic) = if c.is_ascii_lowercase() {
            // aromatic: b c n o p s, se, as
            let two = self.peek_at(1).filter(|d| d.is_ascii_lowercase());
            let (sym, len) = match (c, two) {
                (b's', Some(b'e')) => ("Se", 2),
                (b'a', Some(b's')) => ("As", 2),
                (b'b', _) => ("B", 1),
                (b'c', _) => ("C", 1),
                (b'n', _) => ("N", 1),
                (b'o', _) => ("O", 1),
                (b'p', _) => ("P", 1),
                (b's', _) => ("S", 1),
                _ => return Err(syntax(sym_start, format!("unknown aromatic symbol '{}'", c as char))),
            };
            self.pos += len;
            (Element::from_symbol(sym).unwrap(), true)
        } else if c.is_ascii_uppercase() {
            let mut sym = String::new();
            sym.push(c as char);
            let next = self.peek_at(1).filter(|d| d.is_ascii_lowercase());
            // Prefer the two-letter symbol when it names an element.
            let two = next.map(|d| {
                let mut t = sym.clone();
                t.push(d as char);
                t
            });
            let known = |s: &str| Element::from_symbol(s);
            let (element, len) = match two.as_deref().and_then(|t| known(t).map(|e| (e, 2))) {
                Some(found) => found,
                None => match known(&sym) {
                    Some(e) => (e, 1),
                    None => {
                        let name = two.unwrap_or(sym);
                        return Err(unsupported(sym_start, format!("element '{name}'")));
                    }
                },
            };
            // Two-letter symbols that are not elements, e.g. transition metals.
            if len == 1 {
                if let Some(t) = two.as_deref() {
                    if is_known_foreign_symbol(t) {
                        return Err(unsupported(sym_start, format!("element '{t}'")));
                    }
                }
            }
            self.pos += len;
            (element, false)
        } else {
            return Err(syntax(sym_start, "expected element symbol in bracket atom"));
        };

        let mut chiral = false;
        if self.peek() == Some(b'@') {
            self.pos += 1;
            if self.peek() == Some(b'@') {
                self.pos += 1;
            }
            if self.peek().is_some_and(|c| c.is_ascii_uppercase() && c != b'H') {
                return Err(unsupported(self.pos, "extended chirality class"));
            }
            chiral = true;
        }

        let mut hydrogens = 0u8;
        if self.peek() == Some(b'H') {
            self.pos += 1;
            hydrogens = 1;
            if let Some(d) = self.peek().filter(u8::is_ascii_digit) {
                hydrogens = d - b'0';
                self.pos += 1;
            }
        }

        let mut formal_charge: i32 = 0;
        if let Some(sign @ (b'+' | b'-')) = self.peek() {
            let unit = if sign == b'+' { 1 } else { -1 };
            self.pos += 1;
            if let Some(d) = self.peek().filter(u8::is_ascii_digit) {
                self.pos += 1;
                let mut v = (d - b'0') as i32;
                if let Some(d2) = self.peek().filter(u8::is_ascii_digit) {
                    self.pos += 1;
                    v = v * 10 + (d2 - b'0') as i32;
                }
                formal_charge = unit * v;
            } else {
                formal_charge = unit;
                while self.peek() == Some(sign) {
                    self.pos += 1;
                    formal_charge += unit;
                }
            }
            if !(-15..=15).contains(&formal_charge) {
                return Err(syntax(open, "formal charge out of range"));
            }
        }

        match self.peek() {
            Some(b']') => self.pos += 1,
            Some(b':') => return Err(unsupported(self.pos, "atom class")),
            Some(c) => return Err(syntax(self.pos, format!("unexpected '{}' in bracket atom", c as char))),
            None => return Err(syntax(open, "unterminated bracket atom")),
        }
        if aromatic && !element.can_be_aromatic() {
            return Err(syntax(sym_start, "element cannot be aromatic"));
        }
        Ok(AtomSpec {
            element,
            formal_charge: formal_charge as i8,
            hydrogens,
            aromatic,
            chiral,
            radical_electrons: 0,
        })
    }
}

/// Element symbols outside the supported table; used to avoid silently
/// reading e.g. `[Fe]` as something else.
fn is_known_foreign_symbol(t: &str) -> bool {
    matches!(
        t,
        "Sc" | "Ti" | "Cr" | "Mn" | "Fe" | "Co" | "Ni" | "Cu" | "Zn" | "Zr" | "Nb" | "Mo" | "Tc" | "Ru"
            | "Rh" | "Pd" | "Ag" | "Cd" | "Cs" | "Ba" | "Pt" | "Au" | "Hg" | "Pb" | "Bi" | "Tl" | "Po"
            | "At" | "Rn" | "Fr" | "Ra" | "Os" | "Ir" | "Re" | "Ta" | "Hf" | "La" | "Ce" | "Gd" | "Cm"
    )
}

/// Parses a SMILES string within the supported subset.
///
/// Accepts organic-subset and bracket atoms, branches, ring closures
/// (`1`-`9`, `%nn`), bond symbols `- = # : / \` and lowercase aromatic
/// atoms. Implicit hydrogens on unbracketed atoms follow standard valences.
pub fn parse_smiles(s: &str) -> Result<MolGraph, SmilesError> {
    let s = s.strip_prefix(super::canon::FORM_TAG).unwrap_or(s);
    if s.is_empty() {
        return Err(syntax(0, "empty input"));
    }
    if let Some(p) = s.bytes().position(|b| !b.is_ascii() || b.is_ascii_whitespace()) {
        return Err(syntax(p, "non-ASCII or whitespace character"));
    }
    let mut parser = Parser {
        s: s.as_bytes(),
        pos: 0,
        atoms: Vec::new(),
        bonds: Vec::new(),
        rings: BTreeMap::new(),
    };
    parser.run()?;
    let Parser { atoms, bonds, .. } = parser;

    let mut specs: Vec<BondSpec> = bonds
        .iter()
        .map(|b| {
            let order = match b.sym {
                Some(sym) => sym.order(),
                None if atoms[b.begin].spec.aromatic && atoms[b.end].spec.aromatic => BondOrder::Aromatic,
                None => BondOrder::Single,
            };
            BondSpec {
                begin: b.begin,
                end: b.end,
                order,
                stereo: BondStereo::None,
                stereo_atoms: None,
            }
        })
        .collect();

    let n = atoms.len();
    let adjacency = |specs: &[BondSpec]| {
        let mut adj = vec![Vec::new(); n];
        for (i, b) in specs.iter().enumerate() {
            adj[b.begin].push((b.end, i));
            adj[b.end].push((b.begin, i));
        }
        adj
    };
    let adj = adjacency(&specs);
    let ring_info = RingInfo::compute(n, &specs, &adj);
    // An implicit bond between aromatic atoms of different rings is single.
    for (i, b) in bonds.iter().enumerate() {
        if b.sym.is_none() && specs[i].order == BondOrder::Aromatic && !ring_info.bond_in_ring[i] {
            specs[i].order = BondOrder::Single;
        }
    }
    for (i, a) in atoms.iter().enumerate() {
        if a.spec.aromatic && !ring_info.atom_in_ring[i] {
            return Err(syntax(a.position, "aromatic atom outside of a ring"));
        }
    }

    assign_stereo(&bonds, &mut specs, &adj);

    let mut out_atoms = Vec::with_capacity(n);
    for (i, raw) in atoms.into_iter().enumerate() {
        let mut spec = raw.spec;
        let incident: Vec<BondOrder> = adj[i].iter().map(|&(_, bi)| specs[bi].order).collect();
        if raw.bracket {
            spec.radical_electrons = bracket_radicals(&spec, &incident);
        } else {
            spec.hydrogens = implicit_hydrogens(&spec, &incident).ok_or_else(|| SmilesError::Valence {
                atom: i,
                symbol: spec.element.symbol().to_string(),
                bond_sum: incident.iter().map(|o| o.half_valence()).sum::<u32>() / 2,
            })?;
        }
        out_atoms.push(spec);
    }
    Ok(MolGraph::from_specs(out_atoms, specs))
}

/// Bond-order sum used for valence checks; aromatic bonds count one, plus
/// one for the pi bond of aromatic b/c/n/p without an exocyclic double bond.
fn valence_sum(spec: &AtomSpec, incident: &[BondOrder]) -> u32 {
    let mut sum: u32 = incident
        .iter()
        .map(|o| match o {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        })
        .sum();
    if spec.aromatic
        && matches!(spec.element.atomic_number(), 5 | 6 | 7 | 15)
        && !incident.contains(&BondOrder::Double)
    {
        sum += 1;
    }
    sum
}

fn implicit_hydrogens(spec: &AtomSpec, incident: &[BondOrder]) -> Option<u8> {
    let valences = spec.element.default_valences()?;
    let sum = valence_sum(spec, incident);
    valences
        .iter()
        .map(|&v| v as u32)
        .find(|&v| v >= sum)
        .map(|v| (v - sum) as u8)
}

fn bracket_radicals(spec: &AtomSpec, incident: &[BondOrder]) -> u8 {
    if spec.formal_charge != 0 || spec.aromatic {
        return 0;
    }
    let Some(valences) = spec.element.default_valences() else {
        return 0;
    };
    let total = valence_sum(spec, incident) + spec.hydrogens as u32;
    match valences.first() {
        Some(&v) if total < v as u32 => (v as u32 - total) as u8,
        _ => 0,
    }
}

/// Converts `/` and `\` marks around double bonds into E/Z flags relative to
/// the marked substituents.
fn assign_stereo(raw: &[RawBond], specs: &mut [BondSpec], adj: &[Vec<(usize, usize)>]) {
    // Direction of `n` relative to `a` (true = up) from a marked single bond.
    let direction = |a: usize, bi: usize| -> Option<(usize, bool)> {
        let b = &raw[bi];
        let up = b.sym?.direction()?;
        if b.begin == a {
            Some((b.end, up))
        } else {
            Some((b.begin, !up))
        }
    };
    for bi in 0..specs.len() {
        if specs[bi].order != BondOrder::Double {
            continue;
        }
        let (a, b) = (specs[bi].begin, specs[bi].end);
        let find = |x: usize| {
            adj[x]
                .iter()
                .filter(|&&(_, e)| e != bi)
                .find_map(|&(_, e)| direction(x, e))
        };
        if let (Some((na, da)), Some((nb, db))) = (find(a), find(b)) {
            specs[bi].stereo = if da != db { BondStereo::E } else { BondStereo::Z };
            specs[bi].stereo_atoms = Some((na, nb));
        }
    }
}
