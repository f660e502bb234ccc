//! Periodic-table data for the elements the parser accepts.

/// Static properties of a supported element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementInfo {
    pub symbol: &'static str,
    pub atomic_number: u8,
    pub mass: f64,
    /// Pauling electronegativity; 0.0 where undefined (noble gases).
    pub electronegativity: f64,
    pub period: u8,
    /// Main-group index 1..=8 (groups 1, 2, 13..=18).
    pub main_group: u8,
}

macro_rules! el {
    ($sym:expr, $z:expr, $m:expr, $en:expr, $p:expr, $g:expr) => {
        ElementInfo {
            symbol: $sym,
            atomic_number: $z,
            mass: $m,
            electronegativity: $en,
            period: $p,
            main_group: $g,
        }
    };
}

/// Main-group elements of periods 1 to 5. Transition metals are rejected by
/// the parser as unsupported.
pub static ELEMENTS: &[ElementInfo] = &[
    el!("H", 1, 1.008, 2.20, 1, 1),
    el!("He", 2, 4.003, 0.0, 1, 8),
    el!("Li", 3, 6.94, 0.98, 2, 1),
    el!("Be", 4, 9.012, 1.57, 2, 2),
    el!("B", 5, 10.81, 2.04, 2, 3),
    el!("C", 6, 12.011, 2.55, 2, 4),
    el!("N", 7, 14.007, 3.04, 2, 5),
    el!("O", 8, 15.999, 3.44, 2, 6),
    el!("F", 9, 18.998, 3.98, 2, 7),
    el!("Ne", 10, 20.180, 0.0, 2, 8),
    el!("Na", 11, 22.990, 0.93, 3, 1),
    el!("Mg", 12, 24.305, 1.31, 3, 2),
    el!("Al", 13, 26.982, 1.61, 3, 3),
    el!("Si", 14, 28.085, 1.90, 3, 4),
    el!("P", 15, 30.974, 2.19, 3, 5),
    el!("S", 16, 32.06, 2.58, 3, 6),
    el!("Cl", 17, 35.45, 3.16, 3, 7),
    el!("Ar", 18, 39.948, 0.0, 3, 8),
    el!("K", 19, 39.098, 0.82, 4, 1),
    el!("Ca", 20, 40.078, 1.00, 4, 2),
    el!("Ga", 31, 69.723, 1.81, 4, 3),
    el!("Ge", 32, 72.630, 2.01, 4, 4),
    el!("As", 33, 74.922, 2.18, 4, 5),
    el!("Se", 34, 78.971, 2.55, 4, 6),
    el!("Br", 35, 79.904, 2.96, 4, 7),
    el!("Kr", 36, 83.798, 3.00, 4, 8),
    el!("Rb", 37, 85.468, 0.82, 5, 1),
    el!("Sr", 38, 87.62, 0.95, 5, 2),
    el!("In", 49, 114.818, 1.78, 5, 3),
    el!("Sn", 50, 118.710, 1.96, 5, 4),
    el!("Sb", 51, 121.760, 2.05, 5, 5),
    el!("Te", 52, 127.60, 2.10, 5, 6),
    el!("I", 53, 126.904, 2.66, 5, 7),
    el!("Xe", 54, 131.293, 2.60, 5, 8),
];

/// Handle to an entry of [`ELEMENTS`], ordered by atomic number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Element(u8);

impl Element {
    pub const H: Element = Element(1);
    pub const B: Element = Element(5);
    pub const C: Element = Element(6);
    pub const N: Element = Element(7);
    pub const O: Element = Element(8);
    pub const F: Element = Element(9);
    pub const P: Element = Element(15);
    pub const S: Element = Element(16);
    pub const CL: Element = Element(17);
    pub const BR: Element = Element(35);
    pub const I: Element = Element(53);

    pub fn from_symbol(symbol: &str) -> Option<Element> {
        ELEMENTS
            .iter()
            .find(|e| e.symbol == symbol)
            .map(|e| Element(e.atomic_number))
    }

    pub fn from_atomic_number(z: u8) -> Option<Element> {
        ELEMENTS
            .iter()
            .any(|e| e.atomic_number == z)
            .then_some(Element(z))
    }

    pub fn atomic_number(self) -> u8 {
        self.0
    }

    pub fn info(self) -> &'static ElementInfo {
        ELEMENTS
            .iter()
            .find(|e| e.atomic_number == self.0)
            .expect("Element is only constructed for table entries")
    }

    pub fn symbol(self) -> &'static str {
        self.info().symbol
    }

    /// Allowed valences for organic-subset atoms written without brackets.
    pub fn default_valences(self) -> Option<&'static [u8]> {
        match self.0 {
            5 => Some(&[3]),
            6 => Some(&[4]),
            7 => Some(&[3, 5]),
            8 => Some(&[2]),
            15 => Some(&[3, 5]),
            16 => Some(&[2, 4, 6]),
            9 | 17 | 35 | 53 => Some(&[1]),
            _ => None,
        }
    }

    /// Whether the element may appear as a lowercase aromatic symbol.
    pub fn can_be_aromatic(self) -> bool {
        matches!(self.0, 5 | 6 | 7 | 8 | 15 | 16 | 33 | 34)
    }
}
