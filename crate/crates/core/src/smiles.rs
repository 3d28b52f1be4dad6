//! Parser for the SMILES subset used by the molecular benchmarks.
//!
//! Supported: organic-subset atoms (`B C N O P S F Cl Br I`), aromatic
//! lowercase atoms, bracket atoms carrying only an element and an optional
//! hydrogen count, bonds `- = # :`, branches and ring closures (`1`-`9`,
//! `%nn`). Hydrogens are implicit and dropped. Stereochemistry, charges,
//! isotopes, atom classes and disconnected components are rejected with
//! [`SmilesErrorKind::Unsupported`].
//!
//! Node labels are atomic numbers. Edge labels are [`BondKind`] ids.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::graph::{bridges, Graph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondKind {
    Single = 0,
    Double = 1,
    Triple = 2,
    Aromatic = 3,
}

impl BondKind {
    pub fn id(self) -> u32 {
        self as u32
    }
}

/// Number of distinct bond labels produced by the parser.
pub const NUM_BOND_KINDS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SmilesErrorKind {
    #[error("unbalanced parenthesis")]
    UnbalancedParenthesis,
    #[error("ring closure {0} is never matched")]
    UnmatchedRingClosure(u32),
    #[error("unsupported token `{0}`")]
    Unsupported(String),
    #[error("unexpected `{0}`")]
    Unexpected(char),
    #[error("bond or ring closure repeats an existing bond")]
    DuplicateBond,
    #[error("conflicting bond symbols on ring closure {0}")]
    RingBondMismatch(u32),
    #[error("unexpected end of input")]
    UnexpectedEnd,
    #[error("empty SMILES string")]
    Empty,
}

/// A parse failure and the byte offset where it was detected.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("SMILES error at byte {offset}: {kind}")]
pub struct SmilesError {
    pub offset: usize,
    pub kind: SmilesErrorKind,
}

impl SmilesError {
    fn new(offset: usize, kind: SmilesErrorKind) -> Self {
        Self { offset, kind }
    }
}

const ELEMENTS: [&str; 86] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S",
    "Cl", "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga",
    "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd",
    "Ag", "Cd", "In", "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm",
    "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os",
    "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn",
];

/// Atomic number of an element symbol, e.g. `"Cl"` -> 17.
pub fn atomic_number(symbol: &str) -> Option<u32> {
    ELEMENTS.iter().position(|&e| e == symbol).map(|i| i as u32 + 1)
}

/// Element symbol of an atomic number.
pub fn element_symbol(z: u32) -> Option<&'static str> {
    ELEMENTS.get((z as usize).checked_sub(1)?).copied()
}

#[derive(Debug, Clone, Copy)]
struct Atom {
    z: u32,
    aromatic: bool,
}

#[derive(Debug, Clone, Copy)]
struct PendingBond {
    kind: BondKind,
}

struct Parser<'a> {
    input: &'a [u8],
    pos: usize,
    atoms: Vec<Atom>,
    // (u, v, explicit kind); None means implicit
    bonds: Vec<(usize, usize, Option<BondKind>)>,
    prev: Option<usize>,
    pending: Option<PendingBond>,
    branches: Vec<(usize, usize)>,
    rings: BTreeMap<u32, (usize, Option<BondKind>, usize)>,
}

impl<'a> Parser<'a> {
    fn err(&self, offset: usize, kind: SmilesErrorKind) -> SmilesError {
        SmilesError::new(offset, kind)
    }

    fn peek(&self) -> Option<u8> {
        self.input.get(self.pos).copied()
    }

    fn run(mut self) -> Result<Graph, SmilesError> {
        if self.input.is_empty() {
            return Err(self.err(0, SmilesErrorKind::Empty));
        }
        while let Some(c) = self.peek() {
            let start = self.pos;
            match c {
                b'(' => {
                    let Some(prev) = self.prev else {
                        return Err(self.err(start, SmilesErrorKind::Unexpected('(')));
                    };
                    if self.pending.is_some() {
                        return Err(self.err(start, SmilesErrorKind::Unexpected('(')));
                    }
                    self.branches.push((prev, start));
                    self.pos += 1;
                }
                b')' => {
                    let Some((atom, _)) = self.branches.pop() else {
                        return Err(self.err(start, SmilesErrorKind::UnbalancedParenthesis));
                    };
                    if self.pending.is_some() {
                        return Err(self.err(start, SmilesErrorKind::Unexpected(')')));
                    }
                    self.prev = Some(atom);
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' | b':' => {
                    if self.prev.is_none() || self.pending.is_some() {
                        return Err(self.err(start, SmilesErrorKind::Unexpected(c as char)));
                    }
                    let kind = match c {
                        b'-' => BondKind::Single,
                        b'=' => BondKind::Double,
                        b'#' => BondKind::Triple,
                        _ => BondKind::Aromatic,
                    };
                    self.pending = Some(PendingBond { kind });
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => self.ring_closure()?,
                b'[' => {
                    let atom = self.bracket_atom()?;
                    self.push_atom(atom)?;
                }
                b'/' | b'\\' | b'.' | b'$' | b'@' | b'*' => {
                    return Err(self.err(
                        start,
                        SmilesErrorKind::Unsupported((c as char).to_string()),
                    ));
                }
                _ => {
                    let atom = self.organic_atom()?;
                    self.push_atom(atom)?;
                }
            }
        }
        if self.pending.is_some() {
            return Err(self.err(self.input.len(), SmilesErrorKind::UnexpectedEnd));
        }
        if let Some(&(_, offset)) = self.branches.last() {
            return Err(self.err(offset, SmilesErrorKind::UnbalancedParenthesis));
        }
        if let Some((&digit, &(_, _, offset))) = self.rings.iter().next() {
            return Err(self.err(offset, SmilesErrorKind::UnmatchedRingClosure(digit)));
        }
        self.finish()
    }

    fn push_atom(&mut self, atom: Atom) -> Result<(), SmilesError> {
        let idx = self.atoms.len();
        self.atoms.push(atom);
        if let Some(prev) = self.prev {
            let kind = self.pending.take().map(|p| p.kind);
            self.bonds.push((prev, idx, kind));
        }
        self.prev = Some(idx);
        Ok(())
    }

    fn organic_atom(&mut self) -> Result<Atom, SmilesError> {
        let start = self.pos;
        let c = self.input[start];
        let next = self.input.get(start + 1).copied();
        let (symbol, len, aromatic) = match (c, next) {
            (b'C', Some(b'l')) => ("Cl", 2, false),
            (b'B', Some(b'r')) => ("Br", 2, false),
            (b'B', _) => ("B", 1, false),
            (b'C', _) => ("C", 1, false),
            (b'N', _) => ("N", 1, false),
            (b'O', _) => ("O", 1, false),
            (b'P', _) => ("P", 1, false),
            (b'S', _) => ("S", 1, false),
            (b'F', _) => ("F", 1, false),
            (b'I', _) => ("I", 1, false),
            (b'b', _) => ("B", 1, true),
            (b'c', _) => ("C", 1, true),
            (b'n', _) => ("N", 1, true),
            (b'o', _) => ("O", 1, true),
            (b'p', _) => ("P", 1, true),
            (b's', _) => ("S", 1, true),
            _ => {
                let end = char_end(self.input, start);
                let token = String::from_utf8_lossy(&self.input[start..end]).into_owned();
                return Err(self.err(start, SmilesErrorKind::Unsupported(token)));
            }
        };
        self.pos += len;
        Ok(Atom { z: atomic_number(symbol).expect("organic subset"), aromatic })
    }

    fn bracket_atom(&mut self) -> Result<Atom, SmilesError> {
        let open = self.pos;
        let Some(close_rel) = self.input[open..].iter().position(|&b| b == b']') else {
            return Err(self.err(open, SmilesErrorKind::UnexpectedEnd));
        };
        let close = open + close_rel;
        let body = &self.input[open + 1..close];
        let unsupported = |at: usize, what: &[u8]| {
            SmilesError::new(at, SmilesErrorKind::Unsupported(String::from_utf8_lossy(what).into_owned()))
        };
        let mut i: usize;
        if body.first().is_some_and(u8::is_ascii_digit) {
            return Err(unsupported(open + 1, body));
        }
        // element symbol
        let (symbol, aromatic) = match body {
            [a, b, ..] if a.is_ascii_lowercase() && b.is_ascii_lowercase() => {
                // two-letter aromatic symbols such as `se`, `as`
                let mut s = String::new();
                s.push(a.to_ascii_uppercase() as char);
                s.push(*b as char);
                i = 2;
                (s, true)
            }
            [a, ..] if a.is_ascii_lowercase() => {
                i = 1;
                ((a.to_ascii_uppercase() as char).to_string(), true)
            }
            [a, b, ..] if a.is_ascii_uppercase() && b.is_ascii_lowercase() => {
                i = 2;
                (format!("{}{}", *a as char, *b as char), false)
            }
            [a, ..] if a.is_ascii_uppercase() => {
                i = 1;
                ((*a as char).to_string(), false)
            }
            _ => return Err(unsupported(open, &self.input[open..=close])),
        };
        let z = match atomic_number(&symbol) {
            Some(z) if z != 1 => z,
            _ => return Err(unsupported(open + 1, &body[..i])),
        };
        // optional hydrogen count
        if body.get(i) == Some(&b'H') {
            i += 1;
            while body.get(i).is_some_and(u8::is_ascii_digit) {
                i += 1;
            }
        }
        if i != body.len() {
            return Err(unsupported(open + 1 + i, &body[i..]));
        }
        self.pos = close + 1;
        Ok(Atom { z, aromatic })
    }

    fn ring_closure(&mut self) -> Result<(), SmilesError> {
        let start = self.pos;
        let digit = if self.input[start] == b'%' {
            let d = self.input.get(start + 1..start + 3);
            match d {
                Some([a, b]) if a.is_ascii_digit() && b.is_ascii_digit() => {
                    self.pos += 3;
                    ((a - b'0') * 10 + (b - b'0')) as u32
                }
                _ => return Err(self.err(start, SmilesErrorKind::Unexpected('%'))),
            }
        } else {
            self.pos += 1;
            (self.input[start] - b'0') as u32
        };
        let Some(atom) = self.prev else {
            return Err(self.err(start, SmilesErrorKind::Unexpected(self.input[start] as char)));
        };
        let bond = self.pending.take().map(|p| p.kind);
        match self.rings.remove(&digit) {
            None => {
                self.rings.insert(digit, (atom, bond, start));
            }
            Some((other, other_bond, _)) => {
                let kind = match (bond, other_bond) {
                    (Some(a), Some(b)) if a != b => {
                        return Err(self.err(start, SmilesErrorKind::RingBondMismatch(digit)))
                    }
                    (a, b) => a.or(b),
                };
                if other == atom {
                    return Err(self.err(start, SmilesErrorKind::DuplicateBond));
                }
                self.bonds.push((other, atom, kind));
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<Graph, SmilesError> {
        let n = self.atoms.len();
        let mut seen = std::collections::HashSet::new();
        for &(u, v, _) in &self.bonds {
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(SmilesError::new(self.input.len(), SmilesErrorKind::DuplicateBond));
            }
        }
        // First pass: implicit bonds between two aromatic atoms are aromatic.
        let first: Vec<(usize, usize, BondKind, bool)> = self
            .bonds
            .iter()
            .map(|&(u, v, kind)| match kind {
                Some(k) => (u, v, k, false),
                None if self.atoms[u].aromatic && self.atoms[v].aromatic => {
                    (u, v, BondKind::Aromatic, true)
                }
                None => (u, v, BondKind::Single, false),
            })
            .collect();
        let labels: Vec<u32> = self.atoms.iter().map(|a| a.z).collect();
        let provisional = Graph::new(labels.clone(), first.iter().map(|&(u, v, k, _)| (u, v, k.id())))
            .map_err(|_| SmilesError::new(self.input.len(), SmilesErrorKind::DuplicateBond))?;
        // Implicit aromatic bonds outside any ring (biaryl links) are single.
        let bridge_set: std::collections::HashSet<(usize, usize)> =
            bridges(&provisional).into_iter().collect();
        let edges = first.into_iter().map(|(u, v, k, implicit)| {
            let key = (u.min(v), u.max(v));
            let k = if implicit && bridge_set.contains(&key) { BondKind::Single } else { k };
            (u, v, k.id())
        });
        debug_assert_eq!(labels.len(), n);
        Ok(Graph::new(labels, edges).expect("validated above"))
    }
}

fn char_end(input: &[u8], start: usize) -> usize {
    let mut end = start + 1;
    while end < input.len() && (input[end] & 0xC0) == 0x80 {
        end += 1;
    }
    end
}

/// Parses a SMILES string into a hydrogen-suppressed molecular graph.
pub fn parse_smiles(text: &str) -> Result<Graph, SmilesError> {
    Parser {
        input: text.as_bytes(),
        pos: 0,
        atoms: Vec::new(),
        bonds: Vec::new(),
        prev: None,
        pending: None,
        branches: Vec::new(),
        rings: BTreeMap::new(),
    }
    .run()
}
