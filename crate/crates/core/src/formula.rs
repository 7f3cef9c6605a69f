//! Chemical formula parsing and composition arithmetic.
//!
//! Grammar (whitespace around the whole formula is ignored):
//!
//! ```text
//! formula := item+
//! item    := symbol count? | "(" formula ")" count?
//! symbol  := [A-Z] [a-z]?
//! count   := [0-9]+ ("." [0-9]+)?
//! ```
//!
//! Symbols are case sensitive, so `Co` is cobalt and `CO` is carbon plus
//! oxygen. Hydrate dots, charges and isotope labels are rejected.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::elements::Element;
use crate::error::{Error, Result};

/// Parenthesis nesting accepted by the parser.
pub const MAX_NESTING: usize = 32;

const RELATIVE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    /// Raw stoichiometric counts, `H2O` -> {H: 2, O: 1}.
    #[default]
    Absolute,
    /// Counts normalised to sum to one, `H2O` -> {H: 2/3, O: 1/3}.
    Relative,
}

impl std::str::FromStr for Representation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "absolute" => Ok(Representation::Absolute),
            "relative" => Ok(Representation::Relative),
            other => Err(format!("unknown representation `{other}`")),
        }
    }
}

/// Element -> count map. Counts are strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Composition {
    entries: BTreeMap<Element, f64>,
    representation: Representation,
}

impl Composition {
    /// Builds an absolute composition, summing repeated elements and dropping zero counts.
    pub fn from_counts<I>(counts: I) -> Result<Composition>
    where
        I: IntoIterator<Item = (Element, f64)>,
    {
        let mut entries = BTreeMap::new();
        for (el, n) in counts {
            if !n.is_finite() || n < 0.0 {
                return Err(Error::Syntax { position: 0, reason: format!("invalid count {n} for {el}") });
            }
            *entries.entry(el).or_insert(0.0) += n;
        }
        entries.retain(|_, n| *n > 0.0);
        if entries.is_empty() {
            return Err(Error::EmptyComposition);
        }
        Ok(Composition { entries, representation: Representation::Absolute })
    }

    pub fn representation(&self) -> Representation {
        self.representation
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, symbol: &str) -> Option<f64> {
        Element::from_symbol(symbol).ok().and_then(|e| self.entries.get(&e).copied())
    }

    /// Entries ordered by atomic number.
    pub fn iter(&self) -> impl Iterator<Item = (Element, f64)> + '_ {
        self.entries.iter().map(|(&e, &n)| (e, n))
    }

    pub fn total(&self) -> f64 {
        self.entries.values().sum()
    }

    pub fn to_relative(&self) -> Result<Composition> {
        if self.entries.is_empty() {
            return Err(Error::EmptyComposition);
        }
        if self.representation == Representation::Relative {
            return Ok(self.clone());
        }
        let total = self.total();
        Ok(Composition {
            entries: self.entries.iter().map(|(&e, &n)| (e, n / total)).collect(),
            representation: Representation::Relative,
        })
    }

    /// Additive merge of two compositions with the same representation.
    pub fn merge(&self, other: &Composition) -> Composition {
        let mut entries = self.entries.clone();
        for (&e, &n) in &other.entries {
            *entries.entry(e).or_insert(0.0) += n;
        }
        Composition { entries, representation: self.representation }
    }

    pub(crate) fn from_parts(entries: BTreeMap<Element, f64>, representation: Representation) -> Result<Composition> {
        if entries.is_empty() {
            return Err(Error::EmptyComposition);
        }
        let c = Composition { entries, representation };
        if representation == Representation::Relative && (c.total() - 1.0).abs() > RELATIVE_TOLERANCE {
            return Err(Error::ShapeMismatch(format!("relative counts sum to {}", c.total())));
        }
        Ok(c)
    }

    /// Canonical key for deduplication: element symbols in Z order with
    /// shortest round-trip counts, e.g. `H2 O1`.
    pub fn canonical_key(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Composition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (e, n)) in self.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{e}{n}")?;
        }
        Ok(())
    }
}

/// Parses a formula into an absolute composition.
pub fn parse_formula(text: &str) -> Result<Composition> {
    let start = text.len() - text.trim_start().len();
    let end = text.trim_end().len();
    if start >= end {
        return Err(Error::EmptyFormula);
    }
    let mut parser = Parser { src: text.as_bytes(), pos: start, end };
    let items = parser.sequence(0)?;
    if parser.pos < parser.end {
        return Err(parser.error(match parser.src[parser.pos] {
            b')' => "unbalanced `)`",
            _ => "unexpected character",
        }));
    }
    let mut entries: BTreeMap<Element, f64> = BTreeMap::new();
    for (e, n) in items {
        *entries.entry(e).or_insert(0.0) += n;
    }
    if let Some((e, _)) = entries.iter().find(|(_, n)| !n.is_finite()) {
        return Err(Error::Syntax { position: start, reason: format!("count for {e} overflows") });
    }
    entries.retain(|_, n| *n > 0.0);
    if entries.is_empty() {
        return Err(Error::EmptyFormula);
    }
    Ok(Composition { entries, representation: Representation::Absolute })
}

pub fn to_relative(c: &Composition) -> Result<Composition> {
    c.to_relative()
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    end: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<u8> {
        (self.pos < self.end).then(|| self.src[self.pos])
    }

    fn error(&self, reason: &str) -> Error {
        Error::Syntax { position: self.pos, reason: reason.to_string() }
    }

    /// Parses items until end of input or a closing parenthesis.
    fn sequence(&mut self, depth: usize) -> Result<Vec<(Element, f64)>> {
        let mut out = Vec::new();
        loop {
            match self.peek() {
                None | Some(b')') => break,
                Some(b'(') => {
                    if depth >= MAX_NESTING {
                        return Err(self.error("parentheses nested too deeply"));
                    }
                    let open = self.pos;
                    self.pos += 1;
                    let inner = self.sequence(depth + 1)?;
                    if self.peek() != Some(b')') {
                        return Err(Error::Syntax { position: open, reason: "unbalanced `(`".into() });
                    }
                    if inner.is_empty() {
                        return Err(self.error("empty group"));
                    }
                    self.pos += 1;
                    let k = self.count()?.unwrap_or(1.0);
                    out.extend(inner.into_iter().map(|(e, n)| (e, n * k)));
                }
                Some(c) if c.is_ascii_uppercase() => {
                    let el = self.symbol()?;
                    let n = self.count()?.unwrap_or(1.0);
                    out.push((el, n));
                }
                Some(c) if c.is_ascii_lowercase() => {
                    return Err(self.error("element symbols start with an uppercase letter"));
                }
                Some(c) if c.is_ascii_digit() || c == b'.' => return Err(self.error("count without element")),
                Some(_) => return Err(self.error("unexpected character")),
            }
        }
        Ok(out)
    }

    fn symbol(&mut self) -> Result<Element> {
        let start = self.pos;
        self.pos += 1;
        if self.peek().is_some_and(|c| c.is_ascii_lowercase()) {
            self.pos += 1;
        }
        // ASCII-only span, so the slice is valid UTF-8.
        let sym = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        Element::from_symbol(sym)
    }

    fn count(&mut self) -> Result<Option<f64>> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.peek() == Some(b'.') {
            if self.pos == start {
                return Err(self.error("malformed number"));
            }
            self.pos += 1;
            let frac = self.pos;
            while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                self.pos += 1;
            }
            if self.pos == frac {
                return Err(self.error("malformed number"));
            }
        }
        if self.pos == start {
            return Ok(None);
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        text.parse::<f64>().map(Some).map_err(|_| Error::Syntax { position: start, reason: "malformed number".into() })
    }
}
