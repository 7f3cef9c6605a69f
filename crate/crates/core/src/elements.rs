//! Periodic-table geometry used by the encoder.
//!
//! The table is a 9 x 18 grid. Rows 0..=6 are periods 1..=7; the lanthanides
//! (Z 57..=71) and actinides (Z 89..=103) are detached into rows 7 and 8,
//! columns 3..=17. Column 0 is the alkali column and column 17 the noble-gas
//! column, which the periodic convolution treats as neighbours.
//!
//! The data ships as `data/elements.csv` (`symbol,atomic_number,row,col,block`).

use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRID_ROWS: usize = 9;
pub const GRID_COLS: usize = 18;
pub const ELEMENT_COUNT: usize = 118;

/// Version tag of the embedded table; bump when `elements.csv` changes.
pub const TABLE_VERSION: u32 = 1;

const TABLE_CSV: &str = include_str!("../data/elements.csv");

/// Orbital block. The discriminant is the encoder channel index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Block {
    S = 0,
    P = 1,
    D = 2,
    F = 3,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::S, Block::P, Block::D, Block::F];

    pub fn channel(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Block::S => "s",
            Block::P => "p",
            Block::D => "d",
            Block::F => "f",
        }
    }

    fn parse(s: &str) -> Option<Block> {
        match s {
            "s" => Some(Block::S),
            "p" => Some(Block::P),
            "d" => Some(Block::D),
            "f" => Some(Block::F),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElementRecord {
    pub symbol: &'static str,
    pub atomic_number: u8,
    pub row: usize,
    pub col: usize,
    pub block: Block,
}

struct Table {
    records: Vec<ElementRecord>,
    by_symbol: HashMap<&'static str, u8>,
    by_cell: [[u8; GRID_COLS]; GRID_ROWS],
}

fn table() -> &'static Table {
    static TABLE: OnceLock<Table> = OnceLock::new();
    TABLE.get_or_init(|| load(TABLE_CSV).expect("embedded element table is well formed"))
}

fn load(text: &'static str) -> std::result::Result<Table, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some("symbol,atomic_number,row,col,block") => {}
        other => return Err(format!("bad header {other:?}")),
    }
    let mut records = Vec::with_capacity(ELEMENT_COUNT);
    let mut by_cell = [[0u8; GRID_COLS]; GRID_ROWS];
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&'static str> = line.split(',').collect();
        let [symbol, z, row, col, block] = fields[..] else {
            return Err(format!("line {}: expected 5 fields", i + 2));
        };
        let bad = |what: &str| format!("line {}: bad {what}", i + 2);
        let rec = ElementRecord {
            symbol,
            atomic_number: z.parse().map_err(|_| bad("atomic_number"))?,
            row: row.parse().map_err(|_| bad("row"))?,
            col: col.parse().map_err(|_| bad("col"))?,
            block: Block::parse(block).ok_or_else(|| bad("block"))?,
        };
        if usize::from(rec.atomic_number) != records.len() + 1 {
            return Err(format!("line {}: atomic numbers must be consecutive", i + 2));
        }
        if rec.row >= GRID_ROWS || rec.col >= GRID_COLS {
            return Err(bad("cell"));
        }
        if by_cell[rec.row][rec.col] != 0 {
            return Err(format!("line {}: cell already taken", i + 2));
        }
        by_cell[rec.row][rec.col] = rec.atomic_number;
        records.push(rec);
    }
    if records.len() != ELEMENT_COUNT {
        return Err(format!("expected {ELEMENT_COUNT} elements, found {}", records.len()));
    }
    let by_symbol = records.iter().map(|r| (r.symbol, r.atomic_number)).collect();
    Ok(Table { records, by_symbol, by_cell })
}

/// All 118 records ordered by atomic number.
pub fn all() -> &'static [ElementRecord] {
    &table().records
}

pub fn lookup(symbol: &str) -> Result<&'static ElementRecord> {
    Element::from_symbol(symbol).map(Element::record)
}

/// The element occupying grid cell `(row, col)`, if any.
pub fn at_cell(row: usize, col: usize) -> Option<Element> {
    if row >= GRID_ROWS || col >= GRID_COLS {
        return None;
    }
    match table().by_cell[row][col] {
        0 => None,
        z => Some(Element(z)),
    }
}

/// A chemical element, identified by atomic number. Ordering follows Z.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Element(u8);

impl Element {
    pub fn from_symbol(symbol: &str) -> Result<Element> {
        table().by_symbol.get(symbol).map(|&z| Element(z)).ok_or_else(|| Error::UnknownElement(symbol.to_string()))
    }

    pub fn from_atomic_number(z: u8) -> Option<Element> {
        (1..=ELEMENT_COUNT as u8).contains(&z).then_some(Element(z))
    }

    pub fn atomic_number(self) -> u8 {
        self.0
    }

    pub fn record(self) -> &'static ElementRecord {
        &table().records[usize::from(self.0) - 1]
    }

    pub fn symbol(self) -> &'static str {
        self.record().symbol
    }

    pub fn block(self) -> Block {
        self.record().block
    }
}

impl fmt::Debug for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}
