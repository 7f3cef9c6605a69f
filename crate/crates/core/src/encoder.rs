//! Composition -> four-channel periodic-table tensor.
//!
//! Channel order is (s, p, d, f). Each element's count is written at its grid
//! cell in the channel of its orbital block; everything else is zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::elements::{self, Block, GRID_COLS, GRID_ROWS};
use crate::error::{Error, Result};
use crate::formula::{Composition, Representation};

pub const CHANNELS: usize = 4;
pub const TABLE_LEN: usize = CHANNELS * GRID_ROWS * GRID_COLS;
pub const TABLE_SHAPE: [usize; 3] = [CHANNELS, GRID_ROWS, GRID_COLS];

/// Encoded composition, row-major `[channel, row, col]`, kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct TableTensor {
    values: Vec<f64>,
    representation: Representation,
}

#[inline]
pub fn offset(channel: usize, row: usize, col: usize) -> usize {
    (channel * GRID_ROWS + row) * GRID_COLS + col
}

impl TableTensor {
    pub fn zeros(representation: Representation) -> TableTensor {
        TableTensor { values: vec![0.0; TABLE_LEN], representation }
    }

    pub fn from_values(values: Vec<f64>, representation: Representation) -> Result<TableTensor> {
        if values.len() != TABLE_LEN {
            return Err(Error::ShapeMismatch(format!("expected {TABLE_LEN} values, got {}", values.len())));
        }
        Ok(TableTensor { values, representation })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn representation(&self) -> Representation {
        self.representation
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.values[offset(channel, row, col)]
    }

    pub fn set(&mut self, channel: usize, row: usize, col: usize, v: f64) {
        self.values[offset(channel, row, col)] = v;
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Appends the values, cast to `T`, onto a batch buffer.
    pub fn extend_into<T: num_traits::Float>(&self, out: &mut Vec<T>) {
        out.extend(self.values.iter().map(|&v| T::from(v).expect("finite cast")));
    }

    pub fn to_json(&self) -> TableJson {
        TableJson {
            shape: TABLE_SHAPE.to_vec(),
            channel_names: Block::ALL.iter().map(|b| b.name().to_string()).collect(),
            representation: self.representation,
            values: self.values.clone(),
        }
    }
}

/// JSON form emitted by `rpt encode`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TableJson {
    pub shape: Vec<usize>,
    pub channel_names: Vec<String>,
    pub representation: Representation,
    pub values: Vec<f64>,
}

pub fn encode(c: &Composition) -> Result<TableTensor> {
    if c.is_empty() {
        return Err(Error::EmptyComposition);
    }
    let mut t = TableTensor::zeros(c.representation());
    for (el, n) in c.iter() {
        let r = el.record();
        t.set(r.block.channel(), r.row, r.col, n);
    }
    Ok(t)
}

pub fn decode(t: &TableTensor) -> Result<Composition> {
    let mut entries = BTreeMap::new();
    for channel in 0..CHANNELS {
        for row in 0..GRID_ROWS {
            for col in 0..GRID_COLS {
                let v = t.get(channel, row, col);
                if v == 0.0 {
                    continue;
                }
                let el = elements::at_cell(row, col)
                    .filter(|e| e.block().channel() == channel && v > 0.0 && v.is_finite())
                    .ok_or(Error::InvalidCell { channel, row, col })?;
                entries.insert(el, v);
            }
        }
    }
    Composition::from_parts(entries, t.representation())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::parse_formula;

    #[test]
    fn water() {
        let t = encode(&parse_formula("H2O").unwrap()).unwrap();
        assert_eq!(t.get(Block::S.channel(), 0, 0), 2.0);
        assert_eq!(t.get(Block::P.channel(), 1, 15), 1.0);
        assert_eq!(t.values().iter().filter(|v| **v != 0.0).count(), 2);
        assert_eq!(TABLE_LEN - 2, 646);
    }

    #[test]
    fn iron_sits_in_d_channel() {
        let t = encode(&parse_formula("Fe").unwrap()).unwrap();
        let nz: Vec<usize> = (0..TABLE_LEN).filter(|&i| t.values()[i] != 0.0).collect();
        assert_eq!(nz, vec![offset(Block::D.channel(), 3, 7)]);
        assert_eq!(t.values()[nz[0]], 1.0);
    }

    #[test]
    fn relative_sums_to_one() {
        let t = encode(&parse_formula("H2O").unwrap().to_relative().unwrap()).unwrap();
        assert!((t.sum() - 1.0).abs() < 1e-9);
        assert_eq!(t.representation(), Representation::Relative);
    }

    #[test]
    fn decode_round_trip_and_errors() {
        let c = parse_formula("H2O").unwrap();
        assert_eq!(decode(&encode(&c).unwrap()).unwrap(), c);

        let zero = TableTensor::zeros(Representation::Absolute);
        assert!(matches!(decode(&zero), Err(Error::EmptyComposition)));

        let mut wrong_block = TableTensor::zeros(Representation::Absolute);
        wrong_block.set(Block::S.channel(), 1, 15, 1.0);
        assert!(matches!(decode(&wrong_block), Err(Error::InvalidCell { channel: 0, row: 1, col: 15 })));

        let mut empty_cell = TableTensor::zeros(Representation::Absolute);
        empty_cell.set(Block::D.channel(), 0, 5, 1.0);
        assert!(matches!(decode(&empty_cell), Err(Error::InvalidCell { .. })));

        let mut negative = TableTensor::zeros(Representation::Absolute);
        negative.set(Block::S.channel(), 0, 0, -1.0);
        assert!(matches!(decode(&negative), Err(Error::InvalidCell { .. })));
    }

    #[test]
    fn json_shape() {
        let j = encode(&parse_formula("NaCl").unwrap()).unwrap().to_json();
        assert_eq!(j.shape, vec![4, 9, 18]);
        assert_eq!(j.channel_names, vec!["s", "p", "d", "f"]);
        assert_eq!(j.values.len(), 648);
    }
}
