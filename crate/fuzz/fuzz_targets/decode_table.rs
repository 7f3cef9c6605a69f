#![no_main]

use libfuzzer_sys::fuzz_target;
use rpt_core::encoder::{decode, encode, TableTensor, TABLE_LEN};
use rpt_core::formula::Representation;

fuzz_target!(|data: &[u8]| {
    // Sparse input: (cell index u16, value f64) records.
    let mut values = vec![0.0; TABLE_LEN];
    for chunk in data.chunks_exact(10) {
        let idx = usize::from(u16::from_le_bytes([chunk[0], chunk[1]])) % TABLE_LEN;
        values[idx] = f64::from_le_bytes(chunk[2..10].try_into().unwrap());
    }
    let Ok(t) = TableTensor::from_values(values, Representation::Absolute) else { return };
    if let Ok(c) = decode(&t) {
        assert_eq!(encode(&c).unwrap().values(), t.values());
    }
});
