#![no_main]

use libfuzzer_sys::fuzz_target;
use rpt_core::encoder::{decode, encode};
use rpt_core::formula::parse_formula;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(c) = parse_formula(text) else { return };
    assert!(c.iter().all(|(_, n)| n.is_finite() && n > 0.0));
    // Parsed counts are finite and positive, so encoding must round-trip.
    let t = encode(&c).unwrap();
    assert_eq!(decode(&t).unwrap(), c);
    if let Ok(rel) = c.to_relative() {
        assert!((rel.total() - 1.0).abs() < 1e-9);
    }
});
