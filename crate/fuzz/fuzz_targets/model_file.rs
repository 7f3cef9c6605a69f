#![no_main]

use libfuzzer_sys::fuzz_target;
use rpt_core::model_file::{from_bytes, to_bytes};

fuzz_target!(|data: &[u8]| {
    if let Ok(net) = from_bytes(data) {
        // Re-serialisation is a fixed point even if the input JSON was not canonical.
        let bytes = to_bytes(&net);
        assert_eq!(to_bytes(&from_bytes(&bytes).unwrap()), bytes);
        assert_eq!(net.param_count(), from_bytes(&bytes).unwrap().param_count());
    }
});
