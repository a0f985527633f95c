#![no_main]
use libfuzzer_sys::fuzz_target;

use varscan::vast::{format_order, parse_order};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(p) = parse_order(text, None) {
        assert_eq!(parse_order(&format_order(&p.order), Some(p.order.len())).unwrap(), p);
    }
});
