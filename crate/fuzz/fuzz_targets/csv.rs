#![no_main]
use libfuzzer_sys::fuzz_target;

use varscan::data::{parse_csv, SplitRatios};

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = parse_csv(data, None, SplitRatios::default()) {
        let again = parse_csv(ds.to_csv().as_bytes(), Some(ds.n_vars()), SplitRatios::default()).unwrap();
        assert_eq!(again.n_steps(), ds.n_steps());
    }
});
