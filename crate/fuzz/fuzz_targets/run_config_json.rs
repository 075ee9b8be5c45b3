#![no_main]

use eoc_core::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = RunConfig::from_json(data) {
        let _ = c.validate();
        assert_eq!(RunConfig::from_json(c.to_json().as_bytes()).unwrap(), c);
    }
});
