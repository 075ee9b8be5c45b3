#![no_main]

use std::path::Path;

use eoc_core::prior::store::Manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = Manifest::parse(data, Path::new("manifest.json")) {
        for f in &m.files {
            assert!(f.t < m.steps && f.l < m.layers);
            assert_eq!(f.shape, vec![m.tokens, m.width]);
        }
    }
});
