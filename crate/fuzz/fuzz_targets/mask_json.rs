#![no_main]

use eoc_core::cache::CacheSchedule;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = CacheSchedule::from_mask_json(data) {
        assert!(s.steps() > 0 && s.layers() > 0);
        for l in 0..s.layers() {
            assert!(!s.is_reuse(0, l));
        }
        for (t, l) in s.reuse_cells() {
            assert!(s.anchor(t, l).is_some_and(|a| a < t));
        }
        assert_eq!(CacheSchedule::from_mask(&s.to_mask()).unwrap(), s);
    }
});
