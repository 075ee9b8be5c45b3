#![no_main]

use eoc_core::cache::OptimizationPlan;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = OptimizationPlan::from_json(data) {
        assert!((0.0..=1.0).contains(&p.gamma));
        assert!(p.theta >= 0.0 && p.omega >= 0.0);
        let again = OptimizationPlan::from_json(p.to_json().as_bytes()).unwrap();
        assert_eq!(again, p);
    }
});
