#![no_main]

use eoc_core::numerics::Tensor;
use libfuzzer_sys::fuzz_target;

// The first two bytes pick a shape; the rest is the blob.
fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let shape = vec![data[0] as usize, data[1] as usize];
    if let Ok(t) = Tensor::from_le_bytes(shape.clone(), &data[2..]) {
        assert_eq!(t.shape(), shape.as_slice());
        assert_eq!(t.to_le_bytes(), &data[2..]);
    }
});
