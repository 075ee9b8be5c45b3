//! Counter-based deterministic random numbers.
//!
//! Each draw hashes `(key, counter)` through the SplitMix64 finalizer, so a
//! stream is fully determined by its key and position. Independent streams
//! are derived with [`Rng::split`] rather than by sharing one generator.

use crate::numerics::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            key: mix64(seed ^ 0x005E_ED0F_E0C0_u64),
            counter: 0,
        }
    }

    /// A child stream keyed by this stream's key and `stream`; does not
    /// advance `self`.
    pub fn split(&self, stream: u64) -> Rng {
        Rng {
            key: mix64(self.key ^ mix64(stream.wrapping_add(GOLDEN))),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter = self.counter.wrapping_add(1);
        v
    }

    /// Uniform in `(0, 1]`, 53 bits of precision.
    pub fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw via Box-Muller; consumes two counter values.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_open01();
        let u2 = self.next_open01();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// I.i.d. standard normal tensor drawn from `rng`.
pub fn seeded_normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.next_normal()).collect();
    Tensor::new(shape.to_vec(), data).expect("normal draws are finite for valid shapes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_tensor() {
        let a = seeded_normal(&mut Rng::new(7), &[4, 5]);
        let b = seeded_normal(&mut Rng::new(7), &[4, 5]);
        assert_eq!(a, b);
    }

    #[test]
    fn different_seed_differs() {
        let a = seeded_normal(&mut Rng::new(7), &[4, 5]);
        let b = seeded_normal(&mut Rng::new(8), &[4, 5]);
        assert!(a.data().iter().zip(b.data()).any(|(x, y)| x != y));
    }

    #[test]
    fn moments_of_1e5_draws() {
        let t = seeded_normal(&mut Rng::new(2024), &[100_000]);
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn split_streams_are_independent_of_parent_position() {
        let mut parent = Rng::new(3);
        let child_before = parent.split(11);
        parent.next_u64();
        assert_eq!(child_before, parent.split(11));
        assert_ne!(parent.split(11), parent.split(12));
    }

    #[test]
    fn golden_values_are_stable() {
        // Frozen first outputs; any change to the mixing breaks cross-run goldens.
        let mut r = Rng::new(0);
        assert_eq!(r.next_u64(), 0xb650_5788_2833_7c3b);
        assert_eq!(r.next_u64(), 0x4d87_b95c_c201_3348);
        assert_eq!(r.next_normal(), -0.21978200004727946);
    }
}
