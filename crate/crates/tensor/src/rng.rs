//! Counter-based random number generation.
//!
//! Every draw is a pure function of `(seed, counter)`, so a stream can be
//! replayed from any logged position by restoring the counter.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn with_counter(seed: u64, counter: u64) -> Self {
        Self { seed, counter }
    }

    /// Independent stream derived from this seed and a stream tag.
    pub fn fork(&self, tag: u64) -> Self {
        Self::new(mix64(self.seed ^ mix64(tag.wrapping_add(GOLDEN))))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let key = mix64(self.seed.wrapping_add(GOLDEN));
        let v = mix64(key ^ mix64(self.counter.wrapping_mul(GOLDEN).wrapping_add(GOLDEN)));
        self.counter = self.counter.wrapping_add(1);
        v
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// One standard normal draw; consumes exactly one counter step.
    #[inline]
    pub fn normal(&mut self) -> f64 {
        let bits = self.next_u64();
        // u1 in (0, 1], u2 in [0, 1)
        let u1 = ((bits >> 32) as f64 + 1.0) / 4_294_967_296.0;
        let u2 = (bits & 0xFFFF_FFFF) as f64 / 4_294_967_296.0;
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
