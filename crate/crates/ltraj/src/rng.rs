//! Seeded, splittable random number generation.
//!
//! One generator type serves every module so a whole run is reproducible from
//! a single 64-bit seed. Children derived with [`SplitRng::derive`] are
//! independent streams keyed by a label, which keeps per-subject generation
//! order-free: subject `i` sees the same draws whether subjects are produced
//! serially or in parallel.
//!
//! The core generator is xoshiro256++ seeded through SplitMix64; normal
//! variates come from the Box-Muller transform. Both are fixed algorithms, so
//! streams are bit-stable across platforms and releases.

/// Splittable pseudo-random generator with a 64-bit seed.
#[derive(Debug, Clone)]
pub struct SplitRng {
    state: [u64; 4],
    seed: u64,
    spare_normal: Option<f64>,
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SplitRng {
    /// Creates a generator from a 64-bit seed.
    pub fn new(seed: u64) -> Self {
        let mut s = seed;
        let state = [
            splitmix64(&mut s),
            splitmix64(&mut s),
            splitmix64(&mut s),
            splitmix64(&mut s),
        ];
        SplitRng {
            state,
            seed,
            spare_normal: None,
        }
    }

    /// Derives an independent child stream from this generator's seed and a label.
    ///
    /// Pure in (seed, label): it does not advance this generator.
    pub fn derive(&self, label: u64) -> SplitRng {
        let mut s = self.seed ^ label.wrapping_mul(0xa24b_aed4_963e_e407);
        let mixed = splitmix64(&mut s);
        SplitRng::new(mixed)
    }

    /// Splits off a child stream, advancing this generator once.
    pub fn split(&mut self) -> SplitRng {
        let child_seed = self.next_u64();
        SplitRng::new(child_seed)
    }

    /// Next raw 64-bit output (xoshiro256++).
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        // 53 mantissa bits of the raw output.
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Integer draw in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal draw (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // Reject u1 == 0 so the log is finite.
        let mut u1 = self.uniform();
        while u1 <= 0.0 {
            u1 = self.uniform();
        }
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fills a fresh vector with standard normal draws.
    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}
