//! Seeded SplitMix64 generator.
//!
//! The generator is part of the external interface: problem matrices and
//! sampled check points are derived from it, so any implementation using the
//! same constants reproduces the same streams bit for bit.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller; consumes two draws per call.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform point in the closed unit ball of dimension `dim`.
    pub fn unit_ball(&mut self, dim: usize) -> Vec<f64> {
        let mut dir: Vec<f64> = (0..dim).map(|_| self.normal()).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let radius = self.next_f64().powf(1.0 / dim as f64);
        if norm > 0.0 {
            for v in &mut dir {
                *v *= radius / norm;
            }
        }
        dir
    }
}
