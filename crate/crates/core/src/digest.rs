//! Cheap 64-bit fingerprints for event payloads and cache validation.
//!
//! Not cryptographic. The mixer is a multiply-rotate over the raw `f64`
//! bit patterns, so any single-bit change in the input changes the output.

const SEED: u64 = 0x243f_6a88_85a3_08d3;
const MUL: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy)]
pub struct Fingerprint(u64);

impl Default for Fingerprint {
    fn default() -> Self {
        Fingerprint(SEED)
    }
}

impl Fingerprint {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn word(&mut self, w: u64) {
        self.0 = (self.0 ^ w).wrapping_mul(MUL).rotate_left(29);
    }

    pub fn floats(&mut self, xs: &[f64]) {
        for x in xs {
            self.word(x.to_bits());
        }
        self.word(xs.len() as u64);
    }

    pub fn finish(self) -> u64 {
        let mut h = self.0;
        h ^= h >> 33;
        h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
        h ^= h >> 33;
        h
    }
}

pub fn of_floats(xs: &[f64]) -> u64 {
    let mut fp = Fingerprint::new();
    fp.floats(xs);
    fp.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_bit_flip_changes_digest() {
        let a: [f64; 3] = [1.0, 2.0, 3.0];
        let mut b = a;
        b[1] = f64::from_bits(b[1].to_bits() ^ 1);
        assert_ne!(of_floats(&a), of_floats(&b));
        assert_eq!(of_floats(&a), of_floats(&[1.0, 2.0, 3.0]));
    }

    #[test]
    fn length_is_part_of_digest() {
        assert_ne!(of_floats(&[0.0]), of_floats(&[0.0, 0.0]));
    }
}
