//! Counter-based randomness.
//!
//! Every random draw in the crate is addressed by an [`RngKey`]: a seed plus
//! the coordinates of the draw site. The key is run through Philox4x32-10, so
//! a value depends only on its key and never on evaluation order. Serial and
//! parallel code paths therefore produce bit-identical results.

/// Tags one kind of draw site so that unrelated consumers of the same seed
/// never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Purpose(pub u8);

impl Purpose {
    /// Label-position draw in location-aware inversion.
    pub const Q_MAX: Purpose = Purpose(1);
    /// Off-label truncated draws in location-aware inversion.
    pub const TRUNC: Purpose = Purpose(2);
    /// Fresh Gumbel noise used while editing (shared with regeneration).
    pub const EDIT_NOISE: Purpose = Purpose(3);
    /// Plain unconditional / conditional pyramid generation.
    pub const GENERATION: Purpose = Purpose(4);
    pub const CODEBOOK: Purpose = Purpose(5);
    pub const MIXING: Purpose = Purpose(6);
    pub const CONDITION: Purpose = Purpose(7);
    pub const SCENE: Purpose = Purpose(8);
    /// Free for tests, fuzzing and experiment drivers.
    pub const AUX: Purpose = Purpose(9);
}

/// Address of a single random draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngKey {
    pub seed: u64,
    pub purpose: Purpose,
    pub scale: u32,
    pub row: u32,
    pub col: u32,
    pub channel: u32,
}

const MAX_SCALE: u32 = 1 << 24;

impl RngKey {
    pub const fn new(seed: u64, purpose: Purpose) -> Self {
        RngKey {
            seed,
            purpose,
            scale: 0,
            row: 0,
            col: 0,
            channel: 0,
        }
    }

    pub const fn at(self, scale: u32, row: u32, col: u32) -> Self {
        RngKey {
            scale,
            row,
            col,
            ..self
        }
    }

    pub const fn with_channel(self, channel: u32) -> Self {
        RngKey { channel, ..self }
    }

    /// Addresses the `index`-th draw of a flat stream, spreading the index
    /// over the row/col/channel words.
    pub const fn nth(self, index: u64) -> Self {
        RngKey {
            row: (index >> 32) as u32,
            col: 0,
            channel: index as u32,
            ..self
        }
    }

    fn counter(&self) -> [u32; 4] {
        debug_assert!(self.scale < MAX_SCALE);
        [
            self.channel,
            self.col,
            self.row,
            ((self.purpose.0 as u32) << 24) | (self.scale & (MAX_SCALE - 1)),
        ]
    }

    /// All 128 output bits of the keyed permutation.
    pub fn words(&self) -> [u32; 4] {
        philox4x32_10(self.counter(), [self.seed as u32, (self.seed >> 32) as u32])
    }

    pub fn raw(&self) -> u64 {
        let w = self.words();
        ((w[0] as u64) << 32) | w[1] as u64
    }
}

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = a as u64 * b as u64;
    ((p >> 32) as u32, p as u32)
}

/// Philox4x32 with 10 rounds (Salmon et al., SC'11).
pub fn philox4x32_10(mut ctr: [u32; 4], mut key: [u32; 2]) -> [u32; 4] {
    for round in 0..10 {
        if round > 0 {
            key[0] = key[0].wrapping_add(PHILOX_W0);
            key[1] = key[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, ctr[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, ctr[2]);
        ctr = [hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0];
    }
    ctr
}

const TWO_POW_M52: f64 = 1.0 / (1u64 << 52) as f64;

#[inline]
fn open_unit(bits: u64) -> f64 {
    // Midpoints of 2^52 equal bins; every value is exact and the extremes
    // are 2^-53 and 1 - 2^-53.
    ((bits >> 12) as f64 + 0.5) * TWO_POW_M52
}

/// Uniform draw strictly inside (0, 1).
pub fn uniform_open(key: RngKey) -> f64 {
    open_unit(key.raw())
}

/// Standard normal draw (Box-Muller on two independent halves of the block).
pub fn standard_normal(key: RngKey) -> f64 {
    let w = key.words();
    let u1 = open_unit(((w[0] as u64) << 32) | w[1] as u64);
    let u2 = open_unit(((w[2] as u64) << 32) | w[3] as u64);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    // Known-answer vectors from the Random123 distribution (kat_vectors).
    #[test]
    fn philox_known_answers() {
        assert_eq!(
            philox4x32_10([0; 4], [0; 2]),
            [0x6627_e8d5, 0xe169_c58d, 0xbc57_ac4c, 0x9b00_dbd8]
        );
        assert_eq!(
            philox4x32_10([u32::MAX; 4], [u32::MAX; 2]),
            [0x408f_276d, 0x41c8_3b0e, 0xa20b_c7c6, 0x6d54_51fd]
        );
        assert_eq!(
            philox4x32_10(
                [0x243f_6a88, 0x85a3_08d3, 0x1319_8a2e, 0x0370_7344],
                [0xa409_3822, 0x299f_31d0]
            ),
            [0xd16c_fe09, 0x94fd_cceb, 0x5001_e420, 0x2412_6ea1]
        );
    }

    #[test]
    fn same_key_same_value() {
        let key = RngKey::new(7, Purpose::TRUNC).at(3, 4, 5).with_channel(6);
        assert_eq!(uniform_open(key).to_bits(), uniform_open(key).to_bits());
    }

    #[test]
    fn fields_separate_streams() {
        let base = RngKey::new(7, Purpose::TRUNC).at(1, 1, 1).with_channel(1);
        let variants = [
            RngKey { seed: 8, ..base },
            RngKey { purpose: Purpose::Q_MAX, ..base },
            RngKey { scale: 2, ..base },
            RngKey { row: 2, ..base },
            RngKey { col: 2, ..base },
            RngKey { channel: 2, ..base },
        ];
        for v in variants {
            assert_ne!(v.raw(), base.raw(), "{v:?}");
        }
    }

    #[test]
    fn open_unit_extremes() {
        assert!(open_unit(0) > 0.0);
        assert!(open_unit(u64::MAX) < 1.0);
        assert_eq!(open_unit(0), 2f64.powi(-53));
    }

    #[test]
    fn uniform_strictly_inside() {
        for i in 0..100_000u64 {
            let u = uniform_open(RngKey::new(i % 17, Purpose::AUX).nth(i));
            assert!(u > 0.0 && u < 1.0);
        }
    }

    #[test]
    fn order_independence() {
        let keys: Vec<_> = (0..64u64).map(|i| RngKey::new(3, Purpose::AUX).nth(i)).collect();
        let forward: Vec<u64> = keys.iter().map(|k| k.raw()).collect();
        let mut backward: Vec<u64> = keys.iter().rev().map(|k| k.raw()).collect();
        backward.reverse();
        assert_eq!(forward, backward);
    }
}
