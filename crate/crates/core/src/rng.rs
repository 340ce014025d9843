//! Counter-based random numbers.
//!
//! Every draw is a pure function of `(seed, slice, node, particle, step,
//! channel, lane)`. There is no mutable generator state, so a simulation
//! partitioned across any number of workers produces the same bits, and a
//! Picard iteration that reuses the same keys sees common random numbers
//! across iterations.

/// Channel for the Brownian increments driving the state equation.
pub const CH_INCREMENT: u32 = 0;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

#[inline]
fn absorb(state: u64, word: u64) -> u64 {
    mix64(state.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(word))
}

/// One logical stream, identified by `(seed, slice, node, particle)`.
///
/// The per-key preimage is absorbed once; per-draw indices `(step, channel,
/// lane)` are absorbed on each call, so draws are random-access.
#[derive(Clone, Copy, Debug)]
pub struct RngStream {
    base: u64,
}

impl RngStream {
    pub fn new(seed: u64, slice: u32, node: u32, particle: u32) -> Self {
        let mut s = mix64(seed ^ 0x6A09_E667_F3BC_C909);
        s = absorb(s, slice as u64);
        s = absorb(s, node as u64);
        s = absorb(s, particle as u64);
        RngStream { base: s }
    }

    #[inline]
    pub fn raw(&self, step: u32, channel: u32, lane: u32) -> u64 {
        let key = (step as u64) << 40 | (channel as u64) << 32 | lane as u64;
        mix64(absorb(self.base, key))
    }

    /// Uniform draw in the open interval (0, 1).
    #[inline]
    pub fn uniform(&self, step: u32, channel: u32, lane: u32) -> f64 {
        // 53-bit mantissa, offset by half an ulp so 0 and 1 are unreachable.
        ((self.raw(step, channel, lane) >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Standard normal draw via the inverse CDF.
    #[inline]
    pub fn normal(&self, step: u32, channel: u32, lane: u32) -> f64 {
        inverse_normal_cdf(self.uniform(step, channel, lane))
    }

    /// Fill `out` with independent standard normals for one step.
    #[inline]
    pub fn fill_normals(&self, step: u32, channel: u32, out: &mut [f64]) {
        for (lane, v) in out.iter_mut().enumerate() {
            *v = self.normal(step, channel, lane as u32);
        }
    }
}

/// Inverse of the standard normal CDF (Wichura's AS 241, PPND16 precision).
///
/// Relative accuracy about 1e-15 over (0, 1); this is what turns one counter
/// word into one normal without Box-Muller pairing.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_812_8e4) * r
            + 6.726_577_092_700_870_1e4)
            * r
            + 4.592_195_393_154_987_1e4)
            * r
            + 1.373_169_376_550_946_1e4)
            * r
            + 1.971_590_950_306_551_3e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_6;
        let den = ((((((5.226_495_278_852_854_6e3 * r + 2.872_908_573_572_194_3e4) * r
            + 3.930_789_580_009_271e4)
            * r
            + 2.121_379_430_158_659_6e4)
            * r
            + 5.394_196_021_424_751_1e3)
            * r
            + 6.871_870_074_920_579e2)
            * r
            + 4.231_333_070_160_091e1)
            * r
            + 1.0;
        return q * num / den;
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
            + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_6)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_545)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
            + 1.519_866_656_361_645_7e-2)
            * r
            + 1.481_039_764_274_800_8e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_758_8)
            * r
            + 1.0;
        num / den
    } else {
        let r = r - 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_4e-2)
            * r
            + 2.965_605_718_285_048_9e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_8e-15 * r + 1.421_511_758_316_446e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 1.487_536_129_085_061_5e-2)
            * r
            + 1.369_298_809_227_358e-1)
            * r
            + 5.998_322_065_558_88e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_bits() {
        let a = RngStream::new(7, 3, 11, 120);
        let b = RngStream::new(7, 3, 11, 120);
        for step in 0..50 {
            assert_eq!(a.raw(step, 0, 0), b.raw(step, 0, 0));
            assert_eq!(
                a.normal(step, 0, 1).to_bits(),
                b.normal(step, 0, 1).to_bits()
            );
        }
    }

    #[test]
    fn distinct_keys_differ() {
        let base = RngStream::new(7, 3, 11, 120);
        let variants = [
            RngStream::new(8, 3, 11, 120),
            RngStream::new(7, 4, 11, 120),
            RngStream::new(7, 3, 12, 120),
            RngStream::new(7, 3, 11, 121),
        ];
        for v in variants {
            assert_ne!(base.raw(0, 0, 0), v.raw(0, 0, 0));
        }
        assert_ne!(base.raw(0, 0, 0), base.raw(1, 0, 0));
        assert_ne!(base.raw(0, 0, 0), base.raw(0, 1, 0));
        assert_ne!(base.raw(0, 0, 0), base.raw(0, 0, 1));
    }

    #[test]
    fn inverse_cdf_reference_points() {
        // Reference quantiles from standard tables.
        let cases = [
            (0.5, 0.0),
            (0.975, 1.959_963_984_540_054),
            (0.025, -1.959_963_984_540_054),
            (0.8413447460685429, 1.0),
            (0.999, 3.090_232_306_167_813_5),
            (1e-10, -6.361_340_902_404_056),
        ];
        for (p, z) in cases {
            assert!(
                (inverse_normal_cdf(p) - z).abs() <= 1e-12 * (1.0 + z.abs()),
                "p={p}: got {}, want {z}",
                inverse_normal_cdf(p)
            );
        }
    }

    #[test]
    fn normals_have_unit_moments() {
        let s = RngStream::new(2024, 0, 0, 0);
        let n = 200_000;
        let (mut sum, mut sum2) = (0.0, 0.0);
        for i in 0..n {
            let z = s.normal(i as u32, 0, 0);
            sum += z;
            sum2 += z * z;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}
