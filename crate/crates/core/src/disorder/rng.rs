//! Counter-based keyed randomness: every draw is a pure function of
//! `(seed, counter)`, so values can be addressed in any order and from any
//! thread.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer (a bijection on `u64`).
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-seed key; compute once and reuse with [`keyed_u64`].
#[inline]
pub fn stream_key(seed: u64) -> u64 {
    mix64(seed ^ 0x6a09_e667_f3bc_c909).wrapping_add(GOLDEN)
}

/// 64 random bits addressed by `(key, counter)`: output `counter` of the
/// SplitMix64 sequence started at `key`.
#[inline]
pub fn keyed_u64(key: u64, counter: u64) -> u64 {
    mix64(key.wrapping_add(counter.wrapping_mul(GOLDEN)))
}

/// Uniform on the open interval `(0, 1)` from the top 52 bits.
#[inline]
pub fn unit_open(bits: u64) -> f64 {
    ((bits >> 12) as f64 + 0.5) * (1.0 / 4_503_599_627_370_496.0)
}

/// Standard normal addressed by `(key, counter)` via the inverse CDF.
#[inline]
pub fn keyed_normal(key: u64, counter: u64) -> f64 {
    inverse_normal_cdf(unit_open(keyed_u64(key, counter)))
}

/// Seed for replicate `index` of an experiment with base seed `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    mix64(base ^ mix64(index.wrapping_add(GOLDEN)))
}

/// Inverse of the standard normal CDF (Wichura's AS 241, PPND16), relative
/// accuracy about 1e-16 on `(0, 1)`.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= CENTRAL {
        central(q)
    } else {
        tail(p, q)
    }
}

const CENTRAL: f64 = 0.425;

#[inline(always)]
fn central(q: f64) -> f64 {
    // Same rational function as PPND16, evaluated in Estrin form.
    let r = 0.180625 - q * q;
    let r2 = r * r;
    let r4 = r2 * r2;
    let num = (3.387_132_872_796_366_5 + 1.331_416_678_917_843_7e2 * r)
        + r2 * (1.971_590_950_306_551_3e3 + 1.373_169_376_550_946e4 * r)
        + r4 * ((4.592_195_393_154_987e4 + 6.726_577_092_700_87e4 * r)
            + r2 * (3.343_057_558_358_813e4 + 2.509_080_928_730_122_7e3 * r));
    let den = (1.0 + 4.231_333_070_160_091e1 * r)
        + r2 * (6.871_870_074_920_579e2 + 5.394_196_021_424_751e3 * r)
        + r4 * ((2.121_379_430_158_659_7e4 + 3.930_789_580_009_271e4 * r)
            + r2 * (2.872_908_573_572_194_3e4 + 5.226_495_278_852_545e3 * r));
    q * num / den
}

#[inline(never)]
fn tail(p: f64, q: f64) -> f64 {
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let value = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_545)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r + 1.519_866_656_361_645_7e-2)
            * r
            + 1.481_039_764_274_800_8e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_759)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_4e-2)
            * r
            + 2.965_605_718_285_049e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7) * r + 1.846_318_317_510_054_8e-5)
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
        -value
    } else {
        value
    }
}
