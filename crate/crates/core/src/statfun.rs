//! Special functions behind every exact p-value: regularized incomplete beta,
//! regularized incomplete gamma (both tails), and the standard normal survival
//! function.
//!
//! Everything is implemented here with documented algorithms (Lentz continued
//! fractions, power series, Cody's rational erfc) so the accuracy contract can
//! be tested against brute-force oracles without trusting a numerics package.
//! All probabilities are clamped to [0, 1] after evaluation; downstream
//! threshold comparisons never see rounding overshoot.

use crate::error::{Error, Result};

const MAX_ITER: usize = 5_000;
const LENTZ_TINY: f64 = 1e-300;
const EPS: f64 = 3e-16;

/// ln Γ(x) for x > 0, Lanczos approximation (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    debug_assert!(x > 0.0);
    if x < 0.5 {
        // Reflection: Γ(x)Γ(1-x) = π / sin(πx).
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let z = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (z + i as f64);
    }
    let t = z + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + acc.ln()
}

fn clamp_unit(p: f64) -> f64 {
    p.clamp(0.0, 1.0)
}

/// Regularized incomplete beta function I_x(a, b).
///
/// Continued fraction (modified Lentz) on the fast-converging side, with
/// symmetry I_x(a,b) = 1 - I_{1-x}(b,a) otherwise.
pub fn reg_inc_beta(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0) || !(b > 0.0) {
        return Err(Error::Domain(format!(
            "reg_inc_beta requires a > 0 and b > 0, got a={a}, b={b}"
        )));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!(
            "reg_inc_beta requires x in [0, 1], got {x}"
        )));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    // The continued fraction converges quickly for x < (a+1)/(a+b+2).
    let value = if x < (a + 1.0) / (a + b + 2.0) {
        beta_cf_prefixed(x, a, b)
    } else {
        1.0 - beta_cf_prefixed(1.0 - x, b, a)
    };
    Ok(clamp_unit(value))
}

/// x^a (1-x)^b / (a B(a,b)) times the Lentz continued fraction.
fn beta_cf_prefixed(x: f64, a: f64, b: f64) -> f64 {
    let ln_prefix = a * x.ln() + b * (-x).ln_1p()
        - (ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b));
    let prefix = (ln_prefix).exp() / a;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;

    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < LENTZ_TINY {
        d = LENTZ_TINY;
    }
    d = 1.0 / d;
    let mut h = d;

    for m in 1..=MAX_ITER {
        let mf = m as f64;
        let m2 = 2.0 * mf;

        // Even step: a_{2m} = m (b-m) x / ((a+2m-1)(a+2m)).
        let num = mf * (b - mf) * x / ((qam + m2) * (a + m2));
        d = 1.0 + num * d;
        if d.abs() < LENTZ_TINY {
            d = LENTZ_TINY;
        }
        c = 1.0 + num / c;
        if c.abs() < LENTZ_TINY {
            c = LENTZ_TINY;
        }
        d = 1.0 / d;
        h *= d * c;

        // Odd step: a_{2m+1} = -(a+m)(a+b+m) x / ((a+2m)(a+2m+1)).
        let num = -(a + mf) * (qab + mf) * x / ((a + m2) * (qap + m2));
        d = 1.0 + num * d;
        if d.abs() < LENTZ_TINY {
            d = LENTZ_TINY;
        }
        c = 1.0 + num / c;
        if c.abs() < LENTZ_TINY {
            c = LENTZ_TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    prefix * h
}

/// Regularized upper incomplete gamma Q(a, s) = Γ(a, s)/Γ(a).
///
/// Power series for s < a + 1, Lentz continued fraction otherwise.
pub fn reg_upper_gamma(a: f64, s: f64) -> Result<f64> {
    let (_, q) = reg_gamma_pair(a, s)?;
    Ok(q)
}

/// Regularized lower incomplete gamma P(a, s) = γ(a, s)/Γ(a) = 1 - Q(a, s).
pub fn reg_lower_gamma(a: f64, s: f64) -> Result<f64> {
    let (p, _) = reg_gamma_pair(a, s)?;
    Ok(p)
}

/// Both tails computed on the side that avoids cancellation.
fn reg_gamma_pair(a: f64, s: f64) -> Result<(f64, f64)> {
    if !(a > 0.0) {
        return Err(Error::Domain(format!(
            "incomplete gamma requires a > 0, got {a}"
        )));
    }
    if !(s >= 0.0) {
        return Err(Error::Domain(format!(
            "incomplete gamma requires s >= 0, got {s}"
        )));
    }
    if s == 0.0 {
        return Ok((0.0, 1.0));
    }
    if s < a + 1.0 {
        let p = lower_gamma_series(a, s);
        Ok((clamp_unit(p), clamp_unit(1.0 - p)))
    } else {
        let q = upper_gamma_cf(a, s);
        Ok((clamp_unit(1.0 - q), clamp_unit(q)))
    }
}

/// P(a, s) by the series s^a e^{-s} / Γ(a+1) Σ_n s^n / ((a+1)...(a+n)).
fn lower_gamma_series(a: f64, s: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut ap = a;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        term *= s / ap;
        sum += term;
        if term.abs() < sum.abs() * EPS {
            break;
        }
    }
    sum * (a * s.ln() - s - ln_gamma(a)).exp()
}

/// Q(a, s) by the Lentz continued fraction for the upper tail.
fn upper_gamma_cf(a: f64, s: f64) -> f64 {
    let mut b = s + 1.0 - a;
    let mut c = 1.0 / LENTZ_TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..=MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < LENTZ_TINY {
            d = LENTZ_TINY;
        }
        c = b + an / c;
        if c.abs() < LENTZ_TINY {
            c = LENTZ_TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h * (a * s.ln() - s - ln_gamma(a)).exp()
}

/// Standard normal survival function 1 - Φ(z).
///
/// Evaluated as erfc(z/√2)/2 with Cody's rational approximations; absolute
/// error well below 1e-12 over the full double range. Total on all finite z;
/// deep negative z saturate to 1, deep positive z underflow toward 0.
pub fn normal_sf(z: f64) -> f64 {
    clamp_unit(0.5 * erfc_cody(z / std::f64::consts::SQRT_2))
}

/// Complementary error function, Cody's three-branch rational approximation.
fn erfc_cody(x: f64) -> f64 {
    const THRESH: f64 = 0.46875;
    const SQRPI: f64 = 5.641_895_835_477_562_9e-1; // 1/sqrt(pi)

    const A: [f64; 5] = [
        3.161_123_743_870_565_6e0,
        1.138_641_541_510_501_56e2,
        3.774_852_376_853_020_2e2,
        3.209_377_589_138_469_47e3,
        1.857_777_061_846_031_53e-1,
    ];
    const B: [f64; 4] = [
        2.360_129_095_234_412_09e1,
        2.440_246_379_344_441_73e2,
        1.282_616_526_077_372_28e3,
        2.844_236_833_439_170_62e3,
    ];
    const C: [f64; 9] = [
        5.641_884_969_886_700_89e-1,
        8.883_149_794_388_375_94e0,
        6.611_919_063_714_162_95e1,
        2.986_351_381_974_001_31e2,
        8.819_522_212_417_690_9e2,
        1.712_047_612_634_070_58e3,
        2.051_078_377_826_071_47e3,
        1.230_339_354_797_997_25e3,
        2.153_115_354_744_038_46e-8,
    ];
    const D: [f64; 8] = [
        1.574_492_611_070_983_47e1,
        1.176_939_508_913_124_99e2,
        5.371_811_018_620_098_58e2,
        1.621_389_574_566_690_19e3,
        3.290_799_235_733_459_63e3,
        4.362_619_090_143_247_16e3,
        3.439_367_674_143_721_64e3,
        1.230_339_354_803_749_42e3,
    ];
    const P: [f64; 6] = [
        3.053_266_349_612_323_44e-1,
        3.603_448_999_498_044_39e-1,
        1.257_817_261_112_292_46e-1,
        1.608_378_514_874_227_66e-2,
        6.587_491_615_298_378_03e-4,
        1.631_538_713_730_209_78e-2,
    ];
    const Q: [f64; 5] = [
        2.568_520_192_289_822_42e0,
        1.872_952_849_923_460_47e0,
        5.279_051_029_514_284_12e-1,
        6.051_834_131_244_131_91e-2,
        2.335_204_976_268_691_85e-3,
    ];

    let y = x.abs();
    let result = if y <= THRESH {
        // erfc via the erf rational on [0, 0.46875].
        let ysq = if y > 1.11e-16 { y * y } else { 0.0 };
        let mut num = A[4] * ysq;
        let mut den = ysq;
        for i in 0..3 {
            num = (num + A[i]) * ysq;
            den = (den + B[i]) * ysq;
        }
        return 1.0 - x * (num + A[3]) / (den + B[3]);
    } else if y <= 4.0 {
        let mut num = C[8] * y;
        let mut den = y;
        for i in 0..7 {
            num = (num + C[i]) * y;
            den = (den + D[i]) * y;
        }
        scaled_by_exp((num + C[7]) / (den + D[7]), y)
    } else {
        let ysq = 1.0 / (y * y);
        let mut num = P[5] * ysq;
        let mut den = ysq;
        for i in 0..4 {
            num = (num + P[i]) * ysq;
            den = (den + Q[i]) * ysq;
        }
        let r = ysq * (num + P[4]) / (den + Q[4]);
        scaled_by_exp((SQRPI - r) / y, y)
    };

    if x < 0.0 {
        2.0 - result
    } else {
        result
    }
}

/// result * exp(-y^2), with the exponent split to preserve low-order bits.
#[inline]
fn scaled_by_exp(result: f64, y: f64) -> f64 {
    let ysq = (y * 16.0).trunc() / 16.0;
    let del = (y - ysq) * (y + ysq);
    result * (-ysq * ysq).exp() * (-del).exp()
}

/// Inverse of [`reg_inc_beta`] in x for fixed (a, b), by bisection.
///
/// Used for Clopper-Pearson interval endpoints; monotonicity of I_x makes
/// plain bisection both simple and safe.
pub fn inv_reg_inc_beta(p: f64, a: f64, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!(
            "inv_reg_inc_beta requires p in [0, 1], got {p}"
        )));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    if p == 1.0 {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if reg_inc_beta(mid, a, b)? < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}
