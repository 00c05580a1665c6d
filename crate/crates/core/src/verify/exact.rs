//! Arbitrary-precision recomputation of the theory-mode schedule.
//!
//! Inputs are taken as the exact rationals of their `f64` values. Rational
//! quantities stay exact; logarithms use 320-bit fixed point, far below any
//! distance at which the ceiling defining `K` could flip.

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

const PREC: u64 = 320;

#[derive(Debug, Clone, PartialEq)]
pub struct ExactSchedule {
    pub k: u64,
    pub beta: BigRational,
    pub gamma1: BigRational,
    pub gamma2: BigRational,
    pub delta_y: BigRational,
}

fn rat(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite input")
}

fn int(v: i64) -> BigRational {
    BigRational::from_integer(BigInt::from(v))
}

/// `atanh(z) · 2^PREC` for `0 <= z < 1/2`, from the odd power series.
fn atanh_fixed(z: &BigRational) -> BigInt {
    let one = BigInt::one() << PREC;
    let zf = (z * BigRational::from_integer(one.clone())).round().to_integer();
    let z2 = (&zf * &zf) >> PREC;
    let mut power = zf;
    let mut sum = BigInt::zero();
    let mut n = 1u64;
    while !power.is_zero() {
        sum += &power / BigInt::from(n);
        power = (&power * &z2) >> PREC;
        n += 2;
    }
    sum
}

/// `ln(x) · 2^PREC` for `x > 0`.
fn ln_fixed(x: &BigRational) -> BigInt {
    assert!(x.is_positive());
    // x = m 2^e with m in [1, 2)
    let mut e = x.numer().bits() as i64 - x.denom().bits() as i64;
    let scale = |e: i64| {
        if e >= 0 {
            BigRational::from_integer(BigInt::one() << e as u64)
        } else {
            BigRational::new(BigInt::one(), BigInt::one() << (-e) as u64)
        }
    };
    let mut m = x / scale(e);
    while m >= int(2) {
        m /= int(2);
        e += 1;
    }
    while m < int(1) {
        m *= int(2);
        e -= 1;
    }
    let ln_m = atanh_fixed(&((&m - int(1)) / (&m + int(1)))) * 2;
    let ln2 = atanh_fixed(&BigRational::new(1.into(), 3.into())) * 2;
    ln_m + ln2 * e
}

fn ceil_ratio(a: &BigInt, b: &BigInt) -> BigInt {
    let (q, r) = a.div_rem(b);
    if r.is_zero() || (r.sign() != b.sign()) {
        q
    } else {
        q + 1
    }
}

/// Exact schedule for the theory mode, or `None` where the float code must
/// report the schedule infeasible.
pub fn exact_theory_schedule(
    epsilon: f64,
    delta_bar: f64,
    delta_v: f64,
    lf_bar: f64,
    lf_delta: Option<f64>,
) -> Option<ExactSchedule> {
    let (eps, dbar, dv, lf) = (rat(epsilon), rat(delta_bar), rat(delta_v), rat(lf_bar));
    if !(eps.is_positive() && dbar.is_positive() && !dv.is_negative() && lf.is_positive()) {
        return None;
    }
    let s = &dv + &lf * int(2);
    let v = &dv * &dv + &lf * &lf * int(2);
    if eps > s || &eps * &eps > &v * int(480) {
        return None;
    }
    let r = &eps * &eps / (&v * int(960));
    let beta = int(1) - &r;
    // ln(1/β) = -ln(1 - r) = 2 atanh(r / (2 - r))
    let ln_inv_beta = atanh_fixed(&(&r / (int(2) - &r))) * 2;
    let ln_arg = ln_fixed(&(&s * int(32) / &eps));
    let k = ceil_ratio(&ln_arg, &ln_inv_beta).to_u64()?.max(1);
    let gamma1 = BigRational::from_integer(k.into()) / &dbar;
    let gamma2 = &gamma1 * int(4) * &s;
    let mut delta_y = (&eps * &eps / (&s * int(1280)))
        .min(&eps * int(2) / int(3))
        .min(lf.clone());
    if let Some(d) = lf_delta {
        delta_y = delta_y.min(rat(d));
    }
    Some(ExactSchedule {
        k,
        beta,
        gamma1,
        gamma2,
        delta_y,
    })
}

/// Decimal rounding to `digits` significant digits, half to even, as
/// `(mantissa, exponent)` with `value ≈ mantissa · 10^exponent`.
pub fn round_significant(v: &BigRational, digits: u32) -> (BigInt, i64) {
    if v.is_zero() {
        return (BigInt::zero(), 0);
    }
    let ten = int(10);
    let mag = v.abs();
    let mut exp = mag.to_f64().map_or(0, |f| f.log10().floor() as i64) - digits as i64 + 1;
    let pow = |e: i64| {
        if e >= 0 {
            BigRational::from_integer(BigInt::from(10).pow(e as u32))
        } else {
            BigRational::new(BigInt::one(), BigInt::from(10).pow((-e) as u32))
        }
    };
    let lo = BigRational::from_integer(BigInt::from(10).pow(digits - 1));
    let hi = &lo * &ten;
    let mut scaled = &mag / pow(exp);
    while scaled >= hi {
        exp += 1;
        scaled = &mag / pow(exp);
    }
    while scaled < lo {
        exp -= 1;
        scaled = &mag / pow(exp);
    }
    let floor = scaled.floor().to_integer();
    let frac = &scaled - BigRational::from_integer(floor.clone());
    let half = BigRational::new(1.into(), 2.into());
    let mut m = if frac > half || (frac == half && floor.is_odd()) { floor + 1 } else { floor };
    if v.is_negative() {
        m = -m;
    }
    (m, exp)
}

/// `round_significant` applied to the exact value of an `f64`.
pub fn round_f64(v: f64, digits: u32) -> (BigInt, i64) {
    round_significant(&rat(v), digits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logarithms() {
        let scale = (BigInt::one() << PREC).to_f64().unwrap();
        for x in [0.1, 1.0, 1.5, 2.0, 320.0, 12345.678] {
            let got = ln_fixed(&rat(x)).to_f64().unwrap() / scale;
            assert!((got - x.ln()).abs() <= 1e-15 * (1.0 + x.ln().abs()), "{x}");
        }
    }

    #[test]
    fn rounding_rules() {
        assert_eq!(round_significant(&BigRational::new(12345.into(), 1.into()), 3), (BigInt::from(123), 2));
        assert_eq!(round_significant(&BigRational::new(125.into(), 1.into()), 2), (BigInt::from(12), 1));
        assert_eq!(round_significant(&BigRational::new(135.into(), 1.into()), 2), (BigInt::from(14), 1));
        assert_eq!(round_significant(&BigRational::new((-1).into(), 3.into()), 2), (BigInt::from(-33), -2));
        assert_eq!(round_f64(0.1, 12), (BigInt::from(100_000_000_000i64), -12));
    }

    #[test]
    fn reference_schedule() {
        let s = exact_theory_schedule(1.0, 1.0, 0.0, 5.0, None).unwrap();
        assert_eq!(s.beta, BigRational::new(47_999.into(), 48_000.into()));
        // ln(320) / -ln(1 - 1/48000) = 276_876.52...
        assert_eq!(s.k, 276_877);
        assert_eq!(s.delta_y, BigRational::new(1.into(), 12_800.into()));
        assert!(exact_theory_schedule(11.0, 1.0, 0.0, 5.0, None).is_none());
    }
}
