//! Correctly rounded summation of short lists of doubles.
//!
//! Node aggregates are sums of at most a handful of terms (self potential plus
//! one message per lattice neighbour). Summing them exactly and rounding once
//! makes the result independent of term order, so the "total minus own
//! contribution" broadcast form yields the very same bits as summing the other
//! terms directly.

/// Splits a finite non-zero double into `(negative, mantissa, exponent)` with
/// `|x| = mantissa * 2^exponent`.
fn decompose(x: f64) -> (bool, u64, i32) {
    let bits = x.to_bits();
    let neg = bits >> 63 == 1;
    let raw_exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    if raw_exp == 0 {
        (neg, frac, -1074)
    } else {
        (neg, frac | (1u64 << 52), raw_exp - 1075)
    }
}

/// `x * 2^e` without intermediate overflow for the ranges used here.
fn ldexp(mut x: f64, mut e: i32) -> f64 {
    while e > 1000 {
        x *= f64::from_bits(((1000 + 1023) as u64) << 52);
        e -= 1000;
    }
    while e < -1000 {
        x *= f64::from_bits(((-1000 + 1023) as u64) << 52);
        e += 1000;
    }
    x * f64::from_bits(((e + 1023) as u64) << 52)
}

/// Exact sum of `terms`, rounded once to nearest-even.
pub fn exact_sum(terms: &[f64]) -> f64 {
    let mut e_min = i32::MAX;
    let mut e_top = i32::MIN;
    let mut count = 0usize;
    for &t in terms {
        if !t.is_finite() {
            return terms.iter().sum();
        }
        if t != 0.0 {
            let (_, _, e) = decompose(t);
            e_min = e_min.min(e);
            e_top = e_top.max(e + 53);
            count += 1;
        }
    }
    if count == 0 {
        return 0.0;
    }
    let headroom = usize::BITS - count.leading_zeros() + 1;
    let width = (e_top - e_min) as u32 + headroom;
    if width <= 126 {
        let mut acc: i128 = 0;
        for &t in terms {
            if t != 0.0 {
                let (neg, m, e) = decompose(t);
                let v = (m as i128) << (e - e_min);
                acc += if neg { -v } else { v };
            }
        }
        if acc == 0 {
            return 0.0;
        }
        return ldexp(acc as f64, e_min);
    }
    wide_sum(terms, e_min, width)
}

fn wide_sum(terms: &[f64], e_min: i32, width: u32) -> f64 {
    let nlimbs = (width as usize).div_ceil(64) + 1;
    let mut limbs = vec![0u64; nlimbs];
    for &t in terms {
        if t == 0.0 {
            continue;
        }
        let (neg, m, e) = decompose(t);
        let shift = (e - e_min) as usize;
        let (idx, off) = (shift / 64, shift % 64);
        let wide = (m as u128) << off;
        let parts = [wide as u64, (wide >> 64) as u64];
        if neg {
            let mut borrow = false;
            for (k, limb) in limbs.iter_mut().enumerate().skip(idx) {
                let sub = if k - idx < 2 { parts[k - idx] } else { 0 };
                let (r1, b1) = limb.overflowing_sub(sub);
                let (r2, b2) = r1.overflowing_sub(borrow as u64);
                *limb = r2;
                borrow = b1 || b2;
                if !borrow && k - idx >= 1 {
                    break;
                }
            }
        } else {
            let mut carry = false;
            for (k, limb) in limbs.iter_mut().enumerate().skip(idx) {
                let add = if k - idx < 2 { parts[k - idx] } else { 0 };
                let (r1, c1) = limb.overflowing_add(add);
                let (r2, c2) = r1.overflowing_add(carry as u64);
                *limb = r2;
                carry = c1 || c2;
                if !carry && k - idx >= 1 {
                    break;
                }
            }
        }
    }
    let negative = limbs[nlimbs - 1] >> 63 == 1;
    if negative {
        // two's complement negation
        let mut carry = true;
        for limb in limbs.iter_mut() {
            let (r, c) = (!*limb).overflowing_add(carry as u64);
            *limb = r;
            carry = c;
        }
    }
    let Some(top_limb) = limbs.iter().rposition(|&l| l != 0) else {
        return 0.0;
    };
    let top_bit = top_limb * 64 + 63 - limbs[top_limb].leading_zeros() as usize;
    let bit = |i: usize| limbs[i / 64] >> (i % 64) & 1;
    let (window, low) = if top_bit < 127 {
        let w = (limbs[0] as u128) | ((limbs.get(1).copied().unwrap_or(0) as u128) << 64);
        (w, 0usize)
    } else {
        let low = top_bit - 126;
        let mut w: u128 = 0;
        for i in (low..=top_bit).rev() {
            w = (w << 1) | bit(i) as u128;
        }
        let sticky = (0..low).any(|i| bit(i) == 1);
        (w | sticky as u128, low)
    };
    let mag = ldexp(window as f64, e_min + low as i32);
    if negative {
        -mag
    } else {
        mag
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn trivial_cases() {
        assert_eq!(exact_sum(&[]), 0.0);
        assert_eq!(exact_sum(&[1.5]), 1.5);
        assert_eq!(exact_sum(&[0.1, 0.2]), 0.1 + 0.2);
        assert_eq!(exact_sum(&[1e300, 1.0, -1e300]), 1.0);
        assert_eq!(exact_sum(&[1e-300, 1.0, -1.0]), 1e-300);
        assert_eq!(exact_sum(&[3.0, -3.0]), 0.0);
    }

    #[test]
    fn wide_path_cancels_exactly() {
        // spans far more than 126 bits, forcing the limb path
        let t = [1e200, 3.0e-100, -1e200, 7.0e-120];
        assert_eq!(exact_sum(&t), 3.0e-100 + 7.0e-120);
        let t = [-1e200, -3.0e-100, 1e200];
        assert_eq!(exact_sum(&t), -3.0e-100);
    }

    #[test]
    fn sticky_bit_breaks_ties() {
        // 1 + 2^-53 is a tie that rounds to 1; a tiny extra term pushes it up
        let half_ulp = f64::EPSILON / 2.0;
        assert_eq!(exact_sum(&[1.0, half_ulp]), 1.0);
        assert_eq!(exact_sum(&[1.0, half_ulp, 1e-200]), 1.0 + f64::EPSILON);
        assert_eq!(exact_sum(&[-1.0, -half_ulp, -1e-200]), -(1.0 + f64::EPSILON));
    }

    proptest! {
        #[test]
        fn pairs_match_ieee_addition(a in -1e6f64..1e6, b in -1e6f64..1e6, sa in -300i32..300, sb in -300i32..300) {
            let x = a * 10f64.powi(sa / 10);
            let y = b * 10f64.powi(sb / 10);
            prop_assert_eq!(exact_sum(&[x, y]).to_bits(), (x + y).to_bits());
        }

        #[test]
        fn order_independent(mut terms in proptest::collection::vec(-1e3f64..1e3, 1..8), scale in -60i32..60) {
            for (i, t) in terms.iter_mut().enumerate() {
                *t *= 2f64.powi(scale * (i as i32 % 3));
            }
            let s = exact_sum(&terms);
            terms.reverse();
            prop_assert_eq!(exact_sum(&terms).to_bits(), s.to_bits());
            terms.rotate_left(1);
            prop_assert_eq!(exact_sum(&terms).to_bits(), s.to_bits());
        }

        #[test]
        fn exclusion_by_negation(terms in proptest::collection::vec(-1e3f64..1e3, 2..8), k in 0usize..8) {
            let k = k % terms.len();
            let mut with_neg = terms.clone();
            with_neg.push(-terms[k]);
            let mut without = terms.clone();
            without.remove(k);
            prop_assert_eq!(exact_sum(&with_neg).to_bits(), exact_sum(&without).to_bits());
        }
    }
}
