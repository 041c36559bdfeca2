//! Log-domain arithmetic. Every score in the crate is a natural-log probability.

/// `ln(e^a + e^b)`, exact for `-inf` operands.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Stable `ln Σ exp(x)`. An empty slice or an all `-inf` slice gives `-inf`.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// In-place log-softmax; returns the normalizer that was subtracted.
pub fn log_normalize(values: &mut [f64]) -> f64 {
    let z = logsumexp(values);
    if z.is_finite() {
        for v in values.iter_mut() {
            *v -= z;
        }
    }
    z
}

/// Index of the maximum, ties broken toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn singleton() {
        assert_eq!(logsumexp(&[0.0]), 0.0);
    }

    #[test]
    fn halves_sum_to_one() {
        let h = 0.5f64.ln();
        assert!(logsumexp(&[h, h]).abs() < 1e-15);
    }

    #[test]
    fn three_terms_match_linear_sum() {
        let expected = ((-1.0f64).exp() + (-2.0f64).exp() + (-3.0f64).exp()).ln();
        assert!((logsumexp(&[-1.0, -2.0, -3.0]) - expected).abs() < 1e-14);
        assert!((expected - -0.59239).abs() < 1e-5);
    }

    #[test]
    fn all_neg_inf() {
        assert_eq!(logsumexp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert_eq!(log_add(f64::NEG_INFINITY, f64::NEG_INFINITY), f64::NEG_INFINITY);
        assert_eq!(log_add(f64::NEG_INFINITY, -2.0), -2.0);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[-1.0, -1.0]), 0);
    }

    proptest! {
        #[test]
        fn bounded_by_max(xs in prop::collection::vec(prop_oneof![
            9 => -50.0f64..50.0,
            1 => Just(f64::NEG_INFINITY),
        ], 1..20)) {
            let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let l = logsumexp(&xs);
            if max == f64::NEG_INFINITY {
                prop_assert_eq!(l, f64::NEG_INFINITY);
            } else {
                prop_assert!(l >= max);
                prop_assert!(l <= max + (xs.len() as f64).ln() + 1e-12);
            }
        }

        #[test]
        fn log_add_agrees(a in -30.0f64..30.0, b in -30.0f64..30.0) {
            prop_assert!((log_add(a, b) - logsumexp(&[a, b])).abs() < 1e-12);
        }
    }
}
