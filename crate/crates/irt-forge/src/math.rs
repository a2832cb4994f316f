//! Scalar numeric kernels used by every estimator.
//!
//! The logistic helpers follow the usual max-shift forms so nothing overflows
//! for |x| up to ~745 and log-probabilities stay exact in the far tails. The
//! gamma-family functions (ln_gamma, digamma, trigamma, tetragamma) use the
//! same recipe: recurrence shift to z >= 12, then the Bernoulli asymptotic
//! series. That keeps relative error near 1e-14 over the range the trainers
//! visit without pulling in a linear-algebra stack.

pub const LN_2PI: f64 = 1.8378770664093453;

/// Logistic function, stable on both tails.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow; exact for large |x|.
#[inline]
pub fn log1pexp(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// ln sigmoid(x) = -log1pexp(-x).
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -log1pexp(-x)
}

/// Inverse of `sigmoid` on (0, 1).
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Max-shifted log of a sum of exponentials. Returns -inf on all -inf input.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

// Bernoulli-number coefficients B_2k / (2k (2k-1)) for the Stirling series.
const STIRLING: [f64; 5] = [
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
];

/// ln Gamma(x) for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut z = x;
    let mut shift = 0.0;
    while z < 12.0 {
        shift -= z.ln();
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut p = inv;
    for c in STIRLING {
        series += c * p;
        p *= inv2;
    }
    shift + (z - 0.5) * z.ln() - z + 0.5 * LN_2PI + series
}

/// Digamma psi(x) for x > 0.
pub fn digamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut z = x;
    let mut acc = 0.0;
    while z < 12.0 {
        acc -= 1.0 / z;
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    // psi(z) ~ ln z - 1/2z - sum B_2k / (2k z^2k)
    let series = inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 / 240.0)));
    acc + z.ln() - 0.5 * inv - series
}

/// Trigamma psi'(x) for x > 0.
pub fn trigamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut z = x;
    let mut acc = 0.0;
    while z < 12.0 {
        acc += 1.0 / (z * z);
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    // psi'(z) ~ 1/z + 1/2z^2 + sum B_2k / z^(2k+1)
    let series =
        inv * inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 / 30.0)));
    acc + inv + 0.5 * inv2 + series
}

/// Tetragamma psi''(x) for x > 0.
pub fn tetragamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut z = x;
    let mut acc = 0.0;
    while z < 12.0 {
        acc -= 2.0 / (z * z * z);
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    // derivative of the trigamma series term by term
    let series =
        inv2 * inv2 * (0.5 - inv2 * (1.0 / 6.0 - inv2 * (1.0 / 6.0 - 0.3 * inv2)));
    acc - inv2 - inv * inv2 - series
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sigmoid_matches_direct_form_midrange() {
        for &x in &[-30.0, -2.5, -1e-8, 0.0, 0.3, 4.0, 30.0] {
            assert_relative_eq!(sigmoid(x), 1.0 / (1.0 + (-x as f64).exp()), max_relative = 1e-15);
        }
    }

    #[test]
    fn sigmoid_tails_do_not_overflow() {
        assert_eq!(sigmoid(800.0), 1.0);
        // exp(-800) underflows past the subnormal range, so exact zero is correct here
        assert_eq!(sigmoid(-800.0), 0.0);
        assert!(sigmoid(-700.0) > 0.0);
        assert!(sigmoid(-700.0) < 1e-300);
    }

    #[test]
    fn log_sigmoid_far_tail_is_tiny_but_nonzero() {
        let v = log_sigmoid(500.0);
        assert!(v <= 0.0 && v > -1e-200, "got {v}");
        // reference: -log1p(exp(-500)) from a 50-digit evaluation
        assert_relative_eq!(v, -7.124576406741286e-218, max_relative = 1e-12);
        assert_relative_eq!(log_sigmoid(-37.5), -37.5, max_relative = 1e-15);
    }

    #[test]
    fn logit_inverts_sigmoid() {
        for &x in &[-15.0, -3.0, -0.1, 0.0, 0.7, 5.0, 15.0] {
            assert_relative_eq!(logit(sigmoid(x)), x, max_relative = 1e-9, epsilon = 1e-12);
        }
        // past +-15 the stored probability saturates and 1-p eats the low bits,
        // so the round trip is only good to about 1e-8
        for &x in &[-20.0, 20.0] {
            assert_relative_eq!(logit(sigmoid(x)), x, max_relative = 1e-7);
        }
    }

    #[test]
    fn logsumexp_shifts_correctly() {
        assert_relative_eq!(
            logsumexp(&[0.0, 0.0]),
            std::f64::consts::LN_2,
            max_relative = 1e-15
        );
        assert_relative_eq!(logsumexp(&[-1000.0, -1001.0]), -1000.0 + (1.0f64 + (-1.0f64).exp()).ln(), max_relative = 1e-14);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    // Reference values below were computed with mpmath at 30 significant digits.

    #[test]
    fn ln_gamma_reference_values() {
        let cases = [
            (0.1, 2.25271265173420595986970164637),
            (0.5, 0.572364942924700087071713675677),
            (1.0, 0.0),
            (2.0, 0.0),
            (3.25, 0.935801931108725358258467518542),
            (4.7, 2.73640514631556668222248534139),
            (8.0, 8.52516136106541430016553103635),
            (12.3, 18.2389834070922419419298243319),
            (41.5, 112.174377043177877509362098972),
            (171.6, 709.657358763056350530251834459),
        ];
        for (x, want) in cases {
            assert_relative_eq!(ln_gamma(x), want, max_relative = 1e-13, epsilon = 1e-13);
        }
    }

    #[test]
    fn polygamma_reference_values() {
        let cases = [
            (0.1, -10.423754940411076795168216219, 101.433299150792758817215450106, -2001.86145737834400631400971618),
            (0.35, -2.97107086982594543874630644421, 9.2404590422058116966600168223, -47.7337899132357293648260645181),
            (1.0, -0.5772156649015329, 1.6449340668482264, -2.4041138063191886),
            (2.5, 0.703156640645243187225690333668, 0.490357756100234864972801055494, -0.236204051641727403003741668568),
            (7.9, 2.00223848756357098775172350587, 0.134930783456634421933183597696, -0.0181790048383226070826530956391),
        ];
        for (x, d0, d1, d2) in cases {
            assert_relative_eq!(digamma(x), d0, max_relative = 1e-12);
            assert_relative_eq!(trigamma(x), d1, max_relative = 1e-12);
            assert_relative_eq!(tetragamma(x), d2, max_relative = 1e-11);
        }
    }

    #[test]
    fn polygammas_are_successive_derivatives() {
        // central differences tie each function to the previous one
        let h = 1e-5;
        for &x in &[0.2, 0.9, 1.7, 3.3, 6.1, 15.0] {
            let fd_digamma = (ln_gamma(x + h) - ln_gamma(x - h)) / (2.0 * h);
            assert_relative_eq!(digamma(x), fd_digamma, max_relative = 1e-8);
            let fd_trigamma = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert_relative_eq!(trigamma(x), fd_trigamma, max_relative = 1e-7);
            let fd_tetragamma = (trigamma(x + h) - trigamma(x - h)) / (2.0 * h);
            assert_relative_eq!(tetragamma(x), fd_tetragamma, max_relative = 1e-6);
        }
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn logsumexp_is_shift_invariant(
            xs in proptest::collection::vec(-30.0..30.0f64, 1..12),
            c in -50.0..50.0f64,
        ) {
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let lhs = logsumexp(&shifted);
            let rhs = logsumexp(&xs) + c;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0), "{lhs} vs {rhs}");
        }

        #[test]
        fn sigmoid_output_is_always_a_probability(x in -1000.0..1000.0f64) {
            let s = sigmoid(x);
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert!(log_sigmoid(x) <= 0.0);
            prop_assert!(log1pexp(x).is_finite() && log1pexp(x) >= 0.0);
        }

        #[test]
        fn logit_round_trips_through_sigmoid(x in -15.0..15.0f64) {
            let back = logit(sigmoid(x));
            prop_assert!((back - x).abs() <= 1e-9 * x.abs().max(1e-3), "{back} vs {x}");
        }
    }
}
