//! Modified Bessel functions of the first kind, orders 0 and 1.
//!
//! Power series below [`SERIES_LIMIT`], Hankel asymptotic expansion above.
//! Large-argument values are handled in log space so von Mises
//! concentrations in the thousands do not overflow.

/// Arguments at or below this use the power series.
pub const SERIES_LIMIT: f64 = 20.0;

fn i0_series(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    loop {
        term *= q / (k * k);
        sum += term;
        if term < 1e-17 * sum {
            break sum;
        }
        k += 1.0;
    }
}

fn i1_series(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 0.5 * x;
    let mut sum = term;
    let mut k = 1.0;
    loop {
        term *= q / (k * (k + 1.0));
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break sum;
        }
        k += 1.0;
    }
}

/// Sum of the Hankel expansion `sum_k (-1)^k a_k(nu) / x^k`, truncated at the
/// smallest term.
fn hankel_sum(nu: f64, x: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut term = 1.0f64;
    let mut sum = 1.0;
    let mut k = 1.0;
    loop {
        let odd = 2.0 * k - 1.0;
        let next = -term * (mu - odd * odd) / (k * 8.0 * x);
        if next.abs() >= term.abs() || k > 200.0 {
            break sum;
        }
        sum += next;
        term = next;
        if term.abs() < 1e-17 * sum.abs() {
            break sum;
        }
        k += 1.0;
    }
}

/// `I0(x)` for `x >= 0`. Overflows to infinity for very large `x`; use
/// [`log_i0`] there.
pub fn i0(x: f64) -> f64 {
    let x = x.abs();
    if x <= SERIES_LIMIT {
        i0_series(x)
    } else {
        log_i0(x).exp()
    }
}

/// `I1(x)` for `x >= 0`.
pub fn i1(x: f64) -> f64 {
    if x < 0.0 {
        return -i1(-x);
    }
    if x <= SERIES_LIMIT {
        i1_series(x)
    } else {
        (x - 0.5 * (2.0 * std::f64::consts::PI * x).ln()).exp() * hankel_sum(1.0, x)
    }
}

/// `ln I0(x)`, accurate for arbitrarily large `x`.
pub fn log_i0(x: f64) -> f64 {
    let x = x.abs();
    if x <= SERIES_LIMIT {
        i0_series(x).ln()
    } else {
        x - 0.5 * (2.0 * std::f64::consts::PI * x).ln() + hankel_sum(0.0, x).ln()
    }
}

/// `I1(x) / I0(x)`, the derivative of `ln I0`.
pub fn i1_over_i0(x: f64) -> f64 {
    if x < 0.0 {
        return -i1_over_i0(-x);
    }
    if x <= SERIES_LIMIT {
        i1_series(x) / i0_series(x)
    } else {
        hankel_sum(1.0, x) / hankel_sum(0.0, x)
    }
}
