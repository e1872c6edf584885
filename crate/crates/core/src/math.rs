//! Log-domain helpers.

/// Log probabilities are clamped here so `-inf` never enters a recursion.
/// This is roughly `ln` of the smallest positive subnormal double.
pub const LOG_FLOOR: f64 = -745.0;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// `log softmax`, clamped at [`LOG_FLOOR`].
pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = logsumexp(xs);
    xs.iter().map(|&x| (x - lse).max(LOG_FLOOR)).collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = logsumexp(xs);
    xs.iter().map(|&x| (x - lse).exp()).collect()
}

/// Log density of `N(x; mean, diag(exp(log_sigma))^2)`.
pub fn diag_gaussian_logpdf(x: &[f64], mean: &[f64], log_sigma: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(log_sigma)
        .map(|((&xi, &mi), &ls)| {
            let r = (xi - mi) * (-ls).exp();
            -0.5 * LN_2PI - ls - 0.5 * r * r
        })
        .sum()
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_is_stable() {
        let v = logsumexp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn standard_normal_at_mode() {
        let v = diag_gaussian_logpdf(&[0.0], &[0.0], &[0.0]);
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-15);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }
}
