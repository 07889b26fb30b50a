//! Seed-level summary statistics.

/// Arithmetic mean; `NaN` for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (`n - 1` denominator); 0 for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    libm::sqrt(ss / (values.len() - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_seed_fixture() {
        let v = [0.4, 0.5, 0.6];
        assert!((mean(&v) - 0.5).abs() < 1e-15);
        assert!((sample_std(&v) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn singleton_has_zero_spread() {
        assert_eq!(sample_std(&[0.7]), 0.0);
        assert_eq!(sample_std(&[0.3, 0.3, 0.3]), 0.0);
    }
}
