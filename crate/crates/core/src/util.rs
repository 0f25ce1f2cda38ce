//! Small numeric helpers shared across modules.

/// `ln(k!)` for `k = 0..=n`, by compensated cumulative summation.
pub fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(0.0);
    let mut acc = 0.0_f64;
    let mut comp = 0.0_f64;
    for k in 1..=n {
        // Kahan step: ln n! grows slowly but is reused in exponentials.
        let term = (k as f64).ln() - comp;
        let next = acc + term;
        comp = (next - acc) - term;
        acc = next;
        out.push(acc);
    }
    out
}

/// Poisson pmf on `0..=n_max`, no tail check. Underflow-safe for large means.
pub fn poisson_pmf(mean: f64, n_max: usize) -> Vec<f64> {
    assert!(mean >= 0.0 && mean.is_finite());
    let mut probs = vec![0.0; n_max + 1];
    if mean == 0.0 {
        probs[0] = 1.0;
        return probs;
    }
    let p0 = (-mean).exp();
    if p0 > 0.0 {
        probs[0] = p0;
        for n in 1..=n_max {
            probs[n] = probs[n - 1] * mean / n as f64;
        }
    } else {
        // Very bright beam: build each entry in the log domain.
        let lf = ln_factorials(n_max);
        let lm = mean.ln();
        for n in 0..=n_max {
            probs[n] = (n as f64 * lm - mean - lf[n]).exp();
        }
    }
    probs
}

/// SplitMix64 mixing step.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic per-stream seed derivation from a master seed.
///
/// Every parallel job (bootstrap replica, curve point, probe) draws its RNG
/// from `derive_seed(master, stream_id)` so results do not depend on
/// scheduling order.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream.wrapping_add(0xA076_1D64_78BD_642F)))
}

/// Ordinary least-squares line fit `y = intercept + slope * x`.
///
/// Returns `(intercept, slope, r_squared)`. With a perfectly constant `y`,
/// `r_squared` is 1 by convention (the line explains everything there is).
pub fn line_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    assert!(points.len() >= 2, "line fit needs at least two points");
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    assert!(sxx > 0.0, "line fit needs spread in x");
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (intercept, slope, r2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_factorials_match_direct_products() {
        let lf = ln_factorials(20);
        assert_eq!(lf[0], 0.0);
        let mut fact = 1.0_f64;
        for n in 1..=20 {
            fact *= n as f64;
            assert!((lf[n] - fact.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn poisson_pmf_sums_to_one() {
        for &mean in &[0.0, 0.3, 1.0, 12.25] {
            let p = poisson_pmf(mean, 80);
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-10, "mean {mean}: sum {sum}");
        }
    }

    #[test]
    fn poisson_pmf_log_domain_agrees() {
        // Force the log path with a mean large enough to underflow exp(-mean).
        let p = poisson_pmf(750.0, 1200);
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        // Mode near the mean.
        let argmax = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!((argmax as f64 - 750.0).abs() <= 1.0);
    }

    #[test]
    fn derived_seeds_differ_per_stream() {
        let a = derive_seed(7, 0);
        let b = derive_seed(7, 1);
        let c = derive_seed(8, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, 0));
    }

    #[test]
    fn line_fit_recovers_exact_line() {
        let pts: Vec<(f64, f64)> = (0..5).map(|k| (k as f64, 1.0 + 0.5 * k as f64)).collect();
        let (b, m, r2) = line_fit(&pts);
        assert!((b - 1.0).abs() < 1e-12);
        assert!((m - 0.5).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
    }
}
