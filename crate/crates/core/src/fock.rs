//! Truncated Fock-ladder numerics for phase-averaged (diagonal) states.
//!
//! Everything in the pipeline is phase averaged, so states reduce to
//! photon-number distributions on the ladder `0..=n_max` and displacements
//! reduce to their moduli-squared matrix elements `|<n|D(a)|k>|^2`. That
//! restriction is deliberate: the pump phase is inaccessible, off-diagonal
//! elements never survive the averaging, and tracking them would buy nothing.
//!
//! Operations never renormalize. Probability mass discarded by truncation
//! stays visible as `1 - total()`, and every constructor checks the deficit
//! against an explicit budget instead of papering over it.

use crate::error::{Error, Result};
use crate::util::ln_factorials;

/// Global default for acceptable truncated tail mass.
pub const TAIL_TOL: f64 = 1e-10;

/// Default Fock-ladder truncation. Sized so the heaviest state in the
/// operating regime (vacuum displaced to |a| = 3.5, mean 12.25 photons)
/// keeps its tail below `TAIL_TOL`.
pub const DEFAULT_N_MAX: usize = 60;

/// Hard cap on auto-grown displacement kernels.
const MAX_KERNEL_DIM: usize = 4096;

/// Slack allowed above exact unity from floating-point accumulation.
const SUM_SLACK: f64 = 1e-9;

/// A photon-number distribution on the ladder `0..=n_max`.
///
/// Invariants: every entry is nonnegative (a negative entry is a bug, not
/// something to clamp) and the total mass lies in `[1 - budget, 1]` for the
/// budget the distribution was built with.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotonDist {
    probs: Vec<f64>,
}

impl PhotonDist {
    /// Validating constructor with the default tail budget [`TAIL_TOL`].
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        Self::with_budget(probs, TAIL_TOL)
    }

    /// Validating constructor with an explicit deficit budget.
    pub fn with_budget(probs: Vec<f64>, budget: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("PhotonDist: empty probability vector"));
        }
        let mut total = 0.0;
        for (n, &p) in probs.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::invalid(format!("PhotonDist: probs[{n}] is not finite")));
            }
            if p < 0.0 {
                return Err(Error::invalid(format!(
                    "PhotonDist: probs[{n}] = {p:e} is negative"
                )));
            }
            total += p;
        }
        if total > 1.0 + SUM_SLACK {
            return Err(Error::invalid(format!(
                "PhotonDist: total mass {total} exceeds 1"
            )));
        }
        if total < 1.0 - budget {
            return Err(Error::Truncation {
                op: "PhotonDist",
                lost: 1.0 - total,
                budget,
            });
        }
        Ok(PhotonDist { probs })
    }

    /// Vacuum state on the ladder `0..=n_max`.
    pub fn vacuum(n_max: usize) -> Self {
        let mut probs = vec![0.0; n_max + 1];
        probs[0] = 1.0;
        PhotonDist { probs }
    }

    /// Fock state `|n>` on the ladder `0..=n_max`.
    pub fn fock(n: usize, n_max: usize) -> Result<Self> {
        if n > n_max {
            return Err(Error::invalid(format!("fock: n = {n} exceeds n_max = {n_max}")));
        }
        let mut probs = vec![0.0; n_max + 1];
        probs[n] = 1.0;
        Ok(PhotonDist { probs })
    }

    pub fn n_max(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Probability of `n` photons; zero beyond the ladder.
    pub fn prob(&self, n: usize) -> f64 {
        self.probs.get(n).copied().unwrap_or(0.0)
    }

    /// Total kept mass.
    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Mass discarded by truncation, `1 - total()`.
    pub fn deficit(&self) -> f64 {
        (1.0 - self.total()).max(0.0)
    }

    /// Mean photon number of the kept mass.
    pub fn mean(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(n, &p)| n as f64 * p)
            .sum()
    }

    /// Restrict to `0..=n_max`, erroring if the trimmed mass exceeds `budget`
    /// on top of the existing deficit.
    pub fn trim(&self, n_max: usize, budget: f64) -> Result<Self> {
        if n_max >= self.n_max() {
            let mut probs = self.probs.clone();
            probs.resize(n_max + 1, 0.0);
            return Ok(PhotonDist { probs });
        }
        let cut: f64 = self.probs[n_max + 1..].iter().sum();
        if cut > budget {
            return Err(Error::Truncation {
                op: "PhotonDist::trim",
                lost: cut,
                budget,
            });
        }
        Ok(PhotonDist {
            probs: self.probs[..=n_max].to_vec(),
        })
    }

    /// Extend the ladder with zeros.
    pub fn padded(&self, n_max: usize) -> Self {
        let mut probs = self.probs.clone();
        if n_max + 1 > probs.len() {
            probs.resize(n_max + 1, 0.0);
        }
        PhotonDist { probs }
    }
}

/// Poisson photon statistics with the given mean on `0..=n_max`.
///
/// No renormalization is applied; the tail must already fit below
/// [`TAIL_TOL`] or the call fails with a truncation error.
pub fn poisson_dist(mean: f64, n_max: usize) -> Result<PhotonDist> {
    if !(mean >= 0.0) || !mean.is_finite() {
        return Err(Error::invalid(format!("poisson_dist: mean = {mean} must be >= 0")));
    }
    let probs = crate::util::poisson_pmf(mean, n_max);
    let total: f64 = probs.iter().sum();
    if 1.0 - total > TAIL_TOL {
        return Err(Error::Truncation {
            op: "poisson_dist",
            lost: 1.0 - total,
            budget: TAIL_TOL,
        });
    }
    Ok(PhotonDist { probs })
}

/// Binomial thinning row: spreads one ladder entry at `n` over `0..=n`
/// with transmissivity `eta`. `out` must have length at least `n + 1`.
pub(crate) fn binomial_row(n: usize, eta: f64, out: &mut [f64]) {
    debug_assert!(out.len() > n);
    if n == 0 {
        out[0] = 1.0;
        return;
    }
    if eta == 0.0 {
        out[..=n].fill(0.0);
        out[0] = 1.0;
        return;
    }
    if eta == 1.0 {
        out[..=n].fill(0.0);
        out[n] = 1.0;
        return;
    }
    let log_b0 = n as f64 * (1.0 - eta).ln();
    if log_b0 > -700.0 {
        let mut b = log_b0.exp();
        let ratio = eta / (1.0 - eta);
        out[0] = b;
        for m in 0..n {
            b *= (n - m) as f64 / (m + 1) as f64 * ratio;
            out[m + 1] = b;
        }
    } else {
        // Tiny (1-eta)^n underflows; build each term in the log domain.
        let lf = ln_factorials(n);
        let le = eta.ln();
        let l1e = (1.0 - eta).ln();
        for m in 0..=n {
            out[m] = (lf[n] - lf[m] - lf[n - m] + m as f64 * le + (n - m) as f64 * l1e).exp();
        }
    }
}

/// Binomial loss channel with transmissivity `eta`.
///
/// `out[m] = sum_{n >= m} p[n] C(n, m) eta^m (1 - eta)^(n - m)`; the total
/// mass is preserved (thinning only moves photons down the ladder).
pub fn loss_channel(p: &PhotonDist, eta: f64) -> Result<PhotonDist> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid(format!("loss_channel: eta = {eta} outside [0, 1]")));
    }
    if eta == 1.0 {
        return Ok(p.clone());
    }
    let n_max = p.n_max();
    let mut out = vec![0.0; n_max + 1];
    if eta == 0.0 {
        out[0] = p.total();
        return PhotonDist::with_budget(out, p.deficit() + SUM_SLACK);
    }
    let mut row = vec![0.0; n_max + 1];
    for n in 0..=n_max {
        let pn = p.prob(n);
        if pn == 0.0 {
            continue;
        }
        binomial_row(n, eta, &mut row);
        for m in 0..=n {
            out[m] += pn * row[m];
        }
    }
    PhotonDist::with_budget(out, p.deficit() + SUM_SLACK)
}

/// Moduli-squared displacement matrix elements `|<n|D(a)|k>|^2` on a
/// rectangular block: rows `n = 0..=n_out`, columns `k = 0..=n_in`.
///
/// Only moduli are kept because every state passing through here is phase
/// averaged; the displacement phase cannot matter.
#[derive(Debug, Clone)]
pub struct DisplacementKernel {
    amp: f64,
    n_in: usize,
    n_out: usize,
    k: Vec<f64>,
    col_deficit: Vec<f64>,
}

impl DisplacementKernel {
    pub fn amp(&self) -> f64 {
        self.amp
    }

    /// Largest input photon number (column index).
    pub fn n_in(&self) -> usize {
        self.n_in
    }

    /// Largest output photon number (row index).
    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn get(&self, n: usize, k: usize) -> f64 {
        self.k[n * (self.n_in + 1) + k]
    }

    /// Mass lost from column `k` to rows above `n_out`.
    pub fn col_deficit(&self, k: usize) -> f64 {
        self.col_deficit[k]
    }

    /// Explicit rectangular construction; fails if any column loses more
    /// than [`TAIL_TOL`] above `n_out`.
    pub fn rectangular(amp: f64, n_in: usize, n_out: usize) -> Result<Self> {
        if !(amp >= 0.0) || !amp.is_finite() {
            return Err(Error::invalid(format!("displacement: amp = {amp} must be >= 0")));
        }
        if n_out < n_in {
            return Err(Error::invalid("displacement: n_out must be >= n_in"));
        }
        let kern = Self::fill(amp, n_in, n_out)?;
        let worst = kern
            .col_deficit
            .iter()
            .cloned()
            .fold(0.0_f64, f64::max);
        if worst > TAIL_TOL {
            return Err(Error::Truncation {
                op: "displacement_kernel",
                lost: worst,
                budget: TAIL_TOL,
            });
        }
        Ok(kern)
    }

    fn fill(amp: f64, n_in: usize, n_out: usize) -> Result<Self> {
        let cols = n_in + 1;
        let rows = n_out + 1;
        let mut k = vec![0.0; rows * cols];
        if amp == 0.0 {
            for i in 0..cols.min(rows) {
                k[i * cols + i] = 1.0;
            }
        } else {
            let x = amp * amp;
            let lnx = x.ln();
            let lf = ln_factorials(n_in + n_out + 1);
            // |<n|D(a)|k>|^2 = e^{-x} x^d (p!/(p+d)!) [L_p^d(x)]^2 with
            // p = min(n, k), d = |n - k|. The associated Laguerre values are
            // run upward in the degree p, rescaling on the fly so that large
            // ladders and large x never overflow before the log-domain
            // recombination at the end.
            const BIG: f64 = 1e150;
            const LN_BIG: f64 = 345.38775766524096; // ln(1e150)
            for d in 0..=n_out {
                let p_top = n_in.min(n_out - d);
                let mut l_prev = 0.0_f64; // L_{p-1}
                let mut l_cur = 1.0_f64; // L_0 = 1
                let mut scale = 0.0_f64; // accumulated ln rescale factor
                for p in 0..=p_top {
                    if p > 0 {
                        let pf = p as f64;
                        let next = ((2.0 * (pf - 1.0) + d as f64 + 1.0 - x) * l_cur
                            - (pf - 1.0 + d as f64) * l_prev)
                            / pf;
                        l_prev = l_cur;
                        l_cur = next;
                        let mag = l_cur.abs().max(l_prev.abs());
                        if mag > BIG {
                            l_cur /= BIG;
                            l_prev /= BIG;
                            scale += LN_BIG;
                        } else if mag > 0.0 && mag < 1.0 / BIG {
                            l_cur *= BIG;
                            l_prev *= BIG;
                            scale -= LN_BIG;
                        }
                    }
                    let value = if l_cur == 0.0 {
                        0.0
                    } else {
                        let ln_v = -x + d as f64 * lnx + lf[p] - lf[p + d]
                            + 2.0 * (l_cur.abs().ln() + scale);
                        ln_v.exp()
                    };
                    // Lower entry (n = p + d, k = p) and its mirror.
                    k[(p + d) * cols + p] = value;
                    if p + d <= n_in {
                        k[p * cols + (p + d)] = value;
                    }
                }
            }
        }
        let mut col_deficit = vec![0.0; cols];
        for c in 0..cols {
            let mass: f64 = (0..rows).map(|r| k[r * cols + c]).sum();
            col_deficit[c] = (1.0 - mass).max(0.0);
        }
        Ok(DisplacementKernel {
            amp,
            n_in,
            n_out,
            k,
            col_deficit,
        })
    }
}

/// Build a displacement kernel for inputs on `0..=n_max`, growing the output
/// ladder until every column keeps its mass to within [`TAIL_TOL`].
pub fn displacement_kernel(amp: f64, n_max: usize) -> Result<DisplacementKernel> {
    if !(amp >= 0.0) || !amp.is_finite() {
        return Err(Error::invalid(format!("displacement: amp = {amp} must be >= 0")));
    }
    if amp == 0.0 {
        return DisplacementKernel::fill(0.0, n_max, n_max);
    }
    let x = amp * amp;
    // Displaced |k> has mean k + x and number variance x(2k + 1); start a few
    // standard deviations out and double on the rare miss.
    let spread = (x * (2.0 * n_max as f64 + 1.0)).sqrt();
    let mut n_out = n_max + (x + 8.0 * spread).ceil() as usize + 16;
    loop {
        if n_out > MAX_KERNEL_DIM {
            return Err(Error::Truncation {
                op: "displacement_kernel",
                lost: f64::NAN,
                budget: TAIL_TOL,
            });
        }
        let kern = DisplacementKernel::fill(amp, n_max, n_out)?;
        let worst = kern.col_deficit.iter().cloned().fold(0.0_f64, f64::max);
        if worst <= TAIL_TOL {
            return Ok(kern);
        }
        n_out *= 2;
    }
}

/// Displace a diagonal (phase-averaged) state: `out[n] = sum_k K[n][k] p[k]`.
pub fn apply_displacement(p: &PhotonDist, kern: &DisplacementKernel) -> Result<PhotonDist> {
    if kern.n_in() < p.n_max() {
        return Err(Error::invalid(format!(
            "apply_displacement: kernel accepts n <= {}, state has n_max = {}",
            kern.n_in(),
            p.n_max()
        )));
    }
    let cols = kern.n_in + 1;
    let mut out = vec![0.0; kern.n_out + 1];
    for k in 0..=p.n_max() {
        let pk = p.prob(k);
        if pk == 0.0 {
            continue;
        }
        for n in 0..=kern.n_out {
            out[n] += pk * kern.k[n * cols + k];
        }
    }
    let total: f64 = out.iter().sum();
    let lost = 1.0 - total;
    if lost >= 10.0 * TAIL_TOL {
        return Err(Error::Truncation {
            op: "apply_displacement",
            lost,
            budget: 10.0 * TAIL_TOL,
        });
    }
    PhotonDist::with_budget(out, 10.0 * TAIL_TOL)
}

/// Discrete convolution of two photon-number distributions, on the combined
/// ladder `0..=(n_max_p + n_max_q)`.
pub fn convolve(p: &PhotonDist, q: &PhotonDist) -> Result<PhotonDist> {
    let mut out = vec![0.0; p.n_max() + q.n_max() + 1];
    for (i, &pi) in p.probs().iter().enumerate() {
        if pi == 0.0 {
            continue;
        }
        for (j, &qj) in q.probs().iter().enumerate() {
            out[i + j] += pi * qj;
        }
    }
    PhotonDist::with_budget(out, p.deficit() + q.deficit() + SUM_SLACK)
}

/// Photon-number parity `sum_n (-1)^n p[n]`, in `[-1, 1]`.
pub fn parity(p: &PhotonDist) -> f64 {
    p.probs()
        .iter()
        .enumerate()
        .map(|(n, &v)| if n % 2 == 0 { v } else { -v })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!(
            (a - b).abs() < tol,
            "{what}: {a} vs {b} (|diff| = {:e}, tol {tol:e})",
            (a - b).abs()
        );
    }

    /// Brute-force oracle: D(a) = exp(a (adag - a)) on a truncated ladder,
    /// via scaling-and-squaring of the Taylor series.
    fn displacement_moduli_expm(amp: f64, dim: usize) -> DMatrix<f64> {
        let mut gen = DMatrix::<f64>::zeros(dim, dim);
        for n in 0..dim - 1 {
            let c = ((n + 1) as f64).sqrt() * amp;
            gen[(n + 1, n)] = c; // a-dagger part
            gen[(n, n + 1)] = -c; // -a part
        }
        let norm = gen.abs().column_sum().max();
        let s = (norm.log2().ceil() as i32 + 4).max(0) as u32;
        let scaled = gen / 2f64.powi(s as i32);
        let mut term = DMatrix::<f64>::identity(dim, dim);
        let mut sum = DMatrix::<f64>::identity(dim, dim);
        for k in 1..=24 {
            term = (&term * &scaled) / k as f64;
            sum += &term;
        }
        let mut result = sum;
        for _ in 0..s {
            result = &result * &result;
        }
        result.map(|v| v * v)
    }

    #[test]
    fn poisson_vacuum_is_delta() {
        let p = poisson_dist(0.0, 5).unwrap();
        assert_eq!(p.probs(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn poisson_mean_one_ground_term() {
        // Closed form e^{-1}; cross-checked by summing the series.
        let p = poisson_dist(1.0, 40).unwrap();
        assert_close(p.prob(0), (-1.0_f64).exp(), 1e-15, "P(0)");
        assert_close(p.prob(0), 0.367879, 1e-6, "P(0) literal");
        let series: f64 = (0..40).map(|_| 0.0).sum::<f64>() + p.total();
        assert_close(series, 1.0, 1e-12, "series sum");
    }

    #[test]
    fn poisson_bright_tail_fits_at_default_truncation() {
        // Brute-force tail sum for mean 12.25 (|a| = 3.5) beyond n = 60.
        let p = poisson_dist(12.25, DEFAULT_N_MAX).unwrap();
        assert!(p.deficit() < 1e-10, "tail mass {:e}", p.deficit());
        // And the oracle: keep going far past the truncation and sum the rest.
        let far = crate::util::poisson_pmf(12.25, 400);
        let tail: f64 = far[DEFAULT_N_MAX + 1..].iter().sum();
        assert!(tail < 1e-10);
        assert_close(p.deficit(), tail, 1e-12, "deficit vs tail");
    }

    #[test]
    fn poisson_truncation_error_reported() {
        match poisson_dist(12.25, 10) {
            Err(Error::Truncation { op, lost, .. }) => {
                assert_eq!(op, "poisson_dist");
                assert!(lost > 1e-10);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn loss_single_photon_splits() {
        let one = PhotonDist::fock(1, 1).unwrap();
        let out = loss_channel(&one, 0.75).unwrap();
        assert_close(out.prob(0), 0.25, 1e-15, "P(0)");
        assert_close(out.prob(1), 0.75, 1e-15, "P(1)");
    }

    #[test]
    fn loss_identity_at_unit_eta() {
        let p = poisson_dist(2.0, 40).unwrap();
        let out = loss_channel(&p, 1.0).unwrap();
        assert_eq!(p.probs(), out.probs());
    }

    #[test]
    fn loss_maps_poisson_to_poisson() {
        // Thinned Poisson(mu) is Poisson(eta mu), elementwise to 1e-12.
        let p = poisson_dist(3.0, 50).unwrap();
        let out = loss_channel(&p, 0.6).unwrap();
        let expect = poisson_dist(1.8, 50).unwrap();
        for n in 0..=50 {
            assert_close(out.prob(n), expect.prob(n), 1e-12, &format!("n = {n}"));
        }
    }

    #[test]
    fn loss_preserves_mass() {
        let p = poisson_dist(4.0, 60).unwrap();
        let out = loss_channel(&p, 0.33).unwrap();
        assert_close(out.total(), p.total(), 1e-13, "mass");
    }

    #[test]
    fn kernel_zero_amp_is_exact_identity() {
        let kern = displacement_kernel(0.0, 8).unwrap();
        for n in 0..=8 {
            for k in 0..=8 {
                let want = if n == k { 1.0 } else { 0.0 };
                assert_eq!(kern.get(n, k), want);
            }
        }
    }

    #[test]
    fn kernel_column_zero_is_poisson() {
        // |<n|D(1)|0>|^2 = e^{-1}/n!.
        let kern = displacement_kernel(1.0, 10).unwrap();
        let pois = poisson_dist(1.0, kern.n_out()).unwrap();
        for n in 0..=kern.n_out() {
            assert_close(kern.get(n, 0), pois.prob(n), 1e-14, &format!("n = {n}"));
        }
    }

    #[test]
    fn kernel_first_off_diagonal_closed_form() {
        // |<0|D(1)|1>|^2 = |a|^2 e^{-|a|^2} at |a| = 1.
        let kern = displacement_kernel(1.0, 10).unwrap();
        assert_close(kern.get(0, 1), (-1.0_f64).exp(), 1e-14, "K[0][1]");
        assert_close(kern.get(0, 1), 0.367879, 1e-6, "K[0][1] literal");
    }

    #[test]
    fn kernel_matches_matrix_exponential_oracle() {
        // Independent route: truncated-ladder matrix exponential at dim 46.
        for &amp in &[0.5, 1.0, 1.7] {
            let oracle = displacement_moduli_expm(amp, 46);
            let kern = displacement_kernel(amp, 20).unwrap();
            for n in 0..=15 {
                for k in 0..=15 {
                    assert_close(
                        kern.get(n, k),
                        oracle[(n, k)],
                        1e-10,
                        &format!("amp {amp}, ({n},{k})"),
                    );
                }
            }
        }
    }

    #[test]
    fn kernel_columns_are_stochastic_and_symmetric() {
        for &amp in &[0.3, 1.2, 2.5, 3.5] {
            let kern = displacement_kernel(amp, 24).unwrap();
            for k in 0..=24 {
                assert!(kern.col_deficit(k) <= TAIL_TOL, "amp {amp} col {k}");
            }
            for n in 0..=24 {
                for k in 0..=24 {
                    assert_close(
                        kern.get(n, k),
                        kern.get(k, n),
                        1e-12,
                        &format!("symmetry ({n},{k})"),
                    );
                    let v = kern.get(n, k);
                    assert!((0.0..=1.0 + 1e-12).contains(&v));
                }
            }
        }
    }

    #[test]
    fn kernel_log_domain_regime_still_stochastic() {
        // amp^2 > 8 exercises the rescaled recurrence.
        let kern = displacement_kernel(3.5, 60).unwrap();
        for k in 0..=60 {
            assert!(kern.col_deficit(k) <= TAIL_TOL, "col {k}: {:e}", kern.col_deficit(k));
        }
    }

    #[test]
    fn displaced_vacuum_is_coherent() {
        let vac = PhotonDist::vacuum(0);
        for &beta in &[0.5, 1.0, 2.0] {
            let kern = displacement_kernel(beta, 0).unwrap();
            let out = apply_displacement(&vac, &kern).unwrap();
            let pois = poisson_dist(beta * beta, kern.n_out()).unwrap();
            for n in 0..=kern.n_out() {
                assert_close(out.prob(n), pois.prob(n), 1e-13, &format!("beta {beta}, n {n}"));
            }
        }
    }

    #[test]
    fn displacement_at_zero_amp_is_identity() {
        let p = poisson_dist(1.3, 30).unwrap();
        let kern = displacement_kernel(0.0, 30).unwrap();
        let out = apply_displacement(&p, &kern).unwrap();
        assert_eq!(p.probs(), out.probs());
    }

    #[test]
    fn displaced_single_photon_node_at_unit_amp() {
        // |<1|D(1)|1>|^2 = (1 - |a|^2)^2 e^{-|a|^2} = 0 at |a| = 1,
        // cross-checked against the truncated matrix exponential.
        let one = PhotonDist::fock(1, 1).unwrap();
        let kern = displacement_kernel(1.0, 1).unwrap();
        let out = apply_displacement(&one, &kern).unwrap();
        assert!(out.prob(1).abs() < 1e-14, "node value {:e}", out.prob(1));
        let oracle = displacement_moduli_expm(1.0, 46);
        assert_close(out.prob(1), oracle[(1, 1)], 1e-12, "vs expm");
    }

    #[test]
    fn convolve_with_vacuum_is_identity() {
        let p = poisson_dist(1.0, 20).unwrap();
        let vac = PhotonDist::vacuum(0);
        let out = convolve(&vac, &p).unwrap();
        assert_eq!(out.probs(), p.probs());
    }

    #[test]
    fn convolve_with_single_photon_shifts() {
        // delta_1 * Poisson(mu) shifts the Poissonian up by one.
        let one = PhotonDist::fock(1, 1).unwrap();
        let pois = poisson_dist(1.7, 40).unwrap();
        let out = convolve(&one, &pois).unwrap();
        assert_eq!(out.prob(0), 0.0);
        for n in 1..=41 {
            assert_close(out.prob(n), pois.prob(n - 1), 1e-15, &format!("n = {n}"));
        }
    }

    #[test]
    fn convolve_poisson_additivity() {
        let a = poisson_dist(0.8, 30).unwrap();
        let b = poisson_dist(1.4, 30).unwrap();
        let out = convolve(&a, &b).unwrap();
        let expect = poisson_dist(2.2, 60).unwrap();
        for n in 0..=60 {
            assert_close(out.prob(n), expect.prob(n), 1e-12, &format!("n = {n}"));
        }
    }

    #[test]
    fn parity_examples() {
        assert_eq!(parity(&PhotonDist::vacuum(4)), 1.0);
        let lossy_one = PhotonDist::new(vec![0.25, 0.75]).unwrap();
        // Direct summation oracle: 0.25 - 0.75.
        assert_close(parity(&lossy_one), -0.5, 1e-15, "lossy single photon");
        // Coherent state parity e^{-2|a|^2} at |a| = 1, alternating sum at n_max 60.
        let coh = poisson_dist(1.0, 60).unwrap();
        let direct: f64 = (0..=60)
            .map(|n| if n % 2 == 0 { coh.prob(n) } else { -coh.prob(n) })
            .sum();
        assert_close(parity(&coh), direct, 1e-15, "alternating sum");
        assert_close(parity(&coh), (-2.0_f64).exp(), 1e-12, "e^{-2}");
        assert_close(parity(&coh), 0.135335, 1e-6, "literal");
    }

    #[test]
    fn negative_entries_rejected() {
        assert!(PhotonDist::new(vec![1.0 - 1e-13, -1e-13]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn loss_composes(mass in proptest::collection::vec(0.0_f64..1.0, 1..12),
                         eta1 in 0.0_f64..=1.0, eta2 in 0.0_f64..=1.0) {
            let total: f64 = mass.iter().sum();
            prop_assume!(total > 1e-6);
            let probs: Vec<f64> = mass.iter().map(|m| m / total).collect();
            let p = PhotonDist::new(probs).unwrap();
            let twice = loss_channel(&loss_channel(&p, eta1).unwrap(), eta2).unwrap();
            let once = loss_channel(&p, eta1 * eta2).unwrap();
            for n in 0..=p.n_max() {
                prop_assert!((twice.prob(n) - once.prob(n)).abs() < 1e-12);
            }
        }

        #[test]
        fn displaced_vacuum_parity_is_gaussian(amp in 0.0_f64..=2.5) {
            let kern = displacement_kernel(amp, DEFAULT_N_MAX).unwrap();
            let vac = PhotonDist::vacuum(DEFAULT_N_MAX);
            let disp = apply_displacement(&vac, &kern).unwrap();
            let expect = (-2.0 * amp * amp).exp();
            prop_assert!((parity(&disp) - expect).abs() < 1e-10);
        }

        #[test]
        fn convolve_commutes_and_associates(
            a in proptest::collection::vec(0.0_f64..1.0, 1..8),
            b in proptest::collection::vec(0.0_f64..1.0, 1..8),
            c in proptest::collection::vec(0.0_f64..1.0, 1..8),
        ) {
            let norm = |v: &[f64]| {
                let t: f64 = v.iter().sum();
                prop_assume!(t > 1e-6);
                Ok(PhotonDist::new(v.iter().map(|x| x / t).collect()).unwrap())
            };
            let (pa, pb, pc) = (norm(&a)?, norm(&b)?, norm(&c)?);
            let ab = convolve(&pa, &pb).unwrap();
            let ba = convolve(&pb, &pa).unwrap();
            for n in 0..=ab.n_max() {
                prop_assert!((ab.prob(n) - ba.prob(n)).abs() < 1e-12);
            }
            let left = convolve(&ab, &pc).unwrap();
            let right = convolve(&pa, &convolve(&pb, &pc).unwrap()).unwrap();
            for n in 0..=left.n_max() {
                prop_assert!((left.prob(n) - right.prob(n)).abs() < 1e-12);
            }
        }

        #[test]
        fn operations_preserve_nonnegativity(
            mass in proptest::collection::vec(0.0_f64..1.0, 1..10),
            eta in 0.0_f64..=1.0,
            amp in 0.0_f64..=2.0,
        ) {
            let total: f64 = mass.iter().sum();
            prop_assume!(total > 1e-6);
            let p = PhotonDist::new(mass.iter().map(|m| m / total).collect()).unwrap();
            let lost = loss_channel(&p, eta).unwrap();
            prop_assert!(lost.probs().iter().all(|&v| v >= 0.0));
            let kern = displacement_kernel(amp, p.n_max()).unwrap();
            let disp = apply_displacement(&p, &kern).unwrap();
            prop_assert!(disp.probs().iter().all(|&v| v >= 0.0));
            let conv = convolve(&p, &lost).unwrap();
            prop_assert!(conv.probs().iter().all(|&v| v >= 0.0));
        }
    }
}
