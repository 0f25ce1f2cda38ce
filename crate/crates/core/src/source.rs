//! Parametric down-conversion source model and optical channels.
//!
//! A two-mode squeezed vacuum has perfect photon-number correlation:
//! `P[n][n] = (1 - lambda^2) lambda^(2n)` with `lambda = tanh(r)`. This
//! module carries such joint distributions through coupling loss, the
//! displacement beam splitter (with partial mode overlap) and phase-space
//! displacement, staying in the phase-averaged (diagonal) picture.
//!
//! Two Gaussian closed forms ride along as independent oracles: the
//! pump-phase-resolved Wigner function of the squeezed state and its phase
//! average, which trades the squeezing phase for an `I_0` Bessel factor and a
//! `cosh(2r)` narrowing of the amplitude correlations. They validate the
//! whole Fock pipeline without touching it.

use crate::error::{Error, Result};
use crate::fock::{self, displacement_kernel, PhotonDist, TAIL_TOL};
use crate::util::poisson_pmf;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

const SUM_SLACK: f64 = 1e-9;

/// Physical source and channel parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceParams {
    /// Squeezing parameter; `lambda = tanh(r)`.
    pub r: f64,
    /// Signal coupling efficiency (everything between crystal and detector fiber).
    pub eta_s: f64,
    /// Idler coupling efficiency.
    pub eta_i: f64,
    /// Mode overlap between the reference beam and the signal mode.
    pub overlap: f64,
    /// Intensity transmission of the displacement beam splitter. Displacement
    /// amplitudes are referred to the detector input, so this stays 1.0
    /// unless explicitly simulating pre-splitter amplitudes; the physical
    /// 90:10 coupler is already folded into `eta_s`.
    pub splitter_t: f64,
}

impl Default for SourceParams {
    fn default() -> Self {
        SourceParams {
            r: 0.6,
            eta_s: 0.75,
            eta_i: 0.75,
            overlap: 0.7,
            splitter_t: 1.0,
        }
    }
}

impl SourceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r >= 0.0) || !self.r.is_finite() {
            return Err(Error::invalid(format!("source.r: {} must be >= 0", self.r)));
        }
        for (name, v) in [
            ("source.eta_s", self.eta_s),
            ("source.eta_i", self.eta_i),
            ("source.overlap", self.overlap),
            ("source.splitter_t", self.splitter_t),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name}: {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Joint photon-number distribution `P[m][n]` over signal `m` and idler `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDist {
    probs: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl JointDist {
    /// Validating constructor; `probs` is row-major with `rows * cols` entries.
    pub fn from_vec(probs: Vec<f64>, rows: usize, cols: usize, budget: f64) -> Result<Self> {
        if probs.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(Error::invalid("JointDist: shape mismatch"));
        }
        let mut total = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::invalid(format!(
                    "JointDist: entry ({}, {}) = {p:e} invalid",
                    i / cols,
                    i % cols
                )));
            }
            total += p;
        }
        if total > 1.0 + SUM_SLACK {
            return Err(Error::invalid(format!("JointDist: total mass {total} exceeds 1")));
        }
        if total < 1.0 - budget {
            return Err(Error::Truncation {
                op: "JointDist",
                lost: 1.0 - total,
                budget,
            });
        }
        Ok(JointDist { probs, rows, cols })
    }

    /// Product of two single-mode distributions.
    pub fn product(signal: &PhotonDist, idler: &PhotonDist) -> Self {
        let rows = signal.n_max() + 1;
        let cols = idler.n_max() + 1;
        let mut probs = vec![0.0; rows * cols];
        for m in 0..rows {
            for n in 0..cols {
                probs[m * cols + n] = signal.prob(m) * idler.prob(n);
            }
        }
        JointDist { probs, rows, cols }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn signal_n_max(&self) -> usize {
        self.rows - 1
    }

    pub fn idler_n_max(&self) -> usize {
        self.cols - 1
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        if m < self.rows && n < self.cols {
            self.probs[m * self.cols + n]
        } else {
            0.0
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn deficit(&self) -> f64 {
        (1.0 - self.total()).max(0.0)
    }

    /// Joint parity `sum (-1)^(m+n) P[m][n]`.
    pub fn parity(&self) -> f64 {
        let mut s = 0.0;
        for m in 0..self.rows {
            for n in 0..self.cols {
                let v = self.probs[m * self.cols + n];
                s += if (m + n) % 2 == 0 { v } else { -v };
            }
        }
        s
    }

    pub fn signal_marginal(&self) -> PhotonDist {
        let mut probs = vec![0.0; self.rows];
        for m in 0..self.rows {
            probs[m] = self.probs[m * self.cols..(m + 1) * self.cols].iter().sum();
        }
        // Marginalizing cannot create mass, so the parent's budget still holds.
        PhotonDist::with_budget(probs, self.deficit() + SUM_SLACK).expect("marginal of valid joint")
    }

    pub fn idler_marginal(&self) -> PhotonDist {
        let mut probs = vec![0.0; self.cols];
        for m in 0..self.rows {
            for n in 0..self.cols {
                probs[n] += self.probs[m * self.cols + n];
            }
        }
        PhotonDist::with_budget(probs, self.deficit() + SUM_SLACK).expect("marginal of valid joint")
    }

    /// Total variation distance to another joint distribution, padding the
    /// smaller grid with zeros.
    pub fn tv_distance(&self, other: &JointDist) -> f64 {
        let rows = self.rows.max(other.rows);
        let cols = self.cols.max(other.cols);
        let mut acc = 0.0;
        for m in 0..rows {
            for n in 0..cols {
                acc += (self.get(m, n) - other.get(m, n)).abs();
            }
        }
        0.5 * acc
    }
}

/// Joint distribution of a two-mode squeezed vacuum with squeezing `r`:
/// diagonal `P[n][n] = (1 - lambda^2) lambda^(2n)`, `lambda = tanh(r)`.
pub fn tmsv_joint(r: f64, n_max: usize) -> Result<JointDist> {
    if !(r >= 0.0) || !r.is_finite() {
        return Err(Error::invalid(format!("tmsv_joint: r = {r} must be >= 0")));
    }
    let lambda2 = r.tanh().powi(2);
    // Geometric remainder beyond n_max.
    let tail = lambda2.powi(n_max as i32 + 1);
    if tail >= TAIL_TOL {
        return Err(Error::Truncation {
            op: "tmsv_joint",
            lost: tail,
            budget: TAIL_TOL,
        });
    }
    let dim = n_max + 1;
    let mut probs = vec![0.0; dim * dim];
    let mut w = 1.0 - lambda2;
    for n in 0..dim {
        probs[n * dim + n] = w;
        w *= lambda2;
    }
    JointDist::from_vec(probs, dim, dim, TAIL_TOL)
}

/// Independent binomial loss on the signal and idler indices.
pub fn apply_joint_loss(p: &JointDist, eta_s: f64, eta_i: f64) -> Result<JointDist> {
    for (name, v) in [("eta_s", eta_s), ("eta_i", eta_i)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("apply_joint_loss: {name} = {v} outside [0, 1]")));
        }
    }
    let mut out = p.clone();
    if eta_s < 1.0 {
        out = loss_on_axis(&out, eta_s, Axis::Signal)?;
    }
    if eta_i < 1.0 {
        out = loss_on_axis(&out, eta_i, Axis::Idler)?;
    }
    Ok(out)
}

#[derive(Copy, Clone, PartialEq)]
enum Axis {
    Signal,
    Idler,
}

fn loss_on_axis(p: &JointDist, eta: f64, axis: Axis) -> Result<JointDist> {
    let (rows, cols) = (p.rows(), p.cols());
    let dim = match axis {
        Axis::Signal => rows,
        Axis::Idler => cols,
    };
    let mut out = vec![0.0; rows * cols];
    let mut row = vec![0.0; dim];
    for n in 0..dim {
        // Spread ladder level n down to m <= n with binomial weights.
        fock::binomial_row(n, eta, &mut row);
        match axis {
            Axis::Signal => {
                for j in 0..cols {
                    let v = p.get(n, j);
                    if v == 0.0 {
                        continue;
                    }
                    for m in 0..=n {
                        out[m * cols + j] += v * row[m];
                    }
                }
            }
            Axis::Idler => {
                for i in 0..rows {
                    let v = p.get(i, n);
                    if v == 0.0 {
                        continue;
                    }
                    for m in 0..=n {
                        out[i * cols + m] += v * row[m];
                    }
                }
            }
        }
    }
    JointDist::from_vec(out, rows, cols, p.deficit() + SUM_SLACK)
}

/// Displace the signal mode by `amp` (amplitude referred to the detector
/// input) with mode overlap `overlap` against the reference beam.
///
/// Per idler column the conditional signal distribution is (i) transmitted
/// through the splitter, (ii) displaced by `sqrt(overlap) * amp`, and
/// (iii) convolved with a Poissonian of mean `(1 - overlap) * amp^2` for the
/// non-overlapping part of the reference. The output is trimmed back to the
/// input grid; trimmed mass above `10 * TAIL_TOL` is an error.
pub fn displace_signal(
    p: &JointDist,
    amp: f64,
    overlap: f64,
    splitter_t: f64,
) -> Result<JointDist> {
    displace_axis(p, amp, overlap, splitter_t, Axis::Signal)
}

/// Mirror of [`displace_signal`] acting on the idler index.
pub fn displace_idler(p: &JointDist, amp: f64, overlap: f64, splitter_t: f64) -> Result<JointDist> {
    displace_axis(p, amp, overlap, splitter_t, Axis::Idler)
}

fn displace_axis(
    p: &JointDist,
    amp: f64,
    overlap: f64,
    splitter_t: f64,
    axis: Axis,
) -> Result<JointDist> {
    if !(amp >= 0.0) || !amp.is_finite() {
        return Err(Error::invalid(format!("displace: amp = {amp} must be >= 0")));
    }
    for (name, v) in [("overlap", overlap), ("splitter_t", splitter_t)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("displace: {name} = {v} outside [0, 1]")));
        }
    }

    let mut work = p.clone();
    if splitter_t < 1.0 {
        work = loss_on_axis(&work, splitter_t, axis)?;
    }
    if amp == 0.0 {
        return Ok(work);
    }

    let axis_dim = match axis {
        Axis::Signal => work.rows(),
        Axis::Idler => work.cols(),
    };
    let amp_disp = overlap.sqrt() * amp;
    let kern = if amp_disp > 0.0 {
        Some(displacement_kernel(amp_disp, axis_dim - 1)?)
    } else {
        None
    };
    let mu_ref = (1.0 - overlap) * amp * amp;
    let reference = if mu_ref > 0.0 {
        Some(poisson_tail_checked(mu_ref)?)
    } else {
        None
    };

    let n_out = kern.as_ref().map(|k| k.n_out()).unwrap_or(axis_dim - 1);
    let ref_len = reference.as_ref().map(|r| r.len()).unwrap_or(1);
    let full_len = n_out + ref_len; // displaced length + (ref_len - 1) + 1

    let (rows, cols) = (work.rows(), work.cols());
    let other_dim = match axis {
        Axis::Signal => cols,
        Axis::Idler => rows,
    };

    let mut out = vec![0.0; rows * cols];
    let mut trimmed = 0.0;
    let mut cond = vec![0.0; axis_dim];
    let mut disp = vec![0.0; full_len];
    for j in 0..other_dim {
        for (i, slot) in cond.iter_mut().enumerate() {
            *slot = match axis {
                Axis::Signal => work.get(i, j),
                Axis::Idler => work.get(j, i),
            };
        }
        disp.fill(0.0);
        // Displacement kernel, then the reference Poissonian convolution.
        match (&kern, &reference) {
            (Some(k), None) => {
                for (kk, &c) in cond.iter().enumerate() {
                    if c == 0.0 {
                        continue;
                    }
                    for n in 0..=k.n_out() {
                        disp[n] += c * k.get(n, kk);
                    }
                }
            }
            (Some(k), Some(rf)) => {
                for (kk, &c) in cond.iter().enumerate() {
                    if c == 0.0 {
                        continue;
                    }
                    for n in 0..=k.n_out() {
                        let v = c * k.get(n, kk);
                        if v == 0.0 {
                            continue;
                        }
                        for (d, &rp) in rf.iter().enumerate() {
                            disp[n + d] += v * rp;
                        }
                    }
                }
            }
            (None, Some(rf)) => {
                for (kk, &c) in cond.iter().enumerate() {
                    if c == 0.0 {
                        continue;
                    }
                    for (d, &rp) in rf.iter().enumerate() {
                        disp[kk + d] += c * rp;
                    }
                }
            }
            (None, None) => unreachable!("amp > 0 implies a kernel or a reference part"),
        }
        for (n, &v) in disp.iter().enumerate() {
            if n < axis_dim {
                match axis {
                    Axis::Signal => out[n * cols + j] += v,
                    Axis::Idler => out[j * cols + n] += v,
                }
            } else {
                trimmed += v;
            }
        }
    }
    if trimmed >= 10.0 * TAIL_TOL {
        return Err(Error::Truncation {
            op: "displace",
            lost: trimmed,
            budget: 10.0 * TAIL_TOL,
        });
    }
    JointDist::from_vec(out, rows, cols, p.deficit() + trimmed + 10.0 * TAIL_TOL)
}

/// Poisson pmf vector truncated where the tail drops below a tenth of
/// [`TAIL_TOL`], so the convolution budget stays dominated by the kernel.
fn poisson_tail_checked(mean: f64) -> Result<Vec<f64>> {
    let mut n_max = (mean + 10.0 * mean.sqrt().max(1.0)).ceil() as usize + 8;
    loop {
        let probs = poisson_pmf(mean, n_max);
        let tail = 1.0 - probs.iter().sum::<f64>();
        if tail < 0.1 * TAIL_TOL {
            return Ok(probs);
        }
        n_max *= 2;
        if n_max > 1 << 16 {
            return Err(Error::Truncation {
                op: "poisson_reference",
                lost: tail,
                budget: 0.1 * TAIL_TOL,
            });
        }
    }
}

/// Pump-phase-resolved Wigner function of the two-mode squeezed vacuum:
///
/// `W(a, b) = (4/pi^2) exp(-e^{2r} |a + b* e^{-i phi}|^2 - e^{-2r} |a - b* e^{-i phi}|^2)`.
pub fn wigner_tmsv_analytic(alpha: Complex64, beta: Complex64, r: f64, phi: f64) -> f64 {
    let rot = Complex64::from_polar(1.0, -phi);
    let plus = alpha + beta.conj() * rot;
    let minus = alpha - beta.conj() * rot;
    let exponent = -(2.0 * r).exp() * plus.norm_sqr() - (-2.0 * r).exp() * minus.norm_sqr();
    4.0 / (std::f64::consts::PI * std::f64::consts::PI) * exponent.exp()
}

/// Phase-averaged Wigner function; depends only on the amplitudes:
///
/// `W_avg = (4/pi^2) exp[-2 cosh(2r) (|a|^2 + |b|^2)] I_0(4 sinh(2r) |a||b|)`.
///
/// `I_0` is even, so the positive argument is used. Evaluated through the
/// scaled Bessel function so large amplitudes cannot overflow: the combined
/// exponent `-2 cosh(2r)(|a|^2+|b|^2) + 4 sinh(2r)|a||b|` is never positive.
pub fn wigner_avg_analytic(abs_alpha: f64, abs_beta: f64, r: f64) -> f64 {
    let c = (2.0 * r).cosh();
    let s = (2.0 * r).sinh();
    let z = 4.0 * s * abs_alpha * abs_beta;
    let exponent = -2.0 * c * (abs_alpha * abs_alpha + abs_beta * abs_beta);
    let pref = 4.0 / (std::f64::consts::PI * std::f64::consts::PI);
    if z <= 20.0 {
        pref * exponent.exp() * bessel_i0_series(z)
    } else {
        pref * (exponent + z).exp() * bessel_i0_scaled_asymptotic(z)
    }
}

/// `I_0(z)` by its power series; accurate for `z <= 20`.
fn bessel_i0_series(z: f64) -> f64 {
    let q = z * z / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / ((k * k) as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// `e^{-z} I_0(z)` by the asymptotic expansion, for large `z`.
fn bessel_i0_scaled_asymptotic(z: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut prev = f64::INFINITY;
    for k in 1..30 {
        let kk = k as f64;
        term *= (2.0 * kk - 1.0) * (2.0 * kk - 1.0) / (8.0 * kk * z);
        if term.abs() >= prev {
            break; // asymptotic series started diverging
        }
        sum += term;
        prev = term.abs();
    }
    sum / (2.0 * std::f64::consts::PI * z).sqrt()
}
