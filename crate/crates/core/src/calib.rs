//! Calibration and analysis: displacement-amplitude estimation, source
//! parameter fitting, afterpulse-fraction fitting, heralding with the
//! afterpulse-corrected operator, and parity/Wigner curve assembly.
//!
//! The heralding operator treats an idler "single detection" as an
//! incoherent mixture: with weight `1 - x` it is a genuine idler single
//! (project the idler on one photon), with weight `x` it is an afterpulse
//! echo of a signal detection (project the signal on one photon). The
//! fraction `x` at each displacement comes from the linear fit of the idler
//! singles rate against the reference intensity, because afterpulses are
//! the only mechanism here that couples the two.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fock::PhotonDist;
use crate::patterns::{
    build_probe_library, estimate_response, fit_state, fit_state_mixture,
    parity_from_reconstruction, FitOptions, ProbeSet, Reconstruction, ResponseEstimate,
    ResponseOptions,
};
use crate::source::{apply_joint_loss, displace_signal, tmsv_joint, JointDist};
use crate::tmd::{joint_response_with_budget, sample_patterns, ClickRecord, Tmd};
use crate::util::{derive_seed, line_fit};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Linear fit of the idler singles rate against the reference intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AfterpulseFit {
    /// Singles rate at zero displacement, per shot.
    pub intercept: f64,
    /// Rate increase per unit reference intensity (amp^2).
    pub slope: f64,
    pub r_squared: f64,
    /// False when the fitted slope is not positive (no afterpulsing seen).
    pub detected: bool,
}

impl AfterpulseFit {
    /// Afterpulse fraction of the idler singles at displacement `amp`:
    /// `x = s amp^2 / (c + s amp^2)`, clamped to [0, 1).
    pub fn fraction(&self, amp: f64) -> f64 {
        if !self.detected || self.slope <= 0.0 {
            return 0.0;
        }
        let extra = self.slope * amp * amp;
        (extra / (self.intercept + extra)).clamp(0.0, 1.0 - 1e-12)
    }
}

/// Ordinary least-squares line through `(amp^2, idler_singles_rate)` points.
pub fn fit_afterpulse(singles: &[(f64, f64)]) -> Result<AfterpulseFit> {
    if singles.len() < 3 {
        return Err(Error::invalid("fit_afterpulse: need at least 3 settings"));
    }
    let spread = singles
        .iter()
        .map(|p| p.0)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if !(spread.1 - spread.0 > 0.0) {
        return Err(Error::invalid("fit_afterpulse: amp^2 values have no spread"));
    }
    let (intercept, slope, r_squared) = line_fit(singles);
    Ok(AfterpulseFit {
        intercept,
        slope,
        r_squared,
        detected: slope > 0.0,
    })
}

/// Best-fit squeezing and coupling efficiency for an undisplaced record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFit {
    pub r_hat: f64,
    pub eta_hat: f64,
    pub fit_residual: f64,
    /// Best value sat on the edge of the search box.
    pub at_boundary: bool,
    /// Below r ~ 0 the data carries no information about eta.
    pub eta_identifiable: bool,
}

const SOURCE_R_RANGE: (f64, f64) = (0.0, 1.0);
const SOURCE_ETA_RANGE: (f64, f64) = (0.05, 1.0);

/// Fit `(r, eta)` (with `eta_s = eta_i = eta`) to an undisplaced record by
/// derivative-free grid search: a coarse grid followed by two local
/// refinements, each shrinking the step fourfold. Deterministic.
pub fn fit_source(record: &ClickRecord, tmd: &Tmd) -> Result<SourceFit> {
    tmd.validate()?;
    let observed = record.observed();
    if observed.is_empty() {
        return Err(Error::invalid("fit_source: empty record"));
    }
    let joint_size = 1usize << tmd.joint_bins();
    let mut dense_f = vec![0.0; joint_size];
    for &(mask, f) in &observed {
        dense_f[mask as usize] = f;
    }
    let inv_shots = 1.0 / record.shots() as f64;

    // Chi-square-weighted discrepancy: plain squared frequency distance is
    // dominated by the loudest patterns and leaves a long (r, eta) ridge.
    let discrepancy = |r: f64, eta: f64| -> f64 {
        match source_pattern_model(r, eta, tmd) {
            Ok(dist) => dist
                .probs()
                .iter()
                .zip(dense_f.iter())
                .map(|(&p, &f)| (p - f) * (p - f) / (p + inv_shots))
                .sum(),
            Err(_) => f64::INFINITY,
        }
    };

    let grid_eval = |rs: &[f64], etas: &[f64]| -> (f64, f64, f64) {
        let points: Vec<(f64, f64)> = rs
            .iter()
            .flat_map(|&r| etas.iter().map(move |&e| (r, e)))
            .collect();
        let scores: Vec<f64> = points
            .par_iter()
            .map(|&(r, e)| discrepancy(r, e))
            .collect();
        let best = scores
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        (points[best].0, points[best].1, scores[best])
    };

    let linspace = |lo: f64, hi: f64, n: usize| -> Vec<f64> {
        (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect()
    };

    let rs = linspace(SOURCE_R_RANGE.0, SOURCE_R_RANGE.1, 17);
    let etas = linspace(SOURCE_ETA_RANGE.0, SOURCE_ETA_RANGE.1, 20);
    let r_step0 = rs[1] - rs[0];
    let eta_step0 = etas[1] - etas[0];
    let (mut r_best, mut eta_best, mut best_score) = grid_eval(&rs, &etas);

    let mut r_step = r_step0;
    let mut eta_step = eta_step0;
    for _ in 0..2 {
        let rs = linspace(
            (r_best - r_step).max(SOURCE_R_RANGE.0),
            (r_best + r_step).min(SOURCE_R_RANGE.1),
            9,
        );
        let etas = linspace(
            (eta_best - eta_step).max(SOURCE_ETA_RANGE.0),
            (eta_best + eta_step).min(SOURCE_ETA_RANGE.1),
            9,
        );
        let (r, e, s) = grid_eval(&rs, &etas);
        r_best = r;
        eta_best = e;
        best_score = s;
        r_step /= 4.0;
        eta_step /= 4.0;
    }

    let at_boundary = r_best <= SOURCE_R_RANGE.0 + 1e-9
        || r_best >= SOURCE_R_RANGE.1 - 1e-9
        || eta_best <= SOURCE_ETA_RANGE.0 + 1e-9
        || eta_best >= SOURCE_ETA_RANGE.1 - 1e-9;
    Ok(SourceFit {
        r_hat: r_best,
        eta_hat: eta_best,
        fit_residual: best_score,
        at_boundary,
        eta_identifiable: r_best >= 0.02,
    })
}

/// Forward pattern model of the undisplaced source at `(r, eta)`.
fn source_pattern_model(r: f64, eta: f64, tmd: &Tmd) -> Result<crate::tmd::PatternDist> {
    // Truncation fitted to the geometric tail; capped by the exact model.
    let lambda2 = r.tanh().powi(2);
    let n_max = if lambda2 < 1e-12 {
        2
    } else {
        ((-10.0 * std::f64::consts::LN_10 / lambda2.ln()).ceil() as usize).clamp(2, 40)
    };
    let joint = tmsv_joint(r, n_max)?;
    let lossy = apply_joint_loss(&joint, eta, eta)?;
    joint_response_with_budget(&lossy, tmd, 1e-7)
}

/// Invert the probes' zero-click curve at an observed zero-click
/// probability. The curve `ln p0` is exactly linear in `amp^2` for every
/// detector in this family (afterpulses never empty a pattern), so a
/// least-squares line in that plane inverts it.
pub fn estimate_displacement(zero_click_prob: f64, probes: &ProbeSet) -> Result<f64> {
    if !(zero_click_prob > 0.0 && zero_click_prob <= 1.0) {
        return Err(Error::invalid(format!(
            "estimate_displacement: probability {zero_click_prob} outside (0, 1]"
        )));
    }
    let curve = probes.signal_zero_click_curve();
    let pts: Vec<(f64, f64)> = curve
        .iter()
        .filter(|&&(_, p0)| p0 > 0.0)
        .map(|&(amp, p0)| (amp * amp, p0.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::invalid("estimate_displacement: not enough probe levels"));
    }
    let lo = curve.iter().map(|&(_, p)| p).fold(f64::INFINITY, f64::min);
    if zero_click_prob < lo * 0.9 {
        return Err(Error::Extrapolation {
            p: zero_click_prob,
            lo: lo * 0.9,
            hi: 1.0,
        });
    }
    let (b, m, _) = line_fit(&pts);
    if !(m < 0.0) {
        return Err(Error::Numeric(
            "estimate_displacement: zero-click curve is not decreasing".into(),
        ));
    }
    let amp2 = (zero_click_prob.ln() - b) / m;
    if amp2 < -0.02 {
        return Err(Error::Extrapolation {
            p: zero_click_prob,
            lo,
            hi: (b).exp(),
        });
    }
    Ok(amp2.max(0.0).sqrt())
}

/// Herald the signal on one idler detection with afterpulse fraction `x`:
/// unnormalized `h[m] = (1 - x) P[m][1] + x d_{m,1} sum_n P[1][n]`,
/// returned normalized.
pub fn herald_signal(p: &JointDist, x: f64) -> Result<PhotonDist> {
    if !(0.0..1.0).contains(&x) {
        return Err(Error::invalid(format!("herald_signal: x = {x} outside [0, 1)")));
    }
    herald_slice(p.probs(), p.rows(), p.cols(), x)
}

fn herald_slice(probs: &[f64], rows: usize, cols: usize, x: f64) -> Result<PhotonDist> {
    let mut h = vec![0.0; rows];
    if cols > 1 {
        for m in 0..rows {
            h[m] = (1.0 - x) * probs[m * cols + 1];
        }
    }
    if rows > 1 {
        let signal_one: f64 = probs[cols..2 * cols].iter().sum();
        h[1] += x * signal_one;
    }
    let weight: f64 = h.iter().sum();
    if weight <= 0.0 {
        return Err(Error::ZeroHeraldWeight);
    }
    for v in h.iter_mut() {
        *v /= weight;
    }
    PhotonDist::with_budget(h, 1e-9)
}

/// Heralded signal distribution from a reconstruction, with the replica
/// parities for error propagation.
pub struct HeraldedState {
    pub dist: PhotonDist,
    pub parity: f64,
    pub parity_std: f64,
    pub replica_parities: Vec<f64>,
}

pub fn herald_reconstruction(rec: &Reconstruction, x: f64) -> Result<HeraldedState> {
    let dist = herald_slice(rec.probs(), rec.rows(), rec.cols(), x)?;
    let parity = crate::fock::parity(&dist);
    let mut replica_parities = Vec::with_capacity(rec.replicas().len());
    for rep in rec.replicas() {
        if let Ok(h) = herald_slice(rep, rec.rows(), rec.cols(), x) {
            replica_parities.push(crate::fock::parity(&h));
        }
    }
    let parity_std = if replica_parities.len() > 1 {
        let mean: f64 = replica_parities.iter().sum::<f64>() / replica_parities.len() as f64;
        (replica_parities
            .iter()
            .map(|p| (p - mean).powi(2))
            .sum::<f64>()
            / (replica_parities.len() - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    Ok(HeraldedState {
        dist,
        parity,
        parity_std,
        replica_parities,
    })
}

/// Heralded distribution with elementwise bootstrap errors, from heralding
/// every replica of a reconstruction.
pub fn herald_components(rec: &Reconstruction, x: f64) -> Result<(PhotonDist, Vec<f64>)> {
    let dist = herald_slice(rec.probs(), rec.rows(), rec.cols(), x)?;
    let n = dist.probs().len();
    let mut reps: Vec<Vec<f64>> = Vec::new();
    for rep in rec.replicas() {
        if let Ok(h) = herald_slice(rep, rec.rows(), rec.cols(), x) {
            reps.push(h.probs().to_vec());
        }
    }
    let mut std = vec![0.0; n];
    if reps.len() > 1 {
        for k in 0..n {
            let mean: f64 = reps.iter().map(|r| r[k]).sum::<f64>() / reps.len() as f64;
            let var: f64 = reps.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>()
                / (reps.len() - 1) as f64;
            std[k] = var.sqrt();
        }
    }
    Ok((dist, std))
}

/// Click-level heralding: keep only shots with exactly one idler click and
/// return the signal-mode sub-record. The photon-level herald above acts on
/// reconstructed distributions; this one conditions raw data.
pub fn herald_clicks(record: &ClickRecord, bins_per_mode: usize) -> Result<ClickRecord> {
    let mut counts = std::collections::BTreeMap::new();
    let mut shots = 0u64;
    let lowmask = (1u32 << bins_per_mode) - 1;
    for (&mask, &c) in record.counts() {
        if (mask >> bins_per_mode).count_ones() == 1 {
            *counts.entry(mask & lowmask).or_insert(0) += c;
            shots += c;
        }
    }
    if shots == 0 {
        return Err(Error::ZeroHeraldWeight);
    }
    ClickRecord::new(shots, counts)
}

/// Phase-space normalization conventions for turning a parity into a
/// Wigner-function value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WignerConvention {
    /// Joint two-mode point: `W = 4 S / pi^2`.
    TwoMode,
    /// Single-mode point: `W = 2 S / pi`.
    SingleMode,
}

/// Convert a parity sample into a Wigner-function value.
pub fn wigner_point(parity: f64, convention: WignerConvention) -> Result<f64> {
    if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&parity) {
        return Err(Error::invalid(format!("wigner_point: parity {parity} outside [-1, 1]")));
    }
    let pi = std::f64::consts::PI;
    Ok(match convention {
        WignerConvention::TwoMode => 4.0 * parity / (pi * pi),
        WignerConvention::SingleMode => 2.0 * parity / pi,
    })
}

/// Which parity curve to assemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveMode {
    /// Joint parity of the two-mode displaced state.
    TwoModeDisplaced,
    /// Parity of the heralded (and displaced) signal mode.
    Heralded,
}

/// One point of a parity curve: reconstructed value with bootstrap error,
/// plus the noiseless forward-model value for overlay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParityPoint {
    pub amp: f64,
    pub parity: f64,
    pub std: f64,
    pub parity_forward: f64,
}

/// Prepared experiment context: detector, probe library, estimated
/// response, and (once calibrated) the afterpulse fit.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub tmd: Tmd,
    pub probes: ProbeSet,
    pub response: ResponseEstimate,
    pub afterpulse: Option<AfterpulseFit>,
}

impl Pipeline {
    /// Build the probe library (sampled at the configured shot count; 0 for
    /// exact probabilities) and estimate the detector response.
    pub fn prepare(cfg: &ExperimentConfig, probe_shots: u64) -> Result<Self> {
        cfg.validate()?;
        let tmd = cfg.tmd();
        let probes = build_probe_library(
            &cfg.probe_grid.amplitudes(),
            &tmd,
            probe_shots,
            derive_seed(cfg.seed, 0x0b5e),
        )?;
        let ropts = ResponseOptions {
            n_max_signal: cfg.recon.n_max_signal,
            n_max_idler: cfg.recon.n_max_idler,
            ..ResponseOptions::default()
        };
        let response = estimate_response(&probes, &ropts)?;
        Ok(Pipeline {
            cfg: cfg.clone(),
            tmd,
            probes,
            response,
            afterpulse: None,
        })
    }

    /// Use an existing probe library instead of building one.
    pub fn with_probes(cfg: &ExperimentConfig, probes: ProbeSet) -> Result<Self> {
        cfg.validate()?;
        let ropts = ResponseOptions {
            n_max_signal: cfg.recon.n_max_signal,
            n_max_idler: cfg.recon.n_max_idler,
            ..ResponseOptions::default()
        };
        let response = estimate_response(&probes, &ropts)?;
        Ok(Pipeline {
            cfg: cfg.clone(),
            tmd: cfg.tmd(),
            probes,
            response,
            afterpulse: None,
        })
    }

    /// Forward model of the displaced two-mode state at the detector input.
    pub fn forward_displaced(&self, amp: f64, overlap: f64) -> Result<JointDist> {
        let src = &self.cfg.source;
        let joint = tmsv_joint(src.r, self.cfg.n_max)?;
        let lossy = apply_joint_loss(&joint, src.eta_s, src.eta_i)?;
        displace_signal(&lossy, amp, overlap, src.splitter_t)
    }

    /// Synthetic click record of the displaced state.
    pub fn record_displaced(
        &self,
        amp: f64,
        overlap: f64,
        shots: u64,
        stream: u64,
    ) -> Result<ClickRecord> {
        let state = self.forward_displaced(amp, overlap)?;
        sample_patterns(&state, &self.tmd, shots, derive_seed(self.cfg.seed, stream))
    }

    /// Reconstruct a record along the configured route.
    ///
    /// The Fock ladder is matched to the observed click statistics (twice
    /// the largest observed click count per mode, floored at 6, capped by
    /// the configured maxima): a dim state reconstructed on a needlessly
    /// tall ladder only collects noise in components the data cannot see.
    pub fn reconstruct(&self, record: &ClickRecord, stream: u64) -> Result<Reconstruction> {
        let (n_s, n_i) = self.adaptive_dims(record);
        let fopts = FitOptions {
            n_patterns: self.cfg.recon.n_patterns,
            n_boot: self.cfg.recon.n_boot,
            seed: derive_seed(self.cfg.seed, stream),
            n_max_signal: n_s,
            n_max_idler: n_i,
            frequency_weighted: self.cfg.recon.frequency_weighted,
            ..FitOptions::default()
        };
        if self.cfg.recon.route == "mixture" {
            fit_state_mixture(record, &self.probes, &fopts)
        } else {
            fit_state(record, &self.response, &fopts)
        }
    }

    /// Click-level heralding route: condition the raw record on exactly one
    /// idler click, then reconstruct the signal mode alone. For dim heralded
    /// states this is far sharper than heralding a joint reconstruction,
    /// because the single-mode inverse problem is a fraction of the size.
    pub fn reconstruct_heralded_clicks(
        &self,
        record: &ClickRecord,
        stream: u64,
    ) -> Result<Reconstruction> {
        let sub = crate::calib::herald_clicks(record, self.tmd.bins_per_mode())?;
        self.reconstruct_signal_only(&sub, stream)
    }

    /// Fit a record whose patterns live entirely on the signal bins.
    pub fn reconstruct_signal_only(
        &self,
        record: &ClickRecord,
        stream: u64,
    ) -> Result<Reconstruction> {
        let (n_s, _) = self.adaptive_dims(record);
        let fopts = FitOptions {
            n_patterns: self.cfg.recon.n_patterns,
            n_boot: self.cfg.recon.n_boot,
            seed: derive_seed(self.cfg.seed, stream ^ 0x4c1c),
            n_max_signal: n_s,
            n_max_idler: 0,
            frequency_weighted: self.cfg.recon.frequency_weighted,
            ..FitOptions::default()
        };
        fit_state(record, &self.response, &fopts)
    }

    /// Data-driven reconstruction ladder sizes: twice the click count that
    /// the mode exceeds only ~10 times in the whole record.
    pub fn adaptive_dims(&self, record: &ClickRecord) -> (usize, usize) {
        let b = self.tmd.bins_per_mode();
        let mut hist_s = vec![0u64; b + 1];
        let mut hist_i = vec![0u64; b + 1];
        for (&mask, &count) in record.counts() {
            hist_s[(mask & ((1 << b) - 1)).count_ones() as usize] += count;
            hist_i[(mask >> b).count_ones() as usize] += count;
        }
        let floor = 10.max(record.shots() / 100_000);
        let quantile = |hist: &[u64]| -> usize {
            let mut above: u64 = hist.iter().sum();
            for (k, &c) in hist.iter().enumerate() {
                above -= c;
                if above <= floor {
                    return k;
                }
            }
            hist.len() - 1
        };
        let n_s = (2 * quantile(&hist_s)).clamp(6, self.cfg.recon.n_max_signal);
        let n_i = (2 * quantile(&hist_i)).clamp(6, self.cfg.recon.n_max_idler.max(6));
        (n_s, n_i.min(self.cfg.recon.n_max_idler))
    }

    /// Simulate idler singles rates across the configured displacements and
    /// fit the afterpulse fraction; stores and returns the fit.
    pub fn calibrate_afterpulse(&mut self, overlap: f64, shots: u64) -> Result<AfterpulseFit> {
        let singles = self.idler_singles_scan(overlap, shots)?;
        let fit = fit_afterpulse(&singles)?;
        self.afterpulse = Some(fit.clone());
        Ok(fit)
    }

    /// The (amp^2, idler singles rate) table behind the afterpulse fit.
    pub fn idler_singles_scan(&self, overlap: f64, shots: u64) -> Result<Vec<(f64, f64)>> {
        let b = self.tmd.bins_per_mode();
        self.cfg
            .amps
            .iter()
            .enumerate()
            .map(|(i, &amp)| {
                let record = self.record_displaced(amp, overlap, shots, 0x51_0000 + i as u64)?;
                Ok((amp * amp, record.idler_singles_frac(b)))
            })
            .collect()
    }

    /// Afterpulse fraction at a displacement (0 before calibration).
    pub fn herald_fraction(&self, amp: f64) -> f64 {
        self.afterpulse
            .as_ref()
            .map(|f| f.fraction(amp))
            .unwrap_or(0.0)
    }

    /// Noiseless forward-model parity for the overlay column.
    pub fn forward_parity(&self, amp: f64, overlap: f64, mode: CurveMode, x: f64) -> Result<f64> {
        let state = self.forward_displaced(amp, overlap)?;
        Ok(match mode {
            CurveMode::TwoModeDisplaced => state.parity(),
            CurveMode::Heralded => crate::fock::parity(&herald_signal(&state, x)?),
        })
    }

    /// Full pipeline parity curve: per displacement, simulate, reconstruct,
    /// herald if requested, and pair with the forward-model value. Points
    /// run in parallel with per-point seeds.
    pub fn parity_curve(
        &self,
        amps: &[f64],
        mode: CurveMode,
        overlap: f64,
    ) -> Result<Vec<ParityPoint>> {
        amps.par_iter()
            .enumerate()
            .map(|(i, &amp)| self.parity_point(i, amp, mode, overlap))
            .collect()
    }

    fn parity_point(
        &self,
        index: usize,
        amp: f64,
        mode: CurveMode,
        overlap: f64,
    ) -> Result<ParityPoint> {
        let stream = 0xc0_0000 + index as u64;
        let record = self.record_displaced(amp, overlap, self.cfg.shots, stream)?;
        let rec = self.reconstruct(&record, stream ^ 0xff)?;
        let x = self.herald_fraction(amp);
        let (parity, std) = match mode {
            CurveMode::TwoModeDisplaced => parity_from_reconstruction(&rec),
            CurveMode::Heralded => {
                let h = herald_reconstruction(&rec, x)?;
                (h.parity, h.parity_std)
            }
        };
        let parity_forward = self.forward_parity(amp, overlap, mode, x)?;
        Ok(ParityPoint {
            amp,
            parity,
            std,
            parity_forward,
        })
    }
}

/// One-call form of the curve assembly: prepares the pipeline (sampled
/// probes at the configured shot count), calibrates the afterpulse fraction
/// for heralded curves, and runs the points.
pub fn parity_curve(
    cfg: &ExperimentConfig,
    amps: &[f64],
    mode: CurveMode,
    overlap: f64,
) -> Result<Vec<ParityPoint>> {
    let mut pipeline = Pipeline::prepare(cfg, cfg.shots)?;
    if matches!(mode, CurveMode::Heralded) {
        pipeline.calibrate_afterpulse(overlap, cfg.shots)?;
    }
    pipeline.parity_curve(amps, mode, overlap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{convolve, poisson_dist};
    use crate::tmd::{coherent_response, sample_from_dist};

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!(
            (a - b).abs() < tol,
            "{what}: {a} vs {b} (|diff| = {:e})",
            (a - b).abs()
        );
    }

    fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.shots = 200_000;
        cfg.probe_grid.n_signal = 25;
        cfg.probe_grid.max_signal = 3.0;
        cfg.recon.n_boot = 12;
        cfg.recon.n_max_signal = 12;
        cfg.amps = vec![0.0, 0.5, 1.0, 1.5, 2.0];
        cfg
    }

    #[test]
    fn displacement_inversion_closed_form() {
        // dark = 0, uniform bins: p0(amp) = e^{-eta_d amp^2}, so
        // p0 = e^{-0.2} inverts to amp = 1 exactly.
        let tmd = Tmd::default();
        let amps: Vec<(f64, f64)> = (1..=12).map(|i| (0.3 * i as f64, 0.2)).collect();
        let probes = build_probe_library(&amps, &tmd, 0, 3).unwrap();
        let amp = estimate_displacement((-0.2_f64).exp(), &probes).unwrap();
        assert_close(amp, 1.0, 1e-9, "inverted amplitude");
        // Trivial end: probability 1 inverts to zero displacement.
        let zero = estimate_displacement(1.0, &probes).unwrap();
        assert_close(zero, 0.0, 1e-9, "zero displacement");
    }

    #[test]
    fn displacement_round_trip_at_finite_shots() {
        let tmd = Tmd::default();
        let amps: Vec<(f64, f64)> = (1..=14).map(|i| (0.25 * i as f64, 0.2)).collect();
        let probes = build_probe_library(&amps, &tmd, 0, 3).unwrap();
        // Reference beam alone at amp = 2.0, observed through the signal arm.
        let reference = coherent_response(2.0, 0.0, &tmd).unwrap();
        let record = sample_from_dist(&reference, 1_000_000, 17).unwrap();
        let p0 = record.signal_marginal(8).empty_freq();
        let amp = estimate_displacement(p0, &probes).unwrap();
        assert_close(amp, 2.0, 0.02, "round trip");
    }

    #[test]
    fn displacement_extrapolation_guard() {
        let tmd = Tmd::default();
        let amps: Vec<(f64, f64)> = (1..=5).map(|i| (0.3 * i as f64, 0.2)).collect();
        let probes = build_probe_library(&amps, &tmd, 0, 3).unwrap();
        // Far dimmer zero-click probability than any probe reaches.
        match estimate_displacement(1e-6, &probes) {
            Err(Error::Extrapolation { .. }) => {}
            other => panic!("expected extrapolation error, got {other:?}"),
        }
    }

    #[test]
    fn source_fit_round_trip() {
        let truth = apply_joint_loss(&tmsv_joint(0.6, 40).unwrap(), 0.75, 0.75).unwrap();
        let tmd = Tmd::default();
        let record = sample_patterns(&truth, &tmd, 1_000_000, 31).unwrap();
        let fit = fit_source(&record, &tmd).unwrap();
        assert_close(fit.r_hat, 0.6, 0.02, "r");
        assert_close(fit.eta_hat, 0.75, 0.02, "eta");
        assert!(!fit.at_boundary);
        assert!(fit.eta_identifiable);
    }

    #[test]
    fn source_fit_flags_vacuum() {
        let truth = tmsv_joint(0.0, 4).unwrap();
        let tmd = Tmd::default();
        let record = sample_patterns(&truth, &tmd, 200_000, 5).unwrap();
        let fit = fit_source(&record, &tmd).unwrap();
        assert!(fit.r_hat < 0.02, "r_hat = {}", fit.r_hat);
        assert!(!fit.eta_identifiable);
    }

    #[test]
    fn source_fit_landscape_sane() {
        // The discrepancy at truth must not exceed the one at (r + 0.2, eta).
        let truth = apply_joint_loss(&tmsv_joint(0.6, 40).unwrap(), 0.75, 0.75).unwrap();
        let tmd = Tmd::default();
        let record = sample_patterns(&truth, &tmd, 1_000_000, 37).unwrap();
        let mut dense_f = vec![0.0; 1 << 16];
        for (mask, f) in record.observed() {
            dense_f[mask as usize] = f;
        }
        let inv_shots = 1.0 / record.shots() as f64;
        let disc = |r: f64, eta: f64| -> f64 {
            let dist = source_pattern_model(r, eta, &tmd).unwrap();
            dist.probs()
                .iter()
                .zip(dense_f.iter())
                .map(|(&p, &f)| (p - f) * (p - f) / (p + inv_shots))
                .sum()
        };
        assert!(disc(0.6, 0.75) <= disc(0.8, 0.75));
    }

    #[test]
    fn afterpulse_fit_basics() {
        // Constant rates: zero slope (to rounding), x = 0.
        let flat = fit_afterpulse(&[(0.0, 0.05), (1.0, 0.05), (4.0, 0.05)]).unwrap();
        assert!(flat.slope.abs() < 1e-15, "slope {}", flat.slope);
        assert!(flat.fraction(2.0) < 1e-12);

        // Perfect line c = 1, s = 0.5: exact recovery.
        let pts: Vec<(f64, f64)> = (0..5).map(|k| (k as f64, 1.0 + 0.5 * k as f64)).collect();
        let line = fit_afterpulse(&pts).unwrap();
        assert_close(line.intercept, 1.0, 1e-12, "c");
        assert_close(line.slope, 0.5, 1e-12, "s");
        assert_close(line.r_squared, 1.0, 1e-12, "R2");
        assert!(line.detected);
        // x(amp) = s amp^2 / (c + s amp^2).
        assert_close(line.fraction(2.0), 2.0 / 3.0, 1e-12, "x(2)");
    }

    #[test]
    fn afterpulse_fraction_exceeds_ten_percent_in_replication_regime() {
        let mut cfg = small_config();
        cfg.shots = 300_000;
        cfg.amps = vec![0.0, 1.0, 2.0, 3.0];
        let mut pipeline = Pipeline::prepare(&cfg, 0).unwrap();
        let fit = pipeline.calibrate_afterpulse(cfg.source.overlap, cfg.shots).unwrap();
        assert!(fit.detected, "slope {}", fit.slope);
        assert!(fit.slope > 0.0);
        assert!(fit.fraction(3.0) > 0.10, "x(3) = {}", fit.fraction(3.0));
    }

    #[test]
    fn herald_lossless_tmsv_gives_single_photon() {
        let p = tmsv_joint(0.6, 20).unwrap();
        let h = herald_signal(&p, 0.0).unwrap();
        assert_close(h.prob(1), 1.0, 1e-12, "single photon");
    }

    #[test]
    fn herald_lossy_ratio_matches_double_sum() {
        // Brute-force double-binomial oracle for h[0]/h[1].
        let r = 0.6;
        let (eta_s, eta_i) = (0.75, 0.75);
        let joint = apply_joint_loss(&tmsv_joint(r, 40).unwrap(), eta_s, eta_i).unwrap();
        let h = herald_signal(&joint, 0.0).unwrap();
        let binom = |n: usize, m: usize, eta: f64| -> f64 {
            if m > n {
                return 0.0;
            }
            let mut c = 1.0;
            for i in 0..m {
                c *= (n - i) as f64 / (i + 1) as f64;
            }
            c * eta.powi(m as i32) * (1.0 - eta).powi((n - m) as i32)
        };
        let pure = tmsv_joint(r, 40).unwrap();
        let cell = |m: usize, n: usize| -> f64 {
            (0..=40)
                .map(|k| pure.get(k, k) * binom(k, m, eta_s) * binom(k, n, eta_i))
                .sum()
        };
        let expect_ratio = cell(0, 1) / cell(1, 1);
        assert_close(h.prob(0) / h.prob(1), expect_ratio, 1e-10, "h0/h1");
    }

    #[test]
    fn herald_x_one_projects_signal() {
        let joint = apply_joint_loss(&tmsv_joint(0.6, 30).unwrap(), 0.75, 0.75).unwrap();
        let h = herald_signal(&joint, 1.0 - 1e-13).unwrap();
        assert_close(h.prob(1), 1.0, 1e-9, "signal single");
    }

    #[test]
    fn herald_vacuum_errors() {
        // r -> 0: the heralding weight is exactly zero; no false heralds.
        let vac = tmsv_joint(0.0, 5).unwrap();
        match herald_signal(&vac, 0.0) {
            Err(Error::ZeroHeraldWeight) => {}
            other => panic!("expected zero-weight error, got {other:?}"),
        }
    }

    #[test]
    fn herald_clicks_conditions_on_single_idler() {
        let truth = apply_joint_loss(&tmsv_joint(0.6, 40).unwrap(), 0.75, 0.75).unwrap();
        let tmd = Tmd::default();
        let record = sample_patterns(&truth, &tmd, 100_000, 3).unwrap();
        let sub = herald_clicks(&record, 8).unwrap();
        assert!(sub.shots() > 0);
        assert!(sub.shots() < record.shots());
        // All kept patterns are signal-only masks.
        assert!(sub.counts().keys().all(|&m| m < 256));
    }

    #[test]
    fn zero_overlap_heralded_distribution_is_convolution() {
        // Forward model: heralding commutes with a zero-overlap displacement
        // up to the Poissonian convolution of the reference.
        let joint = apply_joint_loss(&tmsv_joint(0.6, 50).unwrap(), 0.75, 0.75).unwrap();
        let amp: f64 = 1.3;
        let displaced = displace_signal(&joint, amp, 0.0, 1.0).unwrap();
        let h_disp = herald_signal(&displaced, 0.0).unwrap();
        let h_plain = herald_signal(&joint, 0.0).unwrap();
        let pois = poisson_dist(amp * amp, 30).unwrap();
        let expect = convolve(&h_plain, &pois).unwrap();
        for n in 0..=50 {
            assert_close(h_disp.prob(n), expect.prob(n), 1e-12, &format!("n = {n}"));
        }
    }

    #[test]
    fn afterpulse_bias_pushes_parity_down() {
        // Forward-model heralded parity with x > 0 lies below the x = 0
        // curve at every displacement > 0.
        let cfg = ExperimentConfig::default();
        let pipeline = Pipeline {
            cfg: cfg.clone(),
            tmd: cfg.tmd(),
            probes: ProbeSet {
                probes: vec![],
                bins_per_mode: 8,
            },
            response: dummy_response(),
            afterpulse: None,
        };
        for &amp in &[0.25, 0.5, 1.0, 1.5, 2.0] {
            let clean = pipeline
                .forward_parity(amp, 0.7, CurveMode::Heralded, 0.0)
                .unwrap();
            let biased = pipeline
                .forward_parity(amp, 0.7, CurveMode::Heralded, 0.12)
                .unwrap();
            assert!(
                biased < clean,
                "amp {amp}: biased {biased} not below clean {clean}"
            );
        }
    }

    fn dummy_response() -> ResponseEstimate {
        use nalgebra::DMatrix;
        ResponseEstimate {
            t_signal: DMatrix::zeros(256, 2),
            t_idler: DMatrix::zeros(256, 2),
            bins_per_mode: 8,
            lambda_signal: 0.0,
            lambda_idler: 0.0,
        }
    }

    #[test]
    fn heralded_forward_parity_negative_at_origin() {
        let cfg = ExperimentConfig::default();
        let pipeline = Pipeline {
            cfg: cfg.clone(),
            tmd: cfg.tmd(),
            probes: ProbeSet {
                probes: vec![],
                bins_per_mode: 8,
            },
            response: dummy_response(),
            afterpulse: None,
        };
        let p0 = pipeline
            .forward_parity(0.0, 0.7, CurveMode::Heralded, 0.0)
            .unwrap();
        assert!(p0 < 0.0, "parity at origin {p0}");
        // Zero overlap: stays negative for every displacement up to 2.
        for &amp in &[0.0, 0.5, 1.0, 1.5, 2.0] {
            let p = pipeline
                .forward_parity(amp, 0.0, CurveMode::Heralded, 0.0)
                .unwrap();
            assert!(p < 0.0, "amp {amp}: parity {p}");
        }
    }

    #[test]
    fn narrowing_factor_from_parity_curve() {
        // Lossless two-mode parity curve at beta = 0: Gaussian in amp whose
        // variance ratio to vacuum is 1/cosh(2r) within 1%.
        let r: f64 = 0.6;
        let base = tmsv_joint(r, 60).unwrap();
        let mut pts_state = Vec::new();
        let mut pts_vac = Vec::new();
        for k in 0..=12 {
            let amp = 1.2 * k as f64 / 12.0;
            let disp = displace_signal(&base, amp, 1.0, 1.0).unwrap();
            pts_state.push((amp * amp, disp.parity().ln()));
            pts_vac.push((amp * amp, (-2.0 * amp * amp).ln().max(-1e300)));
        }
        // ln S = -2 cosh(2r) amp^2 for the squeezed state, -2 amp^2 for
        // vacuum; slope ratio gives the variance ratio.
        let (_, slope_state, _) = line_fit(&pts_state);
        let vac_slope = -2.0;
        let ratio = vac_slope / slope_state;
        let expect = 1.0 / (2.0 * r).cosh();
        assert!(
            (ratio / expect - 1.0).abs() < 0.01,
            "ratio {ratio} vs {expect}"
        );
    }

    #[test]
    fn wigner_point_conventions() {
        let pi = std::f64::consts::PI;
        assert_close(
            wigner_point(1.0, WignerConvention::TwoMode).unwrap(),
            4.0 / (pi * pi),
            1e-15,
            "two-mode unit parity",
        );
        assert_close(
            wigner_point(1.0, WignerConvention::TwoMode).unwrap(),
            0.405285,
            1e-6,
            "literal",
        );
        assert_close(
            wigner_point(-0.5, WignerConvention::SingleMode).unwrap(),
            -1.0 / pi,
            1e-15,
            "single-mode -1/2 parity",
        );
        assert_close(
            wigner_point(-0.5, WignerConvention::SingleMode).unwrap(),
            -0.318310,
            1e-6,
            "literal single",
        );
        assert_eq!(wigner_point(0.0, WignerConvention::TwoMode).unwrap(), 0.0);
        assert!(wigner_point(1.5, WignerConvention::TwoMode).is_err());
    }

    #[test]
    fn parity_curve_vacuum_point() {
        let mut cfg = small_config();
        cfg.source.r = 0.0;
        cfg.shots = 100_000;
        cfg.amps = vec![0.0];
        let pipeline = Pipeline::prepare(&cfg, 0).unwrap();
        let curve = pipeline
            .parity_curve(&[0.0], CurveMode::TwoModeDisplaced, cfg.source.overlap)
            .unwrap();
        assert_eq!(curve.len(), 1);
        assert_close(curve[0].parity, 1.0, 0.01, "vacuum parity");
        assert_close(curve[0].parity_forward, 1.0, 1e-9, "forward vacuum parity");
    }
}
