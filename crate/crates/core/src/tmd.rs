//! Two-mode, time-multiplexed click detector: exact forward model and
//! Monte Carlo sampler.
//!
//! Each mode is split over `bins_per_mode` bins (default 8: four time slots
//! on each of two APDs). The two modes share the APD pair, one mode delayed
//! behind the other, so jointly there are 16 bins on 8 time slots.
//!
//! Conventions, used everywhere including the serialized records:
//!
//! * bin `b` of a mode reads out on APD `b % 2` in time slot `b / 2`;
//! * joint patterns are bitmasks with bin 0 as the least significant bit,
//!   signal bins at bits `0..bins_per_mode`, idler bins above them;
//! * the idler is delayed by `bins_per_mode / 2` slots, so in global time
//!   the signal slots come first and the idler slots follow on the same APDs.
//!
//! Afterpulsing is single generation: every clicked bin independently
//! triggers a click in the next live time slot of its APD (within
//! `ap_horizon`) with probability `p_ap`; afterpulses do not afterpulse.
//! With `cross_mode` enabled the trigger may cross from the last signal slot
//! into the first idler slot, which is what couples the idler click rate to
//! the signal displacement.

use crate::error::{Error, Result};
use crate::fock::{PhotonDist, TAIL_TOL};
use crate::source::JointDist;
use crate::util::{derive_seed, poisson_pmf};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::Binomial;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

const SUM_SLACK: f64 = 1e-9;
/// Sparse cutoff when walking pattern distributions.
const MASS_EPS: f64 = 1e-19;

/// Per-mode detector parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorParams {
    /// Number of bins this mode is split over (even; two APDs).
    pub bins_per_mode: usize,
    /// Routing probability into each bin; sums to 1.
    pub split_weights: Vec<f64>,
    /// APD detection efficiency.
    pub eta_d: f64,
    /// Per-bin dark-click probability.
    pub dark: f64,
    /// Afterpulse probability per click.
    pub p_ap: f64,
    /// How many subsequent time slots an afterpulse may reach (0 disables).
    pub ap_horizon: usize,
    /// Photon cap of the exact response model; brighter inputs must go
    /// through the Monte Carlo sampler.
    pub exact_cap: usize,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            bins_per_mode: 8,
            split_weights: uniform_weights(8),
            eta_d: 0.20,
            dark: 0.0,
            p_ap: 0.07,
            ap_horizon: 1,
            exact_cap: 40,
        }
    }
}

/// Uniform routing weights for `bins` bins.
pub fn uniform_weights(bins: usize) -> Vec<f64> {
    vec![1.0 / bins as f64; bins]
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        let b = self.bins_per_mode;
        if b < 2 || b % 2 != 0 || b > 10 {
            return Err(Error::invalid(format!(
                "detector.bins_per_mode: {b} must be even and in [2, 10]"
            )));
        }
        if self.split_weights.len() != b {
            return Err(Error::invalid(format!(
                "detector.split_weights: {} entries for {b} bins",
                self.split_weights.len()
            )));
        }
        if self.split_weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
            return Err(Error::invalid("detector.split_weights: entries outside [0, 1]"));
        }
        let sum: f64 = self.split_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "detector.split_weights: sum {sum} != 1"
            )));
        }
        if !(0.0..=1.0).contains(&self.eta_d) {
            return Err(Error::invalid(format!("detector.eta_d: {} outside [0, 1]", self.eta_d)));
        }
        if !(0.0..1.0).contains(&self.dark) {
            return Err(Error::invalid(format!("detector.dark: {} outside [0, 1)", self.dark)));
        }
        if !(0.0..1.0).contains(&self.p_ap) {
            return Err(Error::invalid(format!("detector.p_ap: {} outside [0, 1)", self.p_ap)));
        }
        if self.exact_cap == 0 {
            return Err(Error::invalid("detector.exact_cap: must be >= 1"));
        }
        Ok(())
    }

}

/// The full two-mode detector: per-mode parameters plus the shared-APD
/// coupling switch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tmd {
    pub signal: DetectorParams,
    pub idler: DetectorParams,
    /// Allow afterpulses to cross from the last signal slot into the first
    /// idler slot of the same APD.
    pub cross_mode: bool,
}

impl Default for Tmd {
    fn default() -> Self {
        Tmd {
            signal: DetectorParams::default(),
            idler: DetectorParams::default(),
            cross_mode: true,
        }
    }
}

impl Tmd {
    pub fn validate(&self) -> Result<()> {
        self.signal.validate()?;
        self.idler.validate()?;
        if self.signal.bins_per_mode != self.idler.bins_per_mode {
            return Err(Error::invalid(
                "tmd: signal and idler must use the same number of bins",
            ));
        }
        Ok(())
    }

    pub fn bins_per_mode(&self) -> usize {
        self.signal.bins_per_mode
    }

    pub fn joint_bins(&self) -> usize {
        2 * self.signal.bins_per_mode
    }

    fn p_ap_of(&self, joint_bin: usize) -> f64 {
        if joint_bin < self.signal.bins_per_mode {
            self.signal.p_ap
        } else {
            self.idler.p_ap
        }
    }

    fn horizon_of(&self, joint_bin: usize) -> usize {
        if joint_bin < self.signal.bins_per_mode {
            self.signal.ap_horizon
        } else {
            self.idler.ap_horizon
        }
    }

    /// Successor bin an afterpulse from `joint_bin` would land in.
    fn successor(&self, joint_bin: usize) -> Option<usize> {
        let b = self.signal.bins_per_mode;
        let slots = b / 2;
        let mode = joint_bin / b;
        let local = joint_bin % b;
        let apd = local % 2;
        let gslot = mode * slots + local / 2;
        let horizon = self.horizon_of(joint_bin);
        for off in 1..=horizon {
            let gs = gslot + off;
            if gs >= 2 * slots {
                return None;
            }
            let (m2, l2) = (gs / slots, gs % slots);
            let cand = m2 * b + 2 * l2 + apd;
            if m2 != mode && !self.cross_mode {
                return None;
            }
            return Some(cand);
        }
        None
    }
}

/// Probability distribution over click patterns (bitmasks) of `n_bins` bins.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternDist {
    probs: Vec<f64>,
    n_bins: usize,
}

impl PatternDist {
    pub fn new(probs: Vec<f64>, n_bins: usize, budget: f64) -> Result<Self> {
        if probs.len() != 1 << n_bins {
            return Err(Error::invalid(format!(
                "PatternDist: {} entries for {n_bins} bins",
                probs.len()
            )));
        }
        let mut total = 0.0;
        for (mask, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::invalid(format!(
                    "PatternDist: probs[{mask:#x}] = {p:e} invalid"
                )));
            }
            total += p;
        }
        if total > 1.0 + SUM_SLACK {
            return Err(Error::invalid(format!("PatternDist: total {total} exceeds 1")));
        }
        if total < 1.0 - budget {
            return Err(Error::Truncation {
                op: "PatternDist",
                lost: 1.0 - total,
                budget,
            });
        }
        Ok(PatternDist { probs, n_bins })
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, mask: u32) -> f64 {
        self.probs[mask as usize]
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Probability of the all-empty pattern.
    pub fn empty_prob(&self) -> f64 {
        self.probs[0]
    }

    /// Marginal pattern distribution of the low `bins` bits.
    pub fn marginal_low(&self, bins: usize) -> PatternDist {
        let mask = (1usize << bins) - 1;
        let mut out = vec![0.0; 1 << bins];
        for (pat, &p) in self.probs.iter().enumerate() {
            out[pat & mask] += p;
        }
        PatternDist {
            probs: out,
            n_bins: bins,
        }
    }

    /// Marginal pattern distribution of the bits above `bins`.
    pub fn marginal_high(&self, bins: usize) -> PatternDist {
        let mut out = vec![0.0; 1 << (self.n_bins - bins)];
        for (pat, &p) in self.probs.iter().enumerate() {
            out[pat >> bins] += p;
        }
        PatternDist {
            probs: out,
            n_bins: self.n_bins - bins,
        }
    }

    /// Probability that exactly one of the bits above `bins` is set.
    pub fn idler_singles_prob(&self, bins: usize) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .filter(|(pat, _)| (pat >> bins).count_ones() == 1)
            .map(|(_, &p)| p)
            .sum()
    }

    /// Total variation distance to empirical frequencies.
    pub fn tv_to_record(&self, record: &ClickRecord) -> f64 {
        let shots = record.shots() as f64;
        let mut acc = 0.0;
        let mut seen_mass = 0.0;
        for (&mask, &count) in record.counts() {
            let p = self.prob(mask);
            acc += (count as f64 / shots - p).abs();
            seen_mass += p;
        }
        acc += (self.total() - seen_mass).abs();
        0.5 * acc
    }
}

/// Distribution of the number of clicked bins.
pub fn click_number_dist(p: &PatternDist) -> PhotonDist {
    let mut out = vec![0.0; p.n_bins() + 1];
    for (mask, &v) in p.probs().iter().enumerate() {
        out[mask.count_ones() as usize] += v;
    }
    PhotonDist::with_budget(out, (1.0 - p.total()).max(0.0) + SUM_SLACK)
        .expect("click counts of a valid pattern distribution")
}

/// A batch of recorded shots: joint pattern bitmask -> occurrence count.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickRecord {
    shots: u64,
    counts: BTreeMap<u32, u64>,
}

impl ClickRecord {
    pub fn new(shots: u64, counts: BTreeMap<u32, u64>) -> Result<Self> {
        let total: u64 = counts.values().sum();
        if total != shots {
            return Err(Error::invalid(format!(
                "ClickRecord: counts sum to {total}, shots say {shots}"
            )));
        }
        Ok(ClickRecord { shots, counts })
    }

    pub fn shots(&self) -> u64 {
        self.shots
    }

    pub fn counts(&self) -> &BTreeMap<u32, u64> {
        &self.counts
    }

    /// Empirical frequency of one pattern.
    pub fn freq(&self, mask: u32) -> f64 {
        *self.counts.get(&mask).unwrap_or(&0) as f64 / self.shots as f64
    }

    /// Observed distinct patterns with frequencies, in mask order.
    pub fn observed(&self) -> Vec<(u32, f64)> {
        self.counts
            .iter()
            .map(|(&m, &c)| (m, c as f64 / self.shots as f64))
            .collect()
    }

    /// Merge two records; associative and commutative.
    pub fn merge(&self, other: &ClickRecord) -> ClickRecord {
        let mut counts = self.counts.clone();
        for (&m, &c) in &other.counts {
            *counts.entry(m).or_insert(0) += c;
        }
        ClickRecord {
            shots: self.shots + other.shots,
            counts,
        }
    }

    /// Fraction of shots with exactly one idler click.
    pub fn idler_singles_frac(&self, bins_per_mode: usize) -> f64 {
        let hits: u64 = self
            .counts
            .iter()
            .filter(|(&m, _)| (m >> bins_per_mode).count_ones() == 1)
            .map(|(_, &c)| c)
            .sum();
        hits as f64 / self.shots as f64
    }

    /// Empirical probability of the all-empty pattern.
    pub fn empty_freq(&self) -> f64 {
        self.freq(0)
    }

    /// Signal-mode marginal record (low `bins_per_mode` bits of each pattern).
    pub fn signal_marginal(&self, bins_per_mode: usize) -> ClickRecord {
        let mask = (1u32 << bins_per_mode) - 1;
        let mut counts = BTreeMap::new();
        for (&m, &c) in &self.counts {
            *counts.entry(m & mask).or_insert(0) += c;
        }
        ClickRecord {
            shots: self.shots,
            counts,
        }
    }
}

/// Exact pre-afterpulse pattern distribution for `n` photons in one mode.
///
/// Inclusion-exclusion: `P(no click in S) = (1 - eta_d w(S))^n prod_S (1 - dark)`,
/// then a Moebius inversion over the bin subsets yields every exact pattern
/// probability. Afterpulsing is applied separately by [`apply_afterpulse`].
pub fn mode_response(n_photons: usize, params: &DetectorParams) -> Result<PatternDist> {
    params.validate()?;
    if n_photons > params.exact_cap {
        return Err(Error::PhotonCap {
            n: n_photons,
            cap: params.exact_cap,
        });
    }
    let b = params.bins_per_mode;
    let size = 1usize << b;
    let full = size - 1;

    // Subset weight sums via one-bit recursion.
    let mut wsum = vec![0.0; size];
    for mask in 1..size {
        let low = mask.trailing_zeros() as usize;
        wsum[mask] = wsum[mask & (mask - 1)] + params.split_weights[low];
    }

    let no_dark = 1.0 - params.dark;
    let n = n_photons as i32;
    // h[V] = P(no clicks outside V)
    let mut h = vec![0.0; size];
    for v in 0..size {
        let outside = full ^ v;
        let survive = (1.0 - params.eta_d * wsum[outside]).max(0.0).powi(n);
        h[v] = survive * no_dark.powi(outside.count_ones() as i32);
    }
    // In-place subset Moebius transform: h[T] becomes P(clicked set = T).
    for bit in 0..b {
        let step = 1usize << bit;
        for mask in 0..size {
            if mask & step != 0 {
                h[mask] -= h[mask ^ step];
            }
        }
    }
    // The alternating sums can leave roundoff residue of either sign around
    // exact zeros; anything more negative than the provable roundoff scale is
    // a real bug and gets reported, not clamped.
    let floor = size as f64 * (n_photons as f64 + 1.0) * f64::EPSILON;
    for (mask, v) in h.iter_mut().enumerate() {
        if *v < 0.0 {
            if *v < -floor {
                return Err(Error::Numeric(format!(
                    "mode_response: pattern {mask:#x} came out {v:e}, below roundoff floor"
                )));
            }
            *v = 0.0;
        }
    }
    PatternDist::new(h, b, 1e-12)
}

/// Push a pattern distribution through one generation of afterpulsing.
///
/// Returns a distribution over the same bins; total probability is preserved
/// and clicks are never removed (every transition adds bins or keeps them).
pub fn apply_afterpulse(p: &PatternDist, params: &DetectorParams) -> Result<PatternDist> {
    params.validate()?;
    if p.n_bins() != params.bins_per_mode {
        return Err(Error::invalid("apply_afterpulse: bin count mismatch"));
    }
    if params.p_ap == 0.0 || params.ap_horizon == 0 {
        return Ok(p.clone());
    }
    let single = Tmd {
        signal: params.clone(),
        idler: params.clone(),
        cross_mode: false,
    };
    // Single-mode view: joint bins below bins_per_mode are exactly this mode.
    let out = afterpulse_pushforward(p.probs(), p.n_bins(), |bin| single.successor(bin), |_| {
        params.p_ap
    });
    PatternDist::new(out, p.n_bins(), (1.0 - p.total()).max(0.0) + 1e-12)
}

/// Generic afterpulse push-forward: every clicked bin whose successor is not
/// already clicked independently fires with its own probability; the result
/// is the OR of the source pattern with the fired successors.
fn afterpulse_pushforward(
    probs: &[f64],
    n_bins: usize,
    successor: impl Fn(usize) -> Option<usize>,
    p_ap: impl Fn(usize) -> f64,
) -> Vec<f64> {
    let size = probs.len();
    let mut out = vec![0.0; size];
    let succ: Vec<Option<usize>> = (0..n_bins).map(&successor).collect();
    let mut pairs: Vec<(usize, f64)> = Vec::with_capacity(n_bins);
    for (mask, &mass) in probs.iter().enumerate() {
        if mass <= MASS_EPS {
            if mass > 0.0 {
                out[mask] += mass; // keep negligible mass in place
            }
            continue;
        }
        pairs.clear();
        let mut m = mask;
        while m != 0 {
            let bin = m.trailing_zeros() as usize;
            m &= m - 1;
            if let Some(s) = succ[bin] {
                // A trigger into an already clicked bin changes nothing.
                if mask & (1 << s) == 0 {
                    pairs.push((s, p_ap(bin)));
                }
            }
        }
        if pairs.is_empty() {
            out[mask] += mass;
            continue;
        }
        let combos = 1usize << pairs.len();
        for combo in 0..combos {
            let mut add = 0usize;
            let mut prob = mass;
            for (i, &(s, pa)) in pairs.iter().enumerate() {
                if combo & (1 << i) != 0 {
                    add |= 1 << s;
                    prob *= pa;
                } else {
                    prob *= 1.0 - pa;
                }
            }
            out[mask | add] += prob;
        }
    }
    out
}

/// Exact joint pattern distribution of a two-mode input state.
///
/// The modes are conditionally independent given the photon pair `(m, n)`;
/// afterpulsing (including the cross-mode links when enabled) is applied to
/// the combined pattern afterwards. Support above the exact photon cap is
/// tolerated only while it carries less mass than `TAIL_TOL`.
pub fn joint_response(p: &JointDist, tmd: &Tmd) -> Result<PatternDist> {
    joint_response_with_budget(p, tmd, TAIL_TOL)
}

/// [`joint_response`] with an explicit budget for mass sitting above the
/// exact photon cap, for model scans that visit unphysical corners.
pub fn joint_response_with_budget(p: &JointDist, tmd: &Tmd, cap_budget: f64) -> Result<PatternDist> {
    tmd.validate()?;
    let b = tmd.bins_per_mode();
    let joint_size = 1usize << (2 * b);

    let row_mass: Vec<f64> = (0..p.rows())
        .map(|m| (0..p.cols()).map(|n| p.get(m, n)).sum())
        .collect();
    let col_mass: Vec<f64> = (0..p.cols())
        .map(|n| (0..p.rows()).map(|m| p.get(m, n)).sum())
        .collect();

    let mut skipped = 0.0;
    let cap_s = tmd.signal.exact_cap;
    let cap_i = tmd.idler.exact_cap;
    let over_s: f64 = row_mass.iter().skip(cap_s + 1).sum();
    let over_i: f64 = col_mass.iter().skip(cap_i + 1).sum();
    if over_s >= cap_budget {
        return Err(Error::PhotonCap {
            n: p.signal_n_max(),
            cap: cap_s,
        });
    }
    if over_i >= cap_budget {
        return Err(Error::PhotonCap {
            n: p.idler_n_max(),
            cap: cap_i,
        });
    }

    let max_s = (0..p.rows().min(cap_s + 1))
        .rev()
        .find(|&m| row_mass[m] > 0.0)
        .unwrap_or(0);
    let max_i = (0..p.cols().min(cap_i + 1))
        .rev()
        .find(|&n| col_mass[n] > 0.0)
        .unwrap_or(0);

    let t_s: Vec<PatternDist> = (0..=max_s)
        .map(|m| mode_response(m, &tmd.signal))
        .collect::<Result<_>>()?;
    let t_i: Vec<PatternDist> = (0..=max_i)
        .map(|n| mode_response(n, &tmd.idler))
        .collect::<Result<_>>()?;

    let mode_size = 1usize << b;
    let mut joint = vec![0.0; joint_size];
    let mut q = vec![0.0; mode_size];
    for m in 0..=max_s {
        if row_mass[m] == 0.0 {
            continue;
        }
        q.fill(0.0);
        for n in 0..=max_i.min(p.cols() - 1) {
            let w = p.get(m, n);
            if w == 0.0 {
                continue;
            }
            for (pat_i, &v) in t_i[n].probs().iter().enumerate() {
                if v > 0.0 {
                    q[pat_i] += w * v;
                }
            }
        }
        for (pat_s, &v_s) in t_s[m].probs().iter().enumerate() {
            if v_s <= MASS_EPS {
                continue;
            }
            for (pat_i, &qv) in q.iter().enumerate() {
                if qv > 0.0 {
                    joint[(pat_i << b) | pat_s] += v_s * qv;
                }
            }
        }
    }
    skipped += over_s.max(0.0) + over_i.max(0.0);

    let any_ap = (tmd.signal.p_ap > 0.0 && tmd.signal.ap_horizon > 0)
        || (tmd.idler.p_ap > 0.0 && tmd.idler.ap_horizon > 0);
    let final_probs = if any_ap {
        afterpulse_pushforward(&joint, 2 * b, |bin| tmd.successor(bin), |bin| tmd.p_ap_of(bin))
    } else {
        joint
    };
    PatternDist::new(final_probs, 2 * b, p.deficit() + skipped + 1e-10)
}

/// Exact joint response of a two-mode coherent probe with the given
/// amplitudes, through the same detector model as [`joint_response`].
///
/// Coherent light makes every bin click independently before afterpulsing,
/// and afterpulse links never cross APDs, so the pattern distribution
/// factorizes over the two APD chains. That makes probe libraries cheap: no
/// photon-number expansion is needed at any brightness.
pub fn coherent_response(amp_s: f64, amp_i: f64, tmd: &Tmd) -> Result<PatternDist> {
    tmd.validate()?;
    if amp_s < 0.0 || amp_i < 0.0 {
        return Err(Error::invalid("coherent_response: amplitudes must be >= 0"));
    }
    let b = tmd.bins_per_mode();
    let slots = b / 2;
    let chain_len = 2 * slots;

    // Per joint-bin pre-afterpulse click probability.
    let click = |joint_bin: usize| -> f64 {
        let (params, mu) = if joint_bin < b {
            (&tmd.signal, amp_s * amp_s)
        } else {
            (&tmd.idler, amp_i * amp_i)
        };
        let w = params.split_weights[joint_bin % b];
        1.0 - (1.0 - params.dark) * (-mu * params.eta_d * w).exp()
    };

    let mut chains: Vec<Vec<f64>> = Vec::with_capacity(2);
    let mut placements: Vec<Vec<u32>> = Vec::with_capacity(2);
    for apd in 0..2usize {
        // Chain position g = global slot; joint bin for this APD at slot g.
        let joint_bin_at = |g: usize| -> usize {
            let mode = g / slots;
            let local = g % slots;
            mode * b + 2 * local + apd
        };
        let mut dist = vec![1.0];
        for g in 0..chain_len {
            let c = click(joint_bin_at(g));
            let mut next = vec![0.0; dist.len() * 2];
            for (mask, &v) in dist.iter().enumerate() {
                next[mask] += v * (1.0 - c);
                next[mask | (1 << g)] += v * c;
            }
            dist = next;
        }
        let succ = |pos: usize| -> Option<usize> {
            if pos + 1 >= chain_len {
                return None;
            }
            let same_mode = (pos / slots) == ((pos + 1) / slots);
            if same_mode || tmd.cross_mode {
                Some(pos + 1)
            } else {
                None
            }
        };
        let pap = |pos: usize| tmd.p_ap_of(joint_bin_at(pos));
        let horizon_ok = tmd.signal.ap_horizon > 0 || tmd.idler.ap_horizon > 0;
        let pushed = if horizon_ok && (tmd.signal.p_ap > 0.0 || tmd.idler.p_ap > 0.0) {
            // Horizon handling matches Tmd::successor: the afterpulse lands
            // in the immediately following slot (horizon >= 1) or nowhere.
            let gated_succ = |pos: usize| -> Option<usize> {
                let h = if pos < slots {
                    tmd.signal.ap_horizon
                } else {
                    tmd.idler.ap_horizon
                };
                if h == 0 {
                    None
                } else {
                    succ(pos)
                }
            };
            afterpulse_pushforward(&dist, chain_len, gated_succ, pap)
        } else {
            dist
        };
        let placement: Vec<u32> = (0..1usize << chain_len)
            .map(|mask| {
                let mut joint_mask = 0u32;
                for g in 0..chain_len {
                    if mask & (1 << g) != 0 {
                        joint_mask |= 1 << joint_bin_at(g);
                    }
                }
                joint_mask
            })
            .collect();
        chains.push(pushed);
        placements.push(placement);
    }

    let mut joint = vec![0.0; 1usize << (2 * b)];
    for (ia, &va) in chains[0].iter().enumerate() {
        if va == 0.0 {
            continue;
        }
        let base = placements[0][ia];
        for (ib, &vb) in chains[1].iter().enumerate() {
            if vb == 0.0 {
                continue;
            }
            joint[(base | placements[1][ib]) as usize] += va * vb;
        }
    }
    PatternDist::new(joint, 2 * b, 1e-10)
}

/// Draw i.i.d. shots from a joint state through the full detector model.
///
/// Per shot: draw `(m, n)` from the joint distribution, route each photon
/// multinomially into a bin and thin by the APD efficiency, add dark clicks,
/// then fire one generation of afterpulses in time order. Deterministic for
/// a fixed seed.
pub fn sample_patterns(p: &JointDist, tmd: &Tmd, shots: u64, seed: u64) -> Result<ClickRecord> {
    tmd.validate()?;
    if shots == 0 {
        return Err(Error::invalid("sample_patterns: shots must be >= 1"));
    }
    let b = tmd.bins_per_mode();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for m in 0..p.rows() {
        for n in 0..p.cols() {
            let w = p.get(m, n);
            if w > 0.0 {
                pairs.push((m, n));
                weights.push(w);
            }
        }
    }
    // Sampling conditions on the kept mass; the deficit is below TAIL_TOL by
    // construction of the input.
    let state_idx = WeightedIndex::new(&weights)
        .map_err(|e| Error::invalid(format!("sample_patterns: {e}")))?;
    let bin_s = WeightedIndex::new(&tmd.signal.split_weights)
        .map_err(|e| Error::invalid(format!("sample_patterns: {e}")))?;
    let bin_i = WeightedIndex::new(&tmd.idler.split_weights)
        .map_err(|e| Error::invalid(format!("sample_patterns: {e}")))?;

    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0x5a3c_7e01));
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    let n_joint = 2 * b;
    for _ in 0..shots {
        let (m, n) = pairs[state_idx.sample(&mut rng)];
        let mut mask = 0u32;
        for _ in 0..m {
            if rng.gen::<f64>() < tmd.signal.eta_d {
                mask |= 1 << bin_s.sample(&mut rng);
            }
        }
        for _ in 0..n {
            if rng.gen::<f64>() < tmd.idler.eta_d {
                mask |= 1 << (b + bin_i.sample(&mut rng));
            }
        }
        if tmd.signal.dark > 0.0 || tmd.idler.dark > 0.0 {
            for bin in 0..n_joint {
                let dark = if bin < b { tmd.signal.dark } else { tmd.idler.dark };
                if dark > 0.0 && rng.gen::<f64>() < dark {
                    mask |= 1 << bin;
                }
            }
        }
        // Only pre-afterpulse clicks trigger; afterpulses do not cascade.
        let pre = mask;
        let mut bits = pre;
        while bits != 0 {
            let bin = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            if let Some(succ) = tmd.successor(bin) {
                if pre & (1 << succ) == 0 && rng.gen::<f64>() < tmd.p_ap_of(bin) {
                    mask |= 1 << succ;
                }
            }
        }
        *counts.entry(mask).or_insert(0) += 1;
    }
    ClickRecord::new(shots, counts)
}

/// Multinomial draw of `shots` patterns from an exact pattern distribution.
///
/// Statistically identical to repeating [`sample_patterns`] shot by shot,
/// but runs in time proportional to the pattern space instead of the photon
/// flux; used to build probe libraries.
pub fn sample_from_dist(dist: &PatternDist, shots: u64, seed: u64) -> Result<ClickRecord> {
    if shots == 0 {
        return Err(Error::invalid("sample_from_dist: shots must be >= 1"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0x6d1f_22b7));
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    let mut remaining = shots;
    let mut rest = dist.total();
    for (mask, &p) in dist.probs().iter().enumerate() {
        if p <= 0.0 || remaining == 0 {
            continue;
        }
        let ratio = (p / rest).clamp(0.0, 1.0);
        let draw = if ratio >= 1.0 {
            remaining
        } else {
            Binomial::new(remaining, ratio)
                .map_err(|e| Error::Numeric(format!("binomial draw: {e}")))?
                .sample(&mut rng)
        };
        if draw > 0 {
            counts.insert(mask as u32, draw);
            remaining -= draw;
        }
        rest -= p;
        if rest <= 0.0 {
            break;
        }
    }
    if remaining > 0 {
        // Conditioning on the kept mass: leftover shots land on the last
        // nonzero pattern. With deficits below TAIL_TOL this never triggers
        // in practice.
        let last = dist
            .probs()
            .iter()
            .rposition(|&p| p > 0.0)
            .unwrap_or(0) as u32;
        *counts.entry(last).or_insert(0) += remaining;
    }
    ClickRecord::new(shots, counts)
}

/// Exact total-click-count distribution for a Poissonian input on one mode
/// with dark counts off and afterpulsing off: every bin clicks independently.
pub fn poisson_click_counts(mean: f64, params: &DetectorParams) -> Result<PhotonDist> {
    params.validate()?;
    let b = params.bins_per_mode;
    let mut dist = vec![1.0];
    for bin in 0..b {
        let c = 1.0 - (-mean * params.eta_d * params.split_weights[bin]).exp();
        let mut next = vec![0.0; dist.len() + 1];
        for (k, &v) in dist.iter().enumerate() {
            next[k] += v * (1.0 - c);
            next[k + 1] += v * c;
        }
        dist = next;
    }
    PhotonDist::with_budget(dist, 1e-12)
}

/// Convenience: exact joint response of `Poisson(mu_s) (x) Poisson(mu_i)`
/// via the photon-number route, for cross-checking [`coherent_response`].
pub fn coherent_response_via_fock(amp_s: f64, amp_i: f64, tmd: &Tmd) -> Result<PatternDist> {
    let cap = tmd.signal.exact_cap.max(tmd.idler.exact_cap) + 20;
    let ps = PhotonDist::with_budget(poisson_pmf(amp_s * amp_s, cap), 1e-9)?;
    let pi = PhotonDist::with_budget(poisson_pmf(amp_i * amp_i, cap), 1e-9)?;
    let joint = JointDist::product(&ps, &pi);
    joint_response_with_budget(&joint, tmd, 1e-9)
}
