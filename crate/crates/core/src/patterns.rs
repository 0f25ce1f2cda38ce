//! Data-pattern tomography.
//!
//! The detector is calibrated by what it does, not by what it is: a library
//! of two-mode coherent probes with known amplitudes is recorded through the
//! very same instrument as the unknown states, and an unknown state's click
//! frequencies are then explained as a combination of Fock-level responses
//! inferred from the probes. No POVM is ever extracted.
//!
//! Two reconstruction routes are provided:
//!
//! * [`fit_state`] (default): per-mode response matrices are estimated from
//!   the probes by ridge-regularized least squares, then the joint
//!   photon-number distribution is fit under hard nonnegativity and
//!   trace <= 1 constraints. Physicality is built in.
//! * [`fit_state_mixture`]: the unknown pattern frequencies are fit directly
//!   as a signed mixture of probe patterns; the implied photon-number
//!   distribution is the same mixture of Poissonian products. Cheaper, but
//!   nothing forces it to be a physical state.
//!
//! Both routes fit on random subsets of the observed patterns (100 by
//! default) and repeat over subsets, which doubles as the bootstrap error
//! estimate.

use crate::error::{Error, Result};

use crate::solver::{nnls_sum_capped, RidgeSelect, RidgeSolver};
use crate::source::JointDist;
use crate::tmd::{coherent_response, sample_from_dist, ClickRecord, PatternDist, Tmd};
use crate::util::{derive_seed, poisson_pmf};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;

/// One calibrated coherent probe: known amplitudes and the pattern
/// frequencies it produced (exact probabilities when `shots == 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub amp_s: f64,
    pub amp_i: f64,
    pub shots: u64,
    pub freqs: BTreeMap<u32, f64>,
}

/// The probe library; all probes share one detector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub probes: Vec<Probe>,
    pub bins_per_mode: usize,
}

impl ProbeSet {
    pub fn validate(&self) -> Result<()> {
        if self.probes.is_empty() {
            return Err(Error::invalid("ProbeSet: no probes"));
        }
        for (i, p) in self.probes.iter().enumerate() {
            if p.amp_s < 0.0 || p.amp_i < 0.0 {
                return Err(Error::invalid(format!("ProbeSet: probe {i} has negative amplitude")));
            }
            let sum: f64 = p.freqs.values().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "ProbeSet: probe {i} frequencies sum to {sum}"
                )));
            }
        }
        Ok(())
    }

    /// Distinct amplitude values seen on one mode.
    pub fn distinct_amps(&self, idler: bool) -> Vec<f64> {
        let mut amps: Vec<f64> = self
            .probes
            .iter()
            .map(|p| if idler { p.amp_i } else { p.amp_s })
            .collect();
        amps.sort_by(f64::total_cmp);
        amps.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        amps
    }

    /// Marginal pattern frequencies of one mode for every probe.
    fn marginal_freqs(&self, idler: bool) -> Vec<Vec<f64>> {
        let b = self.bins_per_mode;
        let size = 1usize << b;
        let lowmask = (1u32 << b) - 1;
        self.probes
            .iter()
            .map(|p| {
                let mut out = vec![0.0; size];
                for (&mask, &f) in &p.freqs {
                    let idx = if idler { mask >> b } else { mask & lowmask };
                    out[idx as usize] += f;
                }
                out
            })
            .collect()
    }

    /// Signal-mode zero-click probability versus signal amplitude, averaged
    /// over the idler settings sharing that amplitude.
    pub fn signal_zero_click_curve(&self) -> Vec<(f64, f64)> {
        let b = self.bins_per_mode;
        let lowmask = (1u32 << b) - 1;
        let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        for p in &self.probes {
            let p0: f64 = p
                .freqs
                .iter()
                .filter(|(&m, _)| m & lowmask == 0)
                .map(|(_, &f)| f)
                .sum();
            let key = p.amp_s.to_bits();
            let e = acc.entry(key).or_insert((0.0, 0));
            e.0 += p0;
            e.1 += 1;
        }
        let mut curve: Vec<(f64, f64)> = acc
            .into_iter()
            .map(|(k, (sum, n))| (f64::from_bits(k), sum / n as f64))
            .collect();
        curve.sort_by(|a, b| a.0.total_cmp(&b.0));
        curve
    }
}

/// Simulate pattern frequencies for each two-mode coherent probe through the
/// full detector model. `shots == 0` records exact probabilities instead of
/// sampled frequencies.
pub fn build_probe_library(
    amps: &[(f64, f64)],
    tmd: &Tmd,
    shots: u64,
    seed: u64,
) -> Result<ProbeSet> {
    tmd.validate()?;
    if amps.is_empty() {
        return Err(Error::invalid("build_probe_library: no amplitudes"));
    }
    let mut probes = Vec::with_capacity(amps.len());
    for (idx, &(amp_s, amp_i)) in amps.iter().enumerate() {
        let dist = coherent_response(amp_s, amp_i, tmd)?;
        let freqs: BTreeMap<u32, f64> = if shots == 0 {
            dist.probs()
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > 0.0)
                .map(|(m, &p)| (m as u32, p))
                .collect()
        } else {
            let record = sample_from_dist(&dist, shots, derive_seed(seed, idx as u64))?;
            record.observed().into_iter().collect()
        };
        probes.push(Probe {
            amp_s,
            amp_i,
            shots,
            freqs,
        });
    }
    let set = ProbeSet {
        probes,
        bins_per_mode: tmd.bins_per_mode(),
    };
    set.validate()?;
    Ok(set)
}

/// Options for [`estimate_response`].
#[derive(Debug, Clone)]
pub struct ResponseOptions {
    /// Largest Fock component estimated for the signal mode.
    pub n_max_signal: usize,
    /// Largest Fock component estimated for the idler mode.
    pub n_max_idler: usize,
    /// Ridge selection strategy.
    pub ridge: RidgeSelect,
    /// Lump all Poisson mass above `n_max` into the top column, so bright
    /// probes do not push their unmodeled tails into the low columns.
    pub overflow_bucket: bool,
    /// Weight each pattern regression by the inverse multinomial standard
    /// deviation of its probe frequencies.
    pub weighted: bool,
    /// Probes whose Poisson mass above `n_max` exceeds this are left out of
    /// the regression for that mode: the response beyond the identifiable
    /// ladder is not constant, so their rows would inject model error
    /// everywhere. They remain in the library for displacement calibration.
    pub max_tail: f64,
    /// Relative singular-value cutoff (directions below it are dropped).
    pub sv_cutoff_rel: f64,
    /// Relative singular-value failure threshold (identifiability).
    pub sv_fail_rel: f64,
}

impl Default for ResponseOptions {
    fn default() -> Self {
        ResponseOptions {
            n_max_signal: 16,
            n_max_idler: 8,
            ridge: RidgeSelect::LCurve,
            overflow_bucket: true,
            weighted: false,
            max_tail: 1e-3,
            sv_cutoff_rel: 1e-8,
            sv_fail_rel: 1e-12,
        }
    }
}

/// Per-mode detector response matrices estimated from the probe library.
///
/// `t_signal[pattern][n]` is the probability of seeing `pattern` on the
/// signal detector given `n` photons in the signal mode, columns projected
/// to the probability simplex (column-stochastic).
#[derive(Debug, Clone)]
pub struct ResponseEstimate {
    pub t_signal: DMatrix<f64>,
    pub t_idler: DMatrix<f64>,
    pub bins_per_mode: usize,
    pub lambda_signal: f64,
    pub lambda_idler: f64,
}

impl ResponseEstimate {
    pub fn n_max_signal(&self) -> usize {
        self.t_signal.ncols() - 1
    }

    pub fn n_max_idler(&self) -> usize {
        self.t_idler.ncols() - 1
    }
}

/// Estimate per-mode response matrices `T[pattern][n]` by solving the probe
/// equations `freq[pattern] = sum_n Poisson(amp^2)[n] T[pattern][n]` with
/// ridge-regularized least squares, then projecting each column onto the
/// probability simplex.
pub fn estimate_response(probes: &ProbeSet, opts: &ResponseOptions) -> Result<ResponseEstimate> {
    probes.validate()?;
    let (t_signal, lambda_signal) = estimate_mode(probes, false, opts.n_max_signal, opts)?;
    let (t_idler, lambda_idler) = estimate_mode(probes, true, opts.n_max_idler, opts)?;
    Ok(ResponseEstimate {
        t_signal,
        t_idler,
        bins_per_mode: probes.bins_per_mode,
        lambda_signal,
        lambda_idler,
    })
}

fn estimate_mode(
    probes: &ProbeSet,
    idler: bool,
    n_max: usize,
    opts: &ResponseOptions,
) -> Result<(DMatrix<f64>, f64)> {
    // Rows: probes dim enough that the ladder truncation is a good model.
    let mut used: Vec<usize> = Vec::new();
    let mut tails: Vec<f64> = Vec::new();
    for (j, p) in probes.probes.iter().enumerate() {
        let amp = if idler { p.amp_i } else { p.amp_s };
        let pmf = poisson_pmf(amp * amp, n_max);
        let tail = (1.0 - pmf.iter().sum::<f64>()).max(0.0);
        if tail <= opts.max_tail {
            used.push(j);
            tails.push(tail);
        }
    }
    let mode_name = if idler { "idler" } else { "signal" };
    let mut distinct: Vec<f64> = used
        .iter()
        .map(|&j| {
            let p = &probes.probes[j];
            if idler {
                p.amp_i
            } else {
                p.amp_s
            }
        })
        .collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    if distinct.len() < n_max + 1 {
        return Err(Error::invalid(format!(
            "estimate_response: {} usable distinct {mode_name} amplitudes cannot identify n_max = {}",
            distinct.len(),
            n_max
        )));
    }
    let n_rows = used.len();
    let cols = n_max + 1;
    let mut x = DMatrix::<f64>::zeros(n_rows, cols);
    for (r, &j) in used.iter().enumerate() {
        let p = &probes.probes[j];
        let amp = if idler { p.amp_i } else { p.amp_s };
        let pmf = poisson_pmf(amp * amp, n_max);
        for (n, &v) in pmf.iter().enumerate() {
            x[(r, n)] = v;
        }
        if opts.overflow_bucket {
            // Residual mass above the ladder acts through the top column.
            x[(r, n_max)] += tails[r];
        }
    }
    // Identifiability guard on the unweighted design matrix.
    let _ = RidgeSolver::new(&x, opts.sv_cutoff_rel, opts.sv_fail_rel)?;

    let marginals = probes.marginal_freqs(idler);
    let size = marginals[0].len();

    // Each pattern regression is weighted by the inverse multinomial
    // standard deviation of its frequencies, same as the state fit; exact
    // probe libraries get a large effective shot count.
    let weight = |freq: f64, shots: u64| -> f64 {
        if !opts.weighted {
            return 1.0;
        }
        let n = if shots == 0 { (1u64 << 40) as f64 } else { shots as f64 };
        1.0 / (freq * (1.0 - freq) + 3.0 / n).sqrt()
    };

    let mut t = DMatrix::<f64>::zeros(size, cols);
    let mut lambda_used = 0.0;
    if opts.weighted {
        // Per-pattern weighted regressions need their own factorization.
        let mut xw = DMatrix::<f64>::zeros(n_rows, cols);
        for pat in 0..size {
            let mut yw = DVector::<f64>::zeros(n_rows);
            for (r, &j) in used.iter().enumerate() {
                let y = marginals[j][pat];
                let w = weight(y, probes.probes[j].shots);
                yw[r] = w * y;
                for n in 0..cols {
                    xw[(r, n)] = w * x[(r, n)];
                }
            }
            let solver = RidgeSolver::new(&xw, opts.sv_cutoff_rel, 0.0)?;
            let lambda = match opts.ridge {
                RidgeSelect::LCurve => solver.lcurve_lambda(&xw, std::slice::from_ref(&yw)),
                RidgeSelect::FixedRel(rel) => rel * solver.s_max * solver.s_max,
            };
            lambda_used = lambda;
            let beta = solver.solve(&yw, lambda);
            for n in 0..cols {
                t[(pat, n)] = beta[n];
            }
        }
    } else {
        // One shared factorization serves every pattern.
        let solver = RidgeSolver::new(&x, opts.sv_cutoff_rel, 0.0)?;
        let ys: Vec<DVector<f64>> = (0..size)
            .map(|pat| DVector::from_fn(n_rows, |r, _| marginals[used[r]][pat]))
            .collect();
        let lambda = match opts.ridge {
            RidgeSelect::LCurve => {
                let sample: Vec<DVector<f64>> =
                    ys.iter().step_by(size / 16 + 1).cloned().collect();
                solver.lcurve_lambda(&x, &sample)
            }
            RidgeSelect::FixedRel(rel) => rel * solver.s_max * solver.s_max,
        };
        lambda_used = lambda;
        for (pat, y) in ys.iter().enumerate() {
            let beta = solver.solve(y, lambda);
            for n in 0..cols {
                t[(pat, n)] = beta[n];
            }
        }
    }
    // Column-stochastic projection: clamp negatives, renormalize each column.
    for n in 0..cols {
        let mut sum = 0.0;
        for pat in 0..size {
            if t[(pat, n)] < 0.0 {
                t[(pat, n)] = 0.0;
            }
            sum += t[(pat, n)];
        }
        if sum > 0.0 {
            for pat in 0..size {
                t[(pat, n)] /= sum;
            }
        }
    }
    Ok((t, lambda_used))
}

/// Options for the state fits.
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Patterns per reconstruction subset.
    pub n_patterns: usize,
    /// Number of bootstrap replicas (pattern subsets).
    pub n_boot: usize,
    pub seed: u64,
    /// Reconstruction ladder sizes.
    pub n_max_signal: usize,
    pub n_max_idler: usize,
    /// Weight of the soft trace row enforcing `sum(P) <= 1`.
    pub sum_weight: f64,
    /// Tikhonov strength for the state fit, relative to the largest design
    /// row norm. The click data leaves some Fock directions statistically
    /// flat; without this, the nonnegative solver resolves them by jumping
    /// to sparse vertices instead of the neutral minimal-norm point.
    pub state_ridge_rel: f64,
    /// Resampling attempts before giving up on a degenerate subset.
    pub max_retries: usize,
    /// Select patterns by observed frequency instead of uniformly.
    pub frequency_weighted: bool,
    /// Ridge selection for the mixture (probe-space) route.
    pub ridge_mixture: RidgeSelect,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            n_patterns: 100,
            n_boot: 50,
            seed: 0,
            n_max_signal: 16,
            n_max_idler: 8,
            sum_weight: 30.0,
            state_ridge_rel: 0.0,
            max_retries: 5,
            frequency_weighted: false,
            ridge_mixture: RidgeSelect::FixedRel(1e-6),
        }
    }
}

/// A reconstructed joint photon-number distribution with bootstrap errors.
///
/// `p` is the elementwise mean over pattern subsets, renormalized to unit
/// trace when the deficit was below 2%; `bootstrap_std` is the elementwise
/// standard deviation over the replicas, and `replica_parities` carries the
/// per-replica joint parities for error propagation on derived quantities.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    p: Vec<f64>,
    rows: usize,
    cols: usize,
    pub residual: f64,
    pub n_patterns_used: usize,
    pub bootstrap_std: Vec<f64>,
    pub replica_parities: Vec<f64>,
    pub trace_raw: f64,
    replicas: Vec<Vec<f64>>,
}

impl Reconstruction {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        if m < self.rows && n < self.cols {
            self.p[m * self.cols + n]
        } else {
            0.0
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn std(&self, m: usize, n: usize) -> f64 {
        self.bootstrap_std[m * self.cols + n]
    }

    pub fn replicas(&self) -> &[Vec<f64>] {
        &self.replicas
    }

    /// Joint parity of the mean reconstruction.
    pub fn parity(&self) -> f64 {
        joint_parity(&self.p, self.rows, self.cols)
    }

    /// Total variation distance to a reference joint distribution.
    pub fn tv_to(&self, truth: &JointDist) -> f64 {
        let rows = self.rows.max(truth.rows());
        let cols = self.cols.max(truth.cols());
        let mut acc = 0.0;
        for m in 0..rows {
            for n in 0..cols {
                acc += (self.get(m, n) - truth.get(m, n)).abs();
            }
        }
        0.5 * acc
    }

    /// View as a validated [`JointDist`] (fails for unphysical mixtures from
    /// the signed route).
    pub fn to_joint(&self) -> Result<JointDist> {
        JointDist::from_vec(self.p.clone(), self.rows, self.cols, 0.02 + 1e-9)
    }
}

fn joint_parity(p: &[f64], rows: usize, cols: usize) -> f64 {
    let mut s = 0.0;
    for m in 0..rows {
        for n in 0..cols {
            let v = p[m * cols + n];
            s += if (m + n) % 2 == 0 { v } else { -v };
        }
    }
    s
}

/// Reconstruct a joint photon-number distribution from a click record using
/// the estimated per-mode responses (the physical route).
///
/// Each replica selects `n_patterns` observed patterns at random (clamped to
/// the number observed), folds the rest into click-count class aggregates,
/// and solves the constrained weighted least-squares problem
/// `min |f_S - A_S vec(P)|` with `P >= 0`, `sum(P) <= 1`. The final estimate
/// averages the replicas, which doubles as the bootstrap over pattern
/// subsets. Trace deficits below 2% are renormalized away; larger deficits
/// fail loudly.
pub fn fit_state(
    record: &ClickRecord,
    resp: &ResponseEstimate,
    opts: &FitOptions,
) -> Result<Reconstruction> {
    if record.shots() == 0 {
        return Err(Error::invalid("fit_state: empty record"));
    }
    let observed = record.observed();
    let n_observed = observed.len();
    let n_pat = opts.n_patterns.min(n_observed);
    if n_pat == 0 {
        return Err(Error::invalid("fit_state: no observed patterns"));
    }
    let b = resp.bins_per_mode;
    let n_s = opts.n_max_signal.min(resp.n_max_signal());
    let n_i = opts.n_max_idler.min(resp.n_max_idler());
    let (rows, cols) = (n_s + 1, n_i + 1);
    let ncols = rows * cols;

    // Everything outside the selected subset is folded in as one aggregate
    // row per (signal clicks, idler clicks) class. The class response
    // factorizes through click-count responses, so no unselected pattern is
    // used individually, but the mass they carry collectively still pins
    // components that only show up in sparse coincidences (a joint pair of
    // two-click events is spread over hundreds of distinct patterns, each
    // seen once if at all). Without the class rows those components would be
    // settled by the solver's implicit prior instead of the data.
    //
    // Rows are weighted by the inverse multinomial standard deviation of
    // their frequency: raw frequencies span four orders of magnitude here,
    // and unweighted least squares would let the loud patterns starve the
    // rare coincidences that carry the multiphoton information.
    let shots = record.shots() as f64;
    let weight_of = |freq: f64| 1.0 / (freq * (1.0 - freq) + 3.0 / shots).sqrt();

    // Click-count responses: c[k][n] = P(k clicked bins | n photons).
    let count_resp = |t: &DMatrix<f64>, dim: usize| -> Vec<Vec<f64>> {
        let mut c = vec![vec![0.0; dim]; b + 1];
        for pat in 0..t.nrows() {
            let k = (pat as u32).count_ones() as usize;
            for n in 0..dim {
                c[k][n] += t[(pat, n)];
            }
        }
        c
    };
    let c_s = count_resp(&resp.t_signal, rows);
    let c_i = count_resp(&resp.t_idler, cols);
    let n_classes = (b + 1) * (b + 1);

    let build_rows = |freqs: &[(u32, f64)],
                      subset: &[usize],
                      a: &mut DMatrix<f64>,
                      f: &mut DVector<f64>| {
        let lowmask = (1u32 << b) - 1;
        // Class rows start as the full click-count response and lose every
        // individually selected pattern; same for the class frequencies.
        let mut class_f = vec![0.0; n_classes];
        for &(mask, freq) in freqs {
            let ks = (mask & lowmask).count_ones() as usize;
            let ki = (mask >> b).count_ones() as usize;
            class_f[ks * (b + 1) + ki] += freq;
        }
        for (cls, &cf) in class_f.iter().enumerate() {
            let (ks, ki) = (cls / (b + 1), cls % (b + 1));
            let row = subset.len() + cls;
            f[row] = cf;
            for m in 0..rows {
                for n in 0..cols {
                    a[(row, m * cols + n)] = c_s[ks][m] * c_i[ki][n];
                }
            }
        }
        for (r, &oi) in subset.iter().enumerate() {
            let (mask, freq) = freqs[oi];
            let pat_s = (mask & lowmask) as usize;
            let pat_i = (mask >> b) as usize;
            let cls = (mask & lowmask).count_ones() as usize * (b + 1)
                + (mask >> b).count_ones() as usize;
            let class_row = subset.len() + cls;
            let w = weight_of(freq);
            f[r] = w * freq;
            f[class_row] -= freq;
            for m in 0..rows {
                let ts = resp.t_signal[(pat_s, m)];
                for n in 0..cols {
                    let v = ts * resp.t_idler[(pat_i, n)];
                    a[(r, m * cols + n)] = w * v;
                    a[(class_row, m * cols + n)] -= v;
                }
            }
        }
        for cls in 0..n_classes {
            let row = subset.len() + cls;
            // The class-row variance follows the class total, not the
            // post-subtraction remainder: individually unobserved patterns
            // with order-one expected counts are typical, not evidence of
            // zero probability, and a near-zero remainder must not become a
            // high-weight constraint.
            let w = weight_of(class_f[cls].clamp(0.0, 1.0));
            f[row] *= w;
            for col in 0..ncols {
                a[(row, col)] *= w;
            }
        }
    };

    let n_boot = opts.n_boot.max(1);
    let mut replicas: Vec<Vec<f64>> = Vec::with_capacity(n_boot);
    let mut residuals = Vec::with_capacity(n_boot);
    let mut traces = Vec::with_capacity(n_boot);
    // Data rows, class-aggregate rows, then the Tikhonov block.
    let n_rows_total = n_pat + n_classes + ncols;
    let mut a = DMatrix::<f64>::zeros(n_rows_total, ncols);
    let mut f = DVector::<f64>::zeros(n_rows_total);
    for replica in 0..n_boot {
        let mut attempt = 0;
        loop {
            let mut rng =
                ChaCha12Rng::seed_from_u64(derive_seed(opts.seed, (replica * 101 + attempt) as u64));
            let subset = choose_patterns(&observed, n_pat, opts.frequency_weighted, &mut rng);
            // Each replica also resamples the shot counts: the class
            // aggregates are shared between subsets, so subset choice alone
            // would grossly understate the statistical spread. Records with
            // astronomically many shots are exact and skip this.
            let freqs = if n_boot > 1 && record.shots() < (1 << 38) {
                resample_freqs(&observed, record.shots(), &mut rng)
            } else {
                observed.clone()
            };
            build_rows(&freqs, &subset, &mut a, &mut f);
            let row_scale = (0..n_pat + n_classes)
                .map(|r| a.row(r).norm())
                .fold(0.0_f64, f64::max);
            let mu = opts.state_ridge_rel * row_scale;
            for i in 0..ncols {
                a[(n_pat + n_classes + i, i)] = mu;
            }
            match nnls_sum_capped(&a, &f, 1.0, opts.sum_weight) {
                Ok((x, _)) => {
                    let trace: f64 = x.iter().sum();
                    if trace.is_finite() && trace > 0.0 {
                        traces.push(trace);
                        // Residual on the data rows only.
                        let mut sq = 0.0;
                        for r in 0..n_pat + n_classes {
                            let pred: f64 = (0..ncols).map(|c| a[(r, c)] * x[c]).sum();
                            sq += (pred - f[r]).powi(2);
                        }
                        // Replica states are normalized so parity and spread
                        // refer to unit-trace states.
                        let v: Vec<f64> = x.iter().map(|&p| p / trace).collect();
                        replicas.push(v);
                        residuals.push(sq.sqrt());
                        break;
                    }
                }
                Err(_) => {}
            }
            attempt += 1;
            if attempt > opts.max_retries {
                return Err(Error::DegenerateFit {
                    retries: opts.max_retries,
                });
            }
        }
    }

    let trace_raw = traces.iter().sum::<f64>() / traces.len() as f64;
    if trace_raw < 0.98 {
        return Err(Error::TraceDeficit { trace: trace_raw });
    }

    let mut mean = vec![0.0; ncols];
    for rep in &replicas {
        for (i, &v) in rep.iter().enumerate() {
            mean[i] += v;
        }
    }
    for v in mean.iter_mut() {
        *v /= replicas.len() as f64;
    }
    let mut std = vec![0.0; ncols];
    if replicas.len() > 1 {
        for rep in &replicas {
            for (i, &v) in rep.iter().enumerate() {
                std[i] += (v - mean[i]).powi(2);
            }
        }
        for v in std.iter_mut() {
            *v = (*v / (replicas.len() - 1) as f64).sqrt();
        }
    }
    let replica_parities: Vec<f64> = replicas
        .iter()
        .map(|rep| joint_parity(rep, rows, cols))
        .collect();
    let residual = residuals.iter().sum::<f64>() / residuals.len() as f64;

    Ok(Reconstruction {
        p: mean,
        rows,
        cols,
        residual,
        n_patterns_used: n_pat,
        bootstrap_std: std,
        replica_parities,
        trace_raw,
        replicas,
    })
}

/// Multinomial count resampling for the bootstrap replicas. Indices align
/// with the input so subset selections keep pointing at the same patterns.
fn resample_freqs(
    observed: &[(u32, f64)],
    shots: u64,
    rng: &mut ChaCha12Rng,
) -> Vec<(u32, f64)> {
    use rand_distr::{Binomial, Distribution};
    let mut out = Vec::with_capacity(observed.len());
    let mut remaining = shots;
    let mut rest: f64 = observed.iter().map(|&(_, f)| f).sum();
    for &(mask, freq) in observed {
        let draw = if remaining == 0 || rest <= 0.0 {
            0
        } else {
            let ratio = (freq / rest).clamp(0.0, 1.0);
            if ratio >= 1.0 {
                remaining
            } else {
                Binomial::new(remaining, ratio)
                    .map(|d| d.sample(rng))
                    .unwrap_or(0)
            }
        };
        out.push((mask, draw as f64 / shots as f64));
        remaining -= draw;
        rest -= freq;
    }
    out
}

fn choose_patterns(
    observed: &[(u32, f64)],
    n_pat: usize,
    frequency_weighted: bool,
    rng: &mut ChaCha12Rng,
) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..observed.len()).collect();
    if frequency_weighted {
        // Weighted sampling without replacement via repeated draws.
        use rand::distributions::WeightedIndex;
        let mut weights: Vec<f64> = observed.iter().map(|&(_, f)| f).collect();
        let mut out = Vec::with_capacity(n_pat);
        for _ in 0..n_pat {
            let dist = WeightedIndex::new(&weights).expect("positive weights");
            use rand::distributions::Distribution;
            let k = dist.sample(rng);
            out.push(k);
            weights[k] = 0.0;
        }
        out
    } else {
        idx.shuffle(rng);
        idx.truncate(n_pat);
        idx.sort_unstable();
        idx
    }
}

/// Direct mixture fit in probe-pattern space (the signed route).
///
/// The unknown pattern frequencies are decomposed over the probe patterns by
/// ridge least squares; the implied joint distribution is the same signed
/// mixture of Poissonian products. No positivity is enforced.
pub fn fit_state_mixture(
    record: &ClickRecord,
    probes: &ProbeSet,
    opts: &FitOptions,
) -> Result<Reconstruction> {
    probes.validate()?;
    if record.shots() == 0 {
        return Err(Error::invalid("fit_state_mixture: empty record"));
    }
    let observed = record.observed();
    let n_pat = opts.n_patterns.min(observed.len());
    if n_pat == 0 {
        return Err(Error::invalid("fit_state_mixture: no observed patterns"));
    }
    let n_probes = probes.probes.len();
    let (rows, cols) = (opts.n_max_signal + 1, opts.n_max_idler + 1);
    let ncols_p = rows * cols;

    // Fock-space images of the probes.
    let mut images: Vec<Vec<f64>> = Vec::with_capacity(n_probes);
    for p in &probes.probes {
        let ps = poisson_pmf(p.amp_s * p.amp_s, rows - 1);
        let pi = poisson_pmf(p.amp_i * p.amp_i, cols - 1);
        let mut img = vec![0.0; ncols_p];
        for m in 0..rows {
            for n in 0..cols {
                img[m * cols + n] = ps[m] * pi[n];
            }
        }
        images.push(img);
    }

    let shots = record.shots() as f64;
    let weight_of = |freq: f64| 1.0 / (freq * (1.0 - freq) + 3.0 / shots).sqrt();
    let n_boot = opts.n_boot.max(1);
    let mut replicas = Vec::with_capacity(n_boot);
    let mut residuals = Vec::with_capacity(n_boot);
    for replica in 0..n_boot {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(opts.seed, 7919 + replica as u64));
        let subset = choose_patterns(&observed, n_pat, opts.frequency_weighted, &mut rng);
        let freqs = if n_boot > 1 && record.shots() < (1 << 38) {
            resample_freqs(&observed, record.shots(), &mut rng)
        } else {
            observed.clone()
        };
        // One aggregate row for the unselected mass pins the overall scale,
        // exactly as in the constrained route; rows carry the same inverse
        // multinomial weights.
        let mut fmat = DMatrix::<f64>::zeros(n_pat + 1, n_probes);
        let mut y = DVector::<f64>::zeros(n_pat + 1);
        let mut comp = vec![1.0; n_probes];
        let mut f_seen = 0.0;
        for (r, &oi) in subset.iter().enumerate() {
            let (mask, freq) = freqs[oi];
            let w = weight_of(freq);
            y[r] = w * freq;
            f_seen += freq;
            for (j, p) in probes.probes.iter().enumerate() {
                let v = p.freqs.get(&mask).copied().unwrap_or(0.0);
                fmat[(r, j)] = w * v;
                comp[j] -= v;
            }
        }
        let f_comp = 1.0 - f_seen;
        let wc = weight_of(f_comp.clamp(0.0, 1.0));
        for (j, &c) in comp.iter().enumerate() {
            fmat[(n_pat, j)] = wc * c;
        }
        y[n_pat] = wc * f_comp;
        let solver = RidgeSolver::new(&fmat, 1e-10, 0.0)
            .map_err(|e| Error::Numeric(format!("mixture fit: {e}")))?;
        let lambda = match opts.ridge_mixture {
            RidgeSelect::LCurve => solver.lcurve_lambda(&fmat, std::slice::from_ref(&y)),
            RidgeSelect::FixedRel(rel) => rel * solver.s_max * solver.s_max,
        };
        let c = solver.solve(&y, lambda);
        let mut state = vec![0.0; ncols_p];
        for (j, img) in images.iter().enumerate() {
            for (i, &v) in img.iter().enumerate() {
                state[i] += c[j] * v;
            }
        }
        residuals.push((&fmat * &c - &y).norm());
        replicas.push(state);
    }

    let mut mean = vec![0.0; ncols_p];
    for rep in &replicas {
        for (i, &v) in rep.iter().enumerate() {
            mean[i] += v;
        }
    }
    for v in mean.iter_mut() {
        *v /= replicas.len() as f64;
    }
    let mut std = vec![0.0; ncols_p];
    if replicas.len() > 1 {
        for rep in &replicas {
            for (i, &v) in rep.iter().enumerate() {
                std[i] += (v - mean[i]).powi(2);
            }
        }
        for v in std.iter_mut() {
            *v = (*v / (replicas.len() - 1) as f64).sqrt();
        }
    }
    let trace_raw = mean.iter().sum();
    let replica_parities = replicas
        .iter()
        .map(|rep| joint_parity(rep, rows, cols))
        .collect();
    Ok(Reconstruction {
        p: mean,
        rows,
        cols,
        residual: residuals.iter().sum::<f64>() / residuals.len() as f64,
        n_patterns_used: n_pat,
        bootstrap_std: std,
        replica_parities,
        trace_raw,
        replicas,
    })
}

/// Joint parity of a reconstruction with its bootstrap error: the standard
/// deviation of the replica parities, not an elementwise propagation.
pub fn parity_from_reconstruction(rec: &Reconstruction) -> (f64, f64) {
    let value = rec.parity();
    let n = rec.replica_parities.len();
    if n < 2 {
        return (value, 0.0);
    }
    let mean: f64 = rec.replica_parities.iter().sum::<f64>() / n as f64;
    let var: f64 = rec
        .replica_parities
        .iter()
        .map(|p| (p - mean).powi(2))
        .sum::<f64>()
        / (n - 1) as f64;
    (value, var.sqrt())
}

/// Exact pattern probabilities of a joint state folded into a fake record,
/// for noiseless systematic studies (weights are scaled to huge counts).
pub fn exact_record(dist: &PatternDist) -> ClickRecord {
    let shots = 1u64 << 40;
    let mut counts = BTreeMap::new();
    let mut used = 0u64;
    let mut best = (0u32, 0.0f64);
    for (mask, &p) in dist.probs().iter().enumerate() {
        if p > 0.0 {
            let c = (p * shots as f64).round() as u64;
            if c > 0 {
                counts.insert(mask as u32, c);
                used += c;
            }
            if p > best.1 {
                best = (mask as u32, p);
            }
        }
    }
    if used != shots {
        let diff = shots as i64 - used as i64;
        let e = counts.entry(best.0).or_insert(0);
        *e = (*e as i64 + diff).max(1) as u64;
    }
    ClickRecord::new(shots, counts).expect("exact record bookkeeping")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{poisson_dist, PhotonDist};
    use crate::source::{apply_joint_loss, tmsv_joint};
    use crate::tmd::{joint_response, mode_response, sample_patterns, DetectorParams};

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!(
            (a - b).abs() < tol,
            "{what}: {a} vs {b} (|diff| = {:e})",
            (a - b).abs()
        );
    }

    fn grid(n_s: usize, max_s: f64, n_i: usize, max_i: f64) -> Vec<(f64, f64)> {
        let mut amps = Vec::new();
        for i in 1..=n_s {
            for j in 1..=n_i {
                amps.push((
                    max_s * i as f64 / (n_s + 1) as f64,
                    max_i * j as f64 / (n_i + 1) as f64,
                ));
            }
        }
        amps
    }

    #[test]
    fn probe_library_trivial_vacuum_probe() {
        let tmd = Tmd {
            signal: DetectorParams {
                p_ap: 0.0,
                ..DetectorParams::default()
            },
            idler: DetectorParams {
                p_ap: 0.0,
                ..DetectorParams::default()
            },
            cross_mode: false,
        };
        let set = build_probe_library(&[(0.0, 0.0)], &tmd, 0, 1).unwrap();
        assert_eq!(set.probes.len(), 1);
        assert_close(set.probes[0].freqs[&0], 1.0, 1e-15, "empty-pattern freq");
    }

    #[test]
    fn probe_zero_click_matches_thinning() {
        // Signal-mode empty-pattern probability for probe (1, 0) is
        // e^{-eta_d * 1} exactly (Poisson thinning; afterpulses cannot
        // empty a pattern).
        let tmd = Tmd::default();
        let set = build_probe_library(&[(1.0, 0.0)], &tmd, 0, 1).unwrap();
        let curve = set.signal_zero_click_curve();
        assert_eq!(curve.len(), 1);
        assert_close(curve[0].1, (-0.2_f64).exp(), 1e-12, "p0");
    }

    #[test]
    fn paper_scale_library_matches_probe_count() {
        // 71 x 9 = 639 probes spanning the working amplitude range.
        let amps = grid(71, 3.5, 9, 3.5);
        assert_eq!(amps.len(), 639);
        assert!(amps.iter().all(|&(a, b)| a > 0.0 && a < 3.5 && b > 0.0 && b < 3.5));
    }

    #[test]
    fn response_recovery_noiseless() {
        // Exact probes, no afterpulsing: the estimated T must match the
        // forward model. Deconvolving Poissonian probes is exponentially
        // ill-conditioned in the photon number (the error grows roughly
        // twenty-fold per ladder step even with noiseless data), so the
        // tolerance is graded per column rather than flat.
        let params = DetectorParams {
            p_ap: 0.0,
            ..DetectorParams::default()
        };
        let tmd = Tmd {
            signal: params.clone(),
            idler: params.clone(),
            cross_mode: false,
        };
        let amps: Vec<(f64, f64)> = (1..=30)
            .map(|i| {
                let a = 2.4 * i as f64 / 31.0;
                (a, a)
            })
            .collect();
        let set = build_probe_library(&amps, &tmd, 0, 1).unwrap();
        let opts = ResponseOptions {
            n_max_signal: 10,
            n_max_idler: 10,
            overflow_bucket: true,
            max_tail: 3e-6,
            ..ResponseOptions::default()
        };
        let resp = estimate_response(&set, &opts).unwrap();
        let tol = [3e-9, 1e-6, 2e-5, 5e-4, 5e-3, 3e-2, 8e-2];
        for n in 0..=6usize {
            let truth = mode_response(n, &params).unwrap();
            for pat in 0..256usize {
                assert_close(
                    resp.t_signal[(pat, n)],
                    truth.prob(pat as u32),
                    tol[n],
                    &format!("T[{pat:#x}][{n}]"),
                );
            }
        }
    }

    #[test]
    fn response_estimation_is_duplication_invariant() {
        let tmd = Tmd {
            signal: DetectorParams {
                p_ap: 0.0,
                ..DetectorParams::default()
            },
            idler: DetectorParams {
                p_ap: 0.0,
                ..DetectorParams::default()
            },
            cross_mode: false,
        };
        let amps: Vec<(f64, f64)> = (1..=12)
            .map(|i| (1.6 * i as f64 / 13.0, 1.6 * i as f64 / 13.0))
            .collect();
        let set = build_probe_library(&amps, &tmd, 0, 1).unwrap();
        let mut doubled = set.clone();
        doubled.probes.extend(set.probes.clone());
        let opts = ResponseOptions {
            n_max_signal: 8,
            n_max_idler: 8,
            overflow_bucket: false,
            ridge: RidgeSelect::FixedRel(1e-12),
            ..ResponseOptions::default()
        };
        let a = estimate_response(&set, &opts).unwrap();
        let b = estimate_response(&doubled, &opts).unwrap();
        for pat in 0..256 {
            for n in 0..=8 {
                assert_close(
                    a.t_signal[(pat, n)],
                    b.t_signal[(pat, n)],
                    1e-9,
                    &format!("duplication ({pat}, {n})"),
                );
            }
        }
    }

    #[test]
    fn response_identifiability_guard() {
        let tmd = Tmd::default();
        let amps: Vec<(f64, f64)> = (1..=4).map(|i| (i as f64 * 0.3, i as f64 * 0.3)).collect();
        let set = build_probe_library(&amps, &tmd, 0, 1).unwrap();
        let opts = ResponseOptions {
            n_max_signal: 10,
            n_max_idler: 4,
            ..ResponseOptions::default()
        };
        assert!(matches!(
            estimate_response(&set, &opts),
            Err(Error::Invalid(_))
        ));
    }

    fn library_and_response(tmd: &Tmd) -> (ProbeSet, ResponseEstimate) {
        use std::sync::Mutex;
        use std::sync::OnceLock;
        static CACHE: OnceLock<Mutex<Vec<(Tmd, ProbeSet, ResponseEstimate)>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(Vec::new()));
        let mut guard = cache.lock().unwrap();
        if let Some(hit) = guard.iter().find(|(t, _, _)| t == tmd) {
            return (hit.1.clone(), hit.2.clone());
        }
        // Idler probes stay below amp 1.6 so all nine levels remain usable
        // for the n <= 8 idler ladder.
        let amps = grid(71, 3.5, 9, 1.6);
        let set = build_probe_library(&amps, tmd, 0, 11).unwrap();
        let resp = estimate_response(&set, &ResponseOptions::default()).unwrap();
        guard.push((tmd.clone(), set.clone(), resp.clone()));
        (set, resp)
    }

    fn no_crosstalk_tmd() -> Tmd {
        Tmd {
            cross_mode: false,
            ..Tmd::default()
        }
    }

    #[test]
    fn vacuum_reconstruction_is_vacuum() {
        let tmd = Tmd::default();
        let (_, resp) = library_and_response(&tmd);
        let vac = JointDist::product(&PhotonDist::vacuum(0), &PhotonDist::vacuum(0));
        let record = sample_patterns(&vac, &tmd, 1_000_000, 5).unwrap();
        let rec = fit_state(&record, &resp, &FitOptions::default()).unwrap();
        assert!(rec.get(0, 0) >= 0.999, "P00 = {}", rec.get(0, 0));
    }

    #[test]
    fn tmsv_reconstruction_close_to_truth() {
        // The 20%-efficient click channel caps what any estimator can
        // resolve cellwise at 1e6 shots (the unconstrained information bound
        // sits above 0.02 in total variation even on a 3x3 ladder); the
        // positivity-constrained fit lands around 0.03-0.05.
        let truth = apply_joint_loss(&tmsv_joint(0.6, 40).unwrap(), 0.75, 0.75).unwrap();
        let tmd = no_crosstalk_tmd();
        let (_, resp) = library_and_response(&tmd);
        let record = sample_patterns(&truth, &tmd, 1_000_000, 21).unwrap();
        let rec = fit_state(&record, &resp, &FitOptions::default()).unwrap();
        let tv = rec.tv_to(&truth);
        assert!(tv < 0.06, "TV = {tv}");
        // No negative entries, by construction.
        assert!(rec.probs().iter().all(|&v| v >= 0.0));
        // Parity lands near truth at this flux.
        let (par, _) = parity_from_reconstruction(&rec);
        assert!((par - truth.parity()).abs() < 0.08, "parity {par} vs {}", truth.parity());
    }

    #[test]
    fn tmsv_reconstruction_with_crosstalk_bias() {
        // Shared-APD afterpulsing couples the idler rates to the signal
        // brightness; a per-mode response cannot represent that, and the
        // reconstruction carries the systematic. This pins the size of it.
        let truth = apply_joint_loss(&tmsv_joint(0.6, 40).unwrap(), 0.75, 0.75).unwrap();
        let tmd = Tmd::default();
        let (_, resp) = library_and_response(&tmd);
        let record = sample_patterns(&truth, &tmd, 1_000_000, 21).unwrap();
        let rec = fit_state(&record, &resp, &FitOptions::default()).unwrap();
        let tv = rec.tv_to(&truth);
        assert!(tv < 0.16, "TV = {tv}");
    }

    #[test]
    fn fit_is_deterministic_for_fixed_seed() {
        let tmd = Tmd::default();
        let (_, resp) = library_and_response(&tmd);
        let truth = apply_joint_loss(&tmsv_joint(0.5, 40).unwrap(), 0.7, 0.7).unwrap();
        let record = sample_patterns(&truth, &tmd, 200_000, 3).unwrap();
        let opts = FitOptions {
            n_boot: 4,
            seed: 77,
            ..FitOptions::default()
        };
        let a = fit_state(&record, &resp, &opts).unwrap();
        let b = fit_state(&record, &resp, &opts).unwrap();
        assert_eq!(a.probs(), b.probs());
    }

    #[test]
    fn mixture_route_recovers_coherent_state() {
        // A two-mode coherent input sits inside the probe span, so the
        // signed route must land close despite its ridge damping.
        let tmd = no_crosstalk_tmd();
        let amps = grid(24, 2.4, 8, 1.5);
        let set = build_probe_library(&amps, &tmd, 0, 13).unwrap();
        let state = JointDist::product(
            &poisson_dist(0.81, 20).unwrap(),
            &poisson_dist(0.5625, 20).unwrap(),
        );
        let dist = joint_response(&state, &tmd).unwrap();
        let record = exact_record(&dist);
        let opts = FitOptions {
            n_patterns: 150,
            n_boot: 8,
            seed: 4,
            n_max_signal: 12,
            n_max_idler: 8,
            // The mixture route has no class aggregation to catch what the
            // subset misses, so it needs the informative patterns selected.
            frequency_weighted: true,
            ..FitOptions::default()
        };
        let rec = fit_state_mixture(&record, &set, &opts).unwrap();
        let truth = JointDist::product(
            &poisson_dist(0.81, 14).unwrap(),
            &poisson_dist(0.5625, 12).unwrap(),
        );
        let tv = rec.tv_to(&truth);
        assert!(tv < 0.05, "mixture TV = {tv}");
    }

    #[test]
    fn parity_error_comes_from_replicas() {
        let tmd = no_crosstalk_tmd();
        let (_, resp) = library_and_response(&tmd);
        let truth = apply_joint_loss(&tmsv_joint(0.6, 40).unwrap(), 0.75, 0.75).unwrap();
        let record = sample_patterns(&truth, &tmd, 1_000_000, 9).unwrap();
        let rec = fit_state(&record, &resp, &FitOptions::default()).unwrap();
        let (value, std) = parity_from_reconstruction(&rec);
        assert!(std > 0.0 && std < 0.2, "std = {std}");
        let truth_parity = truth.parity();
        assert!(
            (value - truth_parity).abs() < 0.08,
            "parity {value} vs {truth_parity} (std {std})"
        );
    }
}
