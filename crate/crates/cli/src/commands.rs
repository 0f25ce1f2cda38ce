//! Subcommand implementations: simulate, reconstruct, figures, selftest.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use wignerlab_core::calib::{
    estimate_displacement, fit_afterpulse, fit_source, herald_components, herald_reconstruction,
    herald_signal, AfterpulseFit, CurveMode, Pipeline, SourceFit,
};
use wignerlab_core::config::ExperimentConfig;
use wignerlab_core::error::{Error, Result};
use wignerlab_core::fock::parity;
use wignerlab_core::io::{
    read_probe_library, read_record, write_json, write_probe_library, write_record,
    ProbeLibraryMeta, ReconstructionFile, RecordMeta,
};
use wignerlab_core::patterns::{build_probe_library, parity_from_reconstruction};
use wignerlab_core::tmd::{coherent_response, sample_from_dist, sample_patterns};
use wignerlab_core::util::derive_seed;

/// Tag an overlap value for file names: 0.7 -> "m070".
fn overlap_tag(overlap: f64) -> String {
    format!("m{:03}", (overlap * 100.0).round() as u32)
}

fn overlaps_of(cfg: &ExperimentConfig) -> Vec<f64> {
    let mut overlaps = vec![cfg.source.overlap];
    if cfg.source.overlap != 0.0 {
        overlaps.push(0.0);
    }
    overlaps
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ExperimentConfig,
    files: Vec<ManifestEntry>,
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex::encode(hasher.finalize()))
}

/// Write every synthetic data product for one experiment.
pub fn simulate(cfg: &ExperimentConfig) -> Result<()> {
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out.join("reference"))?;
    std::fs::create_dir_all(out.join("states"))?;
    let tmd = cfg.tmd();
    let mut files: Vec<PathBuf> = Vec::new();

    // Coherent probe library, sampled at the configured shot count.
    let probes = build_probe_library(
        &cfg.probe_grid.amplitudes(),
        &tmd,
        cfg.shots,
        derive_seed(cfg.seed, 0x0b5e),
    )?;
    let probe_path = out.join("probes.csv");
    write_probe_library(
        &probe_path,
        &probes,
        &ProbeLibraryMeta {
            shots: cfg.shots,
            detector_s: tmd.signal.clone(),
            detector_i: tmd.idler.clone(),
            cross_mode: tmd.cross_mode,
            bins_per_mode: tmd.bins_per_mode(),
        },
    )?;
    files.push(probe_path);
    files.push(out.join("probes.json"));

    // Reference beam alone at each displacement (zero-click calibration).
    for (i, &amp) in cfg.amps.iter().enumerate() {
        let dist = coherent_response(amp, 0.0, &tmd)?;
        let seed = derive_seed(cfg.seed, 0x2ef0 + i as u64);
        let record = sample_from_dist(&dist, cfg.shots, seed)?;
        let mut meta = RecordMeta::for_tmd(&tmd, cfg.shots, seed, "reference");
        meta.amp = Some(amp);
        let path = out.join(format!("reference/ref_{i:02}.csv"));
        write_record(&path, &record, &meta)?;
        files.push(path);
        files.push(out.join(format!("reference/ref_{i:02}.json")));
    }

    // Displaced source states for each overlap series, plus the undisplaced
    // record reused for the source fit.
    let pipeline = Pipeline::with_probes(cfg, probes)?;
    for &overlap in &overlaps_of(cfg) {
        let tag = overlap_tag(overlap);
        for (i, &amp) in cfg.amps.iter().enumerate() {
            let stream = 0x57a7_0000 + ((overlap * 100.0) as u64) * 64 + i as u64;
            let state = pipeline.forward_displaced(amp, overlap)?;
            let seed = derive_seed(cfg.seed, stream);
            let record = sample_patterns(&state, &tmd, cfg.shots, seed)?;
            let mut meta = RecordMeta::for_tmd(&tmd, cfg.shots, seed, "state");
            meta.amp = Some(amp);
            meta.overlap = Some(overlap);
            let path = out.join(format!("states/{tag}_{i:02}.csv"));
            write_record(&path, &record, &meta)?;
            files.push(path);
            files.push(out.join(format!("states/{tag}_{i:02}.json")));
        }
    }

    // Undisplaced source record for the (r, eta) fit.
    let state = pipeline.forward_displaced(0.0, cfg.source.overlap)?;
    let seed = derive_seed(cfg.seed, 0x9dc0);
    let record = sample_patterns(&state, &tmd, cfg.shots, seed)?;
    let meta = RecordMeta::for_tmd(&tmd, cfg.shots, seed, "pdc");
    let pdc_path = out.join("pdc.csv");
    write_record(&pdc_path, &record, &meta)?;
    files.push(pdc_path);
    files.push(out.join("pdc.json"));

    // Manifest with content hashes, sorted by path for stable bytes.
    let mut entries: Vec<ManifestEntry> = files
        .iter()
        .map(|p| {
            Ok(ManifestEntry {
                path: p
                    .strip_prefix(out)
                    .unwrap_or(p)
                    .to_string_lossy()
                    .into_owned(),
                sha256: sha256_hex(p)?,
            })
        })
        .collect::<Result<_>>()?;
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            config: cfg.clone(),
            files: entries,
        },
    )?;
    println!(
        "simulate: wrote {} probe settings and {} records under {}",
        cfg.probe_grid.amplitudes().len(),
        files.len() / 2 - 1,
        out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct FitsFile {
    displacements: Vec<DisplacementFit>,
    source: SourceFit,
    afterpulse: Option<AfterpulseFit>,
}

#[derive(Debug, Serialize)]
struct DisplacementFit {
    amp_configured: f64,
    amp_estimated: f64,
}

/// Calibrations, tomography, heralding and parity curves over a data
/// directory written by [`simulate`].
pub fn reconstruct(cfg: &ExperimentConfig, data: &Path) -> Result<()> {
    let probe_path = data.join("probes.csv");
    if !probe_path.exists() {
        return Err(Error::MissingData(format!(
            "{} (run `wignerlab simulate` first)",
            probe_path.display()
        )));
    }
    let (probes, _) = read_probe_library(&probe_path)?;
    let mut pipeline = Pipeline::with_probes(cfg, probes)?;
    std::fs::create_dir_all(data.join("recon"))?;

    // Displacement calibration from the reference-only records.
    let mut displacements = Vec::new();
    for (i, &amp) in cfg.amps.iter().enumerate() {
        let path = data.join(format!("reference/ref_{i:02}.csv"));
        if !path.exists() {
            return Err(Error::MissingData(path.display().to_string()));
        }
        let (record, _) = read_record(&path)?;
        let p0 = record.signal_marginal(cfg.detector_s.bins_per_mode).empty_freq();
        let amp_estimated = estimate_displacement(p0, &pipeline.probes)?;
        displacements.push(DisplacementFit {
            amp_configured: amp,
            amp_estimated,
        });
    }

    // Squeezing and coupling efficiency from the undisplaced record.
    let pdc_path = data.join("pdc.csv");
    if !pdc_path.exists() {
        return Err(Error::MissingData(pdc_path.display().to_string()));
    }
    let (pdc_record, _) = read_record(&pdc_path)?;
    let source_fit = fit_source(&pdc_record, &pipeline.tmd)?;

    // Afterpulse fraction from the displaced-state idler singles rates.
    let tag_main = overlap_tag(cfg.source.overlap);
    let mut singles = Vec::new();
    for (i, &amp) in cfg.amps.iter().enumerate() {
        let path = data.join(format!("states/{tag_main}_{i:02}.csv"));
        if !path.exists() {
            return Err(Error::MissingData(path.display().to_string()));
        }
        let (record, _) = read_record(&path)?;
        singles.push((amp * amp, record.idler_singles_frac(cfg.detector_s.bins_per_mode)));
    }
    let afterpulse = if singles.len() >= 3 {
        let fit = fit_afterpulse(&singles)?;
        pipeline.afterpulse = Some(fit.clone());
        Some(fit)
    } else {
        None
    };
    write_csv(
        &data.join("fig4_singles.csv"),
        "amp2,idler_singles_rate",
        singles.iter().map(|(a2, r)| format!("{a2},{r}")),
    )?;

    // Pattern tomography per displacement and overlap; parity curves and
    // heralded photon-number tables.
    let mut fig3 = Vec::new();
    let mut fig5 = Vec::new();
    let mut fig6 = Vec::new();
    for &overlap in &overlaps_of(cfg) {
        let tag = overlap_tag(overlap);
        for (i, &amp) in cfg.amps.iter().enumerate() {
            let path = data.join(format!("states/{tag}_{i:02}.csv"));
            if !path.exists() {
                return Err(Error::MissingData(path.display().to_string()));
            }
            let (record, _) = read_record(&path)?;
            let stream = 0xec0 + ((overlap * 100.0) as u64) * 64 + i as u64;
            let rec = pipeline.reconstruct(&record, stream)?;
            write_json(
                &data.join(format!("recon/{tag}_{i:02}.json")),
                &ReconstructionFile::from_reconstruction(&rec),
            )?;

            let (par, std) = parity_from_reconstruction(&rec);
            let forward = pipeline.forward_parity(amp, overlap, CurveMode::TwoModeDisplaced, 0.0)?;
            fig3.push(format!("{amp},{overlap},{par},{std},{forward}"));

            let x = pipeline.herald_fraction(amp);
            let h = herald_reconstruction(&rec, x)?;
            let forward_h = pipeline.forward_parity(amp, overlap, CurveMode::Heralded, x)?;
            fig5.push(format!(
                "{amp},{overlap},{},{},{forward_h}",
                h.parity, h.parity_std
            ));

            // Heralded photon-number tables for the three largest settings.
            if i + 3 >= cfg.amps.len() {
                let (dist, std) = herald_components(&rec, x)?;
                let truth = herald_signal(&pipeline.forward_displaced(amp, overlap)?, x)?;
                for n in 0..=dist.n_max().min(10) {
                    fig6.push(format!(
                        "{amp},{overlap},{n},{},{},{}",
                        dist.prob(n),
                        std.get(n).copied().unwrap_or(0.0),
                        truth.prob(n)
                    ));
                }
            }
        }
    }
    write_csv(
        &data.join("fig3_parity.csv"),
        "amp,overlap,parity,std,parity_forward",
        fig3.into_iter(),
    )?;
    write_csv(
        &data.join("fig5_heralded.csv"),
        "amp,overlap,parity,std,parity_forward",
        fig5.into_iter(),
    )?;
    write_csv(
        &data.join("fig6_pn.csv"),
        "amp,overlap,n,p,std,p_forward",
        fig6.into_iter(),
    )?;
    write_json(
        &data.join("fits.json"),
        &FitsFile {
            displacements,
            source: source_fit,
            afterpulse,
        },
    )?;
    println!("reconstruct: wrote parity curves, fits and reconstructions under {}", data.display());
    Ok(())
}

fn write_csv(
    path: &Path,
    header: &str,
    rows: impl Iterator<Item = String>,
) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(&row);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Parse a reconstruct-stage CSV into records of f64 columns.
fn read_csv(path: &Path, expect_header: &str) -> Result<Vec<Vec<f64>>> {
    if !path.exists() {
        return Err(Error::MissingData(path.display().to_string()));
    }
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 {
            if line.trim() != expect_header {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: 1,
                    msg: format!("expected header '{expect_header}'"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            msg: e.to_string(),
        })?);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "no data rows".into(),
        });
    }
    Ok(rows)
}

/// Tidy long-format CSV plus minimal SVG renderings of every curve.
pub fn figures(data: &Path) -> Result<()> {
    let fig3 = read_csv(&data.join("fig3_parity.csv"), "amp,overlap,parity,std,parity_forward")?;
    let fig4 = read_csv(&data.join("fig4_singles.csv"), "amp2,idler_singles_rate")?;
    let fig5 = read_csv(&data.join("fig5_heralded.csv"), "amp,overlap,parity,std,parity_forward")?;
    let fig6 = read_csv(&data.join("fig6_pn.csv"), "amp,overlap,n,p,std,p_forward")?;

    // Long format: figure, series, x, y, err.
    let mut long = Vec::new();
    for r in &fig3 {
        long.push(format!("two_mode_parity,M{:.2},{},{},{}", r[1], r[0], r[2], r[3]));
        long.push(format!("two_mode_parity_forward,M{:.2},{},{},0", r[1], r[0], r[4]));
    }
    for r in &fig4 {
        long.push(format!("idler_singles,rate,{},{},0", r[0], r[1]));
    }
    for r in &fig5 {
        long.push(format!("heralded_parity,M{:.2},{},{},{}", r[1], r[0], r[2], r[3]));
        long.push(format!("heralded_parity_forward,M{:.2},{},{},0", r[1], r[0], r[4]));
    }
    for r in &fig6 {
        long.push(format!("heralded_pn,M{:.2}_amp{:.2}_n{},{},{},{}", r[1], r[0], r[2], r[2], r[3], r[4]));
    }
    write_csv(
        &data.join("figures_long.csv"),
        "figure,series,x,y,err",
        long.into_iter(),
    )?;

    let split_series = |rows: &[Vec<f64>]| -> Vec<crate::svg::Series> {
        let mut by_overlap: BTreeMap<u64, crate::svg::Series> = BTreeMap::new();
        for r in rows {
            let key = (r[1] * 100.0).round() as u64;
            let entry = by_overlap.entry(key).or_insert_with(|| crate::svg::Series {
                label: format!("M = {:.2}", r[1]),
                points: Vec::new(),
                errors: Vec::new(),
                line: false,
            });
            entry.points.push((r[0], r[2]));
            entry.errors.push(r[3]);
            let fkey = key + 1000;
            let fentry = by_overlap.entry(fkey).or_insert_with(|| crate::svg::Series {
                label: format!("M = {:.2} model", r[1]),
                points: Vec::new(),
                errors: Vec::new(),
                line: true,
            });
            fentry.points.push((r[0], r[4]));
            fentry.errors.push(0.0);
        }
        by_overlap.into_values().collect()
    };

    std::fs::write(
        data.join("fig3.svg"),
        crate::svg::line_chart("Two-mode parity vs displacement", "|alpha|", "parity", &split_series(&fig3)),
    )?;
    let fig4_series = vec![crate::svg::Series {
        label: "idler singles".into(),
        points: fig4.iter().map(|r| (r[0], r[1])).collect(),
        errors: vec![0.0; fig4.len()],
        line: false,
    }];
    std::fs::write(
        data.join("fig4.svg"),
        crate::svg::line_chart("Idler singles rate vs reference intensity", "|alpha|^2", "rate", &fig4_series),
    )?;
    std::fs::write(
        data.join("fig5.svg"),
        crate::svg::line_chart("Heralded parity vs displacement", "|alpha|", "parity", &split_series(&fig5)),
    )?;
    std::fs::write(data.join("fig6.svg"), crate::svg::pn_grid(&fig6))?;
    println!("figures: wrote figures_long.csv and 4 SVG plots under {}", data.display());
    Ok(())
}

/// Quick numerical self-checks; failures exit with the numerical code.
pub fn selftest() -> Result<()> {
    use wignerlab_core::fock::{apply_displacement, displacement_kernel, PhotonDist};
    use wignerlab_core::source::{displace_signal, tmsv_joint, wigner_avg_analytic};

    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        println!("selftest {name}: {}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures.push(name.to_string());
        }
    };

    // Displacement kernel at zero amplitude is exactly the identity.
    let kern = displacement_kernel(0.0, 12)?;
    check(
        "kernel identity",
        (0..=12).all(|n| (0..=12).all(|k| kern.get(n, k) == if n == k { 1.0 } else { 0.0 })),
    );

    // Displaced vacuum parity follows the Gaussian.
    let vac = PhotonDist::vacuum(60);
    let kern = displacement_kernel(1.3, 60)?;
    let disp = apply_displacement(&vac, &kern)?;
    check(
        "displaced vacuum parity",
        (parity(&disp) - (-2.0_f64 * 1.3 * 1.3).exp()).abs() < 1e-9,
    );

    // Fock pipeline against the phase-averaged Gaussian closed form.
    let base = tmsv_joint(0.6, 60)?;
    let disp = displace_signal(&base, 0.8, 1.0, 1.0)?;
    let oracle = std::f64::consts::PI.powi(2) / 4.0 * wigner_avg_analytic(0.8, 0.0, 0.6);
    check("phase-averaged oracle", (disp.parity() - oracle).abs() < 1e-8);

    // Detector response conserves probability through afterpulsing.
    let params = wignerlab_core::tmd::DetectorParams::default();
    let resp = wignerlab_core::tmd::mode_response(3, &params)?;
    let pushed = wignerlab_core::tmd::apply_afterpulse(&resp, &params)?;
    check("afterpulse mass conservation", (pushed.total() - 1.0).abs() < 1e-12);

    // Displacement inversion from exact probes: p0 = e^{-eta_d amp^2}.
    let tmd = wignerlab_core::tmd::Tmd::default();
    let amps: Vec<(f64, f64)> = (1..=10).map(|i| (0.3 * i as f64, 0.2)).collect();
    let probes = build_probe_library(&amps, &tmd, 0, 1)?;
    let amp = estimate_displacement((-0.2_f64).exp(), &probes)?;
    check("displacement inversion", (amp - 1.0).abs() < 1e-9);

    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "selftest failures: {}",
            failures.join(", ")
        )))
    }
}
