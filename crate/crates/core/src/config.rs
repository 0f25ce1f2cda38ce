//! Experiment configuration: one struct carrying every physical and
//! numerical parameter, validated with field paths, serializable for the
//! run manifests.

use crate::error::{Error, Result};
use crate::source::SourceParams;
use crate::tmd::{DetectorParams, Tmd};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Factorized two-mode coherent probe grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeGrid {
    pub n_signal: usize,
    pub n_idler: usize,
    /// Amplitudes run over (0, max), endpoints excluded.
    pub max_signal: f64,
    /// The idler axis stays below the point where nine levels can no longer
    /// identify the idler ladder.
    pub max_idler: f64,
}

impl Default for ProbeGrid {
    fn default() -> Self {
        ProbeGrid {
            n_signal: 71,
            n_idler: 9,
            max_signal: 3.5,
            max_idler: 1.6,
        }
    }
}

impl ProbeGrid {
    pub fn validate(&self) -> Result<()> {
        if self.n_signal == 0 || self.n_idler == 0 {
            return Err(Error::invalid("probe_grid: counts must be >= 1"));
        }
        if !(self.max_signal > 0.0) || !(self.max_idler > 0.0) {
            return Err(Error::invalid("probe_grid: ranges must be positive"));
        }
        Ok(())
    }

    /// The probe amplitudes, strictly inside (0, max) on both axes.
    pub fn amplitudes(&self) -> Vec<(f64, f64)> {
        let mut amps = Vec::with_capacity(self.n_signal * self.n_idler);
        for i in 1..=self.n_signal {
            for j in 1..=self.n_idler {
                amps.push((
                    self.max_signal * i as f64 / (self.n_signal + 1) as f64,
                    self.max_idler * j as f64 / (self.n_idler + 1) as f64,
                ));
            }
        }
        amps
    }
}

/// Reconstruction settings (route, ladder sizes, bootstrap).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconSettings {
    /// Patterns per reconstruction subset.
    pub n_patterns: usize,
    /// Bootstrap replicas.
    pub n_boot: usize,
    pub n_max_signal: usize,
    pub n_max_idler: usize,
    /// "fock" (response-matrix route, physical) or "mixture" (probe-space).
    pub route: String,
    pub frequency_weighted: bool,
}

impl Default for ReconSettings {
    fn default() -> Self {
        ReconSettings {
            n_patterns: 100,
            n_boot: 50,
            n_max_signal: 16,
            n_max_idler: 8,
            route: "fock".into(),
            frequency_weighted: false,
        }
    }
}

impl ReconSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_patterns == 0 {
            return Err(Error::invalid("recon.n_patterns: must be >= 1"));
        }
        if self.n_boot == 0 {
            return Err(Error::invalid("recon.n_boot: must be >= 1"));
        }
        if self.route != "fock" && self.route != "mixture" {
            return Err(Error::invalid(format!(
                "recon.route: '{}' is not 'fock' or 'mixture'",
                self.route
            )));
        }
        Ok(())
    }
}

/// Everything one run needs. Defaults mirror the replication regime:
/// r = 0.6, eta = 0.75, overlap 0.7, a 16-bin detector at 20% efficiency
/// with 7% afterpulsing, 639 probes, displacements up to 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub n_max: usize,
    pub shots: u64,
    pub seed: u64,
    /// Displacement amplitudes, ascending, referred to the detector input.
    pub amps: Vec<f64>,
    pub output_dir: PathBuf,
    pub source: SourceParams,
    pub detector_s: DetectorParams,
    pub detector_i: DetectorParams,
    /// Shared-APD afterpulse coupling between the modes.
    pub cross_mode_afterpulse: bool,
    pub probe_grid: ProbeGrid,
    pub recon: ReconSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_max: 60,
            shots: 1_000_000,
            seed: 7,
            amps: vec![0.0, 0.4, 0.8, 1.2, 1.6, 2.0],
            output_dir: PathBuf::from("out"),
            source: SourceParams::default(),
            detector_s: DetectorParams::default(),
            detector_i: DetectorParams::default(),
            cross_mode_afterpulse: true,
            probe_grid: ProbeGrid::default(),
            recon: ReconSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_max == 0 {
            return Err(Error::invalid("n_max: must be >= 1"));
        }
        if self.shots == 0 {
            return Err(Error::invalid("shots: must be >= 1"));
        }
        if self.amps.is_empty() {
            return Err(Error::invalid("amps: need at least one displacement"));
        }
        if self.amps.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("amps: must be sorted ascending"));
        }
        if self.amps.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(Error::invalid("amps: must be finite and >= 0"));
        }
        self.source.validate()?;
        self.detector_s.validate()?;
        self.detector_i.validate()?;
        self.probe_grid.validate()?;
        self.recon.validate()?;
        Ok(())
    }

    /// The two-mode detector assembled from the per-mode parameters.
    pub fn tmd(&self) -> Tmd {
        Tmd {
            signal: self.detector_s.clone(),
            idler: self.detector_i.clone(),
            cross_mode: self.cross_mode_afterpulse,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_paper_scale() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.probe_grid.amplitudes().len(), 639);
        assert_eq!(cfg.source.r, 0.6);
        assert_eq!(cfg.source.eta_s, 0.75);
        assert_eq!(cfg.detector_s.eta_d, 0.20);
        assert_eq!(cfg.detector_s.p_ap, 0.07);
    }

    #[test]
    fn validation_names_fields() {
        let mut cfg = ExperimentConfig::default();
        cfg.shots = 0;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("shots"), "{msg}");

        let mut cfg = ExperimentConfig::default();
        cfg.amps = vec![1.0, 0.5];
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("amps"), "{msg}");

        let mut cfg = ExperimentConfig::default();
        cfg.source.eta_s = 1.5;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("eta_s"), "{msg}");
    }

    #[test]
    fn json_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
