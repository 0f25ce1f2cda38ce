//! File formats: click records as CSV with a JSON sidecar, probe libraries
//! as CSV with a JSON sidecar, reconstructions as JSON.
//!
//! Bit order everywhere: bin 0 is the least significant bit of the pattern
//! mask; signal bins occupy the low `bins_per_mode` bits, idler bins the
//! next ones up.

use crate::error::{Error, Result};
use crate::patterns::{Probe, ProbeSet, Reconstruction};
use crate::tmd::{ClickRecord, DetectorParams, Tmd};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Sidecar for one click record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub shots: u64,
    pub seed: u64,
    pub detector_s: DetectorParams,
    pub detector_i: DetectorParams,
    pub cross_mode: bool,
    /// What was measured (free-form label, e.g. "probe", "state", "pdc").
    pub kind: String,
    /// Displacement amplitude and overlap for state records.
    #[serde(default)]
    pub amp: Option<f64>,
    #[serde(default)]
    pub overlap: Option<f64>,
}

impl RecordMeta {
    pub fn for_tmd(tmd: &Tmd, shots: u64, seed: u64, kind: &str) -> Self {
        RecordMeta {
            shots,
            seed,
            detector_s: tmd.signal.clone(),
            detector_i: tmd.idler.clone(),
            cross_mode: tmd.cross_mode,
            kind: kind.into(),
            amp: None,
            overlap: None,
        }
    }
}

/// Write a click record as `pattern_hex,count` CSV plus a JSON sidecar at
/// the same path with extension `.json`.
pub fn write_record(path: &Path, record: &ClickRecord, meta: &RecordMeta) -> Result<()> {
    let mut out = String::from("pattern_hex,count\n");
    for (&mask, &count) in record.counts() {
        out.push_str(&format!("{mask:05x},{count}\n"));
    }
    std::fs::write(path, out)?;
    write_json(&path.with_extension("json"), meta)?;
    Ok(())
}

/// Read a click record written by [`write_record`].
pub fn read_record(path: &Path) -> Result<(ClickRecord, RecordMeta)> {
    let text = std::fs::read_to_string(path)?;
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    let mut shots = 0u64;
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 {
            if line.trim() != "pattern_hex,count" {
                return Err(parse_err(path, 1, "expected header 'pattern_hex,count'"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, ',');
        let mask_text = parts.next().unwrap_or("");
        let count_text = parts
            .next()
            .ok_or_else(|| parse_err(path, idx + 1, "missing count column"))?;
        let mask = u32::from_str_radix(mask_text.trim(), 16)
            .map_err(|e| parse_err(path, idx + 1, &format!("bad pattern '{mask_text}': {e}")))?;
        let count: u64 = count_text
            .trim()
            .parse()
            .map_err(|e| parse_err(path, idx + 1, &format!("bad count '{count_text}': {e}")))?;
        if counts.insert(mask, count).is_some() {
            return Err(parse_err(path, idx + 1, &format!("duplicate pattern {mask:#x}")));
        }
        shots += count;
    }
    let meta: RecordMeta = read_json(&path.with_extension("json"))?;
    if meta.shots != shots {
        return Err(parse_err(
            path,
            0,
            &format!("sidecar says {} shots, counts sum to {shots}", meta.shots),
        ));
    }
    Ok((ClickRecord::new(shots, counts)?, meta))
}

/// Sidecar for a probe library.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeLibraryMeta {
    pub shots: u64,
    pub detector_s: DetectorParams,
    pub detector_i: DetectorParams,
    pub cross_mode: bool,
    pub bins_per_mode: usize,
}

/// Write the probe library as `amp_s,amp_i,pattern_hex,frequency` CSV with
/// a JSON sidecar.
pub fn write_probe_library(path: &Path, probes: &ProbeSet, meta: &ProbeLibraryMeta) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "amp_s,amp_i,pattern_hex,frequency").map_err(Error::Io)?;
    for probe in &probes.probes {
        for (&mask, &freq) in &probe.freqs {
            writeln!(w, "{},{},{mask:05x},{freq}", probe.amp_s, probe.amp_i).map_err(Error::Io)?;
        }
    }
    w.flush().map_err(Error::Io)?;
    write_json(&path.with_extension("json"), meta)?;
    Ok(())
}

/// Read a probe library written by [`write_probe_library`].
pub fn read_probe_library(path: &Path) -> Result<(ProbeSet, ProbeLibraryMeta)> {
    let meta: ProbeLibraryMeta = read_json(&path.with_extension("json"))?;
    let text = std::fs::read_to_string(path)?;
    let mut probes: Vec<Probe> = Vec::new();
    let mut current: Option<(f64, f64)> = None;
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 {
            if line.trim() != "amp_s,amp_i,pattern_hex,frequency" {
                return Err(parse_err(path, 1, "expected header 'amp_s,amp_i,pattern_hex,frequency'"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(parse_err(path, idx + 1, "expected 4 columns"));
        }
        let amp_s: f64 = cols[0]
            .trim()
            .parse()
            .map_err(|e| parse_err(path, idx + 1, &format!("bad amp_s: {e}")))?;
        let amp_i: f64 = cols[1]
            .trim()
            .parse()
            .map_err(|e| parse_err(path, idx + 1, &format!("bad amp_i: {e}")))?;
        let mask = u32::from_str_radix(cols[2].trim(), 16)
            .map_err(|e| parse_err(path, idx + 1, &format!("bad pattern: {e}")))?;
        let freq: f64 = cols[3]
            .trim()
            .parse()
            .map_err(|e| parse_err(path, idx + 1, &format!("bad frequency: {e}")))?;
        if current != Some((amp_s, amp_i)) {
            probes.push(Probe {
                amp_s,
                amp_i,
                shots: meta.shots,
                freqs: BTreeMap::new(),
            });
            current = Some((amp_s, amp_i));
        }
        probes
            .last_mut()
            .unwrap()
            .freqs
            .insert(mask, freq);
    }
    let set = ProbeSet {
        probes,
        bins_per_mode: meta.bins_per_mode,
    };
    set.validate()?;
    Ok((set, meta))
}

/// Serialized reconstruction: joint matrix, residual, bootstrap errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionFile {
    pub rows: usize,
    pub cols: usize,
    /// Row-major P[m][n].
    pub p: Vec<f64>,
    pub bootstrap_std: Vec<f64>,
    pub residual: f64,
    pub n_patterns_used: usize,
    pub trace_raw: f64,
    pub replica_parities: Vec<f64>,
}

impl ReconstructionFile {
    pub fn from_reconstruction(rec: &Reconstruction) -> Self {
        ReconstructionFile {
            rows: rec.rows(),
            cols: rec.cols(),
            p: rec.probs().to_vec(),
            bootstrap_std: rec.bootstrap_std.clone(),
            residual: rec.residual,
            n_patterns_used: rec.n_patterns_used,
            trace_raw: rec.trace_raw,
            replica_parities: rec.replica_parities.clone(),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|_| {
        Error::MissingData(path.display().to_string())
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })
}

fn parse_err(path: &Path, line: usize, msg: &str) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::PhotonDist;
    use crate::patterns::build_probe_library;
    use crate::source::JointDist;
    use crate::tmd::sample_patterns;

    #[test]
    fn record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tmd = Tmd::default();
        let state = JointDist::product(&PhotonDist::vacuum(2), &PhotonDist::vacuum(2));
        let record = sample_patterns(&state, &tmd, 5000, 3).unwrap();
        let meta = RecordMeta::for_tmd(&tmd, 5000, 3, "probe");
        let path = dir.path().join("rec.csv");
        write_record(&path, &record, &meta).unwrap();
        let (back, meta_back) = read_record(&path).unwrap();
        assert_eq!(record, back);
        assert_eq!(meta, meta_back);
    }

    #[test]
    fn record_parse_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "pattern_hex,count\n00000,10\nzz,3\n").unwrap();
        let meta = RecordMeta::for_tmd(&Tmd::default(), 13, 0, "probe");
        write_json(&path.with_extension("json"), &meta).unwrap();
        match read_record(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn record_shot_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "pattern_hex,count\n00000,10\n").unwrap();
        let meta = RecordMeta::for_tmd(&Tmd::default(), 11, 0, "probe");
        write_json(&path.with_extension("json"), &meta).unwrap();
        assert!(read_record(&path).is_err());
    }

    #[test]
    fn probe_library_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tmd = Tmd::default();
        let set = build_probe_library(&[(0.4, 0.2), (0.9, 0.5)], &tmd, 2000, 7).unwrap();
        let meta = ProbeLibraryMeta {
            shots: 2000,
            detector_s: tmd.signal.clone(),
            detector_i: tmd.idler.clone(),
            cross_mode: tmd.cross_mode,
            bins_per_mode: 8,
        };
        let path = dir.path().join("probes.csv");
        write_probe_library(&path, &set, &meta).unwrap();
        let (back, _) = read_probe_library(&path).unwrap();
        assert_eq!(set.probes.len(), back.probes.len());
        for (a, b) in set.probes.iter().zip(back.probes.iter()) {
            assert_eq!(a.amp_s, b.amp_s);
            assert_eq!(a.amp_i, b.amp_i);
            assert_eq!(a.freqs.len(), b.freqs.len());
            for ((ma, fa), (mb, fb)) in a.freqs.iter().zip(b.freqs.iter()) {
                assert_eq!(ma, mb);
                assert!((fa - fb).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn missing_sidecar_is_missing_data() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.csv");
        std::fs::write(&path, "pattern_hex,count\n00000,10\n").unwrap();
        match read_record(&path) {
            Err(Error::MissingData(_)) => {}
            other => panic!("expected missing data, got {other:?}"),
        }
    }
}
