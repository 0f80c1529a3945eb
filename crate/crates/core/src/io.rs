//! On-disk formats: grid snapshots and observation series.
//!
//! Each artifact is a pair of files. `<name>.json` is a small header and
//! `<name>.f64` holds the raw little-endian IEEE-754 payload, row-major for
//! grids. The header records the payload's SHA-256 so a mismatched pair is
//! rejected on read. Writes are atomic (temporary file, then rename) and
//! never replace an existing file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::observation::{ObservationSeries, Sigma};
use crate::phasefield::PfGrid;

pub const LAYOUT: &str = "row-major";
pub const ENDIANNESS: &str = "little";
pub const DTYPE: &str = "float64";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotHeader {
    pub nx: usize,
    pub ny: usize,
    pub spacing: f64,
    pub time: f64,
    pub layout: String,
    pub endianness: String,
    pub dtype: String,
    /// Payload file name, relative to the header.
    pub payload: String,
    pub sha256: String,
    /// Interface parameter carried alongside the field, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesHeader {
    /// Values per snapshot.
    pub n_obs: usize,
    pub times: Vec<f64>,
    /// Shared noise level, or one value per channel.
    pub sigma: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nx: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ny: Option<usize>,
    pub layout: String,
    pub endianness: String,
    pub dtype: String,
    pub payload: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_f64(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f64(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!("payload length {} is not a multiple of 8", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Writes `bytes` to `path` through a sibling temporary file. Fails if
/// `path` already exists.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::AlreadyExists,
            format!("refusing to overwrite {}", path.display()),
        )));
    }
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn sibling(header: &Path, ext: &str) -> PathBuf {
    header.with_extension(ext)
}

fn checked_format(layout: &str, endianness: &str, dtype: &str) -> Result<()> {
    if layout != LAYOUT || endianness != ENDIANNESS || dtype != DTYPE {
        return Err(Error::Format(format!(
            "unsupported encoding {layout}/{endianness}/{dtype}, expected {LAYOUT}/{ENDIANNESS}/{DTYPE}"
        )));
    }
    Ok(())
}

fn read_payload(header: &Path, payload: &str, sha256: &str, expected_len: usize) -> Result<Vec<f64>> {
    let dir = header.parent().unwrap_or(Path::new("."));
    let bytes = fs::read(dir.join(payload))?;
    if bytes.len() != 8 * expected_len {
        return Err(Error::Format(format!(
            "payload holds {} bytes, header implies {}",
            bytes.len(),
            8 * expected_len
        )));
    }
    let digest = sha256_hex(&bytes);
    if digest != sha256 {
        return Err(Error::Format(format!("payload checksum {digest} does not match header {sha256}")));
    }
    decode_f64(&bytes)
}

/// Writes `<base>.json` and `<base>.f64`, returning the header path.
pub fn write_snapshot(base: &Path, grid: &PfGrid, time: f64, field: &[f64], m: Option<f64>) -> Result<PathBuf> {
    if field.len() != grid.cells() {
        return Err(Error::Dimension {
            expected: grid.cells(),
            got: field.len(),
        });
    }
    let header_path = sibling(base, "json");
    let payload_path = sibling(base, "f64");
    let bytes = encode_f64(field);
    let header = SnapshotHeader {
        nx: grid.nx(),
        ny: grid.ny(),
        spacing: grid.spacing(),
        time,
        layout: LAYOUT.into(),
        endianness: ENDIANNESS.into(),
        dtype: DTYPE.into(),
        payload: file_name(&payload_path),
        sha256: sha256_hex(&bytes),
        m,
    };
    atomic_write(&payload_path, &bytes)?;
    atomic_write(&header_path, &serde_json::to_vec_pretty(&header)?)?;
    Ok(header_path)
}

pub fn read_snapshot(header_path: &Path) -> Result<(SnapshotHeader, Vec<f64>)> {
    let header: SnapshotHeader = serde_json::from_slice(&fs::read(header_path)?)?;
    checked_format(&header.layout, &header.endianness, &header.dtype)?;
    PfGrid::new(header.nx, header.ny, header.spacing)?;
    let field = read_payload(header_path, &header.payload, &header.sha256, header.nx * header.ny)?;
    Ok((header, field))
}

/// Writes an observation series; `grid` is recorded when the channels are
/// a phase field.
pub fn write_series(base: &Path, obs: &ObservationSeries, grid: Option<&PfGrid>) -> Result<PathBuf> {
    let header_path = sibling(base, "json");
    let payload_path = sibling(base, "f64");
    let flat: Vec<f64> = obs.values().iter().flatten().copied().collect();
    let bytes = encode_f64(&flat);
    let sigma = match obs.sigma() {
        Sigma::Shared(s) => vec![*s],
        Sigma::PerChannel(v) => v.clone(),
    };
    let header = SeriesHeader {
        n_obs: obs.n_obs(),
        times: obs.times().to_vec(),
        sigma,
        nx: grid.map(PfGrid::nx),
        ny: grid.map(PfGrid::ny),
        layout: LAYOUT.into(),
        endianness: ENDIANNESS.into(),
        dtype: DTYPE.into(),
        payload: file_name(&payload_path),
        sha256: sha256_hex(&bytes),
    };
    atomic_write(&payload_path, &bytes)?;
    atomic_write(&header_path, &serde_json::to_vec_pretty(&header)?)?;
    Ok(header_path)
}

pub fn read_series(header_path: &Path) -> Result<(SeriesHeader, ObservationSeries)> {
    let header: SeriesHeader = serde_json::from_slice(&fs::read(header_path)?)?;
    checked_format(&header.layout, &header.endianness, &header.dtype)?;
    let flat = read_payload(header_path, &header.payload, &header.sha256, header.n_obs * header.times.len())?;
    let values = if header.n_obs == 0 {
        vec![Vec::new(); header.times.len()]
    } else {
        flat.chunks_exact(header.n_obs).map(<[f64]>::to_vec).collect()
    };
    let sigma = match header.sigma.as_slice() {
        [s] => Sigma::Shared(*s),
        v => Sigma::PerChannel(v.to_vec()),
    };
    let obs = ObservationSeries::new(header.times.clone(), values, sigma)?;
    Ok((header, obs))
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let grid = PfGrid::new(4, 3, 0.5).unwrap();
        let field: Vec<f64> = (0..12).map(|i| (i as f64).sin() / 3.0 + 1e-300).collect();
        let path = write_snapshot(&dir.path().join("snap"), &grid, 2.5, &field, Some(0.1)).unwrap();
        let (header, back) = read_snapshot(&path).unwrap();
        assert_eq!(header.nx, 4);
        assert_eq!(header.time, 2.5);
        assert_eq!(header.m, Some(0.1));
        assert!(field.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(fs::metadata(dir.path().join("snap.f64")).unwrap().len(), 96);
    }

    #[test]
    fn write_once() {
        let dir = tempfile::tempdir().unwrap();
        let grid = PfGrid::new(3, 3, 1.0).unwrap();
        let base = dir.path().join("a");
        write_snapshot(&base, &grid, 0.0, &[0.0; 9], None).unwrap();
        assert!(write_snapshot(&base, &grid, 0.0, &[1.0; 9], None).is_err());
        let (_, back) = read_snapshot(&base.with_extension("json")).unwrap();
        assert_eq!(back, vec![0.0; 9]);
    }

    #[test]
    fn corrupted_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let grid = PfGrid::new(3, 3, 1.0).unwrap();
        let path = write_snapshot(&dir.path().join("b"), &grid, 0.0, &[0.5; 9], None).unwrap();
        let payload = dir.path().join("b.f64");
        let mut bytes = fs::read(&payload).unwrap();
        bytes[3] ^= 1;
        fs::write(&payload, &bytes).unwrap();
        assert!(matches!(read_snapshot(&path), Err(Error::Format(_))));
        fs::write(&payload, &bytes[..64]).unwrap();
        assert!(matches!(read_snapshot(&path), Err(Error::Format(_))));
    }

    #[test]
    fn series_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let obs = ObservationSeries::new(
            vec![0.1, 0.2],
            vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, -6.0]],
            Sigma::Shared(0.01),
        )
        .unwrap();
        let path = write_series(&dir.path().join("obs"), &obs, None).unwrap();
        let (header, back) = read_series(&path).unwrap();
        assert_eq!(header.n_obs, 3);
        assert_eq!(back, obs);
    }

    #[test]
    fn decode_rejects_ragged_payload() {
        assert!(decode_f64(&[0u8; 7]).is_err());
        assert_eq!(decode_f64(&encode_f64(&[1.5, -2.0])).unwrap(), vec![1.5, -2.0]);
    }
}
