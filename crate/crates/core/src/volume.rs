//! CT volumes, candidate and annotation tables, intensity normalization and
//! world/voxel coordinate conversion.
//!
//! Volumes are stored in the RVOL container: the 8-byte magic `RVOL0001`, a
//! single-line JSON header terminated by `\n`, then `nx*ny*nz` little-endian
//! `i16` voxels with x varying fastest, then y, then z.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RVOL_MAGIC: &[u8; 8] = b"RVOL0001";

/// Lower end of the HU clip interval (air).
pub const HU_MIN: i32 = -1000;
/// Upper end of the HU clip interval.
pub const HU_MAX: i32 = 400;

#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    pub scan_id: String,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    voxels: Vec<i16>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RvolHeader {
    scan_id: String,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
}

impl CtVolume {
    pub fn new(
        scan_id: impl Into<String>,
        dims: [usize; 3],
        spacing_mm: [f64; 3],
        origin_mm: [f64; 3],
        voxels: Vec<i16>,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidValue(format!(
                "dims must be positive, got {dims:?}"
            )));
        }
        if spacing_mm.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return Err(Error::InvalidValue(format!(
                "spacing must be positive, got {spacing_mm:?}"
            )));
        }
        if origin_mm.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "origin must be finite, got {origin_mm:?}"
            )));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if voxels.len() != expected {
            return Err(Error::DimensionMismatch {
                dims,
                found: voxels.len(),
            });
        }
        Ok(Self {
            scan_id: scan_id.into(),
            dims,
            spacing_mm,
            origin_mm,
            voxels,
        })
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> i16 {
        self.voxels[self.index(i, j, k)]
    }

    /// Voxel value at a signed index, or `None` outside the grid.
    #[inline]
    pub fn get_signed(&self, i: i64, j: i64, k: i64) -> Option<i16> {
        let [nx, ny, nz] = self.dims;
        if i < 0 || j < 0 || k < 0 || i >= nx as i64 || j >= ny as i64 || k >= nz as i64 {
            return None;
        }
        Some(self.get(i as usize, j as usize, k as usize))
    }

    /// Component-wise `round((world - origin) / spacing)`, rounding half away
    /// from zero. Results may lie outside the grid.
    pub fn world_to_voxel(&self, world_mm: [f64; 3]) -> [i64; 3] {
        let mut out = [0i64; 3];
        for a in 0..3 {
            out[a] = ((world_mm[a] - self.origin_mm[a]) / self.spacing_mm[a]).round() as i64;
        }
        out
    }

    pub fn voxel_to_world(&self, index: [i64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for a in 0..3 {
            out[a] = self.origin_mm[a] + index[a] as f64 * self.spacing_mm[a];
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = RvolHeader {
            scan_id: self.scan_id.clone(),
            dims: self.dims,
            spacing_mm: self.spacing_mm,
            origin_mm: self.origin_mm,
        };
        let json = serde_json::to_string(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + 1 + self.voxels.len() * 2);
        out.extend_from_slice(RVOL_MAGIC);
        out.extend_from_slice(json.as_bytes());
        out.push(b'\n');
        for v in &self.voxels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < RVOL_MAGIC.len() || &bytes[..8] != RVOL_MAGIC {
            return Err(Error::MalformedHeader("missing RVOL0001 magic".into()));
        }
        let rest = &bytes[8..];
        let newline = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::MalformedHeader("header line is not terminated".into()))?;
        let header: RvolHeader = serde_json::from_slice(&rest[..newline])
            .map_err(|e| Error::MalformedHeader(e.to_string()))?;
        if header.dims.contains(&0) {
            return Err(Error::MalformedHeader(format!(
                "zero dimension in {:?}",
                header.dims
            )));
        }
        if header.spacing_mm.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::MalformedHeader(format!(
                "non-positive spacing {:?}",
                header.spacing_mm
            )));
        }
        let payload = &rest[newline + 1..];
        let count = header.dims[0] * header.dims[1] * header.dims[2];
        let expected = count * 2;
        if payload.len() < expected {
            return Err(Error::TruncatedPayload {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() != expected {
            return Err(Error::DimensionMismatch {
                dims: header.dims,
                found: payload.len() / 2,
            });
        }
        let voxels = payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]))
            .collect();
        CtVolume::new(
            header.scan_id,
            header.dims,
            header.spacing_mm,
            header.origin_mm,
            voxels,
        )
    }
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<CtVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    CtVolume::from_bytes(&bytes)
}

pub fn save_volume(volume: &CtVolume, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &volume.to_bytes())
}

/// Clip to `[-1000, 400]` HU and rescale linearly to `[0, 1]`.
#[inline]
pub fn normalize_hu(hu: i32) -> f32 {
    let clipped = hu.clamp(HU_MIN, HU_MAX);
    (clipped - HU_MIN) as f32 / (HU_MAX - HU_MIN) as f32
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub scan_id: String,
    pub world_mm: [f64; 3],
    /// 0 = non-nodule, 1 = nodule.
    pub label: Option<u8>,
    pub probability: Option<f64>,
}

impl Candidate {
    pub fn new(scan_id: impl Into<String>, world_mm: [f64; 3], label: Option<u8>) -> Self {
        Self {
            scan_id: scan_id.into(),
            world_mm,
            label,
            probability: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoduleAnnotation {
    pub scan_id: String,
    pub center_mm: [f64; 3],
    pub diameter_mm: f64,
}

impl NoduleAnnotation {
    pub fn new(scan_id: impl Into<String>, center_mm: [f64; 3], diameter_mm: f64) -> Result<Self> {
        if !diameter_mm.is_finite() || diameter_mm <= 0.0 {
            return Err(Error::InvalidValue(format!(
                "nodule diameter must be positive, got {diameter_mm}"
            )));
        }
        Ok(Self {
            scan_id: scan_id.into(),
            center_mm,
            diameter_mm,
        })
    }
}

pub const CANDIDATE_COLUMNS: [&str; 5] = ["seriesuid", "coordX", "coordY", "coordZ", "class"];
pub const ANNOTATION_COLUMNS: [&str; 5] =
    ["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm"];

struct Columns<'a> {
    table: &'a str,
    headers: csv::StringRecord,
}

impl<'a> Columns<'a> {
    fn position(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h.trim() == name)
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.position(name).ok_or_else(|| Error::MissingColumn {
            table: self.table.to_string(),
            column: name.to_string(),
        })
    }

    fn number(&self, record: &csv::StringRecord, row: usize, col: usize) -> Result<f64> {
        let raw = record.get(col).unwrap_or("").trim();
        raw.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::NonNumeric {
                table: self.table.to_string(),
                row,
                column: self.headers.get(col).unwrap_or("?").to_string(),
                value: raw.to_string(),
            })
    }
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

pub fn load_candidates(path: impl AsRef<Path>) -> Result<Vec<Candidate>> {
    let path = path.as_ref();
    let table = path.display().to_string();
    let mut rdr = reader(path)?;
    let cols = Columns {
        table: &table,
        headers: rdr.headers()?.clone(),
    };
    let id = cols.require("seriesuid")?;
    let xyz = [
        cols.require("coordX")?,
        cols.require("coordY")?,
        cols.require("coordZ")?,
    ];
    let class = cols.position("class");
    let prob = cols.position("probability");
    let mut out = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let world_mm = [
            cols.number(&record, row, xyz[0])?,
            cols.number(&record, row, xyz[1])?,
            cols.number(&record, row, xyz[2])?,
        ];
        let label = match class.map(|c| record.get(c).unwrap_or("").trim()) {
            None | Some("") => None,
            Some("0") => Some(0),
            Some("1") => Some(1),
            Some(other) => {
                return Err(Error::UnknownLabel {
                    table: table.clone(),
                    row,
                    value: other.to_string(),
                })
            }
        };
        let probability = match prob {
            Some(c) if !record.get(c).unwrap_or("").trim().is_empty() => {
                let p = cols.number(&record, row, c)?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidValue(format!(
                        "row {row}: probability {p} outside [0, 1]"
                    )));
                }
                Some(p)
            }
            _ => None,
        };
        out.push(Candidate {
            scan_id: record.get(id).unwrap_or("").to_string(),
            world_mm,
            label,
            probability,
        });
    }
    Ok(out)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<NoduleAnnotation>> {
    let path = path.as_ref();
    let table = path.display().to_string();
    let mut rdr = reader(path)?;
    let cols = Columns {
        table: &table,
        headers: rdr.headers()?.clone(),
    };
    let id = cols.require("seriesuid")?;
    let xyz = [
        cols.require("coordX")?,
        cols.require("coordY")?,
        cols.require("coordZ")?,
    ];
    let diam = cols.require("diameter_mm")?;
    let mut out = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let center = [
            cols.number(&record, row, xyz[0])?,
            cols.number(&record, row, xyz[1])?,
            cols.number(&record, row, xyz[2])?,
        ];
        let d = cols.number(&record, row, diam)?;
        out.push(NoduleAnnotation::new(
            record.get(id).unwrap_or(""),
            center,
            d,
        )?);
    }
    Ok(out)
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Writes the candidates table. A `probability` column is appended when any
/// candidate carries one.
pub fn save_candidates(candidates: &[Candidate], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let with_prob = candidates.iter().any(|c| c.probability.is_some());
    let mut w = writer(path)?;
    let mut header: Vec<&str> = CANDIDATE_COLUMNS.to_vec();
    if with_prob {
        header.push("probability");
    }
    w.write_record(&header)?;
    for c in candidates {
        let mut rec = vec![
            c.scan_id.clone(),
            c.world_mm[0].to_string(),
            c.world_mm[1].to_string(),
            c.world_mm[2].to_string(),
            c.label.map(|l| l.to_string()).unwrap_or_default(),
        ];
        if with_prob {
            rec.push(c.probability.map(|p| p.to_string()).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_annotations(annotations: &[NoduleAnnotation], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    w.write_record(ANNOTATION_COLUMNS)?;
    for a in annotations {
        w.write_record([
            a.scan_id.clone(),
            a.center_mm[0].to_string(),
            a.center_mm[1].to_string(),
            a.center_mm[2].to_string(),
            a.diameter_mm.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes raw bytes, creating parent directories.
pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CtVolume {
        CtVolume::new(
            "tiny",
            [2, 2, 1],
            [1.0, 1.0, 1.0],
            [0.0; 3],
            vec![-1000, -1000, 0, 400],
        )
        .unwrap()
    }

    #[test]
    fn rvol_round_trip_keeps_voxel_order() {
        let v = tiny();
        let bytes = v.to_bytes();
        let back = CtVolume::from_bytes(&bytes).unwrap();
        assert_eq!(back.dims, [2, 2, 1]);
        assert_eq!(back.voxels(), &[-1000, -1000, 0, 400]);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let mut bytes = tiny().to_bytes();
        bytes.pop();
        bytes.pop();
        assert!(matches!(
            CtVolume::from_bytes(&bytes),
            Err(Error::TruncatedPayload {
                expected: 8,
                found: 6
            })
        ));
    }

    #[test]
    fn extra_payload_is_a_dimension_mismatch() {
        let mut bytes = tiny().to_bytes();
        bytes.extend_from_slice(&[0, 0]);
        assert!(matches!(
            CtVolume::from_bytes(&bytes),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn bad_magic_and_header() {
        assert!(matches!(
            CtVolume::from_bytes(b"XVOL0001{}\n"),
            Err(Error::MalformedHeader(_))
        ));
        assert!(matches!(
            CtVolume::from_bytes(b"RVOL0001{\"scan_id\":1}\n"),
            Err(Error::MalformedHeader(_))
        ));
        assert!(matches!(
            CtVolume::from_bytes(b"RVOL0001{"),
            Err(Error::MalformedHeader(_))
        ));
    }

    #[test]
    fn normalize_hu_endpoints() {
        assert_eq!(normalize_hu(-1000), 0.0);
        assert_eq!(normalize_hu(400), 1.0);
        assert_eq!(normalize_hu(-300), 0.5);
        assert_eq!(normalize_hu(1200), 1.0);
        assert_eq!(normalize_hu(-3024), 0.0);
    }

    #[test]
    fn world_to_voxel_examples() {
        let v = CtVolume::new("a", [1, 1, 1], [1.0; 3], [0.0; 3], vec![0]).unwrap();
        assert_eq!(v.world_to_voxel([5.0, 6.0, 7.0]), [5, 6, 7]);
        // ties round away from zero
        assert_eq!(v.world_to_voxel([2.5, -2.5, 0.5]), [3, -3, 1]);
        let v = CtVolume::new(
            "b",
            [1, 1, 1],
            [0.74, 0.74, 2.5],
            [-100.0, -100.0, -50.0],
            vec![0],
        )
        .unwrap();
        assert_eq!(v.world_to_voxel([-92.6, -100.0, -45.0]), [10, 0, 2]);
    }

    #[test]
    fn candidate_table_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        fs::write(
            &p,
            "seriesuid,coordX,coordY,coordZ,class\nscan1,-56.08,-67.85,-311.92,0\n",
        )
        .unwrap();
        let c = load_candidates(&p).unwrap();
        assert_eq!(
            c,
            vec![Candidate::new("scan1", [-56.08, -67.85, -311.92], Some(0))]
        );

        fs::write(&p, "seriesuid,coordX,coordY,coordZ,class\n").unwrap();
        assert!(load_candidates(&p).unwrap().is_empty());

        fs::write(&p, "seriesuid,coordX,coordZ,class\nscan1,1,2,0\n").unwrap();
        assert!(matches!(
            load_candidates(&p),
            Err(Error::MissingColumn { .. })
        ));

        fs::write(
            &p,
            "seriesuid,coordX,coordY,coordZ,class\nscan1,abc,2,3,0\n",
        )
        .unwrap();
        assert!(matches!(load_candidates(&p), Err(Error::NonNumeric { .. })));

        fs::write(&p, "seriesuid,coordX,coordY,coordZ,class\nscan1,1,2,3,7\n").unwrap();
        assert!(matches!(
            load_candidates(&p),
            Err(Error::UnknownLabel { .. })
        ));
    }

    #[test]
    fn annotation_with_negative_diameter_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(
            &p,
            "seriesuid,coordX,coordY,coordZ,diameter_mm\ns,1,2,3,-3\n",
        )
        .unwrap();
        assert!(matches!(load_annotations(&p), Err(Error::InvalidValue(_))));
        fs::write(
            &p,
            "seriesuid,coordX,coordY,coordZ,diameter_mm\ns,1,2,3,6.5\n",
        )
        .unwrap();
        assert_eq!(load_annotations(&p).unwrap()[0].diameter_mm, 6.5);
    }

    #[test]
    fn candidates_with_probability_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pred.csv");
        let mut c = Candidate::new("s", [1.5, -2.25, 3.0], Some(1));
        c.probability = Some(0.875);
        save_candidates(&[c.clone()], &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("seriesuid,coordX,coordY,coordZ,class,probability\n"));
        assert_eq!(load_candidates(&p).unwrap(), vec![c]);
    }
}
