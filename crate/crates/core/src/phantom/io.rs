//! `.fhv` volume files and on-disk dataset trees.
//!
//! Byte layout, all integers and floats little-endian:
//!
//! | field          | type                   |
//! |----------------|------------------------|
//! | magic          | `b"FHV1"`              |
//! | dims           | 3 × u32 (x, y, z)      |
//! | spacing        | 3 × f64 (mm)           |
//! | label          | u8 (0 NOR, 1 HCM)      |
//! | timepoint      | u8 (0 ED, 1 ES)        |
//! | center_id      | u16 length + UTF-8     |
//! | subject_id     | u16 length + UTF-8     |
//! | intensities    | x·y·z × f32, x fastest |
//! | mask           | x·y·z × u8, x fastest  |
//!
//! A dataset directory holds `<center>/<subject>_<ED|ES>.fhv` plus a
//! `manifest.json` summarising per-center counts.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CenterDataset, ClassLabel, PhantomError, Result, Subject, Timepoint, Volume};
use crate::grid::Grid3;

pub const MAGIC: &[u8; 4] = b"FHV1";
pub const MANIFEST: &str = "manifest.json";

fn format_err(path: &str, reason: impl Into<String>) -> PhantomError {
    PhantomError::Format {
        path: path.to_string(),
        reason: reason.into(),
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| format_err(s, "identifier longer than 65535 bytes"))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    let n = v.intensities.len();
    let mut out = Vec::with_capacity(64 + 5 * n);
    out.extend_from_slice(MAGIC);
    for d in v.dims() {
        let d = u32::try_from(d).map_err(|_| format_err(&v.subject_id, "dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for s in v.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.push(v.label.as_u8());
    out.push(match v.timepoint {
        Timepoint::ED => 0,
        Timepoint::ES => 1,
    });
    put_str(&mut out, &v.center_id)?;
    put_str(&mut out, &v.subject_id)?;
    for &x in v.intensities.as_slice() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out.extend_from_slice(v.mask.as_slice());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    name: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err(self.name, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| format_err(self.name, "identifier is not UTF-8"))
    }
}

pub fn decode_volume(bytes: &[u8], name: &str) -> Result<Volume> {
    let mut c = Cursor { bytes, pos: 0, name };
    if c.take(4)? != MAGIC {
        return Err(format_err(name, "bad magic, expected FHV1"));
    }
    let dims = [c.u32()? as usize, c.u32()? as usize, c.u32()? as usize];
    let spacing = [c.f64()?, c.f64()?, c.f64()?];
    if spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(format_err(name, "non-positive spacing"));
    }
    let label = ClassLabel::from_u8(c.u8()?).ok_or_else(|| format_err(name, "label must be 0 or 1"))?;
    let timepoint = match c.u8()? {
        0 => Timepoint::ED,
        1 => Timepoint::ES,
        _ => return Err(format_err(name, "timepoint must be 0 or 1")),
    };
    let center_id = c.string()?;
    let subject_id = c.string()?;
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| format_err(name, "dimensions overflow"))?;
    let raw = c.take(n * 4)?;
    let intensities = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    let mask = c.take(n)?.to_vec();
    if mask.iter().any(|&m| m > 3) {
        return Err(format_err(name, "mask value outside {0,1,2,3}"));
    }
    if c.pos != bytes.len() {
        return Err(format_err(name, "trailing bytes"));
    }
    Ok(Volume {
        intensities: Grid3::from_vec(dims, intensities).expect("length checked"),
        spacing,
        mask: Grid3::from_vec(dims, mask).expect("length checked"),
        label,
        center_id,
        subject_id,
        timepoint,
    })
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_volume(v)?)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_volume(&bytes, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCenter {
    pub subjects: usize,
    pub samples: usize,
    pub nor: usize,
    pub hcm: usize,
    pub class_balance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub centers: BTreeMap<String, ManifestCenter>,
    pub total_subjects: usize,
    pub total_files: usize,
}

impl Manifest {
    pub fn describe(seed: u64, centers: &[CenterDataset]) -> Self {
        let entries: BTreeMap<_, _> = centers
            .iter()
            .map(|c| {
                let (nor, hcm) = c.class_counts();
                let subjects = c.subjects.len();
                (
                    c.center_id.clone(),
                    ManifestCenter {
                        subjects,
                        samples: c.sample_count(),
                        nor,
                        hcm,
                        class_balance: if subjects == 0 { 0.0 } else { hcm as f64 / subjects as f64 },
                    },
                )
            })
            .collect();
        Self {
            seed,
            total_subjects: entries.values().map(|c| c.subjects).sum(),
            total_files: entries.values().map(|c| c.samples).sum(),
            centers: entries,
        }
    }
}

/// Writes every volume plus `manifest.json` under `root`.
pub fn write_dataset(root: &Path, seed: u64, centers: &[CenterDataset]) -> Result<Manifest> {
    fs::create_dir_all(root)?;
    for c in centers {
        let dir = root.join(&c.center_id);
        fs::create_dir_all(&dir)?;
        for v in c.volumes() {
            write_volume(&dir.join(format!("{}.fhv", v.sample_key())), v)?;
        }
    }
    let manifest = Manifest::describe(seed, centers);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(root.join(MANIFEST), json + "\n")?;
    Ok(manifest)
}

/// Loads a dataset tree; centers and subjects come back sorted by id.
pub fn read_dataset(root: &Path) -> Result<Vec<CenterDataset>> {
    let mut center_dirs: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    center_dirs.sort();
    let mut centers = Vec::new();
    for dir in center_dirs {
        let center_id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| format_err(&dir.display().to_string(), "non UTF-8 directory name"))?
            .to_string();
        let mut files: Vec<_> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "fhv"))
            .collect();
        files.sort();
        let mut by_subject: BTreeMap<String, (Option<Volume>, Option<Volume>)> = BTreeMap::new();
        for path in files {
            let v = read_volume(&path)?;
            let name = path.display().to_string();
            if v.center_id != center_id {
                return Err(format_err(&name, format!("center_id {} does not match directory", v.center_id)));
            }
            let slot = by_subject.entry(v.subject_id.clone()).or_default();
            let target = match v.timepoint {
                Timepoint::ED => &mut slot.0,
                Timepoint::ES => &mut slot.1,
            };
            if target.replace(v).is_some() {
                return Err(format_err(&name, "duplicate timepoint for subject"));
            }
        }
        let mut subjects = Vec::new();
        for (subject_id, pair) in by_subject {
            let (Some(ed), Some(es)) = pair else {
                return Err(format_err(&subject_id, "subject is missing ED or ES"));
            };
            if ed.label != es.label {
                return Err(format_err(&subject_id, "ED and ES labels differ"));
            }
            subjects.push(Subject {
                subject_id,
                label: ed.label,
                ed,
                es,
            });
        }
        if !subjects.is_empty() {
            centers.push(CenterDataset { center_id, subjects });
        }
    }
    Ok(centers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Volume {
        Volume {
            intensities: Grid3::from_fn([3, 2, 2], |x, y, z| x as f64 * 0.5 - y as f64 + z as f64 * 0.25),
            spacing: [1.25, 1.25, 10.0],
            mask: Grid3::from_fn([3, 2, 2], |x, _, z| ((x + z) % 4) as u8),
            label: ClassLabel::Hypertrophic,
            center_id: "acdc".into(),
            subject_id: "acdc-s001".into(),
            timepoint: Timepoint::ES,
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode_volume(&tiny()).unwrap();
        assert_eq!(&bytes[..4], b"FHV1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(bytes[16..24].try_into().unwrap()), 1.25);
        assert_eq!(bytes[40], 1);
        assert_eq!(bytes[41], 1);
        let header = 4 + 12 + 24 + 2 + 2 + 4 + 2 + 9;
        assert_eq!(bytes.len(), header + 12 * 4 + 12);
    }

    #[test]
    fn decode_recovers_f32_values() {
        let v = tiny();
        let back = decode_volume(&encode_volume(&v).unwrap(), "t").unwrap();
        assert_eq!(back.mask, v.mask);
        assert_eq!(back.sample_key(), "acdc-s001_ES");
        for (a, b) in back.intensities.as_slice().iter().zip(v.intensities.as_slice()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode_volume(&tiny()).unwrap();
        assert!(decode_volume(&bytes[..bytes.len() - 1], "t").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_volume(&bad, "t").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_volume(&extra, "t").is_err());
        let mut bad_mask = bytes;
        *bad_mask.last_mut().unwrap() = 9;
        assert!(decode_volume(&bad_mask, "t").is_err());
    }
}
