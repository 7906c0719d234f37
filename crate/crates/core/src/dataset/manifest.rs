use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::SlicePlane;

/// One slice of a prepared volume. `path` points at the normalized volume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub path: PathBuf,
    pub patient_id: String,
    pub plane: SlicePlane,
    pub index: usize,
    pub h: usize,
    pub w: usize,
}

/// One JSON object per line.
pub fn write_manifest(path: &Path, records: &[SliceRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("record serializes");
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<SliceRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Ingest(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_record_per_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let recs = vec![
            SliceRecord {
                path: "a.vol".into(),
                patient_id: "p1".into(),
                plane: SlicePlane::InPlane,
                index: 0,
                h: 4,
                w: 4,
            },
            SliceRecord {
                path: "a.vol".into(),
                patient_id: "p1".into(),
                plane: SlicePlane::ThroughHd,
                index: 3,
                h: 4,
                w: 2,
            },
        ];
        write_manifest(&path, &recs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text
            .lines()
            .next()
            .unwrap()
            .contains("\"plane\":\"in_plane\""));
        assert_eq!(read_manifest(&path).unwrap(), recs);
    }
}
