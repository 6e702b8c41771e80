//! FTS1 feature files: little-endian `"FTS1"`, u32 rows, u32 dim, f32
//! row-major matrix, u32 labels. Ids and metadata live in `<path>.json`.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::features::{FeatureMeta, FeatureSet};
use crate::error::{Error, Result};

pub const FTS1_MAGIC: &[u8; 4] = b"FTS1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    ids: Vec<String>,
    meta: FeatureMeta,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn parse_err(field: &'static str, detail: impl Into<String>) -> Error {
    Error::Parse {
        format: "FTS1",
        field,
        detail: detail.into(),
    }
}

pub fn encode_features(fs: &FeatureSet) -> Vec<u8> {
    let (rows, dim) = fs.features.dim();
    let mut out = Vec::with_capacity(12 + 4 * rows * (dim + 1));
    out.extend_from_slice(FTS1_MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in fs.features.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for &l in &fs.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<(Array2<f64>, Vec<usize>)> {
    let word = |i: usize, field: &'static str| -> Result<[u8; 4]> {
        bytes
            .get(i..i + 4)
            .map(|b| b.try_into().expect("4 bytes"))
            .ok_or_else(|| parse_err(field, format!("truncated at byte {i}")))
    };
    if word(0, "magic")? != *FTS1_MAGIC {
        return Err(parse_err("magic", "expected FTS1"));
    }
    let rows = u32::from_le_bytes(word(4, "rows")?) as usize;
    let dim = u32::from_le_bytes(word(8, "dim")?) as usize;
    let expected = 12 + 4 * rows * dim + 4 * rows;
    if bytes.len() != expected {
        return Err(parse_err(
            "payload",
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let mut values = Vec::with_capacity(rows * dim);
    for k in 0..rows * dim {
        let v = f32::from_le_bytes(word(12 + 4 * k, "matrix")?);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "FTS1 matrix",
                index: k,
            });
        }
        values.push(v as f64);
    }
    let base = 12 + 4 * rows * dim;
    let labels = (0..rows)
        .map(|r| word(base + 4 * r, "labels").map(|w| u32::from_le_bytes(w) as usize))
        .collect::<Result<Vec<_>>>()?;
    let features = Array2::from_shape_vec((rows, dim), values).expect("length checked");
    Ok((features, labels))
}

pub fn write_features(path: impl AsRef<Path>, fs: &FeatureSet) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_features(fs)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&Sidecar {
        ids: fs.ids.clone(),
        meta: fs.meta.clone(),
    })?;
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (features, labels) = decode_features(&bytes)?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    FeatureSet::new(features, labels, sidecar.ids, sidecar.meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureSet {
        FeatureSet::new(
            Array2::from_shape_vec((2, 3), vec![0.5, -1.25, 3.0, 1e-3f32 as f64, 0.0, 7.75]).unwrap(),
            vec![1, 0],
            vec!["a".into(), "b".into()],
            FeatureMeta {
                checkpoint_hash: Some("abc".into()),
                stage: None,
                test_trim: 0.9,
                target_length: 120,
                centered: true,
            },
        )
        .unwrap()
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.fts");
        let fs = sample();
        write_features(&path, &fs).unwrap();
        assert_eq!(read_features(&path).unwrap(), fs);
        assert!(sidecar_path(&path).ends_with("x.fts.json"));
    }

    #[test]
    fn rejects_bad_payloads() {
        let bytes = encode_features(&sample());
        assert!(decode_features(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_features(&bad), Err(Error::Parse { .. })));
        let mut nan = bytes;
        nan[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_features(&nan), Err(Error::NonFinite { index: 0, .. })));
    }
}
