//! Tensor files: `<name>.bin` holds little-endian `f64` values in row-major
//! order, `<name>.json` holds `{"shape":[...],"dtype":"f64"}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct Header {
    shape: Vec<usize>,
    dtype: String,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    let with = |ext: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".bin"), with(".json"))
}

/// Writes `stem.bin` and `stem.json`.
pub fn save_tensor(stem: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let (bin, json) = paths(stem.as_ref());
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let header = Header {
        shape: t.shape().to_vec(),
        dtype: "f64".into(),
    };
    let text = serde_json::to_string(&header).map_err(|e| Error::json(&json, e))?;
    fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

pub fn load_tensor(stem: impl AsRef<Path>) -> Result<Tensor> {
    let (bin, json) = paths(stem.as_ref());
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::json(&json, e))?;
    if header.dtype != "f64" {
        return Err(Error::InvalidArgument(format!(
            "{}: unsupported dtype {:?}",
            json.display(),
            header.dtype
        )));
    }
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::InvalidArgument(format!("{}: truncated data", bin.display())));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(header.shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn roundtrip_is_bitwise(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let t = Tensor::from_fn(&dims, |i| ((i as u64 ^ seed) as f64).sin() * 1e3);
            let dir = tempfile::tempdir().unwrap();
            let stem = dir.path().join("x");
            save_tensor(&stem, &t).unwrap();
            prop_assert_eq!(load_tensor(&stem).unwrap(), t);
        }
    }

    #[test]
    fn header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("h");
        save_tensor(&stem, &Tensor::zeros(&[2, 3])).unwrap();
        let text = fs::read_to_string(stem.with_extension("json")).unwrap();
        assert_eq!(text, r#"{"shape":[2,3],"dtype":"f64"}"#);
        assert_eq!(fs::read(stem.with_extension("bin")).unwrap().len(), 48);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("bad");
        save_tensor(&stem, &Tensor::zeros(&[4])).unwrap();
        fs::write(stem.with_extension("json"), r#"{"shape":[5],"dtype":"f64"}"#).unwrap();
        assert!(load_tensor(&stem).is_err());
    }
}
