//! Tensor files: raw little-endian f32 data plus a JSON sidecar
//! `<path>.json` holding `{name, shape, elem}`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::program::ElemType;
use crate::value::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub name: String,
    pub shape: Vec<usize>,
    pub elem: ElemType,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_tensor(path: &Path, name: &str, elem: ElemType, t: &Tensor) -> io::Result<()> {
    let bytes: Vec<u8> = t.data.iter().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    let meta = Sidecar { name: name.to_string(), shape: t.shape.clone(), elem };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)
}

pub fn read_tensor(path: &Path) -> io::Result<(Sidecar, Tensor)> {
    let meta: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let bytes = fs::read(path)?;
    let n: usize = meta.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("{}: expected {} bytes for shape {:?}, found {}", path.display(), 4 * n, meta.shape, bytes.len()),
        ));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let shape = meta.shape.clone();
    Ok((meta, Tensor::new(shape, data)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, f32::MIN_POSITIVE, 7.0]);
        write_tensor(&path, "x", ElemType::F32, &t).unwrap();
        let (meta, back) = read_tensor(&path).unwrap();
        assert_eq!(meta.name, "x");
        assert_eq!(back, t);
    }
}
